#pragma once

// Detection built from a frozen backbone, optional trained adapters and an
// optional retrieval bank, plus the component and stream ablation harness.

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medfor/backbone.hpp"
#include "medfor/cdfa_adapter.hpp"
#include "medfor/metrics.hpp"
#include "medfor/mfrm.hpp"

namespace medfor {

class Detector {
public:
    // No adapters means the frozen encoder and unadapted prompt classifier.
    Detector(std::shared_ptr<const Backbone> backbone, std::optional<AdapterSet> adapters,
             std::array<std::string, 2> prompts = kDefaultPrompts, FeatureBank bank = {});

    const Backbone& backbone() const noexcept { return *backbone_; }
    const std::optional<AdapterSet>& adapters() const noexcept { return adapters_; }
    const TextClassifier& classifier() const noexcept { return classifier_; }
    const FeatureBank& bank() const noexcept { return bank_; }
    void set_bank(FeatureBank bank) { bank_ = std::move(bank); }

    Vector encode(const ImageTensor& preprocessed) const;
    // Decode, resize/crop, normalize and encode one file.
    Vector encode_file(const std::filesystem::path& path) const;
    DetectionResult detect_feature(const Vector& feature) const;
    DetectionResult detect_file(const std::filesystem::path& path) const;

    // Bound to this detector; valid while it lives.
    FeatureExtractor extractor() const;
    DetectFn detect_fn() const;

private:
    std::shared_ptr<const Backbone> backbone_;
    std::optional<AdapterSet> adapters_;
    TextClassifier classifier_;
    FeatureBank bank_;
};

struct BankSettings {
    int n_per_class = kDefaultBankShots;
    std::uint64_t seed = 0;
    double alpha = kDefaultAlpha;
    double beta = kDefaultBeta;
};

struct AblationRow {
    bool first = false;   // CDFA (components) or spatial (streams)
    bool second = false;  // MFRM (components) or noise (streams)
    std::optional<EvalOutcome> outcome;
    std::string note;  // why the row is unavailable
};

struct AblationReport {
    std::vector<AblationRow> components;  // CDFA x MFRM
    std::vector<AblationRow> streams;     // spatial x noise, MFRM on
    std::string render() const;
    nlohmann::json to_json() const;
};

struct AblationSetup {
    std::shared_ptr<const Backbone> backbone;
    std::vector<DatasetRecord> records;  // with train and test splits
    std::filesystem::path manifest_path;
    std::array<std::string, 2> prompts = kDefaultPrompts;
    BankSettings bank;
    // Trained adapters keyed by stream mode; a missing entry marks dependent rows unavailable.
    std::map<StreamMode, AdapterSet> adapters;
    GroupBy group_by = GroupBy::modality;
    int threads = 1;
};

// Four component rows (zero-shot, CDFA only, MFRM only, both) and four stream
// rows (no CDFA, spatial only, noise only, both; all with the bank).
AblationReport run_ablation(const AblationSetup& setup);

}  // namespace medfor
