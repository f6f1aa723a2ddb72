#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medfor/manifest.hpp"
#include "medfor/mfrm.hpp"

namespace medfor {

// Fraction of exact matches between two {0,1} sequences.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

// Mean of the precision at each positive when ranking by descending score.
// Fake (1) is the positive class. Samples with equal scores are ranked as one
// block: every positive inside it gets the block's cumulative precision, so the
// result does not depend on input order.
double average_precision(std::span<const double> scores, std::span<const int> labels);

enum class GroupBy { modality, generator };
std::string to_string(GroupBy g);
GroupBy parse_group_by(std::string_view text);

struct SampleOutcome {
    std::string id;
    int label = 0;
    double score = 0.0;
    int predicted = 0;
    bool used_bank = false;
    Modality modality = Modality::other;
    std::string generator;
    std::optional<std::string> error;
};

struct GroupMetrics {
    std::string name;
    std::size_t count = 0;
    std::size_t positives = 0;
    double acc = 0.0;
    std::optional<double> ap;  // absent when the group has no fake sample
};

struct EvalOutcome {
    GroupBy group_by = GroupBy::modality;
    std::vector<SampleOutcome> samples;
    std::vector<GroupMetrics> groups;
    double mean_acc = 0.0;
    std::optional<double> mean_ap;
    std::size_t errors = 0;

    nlohmann::json to_json() const;
};

// Groups scored samples (errored ones are counted, not scored) and averages the
// per-group numbers with equal weight per group.
EvalOutcome summarize(std::vector<SampleOutcome> samples, GroupBy group_by);

using DetectFn = std::function<DetectionResult(const std::filesystem::path&)>;

// Runs `detect` on every test-split record. A record whose detection throws is
// kept as an error entry. `threads` > 1 fans detection out; results are stored by
// record index, so the outcome does not depend on scheduling.
EvalOutcome evaluate(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
                     const DetectFn& detect, GroupBy group_by, int threads = 1);

// "91.6/92.2" with both numbers in percent; "-" for a missing AP.
std::string format_cell(double acc, std::optional<double> ap);

// Plain text table with a header rule; columns are padded to their widest cell.
std::string render_text_table(const std::vector<std::string>& header,
                              const std::vector<std::vector<std::string>>& rows);

// One row per method, one Acc/AP column per group plus a Mean column. Groups
// absent from a method's outcome render as "-".
std::string render_cross_group_table(const std::vector<std::pair<std::string, EvalOutcome>>& methods);

}  // namespace medfor
