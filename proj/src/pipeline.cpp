#include "medfor/pipeline.hpp"

#include <cstdio>

#include <spdlog/spdlog.h>

#include "medfor/errors.hpp"
#include "medfor/image.hpp"

namespace medfor {

Detector::Detector(std::shared_ptr<const Backbone> backbone, std::optional<AdapterSet> adapters,
                   std::array<std::string, 2> prompts, FeatureBank bank)
    : backbone_(std::move(backbone)), adapters_(std::move(adapters)), bank_(std::move(bank)) {
    if (!backbone_) throw ConfigError("detector needs a backbone");
    if (adapters_) backbone_->validate_adapters(*adapters_);
    classifier_ = backbone_->build_text_classifier(prompts, adapters_ ? &adapters_->text : nullptr);
}

Vector Detector::encode(const ImageTensor& preprocessed) const {
    return backbone_->encode_image(preprocessed, adapters_ ? &*adapters_ : nullptr);
}

Vector Detector::encode_file(const std::filesystem::path& path) const {
    const auto& cfg = backbone_->config();
    return encode(preprocess(decode_image(path), cfg.input_resolution, cfg.normalization));
}

DetectionResult Detector::detect_feature(const Vector& feature) const {
    return blended_logits(feature, bank_, classifier_);
}

DetectionResult Detector::detect_file(const std::filesystem::path& path) const {
    return detect_feature(encode_file(path));
}

FeatureExtractor Detector::extractor() const {
    return [this](const std::filesystem::path& p) { return encode_file(p); };
}

DetectFn Detector::detect_fn() const {
    return [this](const std::filesystem::path& p) { return detect_file(p); };
}

namespace {

std::string mark(bool on) { return on ? "yes" : "no"; }

void render_rows(std::string& out, const char* a, const char* b, const std::vector<AblationRow>& rows) {
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        if (r.outcome) {
            char acc[16], ap[16];
            std::snprintf(acc, sizeof(acc), "%.1f", r.outcome->mean_acc * 100.0);
            if (r.outcome->mean_ap) {
                std::snprintf(ap, sizeof(ap), "%.1f", *r.outcome->mean_ap * 100.0);
            } else {
                std::snprintf(ap, sizeof(ap), "-");
            }
            cells.push_back({mark(r.first), mark(r.second), acc, ap});
        } else {
            cells.push_back({mark(r.first), mark(r.second), "unavailable", r.note});
        }
    }
    out += render_text_table({a, b, "Acc", "AP"}, cells);
}

nlohmann::json rows_json(const std::vector<AblationRow>& rows, const char* a, const char* b) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j{{a, r.first}, {b, r.second}};
        if (r.outcome) {
            j["acc"] = r.outcome->mean_acc;
            j["ap"] = r.outcome->mean_ap ? nlohmann::json(*r.outcome->mean_ap) : nlohmann::json(nullptr);
            nlohmann::json groups = nlohmann::json::array();
            for (const auto& g : r.outcome->groups) {
                groups.push_back({{"name", g.name}, {"acc", g.acc}, {"ap", g.ap ? nlohmann::json(*g.ap) : nlohmann::json(nullptr)}});
            }
            j["groups"] = groups;
        } else {
            j["unavailable"] = r.note;
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

}  // namespace

std::string AblationReport::render() const {
    std::string out = "Core components\n";
    render_rows(out, "CDFA", "MFRM", components);
    out += "\nFeature streams\n";
    render_rows(out, "Spatial", "Noise", streams);
    return out;
}

nlohmann::json AblationReport::to_json() const {
    return {{"components", rows_json(components, "cdfa", "mfrm")}, {"streams", rows_json(streams, "spatial", "noise")}};
}

AblationReport run_ablation(const AblationSetup& setup) {
    if (!setup.backbone) throw ConfigError("ablation needs a backbone");
    std::map<std::string, EvalOutcome> cache;

    // key: "none" or stream name; bank on/off
    auto run = [&](std::optional<StreamMode> mode, bool with_bank) -> AblationRow {
        AblationRow row;
        const std::string key = (mode ? std::string(to_string(*mode)) : std::string("none")) + (with_bank ? "+bank" : "");
        if (auto it = cache.find(key); it != cache.end()) {
            row.outcome = it->second;
            return row;
        }
        std::optional<AdapterSet> adapters;
        if (mode) {
            auto it = setup.adapters.find(*mode);
            if (it == setup.adapters.end()) {
                row.note = "no " + std::string(to_string(*mode)) + " checkpoint";
                return row;
            }
            adapters = it->second;
        }
        Detector detector(setup.backbone, adapters, setup.prompts);
        if (with_bank) {
            detector.set_bank(build_bank(setup.records, setup.manifest_path, detector.extractor(), setup.bank.n_per_class,
                                         setup.bank.seed, setup.bank.alpha, setup.bank.beta));
        }
        spdlog::info("ablation: evaluating {}", key);
        row.outcome = evaluate(setup.records, setup.manifest_path, detector.detect_fn(), setup.group_by, setup.threads);
        cache.emplace(key, *row.outcome);
        return row;
    };
    auto set = [](AblationRow row, bool a, bool b) {
        row.first = a;
        row.second = b;
        return row;
    };

    AblationReport report;
    report.components.push_back(set(run(std::nullopt, false), false, false));
    report.components.push_back(set(run(StreamMode::both, false), true, false));
    report.components.push_back(set(run(std::nullopt, true), false, true));
    report.components.push_back(set(run(StreamMode::both, true), true, true));
    report.streams.push_back(set(run(std::nullopt, true), false, false));
    report.streams.push_back(set(run(StreamMode::spatial_only, true), true, false));
    report.streams.push_back(set(run(StreamMode::noise_only, true), false, true));
    report.streams.push_back(set(run(StreamMode::both, true), true, true));
    return report;
}

}  // namespace medfor
