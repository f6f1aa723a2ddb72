#include "medfor/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <thread>

#include <spdlog/spdlog.h>

#include "medfor/errors.hpp"

namespace medfor {

namespace {

void check_binary(std::span<const int> labels, const char* what) {
    for (int v : labels) {
        if (v != 0 && v != 1) throw ValidationError(std::string(what) + ": value outside {0, 1}");
    }
}

std::string group_key(const SampleOutcome& s, GroupBy g) {
    return g == GroupBy::modality ? std::string(to_string(s.modality)) : s.generator;
}

}  // namespace

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw ValidationError("accuracy: length mismatch");
    if (labels.empty()) throw ValidationError("accuracy: empty input");
    check_binary(predictions, "accuracy");
    check_binary(labels, "accuracy");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ValidationError("average_precision: length mismatch");
    check_binary(labels, "average_precision");
    const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (positives == 0) throw ValidationError("average_precision: no positive labels");
    for (double s : scores) {
        if (std::isnan(s)) throw ValidationError("average_precision: NaN score");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double sum = 0.0;
    std::size_t seen = 0, hits = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::size_t block_hits = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            block_hits += labels[order[j]] == 1 ? 1 : 0;
            ++j;
        }
        seen += j - i;
        hits += block_hits;
        sum += static_cast<double>(block_hits) * static_cast<double>(hits) / static_cast<double>(seen);
        i = j;
    }
    return sum / static_cast<double>(positives);
}

std::string to_string(GroupBy g) { return g == GroupBy::modality ? "modality" : "generator"; }

GroupBy parse_group_by(std::string_view text) {
    if (text == "modality") return GroupBy::modality;
    if (text == "generator") return GroupBy::generator;
    throw ValidationError("unknown grouping '" + std::string(text) + "' (expected modality or generator)");
}

nlohmann::json EvalOutcome::to_json() const {
    nlohmann::ordered_json j;
    j["group_by"] = to_string(group_by);
    j["groups"] = nlohmann::ordered_json::array();
    for (const auto& g : groups) {
        j["groups"].push_back({{"name", g.name},
                               {"count", g.count},
                               {"positives", g.positives},
                               {"acc", g.acc},
                               {"ap", g.ap ? nlohmann::ordered_json(*g.ap) : nlohmann::ordered_json(nullptr)}});
    }
    j["mean_acc"] = mean_acc;
    j["mean_ap"] = mean_ap ? nlohmann::ordered_json(*mean_ap) : nlohmann::ordered_json(nullptr);
    j["errors"] = errors;
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : samples) {
        nlohmann::ordered_json r;
        r["id"] = s.id;
        r["label"] = s.label;
        r["modality"] = std::string(to_string(s.modality));
        r["generator"] = s.generator;
        if (s.error) {
            r["error"] = *s.error;
        } else {
            r["fake_probability"] = s.score;
            r["predicted"] = s.predicted;
            r["used_bank"] = s.used_bank;
        }
        j["samples"].push_back(std::move(r));
    }
    return j;
}

EvalOutcome summarize(std::vector<SampleOutcome> samples, GroupBy group_by) {
    EvalOutcome out;
    out.group_by = group_by;
    std::map<std::string, std::vector<const SampleOutcome*>> groups;
    for (const auto& s : samples) {
        if (s.error) {
            ++out.errors;
            continue;
        }
        groups[group_key(s, group_by)].push_back(&s);
    }
    double acc_sum = 0.0, ap_sum = 0.0;
    std::size_t ap_groups = 0;
    for (const auto& [name, members] : groups) {
        std::vector<int> preds, labels;
        std::vector<double> scores;
        for (const auto* s : members) {
            preds.push_back(s->predicted);
            labels.push_back(s->label);
            scores.push_back(s->score);
        }
        GroupMetrics g;
        g.name = name;
        g.count = members.size();
        g.positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
        g.acc = accuracy(preds, labels);
        if (g.positives > 0) {
            g.ap = average_precision(scores, labels);
            ap_sum += *g.ap;
            ++ap_groups;
        } else {
            spdlog::warn("group '{}' has no fake samples; AP omitted", name);
        }
        acc_sum += g.acc;
        out.groups.push_back(std::move(g));
    }
    if (!out.groups.empty()) out.mean_acc = acc_sum / static_cast<double>(out.groups.size());
    if (ap_groups > 0) out.mean_ap = ap_sum / static_cast<double>(ap_groups);
    out.samples = std::move(samples);
    return out;
}

EvalOutcome evaluate(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
                     const DetectFn& detect, GroupBy group_by, int threads) {
    const auto test = filter_split(records, Split::test);
    if (test.empty()) throw ValidationError("manifest has no test records");
    std::vector<SampleOutcome> out(test.size());
    auto run_one = [&](std::size_t i) {
        const auto& rec = test[i];
        SampleOutcome& s = out[i];
        s.id = rec.path;
        s.label = rec.label == Label::fake ? 1 : 0;
        s.modality = rec.modality;
        s.generator = rec.generator;
        try {
            const DetectionResult r = detect(resolve_record_path(manifest_path, rec));
            s.score = r.fake_probability;
            s.predicted = r.predicted == Label::fake ? 1 : 0;
            s.used_bank = r.used_bank;
        } catch (const std::exception& e) {
            s.error = e.what();
        }
    };
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), test.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < test.size(); ++i) run_one(i);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < test.size(); i += workers) run_one(i);
            });
        }
    }
    for (const auto& s : out) {
        if (s.error) spdlog::warn("detection failed for {}: {}", s.id, *s.error);
    }
    return summarize(std::move(out), group_by);
}

std::string format_cell(double acc, std::optional<double> ap) {
    char buf[32];
    if (ap) {
        std::snprintf(buf, sizeof(buf), "%.1f/%.1f", acc * 100.0, *ap * 100.0);
    } else {
        std::snprintf(buf, sizeof(buf), "%.1f/-", acc * 100.0);
    }
    return buf;
}

std::string render_text_table(const std::vector<std::string>& header,
                              const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(header.size(), 0);
    auto widen = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
    };
    widen(header);
    for (const auto& r : rows) widen(r);

    std::string out;
    auto emit = [&](const std::vector<std::string>& row) {
        std::string line;
        for (std::size_t c = 0; c < width.size(); ++c) {
            const std::string cell = c < row.size() ? row[c] : std::string();
            if (c > 0) line += "  ";
            line += cell + std::string(width[c] - cell.size(), ' ');
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + '\n';
    };
    emit(header);
    std::size_t total = 0;
    for (std::size_t w : width) total += w;
    out += std::string(total + 2 * (width.empty() ? 0 : width.size() - 1), '-') + '\n';
    for (const auto& r : rows) emit(r);
    return out;
}

std::string render_cross_group_table(const std::vector<std::pair<std::string, EvalOutcome>>& methods) {
    std::vector<std::string> names;
    for (const auto& [method, outcome] : methods) {
        for (const auto& g : outcome.groups) {
            if (std::find(names.begin(), names.end(), g.name) == names.end()) names.push_back(g.name);
        }
    }
    std::vector<std::string> header{"Method"};
    for (const auto& n : names) header.push_back(n);
    header.push_back("Mean");
    std::vector<std::vector<std::string>> rows;
    for (const auto& [method, outcome] : methods) {
        std::vector<std::string> row{method};
        for (const auto& n : names) {
            auto it = std::find_if(outcome.groups.begin(), outcome.groups.end(),
                                   [&](const GroupMetrics& g) { return g.name == n; });
            row.push_back(it == outcome.groups.end() ? "-" : format_cell(it->acc, it->ap));
        }
        row.push_back(outcome.groups.empty() ? "-" : format_cell(outcome.mean_acc, outcome.mean_ap));
        rows.push_back(std::move(row));
    }
    return render_text_table(header, rows);
}

}  // namespace medfor
