#include "medfor/manifest.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "medfor/errors.hpp"
#include "medfor/rng.hpp"

namespace medfor {

namespace {

std::string lower(std::string_view text) {
    std::string out(text);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

}  // namespace

std::string_view to_string(Label label) { return label == Label::fake ? "fake" : "real"; }

std::string_view to_string(Modality modality) {
    switch (modality) {
        case Modality::ultrasound: return "ultrasound";
        case Modality::endoscope: return "endoscope";
        case Modality::histopathology: return "histopathology";
        case Modality::mri: return "mri";
        case Modality::ct: return "ct";
        case Modality::xray: return "xray";
        case Modality::other: return "other";
    }
    return "other";
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Label parse_label(std::string_view text) {
    const auto t = lower(text);
    if (t == "real" || t == "0") return Label::real;
    if (t == "fake" || t == "1") return Label::fake;
    throw ValidationError("label must be \"real\" or \"fake\", got \"" + std::string(text) + "\"");
}

Modality parse_modality(std::string_view text) {
    const auto t = lower(text);
    if (t == "ultrasound" || t == "us") return Modality::ultrasound;
    if (t == "endoscope" || t == "endoscopy") return Modality::endoscope;
    if (t == "histopathology" || t == "pathology") return Modality::histopathology;
    if (t == "mri" || t == "mr") return Modality::mri;
    if (t == "ct") return Modality::ct;
    if (t == "xray" || t == "x-ray") return Modality::xray;
    if (t == "other") return Modality::other;
    throw ValidationError("unknown modality \"" + std::string(text) + "\"");
}

Split parse_split(std::string_view text) {
    const auto t = lower(text);
    if (t == "train") return Split::train;
    if (t == "test") return Split::test;
    throw ValidationError("split must be \"train\" or \"test\", got \"" + std::string(text) + "\"");
}

std::vector<DatasetRecord> parse_manifest(std::istream& in) {
    std::vector<DatasetRecord> records;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        DatasetRecord rec;
        try {
            const auto obj = nlohmann::json::parse(line);
            if (!obj.is_object()) throw ParseError(line_no, "record is not a JSON object");
            for (const char* key : {"path", "label", "modality", "generator"}) {
                if (!obj.contains(key)) throw ParseError(line_no, std::string("missing field `") + key + "`");
                if (!obj[key].is_string()) throw ParseError(line_no, std::string("field `") + key + "` must be a string");
            }
            rec.path = obj["path"].get<std::string>();
            if (rec.path.empty()) throw ParseError(line_no, "empty path");
            rec.label = parse_label(obj["label"].get<std::string>());
            rec.modality = parse_modality(obj["modality"].get<std::string>());
            rec.generator = obj["generator"].get<std::string>();
            if (obj.contains("split") && !obj["split"].is_null()) {
                if (!obj["split"].is_string()) throw ParseError(line_no, "field `split` must be a string");
                rec.split = parse_split(obj["split"].get<std::string>());
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line_no, e.what());
        } catch (const ValidationError& e) {
            throw ParseError(line_no, e.what());
        }
        if (!seen.insert(rec.path).second) {
            throw ValidationError("line " + std::to_string(line_no) + ": duplicate path \"" + rec.path + "\"");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<DatasetRecord> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    return parse_manifest(in);
}

void write_manifest(std::ostream& out, const std::vector<DatasetRecord>& records) {
    for (const auto& rec : records) {
        nlohmann::ordered_json obj;
        obj["path"] = rec.path;
        obj["label"] = to_string(rec.label);
        obj["modality"] = to_string(rec.modality);
        obj["generator"] = rec.generator;
        if (rec.split) obj["split"] = to_string(*rec.split);
        out << obj.dump() << '\n';
    }
}

void write_manifest(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest " + path.string());
    write_manifest(out, records);
    if (!out) throw IoError("error writing manifest " + path.string());
}

std::filesystem::path resolve_record_path(const std::filesystem::path& manifest_path, const DatasetRecord& record) {
    std::filesystem::path p(record.path);
    if (p.is_absolute()) return p;
    return manifest_path.parent_path() / p;
}

std::map<std::pair<Label, Split>, std::size_t> count_by_label_split(const std::vector<DatasetRecord>& records) {
    std::map<std::pair<Label, Split>, std::size_t> counts;
    for (const auto& rec : records) {
        if (rec.split) ++counts[{rec.label, *rec.split}];
    }
    return counts;
}

std::vector<DatasetRecord> assign_splits(const std::vector<DatasetRecord>& records, double train_fraction,
                                         std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ValidationError("train_fraction must lie in (0, 1)");
    }
    if (records.empty()) throw ValidationError("cannot split an empty record list");

    std::map<std::pair<Label, std::string>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) groups[{records[i].label, records[i].generator}].push_back(i);

    std::vector<DatasetRecord> out = records;
    for (auto& [key, members] : groups) {
        const std::string tag = std::string(to_string(key.first)) + "/" + key.second;
        if (members.size() < 2) {
            spdlog::warn("split group {} has {} record(s); assigning all to train", tag, members.size());
            for (auto i : members) out[i].split = Split::train;
            continue;
        }
        // The epsilon keeps fractions like 2/3 from flooring one short.
        const auto n_train =
            static_cast<std::size_t>(std::floor(static_cast<double>(members.size()) * train_fraction + 1e-9));
        Rng rng(derive_seed(seed, "split:" + tag));
        rng.shuffle(members);
        for (std::size_t k = 0; k < members.size(); ++k) out[members[k]].split = k < n_train ? Split::train : Split::test;
    }
    return out;
}

std::vector<DatasetRecord> filter_split(const std::vector<DatasetRecord>& records, Split split) {
    std::vector<DatasetRecord> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out),
                 [split](const DatasetRecord& r) { return r.split && *r.split == split; });
    return out;
}

}  // namespace medfor
