#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace medfor {

enum class Label : std::uint8_t { real = 0, fake = 1 };
enum class Modality { ultrasound, endoscope, histopathology, mri, ct, xray, other };
enum class Split { train, test };

std::string_view to_string(Label label);
std::string_view to_string(Modality modality);
std::string_view to_string(Split split);
Label parse_label(std::string_view text);
Modality parse_modality(std::string_view text);
Split parse_split(std::string_view text);

struct DatasetRecord {
    std::string path;
    Label label = Label::real;
    Modality modality = Modality::other;
    std::string generator;
    std::optional<Split> split;

    bool operator==(const DatasetRecord&) const = default;
};

// JSON Lines manifest, one record per line. Blank lines are skipped.
// Throws ParseError (with line number) for malformed lines and
// ValidationError for duplicate paths.
std::vector<DatasetRecord> load_manifest(const std::filesystem::path& path);
std::vector<DatasetRecord> parse_manifest(std::istream& in);
void write_manifest(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
void write_manifest(std::ostream& out, const std::vector<DatasetRecord>& records);

// Record paths are relative to the manifest's directory unless absolute.
std::filesystem::path resolve_record_path(const std::filesystem::path& manifest_path, const DatasetRecord& record);

// Counts keyed by (label, split); records without a split are not counted.
std::map<std::pair<Label, Split>, std::size_t> count_by_label_split(const std::vector<DatasetRecord>& records);

// Stratified per (label, generator): floor(size * train_fraction) of each group
// goes to train, the rest to test. Groups smaller than 2 go entirely to train.
// Pure function of (records, train_fraction, seed); input order is preserved.
std::vector<DatasetRecord> assign_splits(const std::vector<DatasetRecord>& records, double train_fraction,
                                         std::uint64_t seed);

std::vector<DatasetRecord> filter_split(const std::vector<DatasetRecord>& records, Split split);

}  // namespace medfor
