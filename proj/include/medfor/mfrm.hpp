#pragma once

// Training-free retrieval cache used at test time. Keys are adapted, unit-norm
// features of a few labeled images; values are their one-hot labels. A query's
// affinity to every key, exp(-alpha (1 - cos)), votes for a class, and the vote
// is blended with the adapted classifier's cosine logits:
//   logits = beta * affinity * values + feature * W^T

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "medfor/backbone.hpp"
#include "medfor/manifest.hpp"
#include "medfor/tensor.hpp"

namespace medfor {

inline constexpr double kDefaultAlpha = 0.1;
inline constexpr double kDefaultBeta = 10.0;
inline constexpr int kDefaultBankShots = 16;
inline constexpr double kQueryNormTolerance = 1e-3;

struct FeatureBank {
    Matrix keys;  // rows x C, unit-norm rows, values representable in f32
    std::vector<Label> labels;
    double alpha = kDefaultAlpha;
    double beta = kDefaultBeta;
    std::vector<std::string> provenance;

    std::size_t rows() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    Eigen::Index dim() const noexcept { return keys.cols(); }
    // rows x 2 one-hot matrix.
    Matrix values() const;
    // Throws ValidationError if row counts disagree or a key is not unit norm.
    void validate() const;
    bool operator==(const FeatureBank& other) const;
};

struct DetectionResult {
    Eigen::Vector2d logits = Eigen::Vector2d::Zero();
    double fake_probability = 0.5;
    Label predicted = Label::real;
    bool used_bank = false;
};

// Softmax probability of the fake class and argmax label; exact ties go to real.
DetectionResult make_detection(const Eigen::Vector2d& logits, bool used_bank);

// exp(-alpha (1 - query . key)) for every key. The query must be unit norm
// within 1e-3.
Vector affinity(const Vector& query, const FeatureBank& bank);

// Blended logits against the adapted classifier (temperature 1). An empty bank
// falls back to classifier-only logits with used_bank = false.
DetectionResult blended_logits(const Vector& query, const FeatureBank& bank, const TextClassifier& classifier);

// Maps an image file to its unit-norm adapted feature; throws on unreadable input.
using FeatureExtractor = std::function<Vector(const std::filesystem::path&)>;

// Seeded uniform draw of n real + n fake records from the train split.
std::vector<DatasetRecord> sample_bank_records(const std::vector<DatasetRecord>& records, int n_per_class,
                                               std::uint64_t seed);

FeatureBank build_bank(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
                       const FeatureExtractor& extract, int n_per_class, std::uint64_t seed,
                       double alpha = kDefaultAlpha, double beta = kDefaultBeta);
FeatureBank build_bank(const std::filesystem::path& manifest_path, const FeatureExtractor& extract, int n_per_class,
                       std::uint64_t seed, double alpha = kDefaultAlpha, double beta = kDefaultBeta);

struct LabeledImage {
    std::filesystem::path path;
    Label label = Label::real;
};

// Returns a new bank with the readable samples appended; existing rows are
// copied unchanged. Unreadable images are skipped with a warning and counted.
FeatureBank insert_samples(const FeatureBank& bank, const std::vector<LabeledImage>& samples,
                           const FeatureExtractor& extract, std::size_t* skipped = nullptr);

// Appends one already-encoded key (normalized and rounded to f32).
void append_key(FeatureBank& bank, const Vector& feature, Label label, std::string provenance);

// Binary layout, all little-endian:
//   "MFRM" | u16 version | u32 rows | u32 C | f64 alpha | f64 beta
//   | rows*C f32 keys (row-major) | rows u8 labels (0 real, 1 fake)
//   | rows x (u32 byte length + UTF-8 provenance)
inline constexpr std::uint16_t kBankFormatVersion = 1;
void save_bank(const FeatureBank& bank, const std::filesystem::path& path);
FeatureBank load_bank(const std::filesystem::path& path);

}  // namespace medfor
