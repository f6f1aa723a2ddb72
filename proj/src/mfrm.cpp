#include "medfor/mfrm.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <spdlog/spdlog.h>

#include "medfor/errors.hpp"
#include "medfor/rng.hpp"

namespace medfor {

Matrix FeatureBank::values() const {
    Matrix v = Matrix::Zero(static_cast<Eigen::Index>(rows()), 2);
    for (std::size_t i = 0; i < rows(); ++i) v(static_cast<Eigen::Index>(i), labels[i] == Label::fake ? 1 : 0) = 1.0;
    return v;
}

void FeatureBank::validate() const {
    if (keys.rows() != static_cast<Eigen::Index>(labels.size()) || provenance.size() != labels.size()) {
        throw ValidationError("feature bank row counts disagree: keys " + std::to_string(keys.rows()) + ", labels " +
                              std::to_string(labels.size()) + ", provenance " + std::to_string(provenance.size()));
    }
    for (Eigen::Index r = 0; r < keys.rows(); ++r) {
        if (std::abs(keys.row(r).norm() - 1.0) > 1e-6) {
            throw ValidationError("feature bank key " + std::to_string(r) + " is not unit norm");
        }
    }
}

bool FeatureBank::operator==(const FeatureBank& other) const {
    return keys.rows() == other.keys.rows() && keys.cols() == other.keys.cols() && keys == other.keys &&
           labels == other.labels && alpha == other.alpha && beta == other.beta && provenance == other.provenance;
}

DetectionResult make_detection(const Eigen::Vector2d& logits, bool used_bank) {
    if (!logits.allFinite()) throw ValidationError("non-finite detection logits");
    DetectionResult r;
    r.logits = logits;
    r.fake_probability = 1.0 / (1.0 + std::exp(logits(0) - logits(1)));
    r.predicted = logits(1) > logits(0) ? Label::fake : Label::real;
    r.used_bank = used_bank;
    return r;
}

Vector affinity(const Vector& query, const FeatureBank& bank) {
    if (!bank.empty() && query.size() != bank.dim()) {
        throw DimensionError("query has " + std::to_string(query.size()) + " channels but the feature bank stores " +
                             std::to_string(bank.dim()) + "-channel keys; rebuild the bank with this backbone");
    }
    if (std::abs(query.norm() - 1.0) > kQueryNormTolerance) {
        throw ValidationError("affinity query must be L2-normalized (norm " + std::to_string(query.norm()) + ")");
    }
    const Vector cosine = bank.keys * query;
    return (-bank.alpha * (1.0 - cosine.array())).exp().matrix();
}

DetectionResult blended_logits(const Vector& query, const FeatureBank& bank, const TextClassifier& classifier) {
    const Eigen::Vector2d prior = logits(query, classifier, 1.0);
    if (bank.empty()) return make_detection(prior, false);
    const Vector a = affinity(query, bank);
    const Eigen::Vector2d retrieved = bank.values().transpose() * a;
    return make_detection(bank.beta * retrieved + prior, true);
}

std::vector<DatasetRecord> sample_bank_records(const std::vector<DatasetRecord>& records, int n_per_class,
                                               std::uint64_t seed) {
    if (n_per_class < 1) throw ValidationError("bank needs at least one sample per class");
    std::vector<DatasetRecord> pool[2];
    for (const auto& r : records) {
        if (r.split && *r.split == Split::train) pool[static_cast<int>(r.label)].push_back(r);
    }
    const auto n = static_cast<std::size_t>(n_per_class);
    if (pool[0].size() < n || pool[1].size() < n) {
        throw ValidationError("bank needs " + std::to_string(n) + " train samples per class; have " +
                              std::to_string(pool[0].size()) + " real and " + std::to_string(pool[1].size()) + " fake");
    }
    std::vector<DatasetRecord> picked;
    for (int cls = 0; cls < 2; ++cls) {
        Rng rng(derive_seed(seed, "bank-sample", static_cast<std::uint64_t>(cls)));
        auto& p = pool[cls];
        // Partial Fisher-Yates: first n entries are the draw.
        for (std::size_t i = 0; i < n; ++i) std::swap(p[i], p[i + rng.below(p.size() - i)]);
        picked.insert(picked.end(), p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n));
    }
    return picked;
}

void append_key(FeatureBank& bank, const Vector& feature, Label label, std::string provenance) {
    if (!bank.empty() && feature.size() != bank.dim()) {
        throw DimensionError("feature has " + std::to_string(feature.size()) + " channels, bank keys have " +
                             std::to_string(bank.dim()));
    }
    Vector key = feature / feature.norm();
    quantize_f32(std::span<double>(key.data(), static_cast<std::size_t>(key.size())));
    const Eigen::Index r = bank.keys.rows();
    Matrix grown(r + 1, key.size());
    if (r > 0) grown.topRows(r) = bank.keys;
    grown.row(r) = key.transpose();
    bank.keys = std::move(grown);
    bank.labels.push_back(label);
    bank.provenance.push_back(std::move(provenance));
}

FeatureBank build_bank(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
                       const FeatureExtractor& extract, int n_per_class, std::uint64_t seed, double alpha,
                       double beta) {
    FeatureBank bank;
    bank.alpha = alpha;
    bank.beta = beta;
    for (const auto& rec : sample_bank_records(records, n_per_class, seed)) {
        append_key(bank, extract(resolve_record_path(manifest_path, rec)), rec.label, rec.path);
    }
    return bank;
}

FeatureBank build_bank(const std::filesystem::path& manifest_path, const FeatureExtractor& extract, int n_per_class,
                       std::uint64_t seed, double alpha, double beta) {
    return build_bank(load_manifest(manifest_path), manifest_path, extract, n_per_class, seed, alpha, beta);
}

FeatureBank insert_samples(const FeatureBank& bank, const std::vector<LabeledImage>& samples,
                           const FeatureExtractor& extract, std::size_t* skipped) {
    FeatureBank out = bank;
    std::size_t missed = 0;
    for (const auto& s : samples) {
        Vector feature;
        try {
            feature = extract(s.path);
        } catch (const IoError& e) {
            spdlog::warn("skipping {}: {}", s.path.string(), e.what());
            ++missed;
            continue;
        } catch (const FormatError& e) {
            spdlog::warn("skipping {}: {}", s.path.string(), e.what());
            ++missed;
            continue;
        }
        append_key(out, feature, s.label, s.path.string());
    }
    if (skipped) *skipped = missed;
    return out;
}

namespace {

template <typename T>
void put_le(std::string& out, T v) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
void put_f32(std::string& out, double v) { put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

class Reader {
public:
    Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

    template <typename T>
    T get() {
        need(sizeof(T), "field");
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(u);
    }
    double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    double f32() { return static_cast<double>(std::bit_cast<float>(get<std::uint32_t>())); }
    std::string bytes(std::size_t n) {
        need(n, "string");
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(source_ + ": truncated bank file (" + what + " at byte " + std::to_string(pos_) + ")");
        }
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    const std::string& data_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_bank(const FeatureBank& bank, const std::filesystem::path& path) {
    bank.validate();
    std::string blob = "MFRM";
    put_le<std::uint16_t>(blob, kBankFormatVersion);
    put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(bank.rows()));
    put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(bank.empty() ? 0 : bank.dim()));
    put_f64(blob, bank.alpha);
    put_f64(blob, bank.beta);
    for (Eigen::Index r = 0; r < bank.keys.rows(); ++r) {
        for (Eigen::Index c = 0; c < bank.keys.cols(); ++c) put_f32(blob, bank.keys(r, c));
    }
    for (Label l : bank.labels) blob.push_back(static_cast<char>(l));
    for (const auto& p : bank.provenance) {
        put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(p.size()));
        blob += p;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write bank " + path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("error writing bank " + path.string());
}

FeatureBank load_bank(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open bank " + path.string());
    const std::string blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    Reader rd(blob, path.string());
    if (rd.bytes(4) != "MFRM") throw FormatError(path.string() + ": not a feature bank (bad magic)");
    const auto version = rd.get<std::uint16_t>();
    if (version != kBankFormatVersion) {
        throw FormatError(path.string() + ": unsupported bank version " + std::to_string(version));
    }
    const auto rows = rd.get<std::uint32_t>();
    const auto dim = rd.get<std::uint32_t>();
    FeatureBank bank;
    bank.alpha = rd.f64();
    bank.beta = rd.f64();
    rd.need(static_cast<std::size_t>(rows) * dim * 4 + rows, "keys");
    bank.keys.resize(rows, dim);
    for (std::uint32_t r = 0; r < rows; ++r) {
        for (std::uint32_t c = 0; c < dim; ++c) bank.keys(r, c) = rd.f32();
    }
    bank.labels.reserve(rows);
    for (std::uint32_t r = 0; r < rows; ++r) {
        const auto v = rd.get<std::uint8_t>();
        if (v > 1) throw FormatError(path.string() + ": bank label byte out of range");
        bank.labels.push_back(static_cast<Label>(v));
    }
    for (std::uint32_t r = 0; r < rows; ++r) bank.provenance.push_back(rd.bytes(rd.get<std::uint32_t>()));
    if (!rd.at_end()) throw FormatError(path.string() + ": trailing bytes after bank payload");
    return bank;
}

}  // namespace medfor
