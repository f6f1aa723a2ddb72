#pragma once

// Independent reference implementations used by the unit and acceptance tests.
// Everything here is written as plain loops over indices, deliberately sharing
// no code with the library kernels it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "medfor/backbone.hpp"
#include "medfor/cdfa_adapter.hpp"
#include "medfor/mfrm.hpp"
#include "medfor/rng.hpp"
#include "medfor/tensor.hpp"
#include "medfor/tokens.hpp"
#include "medfor/trainer.hpp"

namespace oracle {

using medfor::GridShape;
using medfor::Matrix;
using medfor::Tensor;
using medfor::TokenSequence;
using medfor::Vector;

// Patch grid value at (y, x, c) with zero padding outside the grid.
inline double cell(const Matrix& patches, GridShape g, int y, int x, int c) {
    if (y < 0 || y >= g.height || x < 0 || x >= g.width) return 0.0;
    return patches(y * g.width + x, c);
}

// Same-padded stride-1 cross-correlation, weight [out, in, k, k].
inline Matrix conv(const Matrix& patches, GridShape g, const Tensor& w) {
    const int co = static_cast<int>(w.shape[0]);
    const int ci = static_cast<int>(w.shape[1]);
    const int k = static_cast<int>(w.shape[2]);
    Matrix out = Matrix::Zero(g.cells(), co);
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x)
            for (int o = 0; o < co; ++o) {
                double s = 0.0;
                for (int i = 0; i < ci; ++i)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx)
                            s += w.data[((o * ci + i) * k + ky) * k + kx] * cell(patches, g, y + ky - k / 2, x + kx - k / 2, i);
                out(y * g.width + x, o) = s;
            }
    return out;
}

// Depthwise same-padded cross-correlation, kernel [C, k, k].
inline Matrix depthwise(const Matrix& patches, GridShape g, const Tensor& kernel) {
    const int c = static_cast<int>(kernel.shape[0]);
    const int k = static_cast<int>(kernel.shape[1]);
    Matrix out = Matrix::Zero(g.cells(), c);
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double s = 0.0;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx)
                        s += kernel.data[(ch * k + ky) * k + kx] * cell(patches, g, y + ky - k / 2, x + kx - k / 2, ch);
                out(y * g.width + x, ch) = s;
            }
    return out;
}

inline Matrix relu(Matrix m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::max(0.0, m.data()[i]);
    return m;
}

// out[p, o] = sum_i in[p, i] * w[o, i]
inline Matrix pointwise(const Matrix& in, const Tensor& w) {
    const int co = static_cast<int>(w.shape[0]);
    const int ci = static_cast<int>(w.shape[1]);
    Matrix out = Matrix::Zero(in.rows(), co);
    for (Eigen::Index p = 0; p < in.rows(); ++p)
        for (int o = 0; o < co; ++o)
            for (int i = 0; i < ci; ++i) out(p, o) += in(p, i) * w.data[o * ci + i];
    return out;
}

inline Matrix patches_of(const TokenSequence& f) { return f.values.bottomRows(f.values.rows() - 1); }

inline Matrix noise_stream(const TokenSequence& f, const medfor::CdfaParams& p) {
    return pointwise(relu(depthwise(patches_of(f), f.grid, p.constrained_kernel)), p.noise_pointwise);
}

inline Matrix spatial_stream(const TokenSequence& f, const medfor::CdfaParams& p) {
    const Matrix r = relu(patches_of(f));
    const Matrix b1 = conv(r, f.grid, p.branch1x1);
    const Matrix b3 = conv(r, f.grid, p.branch3x3);
    const Matrix b5 = conv(r, f.grid, p.branch5x5);
    const Eigen::Index c = b1.cols();
    Matrix cat(r.rows(), 3 * c);
    for (Eigen::Index i = 0; i < r.rows(); ++i)
        for (Eigen::Index j = 0; j < c; ++j) {
            cat(i, j) = b1(i, j);
            cat(i, c + j) = b3(i, j);
            cat(i, 2 * c + j) = b5(i, j);
        }
    return pointwise(cat, p.inception_fuse);
}

// Scalar-loop retrieval blend: logits_k = beta * sum_i exp(-alpha (1 - q.k_i)) [label_i == k] + q . W_k
inline std::pair<double, double> blended(const Vector& q, const Matrix& keys, const std::vector<int>& labels,
                                         double alpha, double beta, const Matrix& w) {
    double out[2] = {0.0, 0.0};
    for (int cls = 0; cls < 2; ++cls) {
        double prior = 0.0;
        for (Eigen::Index j = 0; j < q.size(); ++j) prior += q(j) * w(cls, j);
        double vote = 0.0;
        for (Eigen::Index i = 0; i < keys.rows(); ++i) {
            if (labels[static_cast<std::size_t>(i)] != cls) continue;
            double dot = 0.0;
            for (Eigen::Index j = 0; j < q.size(); ++j) dot += q(j) * keys(i, j);
            vote += std::exp(-alpha * (1.0 - dot));
        }
        out[cls] = beta * vote + prior;
    }
    return {out[0], out[1]};
}

// Average precision from the precision-recall curve: walk every distinct score
// threshold from the top, and sum precision times the recall gained there.
inline double pr_curve_ap(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<double> thresholds = scores;
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    double positives = 0.0;
    for (int l : labels) positives += l;
    double prev_recall = 0.0;
    double ap = 0.0;
    for (double t : thresholds) {
        double tp = 0.0, fp = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= t) (labels[i] ? tp : fp) += 1.0;
        }
        const double recall = tp / positives;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    return ap;
}

inline double count_accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
    int hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline double bce(const std::vector<double>& probs, const std::vector<int>& labels) {
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) s -= labels[i] ? std::log(probs[i]) : std::log(1.0 - probs[i]);
    return s / static_cast<double>(probs.size());
}

// Fills every adapter tensor with seeded values of the given spread (lambda is
// kept away from zero and the constrained kernel projected), so that no
// gradient is trivially zero. Values are rounded to f32 like real parameters.
inline void randomize(medfor::AdapterSet& set, std::uint64_t seed, double spread) {
    medfor::Rng rng(seed);
    set.for_each([&](const std::string& name, Tensor& t, bool) {
        // Positive raw kernels keep the off-center sum well away from zero.
        const bool kernel = name.find("constrained_kernel") != std::string::npos;
        for (double& v : t.data) v = kernel ? rng.uniform(0.0, 1.0) : rng.uniform(-spread, spread);
        if (name.find("lambda") != std::string::npos) t.data[0] = rng.uniform(0.5, 1.5);
    });
    set.project_constraints();
    set.for_each([](const std::string&, Tensor& t, bool) { medfor::quantize_f32(t); });
}

struct GradCheck {
    std::string tensor;
    std::size_t checked = 0;
    double max_abs_error = 0.0;
    double scale = 0.0;  // max |gradient| over the checked entries
    double rel_error() const { return scale > 0.0 ? max_abs_error / scale : max_abs_error; }
};

// Central differences of `loss` with respect to adapter entries. Tensors with at
// most `full_below` entries are checked exhaustively; larger ones at
// `samples_per_tensor` seeded positions.
inline std::vector<GradCheck> finite_difference_check(medfor::AdapterSet params, const medfor::AdapterSet& analytic,
                                                      const std::function<double(const medfor::AdapterSet&)>& loss,
                                                      double step, std::size_t full_below,
                                                      std::size_t samples_per_tensor, std::uint64_t seed) {
    std::map<std::string, const Tensor*> grads;
    analytic.for_each([&](const std::string& name, const Tensor& t, bool) { grads[name] = &t; });
    std::vector<std::string> names;
    params.for_each([&](const std::string& name, Tensor&, bool) { names.push_back(name); });

    medfor::Rng rng(seed);
    std::vector<GradCheck> out;
    for (const auto& name : names) {
        Tensor* target = nullptr;
        params.for_each([&](const std::string& n, Tensor& t, bool) {
            if (n == name) target = &t;
        });
        const Tensor& g = *grads.at(name);
        std::vector<std::size_t> idx;
        if (target->numel() <= full_below) {
            for (std::size_t i = 0; i < target->numel(); ++i) idx.push_back(i);
        } else {
            for (std::size_t i = 0; i < samples_per_tensor; ++i) idx.push_back(rng.below(target->numel()));
        }
        GradCheck gc{name};
        for (std::size_t i : idx) {
            const double orig = target->data[i];
            target->data[i] = orig + step;
            const double up = loss(params);
            target->data[i] = orig - step;
            const double down = loss(params);
            target->data[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            gc.max_abs_error = std::max(gc.max_abs_error, std::abs(numeric - g.data[i]));
            gc.scale = std::max({gc.scale, std::abs(numeric), std::abs(g.data[i])});
            ++gc.checked;
        }
        out.push_back(gc);
    }
    return out;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        medfor::Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^
                        static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)) ^
                        (static_cast<std::uint64_t>(::getpid()) << 32));
        path_ = std::filesystem::temp_directory_path() / ("medfor-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace oracle
