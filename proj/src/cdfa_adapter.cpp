#include "medfor/cdfa_adapter.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "medfor/errors.hpp"
#include "medfor/nn.hpp"

namespace medfor {

std::string_view to_string(StreamMode mode) {
    switch (mode) {
        case StreamMode::both: return "both";
        case StreamMode::spatial_only: return "spatial";
        case StreamMode::noise_only: return "noise";
    }
    return "both";
}

StreamMode parse_stream_mode(std::string_view text) {
    if (text == "both") return StreamMode::both;
    if (text == "spatial") return StreamMode::spatial_only;
    if (text == "noise") return StreamMode::noise_only;
    throw ConfigError("streams must be one of both|spatial|noise, got \"" + std::string(text) + "\"");
}

std::string_view to_string(LambdaTarget target) { return target == LambdaTarget::noise ? "noise" : "spatial"; }

LambdaTarget parse_lambda_target(std::string_view text) {
    if (text == "noise") return LambdaTarget::noise;
    if (text == "spatial") return LambdaTarget::spatial;
    throw ConfigError("lambda target must be noise|spatial, got \"" + std::string(text) + "\"");
}

namespace {

constexpr int kCenter = kConstrainedKernelSize / 2;
constexpr int kTaps = kConstrainedKernelSize * kConstrainedKernelSize;

void kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
}

// Row p of the result holds row q of x, where q is p's grid cell moved by
// (dy, dx); cells that fall off the grid read zero.
Matrix shifted(const Matrix& x, GridShape g, int dy, int dx) {
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    for (int y = 0; y < g.height; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= g.height) continue;
        for (int xx = 0; xx < g.width; ++xx) {
            const int sx = xx + dx;
            if (sx < 0 || sx >= g.width) continue;
            out.row(y * g.width + xx) = x.row(sy * g.width + sx);
        }
    }
    return out;
}

// Adjoint of shifted(): scatter-add d rows back to their source cells.
void unshift_add(const Matrix& d, GridShape g, int dy, int dx, Matrix& target) {
    for (int y = 0; y < g.height; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= g.height) continue;
        for (int xx = 0; xx < g.width; ++xx) {
            const int sx = xx + dx;
            if (sx < 0 || sx >= g.width) continue;
            target.row(sy * g.width + sx) += d.row(y * g.width + xx);
        }
    }
}

// [out, in] slice of a [out, in, k, k] weight at tap (ky, kx).
Matrix tap_matrix(const Tensor& w, int k, int ky, int kx) {
    const auto c_out = w.shape[0];
    const auto c_in = w.shape[1];
    Matrix m(c_out, c_in);
    for (Eigen::Index o = 0; o < c_out; ++o) {
        for (Eigen::Index i = 0; i < c_in; ++i) m(o, i) = w.data[static_cast<std::size_t>(((o * c_in + i) * k + ky) * k + kx)];
    }
    return m;
}

void add_tap_matrix(Tensor& w, int k, int ky, int kx, const Matrix& m) {
    const auto c_in = w.shape[1];
    for (Eigen::Index o = 0; o < m.rows(); ++o) {
        for (Eigen::Index i = 0; i < m.cols(); ++i) {
            w.data[static_cast<std::size_t>(((o * c_in + i) * k + ky) * k + kx)] += m(o, i);
        }
    }
}

// Zero-padded stride-1 cross-correlation over the grid, C_in -> C_out.
Matrix conv2d(const Matrix& x, GridShape g, const Tensor& w) {
    const int k = static_cast<int>(w.shape[2]);
    Matrix out = Matrix::Zero(x.rows(), w.shape[0]);
    for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
            out.noalias() += shifted(x, g, ky - k / 2, kx - k / 2) * tap_matrix(w, k, ky, kx).transpose();
        }
    }
    return out;
}

void conv2d_backward(const Matrix& x, GridShape g, const Tensor& w, const Matrix& d_out, Matrix& d_x, Tensor& d_w) {
    const int k = static_cast<int>(w.shape[2]);
    for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
            const int dy = ky - k / 2;
            const int dx = kx - k / 2;
            add_tap_matrix(d_w, k, ky, kx, d_out.transpose() * shifted(x, g, dy, dx));
            unshift_add(d_out * tap_matrix(w, k, ky, kx), g, dy, dx, d_x);
        }
    }
}

// Row vector of the depthwise kernel at one tap, over channels.
Eigen::RowVectorXd depthwise_tap(const Tensor& kernel, int ky, int kx) {
    const auto c = kernel.shape[0];
    Eigen::RowVectorXd r(c);
    for (Eigen::Index ch = 0; ch < c; ++ch) {
        r(ch) = kernel.data[static_cast<std::size_t>(ch * kTaps + ky * kConstrainedKernelSize + kx)];
    }
    return r;
}

Matrix depthwise_conv(const Matrix& x, GridShape g, const Tensor& kernel) {
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    for (int ky = 0; ky < kConstrainedKernelSize; ++ky) {
        for (int kx = 0; kx < kConstrainedKernelSize; ++kx) {
            out.array() += shifted(x, g, ky - kCenter, kx - kCenter).array().rowwise() *
                           depthwise_tap(kernel, ky, kx).array();
        }
    }
    return out;
}

Matrix patches_of(const TokenSequence& f) {
    f.check_layout();
    return f.values.bottomRows(f.grid.cells());
}

TokenSequence with_class_row(const Matrix& patches, GridShape grid) {
    TokenSequence out;
    out.grid = grid;
    out.values = Matrix::Zero(patches.rows() + 1, patches.cols());
    out.values.bottomRows(patches.rows()) = patches;
    return out;
}

void check_params(const TokenSequence& f, const CdfaParams& params) {
    if (params.channels() != f.channels()) {
        throw DimensionError("adapter has " + std::to_string(params.channels()) + " channels, tokens have " +
                             std::to_string(f.channels()));
    }
}

struct StreamWeights {
    double noise = 0.0;
    double spatial = 0.0;
};

StreamWeights stream_weights(const CdfaParams& params, const CdfaOptions& options) {
    const double lambda = params.scale();
    StreamWeights w;
    if (options.streams != StreamMode::spatial_only) w.noise = options.lambda_target == LambdaTarget::noise ? lambda : 1.0;
    if (options.streams != StreamMode::noise_only) w.spatial = options.lambda_target == LambdaTarget::spatial ? lambda : 1.0;
    return w;
}

void visit_tensor(const std::function<void(const std::string&, Tensor&, bool)>& fn, const std::string& name, Tensor& t,
                  bool decay) {
    fn(name, t, decay);
}

}  // namespace

void TokenSequence::check_layout() const {
    if (values.rows() != 1 + grid.cells()) {
        throw DimensionError("token count " + std::to_string(values.rows()) + " does not match 1 + " +
                             std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
    }
}

CdfaParams CdfaParams::zeros(int c) {
    const std::int64_t ch = c;
    CdfaParams p;
    p.constrained_kernel = Tensor({ch, kConstrainedKernelSize, kConstrainedKernelSize});
    p.noise_pointwise = Tensor({ch, ch});
    p.branch1x1 = Tensor({ch, ch, 1, 1});
    p.branch3x3 = Tensor({ch, ch, 3, 3});
    p.branch5x5 = Tensor({ch, ch, 5, 5});
    p.inception_fuse = Tensor({ch, 3 * ch});
    p.lambda = Tensor({1});
    return p;
}

CdfaParams CdfaParams::initialize(int c, Rng& rng) {
    const auto ch = static_cast<std::size_t>(c);
    CdfaParams p = zeros(c);
    kaiming_uniform(p.constrained_kernel, kTaps, rng);
    kaiming_uniform(p.branch1x1, ch, rng);
    kaiming_uniform(p.branch3x3, 9 * ch, rng);
    kaiming_uniform(p.branch5x5, 25 * ch, rng);
    p.lambda.data[0] = 1.0;
    project_bayar_constraint_inplace(p.constrained_kernel);
    p.for_each([](const std::string&, Tensor& t, bool) { quantize_f32(t); });
    return p;
}

void CdfaParams::for_each(const std::function<void(const std::string&, Tensor&, bool)>& fn) {
    visit_tensor(fn, "constrained_kernel", constrained_kernel, true);
    visit_tensor(fn, "noise_pointwise", noise_pointwise, true);
    visit_tensor(fn, "branch1x1", branch1x1, true);
    visit_tensor(fn, "branch3x3", branch3x3, true);
    visit_tensor(fn, "branch5x5", branch5x5, true);
    visit_tensor(fn, "inception_fuse", inception_fuse, true);
    visit_tensor(fn, "lambda", lambda, false);
}

void CdfaParams::for_each(const std::function<void(const std::string&, const Tensor&, bool)>& fn) const {
    const_cast<CdfaParams*>(this)->for_each([&fn](const std::string& n, Tensor& t, bool d) { fn(n, t, d); });
}

TextAdapterParams TextAdapterParams::zeros(int c) {
    const std::int64_t ch = c;
    return {Tensor({ch, ch}), Tensor({ch}), Tensor({ch, ch}), Tensor({ch})};
}

TextAdapterParams TextAdapterParams::initialize(int c, Rng& rng) {
    TextAdapterParams p = zeros(c);
    kaiming_uniform(p.layer1_weight, static_cast<std::size_t>(c), rng);
    quantize_f32(p.layer1_weight);
    return p;
}

void TextAdapterParams::for_each(const std::function<void(const std::string&, Tensor&, bool)>& fn) {
    fn("layer1.weight", layer1_weight, true);
    fn("layer1.bias", layer1_bias, false);
    fn("layer2.weight", layer2_weight, true);
    fn("layer2.bias", layer2_bias, false);
}

void TextAdapterParams::for_each(const std::function<void(const std::string&, const Tensor&, bool)>& fn) const {
    const_cast<TextAdapterParams*>(this)->for_each([&fn](const std::string& n, Tensor& t, bool d) { fn(n, t, d); });
}

int project_bayar_constraint_inplace(Tensor& kernel) {
    if (kernel.shape.size() != 3 || kernel.shape[1] != kConstrainedKernelSize ||
        kernel.shape[2] != kConstrainedKernelSize) {
        throw DimensionError("constrained kernel must be [C, 5, 5], got " + shape_to_string(kernel.shape));
    }
    constexpr int center = kCenter * kConstrainedKernelSize + kCenter;
    int reset = 0;
    for (std::int64_t c = 0; c < kernel.shape[0]; ++c) {
        double* k = kernel.data.data() + c * kTaps;
        double off_sum = 0.0;
        for (int i = 0; i < kTaps; ++i) {
            if (i != center) off_sum += k[i];
        }
        if (std::abs(off_sum) < kBayarDegenerateSum || !std::isfinite(off_sum)) {
            for (int i = 0; i < kTaps; ++i) k[i] = 1.0 / (kTaps - 1);
            ++reset;
        } else {
            for (int i = 0; i < kTaps; ++i) k[i] /= off_sum;
        }
        k[center] = -1.0;
    }
    if (reset > 0) spdlog::warn("constrained kernel: {} channel(s) had a degenerate off-center sum; reset to 1/24", reset);
    return reset;
}

Tensor project_bayar_constraint(const Tensor& kernel) {
    Tensor out = kernel;
    project_bayar_constraint_inplace(out);
    return out;
}

TokenSequence noise_stream(const TokenSequence& f, const CdfaParams& params) {
    check_params(f, params);
    const Matrix patches = patches_of(f);
    const Matrix activated = nn::relu(depthwise_conv(patches, f.grid, params.constrained_kernel));
    return with_class_row(activated * params.noise_pointwise.matrix().transpose(), f.grid);
}

TokenSequence spatial_stream(const TokenSequence& f, const CdfaParams& params) {
    check_params(f, params);
    const Matrix r = nn::relu(patches_of(f));
    const auto c = f.channels();
    Matrix concat(r.rows(), 3 * c);
    concat.leftCols(c) = conv2d(r, f.grid, params.branch1x1);
    concat.middleCols(c, c) = conv2d(r, f.grid, params.branch3x3);
    concat.rightCols(c) = conv2d(r, f.grid, params.branch5x5);
    return with_class_row(concat * params.inception_fuse.matrix().transpose(), f.grid);
}

TokenSequence cdfa_forward(const TokenSequence& f, const CdfaParams& params, const CdfaOptions& options,
                           CdfaCache* cache) {
    check_params(f, params);
    const Matrix patches = patches_of(f);
    const auto c = f.channels();
    const StreamWeights w = stream_weights(params, options);
    Matrix out = Matrix::Zero(patches.rows(), c);

    CdfaCache local;
    CdfaCache& st = cache ? *cache : local;
    st.grid = f.grid;
    if (options.streams != StreamMode::spatial_only) {
        st.constrained_out = depthwise_conv(patches, f.grid, params.constrained_kernel);
        st.noise_out = nn::relu(st.constrained_out) * params.noise_pointwise.matrix().transpose();
        out += w.noise * st.noise_out;
    }
    if (options.streams != StreamMode::noise_only) {
        st.relu_input = nn::relu(patches);
        st.concat.resize(patches.rows(), 3 * c);
        st.concat.leftCols(c) = conv2d(st.relu_input, f.grid, params.branch1x1);
        st.concat.middleCols(c, c) = conv2d(st.relu_input, f.grid, params.branch3x3);
        st.concat.rightCols(c) = conv2d(st.relu_input, f.grid, params.branch5x5);
        st.spatial_out = st.concat * params.inception_fuse.matrix().transpose();
        out += w.spatial * st.spatial_out;
    }
    if (cache) cache->patches = patches;
    return with_class_row(out, f.grid);
}

Matrix cdfa_backward(const CdfaCache& cache, const CdfaParams& params, const CdfaOptions& options,
                     const Matrix& d_out, CdfaParams& grads) {
    const GridShape g = cache.grid;
    const auto c = cache.patches.cols();
    const Matrix d_patches_out = d_out.bottomRows(g.cells());
    const StreamWeights w = stream_weights(params, options);
    Matrix d_in = Matrix::Zero(g.cells(), c);

    if (options.streams != StreamMode::spatial_only) {
        if (options.lambda_target == LambdaTarget::noise) {
            grads.lambda.data[0] += (d_patches_out.array() * cache.noise_out.array()).sum();
        }
        const Matrix d_noise = w.noise * d_patches_out;
        const Matrix activated = nn::relu(cache.constrained_out);
        grads.noise_pointwise.matrix() += d_noise.transpose() * activated;
        const Matrix d_pre = nn::relu_backward(cache.constrained_out, d_noise * params.noise_pointwise.matrix());
        for (int ky = 0; ky < kConstrainedKernelSize; ++ky) {
            for (int kx = 0; kx < kConstrainedKernelSize; ++kx) {
                const int dy = ky - kCenter;
                const int dx = kx - kCenter;
                const Eigen::RowVectorXd tap_grad =
                    (d_pre.array() * shifted(cache.patches, g, dy, dx).array()).colwise().sum();
                for (Eigen::Index ch = 0; ch < c; ++ch) {
                    grads.constrained_kernel.data[static_cast<std::size_t>(ch * kTaps + ky * kConstrainedKernelSize + kx)] +=
                        tap_grad(ch);
                }
                const Matrix spread = d_pre.array().rowwise() * depthwise_tap(params.constrained_kernel, ky, kx).array();
                unshift_add(spread, g, dy, dx, d_in);
            }
        }
    }
    if (options.streams != StreamMode::noise_only) {
        if (options.lambda_target == LambdaTarget::spatial) {
            grads.lambda.data[0] += (d_patches_out.array() * cache.spatial_out.array()).sum();
        }
        const Matrix d_spatial = w.spatial * d_patches_out;
        grads.inception_fuse.matrix() += d_spatial.transpose() * cache.concat;
        const Matrix d_concat = d_spatial * params.inception_fuse.matrix();
        Matrix d_relu = Matrix::Zero(g.cells(), c);
        conv2d_backward(cache.relu_input, g, params.branch1x1, d_concat.leftCols(c), d_relu, grads.branch1x1);
        conv2d_backward(cache.relu_input, g, params.branch3x3, d_concat.middleCols(c, c), d_relu, grads.branch3x3);
        conv2d_backward(cache.relu_input, g, params.branch5x5, d_concat.rightCols(c), d_relu, grads.branch5x5);
        d_in += nn::relu_backward(cache.patches, d_relu);
    }
    Matrix d_tokens = Matrix::Zero(g.cells() + 1, c);
    d_tokens.bottomRows(g.cells()) = d_in;
    return d_tokens;
}

Vector text_adapter_forward(const Vector& embedding, const TextAdapterParams& params, TextAdapterCache* cache) {
    if (embedding.size() != params.channels()) {
        throw DimensionError("text adapter expects " + std::to_string(params.channels()) + " channels, got " +
                             std::to_string(embedding.size()));
    }
    Vector pre = params.layer1_weight.matrix() * embedding + params.layer1_bias.vector();
    Vector out = embedding + params.layer2_weight.matrix() * pre.cwiseMax(0.0) + params.layer2_bias.vector();
    if (cache) {
        cache->input = embedding;
        cache->hidden_pre = std::move(pre);
    }
    return out;
}

Vector text_adapter_backward(const TextAdapterCache& cache, const TextAdapterParams& params, const Vector& d_out,
                             TextAdapterParams& grads) {
    const Vector hidden = cache.hidden_pre.cwiseMax(0.0);
    grads.layer2_weight.matrix() += d_out * hidden.transpose();
    grads.layer2_bias.vector() += d_out;
    Vector d_pre = params.layer2_weight.matrix().transpose() * d_out;
    for (Eigen::Index i = 0; i < d_pre.size(); ++i) {
        if (cache.hidden_pre(i) <= 0.0) d_pre(i) = 0.0;
    }
    grads.layer1_weight.matrix() += d_pre * cache.input.transpose();
    grads.layer1_bias.vector() += d_pre;
    return d_out + params.layer1_weight.matrix().transpose() * d_pre;
}

AdapterSet AdapterSet::initialize(const std::vector<int>& block_indices, int channels, std::uint64_t seed,
                                  const CdfaOptions& options) {
    AdapterSet set;
    set.options = options;
    for (int idx : block_indices) {
        Rng rng(derive_seed(seed, "cdfa", static_cast<std::uint64_t>(idx)));
        set.visual.emplace(idx, CdfaParams::initialize(channels, rng));
    }
    Rng rng(derive_seed(seed, "text-adapter"));
    set.text = TextAdapterParams::initialize(channels, rng);
    return set;
}

AdapterSet AdapterSet::zeros_like() const {
    AdapterSet z;
    z.options = options;
    for (const auto& [idx, p] : visual) z.visual.emplace(idx, CdfaParams::zeros(p.channels()));
    z.text = TextAdapterParams::zeros(text.channels());
    return z;
}

void AdapterSet::for_each(const std::function<void(const std::string&, Tensor&, bool)>& fn) {
    for (auto& [idx, p] : visual) {
        const std::string prefix = std::string(kAdapterPrefix) + "visual." + std::to_string(idx) + ".";
        p.for_each([&](const std::string& name, Tensor& t, bool decay) { fn(prefix + name, t, decay); });
    }
    const std::string prefix = std::string(kAdapterPrefix) + "text.";
    text.for_each([&](const std::string& name, Tensor& t, bool decay) { fn(prefix + name, t, decay); });
}

void AdapterSet::for_each(const std::function<void(const std::string&, const Tensor&, bool)>& fn) const {
    const_cast<AdapterSet*>(this)->for_each([&fn](const std::string& n, Tensor& t, bool d) { fn(n, t, d); });
}

TensorMap AdapterSet::to_tensors() const {
    TensorMap out;
    for_each([&out](const std::string& name, const Tensor& t, bool) { out.emplace(name, t); });
    return out;
}

AdapterSet AdapterSet::from_tensors(const TensorMap& tensors, const CdfaOptions& options) {
    const std::string visual_prefix = std::string(kAdapterPrefix) + "visual.";
    std::map<int, int> channels_by_block;
    for (const auto& [name, t] : tensors) {
        if (name.rfind(visual_prefix, 0) != 0) continue;
        const auto rest = name.substr(visual_prefix.size());
        const auto dot = rest.find('.');
        if (dot == std::string::npos) throw FormatError("bad adapter tensor name " + name);
        int idx = 0;
        try {
            idx = std::stoi(rest.substr(0, dot));
        } catch (const std::exception&) {
            throw FormatError("bad adapter tensor name " + name);
        }
        if (rest.substr(dot + 1) == "constrained_kernel") channels_by_block[idx] = static_cast<int>(t.shape.at(0));
    }
    const auto text_it = tensors.find(std::string(kAdapterPrefix) + "text.layer1.weight");
    if (text_it == tensors.end()) throw FormatError("missing tensor adapter.text.layer1.weight");

    AdapterSet set;
    set.options = options;
    for (const auto& [idx, c] : channels_by_block) set.visual.emplace(idx, CdfaParams::zeros(c));
    set.text = TextAdapterParams::zeros(static_cast<int>(text_it->second.shape.at(0)));
    set.for_each([&tensors](const std::string& name, Tensor& t, bool) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("missing tensor " + name);
        if (it->second.shape != t.shape) {
            throw DimensionError("tensor " + name + " has shape " + shape_to_string(it->second.shape) + ", expected " +
                                 shape_to_string(t.shape));
        }
        t = it->second;
    });
    return set;
}

int AdapterSet::project_constraints() {
    int reset = 0;
    for (auto& [idx, p] : visual) reset += project_bayar_constraint_inplace(p.constrained_kernel);
    return reset;
}

}  // namespace medfor
