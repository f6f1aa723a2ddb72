#include "medfor/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "medfor/errors.hpp"
#include "medfor/rng.hpp"

namespace medfor {

namespace {

std::string block_prefix(int b) { return "visual.transformer.resblocks." + std::to_string(b) + "."; }

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

std::uint32_t token_id(std::string_view token, int vocab) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : token) {
        h ^= c;
        h *= 16777619u;
    }
    return h % static_cast<std::uint32_t>(vocab);
}

}  // namespace

void BackboneConfig::validate() const {
    if (n_blocks <= 0) throw ConfigError("n_blocks must be positive");
    if (channel_dim <= 0 || n_heads <= 0 || channel_dim % n_heads != 0) {
        throw ConfigError("channel_dim must be a positive multiple of n_heads");
    }
    if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
    if (patch_grid.height <= 0 || patch_grid.width <= 0) throw ConfigError("patch grid must be positive");
    if (patch_grid.height != patch_grid.width) throw ConfigError("only square patch grids are supported");
    if (input_resolution <= 0 || input_resolution % patch_grid.height != 0) {
        throw ConfigError("input_resolution must be a positive multiple of the patch grid size");
    }
    if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be positive");
    if (text_vocab_size <= 0) throw ConfigError("text_vocab_size must be positive");
    std::set<int> seen;
    for (int idx : adapter_block_indices) {
        if (idx < 0 || idx >= n_blocks) {
            throw ConfigError("adapter block index " + std::to_string(idx) + " outside [0, " +
                              std::to_string(n_blocks) + ")");
        }
        if (!seen.insert(idx).second) throw ConfigError("duplicate adapter block index " + std::to_string(idx));
    }
}

BackboneConfig BackboneConfig::tiny() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::vit_l14() {
    BackboneConfig c;
    c.variant = "vit-l14";
    c.n_blocks = 24;
    c.channel_dim = 1024;
    c.n_heads = 16;
    c.mlp_ratio = 4;
    c.patch_grid = {16, 16};
    c.input_resolution = 224;
    c.adapter_block_indices = {7, 15, 23};
    c.text_vocab_size = 49408;
    c.normalization = kClipNormalization;
    return c;
}

BackboneConfig BackboneConfig::for_variant(std::string_view variant) {
    if (variant == "tiny") return tiny();
    if (variant == "vit-l14") return vit_l14();
    throw ConfigError("unknown backbone variant \"" + std::string(variant) + "\" (expected tiny or vit-l14)");
}

std::map<std::string, Shape> expected_backbone_shapes(const BackboneConfig& cfg) {
    cfg.validate();
    const std::int64_t c = cfg.channel_dim;
    const std::int64_t p = cfg.patch_size();
    const std::int64_t hidden = c * cfg.mlp_ratio;
    std::map<std::string, Shape> s;
    s["visual.conv1.weight"] = {c, 3, p, p};
    s["visual.class_embedding"] = {c};
    s["visual.positional_embedding"] = {cfg.sequence_length(), c};
    s["visual.ln_pre.weight"] = {c};
    s["visual.ln_pre.bias"] = {c};
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const auto pre = block_prefix(b);
        s[pre + "ln_1.weight"] = {c};
        s[pre + "ln_1.bias"] = {c};
        s[pre + "attn.in_proj_weight"] = {3 * c, c};
        s[pre + "attn.in_proj_bias"] = {3 * c};
        s[pre + "attn.out_proj.weight"] = {c, c};
        s[pre + "attn.out_proj.bias"] = {c};
        s[pre + "ln_2.weight"] = {c};
        s[pre + "ln_2.bias"] = {c};
        s[pre + "mlp.c_fc.weight"] = {hidden, c};
        s[pre + "mlp.c_fc.bias"] = {hidden};
        s[pre + "mlp.c_proj.weight"] = {c, hidden};
        s[pre + "mlp.c_proj.bias"] = {c};
    }
    s["visual.ln_post.weight"] = {c};
    s["visual.ln_post.bias"] = {c};
    s["visual.proj"] = {c, c};
    s["text.token_embedding.weight"] = {cfg.text_vocab_size, c};
    s["text.ln_final.weight"] = {c};
    s["text.ln_final.bias"] = {c};
    s["text.text_projection"] = {c, c};
    return s;
}

Backbone::Backbone(BackboneConfig config, TensorMap weights) : config_(std::move(config)) {
    const auto expected = expected_backbone_shapes(config_);
    for (const auto& [name, shape] : expected) {
        const auto it = weights.find(name);
        if (it == weights.end()) throw FormatError("backbone checkpoint is missing tensor " + name);
        if (it->second.shape != shape) {
            throw DimensionError("tensor " + name + " has shape " + shape_to_string(it->second.shape) +
                                 ", config expects " + shape_to_string(shape));
        }
    }
    // Keep only backbone tensors; adapters and optimizer state live elsewhere.
    for (auto it = weights.begin(); it != weights.end();) {
        it = expected.count(it->first) ? std::next(it) : weights.erase(it);
    }
    weights_ = std::make_shared<const TensorMap>(std::move(weights));
    for (int b = 0; b < config_.n_blocks; ++b) {
        const auto pre = block_prefix(b);
        blocks_.push_back({&weight(pre + "ln_1.weight"), &weight(pre + "ln_1.bias"),
                           &weight(pre + "attn.in_proj_weight"), &weight(pre + "attn.in_proj_bias"),
                           &weight(pre + "attn.out_proj.weight"), &weight(pre + "attn.out_proj.bias"),
                           &weight(pre + "ln_2.weight"), &weight(pre + "ln_2.bias"),
                           &weight(pre + "mlp.c_fc.weight"), &weight(pre + "mlp.c_fc.bias"),
                           &weight(pre + "mlp.c_proj.weight"), &weight(pre + "mlp.c_proj.bias")});
    }
}

Backbone Backbone::random_init(const BackboneConfig& config, std::uint64_t seed) {
    const auto shapes = expected_backbone_shapes(config);
    const double c = config.channel_dim;
    TensorMap weights;
    for (const auto& [name, shape] : shapes) {
        Tensor t(shape);
        Rng rng(derive_seed(seed, name));
        auto gaussian = [&](double std) {
            for (double& v : t.data) v = std * rng.normal();
        };
        const bool is_norm = name.find("ln_") != std::string::npos;
        const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
        if (is_norm && !is_bias) {
            t.fill(1.0);
        } else if (is_bias) {
            // zero
        } else if (name == "visual.conv1.weight") {
            gaussian(1.0 / std::sqrt(static_cast<double>(shape[1] * shape[2] * shape[3])));
        } else if (name == "text.token_embedding.weight") {
            gaussian(1.0);
        } else if (name.find("c_proj.weight") != std::string::npos) {
            gaussian(1.0 / std::sqrt(c * config.mlp_ratio));
        } else {
            gaussian(1.0 / std::sqrt(c));
        }
        quantize_f32(t);
        weights.emplace(name, std::move(t));
    }
    return Backbone(config, std::move(weights));
}

const Tensor& Backbone::weight(const std::string& name) const {
    const auto it = weights_->find(name);
    if (it == weights_->end()) throw FormatError("backbone is missing tensor " + name);
    return it->second;
}

void Backbone::save(const std::filesystem::path& path) const {
    TensorArchive archive;
    archive.tensors = *weights_;
    archive.metadata = {{"kind", "backbone"}, {"variant", config_.variant}};
    save_tensor_archive(path, archive);
}

void Backbone::validate_adapters(const AdapterSet& adapters) const {
    for (const auto& [idx, params] : adapters.visual) {
        if (std::find(config_.adapter_block_indices.begin(), config_.adapter_block_indices.end(), idx) ==
            config_.adapter_block_indices.end()) {
            throw ConfigError("adapter keyed to block " + std::to_string(idx) +
                              ", which is not an adapter block of this backbone");
        }
        if (params.channels() != config_.channel_dim) {
            throw ConfigError("adapter at block " + std::to_string(idx) + " has " + std::to_string(params.channels()) +
                              " channels, backbone has " + std::to_string(config_.channel_dim));
        }
    }
    if (adapters.text.channels() != 0 && adapters.text.channels() != config_.channel_dim) {
        throw ConfigError("text adapter has " + std::to_string(adapters.text.channels()) + " channels, backbone has " +
                          std::to_string(config_.channel_dim));
    }
}

Matrix Backbone::embed_patches(const ImageTensor& image) const {
    const int res = config_.input_resolution;
    if (image.height != res || image.width != res || image.channels != 3) {
        throw DimensionError("encoder expects a preprocessed " + std::to_string(res) + "x" + std::to_string(res) +
                             "x3 image, got " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                             std::to_string(image.channels));
    }
    const int p = config_.patch_size();
    const int g = config_.patch_grid.width;
    const Eigen::Index c = config_.channel_dim;
    const auto conv = weight("visual.conv1.weight").matrix(c, 3 * p * p);

    Matrix patches(config_.patch_grid.cells(), 3 * p * p);
    for (int gy = 0; gy < config_.patch_grid.height; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            auto row = patches.row(gy * g + gx);
            for (int ch = 0; ch < 3; ++ch) {
                for (int py = 0; py < p; ++py) {
                    for (int px = 0; px < p; ++px) row((ch * p + py) * p + px) = image.at(gy * p + py, gx * p + px, ch);
                }
            }
        }
    }
    Matrix tokens(config_.sequence_length(), c);
    tokens.row(0) = weight("visual.class_embedding").vector().transpose();
    tokens.bottomRows(patches.rows()) = patches * conv.transpose();
    tokens += weight("visual.positional_embedding").matrix();
    return nn::layer_norm(tokens, weight("visual.ln_pre.weight").vector(), weight("visual.ln_pre.bias").vector());
}

Vector Backbone::forward(const ImageTensor& image, const AdapterSet* adapters, EncodeCache* cache,
                         std::vector<TokenSequence>* block_trace) const {
    if (adapters) validate_adapters(*adapters);
    const auto& cfg = config_;
    const Eigen::Index c = cfg.channel_dim;
    const Eigen::Index hidden = c * cfg.mlp_ratio;
    Matrix x = embed_patches(image);

    int first_adapter = -1;
    if (adapters && !adapters->visual.empty()) first_adapter = adapters->visual.begin()->first;
    if (cache) {
        cache->blocks.assign(static_cast<std::size_t>(cfg.n_blocks), BlockCache{});
        cache->first_adapter_block = first_adapter;
    }
    if (block_trace) block_trace->clear();

    for (int b = 0; b < cfg.n_blocks; ++b) {
        const BlockWeights& w = blocks_[static_cast<std::size_t>(b)];
        // Caches are only needed from the first adapter upward.
        BlockCache* bc = (cache && first_adapter >= 0 && b >= first_adapter) ? &cache->blocks[static_cast<std::size_t>(b)]
                                                                             : nullptr;
        const Matrix a = nn::layer_norm(x, w.ln1_w->vector(), w.ln1_b->vector(), bc ? &bc->ln1 : nullptr);
        x += nn::self_attention(a, cfg.n_heads, w.in_proj_w->matrix(3 * c, c), w.in_proj_b->vector(),
                                w.out_proj_w->matrix(c, c), w.out_proj_b->vector(), bc ? &bc->attn : nullptr);

        Matrix h = nn::layer_norm(x, w.ln2_w->vector(), w.ln2_b->vector(), bc ? &bc->ln2 : nullptr);
        Matrix fc_pre = h * w.fc_w->matrix(hidden, c).transpose();
        fc_pre.rowwise() += w.fc_b->vector().transpose();
        Matrix mlp_out = nn::quick_gelu(fc_pre) * w.proj_w->matrix(c, hidden).transpose();
        mlp_out.rowwise() += w.proj_b->vector().transpose();

        if (adapters) {
            const auto it = adapters->visual.find(b);
            if (it != adapters->visual.end()) {
                // Adapter reads the MLP input and adds into the MLP output.
                TokenSequence seq{h, cfg.patch_grid};
                CdfaCache* ac = nullptr;
                if (bc) ac = &bc->adapter.emplace();
                mlp_out += cdfa_forward(seq, it->second, adapters->options, ac).values;
            }
        }
        x += mlp_out;
        if (bc) {
            bc->mlp_input = std::move(h);
            bc->fc_pre = std::move(fc_pre);
        }
        if (block_trace) block_trace->push_back({x, cfg.patch_grid});
    }

    nn::LayerNormCache ln_post;
    const Matrix cls = nn::layer_norm(x.topRows(1), weight("visual.ln_post.weight").vector(),
                                      weight("visual.ln_post.bias").vector(), &ln_post);
    // CLIP convention: feature = cls @ proj.
    Vector projected = (cls * weight("visual.proj").matrix(c, c)).transpose();
    Vector feature = nn::l2_normalize(projected);
    if (cache) {
        cache->ln_post = std::move(ln_post);
        cache->projected = std::move(projected);
    }
    return feature;
}

Vector Backbone::encode_image(const ImageTensor& image, const AdapterSet* adapters,
                              std::vector<TokenSequence>* block_trace) const {
    return forward(image, adapters, nullptr, block_trace);
}

Vector Backbone::encode_image(const ImageTensor& image, const AdapterSet* adapters, EncodeCache& cache) const {
    return forward(image, adapters, &cache, nullptr);
}

void Backbone::backward(const EncodeCache& cache, const AdapterSet& adapters, const Vector& d_feature,
                        AdapterSet& grads) const {
    if (cache.first_adapter_block < 0) return;
    const auto& cfg = config_;
    const Eigen::Index c = cfg.channel_dim;
    const Eigen::Index hidden = c * cfg.mlp_ratio;

    const Vector d_projected = nn::l2_normalize_backward(cache.projected, d_feature);
    const Matrix d_cls = (weight("visual.proj").matrix(c, c) * d_projected).transpose();
    Matrix dx = Matrix::Zero(cfg.sequence_length(), c);
    dx.topRows(1) = nn::layer_norm_backward(cache.ln_post, weight("visual.ln_post.weight").vector(), d_cls);

    for (int b = cfg.n_blocks - 1; b >= cache.first_adapter_block; --b) {
        const BlockWeights& w = blocks_[static_cast<std::size_t>(b)];
        const BlockCache& bc = cache.blocks[static_cast<std::size_t>(b)];

        const Matrix d_act = dx * w.proj_w->matrix(c, hidden);
        Matrix d_h = nn::quick_gelu_backward(bc.fc_pre, d_act) * w.fc_w->matrix(hidden, c);
        if (bc.adapter) {
            const auto pit = adapters.visual.find(b);
            auto git = grads.visual.find(b);
            if (pit == adapters.visual.end() || git == grads.visual.end()) {
                throw ConfigError("adapter gradient buffer missing for block " + std::to_string(b));
            }
            d_h += cdfa_backward(*bc.adapter, pit->second, adapters.options, dx, git->second);
        }
        Matrix d_mid = dx + nn::layer_norm_backward(bc.ln2, w.ln2_w->vector(), d_h);
        if (b == cache.first_adapter_block) break;

        const Matrix d_a = nn::self_attention_backward(bc.attn, cfg.n_heads, w.in_proj_w->matrix(3 * c, c),
                                                       w.out_proj_w->matrix(c, c), d_mid);
        dx = d_mid + nn::layer_norm_backward(bc.ln1, w.ln1_w->vector(), d_a);
    }
}

Vector Backbone::embed_prompt(std::string_view prompt) const {
    const auto tokens = tokenize(prompt);
    if (tokens.empty()) throw ValidationError("prompt is empty");
    const Eigen::Index c = config_.channel_dim;
    const auto table = weight("text.token_embedding.weight").matrix(config_.text_vocab_size, c);
    Matrix pooled = Matrix::Zero(1, c);
    for (const auto& tok : tokens) pooled += table.row(token_id(tok, config_.text_vocab_size));
    pooled /= static_cast<double>(tokens.size());
    const Matrix normed =
        nn::layer_norm(pooled, weight("text.ln_final.weight").vector(), weight("text.ln_final.bias").vector());
    return (normed * weight("text.text_projection").matrix(c, c)).transpose();
}

TextClassifier Backbone::build_text_classifier(const std::array<std::string, 2>& prompts,
                                               const TextAdapterParams* text_adapter,
                                               TextClassifierCache* cache) const {
    TextClassifier out;
    out.prompts = prompts;
    out.weights.resize(2, config_.channel_dim);
    for (std::size_t k = 0; k < 2; ++k) {
        Vector e = embed_prompt(prompts[k]);
        Vector adapted = text_adapter ? text_adapter_forward(e, *text_adapter, cache ? &cache->adapter[k] : nullptr) : e;
        out.weights.row(static_cast<Eigen::Index>(k)) = nn::l2_normalize(adapted).transpose();
        if (cache) {
            cache->embedded[k] = std::move(e);
            cache->adapted[k] = std::move(adapted);
        }
    }
    if (cache) cache->adapted_path = text_adapter != nullptr;
    return out;
}

void text_classifier_backward(const TextClassifierCache& cache, const TextAdapterParams& text_adapter,
                              const Matrix& d_weights, TextAdapterParams& grads) {
    if (!cache.adapted_path) return;
    for (std::size_t k = 0; k < 2; ++k) {
        const Vector d_row = d_weights.row(static_cast<Eigen::Index>(k)).transpose();
        const Vector d_adapted = nn::l2_normalize_backward(cache.adapted[k], d_row);
        text_adapter_backward(cache.adapter[k], text_adapter, d_adapted, grads);
    }
}

Eigen::Vector2d logits(const Vector& feature, const TextClassifier& classifier, double logit_scale) {
    if (feature.size() != classifier.weights.cols()) {
        throw DimensionError("feature has " + std::to_string(feature.size()) + " channels, classifier has " +
                             std::to_string(classifier.weights.cols()));
    }
    if (!feature.allFinite() || !classifier.weights.allFinite() || !std::isfinite(logit_scale)) {
        throw ValidationError("logits: non-finite input");
    }
    return logit_scale * (classifier.weights * feature);
}

Backbone load_pretrained(const std::filesystem::path& path, const BackboneConfig& config, LoadReport* report) {
    TensorArchive archive = load_tensor_archive(path);
    if (report) {
        const auto expected = expected_backbone_shapes(config);
        report->loaded.clear();
        report->ignored.clear();
        for (const auto& [name, t] : archive.tensors) (expected.count(name) ? report->loaded : report->ignored).push_back(name);
    }
    return Backbone(config, std::move(archive.tensors));
}

}  // namespace medfor
