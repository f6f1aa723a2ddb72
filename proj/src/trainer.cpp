#include "medfor/trainer.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <thread>

#include <spdlog/spdlog.h>

#include "medfor/errors.hpp"
#include "medfor/rng.hpp"

namespace medfor {

namespace {

struct ParamSlot {
    std::string name;
    Tensor* tensor;
    bool decay;
};

std::vector<ParamSlot> slots(AdapterSet& set) {
    std::vector<ParamSlot> out;
    set.for_each([&out](const std::string& name, Tensor& t, bool decay) { out.push_back({name, &t, decay}); });
    return out;
}

void add_into(AdapterSet& dst, AdapterSet& src) {
    auto d = slots(dst);
    auto s = slots(src);
    if (d.size() != s.size()) throw DimensionError("gradient structure mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto& a = d[i].tensor->data;
        const auto& b = s[i].tensor->data;
        for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
    }
}

void zero(AdapterSet& set) {
    set.for_each([](const std::string&, Tensor& t, bool) { t.fill(0.0); });
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

nlohmann::json options_to_json(const CdfaOptions& o) {
    return {{"streams", to_string(o.streams)}, {"lambda_target", to_string(o.lambda_target)}};
}

CdfaOptions options_from_json(const nlohmann::json& j) {
    CdfaOptions o;
    if (j.contains("streams")) o.streams = parse_stream_mode(j["streams"].get<std::string>());
    if (j.contains("lambda_target")) o.lambda_target = parse_lambda_target(j["lambda_target"].get<std::string>());
    return o;
}

TensorMap with_prefix(const TensorMap& in, const std::string& prefix) {
    TensorMap out;
    for (const auto& [name, t] : in) out.emplace(prefix + name, t);
    return out;
}

TensorMap strip_prefix(const TensorMap& in, const std::string& prefix) {
    TensorMap out;
    for (const auto& [name, t] : in) {
        if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), t);
    }
    return out;
}

// Per-sample contribution to the batch gradient.
struct SampleGrad {
    double prob = 0.0;
    Matrix d_classifier;
};

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) throw ConfigError("validation_fraction must lie in [0, 1)");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    for (const auto& p : prompts) {
        if (p.empty()) throw ConfigError("prompts must be non-empty");
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"seed", seed},
            {"prompts", prompts},
            {"adapter_options", options_to_json(adapter_options)},
            {"validation_fraction", validation_fraction}};
}

double bce_loss(std::span<const double> probs, std::span<const int> labels) {
    if (probs.empty()) throw ValidationError("bce_loss: empty batch");
    if (probs.size() != labels.size()) throw ValidationError("bce_loss: probs and labels differ in length");
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ValidationError("bce_loss: label outside {0, 1}");
        if (!std::isfinite(probs[i])) throw ValidationError("bce_loss: non-finite probability");
        const double p = std::clamp(probs[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
        total += labels[i] == 1 ? std::log(p) : std::log1p(-p);
    }
    return -total / static_cast<double>(probs.size());
}

double fake_probability(const Eigen::Vector2d& logits) { return 1.0 / (1.0 + std::exp(logits(0) - logits(1))); }

nlohmann::json EpochLog::to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["loss"] = loss;
    j["acc"] = accuracy;
    j["val_loss"] = val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr);
    j["val_acc"] = val_accuracy ? nlohmann::json(*val_accuracy) : nlohmann::json(nullptr);
    j["timestamp"] = timestamp;
    return j;
}

EpochLog EpochLog::from_json(const nlohmann::json& j) {
    EpochLog e;
    e.epoch = j.at("epoch").get<int>();
    e.loss = j.at("loss").get<double>();
    e.accuracy = j.at("acc").get<double>();
    if (j.contains("val_loss") && !j["val_loss"].is_null()) e.val_loss = j["val_loss"].get<double>();
    if (j.contains("val_acc") && !j["val_acc"].is_null()) e.val_accuracy = j["val_acc"].get<double>();
    e.timestamp = j.value("timestamp", "");
    return e;
}

TrainState TrainState::fresh(AdapterSet initial) {
    TrainState s;
    s.velocity = initial.zeros_like();
    s.best_params = initial;
    s.params = std::move(initial);
    return s;
}

bool sgd_step(TrainState& state, const AdapterSet& grads, const TrainConfig& config) {
    bool finite = true;
    grads.for_each([&finite](const std::string&, const Tensor& t, bool) { finite = finite && all_finite(t.data); });
    if (!finite) {
        ++state.skipped_steps;
        spdlog::warn("non-finite gradient; optimizer step skipped ({} so far)", state.skipped_steps);
        return false;
    }
    auto params = slots(state.params);
    auto velocity = slots(state.velocity);
    std::vector<const Tensor*> g;
    grads.for_each([&g](const std::string&, const Tensor& t, bool) { g.push_back(&t); });
    if (params.size() != velocity.size() || params.size() != g.size()) {
        throw DimensionError("sgd_step: gradient structure does not match parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& theta = params[i].tensor->data;
        auto& v = velocity[i].tensor->data;
        const auto& grad = g[i]->data;
        if (theta.size() != grad.size()) throw DimensionError("sgd_step: shape mismatch for " + params[i].name);
        const double wd = params[i].decay ? config.weight_decay : 0.0;
        for (std::size_t k = 0; k < theta.size(); ++k) {
            v[k] = config.momentum * v[k] + grad[k] + wd * theta[k];
            theta[k] -= config.lr * v[k];
        }
    }
    state.params.project_constraints();
    for (auto& s : params) quantize_f32(*s.tensor);
    for (auto& s : velocity) quantize_f32(*s.tensor);
    return true;
}

BatchResult evaluate_batch(const Backbone& backbone, const AdapterSet& params, std::span<const Sample> batch,
                           const std::array<std::string, 2>& prompts, bool with_grad, int threads) {
    if (batch.empty()) throw ValidationError("empty batch");
    TextClassifierCache text_cache;
    const TextClassifier classifier = backbone.build_text_classifier(prompts, &params.text, &text_cache);
    const double scale = backbone.config().logit_scale;
    const std::size_t n = batch.size();
    const double inv_n = 1.0 / static_cast<double>(n);

    BatchResult result;
    result.probs.assign(n, 0.0);
    std::vector<SampleGrad> sample_out(n);
    std::vector<AdapterSet> sample_grads;

    auto run_one = [&](std::size_t i, AdapterSet* grads) {
        const Sample& s = batch[i];
        if (!with_grad) {
            const Vector f = backbone.encode_image(s.image, &params);
            result.probs[i] = fake_probability(logits(f, classifier, scale));
            return;
        }
        EncodeCache cache;
        const Vector f = backbone.encode_image(s.image, &params, cache);
        const double p = fake_probability(logits(f, classifier, scale));
        result.probs[i] = p;
        // d BCE / d logit_fake = (p - y) / N. The clamp only guards the logarithm of
        // the reported loss; passing the gradient through it keeps a saturated wrong
        // prediction trainable instead of freezing it at zero gradient.
        const double y = s.label == Label::fake ? 1.0 : 0.0;
        const double g = (p - y) * inv_n;
        const Eigen::Vector2d d_logits(-g, g);
        const Vector d_feature = scale * (classifier.weights.transpose() * d_logits);
        sample_out[i].d_classifier = scale * d_logits * f.transpose();
        backbone.backward(cache, params, d_feature, *grads);
    };

    if (with_grad) result.grads = params.zeros_like();
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n);
    if (workers <= 1) {
        AdapterSet scratch = with_grad ? params.zeros_like() : AdapterSet{};
        for (std::size_t i = 0; i < n; ++i) {
            if (with_grad) zero(scratch);
            run_one(i, &scratch);
            if (with_grad) add_into(result.grads, scratch);
        }
    } else {
        if (with_grad) {
            sample_grads.reserve(n);
            for (std::size_t i = 0; i < n; ++i) sample_grads.push_back(params.zeros_like());
        }
        std::vector<std::exception_ptr> errors(workers);
        {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w) {
                pool.emplace_back([&, w] {
                    try {
                        for (std::size_t i = w; i < n; i += workers) run_one(i, with_grad ? &sample_grads[i] : nullptr);
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            }
        }
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        // Reduce in sample order so the sum does not depend on scheduling.
        for (auto& g : sample_grads) add_into(result.grads, g);
    }

    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = batch[i].label == Label::fake ? 1 : 0;
        // argmax on the two logits, ties to real
        const int predicted = result.probs[i] > 0.5 ? 1 : 0;
        result.correct += predicted == labels[i] ? 1 : 0;
    }
    result.loss = bce_loss(result.probs, labels);

    if (with_grad) {
        Matrix d_classifier = Matrix::Zero(2, backbone.config().channel_dim);
        for (const auto& s : sample_out) d_classifier += s.d_classifier;
        text_classifier_backward(text_cache, params.text, d_classifier, result.grads.text);
    }
    return result;
}

std::vector<Sample> load_samples(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
                                 const BackboneConfig& config, std::size_t* skipped) {
    std::vector<Sample> out;
    std::size_t missed = 0;
    for (const auto& rec : records) {
        const auto path = resolve_record_path(manifest_path, rec);
        try {
            out.push_back({preprocess(decode_image(path), config.input_resolution, config.normalization), rec.label,
                           rec.path});
        } catch (const Error& e) {
            spdlog::warn("skipping {}: {}", path.string(), e.what());
            ++missed;
        }
    }
    if (skipped) *skipped = missed;
    return out;
}

void split_validation(std::vector<Sample>& train, std::vector<Sample>& validation, double fraction,
                      std::uint64_t seed) {
    validation.clear();
    if (fraction <= 0.0) return;
    std::vector<bool> held(train.size(), false);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < train.size(); ++i) {
            if (static_cast<int>(train[i].label) == cls) idx.push_back(i);
        }
        const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * fraction + 1e-9));
        Rng rng(derive_seed(seed, "validation", static_cast<std::uint64_t>(cls)));
        rng.shuffle(idx);
        for (std::size_t k = 0; k < n_val; ++k) held[idx[k]] = true;
    }
    std::vector<Sample> kept;
    for (std::size_t i = 0; i < train.size(); ++i) (held[i] ? validation : kept).push_back(std::move(train[i]));
    train = std::move(kept);
}

TrainRun train(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
               const Backbone& backbone, const TrainConfig& config, const TrainHooks& hooks) {
    config.validate();
    const auto train_records = filter_split(records, Split::train);
    bool has[2] = {false, false};
    for (const auto& r : train_records) has[static_cast<int>(r.label)] = true;
    if (!has[0] || !has[1]) throw ValidationError("train split must contain both real and fake records");

    TrainRun run;
    std::vector<Sample> samples = load_samples(train_records, manifest_path, backbone.config(), &run.skipped_records);
    std::vector<Sample> validation;
    split_validation(samples, validation, config.validation_fraction, config.seed);
    bool left[2] = {false, false};
    for (const auto& s : samples) left[static_cast<int>(s.label)] = true;
    if (!left[0] || !left[1]) throw ValidationError("no readable training images for one of the classes");
    run.train_size = samples.size();
    run.validation_size = validation.size();

    TrainState state;
    if (hooks.resume) {
        state = *hooks.resume;
        state.params.options = config.adapter_options;
        state.velocity.options = config.adapter_options;
        state.best_params.options = config.adapter_options;
    } else {
        state = TrainState::fresh(AdapterSet::initialize(backbone.config().adapter_block_indices,
                                                         backbone.config().channel_dim,
                                                         derive_seed(config.seed, "adapter-init"),
                                                         config.adapter_options));
    }
    backbone.validate_adapters(state.params);

    std::ofstream log;
    if (hooks.out_dir) {
        std::filesystem::create_directories(*hooks.out_dir);
        log.open(*hooks.out_dir / "train_log.jsonl", hooks.resume ? std::ios::app : std::ios::trunc);
        if (!log) throw IoError("cannot write " + (*hooks.out_dir / "train_log.jsonl").string());
    }

    const auto batch = static_cast<std::size_t>(config.batch_size);
    for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(config.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            std::vector<Sample> chunk;
            for (std::size_t k = start; k < std::min(order.size(), start + batch); ++k) chunk.push_back(samples[order[k]]);
            BatchResult r = evaluate_batch(backbone, state.params, chunk, config.prompts, true, config.threads);
            sgd_step(state, r.grads, config);
            loss_sum += r.loss * static_cast<double>(chunk.size());
            correct += r.correct;
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.loss = loss_sum / static_cast<double>(samples.size());
        entry.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
        double selection = entry.loss;
        if (!validation.empty()) {
            const BatchResult v = evaluate_batch(backbone, state.params, validation, config.prompts, false, config.threads);
            entry.val_loss = v.loss;
            entry.val_accuracy = static_cast<double>(v.correct) / static_cast<double>(validation.size());
            selection = v.loss;
        }
        entry.timestamp = utc_timestamp();
        state.epoch = epoch + 1;
        state.history.push_back(entry);
        const bool improved = selection < state.best_loss;
        if (improved) {
            state.best_loss = selection;
            state.best_epoch = epoch;
            state.best_params = state.params;
        }
        spdlog::info("epoch {}/{}: loss {:.6f} acc {:.3f}{}", epoch + 1, config.epochs, entry.loss, entry.accuracy,
                     entry.val_loss ? fmt::format(" val_loss {:.6f}", *entry.val_loss) : std::string());

        if (hooks.out_dir) {
            log << entry.to_json().dump() << '\n' << std::flush;
            save_train_state(*hooks.out_dir / "last.ckpt", state, config, backbone.config());
            if (improved) {
                save_adapter_checkpoint(*hooks.out_dir / "best.ckpt", state.best_params, config.prompts,
                                        backbone.config(), {{"epoch", epoch}, {"selection_loss", selection}});
            }
        }
        if (hooks.on_epoch_end) hooks.on_epoch_end(state);
    }
    run.state = std::move(state);
    return run;
}

TrainRun train(const std::filesystem::path& manifest_path, const Backbone& backbone, const TrainConfig& config,
               const TrainHooks& hooks) {
    return train(load_manifest(manifest_path), manifest_path, backbone, config, hooks);
}

void save_adapter_checkpoint(const std::filesystem::path& path, const AdapterSet& adapters,
                             const std::array<std::string, 2>& prompts, const BackboneConfig& backbone,
                             const nlohmann::json& extra) {
    TensorArchive archive;
    archive.tensors = adapters.to_tensors();
    std::vector<int> blocks;
    for (const auto& [idx, p] : adapters.visual) blocks.push_back(idx);
    archive.metadata = {{"kind", "adapters"},
                        {"prompts", prompts},
                        {"backbone_variant", backbone.variant},
                        {"channel_dim", backbone.channel_dim},
                        {"adapter_blocks", blocks},
                        {"adapter_options", options_to_json(adapters.options)},
                        {"extra", extra}};
    save_tensor_archive(path, archive);
}

AdapterCheckpoint load_adapter_checkpoint(const std::filesystem::path& path) {
    TensorArchive archive = load_tensor_archive(path);
    const auto& meta = archive.metadata;
    AdapterCheckpoint ck;
    try {
        const CdfaOptions options = meta.contains("adapter_options") ? options_from_json(meta["adapter_options"]) : CdfaOptions{};
        ck.adapters = AdapterSet::from_tensors(archive.tensors, options);
        if (meta.contains("prompts")) ck.prompts = meta["prompts"].get<std::array<std::string, 2>>();
        ck.backbone_variant = meta.value("backbone_variant", "");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad adapter checkpoint metadata: " + e.what());
    }
    ck.metadata = meta;
    return ck;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config,
                      const BackboneConfig& backbone) {
    TensorArchive archive;
    archive.tensors = state.params.to_tensors();
    for (auto& [name, t] : with_prefix(state.velocity.to_tensors(), "optim.velocity.")) archive.tensors.emplace(name, t);
    for (auto& [name, t] : with_prefix(state.best_params.to_tensors(), "best.")) archive.tensors.emplace(name, t);
    nlohmann::json history = nlohmann::json::array();
    for (const auto& e : state.history) history.push_back(e.to_json());
    archive.metadata = {{"kind", "train_state"},
                        {"epoch", state.epoch},
                        {"history", history},
                        {"skipped_steps", state.skipped_steps},
                        {"best_loss", std::isfinite(state.best_loss) ? nlohmann::json(state.best_loss) : nlohmann::json(nullptr)},
                        {"best_epoch", state.best_epoch},
                        {"train_config", config.to_json()},
                        {"backbone_variant", backbone.variant},
                        {"adapter_options", options_to_json(state.params.options)}};
    save_tensor_archive(path, archive);
}

TrainState load_train_state(const std::filesystem::path& path) {
    TensorArchive archive = load_tensor_archive(path);
    const auto& meta = archive.metadata;
    if (meta.value("kind", "") != "train_state") throw FormatError(path.string() + ": not a training state checkpoint");
    TrainState s;
    try {
        const CdfaOptions options = options_from_json(meta.at("adapter_options"));
        TensorMap current;
        for (const auto& [name, t] : archive.tensors) {
            if (name.rfind(kAdapterPrefix, 0) == 0) current.emplace(name, t);
        }
        s.params = AdapterSet::from_tensors(current, options);
        s.velocity = AdapterSet::from_tensors(strip_prefix(archive.tensors, "optim.velocity."), options);
        s.best_params = AdapterSet::from_tensors(strip_prefix(archive.tensors, "best."), options);
        s.epoch = meta.at("epoch").get<int>();
        for (const auto& e : meta.at("history")) s.history.push_back(EpochLog::from_json(e));
        s.skipped_steps = meta.at("skipped_steps").get<std::size_t>();
        s.best_loss = meta.at("best_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                    : meta.at("best_loss").get<double>();
        s.best_epoch = meta.at("best_epoch").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad training state metadata: " + e.what());
    }
    return s;
}

}  // namespace medfor
