#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "medfor/backbone.hpp"
#include "medfor/cdfa_adapter.hpp"
#include "medfor/image.hpp"
#include "medfor/manifest.hpp"

namespace medfor {

inline constexpr double kProbabilityClamp = 1e-7;

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr = 1e-4;
    double momentum = 0.9;
    double weight_decay = 0.005;
    std::uint64_t seed = 0;
    std::array<std::string, 2> prompts = kDefaultPrompts;
    CdfaOptions adapter_options{};
    // Share of each class in the train split held out for best-checkpoint selection.
    double validation_fraction = 0.1;
    // Worker threads for per-sample forward/backward. Results are reduced in sample
    // order, so any value gives the same trajectory; 1 runs inline.
    int threads = 1;

    void validate() const;
    nlohmann::json to_json() const;
};

// Mean binary cross-entropy of fake-class probabilities, clamped to [1e-7, 1 - 1e-7].
double bce_loss(std::span<const double> probs, std::span<const int> labels);

// Softmax probability of index 1.
double fake_probability(const Eigen::Vector2d& logits);

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_accuracy;
    std::string timestamp;

    nlohmann::json to_json() const;
    static EpochLog from_json(const nlohmann::json& j);
};

struct TrainState {
    AdapterSet params;
    AdapterSet velocity;
    int epoch = 0;  // completed epochs
    std::vector<EpochLog> history;
    std::size_t skipped_steps = 0;
    AdapterSet best_params;
    double best_loss = std::numeric_limits<double>::infinity();
    int best_epoch = -1;

    static TrainState fresh(AdapterSet initial);
};

// Classic momentum with coupled decay: v = m v + g + wd theta (wd skipped for
// lambda and biases); theta -= lr v; then Bayar projection and f32 rounding.
// A gradient with any non-finite entry is rejected: returns false, warns, and
// bumps skipped_steps.
bool sgd_step(TrainState& state, const AdapterSet& grads, const TrainConfig& config);

// A preprocessed training image.
struct Sample {
    ImageTensor image;
    Label label = Label::real;
    std::string id;
};

struct BatchResult {
    double loss = 0.0;
    std::vector<double> probs;
    std::size_t correct = 0;
    AdapterSet grads;  // empty unless requested
};

// Forward (and optionally backward) over a batch: adapted features, temperature
// scaled logits against the adapted text classifier, softmax, BCE.
BatchResult evaluate_batch(const Backbone& backbone, const AdapterSet& params, std::span<const Sample> batch,
                           const std::array<std::string, 2>& prompts, bool with_grad, int threads = 1);

struct TrainHooks {
    // Directory for last.ckpt (resumable state), best.ckpt (adapters) and train_log.jsonl.
    std::optional<std::filesystem::path> out_dir;
    std::optional<TrainState> resume;
    std::function<void(const TrainState&)> on_epoch_end;
};

struct TrainRun {
    TrainState state;
    std::size_t skipped_records = 0;
    std::size_t train_size = 0;
    std::size_t validation_size = 0;
};

// Loads and preprocesses a split; unreadable images are skipped with a warning.
std::vector<Sample> load_samples(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
                                 const BackboneConfig& config, std::size_t* skipped = nullptr);

// Deterministic per-class hold-out of floor(n * fraction) samples.
void split_validation(std::vector<Sample>& train, std::vector<Sample>& validation, double fraction, std::uint64_t seed);

TrainRun train(const std::vector<DatasetRecord>& records, const std::filesystem::path& manifest_path,
               const Backbone& backbone, const TrainConfig& config, const TrainHooks& hooks = {});
TrainRun train(const std::filesystem::path& manifest_path, const Backbone& backbone, const TrainConfig& config,
               const TrainHooks& hooks = {});

// Adapter-only checkpoint used for detection.
struct AdapterCheckpoint {
    AdapterSet adapters;
    std::array<std::string, 2> prompts = kDefaultPrompts;
    std::string backbone_variant;
    nlohmann::json metadata;
};

void save_adapter_checkpoint(const std::filesystem::path& path, const AdapterSet& adapters,
                             const std::array<std::string, 2>& prompts, const BackboneConfig& backbone,
                             const nlohmann::json& extra = nlohmann::json::object());
AdapterCheckpoint load_adapter_checkpoint(const std::filesystem::path& path);

// Full resumable state: adapters, momentum buffers, best adapters, history.
void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config,
                      const BackboneConfig& backbone);
TrainState load_train_state(const std::filesystem::path& path);

}  // namespace medfor
