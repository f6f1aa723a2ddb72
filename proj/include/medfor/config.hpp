#pragma once

// Layered run configuration: built-in defaults, then an INI file, then flags.
//
//   [backbone]  name = tiny | <path to weights>   variant   resolution   adapter_blocks = 7,15,23
//   [train]     epochs  batch_size  lr  momentum  weight_decay  validation_fraction
//               streams = both|spatial|noise   lambda_target = noise|spatial
//               prompt_real  prompt_fake
//   [mfrm]      alpha  beta  n_per_class
//   [run]       seed  output_dir  threads

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medfor/backbone.hpp"
#include "medfor/pipeline.hpp"
#include "medfor/trainer.hpp"

namespace medfor {

inline constexpr const char* kHomeEnvVar = "MEDFOR_HOME";

struct RunConfig {
    std::string backbone = "tiny";
    // Architecture of a weights file; ignored for the built-in tiny backbone.
    std::string variant = "vit-l14";
    std::optional<int> resolution;
    // Defaults to the variant's placement (three evenly spaced blocks).
    std::optional<std::vector<int>> adapter_blocks;
    TrainConfig train;
    double alpha = kDefaultAlpha;
    double beta = kDefaultBeta;
    int n_per_class = kDefaultBankShots;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;
    int threads = 1;

    bool builtin_backbone() const { return backbone == "tiny"; }
    BackboneConfig backbone_config() const;
    // Train settings with the seed fanned out from the root seed.
    TrainConfig train_config() const;
    BankSettings bank_settings() const;
    std::uint64_t subsystem_seed(std::string_view tag) const;
    void validate() const;
    nlohmann::json to_json() const;
};

// Overlays an INI file onto `config`. Unknown sections or keys and unparsable
// values raise ConfigError naming the key.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

std::vector<int> parse_index_list(std::string_view text);

// $MEDFOR_HOME when set, otherwise ./medfor_runs.
std::filesystem::path default_output_dir();

// The built-in tiny backbone is deterministic (fixed seed 0) so that every
// command sees the same frozen weights.
std::shared_ptr<const Backbone> load_backbone(const RunConfig& config);

// Writes run.json: command, resolved config, root seed, version, backbone fingerprint.
void write_run_bundle(const std::filesystem::path& dir, const std::string& command, const RunConfig& config,
                      const Backbone* backbone = nullptr);

std::string version_string();

}  // namespace medfor
