#include "medfor/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "medfor/errors.hpp"
#include "medfor/rng.hpp"

namespace medfor {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        T v{};
        if constexpr (std::is_same_v<T, int>) {
            v = std::stoi(text, &used);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
            v = std::stoull(text, &used);
        } else {
            v = std::stod(text, &used);
        }
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("invalid value for " + key + ": '" + text + "'");
    }
}

}  // namespace

std::vector<int> parse_index_list(std::string_view text) {
    std::vector<int> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const std::string item = trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (item.empty()) throw ConfigError("empty entry in index list '" + std::string(text) + "'");
        out.push_back(parse_value<int>("adapter_blocks", item));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

BackboneConfig RunConfig::backbone_config() const {
    BackboneConfig c = builtin_backbone() ? BackboneConfig::tiny() : BackboneConfig::for_variant(variant);
    if (resolution) c.input_resolution = *resolution;
    if (adapter_blocks) c.adapter_block_indices = *adapter_blocks;
    c.validate();
    return c;
}

std::uint64_t RunConfig::subsystem_seed(std::string_view tag) const { return derive_seed(seed, tag); }

TrainConfig RunConfig::train_config() const {
    TrainConfig t = train;
    t.seed = subsystem_seed("train");
    t.threads = threads;
    return t;
}

BankSettings RunConfig::bank_settings() const {
    return {n_per_class, subsystem_seed("bank"), alpha, beta};
}

void RunConfig::validate() const {
    train.validate();
    if (n_per_class < 1) throw ConfigError("n_per_class must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    backbone_config();
}

nlohmann::json RunConfig::to_json() const {
    const BackboneConfig bc = backbone_config();
    return {{"backbone", {{"name", backbone},
                          {"variant", bc.variant},
                          {"resolution", bc.input_resolution},
                          {"adapter_blocks", bc.adapter_block_indices}}},
            {"train", train_config().to_json()},
            {"mfrm", {{"alpha", alpha}, {"beta", beta}, {"n_per_class", n_per_class}, {"seed", bank_settings().seed}}},
            {"run", {{"seed", seed}, {"output_dir", output_dir.string()}, {"threads", threads}}}};
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw ConfigError(path.string() + ": key '" + section + "' outside a section");
        }
        for (const auto& [key, node] : body) {
            const std::string name = section + "." + key;
            const std::string v = trim(node.data());
            if (name == "backbone.name") config.backbone = v;
            else if (name == "backbone.variant") config.variant = v;
            else if (name == "backbone.resolution") config.resolution = parse_value<int>(name, v);
            else if (name == "backbone.adapter_blocks") config.adapter_blocks = parse_index_list(v);
            else if (name == "train.epochs") config.train.epochs = parse_value<int>(name, v);
            else if (name == "train.batch_size") config.train.batch_size = parse_value<int>(name, v);
            else if (name == "train.lr") config.train.lr = parse_value<double>(name, v);
            else if (name == "train.momentum") config.train.momentum = parse_value<double>(name, v);
            else if (name == "train.weight_decay") config.train.weight_decay = parse_value<double>(name, v);
            else if (name == "train.validation_fraction") config.train.validation_fraction = parse_value<double>(name, v);
            else if (name == "train.streams") config.train.adapter_options.streams = parse_stream_mode(v);
            else if (name == "train.lambda_target") config.train.adapter_options.lambda_target = parse_lambda_target(v);
            else if (name == "train.prompt_real") config.train.prompts[0] = v;
            else if (name == "train.prompt_fake") config.train.prompts[1] = v;
            else if (name == "mfrm.alpha") config.alpha = parse_value<double>(name, v);
            else if (name == "mfrm.beta") config.beta = parse_value<double>(name, v);
            else if (name == "mfrm.n_per_class") config.n_per_class = parse_value<int>(name, v);
            else if (name == "run.seed") config.seed = parse_value<std::uint64_t>(name, v);
            else if (name == "run.output_dir") config.output_dir = v;
            else if (name == "run.threads") config.threads = parse_value<int>(name, v);
            else throw ConfigError(path.string() + ": unknown key '" + name + "'");
        }
    }
}

std::filesystem::path default_output_dir() {
    if (const char* home = std::getenv(kHomeEnvVar); home && *home) return home;
    return "medfor_runs";
}

std::shared_ptr<const Backbone> load_backbone(const RunConfig& config) {
    const BackboneConfig bc = config.backbone_config();
    if (config.builtin_backbone()) return std::make_shared<const Backbone>(Backbone::random_init(bc, 0));
    return std::make_shared<const Backbone>(load_pretrained(config.backbone, bc));
}

std::string version_string() { return MEDFOR_VERSION; }

void write_run_bundle(const std::filesystem::path& dir, const std::string& command, const RunConfig& config,
                      const Backbone* backbone) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json j;
    j["command"] = command;
    j["version"] = version_string();
    j["seed"] = config.seed;
    j["config"] = config.to_json();
    if (backbone) j["backbone_fingerprint"] = backbone->weights_fingerprint();
    std::ofstream out(dir / "run.json");
    if (!out) throw IoError("cannot write " + (dir / "run.json").string());
    out << j.dump(2) << '\n';
}

}  // namespace medfor
