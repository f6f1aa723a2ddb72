// medfor: train, bank management, detection, evaluation and ablation.
// Exit codes: 0 success, 1 internal error, 2 usage or input error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "medfor/config.hpp"
#include "medfor/errors.hpp"
#include "medfor/manifest.hpp"
#include "medfor/metrics.hpp"
#include "medfor/mfrm.hpp"
#include "medfor/pipeline.hpp"
#include "medfor/toy_corpus.hpp"
#include "medfor/trainer.hpp"

namespace fs = std::filesystem;
using namespace medfor;

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

// Flags shared by every command; unset ones leave file/default values alone.
struct CommonFlags {
    std::string config_file;
    std::optional<std::string> backbone;
    std::optional<std::string> variant;
    std::optional<int> resolution;
    std::optional<std::string> adapter_blocks;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> threads;
    bool single_thread = false;
    bool quiet = false;
};

struct TrainFlags {
    std::optional<int> epochs;
    std::optional<int> batch_size;
    std::optional<double> lr;
    std::optional<double> momentum;
    std::optional<double> weight_decay;
    std::optional<double> validation_fraction;
    std::optional<std::string> streams;
    std::optional<std::string> lambda_target;
};

struct BankFlags {
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<int> n_per_class;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_file, "INI file with [backbone] [train] [mfrm] [run] sections");
    cmd->add_option("--backbone", f.backbone, "'tiny' or a path to a weights file");
    cmd->add_option("--variant", f.variant, "architecture of a weights file (tiny, vit-l14)");
    cmd->add_option("--resolution", f.resolution, "input resolution override");
    cmd->add_option("--adapter-blocks", f.adapter_blocks, "comma-separated block indices, e.g. 7,15,23");
    cmd->add_option("--seed", f.seed, "root seed");
    cmd->add_option("--out", f.out, "output directory (default $MEDFOR_HOME/<command>)");
    cmd->add_option("--threads", f.threads, "worker threads");
    cmd->add_flag("--single-thread", f.single_thread, "force one thread for exact replay");
    cmd->add_flag("-q,--quiet", f.quiet, "only warnings and errors");
}

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--epochs", f.epochs, "passes over the train split");
    cmd->add_option("--batch-size", f.batch_size, "images per SGD step");
    cmd->add_option("--lr", f.lr, "learning rate");
    cmd->add_option("--momentum", f.momentum, "SGD momentum");
    cmd->add_option("--weight-decay", f.weight_decay, "L2 weight decay (not applied to biases or lambda)");
    cmd->add_option("--validation-fraction", f.validation_fraction, "share of train held out to pick best.ckpt");
    cmd->add_option("--streams", f.streams, "both, spatial or noise");
    cmd->add_option("--lambda-target", f.lambda_target, "stream scaled by lambda: noise or spatial");
}

void add_bank_flags(CLI::App* cmd, BankFlags& f) {
    cmd->add_option("--alpha", f.alpha, "affinity sharpness");
    cmd->add_option("--beta", f.beta, "weight of the retrieved logits");
    cmd->add_option("--n-per-class", f.n_per_class, "bank samples per class");
}

RunConfig resolve(const std::string& command, const CommonFlags& c, const TrainFlags* t = nullptr,
                  const BankFlags* b = nullptr) {
    RunConfig cfg;
    if (!c.config_file.empty()) apply_config_file(cfg, c.config_file);
    if (c.backbone) cfg.backbone = *c.backbone;
    if (c.variant) cfg.variant = *c.variant;
    if (c.resolution) cfg.resolution = *c.resolution;
    if (c.adapter_blocks) cfg.adapter_blocks = parse_index_list(*c.adapter_blocks);
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    if (c.single_thread) cfg.threads = 1;
    if (c.out) cfg.output_dir = *c.out;
    if (cfg.output_dir.empty()) cfg.output_dir = default_output_dir() / command;
    if (t) {
        if (t->epochs) cfg.train.epochs = *t->epochs;
        if (t->batch_size) cfg.train.batch_size = *t->batch_size;
        if (t->lr) cfg.train.lr = *t->lr;
        if (t->momentum) cfg.train.momentum = *t->momentum;
        if (t->weight_decay) cfg.train.weight_decay = *t->weight_decay;
        if (t->validation_fraction) cfg.train.validation_fraction = *t->validation_fraction;
        if (t->streams) cfg.train.adapter_options.streams = parse_stream_mode(*t->streams);
        if (t->lambda_target) cfg.train.adapter_options.lambda_target = parse_lambda_target(*t->lambda_target);
    }
    if (b) {
        if (b->alpha) cfg.alpha = *b->alpha;
        if (b->beta) cfg.beta = *b->beta;
        if (b->n_per_class) cfg.n_per_class = *b->n_per_class;
    }
    cfg.validate();
    spdlog::set_level(c.quiet ? spdlog::level::warn : spdlog::level::info);
    return cfg;
}

void require_file(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

// Adapters from a checkpoint, or none for the frozen encoder.
Detector make_detector(const std::shared_ptr<const Backbone>& backbone, const std::string& checkpoint,
                       const RunConfig& cfg) {
    if (checkpoint.empty()) return Detector(backbone, std::nullopt, cfg.train.prompts);
    require_file(checkpoint, "checkpoint");
    AdapterCheckpoint ck = load_adapter_checkpoint(checkpoint);
    if (!ck.backbone_variant.empty() && ck.backbone_variant != backbone->config().variant) {
        throw ConfigError("checkpoint was trained on backbone '" + ck.backbone_variant + "', current backbone is '" +
                          backbone->config().variant + "'");
    }
    return Detector(backbone, std::move(ck.adapters), ck.prompts);
}

Label parse_label_arg(const std::string& text) {
    if (text == "real" || text == "0") return Label::real;
    if (text == "fake" || text == "1") return Label::fake;
    throw ValidationError("label must be real or fake, got '" + text + "'");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

int cmd_gen_toy(const CommonFlags& c, int n_per_class, double train_fraction, const std::string& family,
                const std::string& prefix, int size, double amp_min, double amp_max) {
    RunConfig cfg = resolve("gen-toy", c);
    ToyCorpusOptions opt;
    opt.family = parse_artifact_family(family);
    opt.prefix = prefix;
    opt.image_size = size;
    opt.amplitude_min = amp_min;
    opt.amplitude_max = amp_max;
    const auto manifest = generate_toy_corpus(n_per_class, cfg.subsystem_seed("toy"), cfg.output_dir, opt);
    if (train_fraction > 0.0) {
        write_manifest(manifest, assign_splits(load_manifest(manifest), train_fraction, cfg.subsystem_seed("split")));
    }
    write_run_bundle(cfg.output_dir, "gen-toy", cfg);
    std::cout << manifest.string() << '\n';
    return 0;
}

int cmd_train(const CommonFlags& c, const TrainFlags& t, const std::string& data, const std::string& resume) {
    RunConfig cfg = resolve("train", c, &t);
    require_file(data, "manifest");
    auto backbone = load_backbone(cfg);
    write_run_bundle(cfg.output_dir, "train", cfg, backbone.get());
    TrainHooks hooks;
    hooks.out_dir = cfg.output_dir;
    if (!resume.empty()) {
        require_file(resume, "resume checkpoint");
        hooks.resume = load_train_state(resume);
    }
    const TrainRun run = train(fs::path(data), *backbone, cfg.train_config(), hooks);
    const auto& last = run.state.history.back();
    std::printf("trained %d epochs on %zu images (%zu held out, %zu skipped): loss %.6f acc %.4f\n",
                run.state.epoch, run.train_size, run.validation_size, run.skipped_records, last.loss, last.accuracy);
    std::printf("best checkpoint: %s (epoch %d)\n", (cfg.output_dir / "best.ckpt").string().c_str(),
                run.state.best_epoch + 1);
    return 0;
}

int cmd_build_bank(const CommonFlags& c, const BankFlags& b, const std::string& data, const std::string& checkpoint,
                   const std::string& bank_path) {
    RunConfig cfg = resolve("build-bank", c, nullptr, &b);
    require_file(data, "manifest");
    auto backbone = load_backbone(cfg);
    Detector detector = make_detector(backbone, checkpoint, cfg);
    const BankSettings s = cfg.bank_settings();
    FeatureBank bank = build_bank(fs::path(data), detector.extractor(), s.n_per_class, s.seed, s.alpha, s.beta);
    const fs::path out = bank_path.empty() ? cfg.output_dir / "bank.mfrm" : fs::path(bank_path);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_bank(bank, out);
    write_run_bundle(cfg.output_dir, "build-bank", cfg, backbone.get());
    std::printf("bank: %zu rows x %ld -> %s\n", bank.rows(), static_cast<long>(bank.dim()), out.string().c_str());
    return 0;
}

int cmd_bank_insert(const CommonFlags& c, const std::string& bank_path, const std::string& checkpoint,
                    const std::vector<std::string>& items, const std::string& data, const std::string& out_path) {
    RunConfig cfg = resolve("bank-insert", c);
    require_file(bank_path, "bank");
    auto backbone = load_backbone(cfg);
    Detector detector = make_detector(backbone, checkpoint, cfg);
    std::vector<LabeledImage> samples;
    for (const auto& item : items) {
        const auto colon = item.rfind(':');
        if (colon == std::string::npos) throw ValidationError("expected PATH:LABEL, got '" + item + "'");
        samples.push_back({item.substr(0, colon), parse_label_arg(item.substr(colon + 1))});
    }
    if (!data.empty()) {
        require_file(data, "manifest");
        for (const auto& rec : load_manifest(data)) samples.push_back({resolve_record_path(data, rec), rec.label});
    }
    if (samples.empty()) throw ValidationError("nothing to insert: give --add PATH:LABEL or --data");
    std::size_t skipped = 0;
    const FeatureBank bank = insert_samples(load_bank(bank_path), samples, detector.extractor(), &skipped);
    const fs::path out = out_path.empty() ? fs::path(bank_path) : fs::path(out_path);
    save_bank(bank, out);
    write_run_bundle(cfg.output_dir, "bank-insert", cfg, backbone.get());
    std::printf("bank: %zu rows (%zu inserted, %zu skipped) -> %s\n", bank.rows(), samples.size() - skipped, skipped,
                out.string().c_str());
    return 0;
}

int cmd_detect(const CommonFlags& c, const BankFlags& b, const std::string& checkpoint, const std::string& bank_path,
               const std::vector<std::string>& inputs) {
    RunConfig cfg = resolve("detect", c, nullptr, &b);
    auto backbone = load_backbone(cfg);
    Detector detector = make_detector(backbone, checkpoint, cfg);
    if (!bank_path.empty()) {
        require_file(bank_path, "bank");
        FeatureBank bank = load_bank(bank_path);
        if (b.alpha) bank.alpha = *b.alpha;
        if (b.beta) bank.beta = *b.beta;
        detector.set_bank(std::move(bank));
    }
    write_run_bundle(cfg.output_dir, "detect", cfg, backbone.get());
    std::ofstream records(cfg.output_dir / "detections.jsonl");
    for (const auto& input : inputs) {
        nlohmann::ordered_json j;
        j["path"] = input;
        try {
            const DetectionResult r = detector.detect_file(input);
            j["fake_probability"] = r.fake_probability;
            j["label"] = std::string(to_string(r.predicted));
            j["used_bank"] = r.used_bank;
            j["logits"] = {r.logits(0), r.logits(1)};
        } catch (const Error& e) {
            j["error"] = e.what();
        }
        std::cout << j.dump() << '\n';
        records << j.dump() << '\n';
    }
    return 0;
}

int cmd_evaluate(const CommonFlags& c, const BankFlags& b, const std::string& data, const std::string& checkpoint,
                 const std::string& bank_path, bool build, const std::string& group_by, const std::string& method) {
    RunConfig cfg = resolve("evaluate", c, nullptr, &b);
    require_file(data, "manifest");
    auto backbone = load_backbone(cfg);
    Detector detector = make_detector(backbone, checkpoint, cfg);
    const auto records = load_manifest(data);
    if (!bank_path.empty()) {
        require_file(bank_path, "bank");
        FeatureBank bank = load_bank(bank_path);
        if (b.alpha) bank.alpha = *b.alpha;
        if (b.beta) bank.beta = *b.beta;
        detector.set_bank(std::move(bank));
    } else if (build) {
        const BankSettings s = cfg.bank_settings();
        detector.set_bank(build_bank(records, data, detector.extractor(), s.n_per_class, s.seed, s.alpha, s.beta));
    }
    const EvalOutcome outcome = evaluate(records, data, detector.detect_fn(), parse_group_by(group_by), cfg.threads);
    const std::string table = render_cross_group_table({{method, outcome}});
    write_run_bundle(cfg.output_dir, "evaluate", cfg, backbone.get());
    write_text(cfg.output_dir / "report.txt", table);
    write_text(cfg.output_dir / "report.json", outcome.to_json().dump(2) + "\n");
    std::cout << table;
    if (outcome.errors > 0) {
        std::fprintf(stderr, "%zu record(s) failed detection\n", outcome.errors);
        return kExitUsage;
    }
    return 0;
}

int cmd_ablate(const CommonFlags& c, const TrainFlags& t, const BankFlags& b, const std::string& data,
               const std::string& ck_both, const std::string& ck_spatial, const std::string& ck_noise,
               bool train_in_place, const std::string& group_by) {
    RunConfig cfg = resolve("ablate", c, &t, &b);
    require_file(data, "manifest");
    auto backbone = load_backbone(cfg);
    write_run_bundle(cfg.output_dir, "ablate", cfg, backbone.get());
    AblationSetup setup;
    setup.backbone = backbone;
    setup.records = load_manifest(data);
    setup.manifest_path = data;
    setup.prompts = cfg.train.prompts;
    setup.bank = cfg.bank_settings();
    setup.group_by = parse_group_by(group_by);
    setup.threads = cfg.threads;
    const std::pair<StreamMode, std::string> given[] = {
        {StreamMode::both, ck_both}, {StreamMode::spatial_only, ck_spatial}, {StreamMode::noise_only, ck_noise}};
    for (const auto& [mode, path] : given) {
        if (!path.empty()) {
            if (!fs::exists(path)) {
                spdlog::warn("{} checkpoint {} not found; row marked unavailable", to_string(mode), path);
                continue;
            }
            setup.adapters.emplace(mode, load_adapter_checkpoint(path).adapters);
        } else if (train_in_place) {
            TrainConfig tc = cfg.train_config();
            tc.adapter_options.streams = mode;
            TrainHooks hooks;
            hooks.out_dir = cfg.output_dir / ("train-" + std::string(to_string(mode)));
            spdlog::info("training {} adapters", to_string(mode));
            setup.adapters.emplace(mode, train(fs::path(data), *backbone, tc, hooks).state.best_params);
        }
    }
    const AblationReport report = run_ablation(setup);
    const std::string text = report.render();
    write_text(cfg.output_dir / "ablation.txt", text);
    write_text(cfg.output_dir / "ablation.json", report.to_json().dump(2) + "\n");
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Detector for AI-generated medical images: adapter training, retrieval bank, evaluation"};
    app.set_version_flag("--version", version_string());
    app.require_subcommand(1);

    CommonFlags common;
    TrainFlags tflags;
    BankFlags bflags;

    auto* gen = app.add_subcommand("gen-toy", "write a procedural real/fake texture corpus and manifest");
    int toy_n = 24;
    double toy_train_fraction = 2.0 / 3.0;
    std::string toy_family = "checker", toy_prefix = "toy";
    int toy_size = 32;
    double toy_amp_min = ToyCorpusOptions{}.amplitude_min, toy_amp_max = ToyCorpusOptions{}.amplitude_max;
    add_common(gen, common);
    gen->add_option("-n,--n-per-class", toy_n, "images per class")->check(CLI::PositiveNumber);
    gen->add_option("--train-fraction", toy_train_fraction, "train share per class; 0 leaves splits unassigned");
    gen->add_option("--family", toy_family, "artifact family: checker or stripe");
    gen->add_option("--prefix", toy_prefix, "file-name prefix");
    gen->add_option("--size", toy_size, "image side in pixels")->check(CLI::PositiveNumber);
    gen->add_option("--amplitude-min", toy_amp_min, "smallest artifact amplitude (0..1 intensity)");
    gen->add_option("--amplitude-max", toy_amp_max, "largest artifact amplitude");

    auto* tr = app.add_subcommand("train", "train adapters on a manifest");
    std::string data, resume;
    add_common(tr, common);
    add_train_flags(tr, tflags);
    tr->add_option("--data", data, "JSONL manifest")->required();
    tr->add_option("--resume", resume, "resume from a last.ckpt");

    auto* bb = app.add_subcommand("build-bank", "sample n real + n fake train images into a retrieval bank");
    std::string checkpoint, bank_path, out_bank;
    add_common(bb, common);
    add_bank_flags(bb, bflags);
    bb->add_option("--data", data, "JSONL manifest")->required();
    bb->add_option("--checkpoint", checkpoint, "adapter checkpoint (omit for the frozen encoder)");
    bb->add_option("--bank", out_bank, "output bank file (default <out>/bank.mfrm)");

    auto* bi = app.add_subcommand("bank-insert", "append labeled images to a bank without retraining");
    std::vector<std::string> items;
    add_common(bi, common);
    bi->add_option("--bank", bank_path, "bank file")->required();
    bi->add_option("--checkpoint", checkpoint, "adapter checkpoint the bank was built with");
    bi->add_option("--add", items, "PATH:LABEL with LABEL real or fake");
    bi->add_option("--data", data, "insert every record of a manifest");
    bi->add_option("--output", out_bank, "write here instead of overwriting --bank");

    auto* det = app.add_subcommand("detect", "score images; one JSON line per image");
    std::vector<std::string> inputs;
    add_common(det, common);
    add_bank_flags(det, bflags);
    det->add_option("--checkpoint", checkpoint, "adapter checkpoint (omit for zero-shot)");
    det->add_option("--bank", bank_path, "retrieval bank");
    det->add_option("images", inputs, "image files")->required();

    auto* ev = app.add_subcommand("evaluate", "Acc/AP on the test split, per group");
    bool build = false;
    std::string group_by = "modality", method = "medfor";
    add_common(ev, common);
    add_bank_flags(ev, bflags);
    ev->add_option("--data", data, "JSONL manifest")->required();
    ev->add_option("--checkpoint", checkpoint, "adapter checkpoint (omit for zero-shot)");
    ev->add_option("--bank", bank_path, "retrieval bank file");
    ev->add_flag("--build-bank", build, "build a bank from the train split first");
    ev->add_option("--group-by", group_by, "modality or generator");
    ev->add_option("--method", method, "row label in the report");

    auto* ab = app.add_subcommand("ablate", "component and stream ablation tables");
    std::string ck_both, ck_spatial, ck_noise;
    bool in_place = false;
    add_common(ab, common);
    add_train_flags(ab, tflags);
    add_bank_flags(ab, bflags);
    ab->add_option("--data", data, "JSONL manifest")->required();
    ab->add_option("--checkpoint-both", ck_both, "adapters trained with both streams");
    ab->add_option("--checkpoint-spatial", ck_spatial, "adapters trained with the spatial stream only");
    ab->add_option("--checkpoint-noise", ck_noise, "adapters trained with the noise stream only");
    ab->add_flag("--train-in-place", in_place, "train any configuration without a checkpoint");
    ab->add_option("--group-by", group_by, "modality or generator");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*gen) return cmd_gen_toy(common, toy_n, toy_train_fraction, toy_family, toy_prefix, toy_size, toy_amp_min, toy_amp_max);
        if (*tr) return cmd_train(common, tflags, data, resume);
        if (*bb) return cmd_build_bank(common, bflags, data, checkpoint, out_bank);
        if (*bi) return cmd_bank_insert(common, bank_path, checkpoint, items, data, out_bank);
        if (*det) return cmd_detect(common, bflags, checkpoint, bank_path, inputs);
        if (*ev) return cmd_evaluate(common, bflags, data, checkpoint, bank_path, build, group_by, method);
        if (*ab) return cmd_ablate(common, tflags, bflags, data, ck_both, ck_spatial, ck_noise, in_place, group_by);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return kExitInternal;
    }
    return kExitUsage;
}
