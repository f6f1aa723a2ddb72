// Acceptance checks. Prints one PASS/FAIL line per criterion with the measured
// numbers, and exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "medfor/backbone.hpp"
#include "medfor/cdfa_adapter.hpp"
#include "medfor/checkpoint.hpp"
#include "medfor/config.hpp"
#include "medfor/manifest.hpp"
#include "medfor/metrics.hpp"
#include "medfor/mfrm.hpp"
#include "medfor/pipeline.hpp"
#include "medfor/toy_corpus.hpp"
#include "medfor/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace medfor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
    std::printf("criterion %2d %s  %s:%s\n", id, v.pass ? "PASS" : "FAIL", title.c_str(), v.detail.str().c_str());
    std::fflush(stdout);
    if (!v.pass) ++failures;
}

// Runs a criterion, turning an unexpected exception into a FAIL line.
void run(int id, const std::string& title, const std::function<void(Verdict&)>& body) {
    Verdict v;
    try {
        body(v);
    } catch (const std::exception& e) {
        v.pass = false;
        v.detail << " [exception: " << e.what() << "]";
    }
    report(id, title, v);
}

// --- shared desk-scale setup -------------------------------------------------

struct Desk {
    RunConfig config;
    std::shared_ptr<const Backbone> backbone;
    fs::path manifest;
    std::vector<DatasetRecord> records;
    std::map<StreamMode, TrainRun> runs;
    double train_seconds = 0.0;
};

RunConfig desk_config(std::uint64_t seed) {
    RunConfig cfg;
    apply_config_file(cfg, MEDFOR_SOURCE_DIR "/configs/desk.ini");
    cfg.seed = seed;
    cfg.threads = 1;
    cfg.validate();
    return cfg;
}

// 24 per class with a 2/3 split: 16/16 train, 8/8 test.
fs::path make_desk_corpus(const RunConfig& cfg, const fs::path& dir) {
    const auto m = generate_toy_corpus(24, cfg.subsystem_seed("toy"), dir);
    write_manifest(m, assign_splits(load_manifest(m), 2.0 / 3.0, cfg.subsystem_seed("split")));
    return m;
}

TrainRun train_mode(const Desk& d, StreamMode mode) {
    TrainConfig tc = d.config.train_config();
    tc.adapter_options.streams = mode;
    return train(d.records, d.manifest, *d.backbone, tc);
}

std::vector<std::pair<Vector, int>> encode_split(const Detector& det, const std::vector<DatasetRecord>& records,
                                                 const fs::path& manifest, Split split) {
    std::vector<std::pair<Vector, int>> out;
    for (const auto& r : filter_split(records, split)) {
        out.emplace_back(det.encode_file(resolve_record_path(manifest, r)), r.label == Label::fake ? 1 : 0);
    }
    return out;
}

double bank_accuracy(const Detector& det, const FeatureBank& bank, const std::vector<std::pair<Vector, int>>& set) {
    std::vector<int> pred, labels;
    for (const auto& [f, y] : set) {
        pred.push_back(blended_logits(f, bank, det.classifier()).predicted == Label::fake ? 1 : 0);
        labels.push_back(y);
    }
    return accuracy(pred, labels);
}

double max_abs(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    oracle::TempDir scratch("acceptance");

    run(1, "constraint projection", [](Verdict& v) {
        const auto t0 = Clock::now();
        Rng rng(1);
        double worst_center = 0.0, worst_sum = 0.0, worst_idem = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            Tensor k({32, 5, 5});
            for (double& x : k.data) x = rng.uniform(-1.0, 1.0);
            const Tensor p = project_bayar_constraint(k);
            for (int c = 0; c < 32; ++c) {
                double off = 0.0;
                for (int i = 0; i < 25; ++i)
                    if (i != 12) off += p.data[c * 25 + i];
                worst_center = std::max(worst_center, std::abs(p.data[c * 25 + 12] + 1.0));
                worst_sum = std::max(worst_sum, std::abs(off - 1.0));
            }
            const Tensor pp = project_bayar_constraint(p);
            for (std::size_t i = 0; i < p.numel(); ++i) worst_idem = std::max(worst_idem, std::abs(pp.data[i] - p.data[i]));
        }
        const double elapsed = seconds_since(t0);
        v.detail << " max|center+1| " << worst_center << ", max|offsum-1| " << worst_sum << ", idempotence "
                 << worst_idem << ", " << elapsed << " s";
        v.require(worst_center <= 1e-6 && worst_sum <= 1e-6, "constraint within 1e-6");
        v.require(worst_idem <= 1e-7, "idempotent within 1e-7");
        v.require(elapsed < 1.0, "runtime < 1 s");
    });

    run(2, "gradient correctness", [](Verdict& v) {
        const auto t0 = Clock::now();
        const Backbone bb = Backbone::reference_tiny();
        AdapterSet params = AdapterSet::initialize({3}, 32, 1);
        oracle::randomize(params, 2, 0.05);
        const auto batch = fixture::toy_batch(bb.config(), 2, 11);
        const BatchResult r = evaluate_batch(bb, params, batch, kDefaultPrompts, true);
        double p_min = 1.0, p_max = 0.0;
        for (double p : r.probs) {
            p_min = std::min(p_min, p);
            p_max = std::max(p_max, p);
        }
        auto loss = [&](const AdapterSet& p) { return evaluate_batch(bb, p, batch, kDefaultPrompts, false).loss; };
        // Tensors up to 1024 entries are checked exhaustively, larger ones at 384 seeded entries.
        const auto checks = oracle::finite_difference_check(params, r.grads, loss, 1e-4, 1024, 384, 3);
        double worst = 0.0;
        std::string worst_name;
        std::size_t entries = 0;
        bool all_nonzero = true;
        for (const auto& c : checks) {
            entries += c.checked;
            all_nonzero = all_nonzero && c.scale > 0.0;
            if (c.rel_error() >= worst) {
                worst = c.rel_error();
                worst_name = c.tensor;
            }
        }
        const double elapsed = seconds_since(t0);
        v.detail << " " << checks.size() << " tensors, " << entries << " entries, max rel err " << worst << " ("
                 << worst_name << "), probs in [" << p_min << ", " << p_max << "], " << elapsed << " s";
        v.require(checks.size() == 11, "one CDFA and the text adapter");
        v.require(p_min > 10 * kProbabilityClamp && p_max < 1.0 - 10 * kProbabilityClamp, "clear of the probability clamp");
        v.require(all_nonzero, "every tensor has a non-zero gradient");
        v.require(worst < 1e-4, "max relative error < 1e-4");
        v.require(elapsed < 60.0, "runtime < 60 s");
    });

    run(3, "inert-adapter identity", [](Verdict& v) {
        const Backbone bb = Backbone::reference_tiny();
        const AdapterSet adapters = AdapterSet::initialize(bb.config().adapter_block_indices, 32, 7);
        double worst = 0.0;
        for (const auto& s : fixture::toy_batch(bb.config(), 10, 5)) {
            worst = std::max(worst, max_abs(bb.encode_image(s.image), bb.encode_image(s.image, &adapters)));
        }
        v.detail << " max |delta| " << worst << " over 10 images";
        v.require(worst < 1e-6, "|delta|_inf < 1e-6");
    });

    Desk desk;
    desk.config = desk_config(0);
    desk.backbone = load_backbone(desk.config);
    desk.manifest = make_desk_corpus(desk.config, scratch / "desk");
    desk.records = load_manifest(desk.manifest);

    run(4, "freeze contract", [&](Verdict& v) {
        const TensorMap before = desk.backbone->tensors();
        const auto fp = desk.backbone->weights_fingerprint();
        TrainConfig tc = desk.config.train_config();
        tc.epochs = 25;  // 32 train images / batch 8 = 4 steps per epoch
        std::size_t steps = 0;
        TrainHooks hooks;
        hooks.on_epoch_end = [&](const TrainState&) { steps += 4; };
        train(desk.records, desk.manifest, *desk.backbone, tc, hooks);
        const bool identical = desk.backbone->tensors() == before && desk.backbone->weights_fingerprint() == fp;
        v.detail << " " << steps << " steps, " << before.size() << " backbone tensors "
                 << (identical ? "bitwise identical" : "CHANGED");
        v.require(steps == 100, "100 training steps");
        v.require(identical, "backbone bitwise identical");
    });

    run(5, "retrieval oracle equivalence", [](Verdict& v) {
        Rng rng(5);
        double worst = 0.0;
        bool beta_zero_exact = true, empty_ok = true;
        for (int trial = 0; trial < 50; ++trial) {
            const int c = 32;
            const int rows = 1 + static_cast<int>(rng.below(256));
            auto unit = [&] {
                Vector x(c);
                for (int i = 0; i < c; ++i) x(i) = rng.normal();
                return Vector(x / x.norm());
            };
            FeatureBank bank;
            bank.alpha = rng.uniform(0.05, 30.0);
            bank.beta = rng.uniform(0.1, 20.0);
            std::vector<int> labels;
            for (int r = 0; r < rows; ++r) {
                const Label l = rng.below(2) ? Label::fake : Label::real;
                append_key(bank, unit(), l, "k");
                labels.push_back(l == Label::fake);
            }
            TextClassifier tc;
            tc.weights.resize(2, c);
            tc.weights.row(0) = unit().transpose();
            tc.weights.row(1) = unit().transpose();
            const Vector q = unit();
            const DetectionResult got = blended_logits(q, bank, tc);
            const auto [real, fake] = oracle::blended(q, bank.keys, labels, bank.alpha, bank.beta, tc.weights);
            worst = std::max({worst, std::abs(got.logits(0) - real), std::abs(got.logits(1) - fake)});

            const Eigen::Vector2d prior = tc.weights * q;
            bank.beta = 0.0;
            const DetectionResult zero = blended_logits(q, bank, tc);
            beta_zero_exact = beta_zero_exact && zero.logits == prior;
            const DetectionResult none = blended_logits(q, FeatureBank{}, tc);
            empty_ok = empty_ok && !none.used_bank && none.logits == prior;
        }
        v.detail << " 50 instances, max |vectorized - scalar| " << worst << ", beta=0 exact "
                 << (beta_zero_exact ? "yes" : "no") << ", empty-bank fallback " << (empty_ok ? "yes" : "no");
        v.require(worst < 1e-6, "within 1e-6");
        v.require(beta_zero_exact, "beta = 0 reduces exactly to classifier logits");
        v.require(empty_ok, "empty bank falls back to classifier-only");
    });

    run(6, "closed-form spot checks", [](Verdict& v) {
        FeatureBank bank;
        Vector e0 = Vector::Zero(8), e1 = Vector::Zero(8);
        e0(0) = 1.0;
        e1(1) = 1.0;
        append_key(bank, e0, Label::real, "self");
        append_key(bank, e1, Label::fake, "orthogonal");
        const Vector a = affinity(e0, bank);
        const double bce = bce_loss(std::vector<double>{0.5}, std::vector<int>{1});
        const std::vector<double> scores{0.9, 0.8, 0.3};
        const std::vector<int> labels{1, 0, 1};
        const double ap = average_precision(scores, labels);
        const double ap_oracle = oracle::pr_curve_ap(scores, labels);
        v.detail << " self " << a(0) << ", orthogonal " << a(1) << ", BCE(0.5) " << bce << ", AP " << ap
                 << " (oracle " << ap_oracle << ")";
        v.require(a(0) == 1.0, "self-match affinity = 1");
        v.require(std::abs(a(1) - 0.904837) < 1e-6, "orthogonal affinity = exp(-0.1)");
        v.require(std::abs(bce - 0.693147) < 1e-6, "BCE at 0.5 = ln 2");
        v.require(std::abs(ap - 5.0 / 6.0) < 1e-12 && std::abs(ap_oracle - 5.0 / 6.0) < 1e-12, "AP = 5/6");
    });

    FeatureBank desk_bank;
    run(7, "desk-scale end-to-end", [&](Verdict& v) {
        const auto t0 = Clock::now();
        for (auto mode : {StreamMode::both, StreamMode::spatial_only, StreamMode::noise_only}) {
            desk.runs.emplace(mode, train_mode(desk, mode));
        }
        AblationSetup setup;
        setup.backbone = desk.backbone;
        setup.records = desk.records;
        setup.manifest_path = desk.manifest;
        setup.bank = desk.config.bank_settings();
        setup.threads = 1;
        for (const auto& [mode, r] : desk.runs) setup.adapters.emplace(mode, r.state.best_params);
        const AblationReport rep = run_ablation(setup);
        const double elapsed = seconds_since(t0);

        auto acc = [](const AblationRow& r) { return r.outcome ? r.outcome->mean_acc : -1.0; };
        const AblationRow& zero_shot = rep.components[0];
        const AblationRow& cdfa = rep.components[1];
        const AblationRow& mfrm = rep.components[2];
        const AblationRow& full = rep.components[3];
        const AblationRow& spatial = rep.streams[1];
        const AblationRow& noise = rep.streams[2];
        const AblationRow& both = rep.streams[3];
        const double full_ap = full.outcome && full.outcome->mean_ap ? *full.outcome->mean_ap : -1.0;
        const auto& counts = count_by_label_split(desk.records);
        v.detail << " train " << counts.at({Label::real, Split::train}) << "/" << counts.at({Label::fake, Split::train})
                 << ", test " << counts.at({Label::real, Split::test}) << "/" << counts.at({Label::fake, Split::test})
                 << "; final Acc " << acc(full) << " AP " << full_ap << "; zero-shot " << acc(zero_shot) << ", CDFA "
                 << acc(cdfa) << ", MFRM " << acc(mfrm) << "; streams both " << acc(both) << ", spatial " << acc(spatial)
                 << ", noise " << acc(noise) << "; " << elapsed << " s";
        std::printf("%s", rep.render().c_str());
        v.require(acc(full) >= 0.9, "final Acc >= 0.9");
        v.require(full_ap >= 0.9, "final AP >= 0.9");
        v.require(acc(both) >= acc(spatial) && acc(both) >= acc(noise), "both streams >= each single stream");
        v.require(acc(full) >= acc(cdfa) && acc(full) >= acc(mfrm), "CDFA+MFRM >= each alone");
        v.require(elapsed < 300.0, "runtime < 5 min");

        Detector det(desk.backbone, desk.runs.at(StreamMode::both).state.best_params);
        const BankSettings s = desk.config.bank_settings();
        desk_bank = build_bank(desk.records, desk.manifest, det.extractor(), s.n_per_class, s.seed, s.alpha, s.beta);
    });

    run(8, "bank insertion on an unseen artifact family", [&](Verdict& v) {
        if (!desk.runs.count(StreamMode::both) || desk_bank.empty()) throw std::runtime_error("criterion 7 setup missing");
        Detector det(desk.backbone, desk.runs.at(StreamMode::both).state.best_params);
        int increased = 0, decreased = 0;
        std::ostringstream trials;
        for (int t = 0; t < 10; ++t) {
            // Stripe artifacts never appear in training. 20 per class: 4 + 4 are
            // inserted into the bank, the remaining 16 + 16 are scored.
            ToyCorpusOptions opt;
            opt.family = ArtifactFamily::stripe;
            opt.prefix = "stripe";
            const fs::path dir = scratch / ("unseen" + std::to_string(t));
            const std::uint64_t seed = derive_seed(desk.config.seed, "unseen", static_cast<std::uint64_t>(t));
            const auto m = generate_toy_corpus(20, seed, dir, opt);
            const auto records = assign_splits(load_manifest(m), 0.2, derive_seed(seed, "split"));
            const auto test = encode_split(det, records, m, Split::test);
            std::vector<LabeledImage> extra;
            for (const auto& r : filter_split(records, Split::train)) extra.push_back({resolve_record_path(m, r), r.label});
            const FeatureBank grown = insert_samples(desk_bank, extra, det.extractor());
            const double before = bank_accuracy(det, desk_bank, test);
            const double after = bank_accuracy(det, grown, test);
            increased += after > before;
            decreased += after < before;
            trials << (t ? ", " : "") << before << "->" << after;
            if (extra.size() != 8) throw std::runtime_error("expected 8 inserted samples");
        }
        v.detail << " increased in " << increased << "/10, decreased in " << decreased << "/10 (Acc " << trials.str() << ")";
        v.require(decreased == 0, "Acc never decreases");
        v.require(increased >= 8, "Acc increases in >= 8 of 10 trials");
    });

    run(9, "determinism", [&](Verdict& v) {
        const fs::path dir_a = scratch / "det-a", dir_b = scratch / "det-b";
        auto pipeline = [&](const fs::path& dir) {
            const RunConfig cfg = desk_config(17);
            const auto m = make_desk_corpus(cfg, dir / "data");
            const auto records = load_manifest(m);
            const TrainRun r = train(records, m, *desk.backbone, cfg.train_config());
            Detector det(desk.backbone, r.state.best_params);
            const BankSettings s = cfg.bank_settings();
            save_bank(build_bank(records, m, det.extractor(), s.n_per_class, s.seed, s.alpha, s.beta), dir / "bank.mfrm");
            std::vector<double> losses;
            for (const auto& e : r.state.history) losses.push_back(e.loss);
            return losses;
        };
        const auto la = pipeline(dir_a);
        const auto lb = pipeline(dir_b);
        const bool same_loss = la == lb && !la.empty();
        const std::string ba = oracle::read_bytes(dir_a / "bank.mfrm"), bb = oracle::read_bytes(dir_b / "bank.mfrm");
        const bool same_bank = ba == bb && !ba.empty();
        v.detail << " " << la.size() << " epochs, loss histories " << (same_loss ? "identical" : "DIFFER") << ", bank files "
                 << (same_bank ? "byte-identical" : "DIFFER") << " (" << ba.size() << " bytes)";
        v.require(same_loss, "identical loss histories");
        v.require(same_bank, "identical bank files");
    });

    run(10, "format round-trips", [&](Verdict& v) {
        const fs::path dir = scratch / "formats";
        fs::create_directories(dir);
        AdapterSet adapters = AdapterSet::initialize({1, 3, 5}, 32, 3);
        oracle::randomize(adapters, 4, 0.2);
        adapters.for_each([](const std::string&, Tensor& t, bool) { quantize_f32(t); });
        save_adapter_checkpoint(dir / "a.ckpt", adapters, kDefaultPrompts, BackboneConfig::tiny());
        const AdapterCheckpoint ck = load_adapter_checkpoint(dir / "a.ckpt");
        save_adapter_checkpoint(dir / "b.ckpt", ck.adapters, ck.prompts, BackboneConfig::tiny());
        const bool ckpt_ok = ck.adapters.to_tensors() == adapters.to_tensors() &&
                             oracle::read_bytes(dir / "a.ckpt") == oracle::read_bytes(dir / "b.ckpt");

        TrainState state = TrainState::fresh(adapters);
        state.velocity = adapters;
        state.epoch = 2;
        save_train_state(dir / "s.ckpt", state, TrainConfig{}, BackboneConfig::tiny());
        const TrainState back = load_train_state(dir / "s.ckpt");
        save_train_state(dir / "s2.ckpt", back, TrainConfig{}, BackboneConfig::tiny());
        const bool state_ok = back.params.to_tensors() == state.params.to_tensors() &&
                              back.velocity.to_tensors() == state.velocity.to_tensors() &&
                              oracle::read_bytes(dir / "s.ckpt") == oracle::read_bytes(dir / "s2.ckpt");

        desk.backbone->save(dir / "backbone.st");
        const bool backbone_ok =
            load_pretrained(dir / "backbone.st", BackboneConfig::tiny()).tensors() == desk.backbone->tensors();

        Rng rng(9);
        FeatureBank bank;
        bank.alpha = 0.1;
        bank.beta = 10.0;
        for (int r = 0; r < 40; ++r) {
            Vector x(32);
            for (int i = 0; i < 32; ++i) x(i) = rng.normal();
            append_key(bank, x, r % 3 ? Label::real : Label::fake, "img/" + std::to_string(r) + ".png");
        }
        save_bank(bank, dir / "a.mfrm");
        const FeatureBank bank_back = load_bank(dir / "a.mfrm");
        save_bank(bank_back, dir / "b.mfrm");
        const bool bank_ok = bank_back == bank && oracle::read_bytes(dir / "a.mfrm") == oracle::read_bytes(dir / "b.mfrm");

        const auto records = desk.records;
        write_manifest(dir / "m.jsonl", records);
        const bool manifest_ok = load_manifest(dir / "m.jsonl") == records;

        v.detail << " adapter checkpoint " << (ckpt_ok ? "ok" : "MISMATCH") << ", train state "
                 << (state_ok ? "ok" : "MISMATCH") << ", backbone " << (backbone_ok ? "ok" : "MISMATCH") << ", bank "
                 << (bank_ok ? "ok" : "MISMATCH") << ", manifest (" << records.size() << " records) "
                 << (manifest_ok ? "ok" : "MISMATCH");
        v.require(ckpt_ok && state_ok && backbone_ok, "checkpoints bit-exact");
        v.require(bank_ok, "bank bit-exact");
        v.require(manifest_ok, "manifest unchanged");
    });

    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
