#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "medfor/config.hpp"
#include "medfor/errors.hpp"
#include "medfor/manifest.hpp"
#include "medfor/mfrm.hpp"
#include "support/oracles.hpp"

using namespace medfor;

namespace {

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args, const std::filesystem::path& home) {
    const std::string cmd = "MEDFOR_HOME='" + home.string() + "' '" MEDFOR_CLI_PATH "' " + args + " 2>&1";
    CliResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::fgets(buf, sizeof(buf), pipe)) r.out += buf;
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

}  // namespace

TEST(Config, DefaultsFileThenOverrides) {
    oracle::TempDir dir("config");
    RunConfig cfg;
    EXPECT_EQ(cfg.alpha, 0.1);
    EXPECT_EQ(cfg.beta, 10.0);
    EXPECT_EQ(cfg.n_per_class, 16);
    EXPECT_EQ(cfg.train.epochs, 50);
    EXPECT_EQ(cfg.train.batch_size, 32);
    EXPECT_EQ(cfg.train.lr, 1e-4);
    EXPECT_EQ(cfg.train.momentum, 0.9);
    EXPECT_EQ(cfg.train.weight_decay, 0.005);

    write(dir / "a.ini",
          "; comment\n[train]\nepochs = 7\nlr = 0.002\nstreams = noise\n[mfrm]\nalpha = 3\n[run]\nseed = 42\n"
          "[backbone]\nadapter_blocks = 1,3\n");
    apply_config_file(cfg, dir / "a.ini");
    EXPECT_EQ(cfg.train.epochs, 7);
    EXPECT_EQ(cfg.train.lr, 0.002);
    EXPECT_EQ(cfg.train.adapter_options.streams, StreamMode::noise_only);
    EXPECT_EQ(cfg.alpha, 3.0);
    EXPECT_EQ(cfg.beta, 10.0);
    EXPECT_EQ(cfg.seed, 42u);
    EXPECT_EQ(cfg.backbone_config().adapter_block_indices, (std::vector<int>{1, 3}));

    // Seeds fan out per subsystem from the root.
    EXPECT_NE(cfg.train_config().seed, cfg.bank_settings().seed);
    EXPECT_EQ(cfg.train_config().seed, RunConfig{cfg}.train_config().seed);
    RunConfig other = cfg;
    other.seed = 43;
    EXPECT_NE(other.train_config().seed, cfg.train_config().seed);

    const nlohmann::json j = cfg.to_json();
    EXPECT_EQ(j["train"]["epochs"], 7);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
    oracle::TempDir dir("config-bad");
    RunConfig cfg;
    write(dir / "typo.ini", "[train]\nepoch = 3\n");
    EXPECT_THROW(apply_config_file(cfg, dir / "typo.ini"), ConfigError);
    write(dir / "section.ini", "[training]\nepochs = 3\n");
    EXPECT_THROW(apply_config_file(cfg, dir / "section.ini"), ConfigError);
    write(dir / "value.ini", "[train]\nepochs = many\n");
    EXPECT_THROW(apply_config_file(cfg, dir / "value.ini"), ConfigError);
    write(dir / "neg.ini", "[run]\nseed = -1\n");
    EXPECT_THROW(apply_config_file(cfg, dir / "neg.ini"), ConfigError);
    EXPECT_THROW(apply_config_file(cfg, dir / "absent.ini"), Error);

    RunConfig bad;
    bad.train.batch_size = 0;
    EXPECT_THROW(bad.validate(), Error);
    bad = RunConfig{};
    bad.adapter_blocks = std::vector<int>{9};
    EXPECT_THROW(bad.backbone_config(), ConfigError);
    EXPECT_EQ(parse_index_list("7, 15,23"), (std::vector<int>{7, 15, 23}));
    EXPECT_THROW(parse_index_list("7,x"), Error);
}

TEST(Config, DeskPresetParses) {
    RunConfig cfg;
    apply_config_file(cfg, MEDFOR_SOURCE_DIR "/configs/desk.ini");
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.train.epochs, 20);
    EXPECT_EQ(cfg.n_per_class, 16);
}

TEST(Config, HomeDirectoryFromEnvironment) {
    ::setenv(kHomeEnvVar, "/tmp/somewhere", 1);
    EXPECT_EQ(default_output_dir(), std::filesystem::path("/tmp/somewhere"));
    ::unsetenv(kHomeEnvVar);
    EXPECT_EQ(default_output_dir(), std::filesystem::path("medfor_runs"));
}

TEST(Cli, EndToEndOnATinyCorpus) {
    oracle::TempDir home("cli");
    const auto data = home / "data";
    const std::string common = " --single-thread -q --seed 3";

    CliResult r = run_cli("gen-toy -n 6 --out '" + data.string() + "'" + common, home.path());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto manifest = data / "toy.jsonl";
    ASSERT_TRUE(std::filesystem::exists(manifest));
    const auto counts = count_by_label_split(load_manifest(manifest));
    EXPECT_EQ(counts.at({Label::fake, Split::train}), 4u);

    r = run_cli("train --data '" + manifest.string() + "' --epochs 2 --batch-size 4 --lr 1e-3 --validation-fraction 0 --out '" +
                    (home / "train").string() + "'" + common,
                home.path());
    ASSERT_EQ(r.code, 0) << r.out;
    for (const char* f : {"best.ckpt", "last.ckpt", "train_log.jsonl", "run.json"}) {
        EXPECT_TRUE(std::filesystem::exists(home / "train" / f)) << f;
    }
    const auto bundle = nlohmann::json::parse(oracle::read_bytes(home / "train" / "run.json"));
    EXPECT_EQ(bundle["command"], "train");
    EXPECT_EQ(bundle["seed"], 3);
    EXPECT_TRUE(bundle.contains("backbone_fingerprint"));

    const std::string ckpt = (home / "train" / "best.ckpt").string();
    const std::string bank = (home / "bank.mfrm").string();
    r = run_cli("build-bank --data '" + manifest.string() + "' --checkpoint '" + ckpt + "' --n-per-class 2 --bank '" + bank +
                    "' --out '" + (home / "bb").string() + "'" + common,
                home.path());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(load_bank(bank).rows(), 4u);

    const auto images = load_manifest(manifest);
    const std::string img = resolve_record_path(manifest, images[0]).string();
    r = run_cli("bank-insert --bank '" + bank + "' --checkpoint '" + ckpt + "' --add '" + img +
                    ":fake' --output '" + (home / "bank2.mfrm").string() + "' --out '" + (home / "bi").string() + "'" + common,
                home.path());
    ASSERT_EQ(r.code, 0) << r.out;
    const FeatureBank grown = load_bank(home / "bank2.mfrm");
    EXPECT_EQ(grown.rows(), 5u);
    EXPECT_EQ(grown.labels.back(), Label::fake);

    r = run_cli("detect --checkpoint '" + ckpt + "' --bank '" + bank + "' '" + img + "' '" + (home / "nope.png").string() +
                    "' --out '" + (home / "det").string() + "'" + common,
                home.path());
    EXPECT_EQ(r.code, 0) << r.out;
    std::istringstream lines(r.out);
    int parsed = 0, errors = 0;
    for (std::string line; std::getline(lines, line);) {
        if (line.empty() || line[0] != '{') continue;
        const auto j = nlohmann::json::parse(line);
        ++parsed;
        if (j.contains("error")) {
            ++errors;
        } else {
            EXPECT_GE(j["fake_probability"].get<double>(), 0.0);
            EXPECT_TRUE(j["used_bank"].get<bool>());
        }
    }
    EXPECT_EQ(parsed, 2);
    EXPECT_EQ(errors, 1);

    r = run_cli("evaluate --data '" + manifest.string() + "' --checkpoint '" + ckpt + "' --bank '" + bank + "' --out '" +
                    (home / "eval").string() + "'" + common,
                home.path());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto report = nlohmann::json::parse(oracle::read_bytes(home / "eval" / "report.json"));
    EXPECT_TRUE(report.contains("mean_acc") || report.dump().find("mean_acc") != std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(home / "eval" / "report.txt"));
}

TEST(Cli, ExitCodes) {
    oracle::TempDir home("cli-codes");
    EXPECT_EQ(run_cli("--help", home.path()).code, 0);
    EXPECT_EQ(run_cli("no-such-command", home.path()).code, 2);
    EXPECT_EQ(run_cli("train", home.path()).code, 2) << "missing --data";
    EXPECT_EQ(run_cli("train --data '" + (home / "absent.jsonl").string() + "' -q", home.path()).code, 2);
    EXPECT_EQ(run_cli("detect --bank '" + (home / "absent.bank").string() + "' x.png -q", home.path()).code, 2);
    write(home / "bad.ini", "[train]\nbogus = 1\n");
    EXPECT_EQ(run_cli("gen-toy -n 2 -q --config '" + (home / "bad.ini").string() + "'", home.path()).code, 2);
}
