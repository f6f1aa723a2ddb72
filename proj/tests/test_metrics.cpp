#include <cmath>

#include <gtest/gtest.h>

#include "medfor/errors.hpp"
#include "medfor/metrics.hpp"
#include "medfor/rng.hpp"
#include "support/oracles.hpp"

using namespace medfor;

TEST(Metrics, AccuracyMatchesCountingOracle) {
    Rng rng(20);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(60);
        std::vector<int> p(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = static_cast<int>(rng.below(2));
            y[i] = static_cast<int>(rng.below(2));
        }
        EXPECT_DOUBLE_EQ(accuracy(p, y), oracle::count_accuracy(p, y));
    }
    std::vector<int> a{1, 0}, b{1};
    EXPECT_THROW(accuracy(a, b), ValidationError);
    std::vector<int> bad{2, 0};
    EXPECT_THROW(accuracy(bad, a), ValidationError);
    std::vector<int> none;
    EXPECT_THROW(accuracy(none, none), ValidationError);
}

TEST(Metrics, AveragePrecisionWorkedExample) {
    const std::vector<double> s{0.9, 0.8, 0.3};
    const std::vector<int> y{1, 0, 1};
    EXPECT_NEAR(average_precision(s, y), 5.0 / 6.0, 1e-12);
    EXPECT_NEAR(oracle::pr_curve_ap(s, y), 5.0 / 6.0, 1e-12);
}

TEST(Metrics, AveragePrecisionMatchesPrCurveOracle) {
    Rng rng(21);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng.below(40);
        std::vector<double> s(n);
        std::vector<int> y(n);
        // Coarse scores so that ties are common.
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.below(trial % 2 ? 5 : 1000)) / 10.0;
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 1;
        EXPECT_NEAR(average_precision(s, y), oracle::pr_curve_ap(s, y), 1e-12);

        // Invariant under permutation of the input.
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<double> s2(n);
        std::vector<int> y2(n);
        for (std::size_t i = 0; i < n; ++i) {
            s2[i] = s[order[i]];
            y2[i] = y[order[i]];
        }
        EXPECT_NEAR(average_precision(s2, y2), average_precision(s, y), 1e-12);
    }
}

TEST(Metrics, AveragePrecisionEdgeCases) {
    // Perfect ranking, worst ranking, and an all-tied detector (AP = prevalence).
    EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}), 1.0);
    EXPECT_NEAR(average_precision(std::vector<double>{0.9, 0.1}, std::vector<int>{0, 1}), 0.5, 1e-12);
    EXPECT_NEAR(average_precision(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 0, 0}), 0.25, 1e-12);
    EXPECT_THROW(average_precision(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), ValidationError);
    EXPECT_THROW(average_precision(std::vector<double>{std::nan(""), 0.2}, std::vector<int>{1, 0}), ValidationError);
}

namespace {

SampleOutcome outcome(const std::string& id, int label, double score, Modality m, std::string gen = "g") {
    SampleOutcome s;
    s.id = id;
    s.label = label;
    s.score = score;
    s.predicted = score > 0.5 ? 1 : 0;
    s.modality = m;
    s.generator = std::move(gen);
    return s;
}

}  // namespace

TEST(Summary, PerGroupNumbersAreAveragedWithEqualWeight) {
    std::vector<SampleOutcome> samples{
        outcome("a", 1, 0.9, Modality::ct),  outcome("b", 0, 0.2, Modality::ct),
        outcome("c", 1, 0.4, Modality::ct),  outcome("d", 0, 0.3, Modality::ct),
        outcome("e", 1, 0.8, Modality::mri), outcome("f", 0, 0.7, Modality::mri),
    };
    SampleOutcome broken = outcome("g", 1, 0.0, Modality::mri);
    broken.error = "unreadable";
    samples.push_back(broken);

    const EvalOutcome out = summarize(samples, GroupBy::modality);
    ASSERT_EQ(out.groups.size(), 2u);
    EXPECT_EQ(out.errors, 1u);
    const GroupMetrics& ct = out.groups[0].name == "ct" ? out.groups[0] : out.groups[1];
    const GroupMetrics& mri = out.groups[0].name == "ct" ? out.groups[1] : out.groups[0];
    EXPECT_EQ(ct.count, 4u);
    EXPECT_DOUBLE_EQ(ct.acc, 0.75);
    EXPECT_DOUBLE_EQ(*ct.ap, oracle::pr_curve_ap({0.9, 0.2, 0.4, 0.3}, {1, 0, 1, 0}));
    EXPECT_EQ(mri.count, 2u);
    EXPECT_DOUBLE_EQ(mri.acc, 0.5);
    EXPECT_DOUBLE_EQ(out.mean_acc, (0.75 + 0.5) / 2.0);
    ASSERT_TRUE(out.mean_ap.has_value());
    EXPECT_DOUBLE_EQ(*out.mean_ap, (*ct.ap + *mri.ap) / 2.0);

    const nlohmann::json j = out.to_json();
    EXPECT_EQ(j["groups"].size(), 2u);
}

TEST(Summary, GroupWithoutFakesHasNoAp) {
    std::vector<SampleOutcome> samples{outcome("a", 0, 0.1, Modality::ct), outcome("b", 1, 0.9, Modality::mri),
                                       outcome("c", 0, 0.2, Modality::mri)};
    const EvalOutcome out = summarize(samples, GroupBy::modality);
    for (const auto& g : out.groups) {
        if (g.name == "ct") {
            EXPECT_FALSE(g.ap.has_value());
        }
        if (g.name == "mri") {
            EXPECT_TRUE(g.ap.has_value());
        }
    }
    ASSERT_TRUE(out.mean_ap.has_value());
    EXPECT_DOUBLE_EQ(*out.mean_ap, 1.0);
    const EvalOutcome by_gen = summarize(samples, GroupBy::generator);
    EXPECT_EQ(by_gen.groups.size(), 1u);
    EXPECT_EQ(parse_group_by("generator"), GroupBy::generator);
    EXPECT_THROW(parse_group_by("colour"), Error);
}

TEST(Evaluate, RunsOnTestSplitOnlyAndKeepsErrors) {
    std::vector<DatasetRecord> records{
        {"a.png", Label::fake, Modality::ct, "g", Split::test},
        {"b.png", Label::real, Modality::ct, "g", Split::test},
        {"c.png", Label::real, Modality::ct, "g", Split::train},
        {"bad.png", Label::fake, Modality::ct, "g", Split::test},
    };
    auto detect = [](const std::filesystem::path& p) -> DetectionResult {
        if (p.filename() == "bad.png") throw IoError("cannot decode");
        return make_detection(p.filename() == "a.png" ? Eigen::Vector2d(0, 2) : Eigen::Vector2d(2, 0), false);
    };
    for (int threads : {1, 3}) {
        const EvalOutcome out = evaluate(records, "/data/m.jsonl", detect, GroupBy::modality, threads);
        ASSERT_EQ(out.samples.size(), 3u);
        EXPECT_EQ(out.samples[0].id, "a.png");
        EXPECT_EQ(out.samples[2].id, "bad.png");
        EXPECT_TRUE(out.samples[2].error.has_value());
        EXPECT_EQ(out.errors, 1u);
        EXPECT_DOUBLE_EQ(out.mean_acc, 1.0);
    }
}

TEST(Tables, CellsAndCrossGroupLayout) {
    EXPECT_EQ(format_cell(0.916, 0.922), "91.6/92.2");
    EXPECT_EQ(format_cell(1.0, std::nullopt), "100.0/-");
    const std::string t = render_text_table({"Method", "Mean"}, {{"zero-shot", "50.0/50.0"}, {"full", "91.6/92.2"}});
    EXPECT_NE(t.find("Method"), std::string::npos);
    EXPECT_NE(t.find("91.6/92.2"), std::string::npos);

    std::vector<SampleOutcome> a{outcome("a", 1, 0.9, Modality::ct), outcome("b", 0, 0.1, Modality::ct)};
    std::vector<SampleOutcome> b{outcome("a", 1, 0.9, Modality::mri), outcome("b", 0, 0.1, Modality::mri)};
    const std::string cross =
        render_cross_group_table({{"one", summarize(a, GroupBy::modality)}, {"two", summarize(b, GroupBy::modality)}});
    EXPECT_NE(cross.find("ct"), std::string::npos);
    EXPECT_NE(cross.find("mri"), std::string::npos);
    EXPECT_NE(cross.find("Mean"), std::string::npos);
    EXPECT_NE(cross.find(" - "), std::string::npos);
}
