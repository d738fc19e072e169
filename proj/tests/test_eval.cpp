#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "ksdd/eval.hpp"

using namespace ksdd;
namespace fs = std::filesystem;

namespace {

std::vector<Scored> scored_from(std::initializer_list<std::pair<double, bool>> list) {
    std::vector<Scored> out;
    int i = 0;
    for (const auto& [score, pos] : list)
        out.push_back({"s" + std::to_string(i++), score, pos});
    return out;
}

// Definition-level oracle: for every distinct score t (descending),
// classify score >= t and integrate precision over recall steps.
double ap_oracle(const std::vector<Scored>& scored) {
    std::set<double, std::greater<double>> thresholds;
    int total_pos = 0;
    for (const auto& s : scored) {
        thresholds.insert(s.score);
        if (s.positive) ++total_pos;
    }
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        int tp = 0, fp = 0;
        for (const auto& s : scored) {
            if (s.score >= t) (s.positive ? tp : fp)++;
        }
        const double recall = static_cast<double>(tp) / total_pos;
        const double precision = static_cast<double>(tp) / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

double f1_oracle(const std::vector<Scored>& scored, double threshold) {
    int tp = 0, fp = 0, fn = 0;
    for (const auto& s : scored) {
        const bool pred = s.score >= threshold;
        if (pred && s.positive) ++tp;
        else if (pred && !s.positive) ++fp;
        else if (!pred && s.positive) ++fn;
    }
    return tp > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
}

}  // namespace

TEST_CASE("pr curve basics") {
    auto s = scored_from({{0.9, true}, {0.8, false}, {0.7, true}});
    auto pts = pr_curve(s);
    REQUIRE(pts.size() == 3);
    CHECK(pts[0].first == doctest::Approx(0.5));
    CHECK(pts[0].second == doctest::Approx(1.0));
    CHECK(pts[1].first == doctest::Approx(0.5));
    CHECK(pts[1].second == doctest::Approx(0.5));
    CHECK(pts[2].first == doctest::Approx(1.0));
    CHECK(pts[2].second == doctest::Approx(2.0 / 3.0));
    // recall never decreases and ends at 1
    for (std::size_t i = 1; i < pts.size(); ++i) CHECK(pts[i].first >= pts[i - 1].first);
    CHECK(pts.back().first == doctest::Approx(1.0));
}

TEST_CASE("tied scores collapse into one curve point") {
    auto s = scored_from({{0.5, true}, {0.5, false}, {0.5, true}, {0.5, false}});
    auto pts = pr_curve(s);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].first == doctest::Approx(1.0));
    CHECK(pts[0].second == doctest::Approx(0.5));
    CHECK(average_precision(s) == doctest::Approx(0.5));
}

TEST_CASE("average precision hand cases") {
    // alternating ranking: AP = 0.5*1 + 0.5*(2/3) = 5/6
    auto s = scored_from({{0.9, true}, {0.8, false}, {0.7, true}});
    CHECK(average_precision(s) == doctest::Approx(5.0 / 6.0));

    // perfect separation
    auto p = scored_from({{0.9, true}, {0.8, true}, {0.2, false}, {0.1, false}});
    CHECK(average_precision(p) == doctest::Approx(1.0));

    // worst ranking: all negatives above the single positive
    auto w = scored_from({{0.9, false}, {0.8, false}, {0.7, false}, {0.1, true}});
    CHECK(average_precision(w) == doctest::Approx(0.25));
}

TEST_CASE("average precision matches the definition oracle on random sets") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 11);
        std::vector<Scored> s;
        bool has_pos = false;
        for (int i = 0; i < n; ++i) {
            // coarse grid provokes ties
            const double score = std::floor(u(rng) * 4.0) / 4.0;
            const bool pos = rng() % 2 == 0;
            has_pos |= pos;
            s.push_back({"r" + std::to_string(i), score, pos});
        }
        if (!has_pos) s.push_back({"rp", u(rng), true});
        CHECK(average_precision(s) == doctest::Approx(ap_oracle(s)).epsilon(1e-12));
    }
}

TEST_CASE("metrics are invariant under monotone score transforms") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Scored> s;
    for (int i = 0; i < 30; ++i)
        s.push_back({"m" + std::to_string(i), std::floor(u(rng) * 8.0) / 8.0,
                     rng() % 3 == 0});
    s.push_back({"mp", 0.6, true});
    std::vector<Scored> t = s;
    for (auto& r : t) r.score = std::exp(3.0 * r.score) - 2.0;  // strictly increasing
    CHECK(average_precision(t) == doctest::Approx(average_precision(s)).epsilon(1e-12));
    CHECK(best_f_threshold(t).f1 == doctest::Approx(best_f_threshold(s).f1).epsilon(1e-12));
    CHECK(fp_at_full_recall(t) == fp_at_full_recall(s));
}

TEST_CASE("negatives scored below every positive do not change AP") {
    auto s = scored_from({{0.9, true}, {0.5, false}, {0.4, true}});
    const double base = average_precision(s);
    s.push_back({"low1", 0.1, false});
    s.push_back({"low2", 0.01, false});
    CHECK(average_precision(s) == doctest::Approx(base).epsilon(1e-12));
    CHECK(fp_at_full_recall(s) == 1);
}

TEST_CASE("best F threshold hand case") {
    auto s = scored_from({{0.9, true}, {0.8, true}, {0.6, false}, {0.5, true},
                          {0.3, false}});
    BestF best = best_f_threshold(s);
    // threshold 0.5: tp=3 fp=1 fn=0, F1 = 6/7; anything higher misses a positive
    CHECK(best.threshold == doctest::Approx(0.5));
    CHECK(best.f1 == doctest::Approx(6.0 / 7.0));
    CHECK(best.fp == 1);
    CHECK(best.fn == 0);
    CHECK(f1_oracle(s, best.threshold) == doctest::Approx(best.f1));
}

TEST_CASE("best F tie resolves toward the higher threshold") {
    // thresholds 0.9 and 0.7 both give F1 = 1 on their prefix? construct:
    // {0.9 pos} alone: tp1 fn1 -> F1 2/3; {0.9,0.7 pos}: F1 = 1.
    // Make two thresholds with identical F1 instead:
    auto s = scored_from({{0.9, true}, {0.7, false}, {0.5, true}, {0.3, false}});
    // t=0.9: F1 = 2*1/(2+0+1)=2/3 ; t=0.7: 2/(2+1+1)=0.5 ; t=0.5: 4/(4+1)=0.8
    BestF best = best_f_threshold(s);
    CHECK(best.threshold == doctest::Approx(0.5));
    // exhaustive: the best threshold is also optimal per the oracle
    for (double t : {0.9, 0.7, 0.5, 0.3})
        CHECK(f1_oracle(s, t) <= best.f1 + 1e-12);

    // exact tie case: equal F1 at two thresholds keeps the higher one
    auto tie = scored_from({{0.8, true}, {0.6, false}, {0.4, true}, {0.2, false}});
    // t=0.8: F1=2/3 ; t=0.6: 0.5 ; t=0.4: 0.8 ; t=0.2: 2/3
    BestF b2 = best_f_threshold(tie);
    CHECK(b2.threshold == doctest::Approx(0.4));
}

TEST_CASE("fp at full recall") {
    auto s = scored_from({{0.9, false}, {0.8, true}, {0.7, false}, {0.6, true},
                          {0.5, false}});
    // lowest positive is 0.6; negatives at 0.9 and 0.7 are at or above it
    CHECK(fp_at_full_recall(s) == 2);
    auto clean = scored_from({{0.9, true}, {0.1, false}});
    CHECK(fp_at_full_recall(clean) == 0);
    // a negative exactly at the lowest positive score counts
    auto edge = scored_from({{0.5, true}, {0.5, false}});
    CHECK(fp_at_full_recall(edge) == 1);
}

TEST_CASE("metrics reject degenerate inputs") {
    CHECK_THROWS_AS(average_precision({}), std::invalid_argument);
    auto neg_only = scored_from({{0.5, false}});
    CHECK_THROWS_AS(average_precision(neg_only), std::invalid_argument);
    CHECK_THROWS_AS(best_f_threshold(neg_only), std::invalid_argument);
    CHECK_THROWS_AS(fp_at_full_recall(neg_only), std::invalid_argument);
    std::vector<Scored> nan{{"x", std::nan(""), true}, {"y", 0.5, false}};
    CHECK_THROWS_AS(average_precision(nan), std::invalid_argument);
}

TEST_CASE("evaluate aggregates all metrics consistently") {
    auto s = scored_from({{0.9, true}, {0.8, false}, {0.7, true}});
    EvalReport r = evaluate(s);
    CHECK(r.ap == doctest::Approx(average_precision(s)));
    CHECK(r.best_f.f1 == doctest::Approx(best_f_threshold(s).f1));
    CHECK(r.fp_at_zero_miss == fp_at_full_recall(s));
    CHECK(r.pr_points.size() == 3);
    CHECK(r.records.size() == 3);
}

TEST_CASE("report writers emit parseable files") {
    const fs::path dir = fs::temp_directory_path() / "ksdd_eval_out";
    fs::create_directories(dir);
    auto s = scored_from({{0.9, true}, {0.8, false}, {0.7, true}});
    EvalReport r = evaluate(s);

    write_report_json((dir / "report.json").string(), r);
    write_pr_csv((dir / "pr.csv").string(), r);
    write_scores_csv((dir / "scores.csv").string(), s);

    std::ifstream json(dir / "report.json");
    std::string text((std::istreambuf_iterator<char>(json)), {});
    CHECK(text.find("\"ap\"") != std::string::npos);
    CHECK(text.find("\"fp_at_zero_miss\"") != std::string::npos);

    std::ifstream csv(dir / "pr.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "recall,precision");
    int lines = 0;
    for (std::string l; std::getline(csv, l);) ++lines;
    CHECK(lines == 3);

    std::ifstream sc(dir / "scores.csv");
    std::getline(sc, header);
    CHECK(header == "image_id,score,label");

    fs::remove_all(dir);
}

TEST_CASE("config grid spans all forty combinations") {
    auto grid = config_grid();
    CHECK(grid.size() == 40);
    std::set<std::string> keys;
    int rotations = 0, halves = 0, ce = 0;
    for (const auto& g : grid) {
        keys.insert(annotation_to_string(g.annotation) + "/" + loss_to_string(g.loss) +
                    "/" + (g.half_resolution ? "h" : "f") + "/" +
                    (g.rotate ? "r" : "s"));
        if (g.rotate) ++rotations;
        if (g.half_resolution) ++halves;
        if (g.loss == LossType::cross_entropy) ++ce;
    }
    CHECK(keys.size() == 40);
    CHECK(rotations == 20);
    CHECK(halves == 20);
    CHECK(ce == 20);
}

TEST_CASE("score_samples runs the nets in infer mode") {
    SegmentationNet seg = build_segmentation_net(1);
    DecisionNet dec = build_decision_net(2);
    const std::uint64_t hash = parameter_hash(seg);
    set_fast_gemm(true);

    // 128x128 keeps the half-resolution path 64-divisible
    std::vector<Sample> samples;
    for (int i = 0; i < 3; ++i) {
        Sample s;
        s.image = Tensor({1, 128, 128});
        std::mt19937_64 rng(static_cast<std::uint64_t>(i));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : s.image.data) v = u(rng);
        s.mask = Mask(128, 128);
        s.defective = i == 0;
        if (s.defective) s.mask.at(5, 5) = 1;
        s.image_id = "img" + std::to_string(i);
        samples.push_back(std::move(s));
    }
    auto scored = score_samples(seg, dec, samples, false);
    REQUIRE(scored.size() == 3);
    for (const auto& r : scored) {
        CHECK(r.score > 0.0);
        CHECK(r.score < 1.0);
    }
    CHECK(scored[0].positive);
    CHECK_FALSE(scored[1].positive);
    // scoring is read-only
    CHECK(parameter_hash(seg) == hash);
    // half-resolution path consumes the same full-resolution samples
    auto half = score_samples(seg, dec, samples, true);
    CHECK(half.size() == 3);
    set_fast_gemm(false);
}

TEST_CASE("cross validation plumbing on a miniature corpus") {
    set_fast_gemm(true);
    std::vector<Sample> samples;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.3, 0.7);
    for (int p = 0; p < 6; ++p) {
        Sample s;
        s.image = Tensor({1, 64, 64});
        for (double& v : s.image.data) v = u(rng);
        s.mask = Mask(64, 64);
        s.defective = p < 3;
        if (s.defective) {
            const int y = 16 + p * 8;
            for (int x = 10; x < 50; ++x) {
                s.image.at(0, y, x) = 0.05;
                s.mask.at(y, x) = 1;
            }
        }
        s.product_id = "prod" + std::to_string(p);
        s.image_id = s.product_id + "_0";
        samples.push_back(std::move(s));
    }
    FoldPlan plan = make_folds(samples, 1);
    TrainConfig cfg;
    cfg.loss = LossType::cross_entropy;
    cfg.set_default_lr();
    cfg.steps_segmentation = 10;
    cfg.steps_decision = 10;
    cfg.seed = 2;

    CvOutcome out = run_cross_validation(samples, plan, cfg);
    CHECK(out.folds.size() == 3);
    CHECK(out.pooled.size() == samples.size());
    CHECK(out.pooled_baseline.size() == samples.size());
    CHECK(out.per_fold_reports.size() == 3);
    std::set<std::string> ids;
    for (const auto& r : out.pooled) ids.insert(r.id);
    CHECK(ids.size() == samples.size());  // every sample scored exactly once
    CHECK(out.pooled_report.ap >= 0.0);
    CHECK(out.pooled_report.ap <= 1.0);
    for (const auto& art : out.folds) {
        CHECK(art.seg.frozen);
        CHECK(art.seg_loss_trace.size() == 10);
        CHECK(art.dec_loss_trace.size() == 10);
        CHECK(art.test_scores.size() == 2);  // one defective + one clean product
    }
    set_fast_gemm(false);
}

TEST_CASE("bench_forward reports timing and mac count") {
    SegmentationNet seg = build_segmentation_net(1);
    DecisionNet dec = build_decision_net(2);
    set_fast_gemm(true);
    BenchResult r = bench_forward(seg, dec, 64, 64, 3);
    set_fast_gemm(false);
    CHECK(r.median_ms > 0.0);
    CHECK(r.min_ms <= r.median_ms);
    CHECK(r.median_ms <= r.max_ms);
    CHECK(r.macs == mac_count(64, 64));
    CHECK_THROWS_AS(bench_forward(seg, dec, 64, 64, 0), std::invalid_argument);
}

TEST_CASE("evaluate_grid runs the CV once per configuration and is order invariant") {
    set_fast_gemm(true);
    std::vector<Sample> samples;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.3, 0.7);
    for (int p = 0; p < 6; ++p) {
        Sample s;
        s.image = Tensor({1, 64, 64});
        for (double& v : s.image.data) v = u(rng);
        s.mask = Mask(64, 64);
        s.defective = p < 3;
        if (s.defective) {
            const int y = 16 + p * 8;
            for (int x = 10; x < 50; ++x) {
                s.image.at(0, y, x) = 0.05;
                s.mask.at(y, x) = 1;
            }
        }
        s.product_id = "prod" + std::to_string(p);
        s.image_id = s.product_id + "_0";
        samples.push_back(std::move(s));
    }
    FoldPlan plan = make_folds(samples, 1);
    TrainConfig cfg;
    cfg.steps_segmentation = 4;
    cfg.steps_decision = 4;
    cfg.seed = 2;

    const std::vector<GridRow> grid = {
        {AnnotationKind::dilate5, LossType::cross_entropy, false, false},
        {AnnotationKind::original, LossType::mse, false, false}};
    auto rows = evaluate_grid(samples, plan, grid, cfg);
    REQUIRE(rows.size() == grid.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].row.annotation == grid[i].annotation);
        CHECK(rows[i].row.loss == grid[i].loss);
        CHECK(rows[i].report.ap >= 0.0);
        CHECK(rows[i].report.ap <= 1.0);
        CHECK(rows[i].baseline_report.ap >= 0.0);
    }

    // identical metrics when the caller shuffles the sample list
    std::vector<Sample> shuffled = samples;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto rows2 = evaluate_grid(shuffled, plan, grid, cfg);
    REQUIRE(rows2.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows2[i].report.ap == rows[i].report.ap);
        CHECK(rows2[i].report.best_f.f1 == rows[i].report.best_f.f1);
        CHECK(rows2[i].report.fp_at_zero_miss == rows[i].report.fp_at_zero_miss);
    }

    const auto csv = std::filesystem::temp_directory_path() / "ksdd_grid_test.csv";
    write_grid_csv(csv.string(), rows);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "annotation,loss,resolution,rotate,ap,best_f1,fp_at_full_recall,baseline_ap");
    int data_lines = 0;
    for (std::string line; std::getline(in, line);) data_lines += !line.empty();
    CHECK(data_lines == static_cast<int>(rows.size()));
    std::filesystem::remove(csv);
    set_fast_gemm(false);
}
