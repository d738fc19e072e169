#include "ksdd/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <thread>

namespace ksdd {

namespace {

struct Counts {
    int tp = 0, fp = 0, fn = 0;
};

// Sorted descending by score; returns per-distinct-threshold cumulative
// (tp, fp) with the threshold value.
struct ThresholdSweep {
    std::vector<double> thresholds;
    std::vector<int> tp, fp;
    int total_pos = 0, total_neg = 0;
};

ThresholdSweep sweep(const std::vector<Scored>& scored) {
    if (scored.empty()) throw std::invalid_argument("metrics: empty score set");
    ThresholdSweep s;
    std::vector<Scored> sorted = scored;
    for (const auto& r : sorted) {
        if (!std::isfinite(r.score))
            throw std::invalid_argument("metrics: non-finite score for " + r.id);
        r.positive ? ++s.total_pos : ++s.total_neg;
    }
    if (s.total_pos == 0)
        throw std::invalid_argument("metrics: no positive samples");
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        sorted[i].positive ? ++tp : ++fp;
        const bool last_of_tie =
            i + 1 == sorted.size() || sorted[i + 1].score != sorted[i].score;
        if (last_of_tie) {
            s.thresholds.push_back(sorted[i].score);
            s.tp.push_back(tp);
            s.fp.push_back(fp);
        }
    }
    return s;
}

}  // namespace

std::vector<std::pair<double, double>> pr_curve(const std::vector<Scored>& scored) {
    ThresholdSweep s = sweep(scored);
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
        const double recall = static_cast<double>(s.tp[i]) / s.total_pos;
        const double precision = static_cast<double>(s.tp[i]) / (s.tp[i] + s.fp[i]);
        pts.emplace_back(recall, precision);
    }
    return pts;
}

double average_precision(const std::vector<Scored>& scored) {
    auto pts = pr_curve(scored);
    double ap = 0.0, prev_recall = 0.0;
    for (const auto& [recall, precision] : pts) {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

BestF best_f_threshold(const std::vector<Scored>& scored) {
    ThresholdSweep s = sweep(scored);
    BestF best;
    bool found = false;
    for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
        const int tp = s.tp[i], fp = s.fp[i];
        const int fn = s.total_pos - tp;
        const double f1 = tp > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
        // strict > keeps the higher threshold on ties (sweep is descending)
        if (!found || f1 > best.f1) {
            best = {s.thresholds[i], fp, fn, f1};
            found = true;
        }
    }
    return best;
}

int fp_at_full_recall(const std::vector<Scored>& scored) {
    double min_pos = std::numeric_limits<double>::infinity();
    bool any_pos = false;
    for (const auto& r : scored)
        if (r.positive) {
            min_pos = std::min(min_pos, r.score);
            any_pos = true;
        }
    if (!any_pos) throw std::invalid_argument("fp_at_full_recall: no positives");
    int fp = 0;
    for (const auto& r : scored)
        if (!r.positive && r.score >= min_pos) ++fp;
    return fp;
}

EvalReport evaluate(const std::vector<Scored>& scored) {
    EvalReport r;
    r.ap = average_precision(scored);
    r.best_f = best_f_threshold(scored);
    r.fp_at_zero_miss = fp_at_full_recall(scored);
    r.pr_points = pr_curve(scored);
    r.records = scored;
    return r;
}

void write_report_json(const std::string& path, const EvalReport& report) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write report: " + path);
    os << "{\n"
       << "  \"ap\": " << report.ap << ",\n"
       << "  \"best_f_threshold\": " << report.best_f.threshold << ",\n"
       << "  \"best_f1\": " << report.best_f.f1 << ",\n"
       << "  \"fp\": " << report.best_f.fp << ",\n"
       << "  \"fn\": " << report.best_f.fn << ",\n"
       << "  \"fp_at_zero_miss\": " << report.fp_at_zero_miss << "\n"
       << "}\n";
}

void write_pr_csv(const std::string& path, const EvalReport& report) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write PR csv: " + path);
    os << "recall,precision\n";
    for (const auto& [r, p] : report.pr_points) os << r << "," << p << "\n";
}

void write_scores_csv(const std::string& path, const std::vector<Scored>& scored) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write scores csv: " + path);
    os << "image_id,score,label\n";
    for (const auto& s : scored)
        os << s.id << "," << s.score << "," << (s.positive ? 1 : 0) << "\n";
}

std::vector<Scored> score_samples(SegmentationNet& seg, DecisionNet& dec,
                                  const std::vector<Sample>& samples,
                                  bool half_resolution) {
    std::vector<Scored> out;
    out.reserve(samples.size());
    for (const auto& raw : samples) {
        const Sample* s = &raw;
        Sample reduced;
        if (half_resolution) {
            reduced = downscale(raw, 2);
            s = &reduced;
        }
        SegOutput so = seg_forward(seg, s->image, Mode::infer);
        const double score = dec_forward(dec, so.features, so.logits, Mode::infer);
        out.push_back({raw.image_id, score, raw.defective});
    }
    return out;
}

namespace {

FoldArtifacts run_one_fold(const std::vector<Sample>& samples, const FoldPlan& plan,
                           const TrainConfig& cfg, int positive_subsample,
                           int fold, bool verbose) {
    std::vector<Sample> train_set, test_set;
    for (const auto& s : samples)
        (plan.fold_of(s.product_id) == fold ? test_set : train_set).push_back(s);
    if (train_set.empty() || test_set.empty())
        throw DataError("fold " + std::to_string(fold) + " has an empty split");
    // Canonical order: results must not depend on how the caller happened
    // to order the sample list.
    auto by_id = [](const Sample& a, const Sample& b) { return a.image_id < b.image_id; };
    std::sort(train_set.begin(), train_set.end(), by_id);
    std::sort(test_set.begin(), test_set.end(), by_id);
    if (positive_subsample >= 0)
        train_set = subsample_positives(train_set, positive_subsample,
                                        cfg.seed + static_cast<std::uint64_t>(fold));

    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(fold);

    FoldArtifacts art;
    art.fold = fold;
    art.seg = build_segmentation_net(fold_cfg.seed);
    art.dec = build_decision_net(fold_cfg.seed + 7);

    TrainCallbacks cb;
    if (verbose)
        cb.on_step = [fold](int step, double loss) {
            if (step % 100 == 0)
                std::cerr << "[fold " << fold << "] step " << step << " loss " << loss
                          << "\n";
        };

    art.seg_loss_trace = train_segmentation(art.seg, train_set, fold_cfg, cb);
    art.seg.frozen = true;
    art.dec_loss_trace = train_decision(art.seg, art.dec, train_set, fold_cfg, cb);

    // logistic baseline on the training split descriptors
    std::vector<std::pair<double, double>> desc;
    std::vector<bool> labels;
    for (const auto& raw : train_set) {
        const Sample* s = &raw;
        Sample reduced;
        if (cfg.half_resolution) {
            reduced = downscale(raw, 2);
            s = &reduced;
        }
        desc.push_back(seg_descriptor(art.seg, s->image));
        labels.push_back(raw.defective);
    }
    art.baseline = fit_logistic_baseline(desc, labels);

    art.test_scores = score_samples(art.seg, art.dec, test_set, cfg.half_resolution);
    for (const auto& raw : test_set) {
        const Sample* s = &raw;
        Sample reduced;
        if (cfg.half_resolution) {
            reduced = downscale(raw, 2);
            s = &reduced;
        }
        auto [mx, avg] = seg_descriptor(art.seg, s->image);
        art.baseline_scores.push_back(
            {raw.image_id, art.baseline.score(mx, avg), raw.defective});
    }
    return art;
}

}  // namespace

CvOutcome run_cross_validation(const std::vector<Sample>& samples,
                               const FoldPlan& plan, const TrainConfig& cfg,
                               int positive_subsample, int jobs, bool verbose) {
    CvOutcome out;
    out.folds.resize(static_cast<std::size_t>(plan.fold_count));

    if (jobs <= 1) {
        for (int f = 0; f < plan.fold_count; ++f)
            out.folds[static_cast<std::size_t>(f)] =
                run_one_fold(samples, plan, cfg, positive_subsample, f, verbose);
    } else {
        std::vector<std::thread> workers;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(plan.fold_count));
        for (int f = 0; f < plan.fold_count; ++f) {
            workers.emplace_back([&, f] {
                try {
                    out.folds[static_cast<std::size_t>(f)] =
                        run_one_fold(samples, plan, cfg, positive_subsample, f, verbose);
                } catch (...) {
                    errors[static_cast<std::size_t>(f)] = std::current_exception();
                }
            });
        }
        for (auto& w : workers) w.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    for (const auto& art : out.folds) {
        out.pooled.insert(out.pooled.end(), art.test_scores.begin(),
                          art.test_scores.end());
        out.pooled_baseline.insert(out.pooled_baseline.end(),
                                   art.baseline_scores.begin(),
                                   art.baseline_scores.end());
        out.per_fold_reports.push_back(evaluate(art.test_scores));
    }
    out.pooled_report = evaluate(out.pooled);
    out.pooled_baseline_report = evaluate(out.pooled_baseline);
    return out;
}

std::vector<GridRow> config_grid() {
    const AnnotationKind annotations[] = {
        AnnotationKind::original, AnnotationKind::dilate5, AnnotationKind::dilate9,
        AnnotationKind::dilate13, AnnotationKind::dilate17};
    std::vector<GridRow> grid;
    for (auto a : annotations)
        for (auto l : {LossType::mse, LossType::cross_entropy})
            for (bool half : {false, true})
                for (bool rot : {false, true}) grid.push_back({a, l, half, rot});
    return grid;
}

std::vector<GridOutcome> evaluate_grid(const std::vector<Sample>& samples,
                                       const FoldPlan& plan,
                                       const std::vector<GridRow>& grid,
                                       const TrainConfig& base_cfg,
                                       int positive_subsample, int jobs,
                                       bool verbose) {
    std::vector<GridOutcome> out;
    out.reserve(grid.size());
    for (const GridRow& row : grid) {
        TrainConfig cfg = base_cfg;
        cfg.annotation = row.annotation;
        cfg.loss = row.loss;
        cfg.half_resolution = row.half_resolution;
        cfg.rotate = row.rotate;
        cfg.set_default_lr();
        if (verbose)
            std::cerr << "[grid] " << annotation_to_string(row.annotation) << " "
                      << loss_to_string(row.loss)
                      << (row.half_resolution ? " half" : " full")
                      << (row.rotate ? " rotate" : "") << "\n";
        CvOutcome cv = run_cross_validation(samples, plan, cfg, positive_subsample,
                                            jobs, verbose);
        out.push_back({row, cv.pooled_report, cv.pooled_baseline_report});
    }
    return out;
}

void write_grid_csv(const std::string& path, const std::vector<GridOutcome>& rows) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path);
    os << "annotation,loss,resolution,rotate,ap,best_f1,fp_at_full_recall,"
          "baseline_ap\n";
    for (const GridOutcome& g : rows)
        os << annotation_to_string(g.row.annotation) << ","
           << loss_to_string(g.row.loss) << ","
           << (g.row.half_resolution ? "half" : "full") << ","
           << (g.row.rotate ? 1 : 0) << "," << g.report.ap << ","
           << g.report.best_f.f1 << "," << g.report.fp_at_zero_miss << ","
           << g.baseline_report.ap << "\n";
}

BenchResult bench_forward(SegmentationNet& seg, DecisionNet& dec, int height,
                          int width, int repeats) {
    if (repeats < 1) throw std::invalid_argument("bench_forward: repeats < 1");
    Tensor image({1, height, width});
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : image.data) v = u(rng);

    auto run_once = [&] {
        SegOutput so = seg_forward(seg, image, Mode::infer);
        volatile double sink = dec_forward(dec, so.features, so.logits, Mode::infer);
        (void)sink;
    };
    run_once();  // warm-up

    std::vector<double> ms;
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    BenchResult r;
    r.median_ms = ms[ms.size() / 2];
    r.min_ms = ms.front();
    r.max_ms = ms.back();
    r.macs = mac_count(height, width);
    return r;
}

}  // namespace ksdd
