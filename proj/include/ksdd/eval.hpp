#ifndef KSDD_EVAL_HPP
#define KSDD_EVAL_HPP

#include <string>
#include <utility>
#include <vector>

#include "ksdd/dataio.hpp"
#include "ksdd/network.hpp"
#include "ksdd/train.hpp"

namespace ksdd {

struct Scored {
    std::string id;
    double score = 0.0;
    bool positive = false;
};

// One point per distinct score threshold, thresholds descending; ties are
// grouped. Recall is non-decreasing along the curve.
std::vector<std::pair<double, double>> pr_curve(const std::vector<Scored>& scored);

// Step-integrated (uninterpolated) area under the precision-recall curve.
double average_precision(const std::vector<Scored>& scored);

struct BestF {
    double threshold = 0.0;
    int fp = 0, fn = 0;
    double f1 = 0.0;
};

// F1 maximized over distinct-score thresholds, classification rule
// score >= threshold; ties resolved toward the higher threshold.
BestF best_f_threshold(const std::vector<Scored>& scored);

// Negatives at or above the lowest positive score.
int fp_at_full_recall(const std::vector<Scored>& scored);

struct EvalReport {
    double ap = 0.0;
    BestF best_f;
    int fp_at_zero_miss = 0;
    std::vector<std::pair<double, double>> pr_points;
    std::vector<Scored> records;
};

EvalReport evaluate(const std::vector<Scored>& scored);

void write_report_json(const std::string& path, const EvalReport& report);
void write_pr_csv(const std::string& path, const EvalReport& report);
void write_scores_csv(const std::string& path, const std::vector<Scored>& scored);

// ---- cross-validation ----

// Scores every sample with the trained pair (infer mode, resolution and
// annotation per config).
std::vector<Scored> score_samples(SegmentationNet& seg, DecisionNet& dec,
                                  const std::vector<Sample>& samples,
                                  bool half_resolution);

struct FoldArtifacts {
    int fold = 0;
    SegmentationNet seg;
    DecisionNet dec;
    LogisticBaseline baseline;
    std::vector<double> seg_loss_trace, dec_loss_trace;
    std::vector<Scored> test_scores;      // decision-net scores on the held-out fold
    std::vector<Scored> baseline_scores;  // logistic-baseline scores on the same fold
};

struct CvOutcome {
    std::vector<FoldArtifacts> folds;
    std::vector<Scored> pooled;           // decision-net, concatenated across folds
    std::vector<Scored> pooled_baseline;
    EvalReport pooled_report;
    EvalReport pooled_baseline_report;
    std::vector<EvalReport> per_fold_reports;
};

// Trains both stages on every training split and scores the held-out
// folds. Scores are pooled across folds before computing the primary
// metrics; per-fold reports are kept for variance inspection.
// `positive_subsample` < 0 keeps all positives. `jobs` > 1 trains folds
// concurrently.
CvOutcome run_cross_validation(const std::vector<Sample>& samples,
                               const FoldPlan& plan, const TrainConfig& cfg,
                               int positive_subsample = -1, int jobs = 1,
                               bool verbose = false);

struct GridRow {
    AnnotationKind annotation;
    LossType loss;
    bool half_resolution;
    bool rotate;
};

// The four experiment axes: 5 annotations x 2 losses x 2 sizes x 2
// rotations = 40 configurations.
std::vector<GridRow> config_grid();

struct GridOutcome {
    GridRow row;
    EvalReport report;           // decision net, pooled across folds
    EvalReport baseline_report;  // logistic baseline, pooled across folds
};

// Runs the full cross-validation once per grid row (training on demand)
// and returns one pooled report per configuration, in grid order. The
// per-loss default learning rate is applied to every row.
std::vector<GridOutcome> evaluate_grid(const std::vector<Sample>& samples,
                                       const FoldPlan& plan,
                                       const std::vector<GridRow>& grid,
                                       const TrainConfig& base_cfg,
                                       int positive_subsample = -1, int jobs = 1,
                                       bool verbose = false);

// One CSV row per configuration: the axes plus the headline metrics.
void write_grid_csv(const std::string& path, const std::vector<GridOutcome>& rows);

// ---- benchmarking ----

struct BenchResult {
    double median_ms = 0.0;
    double min_ms = 0.0, max_ms = 0.0;
    long long macs = 0;
};

// Median wall-clock of seg_forward + dec_forward over `repeats` runs after
// one warm-up, plus the analytic multiply-accumulate count.
BenchResult bench_forward(SegmentationNet& seg, DecisionNet& dec, int height,
                          int width, int repeats);

}  // namespace ksdd

#endif
