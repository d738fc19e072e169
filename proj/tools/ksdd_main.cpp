// Command-line front end: synthetic-corpus generation, two-stage training
// with 3-fold cross-validation, evaluation, forward-pass benchmarking and
// single-image inference. A JSON config file can pre-set any option;
// explicit flags win over the file.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 data error
// (unreadable dataset, bad weight file), 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ksdd/eval.hpp"

using namespace ksdd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Options {
    // synth
    int pos = 30, neg = 60, size = 256;
    // shared
    std::string root, out = "run", config_path, weights, image, map_out;
    std::string annotation = "dilate5", loss = "cross_entropy";
    bool half = false, rotate = false, exact = false;
    std::uint64_t seed = 0;
    int steps = 6600, steps_decision = -1;  // -1: same as steps
    int subsample = -1;
    int jobs = 1;
    int height = 1408, width = 512, repeats = 5;
};

// Scan argv for --config before the real parse so the file can provide
// defaults that explicit flags then override.
std::string find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc - 1; ++i)
        if (std::string(argv[i]) == "--config") return argv[i + 1];
    return {};
}

void apply_config_file(Options& o, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("--config", "cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw CLI::ValidationError("--config", std::string("bad JSON: ") + e.what());
    }
    auto get = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).template get<std::decay_t<decltype(slot)>>();
    };
    get("root", o.root);
    get("out", o.out);
    get("annotation", o.annotation);
    get("loss", o.loss);
    get("half_resolution", o.half);
    get("rotate", o.rotate);
    get("seed", o.seed);
    get("steps", o.steps);
    get("steps_decision", o.steps_decision);
    get("subsample_positives", o.subsample);
    get("jobs", o.jobs);
    get("pos", o.pos);
    get("neg", o.neg);
    get("size", o.size);
}

TrainConfig to_train_config(const Options& o) {
    TrainConfig cfg;
    cfg.loss = loss_from_string(o.loss);
    cfg.set_default_lr();  // 0.005 for MSE, 0.1 for cross-entropy
    cfg.annotation = annotation_from_string(o.annotation);
    cfg.half_resolution = o.half;
    cfg.rotate = o.rotate;
    cfg.seed = o.seed;
    cfg.steps_segmentation = o.steps;
    cfg.steps_decision = o.steps_decision < 0 ? o.steps : o.steps_decision;
    return cfg;
}

// Resolved settings written into the run directory so a run can be
// reproduced bit-for-bit from its own artifacts.
void write_snapshot(const fs::path& dir, const Options& o, const TrainConfig& cfg) {
    json j{{"root", o.root},
           {"out", o.out},
           {"annotation", annotation_to_string(cfg.annotation)},
           {"loss", loss_to_string(cfg.loss)},
           {"lr_segmentation", cfg.lr_segmentation},
           {"lr_decision", cfg.lr_decision},
           {"half_resolution", cfg.half_resolution},
           {"rotate", cfg.rotate},
           {"seed", cfg.seed},
           {"steps", cfg.steps_segmentation},
           {"steps_decision", cfg.steps_decision},
           {"subsample_positives", o.subsample},
           {"jobs", o.jobs},
           {"exact", o.exact}};
    std::ofstream out(dir / "config.json");
    out << j.dump(2) << "\n";
}

void write_trace_csv(const fs::path& path, const std::vector<double>& trace) {
    std::ofstream out(path);
    out << "step,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) out << i << "," << trace[i] << "\n";
}

int cmd_synth(const Options& o) {
    if (o.size % 64 != 0) {
        std::cerr << "error: --size must be divisible by 64, got " << o.size << "\n";
        return kExitConfig;
    }
    synth_generate(o.pos, o.neg, o.size, o.seed, o.out);
    std::cout << "wrote " << (o.pos + o.neg) << " samples; manifest: "
              << (fs::path(o.out) / "manifest.jsonl").string() << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    if (o.root.empty()) {
        std::cerr << "error: --root is required\n";
        return kExitConfig;
    }
    const TrainConfig cfg = to_train_config(o);
    std::vector<Sample> samples = load_dataset(o.root);
    if (samples.empty()) throw DataError("no samples under " + o.root);
    FoldPlan plan = make_folds(samples, cfg.seed);

    fs::create_directories(o.out);
    write_snapshot(o.out, o, cfg);

    CvOutcome cv = run_cross_validation(samples, plan, cfg, o.subsample, o.jobs,
                                        /*verbose=*/true);

    for (FoldArtifacts& f : cv.folds) {
        const fs::path dir = fs::path(o.out) / ("fold_" + std::to_string(f.fold));
        fs::create_directories(dir);
        save_weights((dir / "weights.bin").string(), f.seg, f.dec);
        write_trace_csv(dir / "seg_loss.csv", f.seg_loss_trace);
        write_trace_csv(dir / "dec_loss.csv", f.dec_loss_trace);
        write_scores_csv((dir / "test_scores.csv").string(), f.test_scores);
        write_scores_csv((dir / "baseline_scores.csv").string(), f.baseline_scores);
    }
    write_report_json((fs::path(o.out) / "report.json").string(), cv.pooled_report);
    write_pr_csv((fs::path(o.out) / "pr.csv").string(), cv.pooled_report);
    write_scores_csv((fs::path(o.out) / "scores.csv").string(), cv.pooled);
    write_report_json((fs::path(o.out) / "baseline_report.json").string(),
                      cv.pooled_baseline_report);

    std::cout << "pooled AP " << cv.pooled_report.ap << ", fp at full recall "
              << cv.pooled_report.fp_at_zero_miss << "; artifacts in " << o.out
              << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    if (o.root.empty() || o.weights.empty()) {
        std::cerr << "error: --root and --weights are required\n";
        return kExitConfig;
    }
    SegmentationNet seg = build_segmentation_net(0);
    DecisionNet dec = build_decision_net(0);
    load_weights(o.weights, seg, dec);
    std::vector<Sample> samples = load_dataset(o.root);
    if (samples.empty()) throw DataError("no samples under " + o.root);

    std::vector<Scored> scored = score_samples(seg, dec, samples, o.half);
    EvalReport report = evaluate(scored);

    fs::create_directories(o.out);
    write_report_json((fs::path(o.out) / "report.json").string(), report);
    write_pr_csv((fs::path(o.out) / "pr.csv").string(), report);
    write_scores_csv((fs::path(o.out) / "scores.csv").string(), scored);
    std::cout << "AP " << report.ap << ", best F1 " << report.best_f.f1
              << " at threshold " << report.best_f.threshold
              << ", fp at full recall " << report.fp_at_zero_miss
              << "; reports in " << o.out << "\n";
    return 0;
}

int cmd_bench(const Options& o) {
    SegmentationNet seg = build_segmentation_net(1);
    DecisionNet dec = build_decision_net(2);
    if (!o.weights.empty()) load_weights(o.weights, seg, dec);
    BenchResult full = bench_forward(seg, dec, o.height, o.width, o.repeats);
    BenchResult half = bench_forward(seg, dec, o.height / 2, o.width / 2, o.repeats);
    std::printf("resolution,median_ms,min_ms,max_ms,macs\n");
    std::printf("%dx%d,%.2f,%.2f,%.2f,%lld\n", o.height, o.width, full.median_ms,
                full.min_ms, full.max_ms, full.macs);
    std::printf("%dx%d,%.2f,%.2f,%.2f,%lld\n", o.height / 2, o.width / 2,
                half.median_ms, half.min_ms, half.max_ms, half.macs);
    std::printf("wall ratio %.2f, mac ratio %.4f\n", full.median_ms / half.median_ms,
                double(full.macs) / double(half.macs));
    return 0;
}

int cmd_infer(const Options& o) {
    if (o.weights.empty() || o.image.empty()) {
        std::cerr << "error: --weights and --image are required\n";
        return kExitConfig;
    }
    SegmentationNet seg = build_segmentation_net(0);
    DecisionNet dec = build_decision_net(0);
    load_weights(o.weights, seg, dec);
    Tensor img = read_image_gray(o.image);
    if (o.half) {
        Sample s;
        s.image = img;
        s.mask = Mask(img.dim(1), img.dim(2));
        img = downscale(s).image;
    }
    SegOutput out = seg_forward(seg, img, Mode::infer);
    const double score = dec_forward(dec, out.features, out.logits, Mode::infer);
    std::printf("score %.6f\n", score);
    if (!o.map_out.empty()) {
        // Per-pixel defect probability at the map's native 1/8 resolution,
        // scaled to 8-bit; never upsampled.
        Tensor prob = out.logits;
        for (double& v : prob.data) v = sigmoid(v);
        write_image_gray(o.map_out, prob);
        std::printf("probability map: %s (%dx%d)\n", o.map_out.c_str(),
                    prob.dim(2), prob.dim(1));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"Two-stage surface-defect detector"};
    app.require_subcommand(1);

    try {
        const std::string cfg_path = find_config_arg(argc, argv);
        if (!cfg_path.empty()) apply_config_file(o, cfg_path);
    } catch (const CLI::Error& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    }

    std::string config_dummy;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_dummy, "JSON config file (flags win)");
        cmd->add_option("--seed", o.seed, "RNG seed");
        cmd->add_option("--out", o.out, "output directory");
        cmd->add_option("--jobs", o.jobs, "concurrent folds")->check(CLI::PositiveNumber);
        cmd->add_flag("--exact", o.exact, "double-precision GEMM (slower)");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    add_common(synth);
    synth->add_option("--pos", o.pos, "defective samples")->check(CLI::NonNegativeNumber);
    synth->add_option("--neg", o.neg, "defect-free samples")->check(CLI::NonNegativeNumber);
    synth->add_option("--size", o.size, "square image size (multiple of 64)");

    CLI::App* train = app.add_subcommand("train", "two-stage training with 3-fold CV");
    add_common(train);
    train->add_option("--root", o.root, "dataset root");
    train->add_option("--annotation", o.annotation,
                      "original|dilate5|dilate9|dilate13|dilate17|big|coarse");
    train->add_option("--loss", o.loss, "cross_entropy|mse (sets the learning rate)");
    train->add_flag("--half", o.half, "train at half resolution");
    train->add_flag("--rotate", o.rotate, "random 90-degree rotation augmentation");
    train->add_option("--steps", o.steps, "segmentation steps per fold");
    train->add_option("--steps-decision", o.steps_decision,
                      "decision steps per fold (default: --steps)");
    train->add_option("--subsample-positives", o.subsample,
                      "defective training samples kept per fold");

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a dataset with saved weights");
    add_common(eval_cmd);
    eval_cmd->add_option("--root", o.root, "dataset root");
    eval_cmd->add_option("--weights", o.weights, "weight file");
    eval_cmd->add_flag("--half", o.half, "score at half resolution");

    CLI::App* bench = app.add_subcommand("bench", "forward-pass timing at two resolutions");
    add_common(bench);
    bench->add_option("--weights", o.weights, "optional weight file");
    bench->add_option("--height", o.height, "full-resolution height");
    bench->add_option("--width", o.width, "full-resolution width");
    bench->add_option("--repeats", o.repeats, "timed repetitions")->check(CLI::PositiveNumber);

    CLI::App* infer = app.add_subcommand("infer", "score one image");
    add_common(infer);
    infer->add_option("--weights", o.weights, "weight file");
    infer->add_option("--image", o.image, "grayscale image path");
    infer->add_option("--map", o.map_out, "write the probability map PNG here");
    infer->add_flag("--half", o.half, "score at half resolution");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    }

    set_fast_gemm(!o.exact);
    try {
        if (synth->parsed()) return cmd_synth(o);
        if (train->parsed()) return cmd_train(o);
        if (eval_cmd->parsed()) return cmd_eval(o);
        if (bench->parsed()) return cmd_bench(o);
        if (infer->parsed()) return cmd_infer(o);
    } catch (const std::invalid_argument& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const WeightFileError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitConfig;
}
