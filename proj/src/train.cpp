#include "ksdd/train.hpp"

#include <algorithm>
#include <cmath>

namespace ksdd {

LossType loss_from_string(const std::string& s) {
    if (s == "mse") return LossType::mse;
    if (s == "cross_entropy" || s == "ce") return LossType::cross_entropy;
    throw std::invalid_argument("unknown loss type: " + s);
}

std::string loss_to_string(LossType t) {
    return t == LossType::mse ? "mse" : "cross_entropy";
}

double epochs_for(int steps, int positives) {
    if (positives <= 0)
        throw std::invalid_argument("epochs_for: positives must be > 0");
    return static_cast<double>(steps) / (2.0 * positives);
}

BalancedSampler::BalancedSampler(std::vector<std::size_t> positives,
                                 std::vector<std::size_t> negatives,
                                 std::uint64_t seed)
    : pos_(std::move(positives)), neg_(std::move(negatives)), rng_(seed) {
    if (pos_.empty()) throw std::invalid_argument("BalancedSampler: no defective samples");
    if (neg_.empty()) throw std::invalid_argument("BalancedSampler: no non-defective samples");
    std::shuffle(pos_.begin(), pos_.end(), rng_);
    std::shuffle(neg_.begin(), neg_.end(), rng_);
}

BalancedSampler BalancedSampler::from_samples(const std::vector<Sample>& samples,
                                              std::uint64_t seed) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < samples.size(); ++i)
        (samples[i].defective ? pos : neg).push_back(i);
    return BalancedSampler(std::move(pos), std::move(neg), seed);
}

std::size_t BalancedSampler::next() {
    const bool positive = step_ % 2 == 0;
    ++step_;
    auto& list = positive ? pos_ : neg_;
    auto& at = positive ? pos_at_ : neg_at_;
    if (at == list.size()) {
        std::shuffle(list.begin(), list.end(), rng_);
        at = 0;
    }
    return list[at++];
}

Mask downscale_mask_block(const Mask& mask, int factor) {
    if (mask.h % factor != 0 || mask.w % factor != 0)
        throw std::invalid_argument("downscale_mask_block: dims not divisible");
    Mask out(mask.h / factor, mask.w / factor);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) out.at(y / factor, x / factor) = 1;
    return out;
}

PixelLoss pixel_loss(const Tensor& logits, const Mask& target, LossType type) {
    if (logits.dim(0) != 1 || logits.dim(1) != target.h || logits.dim(2) != target.w)
        throw std::invalid_argument("pixel_loss: logits " + shape_str(logits.shape) +
                                    " do not match target " + std::to_string(target.h) +
                                    "x" + std::to_string(target.w));
    const long long n = logits.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    PixelLoss r{0.0, Tensor(logits.shape)};
    for (long long i = 0; i < n; ++i) {
        const double x = logits.data[static_cast<std::size_t>(i)];
        const double t = target.v[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        if (type == LossType::mse) {
            const double d = x - t;
            r.loss += d * d * inv_n;
            r.d_logits.data[static_cast<std::size_t>(i)] = 2.0 * d * inv_n;
        } else {
            // stable sigmoid binary cross-entropy on the logit
            r.loss += (std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)))) * inv_n;
            r.d_logits.data[static_cast<std::size_t>(i)] = (sigmoid(x) - t) * inv_n;
        }
    }
    return r;
}

namespace {

// Resolves the sample actually fed to the nets for this step: annotation
// variant, optional half resolution (mask dilated before the reduction),
// optional seeded 90-degree rotation.
Sample prepare_sample(const Sample& raw, const TrainConfig& cfg,
                      std::mt19937_64& rng) {
    Sample s = raw;
    s.mask = apply_annotation(raw.mask, cfg.annotation);
    if (cfg.half_resolution) s = downscale(s, 2);
    if (cfg.rotate) s = rotate90_augment(s, 0.5, rng);
    return s;
}

}  // namespace

std::vector<double> train_segmentation(SegmentationNet& net,
                                       const std::vector<Sample>& samples,
                                       const TrainConfig& cfg,
                                       const TrainCallbacks& cb) {
    if (cfg.lr_segmentation < 0.0)
        throw std::invalid_argument("train_segmentation: negative learning rate");
    BalancedSampler sampler = BalancedSampler::from_samples(samples, cfg.seed);
    std::mt19937_64 aug_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(cfg.steps_segmentation));
    SegContext ctx;
    for (int step = 0; step < cfg.steps_segmentation; ++step) {
        const Sample& raw = samples[sampler.next()];
        Sample s = prepare_sample(raw, cfg, aug_rng);
        SegOutput out = seg_forward(net, s.image, Mode::train, &ctx);
        const Mask target = downscale_mask_block(s.mask, 8);
        PixelLoss pl = pixel_loss(out.logits, target, cfg.loss);
        if (!std::isfinite(pl.loss))
            throw std::runtime_error("train_segmentation: non-finite loss at step " +
                                     std::to_string(step));
        seg_backward(net, ctx, Tensor(), pl.d_logits);
        sgd_update(net, cfg.lr_segmentation);
        trace.push_back(pl.loss);
        if (cb.on_step) cb.on_step(step, pl.loss);
    }
    return trace;
}

std::vector<double> train_decision(SegmentationNet& seg, DecisionNet& dec,
                                   const std::vector<Sample>& samples,
                                   const TrainConfig& cfg,
                                   const TrainCallbacks& cb) {
    if (!seg.frozen)
        throw std::logic_error(
            "train_decision: segmentation net must be frozen before stage two");
    BalancedSampler sampler = BalancedSampler::from_samples(samples, cfg.seed + 1);
    std::mt19937_64 aug_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);

    // The frozen segmentation outputs are deterministic per sample when no
    // augmentation runs, so they are computed once and reused.
    std::vector<SegOutput> cache(samples.size());
    std::vector<bool> cached(samples.size(), false);

    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(cfg.steps_decision));
    DecContext ctx;
    for (int step = 0; step < cfg.steps_decision; ++step) {
        const std::size_t idx = sampler.next();
        const Sample& raw = samples[idx];
        SegOutput out;
        const SegOutput* seg_out = nullptr;
        if (!cfg.rotate) {
            if (!cached[idx]) {
                Sample s = prepare_sample(raw, cfg, aug_rng);
                cache[idx] = seg_forward(seg, s.image, Mode::infer);
                cached[idx] = true;
            }
            seg_out = &cache[idx];
        } else {
            Sample s = prepare_sample(raw, cfg, aug_rng);
            out = seg_forward(seg, s.image, Mode::infer);
            seg_out = &out;
        }

        const double t = raw.defective ? 1.0 : 0.0;
        const double score =
            dec_forward(dec, seg_out->features, seg_out->logits, Mode::train, &ctx);
        const double z = ctx.pre_sigmoid;
        const double loss =
            std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
        if (!std::isfinite(loss))
            throw std::runtime_error("train_decision: non-finite loss at step " +
                                     std::to_string(step));
        dec_backward(dec, ctx, score - t);
        sgd_update(dec, cfg.lr_decision);
        trace.push_back(loss);
        if (cb.on_step) cb.on_step(step, loss);
    }
    return trace;
}

double LogisticBaseline::score(double map_max, double map_avg) const {
    return sigmoid(w_max * map_max + w_avg * map_avg + bias);
}

LogisticBaseline fit_logistic_baseline(
    const std::vector<std::pair<double, double>>& descriptors,
    const std::vector<bool>& labels) {
    if (descriptors.size() != labels.size() || descriptors.empty())
        throw std::invalid_argument("fit_logistic_baseline: bad input sizes");
    const bool first = labels[0];
    if (std::all_of(labels.begin(), labels.end(), [&](bool l) { return l == first; }))
        throw std::invalid_argument("fit_logistic_baseline: all labels identical");

    const std::size_t n = descriptors.size();
    // standardize features for a well-conditioned plain gradient descent
    double m0 = 0, m1 = 0;
    for (const auto& d : descriptors) { m0 += d.first; m1 += d.second; }
    m0 /= static_cast<double>(n);
    m1 /= static_cast<double>(n);
    double v0 = 0, v1 = 0;
    for (const auto& d : descriptors) {
        v0 += (d.first - m0) * (d.first - m0);
        v1 += (d.second - m1) * (d.second - m1);
    }
    const double s0 = std::sqrt(v0 / static_cast<double>(n)) + 1e-12;
    const double s1 = std::sqrt(v1 / static_cast<double>(n)) + 1e-12;

    double w0 = 0, w1 = 0, b = 0;
    const double lr = 1.5;
    for (int iter = 0; iter < 10000; ++iter) {
        double g0 = 0, g1 = 0, gb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x0 = (descriptors[i].first - m0) / s0;
            const double x1 = (descriptors[i].second - m1) / s1;
            const double e = sigmoid(w0 * x0 + w1 * x1 + b) - (labels[i] ? 1.0 : 0.0);
            g0 += e * x0;
            g1 += e * x1;
            gb += e;
        }
        g0 /= static_cast<double>(n);
        g1 /= static_cast<double>(n);
        gb /= static_cast<double>(n);
        w0 -= lr * g0;
        w1 -= lr * g1;
        b -= lr * gb;
        if (std::sqrt(g0 * g0 + g1 * g1 + gb * gb) < 1e-6) break;
    }
    // fold the standardization back into raw-descriptor weights
    LogisticBaseline out;
    out.w_max = w0 / s0;
    out.w_avg = w1 / s1;
    out.bias = b - w0 * m0 / s0 - w1 * m1 / s1;
    return out;
}

std::pair<double, double> seg_descriptor(SegmentationNet& net, const Tensor& image) {
    SegOutput out = seg_forward(net, image, Mode::infer);
    GlobalPool p = global_pool(out.logits);
    return {p.max[0], p.avg[0]};
}

}  // namespace ksdd
