#ifndef KSDD_TRAIN_HPP
#define KSDD_TRAIN_HPP

#include <cstdint>
#include <functional>
#include <vector>

#include "ksdd/dataio.hpp"
#include "ksdd/network.hpp"

namespace ksdd {

enum class LossType { mse, cross_entropy };

LossType loss_from_string(const std::string& s);
std::string loss_to_string(LossType t);

struct TrainConfig {
    LossType loss = LossType::cross_entropy;
    double lr_segmentation = 0.1;  // 0.005 for MSE, 0.1 for cross-entropy
    double lr_decision = 0.1;
    int steps_segmentation = 6600;
    int steps_decision = 6600;
    bool rotate = false;
    AnnotationKind annotation = AnnotationKind::dilate5;
    bool half_resolution = false;
    std::uint64_t seed = 0;

    // Applies the standard per-loss learning rate.
    void set_default_lr() {
        lr_segmentation = (loss == LossType::mse) ? 0.005 : 0.1;
        lr_decision = 0.1;
    }
};

// Epoch here means a period in which every defective image has
// been observed at least once. With the alternating sampler that is
// steps / (2 * positives).
double epochs_for(int steps, int positives);

// Infinite alternating stream: defective samples on even iterations,
// non-defective on odd ones, each class shuffled without replacement
// within its own cycle.
class BalancedSampler {
  public:
    BalancedSampler(std::vector<std::size_t> positives,
                    std::vector<std::size_t> negatives, std::uint64_t seed);
    static BalancedSampler from_samples(const std::vector<Sample>& samples,
                                        std::uint64_t seed);
    std::size_t next();  // index into the sample list
    bool next_is_positive() const { return step_ % 2 == 0; }

  private:
    std::vector<std::size_t> pos_, neg_;
    std::size_t pos_at_ = 0, neg_at_ = 0;
    long long step_ = 0;
    std::mt19937_64 rng_;
};

// Target mask reduced to the 1/8 output grid: a block is positive when any
// source pixel in it is positive.
Mask downscale_mask_block(const Mask& mask, int factor);

struct PixelLoss {
    double loss;
    Tensor d_logits;
};

// MSE is applied to the raw pre-sigmoid map against 0/1 targets; the
// cross-entropy variant goes through the sigmoid. Both are means over the
// output map.
PixelLoss pixel_loss(const Tensor& logits, const Mask& target, LossType type);

struct TrainCallbacks {
    // called after every step with (step, loss)
    std::function<void(int, double)> on_step;
};

// Stage one: trains only the segmentation net with the pixel loss.
// Returns the per-step loss trace.
std::vector<double> train_segmentation(SegmentationNet& net,
                                       const std::vector<Sample>& samples,
                                       const TrainConfig& cfg,
                                       const TrainCallbacks& cb = {});

// Stage two: requires net.frozen == true; trains only the decision layers
// with image-level sigmoid cross-entropy. Segmentation parameters and
// running statistics are bit-identical before and after.
std::vector<double> train_decision(SegmentationNet& seg, DecisionNet& dec,
                                   const std::vector<Sample>& samples,
                                   const TrainConfig& cfg,
                                   const TrainCallbacks& cb = {});

struct LogisticBaseline {
    double w_max = 0.0, w_avg = 0.0, bias = 0.0;

    double score(double map_max, double map_avg) const;
};

// Descriptor per image: (global max, global avg) of the segmentation
// output map. Fit by plain gradient descent (gradient norm < 1e-6 or 10k
// iterations). Throws when all labels agree.
LogisticBaseline fit_logistic_baseline(const std::vector<std::pair<double, double>>& descriptors,
                                       const std::vector<bool>& labels);

// (map max, map avg) descriptor used by the baseline, from a forward pass.
std::pair<double, double> seg_descriptor(SegmentationNet& net, const Tensor& image);

}  // namespace ksdd

#endif
