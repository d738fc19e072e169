#ifndef KSDD_NETWORK_HPP
#define KSDD_NETWORK_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ksdd/ops.hpp"
#include "ksdd/tensor.hpp"

namespace ksdd {

// One convolution with its optional feature normalization and ReLU, plus
// gradient buffers filled by the backward pass.
struct ConvUnit {
    Tensor w;  // outC x inC x k x k
    std::vector<double> b;
    bool has_norm = true;
    bool has_relu = true;
    NormParams norm;

    Tensor dw;
    std::vector<double> db, d_gamma, d_beta;

    int out_channels() const { return w.dim(0); }
    int in_channels() const { return w.dim(1); }
    int kernel() const { return w.dim(2); }
    void zero_grads();
    long long parameter_count() const;
};

// Fully convolutional segmentation body: three pooled blocks of 5x5 convs
// (2, 3 and 4 layers deep), a 15x15 conv to 1024 channels, and a 1x1
// reduction to the single-channel logit map at 1/8 input resolution.
struct SegmentationNet {
    std::vector<ConvUnit> layers;   // 11 conv units
    std::vector<int> pool_after;    // indices of units followed by 2x2 max-pool
    bool frozen = false;
};

// Image-level classifier on top of the frozen segmentation body. Input is
// the 1024-channel feature volume concatenated with the logit map (1025
// channels); three pool+conv stages (8/16/32 channels) feed a 66-input
// linear head together with the global max/avg of the logit map.
struct DecisionNet {
    std::vector<ConvUnit> convs;  // 3 conv units, each preceded by a max-pool
    std::vector<double> head_w;   // 66 weights
    double head_b = 0.0;

    std::vector<double> d_head_w;
    double d_head_b = 0.0;
};

constexpr double kInitStddev = 0.01;
constexpr int kDecisionHeadInputs = 66;

SegmentationNet build_segmentation_net(std::uint64_t seed);
DecisionNet build_decision_net(std::uint64_t seed);

// ---- forward / backward ----

struct ConvUnitCache {
    Tensor input;
    Tensor pre_norm;   // conv output before normalization
    NormCache norm;
    Tensor pre_relu;   // normalized output (equals pre_norm when no norm)
};

struct SegContext {
    std::vector<ConvUnitCache> units;
    std::vector<PoolResult> pools;
};

struct SegOutput {
    Tensor features;  // 1024 x H/8 x W/8, after the 15x15 conv's norm + ReLU
    Tensor logits;    // 1 x H/8 x W/8, raw pre-sigmoid map
};

// H and W must be divisible by 8. Train mode uses per-image normalization
// statistics and updates the running estimates; infer mode uses the
// running statistics and never mutates the net.
SegOutput seg_forward(SegmentationNet& net, const Tensor& image, Mode mode,
                      SegContext* ctx = nullptr);

// Accumulates parameter gradients from the given output gradients.
void seg_backward(SegmentationNet& net, const SegContext& ctx,
                  const Tensor& d_features, const Tensor& d_logits);

struct DecContext {
    std::vector<ConvUnitCache> units;
    std::vector<PoolResult> pools;
    GlobalPool feat_pool;
    std::vector<int> last_conv_shape;
    GlobalPool map_pool;
    std::vector<double> head_input;
    double pre_sigmoid = 0.0;
};

// Returns the image-level defect score in (0, 1).
double dec_forward(DecisionNet& net, const Tensor& features, const Tensor& logits,
                   Mode mode, DecContext* ctx = nullptr);

// d_pre_sigmoid is the loss gradient w.r.t. the head output before the
// sigmoid. Gradients into the (frozen) segmentation outputs are not produced.
void dec_backward(DecisionNet& net, const DecContext& ctx, double d_pre_sigmoid);

// ---- bookkeeping ----

long long count_parameters(const SegmentationNet& net);
long long count_parameters(const DecisionNet& net);
long long count_parameters(const SegmentationNet& seg, const DecisionNet& dec);

struct LayerSpec {
    int kernel;
    int stride;
};

// Standard receptive-field recurrence r <- r + (k - 1) * j, j <- j * s.
int receptive_field(const std::vector<LayerSpec>& layers);
int receptive_field(const SegmentationNet& net);

void zero_grads(SegmentationNet& net);
void zero_grads(DecisionNet& net);
// Applies one SGD step from the accumulated gradients and clears them.
// A frozen segmentation net is left untouched.
void sgd_update(SegmentationNet& net, double lr);
void sgd_update(DecisionNet& net, double lr);

// Order-stable digest of all segmentation parameters and running statistics,
// used to assert the two-stage isolation contract.
std::uint64_t parameter_hash(const SegmentationNet& net);

// Analytic multiply-accumulate count of one full forward pass (segmentation
// plus decision) at the given input resolution.
long long mac_count(int height, int width);

// ---- weight files ----

struct WeightFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : WeightFileError {
    using WeightFileError::WeightFileError;
};
struct BadVersionError : WeightFileError {
    using WeightFileError::WeightFileError;
};
struct TruncatedFileError : WeightFileError {
    using WeightFileError::WeightFileError;
};

constexpr std::uint32_t kWeightFileVersion = 1;

void save_weights(const std::string& path, const SegmentationNet& seg,
                  const DecisionNet& dec);
void load_weights(const std::string& path, SegmentationNet& seg, DecisionNet& dec);

}  // namespace ksdd

#endif
