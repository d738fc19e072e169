#ifndef KSDD_OPS_HPP
#define KSDD_OPS_HPP

#include <utility>
#include <vector>

#include "ksdd/tensor.hpp"

namespace ksdd {

enum class Mode { train, infer };

// When enabled, convolution GEMMs run in single precision (roughly 2x
// faster on this layer mix). Tests and gradient checks leave it off.
void set_fast_gemm(bool enabled);
bool fast_gemm_enabled();

// ---- convolution (stride 1, "same" zero padding, odd kernel) ----

Tensor conv2d(const Tensor& input, const Tensor& weights,
              const std::vector<double>& bias);

struct ConvGrad {
    Tensor d_weights;
    std::vector<double> d_bias;
    Tensor d_input;
};

ConvGrad conv2d_backward(const Tensor& input, const Tensor& weights,
                         const Tensor& upstream, bool need_d_input = true);

// ---- 2x2 max pooling, stride 2 ----

struct PoolResult {
    Tensor out;
    std::vector<int> in_shape;
    std::vector<long long> argmax;  // flat input index per output element
};

PoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const PoolResult& fwd, const Tensor& upstream);

// ---- per-channel feature normalization ----

struct NormParams {
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;
    // Number of running-stat updates seen. The first update seeds the
    // running estimates directly from the observed statistics; otherwise an
    // arbitrary init would dominate the momentum-0.99 average for thousands
    // of steps (activation variances are ~1e-4 at init-scale weights).
    long long updates = 0;

    explicit NormParams(int channels = 0) { resize(channels); }
    void resize(int channels) {
        gamma.assign(channels, 1.0);
        beta.assign(channels, 0.0);
        running_mean.assign(channels, 0.0);
        running_var.assign(channels, 1.0);
        updates = 0;
    }
    int channels() const { return static_cast<int>(gamma.size()); }
};

struct NormCache {
    std::vector<double> mean, inv_std;  // per channel, train-mode statistics
};

constexpr double kNormEpsilon = 1e-5;
constexpr double kNormMomentum = 0.99;

// Train mode normalizes each channel by its own spatial statistics (batch
// size is one) and, when update_running is set, folds them into the running
// estimates. Infer mode uses the running statistics.
Tensor feature_norm(const Tensor& input, NormParams& params, Mode mode,
                    NormCache* cache = nullptr, bool update_running = true);

struct NormGrad {
    std::vector<double> d_gamma, d_beta;
    Tensor d_input;
};

NormGrad feature_norm_backward(const Tensor& input, const NormParams& params,
                               const NormCache& cache, const Tensor& upstream);

// ---- ReLU ----

Tensor relu(const Tensor& input);
// Gradient at exactly zero is defined as zero.
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

// ---- global pooling ----

struct GlobalPool {
    std::vector<double> max, avg;
    std::vector<long long> argmax;  // first spatial argmax per channel
};

GlobalPool global_pool(const Tensor& input);
Tensor global_pool_backward(const GlobalPool& fwd, const std::vector<int>& in_shape,
                            const std::vector<double>& d_max,
                            const std::vector<double>& d_avg);

// ---- linear head ----

double linear(const std::vector<double>& input, const std::vector<double>& weights,
              double bias);

// ---- SGD without momentum ----

// p <- p - lr * g. Throws on non-finite gradients so a diverged step is
// reported instead of silently poisoning the parameters.
void sgd_step(std::vector<double>& params, const std::vector<double>& grads,
              double lr);

double sigmoid(double x);

}  // namespace ksdd

#endif
