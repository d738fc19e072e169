#include "ksdd/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace ksdd {

namespace {

std::atomic<bool> g_fast_gemm{false};

// C (M x N) = alpha * A (M x K) * B (K x N) + beta * C, row major.
void gemm_d(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
            const double* a, int lda, const double* b, int ldb, double beta,
            double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

void gemm_f(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
            const float* a, int lda, const float* b, int ldb, float beta,
            float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

void check_conv_shapes(const Tensor& input, const Tensor& weights,
                       const std::vector<double>& bias) {
    if (input.rank() != 3)
        throw std::invalid_argument("conv2d: input must be C x H x W, got " +
                                    shape_str(input.shape));
    if (weights.rank() != 4 || weights.dim(2) != weights.dim(3))
        throw std::invalid_argument("conv2d: weights must be O x C x k x k, got " +
                                    shape_str(weights.shape));
    if (weights.dim(2) % 2 == 0)
        throw std::invalid_argument("conv2d: kernel size must be odd");
    if (weights.dim(1) != input.dim(0))
        throw std::invalid_argument(
            "conv2d: input channels " + std::to_string(input.dim(0)) +
            " do not match weight inC " + std::to_string(weights.dim(1)));
    if (static_cast<int>(bias.size()) != weights.dim(0))
        throw std::invalid_argument("conv2d: bias length does not match outC");
}

// Writes the im2col block for output rows [y0, y0+ny) as a
// (C*k*k) x (ny*w) column matrix. Row-aligned tiles keep the inner loop a
// contiguous shifted copy instead of per-pixel index arithmetic.
template <typename T>
void im2col_block(const Tensor& input, int k, int y0, int ny, T* col) {
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int pad = (k - 1) / 2;
    const long long nx = static_cast<long long>(ny) * w;
    for (int c = 0; c < c_in; ++c) {
        const double* plane = input.data.data() + static_cast<std::size_t>(c) * h * w;
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
                T* row = col + ((static_cast<long long>(c) * k + dy) * k + dx) * nx;
                const int shift = dx - pad;  // source x = dest x + shift
                int a = std::max(0, -shift), b = std::min(w, w - shift);
                if (b < a) b = a;
                for (int y = y0; y < y0 + ny; ++y) {
                    T* drow = row + static_cast<long long>(y - y0) * w;
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= h) {
                        std::memset(drow, 0, sizeof(T) * static_cast<std::size_t>(w));
                        continue;
                    }
                    const double* srow = plane + static_cast<std::size_t>(sy) * w;
                    for (int x = 0; x < a; ++x) drow[x] = T(0);
                    for (int x = a; x < b; ++x)
                        drow[x] = static_cast<T>(srow[x + shift]);
                    for (int x = b; x < w; ++x) drow[x] = T(0);
                }
            }
        }
    }
}

// Scatter-add of a column block back into image layout.
template <typename T>
void col2im_block(const std::vector<int>& in_shape, int k, int y0, int ny,
                  const T* col, Tensor& out) {
    const int c_in = in_shape[0], h = in_shape[1], w = in_shape[2];
    const int pad = (k - 1) / 2;
    const long long nx = static_cast<long long>(ny) * w;
    for (int c = 0; c < c_in; ++c) {
        double* plane = out.data.data() + static_cast<std::size_t>(c) * h * w;
        for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
                const T* row =
                    col + ((static_cast<long long>(c) * k + dy) * k + dx) * nx;
                const int shift = dx - pad;
                int a = std::max(0, -shift), b = std::min(w, w - shift);
                if (b < a) b = a;
                for (int y = y0; y < y0 + ny; ++y) {
                    const T* srow = row + static_cast<long long>(y - y0) * w;
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= h) continue;
                    double* drow = plane + static_cast<std::size_t>(sy) * w;
                    for (int x = a; x < b; ++x)
                        drow[x + shift] += static_cast<double>(srow[x]);
                }
            }
        }
    }
}

int col_tile_rows(long long rows, int w) {
    // Keep each column buffer around 64 MB so the widest layers run in one
    // or two GEMMs.
    const long long target = 8LL << 20;
    return static_cast<int>(std::max<long long>(1, target / (rows * w)));
}

// Persistent per-thread scratch; the conv working set is reused thousands
// of times per training run and repeated 30-120 MB allocations dominate
// the wall clock otherwise.
template <typename T>
std::vector<T>& scratch(int slot) {
    static thread_local std::vector<T> buf[6];
    return buf[static_cast<std::size_t>(slot)];
}

template <typename T>
T* scratch_data(int slot, std::size_t n) {
    auto& b = scratch<T>(slot);
    if (b.size() < n) b.resize(n);
    return b.data();
}

}  // namespace

void set_fast_gemm(bool enabled) { g_fast_gemm.store(enabled); }
bool fast_gemm_enabled() { return g_fast_gemm.load(); }

Tensor conv2d(const Tensor& input, const Tensor& weights,
              const std::vector<double>& bias) {
    check_conv_shapes(input, weights, bias);
    const int c_out = weights.dim(0), k = weights.dim(2);
    const int h = input.dim(1), w = input.dim(2);
    const long long npix = static_cast<long long>(h) * w;
    const long long rows = static_cast<long long>(input.dim(0)) * k * k;

    Tensor out({c_out, h, w});
    const int tile_ny = col_tile_rows(rows, w);
    const long long buf_cols = static_cast<long long>(std::min(tile_ny, h)) * w;
    if (g_fast_gemm.load(std::memory_order_relaxed)) {
        // Single-precision path: convert the weight matrix once per call
        // (not per tile) and keep everything else in float scratch.
        float* wf = scratch_data<float>(0, static_cast<std::size_t>(weights.size()));
        for (long long i = 0; i < weights.size(); ++i)
            wf[i] = static_cast<float>(weights.data[static_cast<std::size_t>(i)]);
        float* col = scratch_data<float>(1, static_cast<std::size_t>(rows * buf_cols));
        float* obuf = scratch_data<float>(2, static_cast<std::size_t>(c_out * buf_cols));
        for (int y0 = 0; y0 < h; y0 += tile_ny) {
            const int ny = std::min(tile_ny, h - y0);
            const long long nx = static_cast<long long>(ny) * w;
            const long long x0 = static_cast<long long>(y0) * w;
            im2col_block<float>(input, k, y0, ny, col);
            gemm_f(false, false, c_out, static_cast<int>(nx),
                   static_cast<int>(rows), 1.0f, wf, static_cast<int>(rows), col,
                   static_cast<int>(nx), 0.0f, obuf, static_cast<int>(nx));
            for (int o = 0; o < c_out; ++o) {
                double* dst = out.data.data() + static_cast<std::size_t>(o) * npix + x0;
                const float* src = obuf + static_cast<std::size_t>(o) * nx;
                for (long long i = 0; i < nx; ++i)
                    dst[i] = static_cast<double>(src[i]) + bias[static_cast<std::size_t>(o)];
            }
        }
        return out;
    }
    double* col = scratch_data<double>(1, static_cast<std::size_t>(rows * buf_cols));
    double* obuf = scratch_data<double>(2, static_cast<std::size_t>(c_out * buf_cols));
    for (int y0 = 0; y0 < h; y0 += tile_ny) {
        const int ny = std::min(tile_ny, h - y0);
        const long long nx = static_cast<long long>(ny) * w;
        const long long x0 = static_cast<long long>(y0) * w;
        im2col_block<double>(input, k, y0, ny, col);
        gemm_d(false, false, c_out, static_cast<int>(nx), static_cast<int>(rows),
               1.0, weights.data.data(), static_cast<int>(rows), col,
               static_cast<int>(nx), 0.0, obuf, static_cast<int>(nx));
        for (int o = 0; o < c_out; ++o) {
            double* dst = out.data.data() + static_cast<std::size_t>(o) * npix + x0;
            const double* src = obuf + static_cast<std::size_t>(o) * nx;
            for (long long i = 0; i < nx; ++i)
                dst[i] = src[i] + bias[static_cast<std::size_t>(o)];
        }
    }
    return out;
}

ConvGrad conv2d_backward(const Tensor& input, const Tensor& weights,
                         const Tensor& upstream, bool need_d_input) {
    check_conv_shapes(input, weights,
                      std::vector<double>(static_cast<std::size_t>(weights.dim(0))));
    const int c_out = weights.dim(0), k = weights.dim(2);
    const int h = input.dim(1), w = input.dim(2);
    if (upstream.shape != std::vector<int>{c_out, h, w})
        throw std::invalid_argument("conv2d_backward: upstream shape " +
                                    shape_str(upstream.shape) + " does not match " +
                                    shape_str({c_out, h, w}));

    const long long npix = static_cast<long long>(h) * w;
    const long long rows = static_cast<long long>(input.dim(0)) * k * k;

    ConvGrad g;
    g.d_weights = Tensor(weights.shape);
    g.d_bias.assign(static_cast<std::size_t>(c_out), 0.0);
    if (need_d_input) g.d_input = Tensor(input.shape);

    for (int o = 0; o < c_out; ++o) {
        const double* up = upstream.data.data() + static_cast<std::size_t>(o) * npix;
        double s = 0.0;
        for (long long i = 0; i < npix; ++i) s += up[i];
        g.d_bias[static_cast<std::size_t>(o)] = s;
    }

    const int tile_ny = col_tile_rows(rows, w);
    const long long buf_cols = static_cast<long long>(std::min(tile_ny, h)) * w;
    if (g_fast_gemm.load(std::memory_order_relaxed)) {
        const std::size_t wsize = static_cast<std::size_t>(weights.size());
        float* wf = nullptr;
        if (need_d_input) {
            wf = scratch_data<float>(0, wsize);
            for (std::size_t i = 0; i < wsize; ++i)
                wf[i] = static_cast<float>(weights.data[i]);
        }
        // Accumulate d_W in float across tiles; fold into the double
        // gradient once at the end.
        float* dwf = scratch_data<float>(3, wsize);
        std::memset(dwf, 0, sizeof(float) * wsize);
        float* col = scratch_data<float>(1, static_cast<std::size_t>(rows * buf_cols));
        float* ublock = scratch_data<float>(2, static_cast<std::size_t>(c_out * buf_cols));
        float* dcol = need_d_input
                          ? scratch_data<float>(4, static_cast<std::size_t>(rows * buf_cols))
                          : nullptr;
        for (int y0 = 0; y0 < h; y0 += tile_ny) {
            const int ny = std::min(tile_ny, h - y0);
            const long long nx = static_cast<long long>(ny) * w;
            const long long x0 = static_cast<long long>(y0) * w;
            im2col_block<float>(input, k, y0, ny, col);
            for (int o = 0; o < c_out; ++o) {
                const double* src =
                    upstream.data.data() + static_cast<std::size_t>(o) * npix + x0;
                float* dst = ublock + static_cast<std::size_t>(o) * nx;
                for (long long i = 0; i < nx; ++i) dst[i] = static_cast<float>(src[i]);
            }
            // d_W += upstream_block * col^T
            gemm_f(false, true, c_out, static_cast<int>(rows),
                   static_cast<int>(nx), 1.0f, ublock, static_cast<int>(nx), col,
                   static_cast<int>(nx), 1.0f, dwf, static_cast<int>(rows));
            if (need_d_input) {
                // d_col = W^T * upstream_block, then scatter back.
                gemm_f(true, false, static_cast<int>(rows), static_cast<int>(nx),
                       c_out, 1.0f, wf, static_cast<int>(rows), ublock,
                       static_cast<int>(nx), 0.0f, dcol, static_cast<int>(nx));
                col2im_block<float>(input.shape, k, y0, ny, dcol, g.d_input);
            }
        }
        for (std::size_t i = 0; i < wsize; ++i)
            g.d_weights.data[i] = static_cast<double>(dwf[i]);
        return g;
    }

    double* col = scratch_data<double>(1, static_cast<std::size_t>(rows * buf_cols));
    double* ublock = scratch_data<double>(2, static_cast<std::size_t>(c_out * buf_cols));
    double* dcol = need_d_input
                       ? scratch_data<double>(4, static_cast<std::size_t>(rows * buf_cols))
                       : nullptr;
    for (int y0 = 0; y0 < h; y0 += tile_ny) {
        const int ny = std::min(tile_ny, h - y0);
        const long long nx = static_cast<long long>(ny) * w;
        const long long x0 = static_cast<long long>(y0) * w;
        im2col_block<double>(input, k, y0, ny, col);
        for (int o = 0; o < c_out; ++o)
            std::memcpy(ublock + static_cast<std::size_t>(o) * nx,
                        upstream.data.data() + static_cast<std::size_t>(o) * npix + x0,
                        sizeof(double) * static_cast<std::size_t>(nx));
        // d_W += upstream_block * col^T
        gemm_d(false, true, c_out, static_cast<int>(rows), static_cast<int>(nx),
               1.0, ublock, static_cast<int>(nx), col, static_cast<int>(nx), 1.0,
               g.d_weights.data.data(), static_cast<int>(rows));
        if (need_d_input) {
            // d_col = W^T * upstream_block, then scatter back.
            gemm_d(true, false, static_cast<int>(rows), static_cast<int>(nx),
                   c_out, 1.0, weights.data.data(), static_cast<int>(rows),
                   ublock, static_cast<int>(nx), 0.0, dcol,
                   static_cast<int>(nx));
            col2im_block<double>(input.shape, k, y0, ny, dcol, g.d_input);
        }
    }
    return g;
}

PoolResult maxpool2(const Tensor& input) {
    if (input.rank() != 3)
        throw std::invalid_argument("maxpool2: input must be C x H x W");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("maxpool2: spatial dims must be even, got " +
                                    shape_str(input.shape));
    PoolResult r;
    r.in_shape = input.shape;
    r.out = Tensor({c, h / 2, w / 2});
    r.argmax.resize(static_cast<std::size_t>(r.out.size()));
    long long oi = 0;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; y += 2) {
            for (int x = 0; x < w; x += 2) {
                // ties go to the first index in row-major window order
                long long best = (static_cast<long long>(ch) * h + y) * w + x;
                double bv = input.data[static_cast<std::size_t>(best)];
                const long long cand[3] = {best + 1, best + w, best + w + 1};
                for (long long idx : cand) {
                    const double v = input.data[static_cast<std::size_t>(idx)];
                    if (v > bv) {
                        bv = v;
                        best = idx;
                    }
                }
                r.out.data[static_cast<std::size_t>(oi)] = bv;
                r.argmax[static_cast<std::size_t>(oi)] = best;
                ++oi;
            }
        }
    }
    return r;
}

Tensor maxpool2_backward(const PoolResult& fwd, const Tensor& upstream) {
    if (upstream.shape != fwd.out.shape)
        throw std::invalid_argument("maxpool2_backward: upstream shape mismatch");
    Tensor d(fwd.in_shape);
    for (std::size_t i = 0; i < fwd.argmax.size(); ++i)
        d.data[static_cast<std::size_t>(fwd.argmax[i])] += upstream.data[i];
    return d;
}

Tensor feature_norm(const Tensor& input, NormParams& params, Mode mode,
                    NormCache* cache, bool update_running) {
    if (input.rank() != 3)
        throw std::invalid_argument("feature_norm: input must be C x H x W");
    const int c = input.dim(0);
    if (params.channels() != c)
        throw std::invalid_argument("feature_norm: parameter channels mismatch");
    const long long n = static_cast<long long>(input.dim(1)) * input.dim(2);

    Tensor out(input.shape);
    std::vector<double> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const double* x = input.data.data() + static_cast<std::size_t>(ch) * n;
        double m, v;
        if (mode == Mode::train) {
            m = 0.0;
            for (long long i = 0; i < n; ++i) m += x[i];
            m /= static_cast<double>(n);
            v = 0.0;
            for (long long i = 0; i < n; ++i) {
                const double d = x[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(n);
            if (update_running) {
                if (params.updates == 0) {
                    params.running_mean[static_cast<std::size_t>(ch)] = m;
                    params.running_var[static_cast<std::size_t>(ch)] = v;
                } else {
                    params.running_mean[static_cast<std::size_t>(ch)] =
                        kNormMomentum * params.running_mean[static_cast<std::size_t>(ch)] +
                        (1.0 - kNormMomentum) * m;
                    params.running_var[static_cast<std::size_t>(ch)] =
                        kNormMomentum * params.running_var[static_cast<std::size_t>(ch)] +
                        (1.0 - kNormMomentum) * v;
                }
            }
        } else {
            m = params.running_mean[static_cast<std::size_t>(ch)];
            v = params.running_var[static_cast<std::size_t>(ch)];
        }
        const double is = 1.0 / std::sqrt(v + kNormEpsilon);
        const double gamma = params.gamma[static_cast<std::size_t>(ch)];
        const double beta = params.beta[static_cast<std::size_t>(ch)];
        double* y = out.data.data() + static_cast<std::size_t>(ch) * n;
        for (long long i = 0; i < n; ++i) y[i] = gamma * (x[i] - m) * is + beta;
        mean[static_cast<std::size_t>(ch)] = m;
        inv_std[static_cast<std::size_t>(ch)] = is;
    }
    if (mode == Mode::train && update_running) ++params.updates;
    if (cache) {
        cache->mean = std::move(mean);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

NormGrad feature_norm_backward(const Tensor& input, const NormParams& params,
                               const NormCache& cache, const Tensor& upstream) {
    if (!input.same_shape(upstream))
        throw std::invalid_argument("feature_norm_backward: shape mismatch");
    const int c = input.dim(0);
    const long long n = static_cast<long long>(input.dim(1)) * input.dim(2);

    NormGrad g;
    g.d_gamma.assign(static_cast<std::size_t>(c), 0.0);
    g.d_beta.assign(static_cast<std::size_t>(c), 0.0);
    g.d_input = Tensor(input.shape);

    for (int ch = 0; ch < c; ++ch) {
        const double* x = input.data.data() + static_cast<std::size_t>(ch) * n;
        const double* up = upstream.data.data() + static_cast<std::size_t>(ch) * n;
        double* dx = g.d_input.data.data() + static_cast<std::size_t>(ch) * n;
        const double m = cache.mean[static_cast<std::size_t>(ch)];
        const double is = cache.inv_std[static_cast<std::size_t>(ch)];
        const double gamma = params.gamma[static_cast<std::size_t>(ch)];

        double sum_g = 0.0, sum_gx = 0.0;
        for (long long i = 0; i < n; ++i) {
            const double xh = (x[i] - m) * is;
            sum_g += up[i];
            sum_gx += up[i] * xh;
        }
        g.d_beta[static_cast<std::size_t>(ch)] = sum_g;
        g.d_gamma[static_cast<std::size_t>(ch)] = sum_gx;

        const double inv_n = 1.0 / static_cast<double>(n);
        for (long long i = 0; i < n; ++i) {
            const double xh = (x[i] - m) * is;
            dx[i] = gamma * is * (up[i] - inv_n * sum_g - xh * inv_n * sum_gx);
        }
    }
    return g;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.data.size(); ++i)
        out.data[i] = input.data[i] > 0.0 ? input.data[i] : 0.0;
    return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
    if (!input.same_shape(upstream))
        throw std::invalid_argument("relu_backward: shape mismatch");
    Tensor d(input.shape);
    for (std::size_t i = 0; i < input.data.size(); ++i)
        d.data[i] = input.data[i] > 0.0 ? upstream.data[i] : 0.0;
    return d;
}

GlobalPool global_pool(const Tensor& input) {
    if (input.rank() != 3)
        throw std::invalid_argument("global_pool: input must be C x H x W");
    const int c = input.dim(0);
    const long long n = static_cast<long long>(input.dim(1)) * input.dim(2);
    GlobalPool r;
    r.max.resize(static_cast<std::size_t>(c));
    r.avg.resize(static_cast<std::size_t>(c));
    r.argmax.resize(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const double* x = input.data.data() + static_cast<std::size_t>(ch) * n;
        double mx = x[0], sum = 0.0;
        long long am = 0;
        for (long long i = 0; i < n; ++i) {
            sum += x[i];
            if (x[i] > mx) {
                mx = x[i];
                am = i;
            }
        }
        r.max[static_cast<std::size_t>(ch)] = mx;
        r.avg[static_cast<std::size_t>(ch)] = sum / static_cast<double>(n);
        r.argmax[static_cast<std::size_t>(ch)] =
            static_cast<long long>(ch) * n + am;
    }
    return r;
}

Tensor global_pool_backward(const GlobalPool& fwd, const std::vector<int>& in_shape,
                            const std::vector<double>& d_max,
                            const std::vector<double>& d_avg) {
    const int c = in_shape[0];
    const long long n = static_cast<long long>(in_shape[1]) * in_shape[2];
    Tensor d(in_shape);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int ch = 0; ch < c; ++ch) {
        double* dx = d.data.data() + static_cast<std::size_t>(ch) * n;
        const double da = d_avg[static_cast<std::size_t>(ch)] * inv_n;
        for (long long i = 0; i < n; ++i) dx[i] = da;
        d.data[static_cast<std::size_t>(fwd.argmax[static_cast<std::size_t>(ch)])] +=
            d_max[static_cast<std::size_t>(ch)];
    }
    return d;
}

double linear(const std::vector<double>& input, const std::vector<double>& weights,
              double bias) {
    if (input.size() != weights.size())
        throw std::invalid_argument("linear: length mismatch " +
                                    std::to_string(input.size()) + " vs " +
                                    std::to_string(weights.size()));
    double s = bias;
    for (std::size_t i = 0; i < input.size(); ++i) s += input[i] * weights[i];
    return s;
}

void sgd_step(std::vector<double>& params, const std::vector<double>& grads,
              double lr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("sgd_step: size mismatch");
    for (double g : grads)
        if (!std::isfinite(g))
            throw std::runtime_error("sgd_step: non-finite gradient, aborting step");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace ksdd
