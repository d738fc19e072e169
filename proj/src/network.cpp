#include "ksdd/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <random>

namespace ksdd {

namespace {

// Segmentation body: channel widths per 5x5 block, then 15x15 and 1x1.
const int kBlock1[] = {32, 32};
const int kBlock2[] = {64, 64, 64};
const int kBlock3[] = {64, 64, 64, 64};
constexpr int kFeatureChannels = 1024;
constexpr int kFeatureKernel = 15;
const int kDecisionChannels[] = {8, 16, 32};
constexpr int kDecisionKernel = 5;

ConvUnit make_unit(int in_c, int out_c, int k, bool norm, bool act,
                   std::mt19937_64& rng) {
    ConvUnit u;
    u.w = Tensor({out_c, in_c, k, k});
    std::normal_distribution<double> dist(0.0, kInitStddev);
    for (double& v : u.w.data) v = dist(rng);
    u.b.assign(static_cast<std::size_t>(out_c), 0.0);
    u.has_norm = norm;
    u.has_relu = act;
    if (norm) u.norm.resize(out_c);
    return u;
}

Tensor unit_forward(ConvUnit& u, const Tensor& x, Mode mode, ConvUnitCache* cache) {
    Tensor pre = conv2d(x, u.w, u.b);
    Tensor normed;
    NormCache ncache;
    if (u.has_norm)
        normed = feature_norm(pre, u.norm, mode, cache ? &ncache : nullptr,
                              mode == Mode::train);
    const Tensor& act_in = u.has_norm ? normed : pre;
    Tensor out = u.has_relu ? relu(act_in) : act_in;
    if (cache) {
        cache->input = x;
        cache->pre_norm = std::move(pre);
        cache->norm = std::move(ncache);
        cache->pre_relu = u.has_norm ? std::move(normed) : cache->pre_norm;
    }
    return out;
}

// Returns the gradient w.r.t. the unit input and accumulates parameter grads.
Tensor unit_backward(ConvUnit& u, const ConvUnitCache& cache, Tensor upstream,
                     bool need_d_input) {
    if (u.has_relu) upstream = relu_backward(cache.pre_relu, upstream);
    if (u.has_norm) {
        NormGrad ng = feature_norm_backward(cache.pre_norm, u.norm, cache.norm, upstream);
        for (std::size_t i = 0; i < ng.d_gamma.size(); ++i) {
            u.d_gamma[i] += ng.d_gamma[i];
            u.d_beta[i] += ng.d_beta[i];
        }
        upstream = std::move(ng.d_input);
    }
    ConvGrad cg = conv2d_backward(cache.input, u.w, upstream, need_d_input);
    if (u.dw.data.empty()) u.dw = Tensor(u.w.shape);
    for (std::size_t i = 0; i < cg.d_weights.data.size(); ++i)
        u.dw.data[i] += cg.d_weights.data[i];
    for (std::size_t i = 0; i < cg.d_bias.size(); ++i) u.db[i] += cg.d_bias[i];
    return need_d_input ? std::move(cg.d_input) : Tensor();
}

void unit_sgd(ConvUnit& u, double lr) {
    sgd_step(u.w.data, u.dw.data, lr);
    sgd_step(u.b, u.db, lr);
    if (u.has_norm) {
        sgd_step(u.norm.gamma, u.d_gamma, lr);
        sgd_step(u.norm.beta, u.d_beta, lr);
    }
    u.zero_grads();
}

void hash_bytes(std::uint64_t& h, const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;  // FNV-1a
    }
}

void hash_vec(std::uint64_t& h, const std::vector<double>& v) {
    hash_bytes(h, v.data(), v.size() * sizeof(double));
}

}  // namespace

void ConvUnit::zero_grads() {
    dw = Tensor(w.shape);
    db.assign(b.size(), 0.0);
    if (has_norm) {
        d_gamma.assign(norm.gamma.size(), 0.0);
        d_beta.assign(norm.beta.size(), 0.0);
    }
}

long long ConvUnit::parameter_count() const {
    long long n = w.size() + static_cast<long long>(b.size());
    if (has_norm) n += static_cast<long long>(norm.gamma.size() + norm.beta.size());
    return n;
}

SegmentationNet build_segmentation_net(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SegmentationNet net;
    int in_c = 1;
    for (int c : kBlock1) {
        net.layers.push_back(make_unit(in_c, c, 5, true, true, rng));
        in_c = c;
    }
    for (int c : kBlock2) {
        net.layers.push_back(make_unit(in_c, c, 5, true, true, rng));
        in_c = c;
    }
    for (int c : kBlock3) {
        net.layers.push_back(make_unit(in_c, c, 5, true, true, rng));
        in_c = c;
    }
    net.layers.push_back(make_unit(in_c, kFeatureChannels, kFeatureKernel, true, true, rng));
    // final 1x1 reduction: raw logit map, no normalization or ReLU
    net.layers.push_back(make_unit(kFeatureChannels, 1, 1, false, false, rng));
    net.pool_after = {1, 4, 8};
    for (auto& u : net.layers) u.zero_grads();
    return net;
}

DecisionNet build_decision_net(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    DecisionNet net;
    int in_c = kFeatureChannels + 1;
    for (int c : kDecisionChannels) {
        net.convs.push_back(make_unit(in_c, c, kDecisionKernel, true, true, rng));
        in_c = c;
    }
    std::normal_distribution<double> dist(0.0, kInitStddev);
    net.head_w.resize(kDecisionHeadInputs);
    for (double& v : net.head_w) v = dist(rng);
    net.head_b = 0.0;
    for (auto& u : net.convs) u.zero_grads();
    net.d_head_w.assign(net.head_w.size(), 0.0);
    net.d_head_b = 0.0;
    return net;
}

SegOutput seg_forward(SegmentationNet& net, const Tensor& image, Mode mode,
                      SegContext* ctx) {
    if (image.rank() != 3 || image.dim(0) != 1)
        throw std::invalid_argument("seg_forward: image must be 1 x H x W");
    if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0)
        throw std::invalid_argument("seg_forward: H and W must be divisible by 8, got " +
                                    shape_str(image.shape));
    if (ctx) {
        ctx->units.assign(net.layers.size(), {});
        ctx->pools.clear();
    }
    SegOutput out;
    Tensor x = image;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        x = unit_forward(net.layers[i], x, mode, ctx ? &ctx->units[i] : nullptr);
        if (std::find(net.pool_after.begin(), net.pool_after.end(),
                      static_cast<int>(i)) != net.pool_after.end()) {
            PoolResult p = maxpool2(x);
            x = p.out;
            if (ctx) ctx->pools.push_back(std::move(p));
        }
        if (i + 2 == net.layers.size()) out.features = x;
    }
    out.logits = std::move(x);
    return out;
}

void seg_backward(SegmentationNet& net, const SegContext& ctx,
                  const Tensor& d_features, const Tensor& d_logits) {
    const std::size_t n = net.layers.size();
    // final 1x1 layer
    Tensor up = unit_backward(net.layers[n - 1], ctx.units[n - 1], d_logits, true);
    if (!d_features.data.empty()) {
        for (std::size_t i = 0; i < up.data.size(); ++i)
            up.data[i] += d_features.data[i];
    }
    std::size_t pool_idx = ctx.pools.size();
    for (std::size_t ri = n - 1; ri-- > 0;) {
        if (std::find(net.pool_after.begin(), net.pool_after.end(),
                      static_cast<int>(ri)) != net.pool_after.end()) {
            --pool_idx;
            up = maxpool2_backward(ctx.pools[pool_idx], up);
        }
        up = unit_backward(net.layers[ri], ctx.units[ri], std::move(up), ri != 0);
    }
}

double dec_forward(DecisionNet& net, const Tensor& features, const Tensor& logits,
                   Mode mode, DecContext* ctx) {
    if (features.rank() != 3 || logits.rank() != 3 || logits.dim(0) != 1)
        throw std::invalid_argument("dec_forward: bad input ranks");
    if (features.dim(1) != logits.dim(1) || features.dim(2) != logits.dim(2))
        throw std::invalid_argument("dec_forward: features " + shape_str(features.shape) +
                                    " and seg map " + shape_str(logits.shape) +
                                    " spatial size mismatch");
    if (features.dim(1) % 8 != 0 || features.dim(2) % 8 != 0)
        throw std::invalid_argument(
            "dec_forward: map size must be divisible by 8 (input by 64), got " +
            shape_str(logits.shape));

    Tensor x({features.dim(0) + 1, features.dim(1), features.dim(2)});
    std::memcpy(x.data.data(), features.data.data(),
                features.data.size() * sizeof(double));
    std::memcpy(x.data.data() + features.data.size(), logits.data.data(),
                logits.data.size() * sizeof(double));

    if (ctx) {
        ctx->units.assign(net.convs.size(), {});
        ctx->pools.clear();
    }
    for (std::size_t i = 0; i < net.convs.size(); ++i) {
        PoolResult p = maxpool2(x);
        x = unit_forward(net.convs[i], p.out, mode, ctx ? &ctx->units[i] : nullptr);
        if (ctx) ctx->pools.push_back(std::move(p));
    }

    GlobalPool fp = global_pool(x);
    GlobalPool mp = global_pool(logits);
    std::vector<double> head;
    head.reserve(kDecisionHeadInputs);
    head.insert(head.end(), fp.max.begin(), fp.max.end());
    head.insert(head.end(), fp.avg.begin(), fp.avg.end());
    head.push_back(mp.max[0]);
    head.push_back(mp.avg[0]);

    const double z = linear(head, net.head_w, net.head_b);
    if (ctx) {
        ctx->feat_pool = std::move(fp);
        ctx->last_conv_shape = x.shape;
        ctx->map_pool = std::move(mp);
        ctx->head_input = std::move(head);
        ctx->pre_sigmoid = z;
    }
    return sigmoid(z);
}

void dec_backward(DecisionNet& net, const DecContext& ctx, double d_pre_sigmoid) {
    for (std::size_t i = 0; i < net.head_w.size(); ++i)
        net.d_head_w[i] += d_pre_sigmoid * ctx.head_input[i];
    net.d_head_b += d_pre_sigmoid;

    const int c_last = ctx.last_conv_shape[0];
    std::vector<double> d_max(static_cast<std::size_t>(c_last)),
        d_avg(static_cast<std::size_t>(c_last));
    for (int i = 0; i < c_last; ++i) {
        d_max[static_cast<std::size_t>(i)] = d_pre_sigmoid * net.head_w[static_cast<std::size_t>(i)];
        d_avg[static_cast<std::size_t>(i)] =
            d_pre_sigmoid * net.head_w[static_cast<std::size_t>(c_last + i)];
    }
    Tensor up = global_pool_backward(ctx.feat_pool, ctx.last_conv_shape, d_max, d_avg);
    for (std::size_t ri = net.convs.size(); ri-- > 0;) {
        up = unit_backward(net.convs[ri], ctx.units[ri], std::move(up), ri != 0);
        if (ri != 0) up = maxpool2_backward(ctx.pools[ri], up);
    }
    // gradients into the frozen segmentation outputs are intentionally dropped
}

long long count_parameters(const SegmentationNet& net) {
    long long n = 0;
    for (const auto& u : net.layers) n += u.parameter_count();
    return n;
}

long long count_parameters(const DecisionNet& net) {
    long long n = 0;
    for (const auto& u : net.convs) n += u.parameter_count();
    return n + static_cast<long long>(net.head_w.size()) + 1;
}

long long count_parameters(const SegmentationNet& seg, const DecisionNet& dec) {
    return count_parameters(seg) + count_parameters(dec);
}

int receptive_field(const std::vector<LayerSpec>& layers) {
    long long r = 1, j = 1;
    for (const auto& l : layers) {
        r += static_cast<long long>(l.kernel - 1) * j;
        j *= l.stride;
    }
    return static_cast<int>(r);
}

int receptive_field(const SegmentationNet& net) {
    std::vector<LayerSpec> specs;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        specs.push_back({net.layers[i].kernel(), 1});
        if (std::find(net.pool_after.begin(), net.pool_after.end(),
                      static_cast<int>(i)) != net.pool_after.end())
            specs.push_back({2, 2});
    }
    return receptive_field(specs);
}

void zero_grads(SegmentationNet& net) {
    for (auto& u : net.layers) u.zero_grads();
}

void zero_grads(DecisionNet& net) {
    for (auto& u : net.convs) u.zero_grads();
    net.d_head_w.assign(net.head_w.size(), 0.0);
    net.d_head_b = 0.0;
}

void sgd_update(SegmentationNet& net, double lr) {
    if (net.frozen) return;
    for (auto& u : net.layers) unit_sgd(u, lr);
}

void sgd_update(DecisionNet& net, double lr) {
    for (auto& u : net.convs) unit_sgd(u, lr);
    sgd_step(net.head_w, net.d_head_w, lr);
    std::vector<double> b{net.head_b}, db{net.d_head_b};
    sgd_step(b, db, lr);
    net.head_b = b[0];
    zero_grads(net);
}

std::uint64_t parameter_hash(const SegmentationNet& net) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& u : net.layers) {
        hash_vec(h, u.w.data);
        hash_vec(h, u.b);
        if (u.has_norm) {
            hash_vec(h, u.norm.gamma);
            hash_vec(h, u.norm.beta);
            hash_vec(h, u.norm.running_mean);
            hash_vec(h, u.norm.running_var);
            hash_bytes(h, &u.norm.updates, sizeof(u.norm.updates));
        }
    }
    return h;
}

long long mac_count(int height, int width) {
    long long total = 0;
    long long h = height, w = width;
    auto conv_macs = [&](long long in_c, long long out_c, long long k) {
        total += in_c * out_c * k * k * h * w;
    };
    long long in_c = 1;
    for (int c : kBlock1) { conv_macs(in_c, c, 5); in_c = c; }
    h /= 2; w /= 2;
    for (int c : kBlock2) { conv_macs(in_c, c, 5); in_c = c; }
    h /= 2; w /= 2;
    for (int c : kBlock3) { conv_macs(in_c, c, 5); in_c = c; }
    h /= 2; w /= 2;
    conv_macs(in_c, kFeatureChannels, kFeatureKernel);
    conv_macs(kFeatureChannels, 1, 1);
    in_c = kFeatureChannels + 1;
    for (int c : kDecisionChannels) {
        h /= 2; w /= 2;
        conv_macs(in_c, c, kDecisionKernel);
        in_c = c;
    }
    total += kDecisionHeadInputs;
    return total;
}

// ---- weight files ----

namespace {

constexpr char kMagic[4] = {'K', 'S', 'D', 'D'};

struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<double>* data;
};

// Serialization schema: the norm update counters and the scalar head bias
// travel as one-element f64 arrays, backed by scratch storage with links
// back to their in-struct homes.
struct WeightSchema {
    std::vector<NamedArray> arrays;
    std::deque<std::vector<double>> scratch;
    std::vector<std::pair<long long*, std::vector<double>*>> counters;
    double* head_b = nullptr;
    std::vector<double>* head_b_scratch = nullptr;
};

WeightSchema weight_schema(SegmentationNet& seg, DecisionNet& dec) {
    WeightSchema s;
    auto add_unit = [&s](const std::string& prefix, ConvUnit& u) {
        s.arrays.push_back({prefix + ".w", u.w.shape, &u.w.data});
        s.arrays.push_back({prefix + ".b", {static_cast<int>(u.b.size())}, &u.b});
        if (u.has_norm) {
            const int c = u.norm.channels();
            s.arrays.push_back({prefix + ".gamma", {c}, &u.norm.gamma});
            s.arrays.push_back({prefix + ".beta", {c}, &u.norm.beta});
            s.arrays.push_back({prefix + ".running_mean", {c}, &u.norm.running_mean});
            s.arrays.push_back({prefix + ".running_var", {c}, &u.norm.running_var});
            s.scratch.push_back({static_cast<double>(u.norm.updates)});
            s.arrays.push_back({prefix + ".norm_updates", {1}, &s.scratch.back()});
            s.counters.emplace_back(&u.norm.updates, &s.scratch.back());
        }
    };
    for (std::size_t i = 0; i < seg.layers.size(); ++i)
        add_unit("seg." + std::to_string(i), seg.layers[i]);
    for (std::size_t i = 0; i < dec.convs.size(); ++i)
        add_unit("dec." + std::to_string(i), dec.convs[i]);
    s.arrays.push_back({"dec.head.w", {static_cast<int>(dec.head_w.size())}, &dec.head_w});
    s.scratch.push_back({dec.head_b});
    s.arrays.push_back({"dec.head.b", {1}, &s.scratch.back()});
    s.head_b = &dec.head_b;
    s.head_b_scratch = &s.scratch.back();
    return s;
}

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw TruncatedFileError("weight file truncated");
}

}  // namespace

void save_weights(const std::string& path, const SegmentationNet& seg,
                  const DecisionNet& dec) {
    auto& seg_m = const_cast<SegmentationNet&>(seg);
    auto& dec_m = const_cast<DecisionNet&>(dec);
    WeightSchema schema = weight_schema(seg_m, dec_m);
    const auto& arrays = schema.arrays;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw WeightFileError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    write_raw(os, kWeightFileVersion);
    write_raw(os, static_cast<std::uint64_t>(arrays.size()));
    for (const auto& a : arrays) {
        write_raw(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        write_raw(os, static_cast<std::uint8_t>(0));  // dtype: f64 little-endian
        write_raw(os, static_cast<std::uint8_t>(a.shape.size()));
        for (int d : a.shape) write_raw(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(a.data->data()),
                 static_cast<std::streamsize>(a.data->size() * sizeof(double)));
    }
    if (!os) throw WeightFileError("write failed: " + path);
}

void load_weights(const std::string& path, SegmentationNet& seg, DecisionNet& dec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw WeightFileError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is) throw TruncatedFileError("weight file truncated: " + path);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw BadMagicError("bad magic in weight file: " + path);
    std::uint32_t version;
    read_raw(is, version);
    if (version != kWeightFileVersion)
        throw BadVersionError("unsupported weight file version " +
                              std::to_string(version));
    std::uint64_t n_arrays;
    read_raw(is, n_arrays);

    WeightSchema schema = weight_schema(seg, dec);
    auto& arrays = schema.arrays;
    if (n_arrays != arrays.size())
        throw WeightFileError("weight file tensor count mismatch");

    for (auto& a : arrays) {
        std::uint32_t name_len;
        read_raw(is, name_len);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw TruncatedFileError("weight file truncated in name");
        if (name != a.name)
            throw WeightFileError("unexpected tensor '" + name + "', wanted '" +
                                  a.name + "'");
        std::uint8_t dtype, rank;
        read_raw(is, dtype);
        if (dtype != 0) throw WeightFileError("unsupported dtype tag");
        read_raw(is, rank);
        std::vector<int> shape(rank);
        for (auto& d : shape) {
            std::uint32_t v;
            read_raw(is, v);
            d = static_cast<int>(v);
        }
        if (shape != a.shape)
            throw WeightFileError("shape mismatch for tensor '" + name + "'");
        is.read(reinterpret_cast<char*>(a.data->data()),
                static_cast<std::streamsize>(a.data->size() * sizeof(double)));
        if (static_cast<std::size_t>(is.gcount()) != a.data->size() * sizeof(double))
            throw TruncatedFileError("weight file truncated in tensor '" + name + "'");
    }
    for (auto& [counter, cell] : schema.counters)
        *counter = std::llround((*cell)[0]);
    dec.head_b = (*schema.head_b_scratch)[0];
}

}  // namespace ksdd
