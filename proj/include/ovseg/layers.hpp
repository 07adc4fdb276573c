#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ovseg/tensor.hpp"

namespace ovseg {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void add_param(NamedParams<T>& out, const std::string& prefix, const std::string& name,
               const Tensor<T>& t) {
    out.emplace_back(prefix + "." + name, t);
}

template <typename T>
struct Linear {
    Tensor<T> w;  // [in x out]
    Tensor<T> b;  // [out]

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false) {
        w = zero_init ? Tensor<T>::zeros({in, out}, true)
                      : Tensor<T>::he_uniform({in, out}, in, rng);
        b = Tensor<T>::zeros({out}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return add_rowvec(matmul(x, w), b); }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        add_param(out, prefix, "w", w);
        add_param(out, prefix, "b", b);
    }
};

// conv(stride) -> layer norm over channels -> SiLU; odd kernel, same padding
template <typename T>
struct ConvStage {
    Tensor<T> w, b, ln_g, ln_b;
    std::size_t stride = 1;
    std::size_t pad = 1;

    ConvStage() = default;
    ConvStage(std::size_t cin, std::size_t cout, std::size_t stride_, Rng& rng,
              std::size_t ksize = 3)
        : stride(stride_), pad(ksize / 2) {
        w = Tensor<T>::he_uniform({cout, cin, ksize, ksize}, cin * ksize * ksize, rng);
        b = Tensor<T>::zeros({cout}, true);
        ln_g = Tensor<T>::full({cout}, T(1));
        ln_g.set_requires_grad(true);
        ln_b = Tensor<T>::zeros({cout}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return silu(channel_layer_norm(conv2d(x, w, b, stride, pad), ln_g, ln_b));
    }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        add_param(out, prefix, "w", w);
        add_param(out, prefix, "b", b);
        add_param(out, prefix, "ln_g", ln_g);
        add_param(out, prefix, "ln_b", ln_b);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> g, b;

    LayerNormParams() = default;
    explicit LayerNormParams(std::size_t n) {
        g = Tensor<T>::full({n}, T(1));
        g.set_requires_grad(true);
        b = Tensor<T>::zeros({n}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, g, b); }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        add_param(out, prefix, "g", g);
        add_param(out, prefix, "b", b);
    }
};

// Multi-head scaled-dot-product cross attention:
//   softmax(Que(q) Key(kv)^T / sqrt(d_head)) Val(kv), heads concatenated,
//   then an output projection (optionally zero-initialized so the block
//   starts as the zero map).
template <typename T>
struct CrossAttention {
    Linear<T> que, key, val, out;
    std::size_t heads = 4;

    CrossAttention() = default;
    CrossAttention(std::size_t d, std::size_t heads_, Rng& rng, bool zero_init_out)
        : que(d, d, rng), key(d, d, rng), val(d, d, rng),
          out(d, d, rng, zero_init_out), heads(heads_) {
        if (heads == 0 || d % heads != 0)
            throw ConfigError("attention: width " + std::to_string(d) +
                              " not divisible by head count " + std::to_string(heads));
    }

    Tensor<T> forward(const Tensor<T>& q_in, const Tensor<T>& kv_in) const {
        const std::size_t d = que.w.shape()[0];
        if (q_in.shape()[1] != d || kv_in.shape()[1] != d)
            throw ShapeError("attention: width mismatch " + shape_str(q_in.shape()) +
                             " / " + shape_str(kv_in.shape()));
        const std::size_t dh = d / heads;
        Tensor<T> q = que.forward(q_in);
        Tensor<T> k = key.forward(kv_in);
        Tensor<T> v = val.forward(kv_in);
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
            Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
            Tensor<T> att = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1);
            head_outs.push_back(matmul(att, vh));
        }
        return out.forward(concat_cols(head_outs));
    }

    void collect(const std::string& prefix, NamedParams<T>& out_params) const {
        que.collect(prefix + ".que", out_params);
        key.collect(prefix + ".key", out_params);
        val.collect(prefix + ".val", out_params);
        out.collect(prefix + ".out", out_params);
    }
};

// Copy parameter values from one collected set onto another (shape-checked),
// optionally freezing the destination. Both sets must enumerate in the same
// order, which module `collect` methods guarantee.
template <typename T>
void copy_params(const NamedParams<T>& src, NamedParams<T>& dst, bool freeze_dst) {
    if (src.size() != dst.size())
        throw ShapeError("copy_params: parameter count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].second.shape() != dst[i].second.shape())
            throw ShapeError("copy_params: shape mismatch at " + src[i].first);
        dst[i].second.mutable_data() = src[i].second.data();
        if (freeze_dst) dst[i].second.set_requires_grad(false);
    }
}

}  // namespace ovseg
