// Core fine-tuning objective: representation-compensation loss, mask pooling,
// content-dependent text transfer, score matrices, and the combined loss.
#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "ovseg/errors.hpp"
#include "ovseg/layers.hpp"
#include "ovseg/proposals.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

struct RCConfig {
    std::vector<std::size_t> grids = {1, 2, 4};
    double lambda2 = 0.1;

    void validate() const {
        if (grids.empty()) throw ConfigError("rc: grid set must be nonempty");
        for (std::size_t i = 0; i < grids.size(); ++i) {
            if (grids[i] == 0) throw ConfigError("rc: grid sizes must be positive");
            if (i > 0 && grids[i] <= grids[i - 1])
                throw ConfigError("rc: grid sizes must be strictly increasing");
        }
    }
};

// Penalizes drift of the fine-tuned features from the frozen reference at
// several spatial granularities.  Constant offsets are visible to every grid;
// cell-mean-preserving rearrangements are visible only to finer grids.
template <typename T>
Tensor<T> rc_loss(const Tensor<T>& f3, const Tensor<T>& f3_frozen, const RCConfig& cfg) {
    cfg.validate();
    if (f3.ndim() != 3) throw ShapeError("rc_loss: features must be CxHxW");
    if (f3.shape() != f3_frozen.shape())
        throw ShapeError("rc_loss: feature shapes differ");
    Tensor<T> acc;
    for (std::size_t k : cfg.grids) {
        // grids finer than the map saturate at per-cell comparison
        const std::size_t kk = std::min({k, f3.extent(1), f3.extent(2)});
        auto term = smooth_l1(avg_pool_grid(f3, kk), avg_pool_grid(f3_frozen, kk));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return mul_scalar(acc, T(1) / static_cast<T>(cfg.grids.size()));
}

// Soft-mask pooling of pyramid features into one embedding per proposal.
template <typename T>
Tensor<T> mask_pooling(const Tensor<T>& f3, const MaskProposalSet<T>& m) {
    if (f3.ndim() != 3) throw ShapeError("mask_pooling: features must be CxHxW");
    auto resized = bilinear_resize(m.mask_logits, f3.extent(1), f3.extent(2));
    return normalize_rows(masked_mean_pool(f3, resized));
}

// Residual cross-attention stack that adapts text embeddings to image content.
// Queries are the text rows; keys/values are flattened vision features.
// Output projections start at zero, so the stack is the identity map at init.
template <typename T>
struct CDTStack {
    struct Layer {
        LayerNormParams<T> ln;
        CrossAttention<T> attn;
    };
    std::size_t width = 0;
    std::vector<Layer> layers;

    CDTStack() = default;
    CDTStack(std::size_t d, std::size_t n_layers, std::size_t heads, Rng& rng) : width(d) {
        layers.reserve(n_layers);
        for (std::size_t i = 0; i < n_layers; ++i)
            layers.push_back({LayerNormParams<T>(d), CrossAttention<T>(d, heads, rng, true)});
    }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = prefix + ".layer" + std::to_string(i);
            layers[i].ln.collect(p + ".ln", out);
            layers[i].attn.collect(p + ".attn", out);
        }
    }
};

template <typename T>
Tensor<T> cdt_forward(CDTStack<T>& stack, const Tensor<T>& t, const Tensor<T>& f3) {
    if (f3.ndim() != 3 || f3.extent(0) != stack.width || t.ndim() != 2 ||
        t.extent(1) != stack.width)
        throw ShapeError("cdt_forward: width mismatch");
    const std::size_t hw = f3.extent(1) * f3.extent(2);
    auto tokens = transpose(reshape(f3, {stack.width, hw}));
    Tensor<T> cur = t;
    for (auto& layer : stack.layers)
        cur = add(cur, layer.attn.forward(layer_norm(cur, layer.ln.g, layer.ln.b), tokens));
    return normalize_rows(cur);
}

enum class ScoreKind { kClassification, kIouTarget };

template <typename T>
struct ScoreMatrix {
    Tensor<T> s;  // N x |C|
    ScoreKind kind = ScoreKind::kClassification;

    std::size_t proposals() const { return s.extent(0); }
    std::size_t classes() const { return s.extent(1); }
};

// Per-proposal class distribution from cosine similarity at temperature tau.
template <typename T>
ScoreMatrix<T> classification_scores(const Tensor<T>& v, const Tensor<T>& t_hat, T tau) {
    if (tau <= T(0)) throw ConfigError("classification_scores: temperature must be positive");
    if (v.ndim() != 2 || t_hat.ndim() != 2 || v.extent(1) != t_hat.extent(1))
        throw ShapeError("classification_scores: embedding widths differ");
    auto logits = mul_scalar(matmul(v, transpose(t_hat)), T(1) / tau);
    return {softmax(logits, 1), ScoreKind::kClassification};
}

// Gradient-free regression targets: IoU of each binarized proposal against
// each class.  Semantic mode scores against the union of the class's pixels;
// panoptic mode scores against the best-matching single segment.
template <typename T>
ScoreMatrix<T> iou_targets(const MaskProposalSet<T>& m, const SegmentationSample& gt,
                           std::size_t num_classes, bool panoptic);

template <typename T>
Tensor<T> mask_aware_loss(const ScoreMatrix<T>& s_cls, const ScoreMatrix<T>& s_iou) {
    if (s_cls.s.shape() != s_iou.s.shape())
        throw ShapeError("mask_aware_loss: score shapes differ");
    return smooth_l1(s_cls.s, s_iou.s);
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_p, const Tensor<T>& l_ma, const Tensor<T>& l_rc,
                     T lambda1 = T(1), T lambda2 = T(0.1)) {
    return add(l_p, add(mul_scalar(l_ma, lambda1), mul_scalar(l_rc, lambda2)));
}

}  // namespace ovseg
