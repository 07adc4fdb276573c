#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ovseg/backbones.hpp"
#include "ovseg/layers.hpp"
#include "ovseg/synth_data.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

// One ground-truth segment: a binary mask plus its class. Things come from
// instance ids; the background stuff region is one segment of its own.
struct GtSegment {
    std::size_t class_id = 0;
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> mask;  // 1 inside, 0 outside; ignore pixels are 0

    std::size_t area() const;
};

std::vector<GtSegment> segments_of(const SegmentationSample& sample);

struct ProposalConfig {
    std::size_t n = 16;       // proposal slots; desk-scale default
    std::size_t layers = 2;   // cross-attention blocks against F3
    std::size_t heads = 4;
    std::size_t ffn_mult = 2;
};

template <typename T>
struct MaskProposalSet {
    Tensor<T> mask_logits;  // [N x H x W]
    Tensor<T> queries;      // [N x d]

    std::size_t n() const { return mask_logits.shape()[0]; }
};

// Query-based mask head: N learned queries attend to flattened F3 tokens,
// then dot against a pixel embedding map decoded at stride 4.
template <typename T>
struct ProposalHead {
    ProposalConfig cfg;
    Tensor<T> query_init;  // [N x d]
    std::vector<LayerNormParams<T>> ln_attn, ln_ffn;
    std::vector<CrossAttention<T>> attn;
    std::vector<Linear<T>> ffn_in, ffn_out;
    LayerNormParams<T> ln_final;
    Linear<T> mask_embed;
    // pixel decoder: 1x1 laterals onto each pyramid level + 3x3 fusion
    Tensor<T> lat_w[4], lat_b[4];
    ConvStage<T> fuse;

    ProposalHead() = default;
    ProposalHead(const ProposalConfig& cfg_, const BackboneConfig& bb, Rng& rng)
        : cfg(cfg_) {
        const std::size_t d = bb.d();
        query_init = Tensor<T>::he_uniform({cfg.n, d}, d, rng);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            ln_attn.emplace_back(d);
            ln_ffn.emplace_back(d);
            attn.emplace_back(d, cfg.heads, rng, /*zero_init_out=*/false);
            ffn_in.emplace_back(d, cfg.ffn_mult * d, rng);
            ffn_out.emplace_back(cfg.ffn_mult * d, d, rng);
        }
        ln_final = LayerNormParams<T>(d);
        mask_embed = Linear<T>(d, d, rng);
        for (std::size_t s = 0; s < 4; ++s) {
            lat_w[s] = Tensor<T>::he_uniform({d, bb.widths[s], 1, 1}, bb.widths[s], rng);
            lat_b[s] = Tensor<T>::zeros({d}, true);
        }
        fuse = ConvStage<T>(d, d, 1, rng, /*ksize=*/1);  // 1x1: runs at the finest level
    }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        add_param(out, prefix, "query_init", query_init);
        for (std::size_t l = 0; l < attn.size(); ++l) {
            const std::string lp = prefix + ".layer" + std::to_string(l);
            ln_attn[l].collect(lp + ".ln_attn", out);
            attn[l].collect(lp + ".attn", out);
            ln_ffn[l].collect(lp + ".ln_ffn", out);
            ffn_in[l].collect(lp + ".ffn_in", out);
            ffn_out[l].collect(lp + ".ffn_out", out);
        }
        ln_final.collect(prefix + ".ln_final", out);
        mask_embed.collect(prefix + ".mask_embed", out);
        for (std::size_t s = 0; s < 4; ++s) {
            add_param(out, prefix, "lat" + std::to_string(s) + ".w", lat_w[s]);
            add_param(out, prefix, "lat" + std::to_string(s) + ".b", lat_b[s]);
        }
        fuse.collect(prefix + ".fuse", out);
    }
};

// Proposals from a feature pyramid. The pyramid is detached on entry, so no
// gradient from any proposal-side loss can reach the vision backbone.
template <typename T>
MaskProposalSet<T> generate_proposals(const ProposalHead<T>& head,
                                      const FeaturePyramid<T>& pyramid) {
    const FeaturePyramid<T> pyr = pyramid.detached();
    const std::size_t d = pyr.f3.shape()[0];
    const std::size_t hw3 = pyr.f3.shape()[1] * pyr.f3.shape()[2];
    Tensor<T> tokens = transpose(reshape(pyr.f3, {d, hw3}));  // [hw x d]

    Tensor<T> q = head.query_init;
    for (std::size_t l = 0; l < head.attn.size(); ++l) {
        q = add(q, head.attn[l].forward(head.ln_attn[l].forward(q), tokens));
        Tensor<T> h = silu(head.ffn_in[l].forward(head.ln_ffn[l].forward(q)));
        q = add(q, head.ffn_out[l].forward(h));
    }
    Tensor<T> queries = head.ln_final.forward(q);

    const Tensor<T>* levels[4] = {&pyr.f0, &pyr.f1, &pyr.f2, &pyr.f3};
    Tensor<T> pix;
    for (int s = 3; s >= 0; --s) {
        Tensor<T> lat = conv2d(*levels[s], head.lat_w[s], head.lat_b[s], 1, 0);
        pix = s == 3 ? lat
                     : add(lat, bilinear_resize(pix, lat.shape()[1], lat.shape()[2]));
    }
    pix = head.fuse.forward(pix);  // [d x H/4 x W/4]

    const std::size_t h4 = pix.shape()[1], w4 = pix.shape()[2];
    Tensor<T> embed = head.mask_embed.forward(queries);  // [N x d]
    Tensor<T> logits4 = reshape(matmul(embed, reshape(pix, {d, h4 * w4})),
                                {head.cfg.n, h4, w4});
    MaskProposalSet<T> out;
    out.mask_logits = bilinear_resize(logits4, pyr.src_h, pyr.src_w);
    out.queries = queries;
    return out;
}

struct Assignment {
    std::vector<std::size_t> proposal_of_gt;  // index i holds the proposal for gt i
    double total_cost = 0.0;
};

// Exact minimum-cost injective assignment of G rows onto N >= G columns
// (shortest augmenting path with potentials).
Assignment hungarian_match(const std::vector<double>& cost, std::size_t g, std::size_t n);

struct ProposalLossWeights {
    double bce = 1.0;
    double dice = 1.0;
};

namespace detail {

// Value-only bce + dice between one logit row and a binary mask; used to fill
// the matching cost matrix without touching the tape.
template <typename T>
double mask_pair_cost(const T* logits, const std::uint8_t* mask, std::size_t count,
                      const ProposalLossWeights& w) {
    double bce = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t p = 0; p < count; ++p) {
        const double x = logits[p];
        const double t = mask[p] ? 1.0 : 0.0;
        bce += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
        const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        inter += s * t;
        psum += s;
        tsum += t;
    }
    bce /= static_cast<double>(count);
    const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
    return w.bce * bce + w.dice * dice;
}

}  // namespace detail

// Bipartite-matched mask loss: Hungarian on the (bce + dice) cost matrix,
// then the mean of the same weighted terms over matched pairs only.
// Empty ground truth yields a zero loss; G > N is an error.
template <typename T>
Tensor<T> proposal_loss(const MaskProposalSet<T>& props, const std::vector<GtSegment>& gt,
                        const ProposalLossWeights& w = {}) {
    if (gt.empty()) return Tensor<T>::scalar(T(0));
    const std::size_t n = props.n();
    const std::size_t g = gt.size();
    if (g > n)
        throw ShapeError("proposal_loss: " + std::to_string(g) +
                         " ground-truth segments exceed " + std::to_string(n) + " proposals");
    const std::size_t h = props.mask_logits.shape()[1], wd = props.mask_logits.shape()[2];
    const std::size_t hw = h * wd;
    for (const auto& seg : gt)
        if (seg.height != h || seg.width != wd)
            throw ShapeError("proposal_loss: segment extent mismatch");

    std::vector<double> cost(g * n);
    for (std::size_t gi = 0; gi < g; ++gi)
        for (std::size_t pi = 0; pi < n; ++pi)
            cost[gi * n + pi] = detail::mask_pair_cost(
                props.mask_logits.data().data() + pi * hw, gt[gi].mask.data(), hw, w);
    const Assignment match = hungarian_match(cost, g, n);

    Tensor<T> flat = reshape(props.mask_logits, {n, hw});
    Tensor<T> loss;
    for (std::size_t gi = 0; gi < g; ++gi) {
        const std::size_t pi = match.proposal_of_gt[gi];
        std::vector<T> tvals(hw);
        double tsum = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
            tvals[p] = gt[gi].mask[p] ? T(1) : T(0);
            tsum += tvals[p];
        }
        Tensor<T> target = Tensor<T>::from({1, hw}, std::move(tvals));
        Tensor<T> row = gather_rows(flat, {pi});
        Tensor<T> bce = bce_with_logits(row, target);
        Tensor<T> prob = sigmoid(row);
        Tensor<T> num = add_scalar(mul_scalar(dot(prob, target), T(2)), T(1));
        Tensor<T> den = add_scalar(sum_all(prob), T(1) + static_cast<T>(tsum));
        Tensor<T> dice = add_scalar(mul_scalar(div(num, den), T(-1)), T(1));
        Tensor<T> term = add(mul_scalar(bce, static_cast<T>(w.bce)),
                             mul_scalar(dice, static_cast<T>(w.dice)));
        loss = loss.defined() ? add(loss, term) : term;
    }
    return mul_scalar(loss, T(1) / static_cast<T>(g));
}

}  // namespace ovseg
