#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ovseg/layers.hpp"
#include "ovseg/synth_data.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

struct BackboneConfig {
    // channel plan per stage; the last entry is the shared embedding width d
    std::array<std::size_t, 4> widths = {16, 32, 64, 64};

    std::size_t d() const { return widths[3]; }
};

template <typename T>
struct FeaturePyramid {
    Tensor<T> f0, f1, f2, f3;  // strides 4, 8, 16, 32
    std::size_t src_h = 0, src_w = 0;

    FeaturePyramid detached() const {
        return {f0.detach(), f1.detach(), f2.detach(), f3.detach(), src_h, src_w};
    }
};

// Four stride-2 stages (a stem conv inside S0 brings the total to stride 4).
template <typename T>
struct VisionBackbone {
    BackboneConfig cfg;
    ConvStage<T> stem, s0, s1, s2, s3;
    std::array<bool, 4> frozen = {false, false, false, false};

    VisionBackbone() = default;
    VisionBackbone(const BackboneConfig& cfg_, Rng& rng)
        : cfg(cfg_),
          stem(3, cfg_.widths[0], 2, rng),
          s0(cfg_.widths[0], cfg_.widths[0], 2, rng),
          s1(cfg_.widths[0], cfg_.widths[1], 2, rng),
          s2(cfg_.widths[1], cfg_.widths[2], 2, rng),
          s3(cfg_.widths[2], cfg_.widths[3], 2, rng) {}

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        stem.collect(prefix + ".stem", out);
        s0.collect(prefix + ".s0", out);
        s1.collect(prefix + ".s1", out);
        s2.collect(prefix + ".s2", out);
        s3.collect(prefix + ".s3", out);
    }

    // stage -> its parameters, for per-stage freezing
    void collect_stage(std::size_t stage, NamedParams<T>& out) const {
        switch (stage) {
            case 0:
                stem.collect("stage0.stem", out);
                s0.collect("stage0.s0", out);
                break;
            case 1: s1.collect("stage1", out); break;
            case 2: s2.collect("stage2", out); break;
            case 3: s3.collect("stage3", out); break;
            default: throw ConfigError("backbone: no stage " + std::to_string(stage));
        }
    }

    void apply_freeze_flags() {
        for (std::size_t stage = 0; stage < 4; ++stage) {
            if (!frozen[stage]) continue;
            NamedParams<T> params;
            collect_stage(stage, params);
            for (auto& [name, t] : params) t.set_requires_grad(false);
        }
    }
};

template <typename T>
FeaturePyramid<T> vision_encode(const VisionBackbone<T>& backbone, const Tensor<T>& image) {
    if (image.ndim() != 3 || image.shape()[0] != 3)
        throw ShapeError("vision_encode: expected 3xHxW image, got " +
                         shape_str(image.shape()));
    const std::size_t h = image.shape()[1], w = image.shape()[2];
    if (h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0)
        throw ShapeError("vision_encode: extents " + std::to_string(h) + "x" +
                         std::to_string(w) + " must be multiples of 32");
    FeaturePyramid<T> pyr;
    pyr.src_h = h;
    pyr.src_w = w;
    pyr.f0 = backbone.s0.forward(backbone.stem.forward(image));
    pyr.f1 = backbone.s1.forward(pyr.f0);
    pyr.f2 = backbone.s2.forward(pyr.f1);
    pyr.f3 = backbone.s3.forward(pyr.f2);
    return pyr;
}

// Immutable snapshot: deep-copied parameters, all stages frozen.
template <typename T>
VisionBackbone<T> freeze_copy(const VisionBackbone<T>& backbone) {
    Rng dummy(0);
    VisionBackbone<T> copy(backbone.cfg, dummy);
    NamedParams<T> src, dst;
    backbone.collect("v", src);
    copy.collect("v", dst);
    copy_params(src, dst, /*freeze_dst=*/true);
    copy.frozen = {true, true, true, true};
    return copy;
}

struct PromptTemplateSet {
    std::vector<std::string> templates;  // each contains exactly one "{}"
};

PromptTemplateSet default_templates();
std::string fill_template(const std::string& tmpl, const std::string& name);

// Bag-of-tokens sentence encoder: mean token embedding -> linear -> unit norm.
template <typename T>
struct TextEncoder {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, std::size_t> token_ids;
    Tensor<T> embeddings;  // [V x d]
    Linear<T> pool;
    bool frozen = false;

    TextEncoder() = default;
    TextEncoder(const std::vector<std::string>& class_names, const PromptTemplateSet& tmpl,
                std::size_t d, Rng& rng);

    std::vector<std::size_t> tokenize(const std::string& sentence) const;
    Tensor<T> encode_sentence(const std::string& sentence) const;  // [1 x d], unit norm

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        add_param(out, prefix, "embeddings", embeddings);
        pool.collect(prefix + ".pool", out);
    }
};

template <typename T>
struct TextEmbeddingTable {
    std::vector<std::string> names;
    Tensor<T> t;      // [|C| x d], rows unit norm
    Tensor<T> t_hat;  // conditioned embeddings; starts equal to t
};

// Per class: mean over all templates' sentence embeddings, re-normalized.
template <typename T>
TextEmbeddingTable<T> text_encode(const TextEncoder<T>& encoder,
                                  const std::vector<std::string>& classes,
                                  const PromptTemplateSet& templates) {
    if (classes.empty()) throw ConfigError("text_encode: no classes");
    if (templates.templates.empty()) throw ConfigError("text_encode: no templates");
    std::vector<Tensor<T>> rows;
    rows.reserve(classes.size());
    for (const auto& cls : classes) {
        Tensor<T> acc;
        for (const auto& tmpl : templates.templates) {
            Tensor<T> e = encoder.encode_sentence(fill_template(tmpl, cls));
            acc = acc.defined() ? add(acc, e) : e;
        }
        rows.push_back(mul_scalar(acc, T(1) / static_cast<T>(templates.templates.size())));
    }
    TextEmbeddingTable<T> table;
    table.names = classes;
    table.t = normalize_rows(concat_rows(rows));
    table.t_hat = table.t;
    return table;
}

// Symmetric InfoNCE over matched (image, text) rows; both inputs unit-norm.
template <typename T>
Tensor<T> info_nce_loss(const Tensor<T>& img, const Tensor<T>& txt, T tau) {
    if (img.shape() != txt.shape() || img.ndim() != 2)
        throw ShapeError("info_nce: want matching [B x d] embeddings");
    if (img.shape()[0] < 2) throw ConfigError("info_nce: need at least 2 pairs");
    Tensor<T> logits = mul_scalar(matmul(img, transpose(txt)), T(1) / tau);
    std::vector<std::size_t> labels(img.shape()[0]);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i;
    Tensor<T> a = cross_entropy_rows(logits, labels);
    Tensor<T> b = cross_entropy_rows(transpose(logits), labels);
    return mul_scalar(add(a, b), T(0.5));
}

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    float lr = 1e-3f;
    float weight_decay = 1e-2f;
    float tau = 0.07f;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    float final_loss = 0.f;
    double retrieval_accuracy = 0.0;
    std::size_t steps_run = 0;
};

template <typename T = float>
Tensor<T> image_tensor(const SegmentationSample& s, bool requires_grad = false) {
    std::vector<T> v(s.image.begin(), s.image.end());
    return Tensor<T>::from({3, s.height, s.width}, v, requires_grad);
}

// Image-level contrastive pretraining of the toy CLIP pair on
// single-dominant-class samples. Trains backbone + text encoder in place.
PretrainReport pretrain_contrastive(VisionBackbone<float>& backbone,
                                    TextEncoder<float>& text, const Vocabulary& vocab,
                                    const PromptTemplateSet& templates,
                                    const std::vector<SegmentationSample>& train_set,
                                    const std::vector<SegmentationSample>& heldout,
                                    const PretrainConfig& cfg);

// Top-1 image->text retrieval over the given classes (no training).
double retrieval_accuracy(const VisionBackbone<float>& backbone,
                          const TextEncoder<float>& text, const Vocabulary& vocab,
                          const PromptTemplateSet& templates,
                          const std::vector<SegmentationSample>& heldout);

}  // namespace ovseg
