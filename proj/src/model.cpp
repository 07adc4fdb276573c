#include "ovseg/model.hpp"

#include <algorithm>

#include "ovseg/errors.hpp"

namespace ovseg {

namespace {

std::vector<std::string> names_for(const Vocabulary& vocab,
                                   const std::vector<std::size_t>& ids) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(vocab.names.at(id));
    return out;
}

Tensor<float> snapshot(const Tensor<float>& t) { return t.detach(); }

}  // namespace

Model::Model(const RunConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    vocab_ = default_vocabulary();
    split_vocabulary(vocab_, cfg_.novel_count, cfg_.seed);

    const BackboneConfig bb = cfg_.backbone_config();
    Rng rng_b(Rng::derive(cfg_.seed, seed_tag::kBackbone));
    backbone_ = VisionBackbone<float>(bb, rng_b);
    Rng rng_t(Rng::derive(cfg_.seed, seed_tag::kText));
    text_ = TextEncoder<float>(vocab_.names, default_templates(), bb.d(), rng_t);
    Rng rng_h(Rng::derive(cfg_.seed, seed_tag::kHead));
    head_ = ProposalHead<float>(cfg_.proposal_config(), bb, rng_h);
    Rng rng_c(Rng::derive(cfg_.seed, seed_tag::kCdt));
    cdt_ = CDTStack<float>(bb.d(), cfg_.cdt_layers, cfg_.cdt_heads, rng_c);

    frozen_ = freeze_copy(backbone_);
    apply_freeze_flags();
    rebuild_tables();
}

void Model::apply_freeze_flags() {
    // the text encoder only trains during contrastive pretraining
    NamedParams<float> tp;
    text_.collect("text", tp);
    for (auto& [name, t] : tp) t.set_requires_grad(false);

    if (cfg_.freeze_backbone) {
        backbone_.frozen = {true, true, true, true};
    } else {
        backbone_.frozen = {false, false, false, false};
        for (auto s : cfg_.frozen_stages) backbone_.frozen[s] = true;
    }
    backbone_.apply_freeze_flags();

    if (!cfg_.use_cdt) {
        NamedParams<float> cp;
        cdt_.collect("cdt", cp);
        for (auto& [name, t] : cp) t.set_requires_grad(false);
    }
}

void Model::rebuild_tables() {
    const PromptTemplateSet templates = default_templates();
    t_train_ = text_encode(text_, names_for(vocab_, vocab_.train_ids), templates).t.detach();
    t_full_ = text_encode(text_, names_for(vocab_, vocab_.test_ids), templates).t.detach();
}

void Model::load_pretrained(const Checkpoint& ckpt) {
    NamedParams<float> live;
    backbone_.collect("backbone", live);
    text_.collect("text", live);
    for (auto& [name, t] : live) {
        const Tensor<float>* src = ckpt.find(name);
        if (!src) throw ShapeError("checkpoint is missing tensor " + name);
        if (src->shape() != t.shape())
            throw ShapeError("checkpoint tensor " + name + " has shape " +
                             shape_str(src->shape()) + ", model expects " +
                             shape_str(t.shape()));
        t.mutable_data() = src->data();
    }
    frozen_ = freeze_copy(backbone_);
    apply_freeze_flags();
    rebuild_tables();
}

NamedParams<float> Model::trainable_params() const {
    NamedParams<float> all, out;
    backbone_.collect("backbone", all);
    head_.collect("head", all);
    cdt_.collect("cdt", all);
    text_.collect("text", all);
    for (auto& [name, t] : all)
        if (t.requires_grad()) out.emplace_back(name, t);
    return out;
}

NamedParams<float> Model::all_params() const {
    NamedParams<float> all;
    backbone_.collect("backbone", all);
    text_.collect("text", all);
    head_.collect("head", all);
    cdt_.collect("cdt", all);
    frozen_.collect("frozen", all);
    return all;
}

void Model::configure_optimizer(AdamW<float>& opt) {
    apply_freeze_flags();
    const NamedParams<float> trainable = trainable_params();
    std::size_t registered = 0;
    for (auto& [name, t] : trainable) {  // vision-encoder group first
        if (name.rfind("backbone.", 0) == 0) {
            opt.add_param(name, t, static_cast<float>(cfg_.lr_backbone));
            ++registered;
        }
    }
    for (auto& [name, t] : trainable) {
        if (name.rfind("backbone.", 0) == 0) continue;
        if (name.rfind("head.", 0) == 0 || name.rfind("cdt.", 0) == 0) {
            opt.add_param(name, t, static_cast<float>(cfg_.lr_other));
            ++registered;
        } else {
            throw Error("parameter " + name + " belongs to no learning-rate group");
        }
    }
    if (registered != trainable.size())
        throw Error("learning-rate groups do not partition the trainable parameters");
}

ScoreMatrix<float> train_iou_targets(const MaskProposalSet<float>& props,
                                     const SegmentationSample& gt,
                                     const Vocabulary& vocab, bool panoptic) {
    const ScoreMatrix<float> full = iou_targets(props, gt, vocab.size(), panoptic);
    const std::size_t n = full.proposals();
    const std::size_t k = vocab.train_ids.size();
    std::vector<float> vals(n * k);
    const auto& src = full.s.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
            vals[i * k + j] = src[i * vocab.size() + vocab.train_ids[j]];
    ScoreMatrix<float> out;
    out.s = Tensor<float>::from({n, k}, vals, false);
    out.kind = ScoreKind::kIouTarget;
    return out;
}

StepLosses Model::forward_train(const SegmentationSample& sample) {
    const Tensor<float> img = image_tensor<float>(sample);
    const FeaturePyramid<float> pyr = vision_encode(backbone_, img);
    const MaskProposalSet<float> props = generate_proposals(head_, pyr);

    StepLosses out;
    out.l_p = proposal_loss(props, segments_of(sample));

    Tensor<float> t_hat =
        cfg_.use_cdt ? cdt_forward(cdt_, t_train_, pyr.f3) : t_train_;
    const Tensor<float> v = mask_pooling(pyr.f3, props);
    const ScoreMatrix<float> s_cls =
        classification_scores(v, t_hat, static_cast<float>(cfg_.tau));
    const ScoreMatrix<float> s_iou =
        train_iou_targets(props, sample, vocab_, cfg_.panoptic_mode);
    out.l_ma = mask_aware_loss(s_cls, s_iou);

    if (cfg_.use_rc) {
        const FeaturePyramid<float> ref = vision_encode(frozen_, img);
        out.l_rc = rc_loss(pyr.f3, ref.f3, cfg_.rc_config());
    } else {
        out.l_rc = Tensor<float>::scalar(0.f);
    }
    out.total = total_loss(out.l_p, out.l_ma, out.l_rc,
                           static_cast<float>(cfg_.lambda1),
                           static_cast<float>(cfg_.lambda2));
    return out;
}

EvalOutput Model::forward_eval(const SegmentationSample& sample) {
    const Tensor<float> img = image_tensor<float>(sample);
    const FeaturePyramid<float> pyr = vision_encode(backbone_, img);
    const MaskProposalSet<float> props = generate_proposals(head_, pyr);

    Tensor<float> t_hat =
        cfg_.use_cdt ? cdt_forward(cdt_, t_full_, pyr.f3) : t_full_;
    const Tensor<float> v = mask_pooling(pyr.f3, props);
    const ScoreMatrix<float> s_cls =
        classification_scores(v, t_hat, static_cast<float>(cfg_.tau));

    EvalOutput out;
    out.semantic = semantic_inference(s_cls, props.mask_logits);
    if (cfg_.panoptic_mode)
        out.panoptic = panoptic_inference(s_cls, props.mask_logits);
    return out;
}

Tensor<float> Model::conditioned_table(const SegmentationSample& sample) {
    if (!cfg_.use_cdt) return t_full_;
    const Tensor<float> img = image_tensor<float>(sample);
    const FeaturePyramid<float> pyr = vision_encode(backbone_, img);
    return cdt_forward(cdt_, t_full_, pyr.f3).detach();
}

Tensor<float> Model::backbone_f3(const SegmentationSample& sample, bool frozen_copy) {
    const Tensor<float> img = image_tensor<float>(sample);
    return vision_encode(frozen_copy ? frozen_ : backbone_, img).f3.detach();
}

Checkpoint Model::checkpoint_state(const AdamW<float>* opt) const {
    Checkpoint ckpt;
    for (const auto& [name, t] : all_params()) ckpt.add(name, snapshot(t));

    std::vector<float> stages(4, 0.f);
    for (std::size_t s = 0; s < 4; ++s) stages[s] = backbone_.frozen[s] ? 1.f : 0.f;
    ckpt.add("meta.frozen_stages", Tensor<float>::from({4}, stages, false));

    if (opt) {
        for (const auto& slot : opt->slots()) {
            ckpt.add("opt.m." + slot.name,
                     Tensor<float>::from({slot.m.size()}, slot.m, false));
            ckpt.add("opt.v." + slot.name,
                     Tensor<float>::from({slot.v.size()}, slot.v, false));
        }
        ckpt.add("opt.step",
                 Tensor<float>::from({1}, {static_cast<float>(opt->step_count())}, false));
    }
    ckpt.config_text = canonical_text(cfg_);
    return ckpt;
}

void Model::restore(const Checkpoint& ckpt, AdamW<float>* opt) {
    for (auto& [name, t] : all_params()) {
        const Tensor<float>* src = ckpt.find(name);
        if (!src) throw ShapeError("checkpoint is missing tensor " + name);
        if (src->shape() != t.shape())
            throw ShapeError("checkpoint tensor " + name + " has shape " +
                             shape_str(src->shape()) + ", model expects " +
                             shape_str(t.shape()));
        t.mutable_data() = src->data();
    }
    apply_freeze_flags();
    rebuild_tables();

    if (opt) {
        for (auto& slot : opt->slots()) {
            const Tensor<float>* m = ckpt.find("opt.m." + slot.name);
            const Tensor<float>* v = ckpt.find("opt.v." + slot.name);
            if (!m || !v)
                throw ShapeError("checkpoint is missing optimizer state for " + slot.name);
            if (m->size() != slot.m.size() || v->size() != slot.v.size())
                throw ShapeError("optimizer state size mismatch for " + slot.name);
            slot.m = m->data();
            slot.v = v->data();
        }
        const Tensor<float>* step = ckpt.find("opt.step");
        if (!step) throw ShapeError("checkpoint is missing the optimizer step counter");
        opt->set_step_count(static_cast<std::size_t>(step->data()[0]));
    }
}

}  // namespace ovseg
