#include "ovseg/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

#include "ovseg/checkpoint.hpp"
#include "ovseg/errors.hpp"
#include "ovseg/gradcheck.hpp"

namespace ovseg {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const BadMagicError*>(&e) || dynamic_cast<const BadVersionError*>(&e) ||
        dynamic_cast<const TruncatedFileError*>(&e) || dynamic_cast<const ChecksumError*>(&e))
        return 3;
    if (dynamic_cast<const IoError*>(&e)) return 3;
    if (dynamic_cast<const ShapeError*>(&e)) return 4;
    if (dynamic_cast<const NumericError*>(&e)) return 5;
    if (dynamic_cast<const EmptyInputError*>(&e)) return 6;
    return 1;
}

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

std::string fmt(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
}

std::vector<std::size_t> shape_class_ids(const Vocabulary& vocab) {
    std::vector<std::size_t> out;
    for (std::size_t id = 0; id < vocab.size(); ++id)
        if (id != kBackgroundClass) out.push_back(id);
    return out;
}

double finalize_pq(const PqReport& r, double* sq = nullptr, double* rq = nullptr) {
    const double denom =
        static_cast<double>(r.tp) + 0.5 * (static_cast<double>(r.fp) + static_cast<double>(r.fn));
    const double pq = denom > 0 ? r.iou_sum / denom : 0.0;
    if (sq) *sq = r.tp > 0 ? r.iou_sum / static_cast<double>(r.tp) : 0.0;
    if (rq) *rq = denom > 0 ? static_cast<double>(r.tp) / denom : 0.0;
    return pq;
}

PanopticPrediction<float> filter_prediction(const PanopticPrediction<float>& p,
                                            const std::vector<std::uint8_t>& keep) {
    PanopticPrediction<float> out;
    out.height = p.height;
    out.width = p.width;
    std::vector<std::uint32_t> remap(p.segments.size() + 1, 0);
    for (std::size_t k = 0; k < p.segments.size(); ++k) {
        if (!keep[p.segments[k].class_id]) continue;
        out.segments.push_back(p.segments[k]);
        remap[k + 1] = static_cast<std::uint32_t>(out.segments.size());
    }
    out.segment_ids.resize(p.segment_ids.size());
    for (std::size_t i = 0; i < p.segment_ids.size(); ++i)
        out.segment_ids[i] = remap[p.segment_ids[i]];
    return out;
}

std::vector<GtSegment> filter_segments(const std::vector<GtSegment>& segs,
                                       const std::vector<std::uint8_t>& keep) {
    std::vector<GtSegment> out;
    for (const auto& s : segs)
        if (keep[s.class_id]) out.push_back(s);
    return out;
}

void accumulate_pq(PqReport& into, const PqReport& r) {
    into.tp += r.tp;
    into.fp += r.fp;
    into.fn += r.fn;
    into.iou_sum += r.iou_sum;
}

}  // namespace

EvalAccumulator::EvalAccumulator(const Vocabulary& vocab, bool panoptic)
    : vocab_(vocab),
      panoptic_(panoptic),
      inter_(vocab.size(), 0.0),
      uni_(vocab.size(), 0.0) {}

void EvalAccumulator::add(const std::vector<std::uint16_t>& pred_labels,
                          const PanopticPrediction<float>* pan,
                          const SegmentationSample& gt) {
    const std::size_t hw = static_cast<std::size_t>(gt.height) * gt.width;
    if (pred_labels.size() != hw)
        throw ShapeError("eval: prediction extent mismatch against ground truth");
    for (std::size_t p = 0; p < hw; ++p) {
        const std::uint16_t g = gt.semantic[p];
        if (g == kIgnoreLabel) continue;  // excluded from both sides
        const std::uint16_t q = pred_labels[p];
        if (g >= vocab_.size() || q >= vocab_.size())
            throw ConfigError("eval: class id beyond the vocabulary");
        if (g == q) {
            inter_[g] += 1;
            uni_[g] += 1;
        } else {
            uni_[g] += 1;
            uni_[q] += 1;
        }
    }

    if (panoptic_) {
        if (!pan) throw ConfigError("eval: panoptic mode without a panoptic prediction");
        const std::vector<GtSegment> segs = segments_of(gt);
        std::vector<std::uint8_t> seen_mask(vocab_.size(), 0), novel_mask(vocab_.size(), 0);
        for (auto id : vocab_.train_ids) seen_mask[id] = 1;
        for (auto id : vocab_.novel_ids()) novel_mask[id] = 1;
        accumulate_pq(pq_all_, pq_sq_rq(*pan, segs));
        accumulate_pq(pq_seen_, pq_sq_rq(filter_prediction(*pan, seen_mask),
                                         filter_segments(segs, seen_mask)));
        accumulate_pq(pq_novel_, pq_sq_rq(filter_prediction(*pan, novel_mask),
                                          filter_segments(segs, novel_mask)));
    }
}

EvalSummary EvalAccumulator::finalize() const {
    EvalSummary s;
    const std::size_t c = vocab_.size();
    s.iou.assign(c, 0.0);
    s.present.assign(c, 0);
    std::vector<std::uint8_t> is_train(c, 0);
    for (auto id : vocab_.train_ids) is_train[id] = 1;

    double sum_all = 0, sum_seen = 0, sum_novel = 0;
    std::size_t n_all = 0, n_seen = 0, n_novel = 0;
    for (std::size_t k = 0; k < c; ++k) {
        if (uni_[k] <= 0) continue;  // absent classes are excluded, not zero
        s.present[k] = 1;
        s.iou[k] = inter_[k] / uni_[k];
        sum_all += s.iou[k];
        ++n_all;
        if (is_train[k]) {
            sum_seen += s.iou[k];
            ++n_seen;
        } else {
            sum_novel += s.iou[k];
            ++n_novel;
        }
    }
    s.defined = n_all > 0;
    s.seen_defined = n_seen > 0;
    s.novel_defined = n_novel > 0;
    s.miou_all = n_all ? sum_all / static_cast<double>(n_all) : 0.0;
    s.miou_seen = n_seen ? sum_seen / static_cast<double>(n_seen) : 0.0;
    s.miou_novel = n_novel ? sum_novel / static_cast<double>(n_novel) : 0.0;

    s.panoptic = panoptic_;
    if (panoptic_) {
        s.pq = finalize_pq(pq_all_, &s.sq, &s.rq);
        s.pq_seen = finalize_pq(pq_seen_);
        s.pq_novel = finalize_pq(pq_novel_);
    }
    return s;
}

EvalSummary evaluate_model(Model& model, const std::vector<SegmentationSample>& data) {
    if (data.empty()) throw EmptyInputError("eval: dataset is empty");
    EvalAccumulator acc(model.vocabulary(), model.config().panoptic_mode);
    for (const auto& sample : data) {
        EvalOutput out = model.forward_eval(sample);
        acc.add(out.semantic.labels, out.panoptic ? &*out.panoptic : nullptr, sample);
    }
    return acc.finalize();
}

namespace {

void write_eval_csv(const std::string& path, const EvalSummary& s, const Vocabulary& vocab) {
    std::ofstream f = open_out(path);
    std::vector<std::uint8_t> is_train(vocab.size(), 0);
    for (auto id : vocab.train_ids) is_train[id] = 1;
    f << "class,name,split,present,iou,miou_all,miou_seen,miou_novel,pq,sq,rq\n";
    for (std::size_t k = 0; k < vocab.size(); ++k) {
        f << k << "," << vocab.names[k] << "," << (is_train[k] ? "seen" : "novel") << ","
          << int(s.present[k]) << "," << (s.present[k] ? fmt(s.iou[k]) : "") << ",,,,,,\n";
    }
    f << "mean,,all,," << "," << fmt(s.miou_all) << "," << fmt(s.miou_seen) << ","
      << fmt(s.miou_novel) << ",";
    if (s.panoptic)
        f << fmt(s.pq) << "," << fmt(s.sq) << "," << fmt(s.rq) << "\n";
    else
        f << ",,\n";
    if (!f) throw IoError("short write to " + path);
}

}  // namespace

PretrainReport cmd_pretrain(const RunConfig& cfg, const std::string& out_path) {
    cfg.validate();
    // unsplit: the encoder pair aligns the full vocabulary, so the held-out
    // retrieval check also ranks over the full vocabulary
    Vocabulary vocab = default_vocabulary();

    const BackboneConfig bb_cfg = cfg.backbone_config();
    Rng rng_b(Rng::derive(cfg.seed, seed_tag::kBackbone));
    VisionBackbone<float> backbone(bb_cfg, rng_b);
    Rng rng_t(Rng::derive(cfg.seed, seed_tag::kText));
    TextEncoder<float> text(vocab.names, default_templates(), bb_cfg.d(), rng_t);

    // the stand-in pair aligns the FULL vocabulary: novel classes are novel
    // to fine-tuning, not to the pretrained encoders
    const std::vector<std::size_t> drawable = shape_class_ids(vocab);
    DatasetSpec ps;
    ps.count = cfg.pretrain_data;
    ps.image_size = cfg.image_size;
    ps.classes_min = ps.classes_max = 1;  // single dominant class per image
    ps.instances_min = 1;
    ps.instances_max = 2;
    ps.seed = Rng::derive(cfg.seed, seed_tag::kPretrainData);
    const auto train = generate(ps, vocab, drawable);
    DatasetSpec hs = ps;
    hs.count = cfg.eval_count;
    hs.seed = Rng::derive(cfg.seed, seed_tag::kPretrainHeld);
    const auto held = generate(hs, vocab, drawable);

    PretrainConfig pc;
    pc.steps = cfg.pretrain_steps;
    pc.batch = cfg.pretrain_batch;
    pc.lr = static_cast<float>(cfg.pretrain_lr);
    pc.tau = static_cast<float>(cfg.tau);
    pc.seed = Rng::derive(cfg.seed, seed_tag::kPretrainOpt);
    const PretrainReport report =
        pretrain_contrastive(backbone, text, vocab, default_templates(), train, held, pc);

    Checkpoint ckpt;
    NamedParams<float> params;
    backbone.collect("backbone", params);
    text.collect("text", params);
    for (const auto& [name, t] : params) ckpt.add(name, t.detach());
    ckpt.config_text = canonical_text(cfg);
    save_checkpoint(ckpt, out_path);

    std::ofstream csv = open_out(out_path + ".csv");
    csv << "final_loss,retrieval_accuracy,steps\n"
        << fmt(report.final_loss) << "," << fmt(report.retrieval_accuracy) << ","
        << report.steps_run << "\n";
    return report;
}

std::vector<StepLog> cmd_train(const RunConfig& cfg, const std::string& pretrained_path,
                               const std::string& out_path) {
    cfg.validate();
    Model model(cfg);
    model.load_pretrained(load_checkpoint(pretrained_path));

    AdamW<float>::Hyper hyper;
    hyper.weight_decay = static_cast<float>(cfg.weight_decay);
    AdamW<float> opt(hyper);
    model.configure_optimizer(opt);

    const auto data = generate(cfg.train_spec(), model.vocabulary());  // train classes only
    TrainOptions to;
    to.steps = cfg.steps;
    to.batch = cfg.batch;
    to.seed = cfg.seed;
    const auto logs = train_loop(model, opt, data, to);

    save_checkpoint(model.checkpoint_state(&opt), out_path);
    std::ofstream csv = open_out(out_path + ".csv");
    csv << "step,l_p,l_ma,l_rc,total\n";
    for (const auto& l : logs)
        csv << l.step << "," << fmt(l.l_p) << "," << fmt(l.l_ma) << "," << fmt(l.l_rc) << ","
            << fmt(l.total) << "\n";
    return logs;
}

EvalSummary cmd_eval(const std::string& ckpt_path, const std::string& data_path,
                     const std::string& out_path, const RunConfig* cfg_override) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig cfg = cfg_override ? *cfg_override : parse_config_text(ckpt.config_text);
    Model model(cfg);
    model.restore(ckpt, nullptr);

    std::vector<SegmentationSample> data;
    if (!data_path.empty()) {
        data = read_segb(data_path).samples;
    } else {
        // held-out split over the full vocabulary, novel classes included
        data = generate(cfg.eval_spec(), model.vocabulary(),
                        shape_class_ids(model.vocabulary()));
    }
    if (data.empty()) throw EmptyInputError("eval: dataset is empty");

    const EvalSummary summary = evaluate_model(model, data);
    write_eval_csv(out_path, summary, model.vocabulary());
    return summary;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

namespace {

using Td = Tensor<double>;

Td random_tensor(const Shape& shape, Rng& rng, bool rg, double lo = -1, double hi = 1) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Td::from(shape, v, rg);
}

Vocabulary tiny_vocabulary() {
    Vocabulary v;
    v.names = {"background", "redcircle", "bluesquare"};
    v.recipes = {{ShapeFamily::Circle, 0.f, 0.f},
                 {ShapeFamily::Circle, 0.95f, 1.05f},
                 {ShapeFamily::Square, 0.617f, 0.717f}};
    v.train_ids = {0, 1, 2};
    v.test_ids = {0, 1, 2};
    return v;
}

struct CheckRow {
    std::string name;
    double err;
};

// Composite op-family probes. Each one pushes gradients through a fixed pair
// of ops against random constants, so a broken backward rule anywhere in the
// family moves its row.
std::vector<CheckRow> op_family_checks(std::uint64_t seed, bool sabotage) {
    std::vector<CheckRow> rows;
    Rng rng(Rng::derive(seed, 0x0c5aULL));

    {  // add/sub/mul/div + reductions + scalar forms
        Td x = random_tensor({3, 4}, rng, true);
        const Td c1 = random_tensor({3, 4}, rng, false);
        const Td c2 = random_tensor({3, 4}, rng, false);
        const Td c3 = random_tensor({3, 4}, rng, false, 1.5, 2.5);  // safe divisor
        auto fn = [&] {
            Td a = div(mul(add(x, c1), sub(x, c2)), c3);
            return add(sum_all(mul_scalar(a, 0.7)), add_scalar(mean_all(a), 0.3));
        };
        rows.push_back({"elementwise-arithmetic", grad_check(fn, x)});
    }
    {  // matmul/transpose/reshape/dot/add_rowvec
        Td x = random_tensor({3, 4}, rng, true);
        const Td m = random_tensor({4, 5}, rng, false);
        const Td row = random_tensor({5}, rng, false);
        const Td probe = random_tensor({15}, rng, false);
        auto fn = [&] {
            Td y = add_rowvec(matmul(x, m), row);
            return dot(reshape(transpose(y), {15}), probe);
        };
        rows.push_back({"matmul-transpose-reshape", grad_check(fn, x)});
    }
    {  // conv2d wrt weights, bias, and input (two stacked convs)
        Td x = random_tensor({2, 6, 6}, rng, true);
        Td w1 = random_tensor({3, 2, 3, 3}, rng, true, -0.5, 0.5);
        Td b1 = random_tensor({3}, rng, true, -0.2, 0.2);
        Td w2 = random_tensor({2, 3, 3, 3}, rng, true, -0.5, 0.5);
        const Td b2 = random_tensor({2}, rng, false, -0.2, 0.2);
        const Td probe = random_tensor({2, 2, 2}, rng, false);
        auto fn = [&] {
            Td h = silu(conv2d(x, w1, b1, 2, 1));
            return sum_all(mul(conv2d(h, w2, b2, 2, 1), probe));
        };
        rows.push_back({"conv2d-weight", grad_check(fn, w1)});
        rows.push_back({"conv2d-bias", grad_check(fn, b1)});
        rows.push_back({"conv2d-input", grad_check(fn, x)});
        rows.push_back({"conv2d-weight-inner", grad_check(fn, w2)});
    }
    {  // layer_norm + channel_layer_norm wrt input and affine parameters
        Td x = random_tensor({4, 6}, rng, true);
        Td g = random_tensor({6}, rng, true, 0.5, 1.5);
        Td b = random_tensor({6}, rng, true, -0.3, 0.3);
        const Td probe = random_tensor({4, 6}, rng, false);
        auto fn = [&] { return sum_all(mul(layer_norm(x, g, b), probe)); };
        rows.push_back({"layer-norm-input", grad_check(fn, x)});
        rows.push_back({"layer-norm-gain", grad_check(fn, g)});
        rows.push_back({"layer-norm-bias", grad_check(fn, b)});

        Td cx = random_tensor({3, 4, 4}, rng, true);
        Td cg = random_tensor({3}, rng, true, 0.5, 1.5);
        const Td cb = random_tensor({3}, rng, false, -0.3, 0.3);
        const Td cprobe = random_tensor({3, 4, 4}, rng, false);
        auto cfn = [&] { return sum_all(mul(channel_layer_norm(cx, cg, cb), cprobe)); };
        rows.push_back({"channel-layer-norm", grad_check(cfn, cx)});
        rows.push_back({"channel-layer-norm-gain", grad_check(cfn, cg)});
    }
    {  // silu/sigmoid chain
        Td x = random_tensor({3, 5}, rng, true, -2, 2);
        const Td probe = random_tensor({3, 5}, rng, false);
        auto fn = [&] { return sum_all(mul(sigmoid(silu(x)), probe)); };
        rows.push_back({"activations", grad_check(fn, x)});
    }
    {  // softmax + cross_entropy_rows + gather_rows
        Td x = random_tensor({4, 5}, rng, true, -1.5, 1.5);
        const std::vector<std::size_t> labels = {1, 0, 3, 2};
        const std::vector<std::size_t> pick = {2, 1};
        const Td probe = random_tensor({4, 5}, rng, false);
        const Td gprobe = random_tensor({2, 5}, rng, false);
        auto fn = [&] {
            Td soft = sum_all(mul(softmax(x, 1), probe));
            Td ce = cross_entropy_rows(x, labels);
            Td gathered = sum_all(mul(gather_rows(x, pick), gprobe));
            return add(soft, add(ce, gathered));
        };
        rows.push_back({"softmax-cross-entropy-gather", grad_check(fn, x)});
    }
    {  // concat/slice/normalize/row stacking
        Td x = random_tensor({3, 4}, rng, true);
        const Td other = random_tensor({2, 4}, rng, false);
        const Td side = random_tensor({5, 2}, rng, false);
        const Td probe = random_tensor({5, 4}, rng, false);
        auto fn = [&] {
            Td stacked = concat_rows(std::vector<Td>{normalize_rows(x), other});
            Td wide = concat_cols(std::vector<Td>{stacked, side});
            return sum_all(mul(slice_cols(wide, 1, 5), probe));
        };
        rows.push_back({"concat-slice-normalize", grad_check(fn, x)});
    }
    {  // bilinear_resize + avg_pool_grid + masked_mean_pool
        Td x = random_tensor({2, 3, 3}, rng, true);
        const Td target = random_tensor({2, 6, 6}, rng, false);
        auto fn = [&] { return smooth_l1(bilinear_resize(x, 6, 6), target); };
        rows.push_back({"bilinear-resize", grad_check(fn, x)});

        Td f = random_tensor({2, 6, 6}, rng, true);
        const Td ptarget = random_tensor({2, 2, 2}, rng, false);
        auto pfn = [&] { return smooth_l1(avg_pool_grid(f, 2), ptarget); };
        rows.push_back({"avg-pool-grid", grad_check(pfn, f)});

        Td mf = random_tensor({3, 4, 4}, rng, true);
        Td ml = random_tensor({2, 4, 4}, rng, true, -2, 2);
        const Td mtarget = random_tensor({2, 3}, rng, false);
        auto mfn = [&] { return smooth_l1(masked_mean_pool(mf, ml), mtarget); };
        rows.push_back({"masked-mean-pool-features", grad_check(mfn, mf)});
        rows.push_back({"masked-mean-pool-logits", grad_check(mfn, ml)});
    }
    {  // bce_with_logits + smooth_l1 branches
        Td x = random_tensor({3, 4}, rng, true, -2, 2);
        const Td t01 = random_tensor({3, 4}, rng, false, 0, 1);
        const Td far = random_tensor({3, 4}, rng, false, 2, 4);  // linear branch
        auto fn = [&] { return add(bce_with_logits(x, t01), smooth_l1(x, far)); };
        rows.push_back({"bce-smooth-l1", grad_check(fn, x)});
    }
    {  // multi-head cross attention
        Rng arng(Rng::derive(seed, 0xa77ULL));
        CrossAttention<double> attn(8, 2, arng, /*zero_init_out=*/false);
        const Td q = random_tensor({3, 8}, rng, false);
        const Td kv = random_tensor({5, 8}, rng, false);
        const Td probe = random_tensor({3, 8}, rng, false);
        auto fn = [&] { return sum_all(mul(attn.forward(q, kv), probe)); };
        rows.push_back({"cross-attention-query-proj", grad_check(fn, attn.que.w)});
        rows.push_back({"cross-attention-key-proj", grad_check(fn, attn.key.w)});
        rows.push_back({"cross-attention-value-proj", grad_check(fn, attn.val.w)});
        rows.push_back({"cross-attention-out-proj", grad_check(fn, attn.out.w)});
    }
    {  // soft mask pooling as used for region classification
        Td feat = random_tensor({3, 4, 4}, rng, true);
        MaskProposalSet<double> props;
        props.mask_logits = random_tensor({2, 4, 4}, rng, true, -2, 2);
        props.queries = random_tensor({2, 3}, rng, false);
        const Td target = random_tensor({2, 3}, rng, false);
        auto fn = [&] { return smooth_l1(mask_pooling(feat, props), target); };
        rows.push_back({"mask-pooling-features", grad_check(fn, feat)});
        rows.push_back({"mask-pooling-logits", grad_check(fn, props.mask_logits)});
    }
    {  // representation-compensation loss at a nonzero offset
        const Td frozen = random_tensor({2, 4, 4}, rng, false);
        Td live = random_tensor({2, 4, 4}, rng, true);
        RCConfig rc;
        rc.grids = {1, 2};
        auto fn = [&] { return rc_loss(live, frozen, rc); };
        rows.push_back({"rc-loss", grad_check(fn, live)});
    }
    {  // text conditioning stack (randomized out-projections)
        Rng crng(Rng::derive(seed, 0xcd7ULL));
        CDTStack<double> cdt(8, 2, 2, crng);
        for (auto& layer : cdt.layers) {
            for (auto& w : layer.attn.out.w.mutable_data()) w = crng.uniform(-0.3, 0.3);
            for (auto& b : layer.attn.out.b.mutable_data()) b = crng.uniform(-0.1, 0.1);
        }
        Td t = normalize_rows(random_tensor({3, 8}, rng, false)).detach();
        t.set_requires_grad(true);
        Td f3 = random_tensor({8, 2, 2}, rng, true);
        const Td probe = random_tensor({3, 8}, rng, false);
        auto fn = [&] { return sum_all(mul(cdt_forward(cdt, t, f3), probe)); };
        rows.push_back({"cdt-text-input", grad_check(fn, t)});
        rows.push_back({"cdt-features", grad_check(fn, f3)});
        rows.push_back({"cdt-attention-query", grad_check(fn, cdt.layers[0].attn.que.w)});
        rows.push_back({"cdt-attention-out", grad_check(fn, cdt.layers[1].attn.out.w)});
        rows.push_back({"cdt-layer-norm", grad_check(fn, cdt.layers[0].ln.g)});
    }
    {  // cosine classification head. Probed at a mild temperature: at the
       // production tau the softmax saturates and its true gradients drop
       // below what central differences can resolve (the full-objective rows
       // cover that regime through the composed loss).
        Td v = random_tensor({4, 8}, rng, true);
        const Td t = normalize_rows(random_tensor({3, 8}, rng, false)).detach();
        const Td probe = random_tensor({4, 3}, rng, false);
        auto fn = [&] {
            return sum_all(mul(classification_scores(v, t, 0.7).s, probe));
        };
        rows.push_back({"classification-scores", grad_check(fn, v)});
    }
    {  // matched mask loss (bce + dice over a fixed assignment)
        MaskProposalSet<double> props;
        props.mask_logits = random_tensor({4, 4, 4}, rng, true, -1.5, 1.5);
        props.queries = random_tensor({4, 8}, rng, false);
        std::vector<GtSegment> segs(2);
        segs[0] = {1, 4, 4, {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}};
        segs[1] = {2, 4, 4, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1}};
        auto fn = [&] { return proposal_loss(props, segs); };
        rows.push_back({"proposal-loss", grad_check(fn, props.mask_logits)});
    }
    {  // contrastive alignment through the text encoder
        Rng trng(Rng::derive(seed, 0x7e87ULL));
        const Vocabulary vocab = tiny_vocabulary();
        TextEncoder<double> enc(vocab.names, default_templates(), 8, trng);
        Td img = random_tensor({3, 8}, rng, true);
        auto fn = [&] {
            Td txt = text_encode(enc, vocab.names, default_templates()).t;
            return info_nce_loss(normalize_rows(img), txt, 0.07);
        };
        rows.push_back({"info-nce-image-side", grad_check(fn, img)});
        rows.push_back({"info-nce-text-encoder", grad_check(fn, enc.embeddings)});
        rows.push_back({"info-nce-text-pool", grad_check(fn, enc.pool.w)});
    }
    if (sabotage) {  // detector self-test: backward rule off by 2 percent
        Td x = random_tensor({2, 3}, rng, true);
        auto fn = [&] {
            Td y = detail::make_op<double>(
                "sabotaged-identity", x.shape(), x.data(), {x},
                [](TensorNode<double>& n) {
                    if (auto* g = detail::grad_of(n.parents[0])) {
                        for (std::size_t i = 0; i < g->size(); ++i)
                            (*g)[i] += 1.02 * n.grad[i];
                    }
                });
            return sum_all(mul(y, y));
        };
        rows.push_back({"sabotaged-identity", grad_check(fn, x)});
    }
    return rows;
}

// Double-precision mirror of a full training step's objective on the tiny
// configuration, with the regression targets and (optionally) the proposals
// captured as constants — matching what one optimizer step differentiates.
struct TinyObjective {
    BackboneConfig bcfg;
    VisionBackbone<double> bb, frozen;
    ProposalHead<double> head;
    CDTStack<double> cdt;
    Td table;  // constant unit-row class table
    SegmentationSample sample;
    std::vector<GtSegment> segs;
    Td img;
    Td s_iou;  // fixed at the current point, as in one optimizer step
    MaskProposalSet<double> frozen_props;
    RCConfig rc;
    double tau, l1, l2;

    explicit TinyObjective(const RunConfig& cfg)
        : tau(cfg.tau), l1(cfg.lambda1), l2(cfg.lambda2) {
        bcfg = cfg.backbone_config();
        Rng rng_b(Rng::derive(cfg.seed, seed_tag::kBackbone));
        bb = VisionBackbone<double>(bcfg, rng_b);
        frozen = freeze_copy(bb);
        Rng rng_h(Rng::derive(cfg.seed, seed_tag::kHead));
        head = ProposalHead<double>(cfg.proposal_config(), bcfg, rng_h);
        Rng rng_c(Rng::derive(cfg.seed, seed_tag::kCdt));
        cdt = CDTStack<double>(bcfg.d(), cfg.cdt_layers, cfg.cdt_heads, rng_c);
        for (auto& layer : cdt.layers) {  // move off the identity init
            for (auto& w : layer.attn.out.w.mutable_data()) w = rng_c.uniform(-0.3, 0.3);
            for (auto& b : layer.attn.out.b.mutable_data()) b = rng_c.uniform(-0.1, 0.1);
        }

        const Vocabulary vocab = tiny_vocabulary();
        Rng rng_t(Rng::derive(cfg.seed, seed_tag::kText));
        table = normalize_rows(random_tensor({vocab.size(), bcfg.d()}, rng_t, false)).detach();

        DatasetSpec ds;
        ds.count = 1;
        ds.image_size = cfg.image_size;
        ds.classes_min = ds.classes_max = 1;
        ds.instances_min = ds.instances_max = 1;
        ds.seed = Rng::derive(cfg.seed, 0xda7aULL);
        sample = generate(ds, vocab)[0];
        segs = segments_of(sample);
        img = image_tensor<double>(sample);

        rc.grids = {1};  // the 32x32 input leaves a 1x1 top-level map

        MaskProposalSet<double> p0 = generate_proposals(head, vision_encode(bb, img));
        s_iou = iou_targets(p0, sample, vocab.size(), false).s;
        frozen_props.mask_logits = p0.mask_logits.detach();
        frozen_props.queries = p0.queries.detach();
    }

    // live_props=false freezes the proposals, which is the backbone's view of
    // the objective: the generator runs on detached features, so perturbing a
    // backbone parameter must not move the proposals.
    Td loss(bool live_props) {
        auto pyr = vision_encode(bb, img);
        auto props = live_props ? generate_proposals(head, pyr) : frozen_props;
        auto l_p = proposal_loss(props, segs);
        auto v = mask_pooling(pyr.f3, props);
        auto t_hat = cdt_forward(cdt, table, pyr.f3);
        auto s_cls = classification_scores(v, t_hat, tau);
        auto l_ma = smooth_l1(s_cls.s, s_iou);
        auto l_rc = rc_loss(pyr.f3, vision_encode(frozen, img).f3, rc);
        return total_loss(l_p, l_ma, l_rc, l1, l2);
    }
};

}  // namespace

int cmd_gradcheck(const RunConfig& cfg, std::ostream& log, bool sabotage) {
    cfg.validate();
    for (auto w : cfg.widths)
        if (w > 16) throw ConfigError("gradcheck: stage widths must be at most 16");
    if (cfg.proposals > 4) throw ConfigError("gradcheck: proposal count must be at most 4");
    if (cfg.image_size != 32) throw ConfigError("gradcheck: image size must be 32");

    std::vector<CheckRow> rows = op_family_checks(cfg.seed, sabotage);

    TinyObjective obj(cfg);
    auto fixed = [&] { return obj.loss(false); };
    auto live = [&] { return obj.loss(true); };
    NamedParams<double> bb_params, other_params;
    obj.bb.collect("backbone", bb_params);
    obj.head.collect("head", other_params);
    obj.cdt.collect("cdt", other_params);
    for (auto& [name, t] : bb_params)
        rows.push_back({"objective[" + name + "]", grad_check(fixed, t)});
    for (auto& [name, t] : other_params)
        rows.push_back({"objective[" + name + "]", grad_check(live, t)});

    constexpr double kTol = 1e-4;
    bool ok = true;
    log << std::left << std::setw(44) << "check" << std::setw(14) << "max-rel-err"
        << "status\n";
    for (const auto& row : rows) {
        const bool pass = row.err < kTol;
        ok = ok && pass;
        std::ostringstream err_txt;
        err_txt << std::scientific << std::setprecision(3) << row.err;
        log << std::left << std::setw(44) << row.name << std::setw(14) << err_txt.str()
            << (pass ? "ok" : "FAIL") << "\n";
    }
    if (!ok) {
        log << "gradient check FAILED:";
        for (const auto& row : rows)
            if (row.err >= kTol) log << " " << row.name;
        log << "\n";
        return 1;
    }
    log << "all " << rows.size() << " checks below " << kTol << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// ablation sweep
// ---------------------------------------------------------------------------

namespace {

struct VariantSpec {
    const char* name;
    const char* slug;
    bool use_cdt, use_rc, freeze_backbone;
};

constexpr VariantSpec kVariants[4] = {
    {"baseline", "baseline", false, false, true},
    {"+CDT", "cdt", true, false, true},
    {"+RC", "rc", false, true, false},
    {"+CDT&RC", "cdt_rc", true, true, false},
};

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double acc = 0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

std::string pct(double v, double sd) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << 100.0 * v << " ± " << 100.0 * sd;
    return o.str();
}

}  // namespace

std::vector<AblationCell> cmd_ablate(const RunConfig& cfg, const std::string& out_dir,
                                     std::ostream& log, std::size_t seed_count) {
    cfg.validate();
    if (seed_count == 0) throw ConfigError("ablate: need at least one seed");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    std::vector<AblationCell> cells(4);
    for (std::size_t i = 0; i < 4; ++i) cells[i].variant = kVariants[i].name;

    for (std::size_t s = 0; s < seed_count; ++s) {
        const std::uint64_t seed = cfg.seed + s;
        RunConfig pcfg = cfg;
        pcfg.seed = seed;
        const std::string pre_path =
            out_dir + "/pretrain_s" + std::to_string(seed) + ".ckpt";
        const PretrainReport pre = cmd_pretrain(pcfg, pre_path);
        log << "[ablate] seed " << seed << " pretrain retrieval "
            << std::fixed << std::setprecision(3) << pre.retrieval_accuracy << "\n";

        for (std::size_t i = 0; i < 4; ++i) {
            RunConfig vcfg = cfg;
            vcfg.seed = seed;
            vcfg.use_cdt = kVariants[i].use_cdt;
            vcfg.use_rc = kVariants[i].use_rc;
            vcfg.freeze_backbone = kVariants[i].freeze_backbone;
            const std::string ck_path = out_dir + "/" + kVariants[i].slug + "_s" +
                                        std::to_string(seed) + ".ckpt";
            cmd_train(vcfg, pre_path, ck_path);
            const EvalSummary sum = cmd_eval(ck_path, "", ck_path + ".eval.csv");
            cells[i].novel.push_back(sum.miou_novel);
            cells[i].seen.push_back(sum.miou_seen);
            cells[i].overall.push_back(sum.miou_all);
            log << "[ablate] seed " << seed << " " << std::left << std::setw(8)
                << kVariants[i].name << " novel " << std::fixed << std::setprecision(4)
                << sum.miou_novel << " seen " << sum.miou_seen << "\n";
        }
        const auto last = [&](std::size_t i) { return cells[i].novel.back(); };
        if (!(last(0) < last(1)))
            log << "[ablate] WARN seed " << seed << ": baseline >= +CDT on novel mIoU\n";
        if (!(last(0) < last(2)))
            log << "[ablate] WARN seed " << seed << ": baseline >= +RC on novel mIoU\n";
        if (!(last(3) >= std::max(last(1), last(2))))
            log << "[ablate] WARN seed " << seed
                << ": combined run below a single-component run on novel mIoU\n";
    }

    for (auto& c : cells) {
        c.novel_mean = mean_of(c.novel);
        c.novel_sd = sd_of(c.novel);
        c.seen_mean = mean_of(c.seen);
        c.seen_sd = sd_of(c.seen);
    }
    if (!(cells[0].novel_mean < cells[1].novel_mean))
        log << "[ablate] WARN mean: baseline >= +CDT on novel mIoU\n";
    if (!(cells[0].novel_mean < cells[2].novel_mean))
        log << "[ablate] WARN mean: baseline >= +RC on novel mIoU\n";
    if (!(cells[3].novel_mean >= std::max(cells[1].novel_mean, cells[2].novel_mean)))
        log << "[ablate] WARN mean: combined run below a single-component run\n";
    if (!(cells[3].novel_mean - cells[0].novel_mean >= 0.03))
        log << "[ablate] WARN mean: combined run leads baseline by under 3 mIoU points\n";

    std::ofstream csv = open_out(out_dir + "/ablation.csv");
    csv << "variant,seed,miou_novel,miou_seen,miou_all\n";
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t s = 0; s < seed_count; ++s)
            csv << kVariants[i].name << "," << (cfg.seed + s) << ","
                << fmt(cells[i].novel[s]) << "," << fmt(cells[i].seen[s]) << ","
                << fmt(cells[i].overall[s]) << "\n";

    std::ofstream md = open_out(out_dir + "/ablation.md");
    md << "| configuration | novel mIoU (%) | seen mIoU (%) |\n";
    md << "|---|---|---|\n";
    for (const auto& c : cells)
        md << "| " << c.variant << " | " << pct(c.novel_mean, c.novel_sd) << " | "
           << pct(c.seen_mean, c.seen_sd) << " |\n";
    md << "\nMean ± sample standard deviation over " << seed_count << " seeds (seeds "
       << cfg.seed << ".." << (cfg.seed + seed_count - 1) << ").\n";
    return cells;
}

double cmd_export_sim(const std::string& ckpt_path, const std::string& out_path) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig cfg = parse_config_text(ckpt.config_text);
    Model model(cfg);
    model.restore(ckpt, nullptr);
    const Vocabulary& vocab = model.vocabulary();

    const auto data =
        generate(cfg.eval_spec(), vocab, shape_class_ids(vocab));
    if (data.empty()) throw EmptyInputError("export-sim: dataset is empty");

    SimilarityAccumulator<float> acc(vocab.size(), cfg.backbone_config().d());
    for (const auto& sample : data)
        acc.add_sample(model.backbone_f3(sample, false), sample,
                       model.conditioned_table(sample));
    const SimilarityMatrix<float> sim = acc.finalize();

    Checkpoint out;
    out.add("similarity", sim.s);
    std::vector<float> present(sim.row_present.begin(), sim.row_present.end());
    out.add("row_present", Tensor<float>::from({present.size()}, present, false));
    out.add("diagonal_mean",
            Tensor<float>::from({1}, {static_cast<float>(sim.diagonal_mean)}, false));
    out.config_text = canonical_text(cfg);
    save_checkpoint(out, out_path);

    std::ofstream csv = open_out(out_path + ".csv");
    csv << "name,present";
    for (const auto& n : vocab.names) csv << "," << n;
    csv << "\n";
    for (std::size_t r = 0; r < vocab.size(); ++r) {
        csv << vocab.names[r] << "," << int(sim.row_present[r]);
        for (std::size_t c = 0; c < vocab.size(); ++c)
            csv << "," << fmt(sim.s.data()[r * vocab.size() + c]);
        csv << "\n";
    }
    csv << "diagonal_mean," << fmt(sim.diagonal_mean);
    for (std::size_t c = 0; c < vocab.size(); ++c) csv << ",";
    csv << "\n";
    return sim.diagonal_mean;
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

namespace {

RunConfig gradcheck_defaults() {
    RunConfig c;
    c.widths = {4, 4, 8, 8};
    c.proposals = 4;
    c.head_layers = 1;
    c.head_heads = 2;
    c.cdt_layers = 2;
    c.cdt_heads = 2;
    c.image_size = 32;
    c.rc_grids = {1};
    c.train_count = 1;
    c.eval_count = 1;
    return c;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"open-vocabulary segmentation workbench"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string config_path, out, data_path, ckpt_path, pretrained_path;
    std::uint64_t seed = 0;
    std::size_t threads = 1, seeds = 3;
    bool sabotage = false;

    app.add_option("--config", config_path, "run configuration file");
    auto* seed_opt = app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", out, "output path (directory for ablate)");
    app.add_option("--threads", threads,
                   "worker threads (reserved; execution is single-threaded)");

    auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of the encoder pair");
    auto* tr = app.add_subcommand("train", "fine-tune from a pretrained checkpoint");
    tr->add_option("--pretrained", pretrained_path, "pretraining checkpoint")->required();
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
    ev->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();
    ev->add_option("--data", data_path, "SEGB dataset (default: regenerate the split)");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_flag("--sabotage", sabotage, "inject a broken backward rule (self-test)");
    auto* ab = app.add_subcommand("ablate", "four-configuration component sweep");
    ab->add_option("--seeds", seeds, "number of seeds to aggregate");
    auto* ex = app.add_subcommand("export-sim", "export the class-similarity matrix");
    ex->add_option("--ckpt", ckpt_path, "trained checkpoint")->required();

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (threads == 0) throw ConfigError("--threads must be at least 1");
        RunConfig cfg;
        if (!config_path.empty())
            cfg = parse_config_file(config_path);
        else if (gc->parsed())
            cfg = gradcheck_defaults();
        if (seed_opt->count() > 0) cfg.seed = seed;

        if (pre->parsed()) {
            const std::string path = out.empty() ? "pretrain.ckpt" : out;
            const PretrainReport r = cmd_pretrain(cfg, path);
            std::cout << "wrote " << path << "; retrieval accuracy " << std::fixed
                      << std::setprecision(3) << r.retrieval_accuracy << " after "
                      << r.steps_run << " steps\n";
        } else if (tr->parsed()) {
            const std::string path = out.empty() ? "train.ckpt" : out;
            const auto logs = cmd_train(cfg, pretrained_path, path);
            std::cout << "wrote " << path << "; final loss "
                      << (logs.empty() ? 0.0 : logs.back().total) << " after "
                      << logs.size() << " steps\n";
        } else if (ev->parsed()) {
            const std::string path = out.empty() ? "eval.csv" : out;
            const RunConfig* ov = config_path.empty() ? nullptr : &cfg;
            const EvalSummary s = cmd_eval(ckpt_path, data_path, path, ov);
            std::cout << "wrote " << path << "; mIoU all " << std::fixed
                      << std::setprecision(4) << s.miou_all << " seen " << s.miou_seen
                      << " novel " << s.miou_novel;
            if (s.panoptic) std::cout << "; PQ " << s.pq;
            std::cout << "\n";
        } else if (gc->parsed()) {
            return cmd_gradcheck(cfg, std::cout, sabotage);
        } else if (ab->parsed()) {
            const std::string dir = out.empty() ? "ablation" : out;
            cmd_ablate(cfg, dir, std::cout, seeds);
            std::cout << "wrote " << dir << "/ablation.md and " << dir << "/ablation.csv\n";
        } else if (ex->parsed()) {
            const std::string path = out.empty() ? "similarity.ckpt" : out;
            const double d = cmd_export_sim(ckpt_path, path);
            std::cout << "wrote " << path << "; diagonal mean " << std::fixed
                      << std::setprecision(4) << d << "\n";
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

}  // namespace ovseg
