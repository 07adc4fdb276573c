#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ovseg/errors.hpp"
#include "ovseg/metrics.hpp"
#include "ovseg/rng.hpp"

using namespace ovseg;
using approx = doctest::Approx;
using Td = Tensor<double>;

namespace {

Td hard_masks(const std::vector<std::vector<std::uint8_t>>& masks, std::size_t h, std::size_t w) {
    std::vector<double> logits;
    for (const auto& m : masks)
        for (std::size_t p = 0; p < h * w; ++p) logits.push_back(m[p] ? 25.0 : -25.0);
    return Td::from({masks.size(), h, w}, logits, false);
}

ScoreMatrix<double> scores(std::size_t n, std::size_t c, const std::vector<double>& v) {
    return {Td::from({n, c}, v, false), ScoreKind::kClassification};
}

}  // namespace

TEST_CASE("semantic_inference basics") {
    // single proposal, one-hot class 2, disk in a 4x4 frame
    std::vector<std::uint8_t> disk(16, 0);
    disk[5] = disk[6] = disk[9] = disk[10] = 1;
    auto pred = semantic_inference(scores(1, 3, {0, 0, 1}), hard_masks({disk}, 4, 4));
    CHECK(pred.height == 4);
    CHECK(pred.labels[5] == 2);
    CHECK(pred.labels[10] == 2);
    CHECK(pred.scores.shape() == Shape{3, 4, 4});

    // two proposals with identical masks: 0.8 on c1 outweighs 0.6 on c2
    auto both = semantic_inference(
        scores(2, 3, {0.1, 0.8, 0.1, 0.2, 0.2, 0.6}), hard_masks({disk, disk}, 4, 4));
    CHECK(both.labels[5] == 1);
    CHECK(both.labels[6] == 1);
    // oracle for the accumulated score at an inside pixel
    const double sig = 1.0 / (1.0 + std::exp(-25.0));
    CHECK(both.scores(1, 1, 1) == approx((0.8 + 0.2) * sig).epsilon(1e-12));
    CHECK(both.scores(2, 1, 1) == approx((0.1 + 0.6) * sig).epsilon(1e-12));

    // uniform scores: every pixel ties, resolved to class 0
    auto uni = semantic_inference(
        scores(2, 3, {1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3, 1. / 3}),
        hard_masks({disk, disk}, 4, 4));
    for (auto l : uni.labels) CHECK(l == 0);

    auto bad = hard_masks({disk}, 4, 4);
    CHECK_THROWS_AS(semantic_inference(scores(2, 3, std::vector<double>(6, 0.1)), bad),
                    ShapeError);
}

TEST_CASE("semantic_inference is invariant to proposal order") {
    Rng rng(71);
    const std::size_t n = 4, c = 5, h = 6, w = 6;
    std::vector<double> s(n * c), m(n * h * w);
    for (auto& x : s) x = rng.uniform(0, 1);
    for (auto& x : m) x = rng.uniform(-4, 4);

    auto base = semantic_inference(scores(n, c, s), Td::from({n, h, w}, m, false));

    std::vector<std::size_t> perm = {2, 0, 3, 1};
    std::vector<double> s2(n * c), m2(n * h * w);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < c; ++k) s2[i * c + k] = s[perm[i] * c + k];
        for (std::size_t p = 0; p < h * w; ++p) m2[i * h * w + p] = m[perm[i] * h * w + p];
    }
    auto permuted = semantic_inference(scores(n, c, s2), Td::from({n, h, w}, m2, false));
    CHECK(base.labels == permuted.labels);
}

TEST_CASE("panoptic_inference greedy assembly") {
    std::vector<std::uint8_t> left(16, 0), right(16, 0);
    for (std::size_t y = 0; y < 4; ++y) {
        left[y * 4 + 0] = left[y * 4 + 1] = 1;
        right[y * 4 + 2] = right[y * 4 + 3] = 1;
    }

    // two disjoint confident proposals -> two segments
    auto two = panoptic_inference(scores(2, 3, {0.05, 0.9, 0.05, 0.05, 0.05, 0.9}),
                                  hard_masks({left, right}, 4, 4));
    REQUIRE(two.segments.size() == 2);
    CHECK(two.segments[0].class_id == 1);  // higher-confidence proposal first
    CHECK(two.segments[1].class_id == 2);
    for (std::size_t p = 0; p < 16; ++p) CHECK(two.segment_ids[p] != 0);

    // duplicate mask fully claimed by the stronger proposal -> dropped
    auto dup = panoptic_inference(scores(2, 3, {0.05, 0.9, 0.05, 0.1, 0.8, 0.1}),
                                  hard_masks({left, left}, 4, 4));
    CHECK(dup.segments.size() == 1);
    CHECK(dup.segments[0].confidence == approx(0.9));

    // nothing confident -> empty prediction
    auto none = panoptic_inference(
        scores(2, 3, std::vector<double>(6, 1. / 3)), hard_masks({left, right}, 4, 4));
    CHECK(none.segments.empty());
    for (auto id : none.segment_ids) CHECK(id == 0);

    // partial occlusion: survivor keeps only unclaimed pixels, and a proposal
    // with too little left is dropped
    std::vector<std::uint8_t> wide(16, 0);
    for (std::size_t p = 0; p < 8; ++p) wide[p] = 1;        // top half, 8 px
    std::vector<std::uint8_t> small(16, 0);
    small[0] = small[1] = 1;                                 // inside `wide`
    auto occ = panoptic_inference(scores(2, 3, {0.05, 0.9, 0.05, 0.1, 0.8, 0.1}),
                                  hard_masks({small, wide}, 4, 4));
    // `small` claims 2 px; `wide` keeps 6/8 = 0.75 < 0.8 -> dropped
    REQUIRE(occ.segments.size() == 1);
    CHECK(occ.segments[0].confidence == approx(0.9));

    // ids are dense 1..K and consistent with the records
    for (auto id : two.segment_ids) CHECK(id <= two.segments.size());
}

TEST_CASE("miou hand cases") {
    // 4 pixels, classes {1,2,3}: class 1 perfect, classes 2 and 3 at 1/2
    SegmentationSample gt;
    gt.height = 1;
    gt.width = 4;
    gt.semantic = {1, 2, 2, 3};
    gt.instance = {0, 0, 0, 0};
    auto rep = miou({1, 2, 3, 3}, gt, 4);
    REQUIRE(rep.defined);
    CHECK(rep.iou[1] == approx(1.0));
    CHECK(rep.iou[2] == approx(0.5));
    CHECK(rep.iou[3] == approx(0.5));
    CHECK_FALSE(rep.present[0]);
    CHECK(rep.mean == approx(2.0 / 3.0).epsilon(1e-12));

    // perfect prediction
    auto perfect = miou({1, 2, 2, 3}, gt, 4);
    CHECK(perfect.mean == approx(1.0));

    // ignore pixels vanish from both sides
    SegmentationSample ig = gt;
    ig.semantic = {1, 1, kIgnoreLabel, kIgnoreLabel};
    auto r2 = miou({1, 1, 2, 3}, ig, 4);
    CHECK(r2.mean == approx(1.0));
    CHECK_FALSE(r2.present[2]);

    // everything ignored: undefined, not zero
    SegmentationSample all;
    all.height = 1;
    all.width = 2;
    all.semantic = {kIgnoreLabel, kIgnoreLabel};
    all.instance = {0, 0};
    CHECK_FALSE(miou({0, 1}, all, 4).defined);

    CHECK_THROWS_AS(miou({9, 0, 0, 0}, gt, 4), ConfigError);
}

TEST_CASE("miou relabeling symmetry") {
    Rng rng(72);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t hw = 36;
        SegmentationSample gt;
        gt.height = gt.width = 6;
        gt.semantic.resize(hw);
        gt.instance.assign(hw, 0);
        std::vector<std::uint16_t> pred(hw);
        for (std::size_t p = 0; p < hw; ++p) {
            gt.semantic[p] = rng.below(10) == 0 ? kIgnoreLabel
                                                : static_cast<std::uint16_t>(rng.below(4));
            pred[p] = static_cast<std::uint16_t>(rng.below(4));
        }
        std::vector<std::uint16_t> perm = {2, 3, 1, 0};
        SegmentationSample gt2 = gt;
        std::vector<std::uint16_t> pred2(hw);
        for (std::size_t p = 0; p < hw; ++p) {
            if (gt.semantic[p] != kIgnoreLabel) gt2.semantic[p] = perm[gt.semantic[p]];
            pred2[p] = perm[pred[p]];
        }
        auto a = miou(pred, gt, 4);
        auto b = miou(pred2, gt2, 4);
        CHECK(a.defined == b.defined);
        if (a.defined) CHECK(a.mean == approx(b.mean).epsilon(1e-12));
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(a.present[k] == b.present[perm[k]]);
            if (a.present[k]) CHECK(a.iou[k] == approx(b.iou[perm[k]]).epsilon(1e-12));
        }
    }
}

namespace {

PanopticPrediction<double> one_segment(const std::vector<std::size_t>& pixels,
                                       std::uint16_t cls, std::size_t hw) {
    PanopticPrediction<double> p;
    p.height = 1;
    p.width = hw;
    p.segment_ids.assign(hw, 0);
    for (auto px : pixels) p.segment_ids[px] = 1;
    p.segments.push_back({cls, 0.9});
    return p;
}

GtSegment gt_segment(const std::vector<std::size_t>& pixels, std::uint16_t cls, std::size_t hw) {
    GtSegment g;
    g.class_id = cls;
    g.height = 1;
    g.width = hw;
    g.mask.assign(hw, 0);
    for (auto px : pixels) g.mask[px] = 1;
    return g;
}

}  // namespace

TEST_CASE("pq_sq_rq definitional cases") {
    // exact match
    auto exact = pq_sq_rq(one_segment({0, 1, 2}, 1, 8), {gt_segment({0, 1, 2}, 1, 8)});
    CHECK(exact.pq == approx(1.0));
    CHECK(exact.sq == approx(1.0));
    CHECK(exact.rq == approx(1.0));

    // same class, IoU = 3/5
    auto six = pq_sq_rq(one_segment({1, 2, 3, 4}, 1, 8), {gt_segment({0, 1, 2, 3}, 1, 8)});
    CHECK(six.tp == 1);
    CHECK(six.pq == approx(0.6).epsilon(1e-12));
    CHECK(six.sq == approx(0.6).epsilon(1e-12));
    CHECK(six.rq == approx(1.0));

    // same class, IoU = 2/5: below the matching bar
    auto low = pq_sq_rq(one_segment({2, 3, 4}, 1, 8), {gt_segment({0, 1, 2, 3}, 1, 8)});
    CHECK(low.tp == 0);
    CHECK(low.fp == 1);
    CHECK(low.fn == 1);
    CHECK(low.pq == approx(0.0));
    CHECK(low.sq == approx(0.0));
    CHECK(low.rq == approx(0.0));

    // perfect overlap, wrong class
    auto wrong = pq_sq_rq(one_segment({0, 1, 2}, 2, 8), {gt_segment({0, 1, 2}, 1, 8)});
    CHECK(wrong.tp == 0);
    CHECK(wrong.fp == 1);
    CHECK(wrong.fn == 1);
}

TEST_CASE("pq equals sq times rq whenever matches exist") {
    Rng rng(73);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t hw = 24;
        // ground truth: 2-4 disjoint segments
        std::vector<GtSegment> gts;
        std::size_t cursor = 0;
        const std::size_t n_gt = 2 + rng.below(3);
        for (std::size_t i = 0; i < n_gt && cursor + 3 < hw; ++i) {
            const std::size_t len = 2 + rng.below(4);
            std::vector<std::size_t> px;
            for (std::size_t p = cursor; p < std::min(cursor + len, hw); ++p) px.push_back(p);
            cursor += len + rng.below(2);
            gts.push_back(gt_segment(px, static_cast<std::uint16_t>(rng.below(3)), hw));
        }
        // prediction: copy some gt segments (jittered), add noise segments
        PanopticPrediction<double> pred;
        pred.height = 1;
        pred.width = hw;
        pred.segment_ids.assign(hw, 0);
        for (const auto& g : gts) {
            if (rng.below(3) == 0) continue;  // miss -> FN
            pred.segments.push_back({static_cast<std::uint16_t>(g.class_id), 0.9});
            const auto id = static_cast<std::uint32_t>(pred.segments.size());
            for (std::size_t p = 0; p < hw; ++p)
                if (g.mask[p] && pred.segment_ids[p] == 0 && rng.below(8) != 0)
                    pred.segment_ids[p] = id;
        }
        auto rep = pq_sq_rq(pred, gts);
        if (rep.tp == 0) continue;
        CHECK(std::abs(rep.pq - rep.sq * rep.rq) < 1e-12);
    }
}

TEST_CASE("similarity accumulator") {
    // 3 classes, width 4; classes 0 and 1 present, class 2 never appears.
    // Vision features are axis-aligned per class; the text table matches.
    const std::size_t d = 4;
    SegmentationSample gt;
    gt.height = gt.width = 4;
    gt.semantic.assign(16, 0);
    gt.instance.assign(16, 0);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 2; x < 4; ++x) gt.semantic[y * 4 + x] = 1;

    std::vector<double> f3(d * 16, 0.0);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            const std::size_t p = y * 4 + x;
            f3[(x < 2 ? 0 : 1) * 16 + p] = 1.0;  // channel == class
        }
    std::vector<double> table = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    SimilarityAccumulator<double> acc(3, d);
    CHECK_THROWS_AS(acc.finalize(), EmptyInputError);
    acc.add_sample(Td::from({d, 4, 4}, f3, false), gt, Td::from({3, d}, table, false));
    auto sim = acc.finalize();

    CHECK(sim.row_present[0]);
    CHECK(sim.row_present[1]);
    CHECK_FALSE(sim.row_present[2]);
    CHECK(sim.s(0, 0) == approx(1.0));
    CHECK(sim.s(1, 1) == approx(1.0));
    CHECK(sim.s(0, 1) == approx(0.0));
    CHECK(sim.s(1, 0) == approx(0.0));
    for (std::size_t b = 0; b < 3; ++b) CHECK(sim.s(2, b) == approx(0.0));
    CHECK(sim.diagonal_mean == approx(1.0));
    for (std::size_t i = 0; i < sim.s.size(); ++i) {
        CHECK(sim.s.data()[i] >= 0.0);
        CHECK(sim.s.data()[i] <= 1.0);
    }

    CHECK_THROWS_AS(
        acc.add_sample(Td::zeros({d + 1, 4, 4}), gt, Td::from({3, d}, table, false)),
        ShapeError);
}
