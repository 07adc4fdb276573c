#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ovseg/backbones.hpp"
#include "ovseg/errors.hpp"

using namespace ovseg;
using approx = doctest::Approx;

namespace {

BackboneConfig small_cfg() {
    BackboneConfig cfg;
    cfg.widths = {8, 8, 16, 16};
    return cfg;
}

Tensor<float> noise_image(std::size_t h, std::size_t w, Rng& rng) {
    Tensor<float> img = Tensor<float>::zeros({3, h, w});
    for (auto& x : img.mutable_data()) x = static_cast<float>(rng.uniform());
    return img;
}

}  // namespace

TEST_CASE("vision_encode honors the stride contract") {
    Rng rng(1);
    VisionBackbone<float> bb(small_cfg(), rng);
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{64, 64}, {32, 64}, {96, 32}}) {
        auto pyr = vision_encode(bb, noise_image(h, w, rng));
        CHECK(pyr.f0.shape() == Shape{8, h / 4, w / 4});
        CHECK(pyr.f1.shape() == Shape{8, h / 8, w / 8});
        CHECK(pyr.f2.shape() == Shape{16, h / 16, w / 16});
        CHECK(pyr.f3.shape() == Shape{16, h / 32, w / 32});
    }
    CHECK_THROWS_AS(vision_encode(bb, Tensor<float>::zeros({3, 50, 50})), ShapeError);
    CHECK_THROWS_AS(vision_encode(bb, Tensor<float>::zeros({1, 64, 64})), ShapeError);
}

TEST_CASE("vision_encode is deterministic") {
    Rng rng(2);
    VisionBackbone<float> bb(small_cfg(), rng);
    Tensor<float> img = noise_image(64, 64, rng);
    auto a = vision_encode(bb, img);
    auto b = vision_encode(bb, img);
    CHECK(a.f3.data() == b.f3.data());

    Rng rng2(2);
    VisionBackbone<float> bb2(small_cfg(), rng2);
    NamedParams<float> pa, pb;
    bb.collect("v", pa);
    bb2.collect("v", pb);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second.data() == pb[i].second.data());
}

TEST_CASE("freeze_copy is a frozen snapshot") {
    Rng rng(3);
    VisionBackbone<float> bb(small_cfg(), rng);
    VisionBackbone<float> frozen = freeze_copy(bb);
    Tensor<float> img = noise_image(64, 64, rng);
    CHECK(vision_encode(bb, img).f3.data() == vision_encode(frozen, img).f3.data());

    // snapshot the copy's bytes, then mutate the original arbitrarily
    NamedParams<float> frozen_params;
    frozen.collect("v", frozen_params);
    std::vector<std::vector<float>> before;
    for (auto& [n, t] : frozen_params) before.push_back(t.data());

    NamedParams<float> live;
    bb.collect("v", live);
    for (auto& [n, t] : live)
        for (auto& x : t.mutable_data()) x += 0.25f;

    for (std::size_t i = 0; i < frozen_params.size(); ++i)
        CHECK(frozen_params[i].second.data() == before[i]);
    CHECK(vision_encode(bb, img).f3.data() != vision_encode(frozen, img).f3.data());

    // gradients never reach the copy
    auto pyr = vision_encode(frozen, img);
    CHECK_FALSE(pyr.f3.requires_grad());
    backward(sum_all(vision_encode(frozen, img).f3));
    for (auto& [n, t] : frozen_params) CHECK_FALSE(t.has_grad());
}

TEST_CASE("per-stage freezing stops gradients only there") {
    Rng rng(4);
    VisionBackbone<float> bb(small_cfg(), rng);
    bb.frozen = {true, true, false, false};
    bb.apply_freeze_flags();
    Tensor<float> img = noise_image(32, 32, rng);
    backward(sum_all(vision_encode(bb, img).f3));
    NamedParams<float> st0, st3;
    bb.collect_stage(0, st0);
    bb.collect_stage(3, st3);
    for (auto& [n, t] : st0) CHECK_FALSE(t.has_grad());
    for (auto& [n, t] : st3) CHECK(t.has_grad());
}

TEST_CASE("prompt templates are well formed") {
    PromptTemplateSet tset = default_templates();
    CHECK(tset.templates.size() == 14);
    for (const auto& t : tset.templates) {
        const auto pos = t.find("{}");
        REQUIRE(pos != std::string::npos);
        CHECK(t.find("{}", pos + 1) == std::string::npos);
    }
    CHECK(fill_template("a photo of a {}.", "redcircle") == "a photo of a redcircle.");
    CHECK_THROWS_AS(fill_template("no placeholder", "x"), ConfigError);
}

TEST_CASE("text encoder tokenizes and embeds") {
    Rng rng(5);
    Vocabulary vocab = default_vocabulary();
    TextEncoder<float> enc(vocab.names, default_templates(), 16, rng);
    CHECK(enc.tokenize("A photo of a redcircle.").size() == 5);
    CHECK_THROWS_AS(enc.tokenize("a photo of a zebra"), ConfigError);

    Tensor<float> e = enc.encode_sentence("There is a bluecross in the scene");
    CHECK(e.shape() == Shape{1, 16});
    float norm = 0;
    for (float x : e.data()) norm += x * x;
    CHECK(std::sqrt(norm) == approx(1.0).epsilon(1e-6));
}

TEST_CASE("text_encode averages templates and renormalizes") {
    Rng rng(6);
    Vocabulary vocab = default_vocabulary();
    PromptTemplateSet all = default_templates();
    TextEncoder<float> enc(vocab.names, all, 16, rng);

    PromptTemplateSet one{{all.templates[0]}};
    auto t1 = text_encode(enc, {"greenring"}, one);
    auto direct = enc.encode_sentence(fill_template(all.templates[0], "greenring"));
    for (std::size_t j = 0; j < 16; ++j)
        CHECK(t1.t(0, j) == approx(direct(0, j)).epsilon(1e-6));

    PromptTemplateSet two{{all.templates[0], all.templates[2]}};
    auto t2 = text_encode(enc, {"greenring"}, two);
    auto e1 = enc.encode_sentence(fill_template(all.templates[0], "greenring"));
    auto e2 = enc.encode_sentence(fill_template(all.templates[2], "greenring"));
    Tensor<float> want = normalize_rows(mul_scalar(add(e1, e2), 0.5f));
    for (std::size_t j = 0; j < 16; ++j)
        CHECK(t2.t(0, j) == approx(want(0, j)).epsilon(1e-6));

    // full table: unit rows, t_hat starts equal to t, order-invariant
    std::vector<std::string> classes(vocab.names.begin() + 1, vocab.names.end());
    auto table = text_encode(enc, classes, all);
    CHECK(table.t.shape() == Shape{classes.size(), 16});
    for (std::size_t i = 0; i < classes.size(); ++i) {
        double norm = 0;
        for (std::size_t j = 0; j < 16; ++j) norm += double(table.t(i, j)) * table.t(i, j);
        CHECK(std::sqrt(norm) == approx(1.0).epsilon(1e-6));
    }
    CHECK(table.t_hat.data() == table.t.data());

    PromptTemplateSet reversed = all;
    std::reverse(reversed.templates.begin(), reversed.templates.end());
    auto table_rev = text_encode(enc, classes, reversed);
    for (std::size_t i = 0; i < table.t.size(); ++i)
        CHECK(table.t.data()[i] == approx(table_rev.t.data()[i]).epsilon(1e-6));
}

TEST_CASE("info_nce matches the closed form at perfect alignment") {
    const std::size_t b = 4;
    Tensor<float> eye = Tensor<float>::zeros({b, b});
    for (std::size_t i = 0; i < b; ++i) eye.mutable_data()[i * b + i] = 1.f;
    for (float tau : {0.07f, 1.0f}) {
        const double want = std::log(1.0 + (b - 1) * std::exp(-1.0 / tau));
        CHECK(info_nce_loss(eye, eye, tau).item() == approx(want).epsilon(1e-5));
    }
    CHECK_THROWS_AS(info_nce_loss(Tensor<float>::zeros({1, 4}),
                                  Tensor<float>::zeros({1, 4}), 0.07f),
                    ConfigError);
}

TEST_CASE("contrastive pretraining runs and reduces the loss") {
    Vocabulary vocab = default_vocabulary();
    DatasetSpec spec;
    spec.count = 60;
    spec.seed = 500;
    spec.classes_min = spec.classes_max = 1;
    spec.instances_min = 1;
    spec.instances_max = 2;
    auto train = generate(spec, vocab);
    DatasetSpec hspec = spec;
    hspec.count = 30;
    hspec.seed = 501;
    auto held = generate(hspec, vocab);

    Rng rng(7);
    VisionBackbone<float> bb(small_cfg(), rng);
    TextEncoder<float> enc(vocab.names, default_templates(), 16, rng);

    PretrainConfig pc;
    pc.steps = 0;
    pc.batch = 6;
    pc.seed = 9;
    auto untrained = pretrain_contrastive(bb, enc, vocab, default_templates(), train, held, pc);
    CHECK(untrained.steps_run == 0);
    CHECK(untrained.retrieval_accuracy < 0.45);  // ~chance on 18 classes

    pc.steps = 200;
    auto report = pretrain_contrastive(bb, enc, vocab, default_templates(), train, held, pc);
    CHECK(report.steps_run == 200);
    CHECK(std::isfinite(report.final_loss));
    CHECK(report.final_loss < 1.3);  // untrained symmetric CE ~ ln(6) = 1.79
    CHECK(report.retrieval_accuracy >= 0.0);
    CHECK(report.retrieval_accuracy <= 1.0);

    // a single-class corpus cannot form a contrastive batch
    DatasetSpec mono = spec;
    mono.count = 4;
    auto monoset = generate(mono, vocab, {vocab.id_of("redcircle")});
    CHECK_THROWS_AS(
        pretrain_contrastive(bb, enc, vocab, default_templates(), monoset, {}, pc),
        ConfigError);
}

TEST_CASE("pretraining is bit-reproducible") {
    Vocabulary vocab = default_vocabulary();
    DatasetSpec spec;
    spec.count = 24;
    spec.seed = 800;
    spec.classes_min = spec.classes_max = 1;
    auto train = generate(spec, vocab);

    auto run = [&] {
        Rng rng(11);
        VisionBackbone<float> bb(small_cfg(), rng);
        TextEncoder<float> enc(vocab.names, default_templates(), 16, rng);
        PretrainConfig pc;
        pc.steps = 25;
        pc.batch = 4;
        pc.seed = 12;
        pretrain_contrastive(bb, enc, vocab, default_templates(), train, {}, pc);
        NamedParams<float> params;
        bb.collect("v", params);
        enc.collect("t", params);
        std::vector<float> flat;
        for (auto& [n, t] : params) flat.insert(flat.end(), t.data().begin(), t.data().end());
        return flat;
    };
    CHECK(run() == run());
}
