#include "ovseg/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "ovseg/errors.hpp"

namespace ovseg {

bool Vocabulary::is_train(std::size_t id) const {
    return std::find(train_ids.begin(), train_ids.end(), id) != train_ids.end();
}

std::vector<std::size_t> Vocabulary::novel_ids() const {
    std::vector<std::size_t> out;
    for (std::size_t id : test_ids)
        if (!is_train(id)) out.push_back(id);
    return out;
}

std::size_t Vocabulary::id_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return i;
    throw ConfigError("vocabulary: unknown class name '" + name + "'");
}

Vocabulary default_vocabulary() {
    Vocabulary v;
    v.names.push_back("background");
    v.recipes.push_back({});
    const char* colors[3] = {"red", "green", "blue"};
    const double hue_centers[3] = {0.0, 1.0 / 3.0, 2.0 / 3.0};
    const char* families[6] = {"circle", "square", "triangle", "ring", "bar", "cross"};
    for (int f = 0; f < 6; ++f)
        for (int c = 0; c < 3; ++c) {
            v.names.push_back(std::string(colors[c]) + families[f]);
            ClassRecipe r;
            r.family = static_cast<ShapeFamily>(f);
            r.hue_lo = hue_centers[c] - 0.05;
            r.hue_hi = hue_centers[c] + 0.05;
            v.recipes.push_back(r);
        }
    v.train_ids.resize(v.names.size());
    v.test_ids.resize(v.names.size());
    for (std::size_t i = 0; i < v.names.size(); ++i) v.train_ids[i] = v.test_ids[i] = i;
    return v;
}

void split_vocabulary(Vocabulary& vocab, std::size_t novel_count, std::uint64_t seed) {
    if (novel_count >= vocab.size())
        throw ConfigError("split_vocabulary: novel_count " + std::to_string(novel_count) +
                          " must be below vocabulary size " + std::to_string(vocab.size()));
    vocab.test_ids.resize(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) vocab.test_ids[i] = i;

    // candidates exclude the background stuff class, which stays trainable
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < vocab.size(); ++i)
        if (i != kBackgroundClass) pool.push_back(i);
    if (novel_count > pool.size())
        throw ConfigError("split_vocabulary: not enough shape classes to hold out");
    Rng rng(Rng::derive(seed, 0x5eedULL));
    for (std::size_t i = 0; i < novel_count; ++i) {  // partial Fisher-Yates
        const std::size_t j = i + rng.below(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> novel(pool.begin(), pool.begin() + novel_count);
    std::sort(novel.begin(), novel.end());
    vocab.train_ids.clear();
    for (std::size_t i = 0; i < vocab.size(); ++i)
        if (std::find(novel.begin(), novel.end(), i) == novel.end())
            vocab.train_ids.push_back(i);
}

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);  // wrap hue
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

bool inside_shape(ShapeFamily f, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    switch (f) {
        case ShapeFamily::Circle:
            return dx * dx + dy * dy <= r * r;
        case ShapeFamily::Square:
            return ax <= r * 0.82 && ay <= r * 0.82;
        case ShapeFamily::Triangle:
            // apex up: half-width grows linearly from apex (dy=-r) to base (dy=+r)
            return dy >= -r && dy <= r && ax <= (dy + r) * 0.55;
        case ShapeFamily::Ring: {
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
        }
        case ShapeFamily::Bar:
            return ax <= r && ay <= r * 0.32;
        case ShapeFamily::Cross:
            return (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r);
    }
    return false;
}

SegmentationSample render_sample(const DatasetSpec& spec, const Vocabulary& vocab,
                                 const std::vector<std::size_t>& drawable, Rng& rng) {
    const std::size_t hw = spec.image_size;
    SegmentationSample s;
    s.height = s.width = static_cast<std::uint32_t>(hw);
    s.image.assign(3 * hw * hw, 0.f);
    s.semantic.assign(hw * hw, static_cast<std::uint16_t>(kBackgroundClass));
    s.instance.assign(hw * hw, 0);

    // neutral noisy canvas for the background stuff class
    for (std::size_t p = 0; p < hw * hw; ++p) {
        const double base = 0.5 + 0.08 * (rng.uniform() - 0.5);
        for (std::size_t ch = 0; ch < 3; ++ch)
            s.image[ch * hw * hw + p] =
                static_cast<float>(base + 0.02 * (rng.uniform() - 0.5));
    }

    std::size_t n_cls = spec.classes_min + rng.below(spec.classes_max - spec.classes_min + 1);
    n_cls = std::min(n_cls, drawable.size());
    std::vector<std::size_t> pool = drawable;
    for (std::size_t i = 0; i < n_cls; ++i) {
        const std::size_t j = i + rng.below(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    const std::size_t n_inst =
        spec.instances_min + rng.below(spec.instances_max - spec.instances_min + 1);

    for (std::size_t k = 1; k <= n_inst; ++k) {  // back-to-front: later paints over
        const std::size_t cls = pool[rng.below(n_cls)];
        const ClassRecipe& rec = vocab.recipes[cls];
        const Rgb color = hsv_to_rgb(rng.uniform(rec.hue_lo, rec.hue_hi),
                                     rng.uniform(0.75, 1.0), rng.uniform(0.7, 0.95));
        const double r = rng.uniform(0.14, 0.30) * static_cast<double>(hw);
        const double cx = rng.uniform(0.2, 0.8) * static_cast<double>(hw);
        const double cy = rng.uniform(0.2, 0.8) * static_cast<double>(hw);
        for (std::size_t y = 0; y < hw; ++y)
            for (std::size_t x = 0; x < hw; ++x) {
                if (!inside_shape(rec.family, static_cast<double>(x) - cx,
                                  static_cast<double>(y) - cy, r))
                    continue;
                const std::size_t p = y * hw + x;
                const double jitter = 0.04 * (rng.uniform() - 0.5);
                auto put = [&](std::size_t ch, double v) {
                    s.image[ch * hw * hw + p] =
                        static_cast<float>(std::clamp(v + jitter, 0.0, 1.0));
                };
                put(0, color.r);
                put(1, color.g);
                put(2, color.b);
                s.semantic[p] = static_cast<std::uint16_t>(cls);
                s.instance[p] = static_cast<std::uint16_t>(k);
            }
    }
    return s;
}

}  // namespace

std::vector<SegmentationSample> generate(const DatasetSpec& spec, const Vocabulary& vocab,
                                         const std::vector<std::size_t>& drawable) {
    if (spec.image_size == 0 || spec.image_size % 32 != 0)
        throw ConfigError("dataset: image size must be a positive multiple of 32");
    if (spec.classes_min == 0 || spec.classes_min > spec.classes_max ||
        spec.instances_min == 0 || spec.instances_min > spec.instances_max)
        throw ConfigError("dataset: empty class/instance count range");
    if (spec.classes_max > vocab.size())
        throw ConfigError("dataset: classes per image exceed vocabulary size");
    if (drawable.empty()) throw ConfigError("dataset: no drawable classes");
    std::vector<SegmentationSample> out;
    out.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        Rng rng(Rng::derive(spec.seed, i));
        out.push_back(render_sample(spec, vocab, drawable, rng));
    }
    return out;
}

std::vector<SegmentationSample> generate(const DatasetSpec& spec, const Vocabulary& vocab) {
    std::vector<std::size_t> drawable;
    for (std::size_t id : vocab.train_ids)
        if (id != kBackgroundClass) drawable.push_back(id);
    return generate(spec, vocab, drawable);
}

std::size_t dominant_class(const SegmentationSample& s) {
    std::unordered_map<std::uint16_t, std::size_t> counts;
    for (std::uint16_t c : s.semantic)
        if (c != kBackgroundClass && c != kIgnoreLabel) ++counts[c];
    std::size_t best = kBackgroundClass, best_n = 0;
    for (const auto& [c, n] : counts)
        if (n > best_n || (n == best_n && c < best)) {
            best = c;
            best_n = n;
        }
    return best;
}

}  // namespace ovseg
