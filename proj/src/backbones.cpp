#include "ovseg/backbones.hpp"

#include <algorithm>
#include <cctype>

#include "ovseg/adamw.hpp"
#include "ovseg/errors.hpp"

namespace ovseg {

PromptTemplateSet default_templates() {
    return {{
        "a photo of a {}.",
        "This is a photo of a {}",
        "There is a {} in the scene",
        "There is the {} in the scene",
        "a photo of a {} in the scene",
        "a photo of a small {}.",
        "a photo of a medium {}.",
        "a photo of a large {}.",
        "This is a photo of a small {}.",
        "This is a photo of a medium {}.",
        "This is a photo of a large {}.",
        "There is a small {} in the scene.",
        "There is a medium {} in the scene.",
        "There is a large {} in the scene.",
    }};
}

std::string fill_template(const std::string& tmpl, const std::string& name) {
    const std::size_t pos = tmpl.find("{}");
    if (pos == std::string::npos || tmpl.find("{}", pos + 1) != std::string::npos)
        throw ConfigError("template must contain exactly one {} placeholder: " + tmpl);
    return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

namespace {

std::vector<std::string> words_of(const std::string& sentence) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : sentence) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

template <typename T>
TextEncoder<T>::TextEncoder(const std::vector<std::string>& class_names,
                            const PromptTemplateSet& tmpl, std::size_t d, Rng& rng) {
    auto intern = [this](const std::string& w) {
        if (token_ids.emplace(w, tokens.size()).second) tokens.push_back(w);
    };
    for (const auto& t : tmpl.templates)
        for (const auto& w : words_of(fill_template(t, ""))) intern(w);
    for (const auto& name : class_names) {
        const auto ws = words_of(name);
        if (ws.size() != 1)
            throw ConfigError("class name must be a single token: '" + name + "'");
        intern(ws[0]);
    }
    embeddings = Tensor<T>::he_uniform({tokens.size(), d}, d, rng);
    pool = Linear<T>(d, d, rng);
}

template <typename T>
std::vector<std::size_t> TextEncoder<T>::tokenize(const std::string& sentence) const {
    std::vector<std::size_t> ids;
    for (const auto& w : words_of(sentence)) {
        auto it = token_ids.find(w);
        if (it == token_ids.end())
            throw ConfigError("text encoder: unknown token '" + w + "'");
        ids.push_back(it->second);
    }
    if (ids.empty()) throw ConfigError("text encoder: empty sentence");
    return ids;
}

template <typename T>
Tensor<T> TextEncoder<T>::encode_sentence(const std::string& sentence) const {
    const auto ids = tokenize(sentence);
    Tensor<T> toks = gather_rows(embeddings, ids);  // [n x d]
    Tensor<T> ones = Tensor<T>::full({1, ids.size()}, T(1) / static_cast<T>(ids.size()));
    return normalize_rows(pool.forward(matmul(ones, toks)));
}

template struct TextEncoder<float>;
template struct TextEncoder<double>;

namespace {

// dominant-class index of every sample, grouped
std::vector<std::pair<std::size_t, std::vector<std::size_t>>> group_by_class(
    const std::vector<SegmentationSample>& set) {
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> groups;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const std::size_t c = dominant_class(set[i]);
        auto it = std::find_if(groups.begin(), groups.end(),
                               [c](const auto& g) { return g.first == c; });
        if (it == groups.end())
            groups.push_back({c, {i}});
        else
            it->second.push_back(i);
    }
    std::sort(groups.begin(), groups.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return groups;
}

Tensor<float> pooled_image_embedding(const VisionBackbone<float>& backbone,
                                     const SegmentationSample& s, bool mirror = false) {
    Tensor<float> img = image_tensor(s);
    if (mirror) {
        // every shape family is symmetric about its vertical axis, so a
        // mirrored image is a fresh in-distribution sample for free
        const std::size_t h = s.height, w = s.width;
        std::vector<float> m(3 * h * w);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    m[(c * h + y) * w + x] = img.data()[(c * h + y) * w + (w - 1 - x)];
        img = Tensor<float>::from({3, h, w}, m, false);
    }
    FeaturePyramid<float> pyr = vision_encode(backbone, img);
    const std::size_t d = pyr.f3.shape()[0];
    return reshape(avg_pool_grid(pyr.f3, 1), {1, d});
}

}  // namespace

double retrieval_accuracy(const VisionBackbone<float>& backbone,
                          const TextEncoder<float>& text, const Vocabulary& vocab,
                          const PromptTemplateSet& templates,
                          const std::vector<SegmentationSample>& heldout) {
    if (heldout.empty()) throw EmptyInputError("retrieval: empty held-out set");
    std::vector<std::size_t> class_ids;
    std::vector<std::string> class_names;
    for (std::size_t id : vocab.train_ids) {
        if (id == kBackgroundClass) continue;
        class_ids.push_back(id);
        class_names.push_back(vocab.names[id]);
    }
    const Tensor<float> table = text_encode(text, class_names, templates).t.detach();
    std::size_t hits = 0;
    for (const auto& s : heldout) {
        const Tensor<float> emb = normalize_rows(pooled_image_embedding(backbone, s));
        Tensor<float> scores = matmul(emb, transpose(table));  // [1 x |C|]
        std::size_t best = 0;
        for (std::size_t c = 1; c < class_ids.size(); ++c)
            if (scores(0, c) > scores(0, best)) best = c;
        if (class_ids[best] == dominant_class(s)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(heldout.size());
}

PretrainReport pretrain_contrastive(VisionBackbone<float>& backbone,
                                    TextEncoder<float>& text, const Vocabulary& vocab,
                                    const PromptTemplateSet& templates,
                                    const std::vector<SegmentationSample>& train_set,
                                    const std::vector<SegmentationSample>& heldout,
                                    const PretrainConfig& cfg) {
    if (train_set.empty()) throw EmptyInputError("pretrain: empty training set");
    auto groups = group_by_class(train_set);
    if (groups.size() < 2 || cfg.batch < 2)
        throw ConfigError("pretrain: need batches with at least 2 distinct classes");

    AdamW<float> opt({0.9f, 0.999f, 1e-8f, cfg.weight_decay});
    NamedParams<float> params;
    backbone.collect("clipv", params);
    text.collect("clipt", params);
    for (auto& [name, t] : params) opt.add_param(name, t, cfg.lr);

    PretrainReport report;
    const std::size_t batch = std::min(cfg.batch, groups.size());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Rng rng(Rng::derive(cfg.seed, step));
        std::vector<std::size_t> order(groups.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t j = i + rng.below(order.size() - i);
            std::swap(order[i], order[j]);
        }
        std::vector<Tensor<float>> img_rows;
        std::vector<std::string> batch_names;
        for (std::size_t i = 0; i < batch; ++i) {
            const auto& [cls, members] = groups[order[i]];
            const auto& sample = train_set[members[rng.below(members.size())]];
            img_rows.push_back(pooled_image_embedding(backbone, sample, rng.below(2) == 1));
            batch_names.push_back(vocab.names[cls]);
        }
        Tensor<float> img = normalize_rows(concat_rows(img_rows));
        Tensor<float> txt = text_encode(text, batch_names, templates).t;
        Tensor<float> loss = info_nce_loss(img, txt, cfg.tau);
        opt.zero_grad();
        backward(loss);
        opt.step();
        report.final_loss = loss.item();
        ++report.steps_run;
    }
    report.retrieval_accuracy =
        heldout.empty() ? 0.0
                        : retrieval_accuracy(backbone, text, vocab, templates, heldout);
    return report;
}

}  // namespace ovseg
