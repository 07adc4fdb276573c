#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ovseg/rng.hpp"

namespace ovseg {

inline constexpr std::uint16_t kIgnoreLabel = 0xFFFF;
inline constexpr std::size_t kBackgroundClass = 0;

enum class ShapeFamily : int { Circle = 0, Square, Triangle, Ring, Bar, Cross };

struct ClassRecipe {
    ShapeFamily family = ShapeFamily::Circle;
    double hue_lo = 0.0, hue_hi = 0.0;  // HSV hue band in [0,1)
};

// Ordered class list; index in `names` is the class id everywhere.
struct Vocabulary {
    std::vector<std::string> names;
    std::vector<ClassRecipe> recipes;      // parallel to names; background's unused
    std::vector<std::size_t> train_ids;    // C_train
    std::vector<std::size_t> test_ids;     // C_test (the full list)

    std::size_t size() const { return names.size(); }
    bool is_train(std::size_t id) const;
    std::vector<std::size_t> novel_ids() const;  // test minus train
    std::size_t id_of(const std::string& name) const;  // throws ConfigError if missing
};

// Background stuff class + 6 shape families x 3 hue bands = 19 classes.
Vocabulary default_vocabulary();

// C_test stays the full vocabulary; C_train drops `novel_count` seeded-random
// shape classes. The background stuff class always remains trainable.
void split_vocabulary(Vocabulary& vocab, std::size_t novel_count, std::uint64_t seed);

struct SegmentationSample {
    std::uint32_t height = 0, width = 0;
    std::vector<float> image;             // CHW, 3*H*W, values in [0,1]
    std::vector<std::uint16_t> semantic;  // H*W class ids; kIgnoreLabel = ignore
    std::vector<std::uint16_t> instance;  // H*W instance ids; 0 = background/stuff

    bool operator==(const SegmentationSample&) const = default;
};

struct DatasetSpec {
    std::size_t count = 0;
    std::size_t image_size = 64;  // square, multiple of 32
    std::size_t classes_min = 1, classes_max = 3;
    std::size_t instances_min = 1, instances_max = 4;
    std::uint64_t seed = 0;
};

// Seeded, order-independent generation (per-sample derived streams). Shape
// classes are drawn from `drawable`; the overload defaults it to the
// vocabulary's training classes, which is what keeps novel classes out of
// training data.
std::vector<SegmentationSample> generate(const DatasetSpec& spec, const Vocabulary& vocab,
                                         const std::vector<std::size_t>& drawable);
std::vector<SegmentationSample> generate(const DatasetSpec& spec, const Vocabulary& vocab);

// Most frequent non-background class; used by the contrastive pretraining
// stage where every image has a single dominant class.
std::size_t dominant_class(const SegmentationSample& s);

struct SegbContent {
    Vocabulary vocab;  // names only; recipes/splits are not serialized
    std::vector<SegmentationSample> samples;
};

void write_segb(const std::vector<SegmentationSample>& samples, const Vocabulary& vocab,
                const std::string& path);
SegbContent read_segb(const std::string& path);

}  // namespace ovseg
