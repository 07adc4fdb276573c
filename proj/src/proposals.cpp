#include "ovseg/proposals.hpp"

#include <map>

namespace ovseg {

std::size_t GtSegment::area() const {
    std::size_t a = 0;
    for (std::uint8_t v : mask) a += v;
    return a;
}

// Instances become "thing" segments; the background stuff region becomes one
// segment of class 0. Ignore pixels belong to no segment. Fully occluded
// instance ids simply produce no segment.
std::vector<GtSegment> segments_of(const SegmentationSample& sample) {
    const std::size_t hw = static_cast<std::size_t>(sample.height) * sample.width;
    std::map<std::uint16_t, GtSegment> things;
    GtSegment stuff;
    stuff.class_id = kBackgroundClass;
    stuff.height = sample.height;
    stuff.width = sample.width;
    stuff.mask.assign(hw, 0);
    bool has_stuff = false;

    for (std::size_t p = 0; p < hw; ++p) {
        if (sample.semantic[p] == kIgnoreLabel) continue;
        const std::uint16_t inst = sample.instance[p];
        if (inst == 0) {
            stuff.mask[p] = 1;
            has_stuff = true;
            continue;
        }
        auto [it, fresh] = things.try_emplace(inst);
        if (fresh) {
            it->second.class_id = sample.semantic[p];
            it->second.height = sample.height;
            it->second.width = sample.width;
            it->second.mask.assign(hw, 0);
        }
        it->second.mask[p] = 1;
    }

    std::vector<GtSegment> out;
    if (has_stuff) out.push_back(std::move(stuff));
    for (auto& [id, seg] : things) out.push_back(std::move(seg));
    return out;
}

}  // namespace ovseg
