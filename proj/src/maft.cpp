#include "ovseg/maft.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace ovseg {

namespace {

// IoU between a binarized proposal plane and one ground-truth mask, with
// excluded pixels removed from both sides.
double mask_iou(const std::vector<std::uint8_t>& prop, const std::vector<std::uint8_t>& gt,
                const std::vector<std::uint8_t>& valid) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t p = 0; p < prop.size(); ++p) {
        if (!valid[p]) continue;
        const bool a = prop[p] != 0, b = gt[p] != 0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

template <typename T>
ScoreMatrix<T> iou_targets(const MaskProposalSet<T>& m, const SegmentationSample& gt,
                           std::size_t num_classes, bool panoptic) {
    const std::size_t n = m.n();
    const std::size_t h = m.mask_logits.extent(1);
    const std::size_t w = m.mask_logits.extent(2);
    if (h != gt.height || w != gt.width)
        throw ShapeError("iou_targets: proposal and ground-truth extents differ");

    const auto segs = segments_of(gt);
    for (const auto& s : segs)
        if (s.class_id >= num_classes)
            throw ConfigError("iou_targets: ground truth contains class id " +
                              std::to_string(s.class_id) + " outside the " +
                              std::to_string(num_classes) + "-class vocabulary");

    const std::size_t hw = h * w;
    std::vector<std::uint8_t> valid(hw);
    for (std::size_t p = 0; p < hw; ++p) valid[p] = gt.semantic[p] != kIgnoreLabel;

    // binarize at probability 0.5, i.e. logit > 0
    const auto& logits = m.mask_logits.data();
    std::vector<std::vector<std::uint8_t>> bin(n, std::vector<std::uint8_t>(hw));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) bin[i][p] = logits[i * hw + p] > T(0);

    std::vector<T> out(n * num_classes, T(0));
    if (panoptic) {
        for (const auto& s : segs)
            for (std::size_t i = 0; i < n; ++i) {
                const T iou = static_cast<T>(mask_iou(bin[i], s.mask, valid));
                out[i * num_classes + s.class_id] =
                    std::max(out[i * num_classes + s.class_id], iou);
            }
    } else {
        std::vector<std::vector<std::uint8_t>> uni(num_classes);
        for (const auto& s : segs) {
            auto& u = uni[s.class_id];
            if (u.empty()) u.assign(hw, 0);
            for (std::size_t p = 0; p < hw; ++p) u[p] |= s.mask[p];
        }
        for (std::size_t c = 0; c < num_classes; ++c) {
            if (uni[c].empty()) continue;
            for (std::size_t i = 0; i < n; ++i)
                out[i * num_classes + c] = static_cast<T>(mask_iou(bin[i], uni[c], valid));
        }
    }
    return {Tensor<T>::from({n, num_classes}, out, false), ScoreKind::kIouTarget};
}

template ScoreMatrix<float> iou_targets(const MaskProposalSet<float>&, const SegmentationSample&,
                                        std::size_t, bool);
template ScoreMatrix<double> iou_targets(const MaskProposalSet<double>&,
                                         const SegmentationSample&, std::size_t, bool);

}  // namespace ovseg
