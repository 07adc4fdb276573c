#include "ovseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ovseg {

namespace {

template <typename T>
void check_inference_shapes(const ScoreMatrix<T>& s_cls, const Tensor<T>& mask_logits) {
    if (mask_logits.ndim() != 3 || s_cls.s.ndim() != 2 ||
        s_cls.s.extent(0) != mask_logits.extent(0))
        throw ShapeError("inference: scores and masks disagree on proposal count");
}

}  // namespace

template <typename T>
SemanticPrediction<T> semantic_inference(const ScoreMatrix<T>& s_cls,
                                         const Tensor<T>& mask_logits) {
    check_inference_shapes(s_cls, mask_logits);
    const std::size_t n = mask_logits.extent(0);
    const std::size_t h = mask_logits.extent(1), w = mask_logits.extent(2);
    const std::size_t c = s_cls.classes();
    const std::size_t hw = h * w;

    const auto& sd = s_cls.s.data();
    const auto& md = mask_logits.data();
    std::vector<T> scores(c * hw, T(0));
    std::vector<T> sig(hw);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < hw; ++p)
            sig[p] = T(1) / (T(1) + std::exp(-md[i * hw + p]));
        for (std::size_t k = 0; k < c; ++k) {
            const T s = sd[i * c + k];
            if (s == T(0)) continue;
            T* row = scores.data() + k * hw;
            for (std::size_t p = 0; p < hw; ++p) row[p] += s * sig[p];
        }
    }

    SemanticPrediction<T> out;
    out.height = h;
    out.width = w;
    out.labels.assign(hw, 0);
    for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (scores[k * hw + p] > scores[best * hw + p]) best = k;
        out.labels[p] = static_cast<std::uint16_t>(best);
    }
    out.scores = Tensor<T>::from({c, h, w}, scores, false);
    return out;
}

template <typename T>
PanopticPrediction<T> panoptic_inference(const ScoreMatrix<T>& s_cls,
                                         const Tensor<T>& mask_logits,
                                         const PanopticThresholds& th) {
    check_inference_shapes(s_cls, mask_logits);
    const std::size_t n = mask_logits.extent(0);
    const std::size_t h = mask_logits.extent(1), w = mask_logits.extent(2);
    const std::size_t c = s_cls.classes();
    const std::size_t hw = h * w;
    const auto& sd = s_cls.s.data();
    const auto& md = mask_logits.data();

    std::vector<std::size_t> cls(n, 0);
    std::vector<T> conf(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k)
            if (sd[i * c + k] > sd[i * c + best]) best = k;
        cls[i] = best;
        conf[i] = sd[i * c + best];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });

    PanopticPrediction<T> out;
    out.height = h;
    out.width = w;
    out.segment_ids.assign(hw, 0);
    for (std::size_t i : order) {
        if (static_cast<double>(conf[i]) < th.confidence) continue;
        std::size_t orig = 0, kept = 0;
        std::vector<std::size_t> pixels;
        for (std::size_t p = 0; p < hw; ++p) {
            if (md[i * hw + p] <= T(0)) continue;  // probability <= 0.5
            ++orig;
            if (out.segment_ids[p] == 0) {
                ++kept;
                pixels.push_back(p);
            }
        }
        if (orig == 0 || static_cast<double>(kept) / static_cast<double>(orig) < th.overlap)
            continue;
        out.segments.push_back({static_cast<std::uint16_t>(cls[i]), conf[i]});
        const auto id = static_cast<std::uint32_t>(out.segments.size());
        for (std::size_t p : pixels) out.segment_ids[p] = id;
    }
    return out;
}

MiouReport miou(const std::vector<std::uint16_t>& pred_labels, const SegmentationSample& gt,
                std::size_t num_classes) {
    if (pred_labels.size() != gt.semantic.size())
        throw ShapeError("miou: prediction and ground truth differ in size");
    std::vector<std::size_t> inter(num_classes, 0), uni(num_classes, 0);
    for (std::size_t p = 0; p < pred_labels.size(); ++p) {
        if (gt.semantic[p] == kIgnoreLabel) continue;
        const std::size_t g = gt.semantic[p];
        const std::size_t q = pred_labels[p];
        if (g >= num_classes || q >= num_classes)
            throw ConfigError("miou: class id outside the vocabulary");
        if (g == q) {
            ++inter[g];
            ++uni[g];
        } else {
            ++uni[g];
            ++uni[q];
        }
    }
    MiouReport rep;
    rep.iou.assign(num_classes, 0.0);
    rep.present.assign(num_classes, 0);
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        if (uni[k] == 0) continue;  // absent classes are excluded, not zeros
        rep.present[k] = 1;
        rep.iou[k] = static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
        sum += rep.iou[k];
        ++count;
    }
    if (count > 0) {
        rep.defined = true;
        rep.mean = sum / static_cast<double>(count);
    }
    return rep;
}

template <typename T>
PqReport pq_sq_rq(const PanopticPrediction<T>& pred, const std::vector<GtSegment>& gt) {
    const std::size_t hw = pred.segment_ids.size();
    const std::size_t np = pred.segments.size();

    std::vector<std::size_t> pred_area(np, 0);
    for (std::size_t p = 0; p < hw; ++p)
        if (pred.segment_ids[p] != 0) ++pred_area[pred.segment_ids[p] - 1];

    PqReport rep;
    std::vector<char> pred_matched(np, 0);
    for (const auto& g : gt) {
        if (g.mask.size() != hw) throw ShapeError("pq: segment extents differ");
        int hit = -1;
        double hit_iou = 0;
        for (std::size_t i = 0; i < np; ++i) {
            if (pred.segments[i].class_id != g.class_id) continue;
            std::size_t inter = 0;
            for (std::size_t p = 0; p < hw; ++p)
                inter += g.mask[p] && pred.segment_ids[p] == i + 1;
            const double uni = static_cast<double>(pred_area[i] + g.area() - inter);
            const double iou = uni > 0 ? static_cast<double>(inter) / uni : 0.0;
            if (iou > 0.5) {
                if (hit >= 0) throw Error("pq: non-unique match despite IoU > 0.5");
                hit = static_cast<int>(i);
                hit_iou = iou;
            }
        }
        if (hit >= 0) {
            if (pred_matched[hit]) throw Error("pq: prediction matched twice");
            pred_matched[hit] = 1;
            ++rep.tp;
            rep.iou_sum += hit_iou;
        } else {
            ++rep.fn;
        }
    }
    for (std::size_t i = 0; i < np; ++i) rep.fp += !pred_matched[i];

    const double denom = static_cast<double>(rep.tp) + 0.5 * static_cast<double>(rep.fp) +
                         0.5 * static_cast<double>(rep.fn);
    if (rep.tp > 0) rep.sq = rep.iou_sum / static_cast<double>(rep.tp);
    if (denom > 0) {
        rep.pq = rep.iou_sum / denom;
        rep.rq = static_cast<double>(rep.tp) / denom;
    }
    return rep;
}

template <typename T>
SimilarityAccumulator<T>::SimilarityAccumulator(std::size_t num_classes, std::size_t dim)
    : c_(num_classes), d_(dim), vsum_(num_classes * dim, 0.0), vcount_(num_classes, 0),
      tsum_(num_classes * dim, 0.0) {
    if (num_classes == 0 || dim == 0)
        throw ConfigError("similarity: class count and width must be positive");
}

template <typename T>
void SimilarityAccumulator<T>::add_sample(const Tensor<T>& f3, const SegmentationSample& gt,
                                          const Tensor<T>& t_hat) {
    if (f3.ndim() != 3 || f3.extent(0) != d_)
        throw ShapeError("similarity: feature width mismatch");
    if (t_hat.ndim() != 2 || t_hat.extent(0) != c_ || t_hat.extent(1) != d_)
        throw ShapeError("similarity: text table shape mismatch");

    const std::size_t hw = gt.height * gt.width;
    std::vector<std::size_t> rows;
    std::vector<T> logits;
    for (std::size_t k = 0; k < c_; ++k) {
        bool any = false;
        for (std::size_t p = 0; p < hw; ++p)
            if (gt.semantic[p] == k) {
                any = true;
                break;
            }
        if (!any) continue;
        rows.push_back(k);
        for (std::size_t p = 0; p < hw; ++p)
            logits.push_back(gt.semantic[p] == k ? T(25) : T(-25));
    }
    if (!rows.empty()) {
        MaskProposalSet<T> hard;
        hard.mask_logits = Tensor<T>::from({rows.size(), gt.height, gt.width}, logits, false);
        hard.queries = Tensor<T>::zeros({rows.size(), d_});
        auto v = mask_pooling(f3, hard);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t j = 0; j < d_; ++j)
                vsum_[rows[r] * d_ + j] += static_cast<double>(v(r, j));
            ++vcount_[rows[r]];
        }
    }
    for (std::size_t i = 0; i < c_ * d_; ++i) tsum_[i] += static_cast<double>(t_hat.data()[i]);
    ++tcount_;
}

template <typename T>
SimilarityMatrix<T> SimilarityAccumulator<T>::finalize() const {
    if (tcount_ == 0) throw EmptyInputError("similarity: no samples accumulated");

    auto unit_rows = [&](const std::vector<double>& src, std::vector<double>& dst) {
        for (std::size_t k = 0; k < c_; ++k) {
            double norm = 0;
            for (std::size_t j = 0; j < d_; ++j) norm += src[k * d_ + j] * src[k * d_ + j];
            norm = std::sqrt(norm);
            for (std::size_t j = 0; j < d_; ++j)
                dst[k * d_ + j] = norm > 1e-12 ? src[k * d_ + j] / norm : 0.0;
        }
    };
    std::vector<double> vbar(c_ * d_), tbar(c_ * d_);
    unit_rows(vsum_, vbar);
    unit_rows(tsum_, tbar);

    SimilarityMatrix<T> out;
    out.row_present.assign(c_, 0);
    std::vector<double> raw(c_ * c_, 0.0);
    double lo = 1e300, hi = -1e300;
    for (std::size_t a = 0; a < c_; ++a) {
        if (vcount_[a] == 0) continue;
        out.row_present[a] = 1;
        for (std::size_t b = 0; b < c_; ++b) {
            double dot = 0;
            for (std::size_t j = 0; j < d_; ++j) dot += vbar[a * d_ + j] * tbar[b * d_ + j];
            raw[a * c_ + b] = dot;
            lo = std::min(lo, dot);
            hi = std::max(hi, dot);
        }
    }

    std::vector<T> norm(c_ * c_, T(0));
    const double span = hi - lo;
    double diag = 0;
    std::size_t diag_n = 0;
    for (std::size_t a = 0; a < c_; ++a) {
        if (!out.row_present[a]) continue;
        for (std::size_t b = 0; b < c_; ++b)
            norm[a * c_ + b] =
                span > 0 ? static_cast<T>((raw[a * c_ + b] - lo) / span) : T(0);
        diag += static_cast<double>(norm[a * c_ + a]);
        ++diag_n;
    }
    out.s = Tensor<T>::from({c_, c_}, norm, false);
    out.diagonal_mean = diag_n > 0 ? diag / static_cast<double>(diag_n) : 0.0;
    return out;
}

template SemanticPrediction<float> semantic_inference(const ScoreMatrix<float>&,
                                                      const Tensor<float>&);
template SemanticPrediction<double> semantic_inference(const ScoreMatrix<double>&,
                                                       const Tensor<double>&);
template PanopticPrediction<float> panoptic_inference(const ScoreMatrix<float>&,
                                                      const Tensor<float>&,
                                                      const PanopticThresholds&);
template PanopticPrediction<double> panoptic_inference(const ScoreMatrix<double>&,
                                                       const Tensor<double>&,
                                                       const PanopticThresholds&);
template PqReport pq_sq_rq(const PanopticPrediction<float>&, const std::vector<GtSegment>&);
template PqReport pq_sq_rq(const PanopticPrediction<double>&, const std::vector<GtSegment>&);
template class SimilarityAccumulator<float>;
template class SimilarityAccumulator<double>;

}  // namespace ovseg
