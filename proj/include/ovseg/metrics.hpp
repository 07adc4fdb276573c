// Prediction assembly (semantic / panoptic) and evaluation metrics.
#pragma once

#include <cstdint>
#include <vector>

#include "ovseg/maft.hpp"
#include "ovseg/synth_data.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

template <typename T>
struct SemanticPrediction {
    std::size_t height = 0, width = 0;
    std::vector<std::uint16_t> labels;  // argmax class per pixel
    Tensor<T> scores;                   // |C| x H x W accumulated evidence
};

template <typename T>
struct PanopticSegmentRecord {
    std::uint16_t class_id = 0;
    T confidence = T(0);
};

template <typename T>
struct PanopticPrediction {
    std::size_t height = 0, width = 0;
    std::vector<std::uint32_t> segment_ids;  // 0 = unassigned, k = segments[k-1]
    std::vector<PanopticSegmentRecord<T>> segments;
};

struct PanopticThresholds {
    double confidence = 0.5;
    double overlap = 0.8;
};

// score(c,p) = sum_i S[i,c] * logistic(M[i,p]); label = argmax, ties to the
// lowest class id.
template <typename T>
SemanticPrediction<T> semantic_inference(const ScoreMatrix<T>& s_cls,
                                         const Tensor<T>& mask_logits);

// Greedy pixel claiming in order of decreasing proposal confidence.
template <typename T>
PanopticPrediction<T> panoptic_inference(const ScoreMatrix<T>& s_cls,
                                         const Tensor<T>& mask_logits,
                                         const PanopticThresholds& th = {});

struct MiouReport {
    std::vector<double> iou;            // valid only where present
    std::vector<std::uint8_t> present;  // class occurs in gt or prediction
    bool defined = false;               // false when no class is present
    double mean = 0;
};

MiouReport miou(const std::vector<std::uint16_t>& pred_labels, const SegmentationSample& gt,
                std::size_t num_classes);

struct PqReport {
    double pq = 0, sq = 0, rq = 0;
    std::size_t tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
};

// Matches (pred, gt) segments of equal class with IoU > 0.5 (unique by
// construction, re-asserted here), then applies the definitional formulas.
template <typename T>
PqReport pq_sq_rq(const PanopticPrediction<T>& pred, const std::vector<GtSegment>& gt);

template <typename T>
struct SimilarityMatrix {
    Tensor<T> s;                        // |C| x |C|, min-max normalized to [0,1]
    std::vector<std::uint8_t> row_present;
    double diagonal_mean = 0;           // over present rows
};

// Streams (features, ground truth, adapted text table) triples and reduces
// them into a class-to-class cosine similarity matrix: vision embeddings are
// pooled over hard ground-truth regions and averaged per class, text tables
// are averaged over samples, both renormalized before the final product.
template <typename T>
class SimilarityAccumulator {
  public:
    SimilarityAccumulator(std::size_t num_classes, std::size_t dim);

    void add_sample(const Tensor<T>& f3, const SegmentationSample& gt, const Tensor<T>& t_hat);
    SimilarityMatrix<T> finalize() const;

  private:
    std::size_t c_, d_;
    std::vector<double> vsum_;  // c_ x d_
    std::vector<std::size_t> vcount_;
    std::vector<double> tsum_;  // c_ x d_
    std::size_t tcount_ = 0;
};

}  // namespace ovseg
