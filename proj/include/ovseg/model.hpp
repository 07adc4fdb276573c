// Full segmentation model: fine-tuned vision encoder + frozen snapshot,
// frozen text encoder with class tables, mask proposal head, and the
// text-conditioning stack. Owns the loss assembly and checkpoint layout.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ovseg/adamw.hpp"
#include "ovseg/backbones.hpp"
#include "ovseg/checkpoint.hpp"
#include "ovseg/config.hpp"
#include "ovseg/maft.hpp"
#include "ovseg/metrics.hpp"
#include "ovseg/proposals.hpp"
#include "ovseg/synth_data.hpp"

namespace ovseg {

// Stream tags for Rng::derive so module initialization, batch sampling, and
// dataset generation draw from independent, stable streams.
namespace seed_tag {
inline constexpr std::uint64_t kBackbone = 0xb0b0ULL;
inline constexpr std::uint64_t kText = 0x7e87ULL;
inline constexpr std::uint64_t kHead = 0x4eadULL;
inline constexpr std::uint64_t kCdt = 0xcd70ULL;
inline constexpr std::uint64_t kPretrainData = 0x9d47aULL;
inline constexpr std::uint64_t kPretrainHeld = 0x9d47bULL;
inline constexpr std::uint64_t kPretrainOpt = 0x9e7aULL;
}  // namespace seed_tag

struct StepLosses {
    Tensor<float> l_p, l_ma, l_rc, total;
};

struct EvalOutput {
    SemanticPrediction<float> semantic;
    std::optional<PanopticPrediction<float>> panoptic;
};

class Model {
  public:
    explicit Model(const RunConfig& cfg);

    // Overwrites backbone + text parameters from a pretraining checkpoint,
    // then re-freezes the snapshot and rebuilds the class tables.
    void load_pretrained(const Checkpoint& ckpt);

    // Restores every tensor a checkpoint_state() checkpoint carries,
    // including the frozen snapshot and optimizer moments.
    void restore(const Checkpoint& ckpt, AdamW<float>* opt);

    // Applies freeze flags and registers the two learning-rate groups
    // (vision encoder vs everything else); asserts the partition.
    void configure_optimizer(AdamW<float>& opt);

    StepLosses forward_train(const SegmentationSample& sample);
    EvalOutput forward_eval(const SegmentationSample& sample);

    // Conditioned full-vocabulary table for one image (identity when the
    // conditioning stack is disabled), detached.
    Tensor<float> conditioned_table(const SegmentationSample& sample);
    Tensor<float> backbone_f3(const SegmentationSample& sample, bool frozen_copy);

    Checkpoint checkpoint_state(const AdamW<float>* opt) const;

    NamedParams<float> trainable_params() const;
    NamedParams<float> all_params() const;  // incl. text + frozen snapshot

    const RunConfig& config() const { return cfg_; }
    const Vocabulary& vocabulary() const { return vocab_; }
    VisionBackbone<float>& backbone() { return backbone_; }
    const VisionBackbone<float>& frozen_backbone() const { return frozen_; }
    TextEncoder<float>& text() { return text_; }
    const Tensor<float>& train_table() const { return t_train_; }
    const Tensor<float>& full_table() const { return t_full_; }

    void rebuild_tables();

  private:
    RunConfig cfg_;
    Vocabulary vocab_;
    VisionBackbone<float> backbone_, frozen_;
    TextEncoder<float> text_;
    ProposalHead<float> head_;
    CDTStack<float> cdt_;
    Tensor<float> t_train_, t_full_;  // detached [C x d] tables

    void apply_freeze_flags();
};

// Train-vocabulary IoU regression targets: full-vocabulary targets with the
// columns reordered to match the train-class table.
ScoreMatrix<float> train_iou_targets(const MaskProposalSet<float>& props,
                                     const SegmentationSample& gt,
                                     const Vocabulary& vocab, bool panoptic);

}  // namespace ovseg
