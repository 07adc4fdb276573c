// Workbench entry points behind the CLI: each command is a library function
// that throws on failure; run_cli maps exception types to process exit codes.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ovseg/backbones.hpp"
#include "ovseg/config.hpp"
#include "ovseg/metrics.hpp"
#include "ovseg/model.hpp"
#include "ovseg/trainer.hpp"

namespace ovseg {

// 0 ok, 1 check failure, 2 config, 3 I/O, 4 shape/compat, 5 numeric,
// 6 empty input.
int exit_code_for(const std::exception& e);

struct EvalSummary {
    std::vector<double> iou;             // per class id; valid where present
    std::vector<std::uint8_t> present;   // class appears in gt or prediction
    double miou_all = 0, miou_seen = 0, miou_novel = 0;
    bool defined = false, seen_defined = false, novel_defined = false;
    bool panoptic = false;
    double pq = 0, sq = 0, rq = 0;
    double pq_seen = 0, pq_novel = 0;
};

// Streams (prediction, ground truth) pairs into dataset-level metrics:
// per-class intersections/unions for mIoU and, in panoptic mode, summed
// TP/FP/FN/IoU for PQ, each split into seen and novel aggregates.
class EvalAccumulator {
  public:
    EvalAccumulator(const Vocabulary& vocab, bool panoptic);

    void add(const std::vector<std::uint16_t>& pred_labels,
             const PanopticPrediction<float>* pan, const SegmentationSample& gt);
    EvalSummary finalize() const;

  private:
    Vocabulary vocab_;
    bool panoptic_;
    std::vector<double> inter_, uni_;
    PqReport pq_all_, pq_seen_, pq_novel_;
};

EvalSummary evaluate_model(Model& model, const std::vector<SegmentationSample>& data);

// Contrastive pretraining of the vision/text pair on single-dominant-class
// images over the full vocabulary; writes checkpoint + one-row CSV report.
PretrainReport cmd_pretrain(const RunConfig& cfg, const std::string& out_path);

// Fine-tuning per the configured flags; writes checkpoint + per-step CSV.
std::vector<StepLog> cmd_train(const RunConfig& cfg, const std::string& pretrained_path,
                               const std::string& out_path);

// Evaluation over the full vocabulary. data_path empty -> regenerate the
// held-out split from the checkpoint's config; otherwise read a SEGB file.
// cfg_override (optional) replaces the checkpoint's config snapshot.
EvalSummary cmd_eval(const std::string& ckpt_path, const std::string& data_path,
                     const std::string& out_path, const RunConfig* cfg_override = nullptr);

// Finite-difference verification of every op family plus the full training
// objective on a tiny double-precision pipeline. Returns 0 iff every max
// relative error is below 1e-4. `sabotage` injects a deliberately broken
// backward rule so tests can confirm the detector fires.
int cmd_gradcheck(const RunConfig& cfg, std::ostream& log, bool sabotage = false);

struct AblationCell {
    std::string variant;
    std::vector<double> novel, seen, overall;  // one entry per seed
    double novel_mean = 0, novel_sd = 0, seen_mean = 0, seen_sd = 0;
};

// Four-configuration sweep (frozen baseline, +CDT, +RC, both) over
// `seed_count` seeds; composes cmd_pretrain/cmd_train/cmd_eval and writes
// Markdown + CSV tables into out_dir. Directional violations log WARN.
std::vector<AblationCell> cmd_ablate(const RunConfig& cfg, const std::string& out_dir,
                                     std::ostream& log, std::size_t seed_count = 3);

// Class-to-class similarity matrix of a trained checkpoint over its held-out
// split; writes the named-tensor container plus a CSV rendering. Returns the
// diagonal mean.
double cmd_export_sim(const std::string& ckpt_path, const std::string& out_path);

int run_cli(int argc, const char* const* argv);

}  // namespace ovseg
