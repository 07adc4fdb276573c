// Run configuration: parsing, validation, canonical serialization.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ovseg/backbones.hpp"
#include "ovseg/maft.hpp"
#include "ovseg/proposals.hpp"
#include "ovseg/synth_data.hpp"

namespace ovseg {

struct RunConfig {
    // [data]
    std::size_t image_size = 64;
    std::size_t train_count = 500;
    std::size_t eval_count = 100;
    std::size_t classes_min = 1, classes_max = 3;
    std::size_t instances_min = 1, instances_max = 4;
    std::size_t novel_count = 6;

    // [model]
    std::vector<std::size_t> widths = {16, 32, 64, 64};
    std::size_t proposals = 16;
    std::size_t head_layers = 2;
    std::size_t head_heads = 4;
    std::size_t ffn_mult = 2;
    std::size_t cdt_layers = 2;
    std::size_t cdt_heads = 4;
    std::vector<std::size_t> rc_grids = {1, 2, 4};
    double tau = 0.07;

    // [loss]
    double lambda1 = 1.0;
    double lambda2 = 0.1;

    // [train]
    std::size_t steps = 2000;
    std::size_t batch = 4;
    double lr_backbone = 1e-4;  // 10x below the other modules
    double lr_other = 1e-3;
    double weight_decay = 0.05;
    std::uint64_t seed = 1;

    // [pretrain]
    std::size_t pretrain_steps = 2000;
    // covers the full vocabulary per batch (clamped to the distinct classes
    // present), which the contrastive loss needs for strong negatives
    std::size_t pretrain_batch = 18;
    // generated single-class images; kept large so the contrastive stage
    // learns classes rather than memorizing a small pool
    std::size_t pretrain_data = 6000;
    double pretrain_lr = 1e-3;

    // [flags]
    bool use_cdt = true;
    bool use_rc = true;
    bool freeze_backbone = false;
    bool panoptic_mode = false;
    std::vector<std::size_t> frozen_stages;  // subset of {0,1,2,3}

    void validate() const;

    BackboneConfig backbone_config() const;
    ProposalConfig proposal_config() const;
    RCConfig rc_config() const;
    DatasetSpec train_spec() const;
    DatasetSpec eval_spec() const;
};

// Line-oriented `key = value` with [section] headers and # comments.
// Unknown keys and malformed lines are hard errors naming the line number.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Canonical rendering: parse_config_text(canonical_text(c)) reproduces c.
std::string canonical_text(const RunConfig& c);

}  // namespace ovseg
