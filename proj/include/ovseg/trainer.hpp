// Step loop: seeded batch sampling, loss averaging, optimizer updates, and
// the per-step gradient hygiene checks the training contract promises.
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ovseg/adamw.hpp"
#include "ovseg/model.hpp"

namespace ovseg {

struct StepLog {
    std::size_t step = 0;  // global step index, 0-based
    double l_p = 0, l_ma = 0, l_rc = 0, total = 0;
};

struct TrainOptions {
    std::size_t steps = 0;  // additional steps to run; global index resumes
    std::size_t batch = 4;
    std::uint64_t seed = 1;
    // Re-derives the proposal loss alone each step and asserts it reaches no
    // vision-encoder parameter. Costs an extra backward pass.
    bool check_stop_gradient = false;
    // Runs after backward, before the optimizer step.
    std::function<void(std::size_t)> post_backward;
};

// Runs `opts.steps` optimizer steps. Batch indices come from a stream derived
// from (seed, global step), so a resumed run continues the interrupted one's
// sampling exactly. Frozen-snapshot and text parameters are asserted grad-free
// every step. Numeric failures rethrow with the offending step number.
std::vector<StepLog> train_loop(Model& model, AdamW<float>& opt,
                                const std::vector<SegmentationSample>& data,
                                const TrainOptions& opts);

}  // namespace ovseg
