#include "ovseg/trainer.hpp"

#include <cmath>
#include <string>

#include "ovseg/errors.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {

namespace {

void expect_grad_free(const NamedParams<float>& params, const char* who,
                      std::size_t step) {
    for (const auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (float g : t.grad())
            if (g != 0.f)
                throw Error(std::string(who) + " parameter " + name +
                            " received gradient at step " + std::to_string(step));
    }
}

}  // namespace

std::vector<StepLog> train_loop(Model& model, AdamW<float>& opt,
                                const std::vector<SegmentationSample>& data,
                                const TrainOptions& opts) {
    if (data.empty()) throw EmptyInputError("train: dataset is empty");
    if (opts.batch == 0) throw ConfigError("train: batch size must be positive");

    const RunConfig& cfg = model.config();
    const std::uint64_t sampling_root = Rng::derive(opts.seed, 0xba7c4ULL);

    NamedParams<float> frozen_params, text_params, backbone_params;
    model.frozen_backbone().collect("frozen", frozen_params);
    model.text().collect("text", text_params);
    model.backbone().collect("backbone", backbone_params);

    std::vector<StepLog> logs;
    logs.reserve(opts.steps);
    for (std::size_t k = 0; k < opts.steps; ++k) {
        const std::size_t step = opt.step_count();  // global, resumes after restore
        try {
            Rng rng(Rng::derive(sampling_root, step));
            opt.zero_grad();

            Tensor<float> l_p, l_ma, l_rc;
            for (std::size_t b = 0; b < opts.batch; ++b) {
                const auto& sample = data[rng.below(data.size())];
                StepLosses sl = model.forward_train(sample);
                l_p = b == 0 ? sl.l_p : add(l_p, sl.l_p);
                l_ma = b == 0 ? sl.l_ma : add(l_ma, sl.l_ma);
                l_rc = b == 0 ? sl.l_rc : add(l_rc, sl.l_rc);
            }
            const float inv_b = 1.f / static_cast<float>(opts.batch);
            l_p = mul_scalar(l_p, inv_b);
            l_ma = mul_scalar(l_ma, inv_b);
            l_rc = mul_scalar(l_rc, inv_b);
            Tensor<float> total =
                total_loss(l_p, l_ma, l_rc, static_cast<float>(cfg.lambda1),
                           static_cast<float>(cfg.lambda2));

            if (opts.check_stop_gradient && l_p.requires_grad()) {
                backward(l_p);
                expect_grad_free(backbone_params, "vision-encoder", step);
                zero_graph_grads(total);  // clear before the real pass
            }

            backward(total);
            expect_grad_free(frozen_params, "frozen-snapshot", step);
            expect_grad_free(text_params, "text-encoder", step);

            if (opts.post_backward) opts.post_backward(step);
            opt.step();

            StepLog log;
            log.step = step;
            log.l_p = l_p.data()[0];
            log.l_ma = l_ma.data()[0];
            log.l_rc = l_rc.data()[0];
            log.total = total.data()[0];
            logs.push_back(log);
        } catch (const NumericError& e) {
            throw NumericError("training diverged at step " + std::to_string(step) +
                               ": " + e.what());
        }
    }
    return logs;
}

}  // namespace ovseg
