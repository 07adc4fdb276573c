#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ovseg/errors.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

// AdamW with decoupled weight decay. Parameters are registered in insertion
// order under stable names; moment buffers live here, keyed by that order, so
// checkpointing can round-trip them exactly.
template <typename T>
class AdamW {
public:
    struct Hyper {
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
        T weight_decay = T(0);
    };

    explicit AdamW(Hyper hyper = {}) : hyper_(hyper) {}

    void add_param(const std::string& name, Tensor<T> param, T lr) {
        for (const auto& e : entries_)
            if (e.name == name) throw ConfigError("adamw: duplicate parameter " + name);
        entries_.push_back({name, std::move(param), lr,
                            std::vector<T>(0), std::vector<T>(0)});
        entries_.back().m.assign(entries_.back().param.size(), T(0));
        entries_.back().v.assign(entries_.back().param.size(), T(0));
    }

    std::size_t step_count() const { return t_; }
    std::size_t param_count() const { return entries_.size(); }
    const Hyper& hyper() const { return hyper_; }

    void zero_grad() {
        for (auto& e : entries_) e.param.zero_grad();
    }

    // One decoupled-decay update:
    //   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
    //   w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * wd * w
    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(hyper_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(hyper_.beta2, static_cast<T>(t_));
        for (auto& e : entries_) {
            if (!e.param.requires_grad()) continue;  // frozen after registration
            if (!e.param.has_grad())
                throw Error("adamw: parameter " + e.name + " has no gradient");
            const auto& g = e.param.grad();
            auto& w = e.param.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                e.m[i] = hyper_.beta1 * e.m[i] + (T(1) - hyper_.beta1) * g[i];
                e.v[i] = hyper_.beta2 * e.v[i] + (T(1) - hyper_.beta2) * g[i] * g[i];
                const T mhat = e.m[i] / bc1;
                const T vhat = e.v[i] / bc2;
                w[i] -= e.lr * mhat / (std::sqrt(vhat) + hyper_.eps) +
                        e.lr * hyper_.weight_decay * w[i];
            }
        }
    }

    // Serialization hooks: stable iteration order for checkpoints.
    struct Slot {
        std::string name;
        Tensor<T> param;
        T lr;
        std::vector<T> m, v;
    };
    const std::vector<Slot>& slots() const { return entries_; }
    std::vector<Slot>& slots() { return entries_; }
    void set_step_count(std::size_t t) { t_ = t; }

private:
    Hyper hyper_;
    std::vector<Slot> entries_;
    std::size_t t_ = 0;
};

}  // namespace ovseg
