// Named-tensor binary container with an embedded config snapshot.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ovseg/tensor.hpp"

namespace ovseg {

struct Checkpoint {
    // insertion order is preserved and round-trips bit-exactly
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
    std::string config_text;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
    void add(const std::string& name, const Tensor<float>& t) { tensors.emplace_back(name, t); }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// The serialized byte image, exposed for byte-identity assertions.
std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt);

}  // namespace ovseg
