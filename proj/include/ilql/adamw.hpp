#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>

#include "ilql/tensor.hpp"

namespace ilql {

struct AdamwConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; zero throughout the benchmark runs
};

struct AdamState {
    int64_t step = 0;
    std::unordered_map<std::string, Tensor<float>> m, v;
};

// One optimizer step over the named parameters, visited in the given order.
// Parameters without a gradient entry are left untouched. Non-finite gradients
// abort with the offending parameter's name.
void adamw_step(AdamState& state, const AdamwConfig& cfg,
                const std::vector<std::string>& order,
                std::unordered_map<std::string, Tensor<float>>& params,
                const std::unordered_map<std::string, Tensor<float>>& grads);

// Global L2 norm over all gradient tensors, in canonical order.
double grad_norm(const std::vector<std::string>& order,
                 const std::unordered_map<std::string, Tensor<float>>& grads);

}  // namespace ilql
