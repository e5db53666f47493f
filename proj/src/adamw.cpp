#include "ilql/adamw.hpp"

#include <cmath>

namespace ilql {

void adamw_step(AdamState& state, const AdamwConfig& cfg,
                const std::vector<std::string>& order,
                std::unordered_map<std::string, Tensor<float>>& params,
                const std::unordered_map<std::string, Tensor<float>>& grads) {
    require(cfg.lr > 0, ErrorKind::domain, "adamw: lr must be positive");
    require(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1,
            ErrorKind::domain, "adamw: betas must lie in [0,1)");
    state.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (const std::string& name : order) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        auto pit = params.find(name);
        require(pit != params.end(), ErrorKind::state, "adamw: unknown parameter '" + name + "'");
        Tensor<float>& p = pit->second;
        const Tensor<float>& g = git->second;
        require(shape_eq(p.shape, g.shape), ErrorKind::shape,
                "adamw: gradient shape mismatch for '" + name + "'");
        Tensor<float>& m = state.m.try_emplace(name, Tensor<float>(p.shape)).first->second;
        Tensor<float>& v = state.v.try_emplace(name, Tensor<float>(p.shape)).first->second;
        float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
        for (int64_t i = 0; i < p.numel(); ++i) {
            float gi = g.data[i];
            require(std::isfinite(gi), ErrorKind::numeric,
                    "adamw: non-finite gradient in parameter '" + name + "'");
            if (cfg.weight_decay != 0.0)
                p.data[i] -= static_cast<float>(cfg.lr * cfg.weight_decay) * p.data[i];
            m.data[i] = b1 * m.data[i] + (1.0f - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0f - b2) * gi * gi;
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            p.data[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

double grad_norm(const std::vector<std::string>& order,
                 const std::unordered_map<std::string, Tensor<float>>& grads) {
    double sq = 0;
    for (const std::string& name : order) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        for (float g : it->second.data) sq += static_cast<double>(g) * g;
    }
    return std::sqrt(sq);
}

}  // namespace ilql
