#include "moss/optim.h"

#include <cmath>
#include <stdexcept>

namespace moss {

namespace {
constexpr double kAdamEps = 1e-8;
constexpr double kPi = 3.14159265358979323846;
} // namespace

double lr_at(int step, const OptimizerState& state) {
    if (step < 0)
        throw std::runtime_error("lr_at: negative step");
    if (step > state.total_steps)
        step = state.total_steps;
    if (step <= state.warmup_steps)
        return state.peak_lr * static_cast<double>(step) /
               static_cast<double>(state.warmup_steps);
    const double progress =
        static_cast<double>(step - state.warmup_steps) /
        static_cast<double>(state.total_steps - state.warmup_steps);
    return state.peak_lr * 0.5 * (1.0 + std::cos(kPi * progress));
}

void adamw_step(std::vector<NamedParam>& params, OptimizerState& state) {
    state.step += 1;
    const int t = state.step;
    const double lr = lr_at(t, state);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (NamedParam& p : params) {
        if (!p.value.requires_grad())
            throw std::runtime_error("adamw_step: parameter '" + p.name +
                                     "' has no gradient buffer");
        const std::size_t n = p.value.size();
        auto& m = state.first_moment[p.value.id()];
        auto& v = state.second_moment[p.value.id()];
        if (m.empty())
            m.assign(n, 0.0);
        if (v.empty())
            v.assign(n, 0.0);
        if (m.size() != n || v.size() != n)
            throw std::runtime_error("adamw_step: moment shape mismatch for '" +
                                     p.name + "'");
        double* w = p.value.data();
        double* g = p.value.grad();
        for (std::size_t i = 0; i < n; ++i) {
            w[i] -= lr * state.weight_decay * w[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
        p.value.zero_grad();
    }
}

} // namespace moss
