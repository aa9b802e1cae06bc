#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "moss/tensor.h"

namespace moss {

struct NamedParam {
    std::string name;
    Tensor value;
};

// AdamW with bias correction and decoupled weight decay, plus the
// warmup+cosine learning-rate schedule. Moment buffers are keyed by the
// parameter's storage identity and created lazily.
struct OptimizerState {
    int step = 0;
    double beta1 = 0.95;
    double beta2 = 0.999;
    double weight_decay = 1e-5;
    double peak_lr = 1e-4;
    int warmup_steps = 1;
    int total_steps = 1;
    std::unordered_map<const void*, std::vector<double>> first_moment;
    std::unordered_map<const void*, std::vector<double>> second_moment;
};

// Linear warmup 0 -> peak over warmup_steps, then cosine decay peak -> 0 at
// total_steps; steps beyond the end clamp to the final value.
double lr_at(int step, const OptimizerState& state);

// One update over `params` (all of which must require grad with populated
// buffers): increments the step, applies decoupled decay then the
// bias-corrected moment update, and zeroes the gradients.
void adamw_step(std::vector<NamedParam>& params, OptimizerState& state);

} // namespace moss
