#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "moss/config.h"
#include "moss/optim.h"
#include "moss/tensor.h"

namespace moss {

// Named parameter registry. Every tensor belongs to exactly one group:
// "encoder", "action", or "stream:<modality>"; groups are the unit of
// freezing and of stage-wise re-initialization.
class ParamStore {
public:
    void add(const std::string& group, const std::string& name, Tensor t);

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    const std::string& group_of(const std::string& name) const;

    const std::vector<NamedParam>& entries() const { return entries_; }
    std::vector<std::string> group_names() const;
    std::vector<NamedParam> group_entries(const std::string& group) const;

    // Parameters currently marked trainable (requires_grad).
    std::vector<NamedParam> trainable() const;

    std::size_t total_size() const;

private:
    std::vector<NamedParam> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> entry_group_;
    std::map<std::string, std::vector<std::size_t>> groups_;
};

// Group name -> trainable flag. Must cover every group of the store.
using TrainabilityMask = std::map<std::string, bool>;

void set_trainable(ParamStore& params, const TrainabilityMask& mask);

// Builds and initializes all parameters for the configuration: linear
// weights ~ N(0, 1/fan_in), biases zero, positional/table entries
// ~ N(0, 1/width). Residual-branch outputs (attention proj, second MLP
// layer), the per-block modulation projections, and the velocity heads
// start at exactly zero, so a fresh model is the identity with a zero
// readout. Each tensor draws from its own purpose-derived seed so the
// result is independent of registration order.
ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed);

// Re-draws the parameters of one group in place (fresh stream init between
// stages).
void reinit_group(ParamStore& params, const ModelConfig& cfg,
                  const std::string& group, std::uint64_t seed);

// Total parameter count for a configuration without building tensors.
std::size_t count_params(const ModelConfig& cfg);

// Width for the fused single-stream control that matches the decoupled
// model's parameter budget within +/-10%; throws if no multiple of `heads`
// lands inside the band.
int resolve_fused_width(const ModelConfig& cfg);

// The stream width actually used by blocks (fused models run wider).
int effective_width(const ModelConfig& cfg);

} // namespace moss
