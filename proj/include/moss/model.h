#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "moss/config.h"
#include "moss/ops.h"
#include "moss/params.h"
#include "moss/rng.h"
#include "moss/tape.h"
#include "moss/tensor.h"

namespace moss {

// Linear interpolant between noise (tau=0) and data (tau=1); endpoints are
// returned bitwise-exact.
Tensor noisy_interpolant(const Tensor& x, const Tensor& eps, double tau);

// Sinusoidal features of the flow time, fed to the per-stream conditioning
// MLPs.
std::vector<double> tau_features(double tau, int width);

// One normalized training batch, sample-major: row blocks of size H belong
// to consecutive samples.
struct ForwardInput {
    int batch = 0;
    Tensor visual_feat;            // [B x obs_feat_dim]
    std::vector<int> task_ids;     // size B
    Tensor state;                  // [B x state_dim]
    std::vector<double> tau;       // size B, shared across streams per sample
    Tensor noised_action;          // [B*H x action_dim]
    std::vector<Tensor> windows;       // per modality, [B*H x d_i]
    std::vector<Tensor> noised_future; // per modality, [B*H x d_i]
};

// attention[layer][stream]: mean softmax mass from the H action-token
// queries onto each stream's keys (stream 0 = the action stream itself).
using AttentionSummary = std::vector<std::vector<double>>;

struct ForwardOutput {
    Tensor action_velocity;                // [B*H x action_dim]
    std::vector<Tensor> modality_velocity; // per modality, [B*H x d_i]
    AttentionSummary attention;            // filled when requested
};

// Inputs available at decision time (no noised chunks; those start from
// noise inside the sampler).
struct SampleInput {
    int batch = 0;
    Tensor visual_feat;
    std::vector<int> task_ids;
    Tensor state;
    std::vector<Tensor> windows;
};

// Joint state of the flow being integrated: the action chunk plus one
// future chunk per modality.
struct ChunkState {
    Tensor action;
    std::vector<Tensor> futures;
};

using VelocityField =
    std::function<ChunkState(double tau, const ChunkState& state)>;

// Euler integration of the joint velocity field from tau=0 to tau=1 in K
// steps, starting at the given noise.
ChunkState euler_sample(const VelocityField& field, const ChunkState& noise,
                        int K);

// Initial noise for a batch of chunks, drawn in a fixed order (action
// block first, then each modality block). Separating the draw lets
// callers keep one noise stream per episode so results do not depend on
// how episodes are batched together.
ChunkState draw_chunk_noise(const ModelConfig& cfg, int batch, Rng& rng);

// The full model: observation encoder, action expert, mirrored physical
// streams, and their joint attention coupling. The same code path serves
// the stream-free base policy (no modalities) and the fused single-stream
// control.
class StreamModel {
public:
    StreamModel(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    int stream_width() const { return width_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // Vision-language context stand-in: feature token + task token.
    Tensor encode_observation(const std::vector<double>& visual_feat,
                              int task_id) const;

    ForwardOutput forward(const ForwardInput& in, Tape* tape,
                          bool want_attention = false) const;

    // Flow-matching inference from explicit initial noise: Euler-integrates
    // action and future-physical chunks jointly and returns the final
    // normalized state. When `attn` is given it receives per-layer stream
    // masses averaged over the K integration steps.
    ChunkState sample_chunks(const SampleInput& in, int K,
                             const ChunkState& noise,
                             AttentionSummary* attn = nullptr) const;

    // Convenience wrapper: draws the noise from `noise_rng` and returns
    // just the action chunk [B*H x action_dim].
    Tensor sample_action_chunk(const SampleInput& in, int K, Rng& noise_rng,
                               AttentionSummary* attn = nullptr) const;

private:
    ModelConfig cfg_;
    int width_ = 0;
    ParamStore params_;
};

} // namespace moss
