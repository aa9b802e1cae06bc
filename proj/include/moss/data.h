#pragma once

#include <string>
#include <vector>

#include "moss/config.h"
#include "moss/env.h"
#include "moss/model.h"
#include "moss/rng.h"
#include "moss/tensor.h"

namespace moss {

// Per-dimension normalization statistics computed from demonstrations
// only; standard deviations are floored at 1e-6 so constant channels
// stay finite under normalize/denormalize.
struct NormStats {
    std::vector<double> action_mean, action_std;
    std::vector<double> state_mean, state_std;
    std::vector<std::string> modality_names;
    std::vector<std::vector<double>> modality_mean, modality_std;
};

constexpr double kStdFloor = 1e-6;

// Maps a configured modality name onto the environment's sensor channels.
std::vector<double> modality_signal(const env::Observation& obs,
                                    const std::string& name);

NormStats compute_norm_stats(const std::vector<env::EpisodeRecord>& demos,
                             const ModelConfig& cfg);

std::string norm_stats_to_json(const NormStats& stats);
NormStats norm_stats_from_json(const std::string& text);

// Index of a modality's statistics entry, found by name (stats may cover
// more channels than a given run enables); validates the dimension.
std::size_t norm_stats_index(const NormStats& stats, const ModalitySpec& m);

// (x - mean) / std applied per dimension; x holds whole rows of width
// mean.size() back to back.
void normalize_rows(std::vector<double>& x, const std::vector<double>& mean,
                    const std::vector<double>& std);
void denormalize_rows(std::vector<double>& x, const std::vector<double>& mean,
                      const std::vector<double>& std);

// One supervised window: everything the model sees at decision time t
// plus the chunk targets, already normalized.
struct TrainSample {
    std::vector<double> visual_feat; // raw descriptors (not normalized)
    int task_id = 0;
    std::vector<double> state;                // [state_dim]
    std::vector<double> actions;              // [H*action_dim], future chunk
    std::vector<std::vector<double>> windows; // per modality [H*d_i], past
    std::vector<std::vector<double>> futures; // per modality [H*d_i], target
    int t = 0;
    int padded_future_steps = 0; // action rows repeated past episode end
};

// One sample per (episode, t). Future actions/signals are padded by
// repeating the last value; past windows are padded with the first
// observed value.
std::vector<TrainSample> build_windows(
    const std::vector<env::EpisodeRecord>& demos, const ModelConfig& cfg,
    const NormStats& stats);

// A training batch: the model input (with per-sample flow time and noised
// chunks) plus the clean targets and the exact noise used, for the
// velocity regression.
struct TrainBatch {
    ForwardInput input;
    Tensor action_clean, action_eps;
    std::vector<Tensor> future_clean, future_eps;
};

// Assembles the picked samples; draws one shared tau per sample and a
// fresh independent noise tensor for the action chunk and for every
// modality chunk.
TrainBatch make_batch(const std::vector<TrainSample>& samples,
                      const std::vector<std::size_t>& picks,
                      const ModelConfig& cfg, Rng& rng);

} // namespace moss
