#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moss/checkpoint.h"
#include "moss/data.h"
#include "moss/env.h"
#include "moss/model.h"

namespace moss {

struct SuccessReport {
    std::string task;
    std::string checkpoint_id;
    int n_episodes = 0;
    int successes = 0;
    double success_rate = 0.0;
    std::vector<int> latent_episodes;  // episodes per hidden latent value
    std::vector<int> latent_successes; // successes per hidden latent value
    std::uint64_t seed_first = 0;
    std::uint64_t seed_last = 0;
};

std::string success_report_to_json(const SuccessReport& r);
SuccessReport success_report_from_json(const std::string& text);

// Builds the batch-1 model input for an episode given its observation
// history so far (most recent last): current state and visual features
// plus per-modality past windows, normalized with `stats`.
SampleInput make_policy_input(const ModelConfig& cfg, const NormStats& stats,
                              const std::vector<env::Observation>& history,
                              int task_id);

// Denormalizes row `row` of an action chunk (rows are [B*H x action_dim]).
env::Action chunk_action(const Tensor& chunk, int row, const NormStats& stats);

// Closed-loop policy evaluation over n episodes with env seeds
// seed0..seed0+n-1: replans every H/2 steps and executes the first H/2
// actions of each chunk. All per-episode randomness (observation noise,
// sampling noise) derives from the episode's seed, so aggregate results
// do not depend on how episodes are batched; `batch_cap` only bounds how
// many episodes advance per forward pass. obs_noise < 0 means "use the
// checkpoint's configured value".
SuccessReport evaluate_policy(const Checkpoint& ck, int task_id, int n,
                              std::uint64_t seed0,
                              const std::string& checkpoint_id = "",
                              double obs_noise = -1.0, int batch_cap = 64);

// Harness baselines: the privileged scripted expert and a uniform-random
// policy, run through the same reporting path.
SuccessReport evaluate_expert(int task_id, int n, std::uint64_t seed0,
                              double obs_noise);
SuccessReport evaluate_random(int task_id, int n, std::uint64_t seed0,
                              double obs_noise);

} // namespace moss
