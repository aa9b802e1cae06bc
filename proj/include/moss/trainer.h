#pragma once

#include <string>
#include <vector>

#include "moss/checkpoint.h"
#include "moss/config.h"
#include "moss/data.h"
#include "moss/env.h"
#include "moss/losses.h"
#include "moss/model.h"

namespace moss {

// The environment's complete sensor suite. Normalization statistics are
// computed for every channel regardless of which streams a run enables,
// so one base checkpoint can seed any modality subset.
std::vector<ModalitySpec> sensor_channels();

struct TrainReport {
    Checkpoint checkpoint;
    std::vector<LossBreakdown> history; // one entry per iteration
    double seconds = 0.0;
};

// Phase 1 of 3: pretrains the stream-free policy (observation encoder +
// action expert) on the action objective alone. Computes and embeds the
// normalization statistics all later phases inherit. When log_path is
// nonempty, writes one JSON line per iteration.
TrainReport train_base(const RunConfig& cfg,
                       const std::vector<env::EpisodeRecord>& demos,
                       const std::string& log_path = "");

// Phase 2: adds freshly initialized physical streams to the base policy
// and trains only them on the future-signal objective; encoder and
// action-expert parameters stay bitwise unchanged.
TrainReport train_stage1(const RunConfig& cfg, const Checkpoint& base,
                         const std::vector<env::EpisodeRecord>& demos,
                         const std::string& log_path = "");

// Phase 3: joint fine-tuning of the full objective over all parameter
// groups (the encoder can be kept frozen via training.freeze_encoder).
TrainReport train_stage2(const RunConfig& cfg, const Checkpoint& stage1,
                         const std::vector<env::EpisodeRecord>& demos,
                         const std::string& log_path = "");

// Control arm: trains streams and expert jointly straight from the base
// checkpoint, in one phase of iters_stage1 + iters_stage2 steps.
TrainReport train_single_stage(const RunConfig& cfg, const Checkpoint& base,
                               const std::vector<env::EpisodeRecord>& demos,
                               const std::string& log_path = "");

} // namespace moss
