#pragma once

#include <string>
#include <vector>

#include "moss/config.h"
#include "moss/data.h"
#include "moss/model.h"

namespace moss {

// On-disk model snapshot: a JSON header (config, stage tag, normalization
// statistics, named array manifest with shapes and byte offsets) followed
// by the raw little-endian 64-bit float arrays concatenated in manifest
// order. Round trips byte-exactly.
struct Checkpoint {
    RunConfig config;
    std::string stage; // "base", "stage1", "stage2", or a control tag
    NormStats stats;
    std::vector<std::string> names;
    std::vector<std::vector<int>> shapes;
    std::vector<std::vector<double>> values;
};

// Captures the model's parameters (in registry order) together with the
// run configuration and normalization statistics.
Checkpoint snapshot_checkpoint(const StreamModel& model, const RunConfig& cfg,
                               const std::string& stage,
                               const NormStats& stats);

void save_checkpoint(const std::string& path, const Checkpoint& ck);

// Parses and validates the file: magic, header bounds, manifest offsets
// contiguous and consistent with shapes and the file size. Errors name
// the offending array.
Checkpoint load_checkpoint(const std::string& path);

// Copies every checkpoint array into the model; the parameter sets must
// match exactly (same names, same shapes).
void apply_checkpoint(StreamModel& model, const Checkpoint& ck);

// Copies only the arrays present in the checkpoint; parameters the
// checkpoint does not mention keep their fresh initialization (this is
// how a stream-free base snapshot seeds a model with newly added
// streams). Every checkpoint array must still exist in the model with a
// matching shape. Returns the number of arrays copied.
int apply_checkpoint_subset(StreamModel& model, const Checkpoint& ck);

} // namespace moss
