#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moss/checkpoint.h"
#include "moss/config.h"
#include "moss/env.h"
#include "moss/eval.h"
#include "moss/trainer.h"

namespace moss {

// FNV-1a 64-bit content hashes (hex), used for table provenance.
std::string fnv1a64_hex(const std::string& data);
std::string fnv1a64_hex_file(const std::string& path);

// Fixed offset separating evaluation env seeds from demonstration seeds.
constexpr std::uint64_t kEvalSeedBase = 1000000;

// The demonstration corpus shared by every cell of a run: one JSONL file
// per task under <root>/demos, generated on first use.
struct DemoSet {
    std::vector<env::EpisodeRecord> episodes;
    std::vector<std::string> paths;
    std::string content_hash; // combined hash of the demo files
};
DemoSet ensure_demos(const RunConfig& cfg, const std::string& root);

// One cell of the ablation grid.
struct CellSpec {
    std::string modality; // none | tactile | torque | both
    std::string variant;  // full | fused | single-stage | no-pred
    std::uint64_t seed = 0;

    std::string id() const {
        return modality + "-" + variant + "-s" + std::to_string(seed);
    }
};

// All 16 cells for one seed ordering: modalities x variants.
std::vector<CellSpec> full_grid(const std::vector<std::uint64_t>& seeds);

// The run configuration a cell trains with (modalities, control flags and
// seed applied).
RunConfig cell_config(const RunConfig& base_cfg, const CellSpec& spec);

struct CellResult {
    CellSpec spec;
    std::string final_ckpt_path;
    SuccessReport fragile, insert;
    bool trained_now = false; // false when resumed from existing artifacts
};

// Trains (or resumes) one cell under <root>/cells/<id> and evaluates it
// on both tasks. Base checkpoints are shared per seed under <root>/bases.
CellResult run_cell(const RunConfig& base_cfg, const CellSpec& spec,
                    const std::string& root, const DemoSet& demos);

std::vector<CellResult> run_cells(const RunConfig& base_cfg,
                                  const std::vector<CellSpec>& cells,
                                  const std::string& root,
                                  const DemoSet& demos);

struct AblationTable {
    std::vector<CellResult> rows;
    std::string csv_path;     // one row per cell (48 at three seeds)
    std::string summary_path; // mean +/- sd per cell family
    std::string manifest_path;
};

// The full grid over three consecutive seeds starting at
// cfg.training.seed; writes ablations.csv, ablations_summary.csv and
// manifest.json under root.
AblationTable run_ablations(const RunConfig& cfg, const std::string& root);

struct LambdaResult {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    SuccessReport fragile;
};

struct LambdaTable {
    std::vector<LambdaResult> rows;
    std::string csv_path;
    std::string manifest_path;
};

// Physical-loss weight sweep {0.1, 0.5, 1.0} on the both-stream full
// pipeline, evaluated on the grasp task; the 0.1 column reuses the
// ablation grid's cell artifacts.
LambdaTable sweep_lambda(const RunConfig& cfg, const std::string& root);

struct AttentionDumpSummary {
    std::string csv_path;
    int first_contact_step = -1; // -1 when the rollout never makes contact
    // Per physical stream (modality order): mean layer-averaged
    // standardized attention before first contact and during the
    // half-horizon window that starts at first contact.
    std::vector<std::string> streams;
    std::vector<double> pre_mean_z;
    std::vector<double> contact_mean_z;
};

// One closed-loop rollout; per step and layer, the mean attention mass
// from the action-stream queries onto each stream's keys, raw and
// z-scored over the episode (std floor 1e-8 -> zeros). CSV columns:
// step, layer, stream, raw, z, contact.
AttentionDumpSummary dump_attention(const Checkpoint& ck, int task_id,
                                    std::uint64_t seed,
                                    const std::string& csv_path);

struct PredictionDumpSummary {
    std::string csv_path;
    std::vector<std::string> modalities;
    std::vector<double> rmse_model;       // over all steps
    std::vector<double> rmse_persistence; // "repeat last value" baseline
    std::vector<double> rmse_model_transitions;
    std::vector<double> rmse_persistence_transitions;
    int n_transitions = 0;
};

// One rollout with per-step replanning; records the predicted next-step
// physical signal against the realized one and against the persistence
// baseline. CSV columns: step, modality, dim, predicted, realized,
// persistence, transition.
PredictionDumpSummary dump_predictions(const Checkpoint& ck, int task_id,
                                       std::uint64_t seed,
                                       const std::string& csv_path);

struct LatencyRow {
    std::string streams; // none | tactile | torque | both
    int tokens = 0;      // joint sequence length
    double median_ms = 0.0;
    double ratio = 0.0; // vs the stream-free model
};

// Median per-chunk sampling latency (single thread, warm) for the four
// stream configurations at the configured width/depth. Latency does not
// depend on the weights, so freshly initialized models are measured.
std::vector<LatencyRow> measure_latency(const RunConfig& cfg,
                                        int calls = 200);

void write_latency_csv(const std::string& path,
                       const std::vector<LatencyRow>& rows,
                       const std::string& config_hash);

// Provenance manifest written next to every top-level artifact set:
// operation name, full config + hash, demo file hashes, output paths.
void write_run_manifest(const std::string& path, const std::string& op,
                        const RunConfig& cfg, const DemoSet& demos,
                        const std::vector<std::string>& outputs,
                        double seconds);

} // namespace moss
