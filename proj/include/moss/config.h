#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace moss {

struct ModalitySpec {
    std::string name;
    int dim = 1;
};

struct ModelConfig {
    int action_dim = 3;
    int state_dim = 5;
    int horizon = 8;
    std::vector<ModalitySpec> modalities = {{"tactile", 4}, {"torque", 2}};
    int width = 64;
    int depth = 4;
    int heads = 4;
    int obs_feat_dim = 8;
    int num_tasks = 2;
    // Control variant: all token segments share one stream and one block
    // stack. fused_width 0 means "search for the parameter-matched width".
    bool fused = false;
    int fused_width = 0;

    int context_tokens() const { return 2; }
    int action_tokens() const { return context_tokens() + 1 + horizon; }
    int modality_tokens() const { return 2 * horizon; }

    void validate() const;
};

struct TrainingConfig {
    int batch_size = 16;
    double peak_lr = 1e-4;
    double beta1 = 0.95;
    double beta2 = 0.999;
    double weight_decay = 1e-5;
    int warmup = 100;
    int iters_base = 2000;
    int iters_stage1 = 1000;
    int iters_stage2 = 2000;
    double lambda_phy = 0.1;
    int k_sample = 10;
    // When true, the observation encoder stays frozen after base training
    // (it is then fine-tuned only during base pretraining). Off by
    // default: stage 2 fine-tunes every parameter group.
    bool freeze_encoder = false;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EnvConfig {
    double obs_noise = 0.01;
    int demos_per_task = 100;

    void validate() const;
};

struct EvalConfig {
    int episodes = 200;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TrainingConfig training;
    EnvConfig env;
    EvalConfig eval;

    void validate() const;
};

// Strict parse: unknown keys anywhere in the document are an error naming
// the key. Absent keys keep their defaults.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

} // namespace moss
