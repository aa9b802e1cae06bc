#include "moss/trainer.h"

#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "moss/optim.h"
#include "moss/params.h"
#include "moss/tape.h"

namespace moss {

namespace {

// Without-replacement sample order: epoch-level permutations from a
// derived seed, concatenated so batches may straddle epoch boundaries.
class SampleFeed {
public:
    SampleFeed(std::size_t n, std::uint64_t seed, std::string tag)
        : n_(n), seed_(seed), tag_(std::move(tag)) {
        if (n_ == 0) throw std::runtime_error("trainer: no training samples");
    }

    std::vector<std::size_t> next(int batch) {
        while (queue_.size() < static_cast<std::size_t>(batch)) refill();
        std::vector<std::size_t> out(queue_.begin(),
                                     queue_.begin() + batch);
        queue_.erase(queue_.begin(), queue_.begin() + batch);
        return out;
    }

private:
    void refill() {
        Rng rng(derive_seed(seed_, tag_ + "-epoch", epoch_++));
        std::vector<std::size_t> perm(n_);
        for (std::size_t i = 0; i < n_; ++i) perm[i] = i;
        for (std::size_t i = n_; i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(
                rng.uniform_int(static_cast<int>(i)));
            std::swap(perm[i - 1], perm[j]);
        }
        queue_.insert(queue_.end(), perm.begin(), perm.end());
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::string tag_;
    std::uint64_t epoch_ = 0;
    std::deque<std::size_t> queue_;
};

TrainabilityMask make_mask(const ParamStore& params, bool encoder, bool action,
                           bool streams) {
    TrainabilityMask mask;
    for (const auto& g : params.group_names()) {
        bool v = streams;
        if (g == "encoder") v = encoder;
        else if (g == "action") v = action;
        mask[g] = v;
    }
    return mask;
}

std::string log_line(const std::string& stage, int iter,
                     const LossBreakdown& b, double lr) {
    nlohmann::json j;
    j["stage"] = stage;
    j["iter"] = iter;
    j["lr"] = lr;
    j["lambda_phy"] = b.lambda_phy;
    j["l_act"] = b.l_act;
    nlohmann::json phy = nlohmann::json::object();
    for (const auto& [name, v] : b.l_phy_per_modality) phy[name] = v;
    j["l_phy"] = phy;
    j["l_total"] = b.l_total;
    return j.dump();
}

TrainReport run_phase(StreamModel& model, const RunConfig& cfg,
                      const NormStats& stats,
                      const std::vector<TrainSample>& samples,
                      const std::string& stage, int iters, bool with_action,
                      bool with_phy, const TrainabilityMask& mask,
                      const std::string& log_path) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig& mc = model.config();
    const auto& tc = cfg.training;

    set_trainable(model.params(), mask);
    auto trainable = model.params().trainable();
    if (trainable.empty())
        throw std::runtime_error("trainer: nothing to train in phase '" +
                                 stage + "'");

    OptimizerState opt;
    opt.beta1 = tc.beta1;
    opt.beta2 = tc.beta2;
    opt.weight_decay = tc.weight_decay;
    opt.peak_lr = tc.peak_lr;
    opt.warmup_steps = tc.warmup;
    opt.total_steps = iters;

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log)
            throw std::runtime_error("trainer: cannot open log file " +
                                     log_path);
    }

    std::vector<std::string> phy_names;
    for (const auto& m : mc.modalities) phy_names.push_back(m.name);

    SampleFeed feed(samples.size(), tc.seed, stage);
    TrainReport report;
    report.history.reserve(static_cast<std::size_t>(iters));

    for (int iter = 0; iter < iters; ++iter) {
        auto picks = feed.next(tc.batch_size);
        Rng noise_rng(derive_seed(tc.seed, stage + "-noise",
                                  static_cast<std::uint64_t>(iter)));
        TrainBatch batch = make_batch(samples, picks, mc, noise_rng);

        Tape tape;
        ForwardOutput out = model.forward(batch.input, &tape);

        Tensor l_act;
        if (with_action)
            l_act = velocity_matching_loss(batch.action_clean,
                                           batch.action_eps,
                                           out.action_velocity, &tape);
        std::vector<Tensor> l_phy;
        if (with_phy)
            for (std::size_t i = 0; i < mc.modalities.size(); ++i)
                l_phy.push_back(velocity_matching_loss(
                    batch.future_clean[i], batch.future_eps[i],
                    out.modality_velocity[i], &tape));

        Tensor total = combine_losses(l_act, l_phy, tc.lambda_phy, &tape);
        LossBreakdown bd = make_breakdown(
            total, l_act, with_phy ? phy_names : std::vector<std::string>{},
            l_phy, tc.lambda_phy);
        if (!std::isfinite(bd.l_total))
            throw std::runtime_error(
                "trainer: non-finite loss at iter " + std::to_string(iter) +
                " of phase '" + stage + "' (l_act=" +
                std::to_string(bd.l_act) + ", l_phy_sum=" +
                std::to_string(bd.phy_sum()) + ")");

        double lr = lr_at(opt.step + 1, opt);
        tape.backward(total);
        adamw_step(trainable, opt);

        if (log) log << log_line(stage, iter, bd, lr) << "\n";
        report.history.push_back(std::move(bd));
    }

    RunConfig stored = cfg;
    stored.model = mc; // the variant actually built (e.g. pinned fused width)
    report.checkpoint = snapshot_checkpoint(model, stored, stage, stats);
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return report;
}

// The base policy is the configured model with every physical stream
// removed (fused width, when applicable, is still resolved against the
// full configuration so base and final blocks agree).
ModelConfig base_model_config(const ModelConfig& full) {
    ModelConfig base = full;
    if (base.fused) base.fused_width = effective_width(full);
    base.modalities.clear();
    return base;
}

void check_compatible(const ModelConfig& have, const ModelConfig& want,
                      const std::string& who) {
    if (have.action_dim != want.action_dim ||
        have.state_dim != want.state_dim || have.horizon != want.horizon ||
        have.width != want.width || have.depth != want.depth ||
        have.heads != want.heads || have.obs_feat_dim != want.obs_feat_dim ||
        have.num_tasks != want.num_tasks || have.fused != want.fused)
        throw std::runtime_error(who +
                                 ": checkpoint model configuration is "
                                 "incompatible with the run configuration");
}

ModelConfig pin_fused_width(ModelConfig cfg, const Checkpoint& ck,
                            const std::string& who) {
    if (cfg.fused) {
        int resolved = effective_width(cfg);
        if (ck.config.model.fused_width != resolved)
            throw std::runtime_error(
                who + ": fused width mismatch between checkpoint and config");
        cfg.fused_width = resolved;
    }
    return cfg;
}

} // namespace

std::vector<ModalitySpec> sensor_channels() {
    return {{"tactile", 4}, {"torque", 2}};
}

TrainReport train_base(const RunConfig& cfg,
                       const std::vector<env::EpisodeRecord>& demos,
                       const std::string& log_path) {
    cfg.validate();
    if (demos.empty()) throw std::runtime_error("train_base: no demos");

    // Statistics cover the full sensor suite so later phases (and any
    // modality subset reusing this base) can look their channels up by
    // name.
    ModelConfig stats_cfg = cfg.model;
    stats_cfg.modalities = sensor_channels();
    NormStats stats = compute_norm_stats(demos, stats_cfg);

    ModelConfig base_cfg = base_model_config(cfg.model);
    StreamModel model(base_cfg, cfg.training.seed);
    auto samples = build_windows(demos, model.config(), stats);
    auto mask = make_mask(model.params(), true, true, true);
    return run_phase(model, cfg, stats, samples, "base",
                     cfg.training.iters_base, true, false, mask, log_path);
}

TrainReport train_stage1(const RunConfig& cfg, const Checkpoint& base,
                         const std::vector<env::EpisodeRecord>& demos,
                         const std::string& log_path) {
    cfg.validate();
    if (base.stage != "base")
        throw std::runtime_error("train_stage1: expected a base checkpoint, "
                                 "got stage '" +
                                 base.stage + "'");
    if (cfg.model.modalities.empty())
        throw std::runtime_error(
            "train_stage1: configuration has no physical modalities");
    check_compatible(base.config.model, cfg.model, "train_stage1");

    ModelConfig mc = pin_fused_width(cfg.model, base, "train_stage1");
    StreamModel model(mc, cfg.training.seed);
    apply_checkpoint_subset(model, base); // streams keep fresh init
    auto samples = build_windows(demos, model.config(), base.stats);
    auto mask = make_mask(model.params(), false, false, true);
    return run_phase(model, cfg, base.stats, samples, "stage1",
                     cfg.training.iters_stage1, false, true, mask, log_path);
}

TrainReport train_stage2(const RunConfig& cfg, const Checkpoint& stage1,
                         const std::vector<env::EpisodeRecord>& demos,
                         const std::string& log_path) {
    cfg.validate();
    if (stage1.stage != "stage1")
        throw std::runtime_error(
            "train_stage2: expected a stage1 checkpoint, got stage '" +
            stage1.stage + "'");
    check_compatible(stage1.config.model, cfg.model, "train_stage2");

    ModelConfig mc = pin_fused_width(cfg.model, stage1, "train_stage2");
    StreamModel model(mc, cfg.training.seed);
    apply_checkpoint(model, stage1);
    auto samples = build_windows(demos, model.config(), stage1.stats);
    auto mask = make_mask(model.params(), !cfg.training.freeze_encoder, true,
                          true);
    return run_phase(model, cfg, stage1.stats, samples, "stage2",
                     cfg.training.iters_stage2, true, true, mask, log_path);
}

TrainReport train_single_stage(const RunConfig& cfg, const Checkpoint& base,
                               const std::vector<env::EpisodeRecord>& demos,
                               const std::string& log_path) {
    cfg.validate();
    if (base.stage != "base")
        throw std::runtime_error(
            "train_single_stage: expected a base checkpoint, got stage '" +
            base.stage + "'");
    if (cfg.model.modalities.empty())
        throw std::runtime_error(
            "train_single_stage: configuration has no physical modalities");
    check_compatible(base.config.model, cfg.model, "train_single_stage");

    ModelConfig mc = pin_fused_width(cfg.model, base, "train_single_stage");
    StreamModel model(mc, cfg.training.seed);
    apply_checkpoint_subset(model, base);
    auto samples = build_windows(demos, model.config(), base.stats);
    auto mask = make_mask(model.params(), !cfg.training.freeze_encoder, true,
                          true);
    return run_phase(model, cfg, base.stats, samples, "single-stage",
                     cfg.training.iters_stage1 + cfg.training.iters_stage2,
                     true, true, mask, log_path);
}

} // namespace moss
