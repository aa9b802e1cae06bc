#include "moss/eval.h"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

namespace moss {

namespace {

void bump_latent(std::vector<int>& v, int latent) {
    if (latent < 0) throw std::runtime_error("evaluate: negative latent");
    if (static_cast<std::size_t>(latent) >= v.size())
        v.resize(static_cast<std::size_t>(latent) + 1, 0);
    ++v[static_cast<std::size_t>(latent)];
}

SuccessReport finish_report(std::string task, std::string id, int n,
                            std::uint64_t seed0,
                            const std::vector<int>& latents,
                            const std::vector<bool>& wins) {
    SuccessReport r;
    r.task = std::move(task);
    r.checkpoint_id = std::move(id);
    r.n_episodes = n;
    r.seed_first = seed0;
    r.seed_last = seed0 + static_cast<std::uint64_t>(n) - 1;
    for (int e = 0; e < n; ++e) {
        bump_latent(r.latent_episodes, latents[static_cast<std::size_t>(e)]);
        if (wins[static_cast<std::size_t>(e)]) {
            ++r.successes;
            bump_latent(r.latent_successes,
                        latents[static_cast<std::size_t>(e)]);
        }
    }
    if (r.latent_successes.size() < r.latent_episodes.size())
        r.latent_successes.resize(r.latent_episodes.size(), 0);
    r.success_rate =
        static_cast<double>(r.successes) / static_cast<double>(n);
    return r;
}

} // namespace

std::string success_report_to_json(const SuccessReport& r) {
    nlohmann::json j;
    j["task"] = r.task;
    j["checkpoint_id"] = r.checkpoint_id;
    j["n_episodes"] = r.n_episodes;
    j["successes"] = r.successes;
    j["success_rate"] = r.success_rate;
    j["latent_episodes"] = r.latent_episodes;
    j["latent_successes"] = r.latent_successes;
    j["seed_first"] = r.seed_first;
    j["seed_last"] = r.seed_last;
    return j.dump();
}

SuccessReport success_report_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    static const char* keys[] = {"task",           "checkpoint_id",
                                 "n_episodes",     "successes",
                                 "success_rate",   "latent_episodes",
                                 "latent_successes", "seed_first",
                                 "seed_last"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : keys) known = known || it.key() == k;
        if (!known)
            throw std::runtime_error(
                "success report: unknown key '" + it.key() + "'");
    }
    SuccessReport r;
    r.task = j.at("task").get<std::string>();
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.n_episodes = j.at("n_episodes").get<int>();
    r.successes = j.at("successes").get<int>();
    r.success_rate = j.at("success_rate").get<double>();
    r.latent_episodes = j.at("latent_episodes").get<std::vector<int>>();
    r.latent_successes = j.at("latent_successes").get<std::vector<int>>();
    r.seed_first = j.at("seed_first").get<std::uint64_t>();
    r.seed_last = j.at("seed_last").get<std::uint64_t>();
    int latent_sum = 0;
    for (int c : r.latent_episodes) latent_sum += c;
    if (latent_sum != r.n_episodes)
        throw std::runtime_error(
            "success report: per-latent counts do not sum to n_episodes");
    return r;
}

SampleInput make_policy_input(const ModelConfig& cfg, const NormStats& stats,
                              const std::vector<env::Observation>& history,
                              int task_id) {
    if (history.empty())
        throw std::runtime_error("make_policy_input: empty history");
    const int h = cfg.horizon;
    const int len = static_cast<int>(history.size());
    const env::Observation& now = history.back();

    SampleInput in;
    in.batch = 1;
    in.task_ids = {task_id};
    if (static_cast<int>(now.visual_feat.size()) != cfg.obs_feat_dim)
        throw std::runtime_error("make_policy_input: visual feature size");
    in.visual_feat = Tensor::from({1, cfg.obs_feat_dim}, now.visual_feat);

    std::vector<double> state = now.state;
    normalize_rows(state, stats.state_mean, stats.state_std);
    in.state = Tensor::from({1, cfg.state_dim}, std::move(state));

    for (const auto& m : cfg.modalities) {
        const std::size_t si = norm_stats_index(stats, m);
        std::vector<double> window;
        window.reserve(static_cast<std::size_t>(h) * m.dim);
        for (int j = 0; j < h; ++j) {
            int idx = std::max(0, len - h + j);
            auto row = modality_signal(
                history[static_cast<std::size_t>(idx)], m.name);
            window.insert(window.end(), row.begin(), row.end());
        }
        normalize_rows(window, stats.modality_mean[si],
                       stats.modality_std[si]);
        in.windows.push_back(Tensor::from({h, m.dim}, std::move(window)));
    }
    return in;
}

env::Action chunk_action(const Tensor& chunk, int row,
                         const NormStats& stats) {
    if (chunk.cols() != 3 || row < 0 || row >= chunk.rows())
        throw std::runtime_error("chunk_action: row out of range");
    std::vector<double> a(3);
    for (int c = 0; c < 3; ++c)
        a[static_cast<std::size_t>(c)] = chunk.at(row, c);
    denormalize_rows(a, stats.action_mean, stats.action_std);
    return {a[0], a[1], a[2]};
}

SuccessReport evaluate_policy(const Checkpoint& ck, int task_id, int n,
                              std::uint64_t seed0,
                              const std::string& checkpoint_id,
                              double obs_noise, int batch_cap) {
    if (n < 1) throw std::runtime_error("evaluate: n must be >= 1");
    if (batch_cap < 1)
        throw std::runtime_error("evaluate: batch_cap must be >= 1");
    const ModelConfig& mc = ck.config.model;
    if (task_id < 0 || task_id >= mc.num_tasks)
        throw std::runtime_error(
            "evaluate: task '" + env::task_name(task_id) +
            "' is outside the checkpoint's task range");

    StreamModel model(mc, ck.config.training.seed);
    apply_checkpoint(model, ck);
    const NormStats& stats = ck.stats;
    const int h = mc.horizon;
    const int stride = std::max(1, h / 2);
    const int K = ck.config.training.k_sample;
    const double noise =
        obs_noise < 0.0 ? ck.config.env.obs_noise : obs_noise;

    struct Ep {
        env::ArmEnv env;
        std::vector<env::Observation> history;
        Rng chunk_rng;
        bool finished = false;
    };
    std::vector<Ep> eps;
    eps.reserve(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) {
        std::uint64_t seed = seed0 + static_cast<std::uint64_t>(e);
        Ep ep{env::ArmEnv(task_id, seed, noise),
              {},
              Rng(derive_seed(seed, "eval-chunk-noise")),
              false};
        ep.history.push_back(ep.env.observation());
        eps.push_back(std::move(ep));
    }

    std::vector<std::size_t> active(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) active[static_cast<std::size_t>(e)] = e;

    while (!active.empty()) {
        for (std::size_t lo = 0; lo < active.size();
             lo += static_cast<std::size_t>(batch_cap)) {
            std::size_t hi = std::min(
                active.size(), lo + static_cast<std::size_t>(batch_cap));
            const int B = static_cast<int>(hi - lo);

            SampleInput in;
            in.batch = B;
            in.visual_feat = Tensor::zeros({B, mc.obs_feat_dim});
            in.state = Tensor::zeros({B, mc.state_dim});
            in.task_ids.assign(static_cast<std::size_t>(B), task_id);
            for (const auto& m : mc.modalities)
                in.windows.push_back(Tensor::zeros({B * h, m.dim}));
            ChunkState noise_state;
            noise_state.action = Tensor::zeros({B * h, mc.action_dim});
            for (const auto& m : mc.modalities)
                noise_state.futures.push_back(Tensor::zeros({B * h, m.dim}));

            for (int b = 0; b < B; ++b) {
                Ep& ep = eps[active[lo + static_cast<std::size_t>(b)]];
                SampleInput one = make_policy_input(mc, stats, ep.history,
                                                    task_id);
                for (int c = 0; c < mc.obs_feat_dim; ++c)
                    in.visual_feat.at(b, c) = one.visual_feat.at(0, c);
                for (int c = 0; c < mc.state_dim; ++c)
                    in.state.at(b, c) = one.state.at(0, c);
                ChunkState one_noise =
                    draw_chunk_noise(mc, 1, ep.chunk_rng);
                for (int r = 0; r < h; ++r) {
                    for (int c = 0; c < mc.action_dim; ++c)
                        noise_state.action.at(b * h + r, c) =
                            one_noise.action.at(r, c);
                    for (std::size_t i = 0; i < mc.modalities.size(); ++i) {
                        for (int c = 0; c < mc.modalities[i].dim; ++c) {
                            in.windows[i].at(b * h + r, c) =
                                one.windows[i].at(r, c);
                            noise_state.futures[i].at(b * h + r, c) =
                                one_noise.futures[i].at(r, c);
                        }
                    }
                }
            }

            Tensor chunk = model.sample_chunks(in, K, noise_state).action;
            for (int b = 0; b < B; ++b) {
                Ep& ep = eps[active[lo + static_cast<std::size_t>(b)]];
                for (int s = 0; s < stride && !ep.finished; ++s) {
                    env::Action a =
                        chunk_action(chunk, b * h + s, stats);
                    env::StepResult res = ep.env.step(a);
                    ep.history.push_back(res.obs);
                    if (res.done) ep.finished = true;
                }
            }
        }
        std::vector<std::size_t> still;
        for (std::size_t idx : active)
            if (!eps[idx].finished) still.push_back(idx);
        active.swap(still);
    }

    std::vector<int> latents;
    std::vector<bool> wins;
    for (const Ep& ep : eps) {
        latents.push_back(ep.env.latent());
        wins.push_back(ep.env.success());
    }
    std::string id = checkpoint_id.empty() ? ck.stage : checkpoint_id;
    return finish_report(env::task_name(task_id), id, n, seed0, latents,
                         wins);
}

SuccessReport evaluate_expert(int task_id, int n, std::uint64_t seed0,
                              double obs_noise) {
    if (n < 1) throw std::runtime_error("evaluate: n must be >= 1");
    std::vector<int> latents;
    std::vector<bool> wins;
    for (int e = 0; e < n; ++e) {
        env::ArmEnv env(task_id, seed0 + static_cast<std::uint64_t>(e),
                        obs_noise);
        while (!env.done()) env.step(env.expert_action());
        latents.push_back(env.latent());
        wins.push_back(env.success());
    }
    return finish_report(env::task_name(task_id), "expert", n, seed0,
                         latents, wins);
}

SuccessReport evaluate_random(int task_id, int n, std::uint64_t seed0,
                              double obs_noise) {
    if (n < 1) throw std::runtime_error("evaluate: n must be >= 1");
    std::vector<int> latents;
    std::vector<bool> wins;
    for (int e = 0; e < n; ++e) {
        std::uint64_t seed = seed0 + static_cast<std::uint64_t>(e);
        env::ArmEnv env(task_id, seed, obs_noise);
        Rng rng(derive_seed(seed, "eval-random"));
        while (!env.done()) {
            env::Action a{rng.uniform(-env::kMaxJointDelta,
                                      env::kMaxJointDelta),
                          rng.uniform(-env::kMaxJointDelta,
                                      env::kMaxJointDelta),
                          rng.uniform(-env::kMaxApertureDelta,
                                      env::kMaxApertureDelta)};
            env.step(a);
        }
        latents.push_back(env.latent());
        wins.push_back(env.success());
    }
    return finish_report(env::task_name(task_id), "random", n, seed0,
                         latents, wins);
}

} // namespace moss
