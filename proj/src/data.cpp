#include "moss/data.h"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>

#include <json.hpp>

namespace moss {

namespace {

void accumulate(std::vector<double>& mean, std::vector<double>& m2,
                std::size_t& count, const std::vector<double>& row) {
    // Welford update, one row at a time.
    ++count;
    for (std::size_t j = 0; j < row.size(); ++j) {
        double delta = row[j] - mean[j];
        mean[j] += delta / static_cast<double>(count);
        m2[j] += delta * (row[j] - mean[j]);
    }
}

std::vector<double> finish_std(const std::vector<double>& m2,
                               std::size_t count) {
    std::vector<double> out(m2.size(), kStdFloor);
    if (count == 0) return out;
    for (std::size_t j = 0; j < m2.size(); ++j) {
        double var = m2[j] / static_cast<double>(count);
        out[j] = std::max(std::sqrt(var), kStdFloor);
    }
    return out;
}

} // namespace

std::size_t norm_stats_index(const NormStats& stats, const ModalitySpec& m) {
    for (std::size_t i = 0; i < stats.modality_names.size(); ++i) {
        if (stats.modality_names[i] != m.name) continue;
        if (stats.modality_mean[i].size() != static_cast<std::size_t>(m.dim))
            throw std::runtime_error(
                "normalization stats: dimension mismatch for modality '" +
                m.name + "'");
        return i;
    }
    throw std::runtime_error(
        "normalization stats: no entry for modality '" + m.name + "'");
}

std::vector<double> modality_signal(const env::Observation& obs,
                                    const std::string& name) {
    if (name == "tactile")
        return std::vector<double>(obs.tactile.begin(), obs.tactile.end());
    if (name == "torque")
        return std::vector<double>(obs.torque.begin(), obs.torque.end());
    throw std::runtime_error("modality_signal: no sensor channel named '" +
                             name + "'");
}

NormStats compute_norm_stats(const std::vector<env::EpisodeRecord>& demos,
                             const ModelConfig& cfg) {
    if (demos.empty())
        throw std::runtime_error("compute_norm_stats: no demonstrations");
    NormStats st;
    st.action_mean.assign(static_cast<std::size_t>(cfg.action_dim), 0.0);
    st.state_mean.assign(static_cast<std::size_t>(cfg.state_dim), 0.0);
    std::vector<double> act_m2(st.action_mean.size(), 0.0);
    std::vector<double> state_m2(st.state_mean.size(), 0.0);
    std::size_t act_n = 0, state_n = 0;

    st.modality_names.reserve(cfg.modalities.size());
    std::vector<std::vector<double>> mod_m2;
    std::vector<std::size_t> mod_n(cfg.modalities.size(), 0);
    for (const auto& m : cfg.modalities) {
        st.modality_names.push_back(m.name);
        st.modality_mean.emplace_back(static_cast<std::size_t>(m.dim), 0.0);
        mod_m2.emplace_back(static_cast<std::size_t>(m.dim), 0.0);
    }

    for (const auto& ep : demos) {
        for (const auto& a : ep.actions) {
            std::vector<double> row(a.begin(), a.end());
            if (row.size() != st.action_mean.size())
                throw std::runtime_error(
                    "compute_norm_stats: action dim mismatch");
            accumulate(st.action_mean, act_m2, act_n, row);
        }
        for (const auto& obs : ep.observations) {
            if (obs.state.size() != st.state_mean.size())
                throw std::runtime_error(
                    "compute_norm_stats: state dim mismatch");
            accumulate(st.state_mean, state_m2, state_n, obs.state);
            for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
                auto row = modality_signal(obs, cfg.modalities[i].name);
                if (row.size() !=
                    static_cast<std::size_t>(cfg.modalities[i].dim))
                    throw std::runtime_error(
                        "compute_norm_stats: modality '" +
                        cfg.modalities[i].name + "' dim mismatch");
                accumulate(st.modality_mean[i], mod_m2[i], mod_n[i], row);
            }
        }
    }

    st.action_std = finish_std(act_m2, act_n);
    st.state_std = finish_std(state_m2, state_n);
    for (std::size_t i = 0; i < cfg.modalities.size(); ++i)
        st.modality_std.push_back(finish_std(mod_m2[i], mod_n[i]));
    return st;
}

std::string norm_stats_to_json(const NormStats& stats) {
    nlohmann::json j;
    j["action_mean"] = stats.action_mean;
    j["action_std"] = stats.action_std;
    j["state_mean"] = stats.state_mean;
    j["state_std"] = stats.state_std;
    j["modalities"] = nlohmann::json::array();
    for (std::size_t i = 0; i < stats.modality_names.size(); ++i) {
        nlohmann::json m;
        m["name"] = stats.modality_names[i];
        m["mean"] = stats.modality_mean[i];
        m["std"] = stats.modality_std[i];
        j["modalities"].push_back(m);
    }
    return j.dump();
}

NormStats norm_stats_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    NormStats st;
    st.action_mean = j.at("action_mean").get<std::vector<double>>();
    st.action_std = j.at("action_std").get<std::vector<double>>();
    st.state_mean = j.at("state_mean").get<std::vector<double>>();
    st.state_std = j.at("state_std").get<std::vector<double>>();
    for (const auto& m : j.at("modalities")) {
        st.modality_names.push_back(m.at("name").get<std::string>());
        st.modality_mean.push_back(m.at("mean").get<std::vector<double>>());
        st.modality_std.push_back(m.at("std").get<std::vector<double>>());
    }
    return st;
}

void normalize_rows(std::vector<double>& x, const std::vector<double>& mean,
                    const std::vector<double>& std) {
    std::size_t d = mean.size();
    if (d == 0 || x.size() % d != 0)
        throw std::runtime_error("normalize_rows: width mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::size_t j = i % d;
        x[i] = (x[i] - mean[j]) / std[j];
    }
}

void denormalize_rows(std::vector<double>& x, const std::vector<double>& mean,
                      const std::vector<double>& std) {
    std::size_t d = mean.size();
    if (d == 0 || x.size() % d != 0)
        throw std::runtime_error("denormalize_rows: width mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::size_t j = i % d;
        x[i] = x[i] * std[j] + mean[j];
    }
}

std::vector<TrainSample> build_windows(
    const std::vector<env::EpisodeRecord>& demos, const ModelConfig& cfg,
    const NormStats& stats) {
    if (demos.empty())
        throw std::runtime_error("build_windows: no demonstrations");
    const int h = cfg.horizon;
    std::vector<TrainSample> out;
    for (const auto& ep : demos) {
        const int len = static_cast<int>(ep.actions.size());
        if (len == 0 ||
            ep.observations.size() != static_cast<std::size_t>(len) + 1)
            throw std::runtime_error(
                "build_windows: episode with mismatched action/observation "
                "counts");
        for (int t = 0; t < len; ++t) {
            TrainSample s;
            s.t = t;
            s.task_id = ep.task_id;
            s.visual_feat = ep.observations[static_cast<std::size_t>(t)]
                                .visual_feat;
            s.state = ep.observations[static_cast<std::size_t>(t)].state;
            normalize_rows(s.state, stats.state_mean, stats.state_std);

            s.actions.reserve(static_cast<std::size_t>(h) * 3);
            for (int j = 0; j < h; ++j) {
                int idx = std::min(t + j, len - 1);
                const auto& a = ep.actions[static_cast<std::size_t>(idx)];
                s.actions.insert(s.actions.end(), a.begin(), a.end());
            }
            s.padded_future_steps = std::max(0, t + h - len);
            normalize_rows(s.actions, stats.action_mean, stats.action_std);

            for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
                const auto& name = cfg.modalities[i].name;
                const std::size_t si =
                    norm_stats_index(stats, cfg.modalities[i]);
                std::vector<double> past, fut;
                for (int j = 0; j < h; ++j) {
                    // Past covers [t-H+1, t], repeating the first
                    // observation; future covers [t+1, t+H], repeating
                    // the final one.
                    int pidx = std::max(0, t - h + 1 + j);
                    int fidx = std::min(t + 1 + j, len);
                    auto prow = modality_signal(
                        ep.observations[static_cast<std::size_t>(pidx)], name);
                    auto frow = modality_signal(
                        ep.observations[static_cast<std::size_t>(fidx)], name);
                    past.insert(past.end(), prow.begin(), prow.end());
                    fut.insert(fut.end(), frow.begin(), frow.end());
                }
                normalize_rows(past, stats.modality_mean[si],
                               stats.modality_std[si]);
                normalize_rows(fut, stats.modality_mean[si],
                               stats.modality_std[si]);
                s.windows.push_back(std::move(past));
                s.futures.push_back(std::move(fut));
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

TrainBatch make_batch(const std::vector<TrainSample>& samples,
                      const std::vector<std::size_t>& picks,
                      const ModelConfig& cfg, Rng& rng) {
    if (picks.empty()) throw std::runtime_error("make_batch: empty batch");
    const int b = static_cast<int>(picks.size());
    const int h = cfg.horizon;
    const int adim = cfg.action_dim;

    TrainBatch batch;
    auto& in = batch.input;
    in.batch = b;
    in.visual_feat = Tensor::zeros({b, cfg.obs_feat_dim});
    in.state = Tensor::zeros({b, cfg.state_dim});
    in.task_ids.resize(static_cast<std::size_t>(b));
    in.tau.resize(static_cast<std::size_t>(b));
    in.noised_action = Tensor::zeros({b * h, adim});
    batch.action_clean = Tensor::zeros({b * h, adim});
    batch.action_eps = Tensor::zeros({b * h, adim});
    for (const auto& m : cfg.modalities) {
        in.windows.push_back(Tensor::zeros({b * h, m.dim}));
        in.noised_future.push_back(Tensor::zeros({b * h, m.dim}));
        batch.future_clean.push_back(Tensor::zeros({b * h, m.dim}));
        batch.future_eps.push_back(Tensor::zeros({b * h, m.dim}));
    }

    for (int s = 0; s < b; ++s) {
        const TrainSample& smp = samples.at(picks[static_cast<std::size_t>(s)]);
        if (static_cast<int>(smp.windows.size()) !=
            static_cast<int>(cfg.modalities.size()))
            throw std::runtime_error(
                "make_batch: sample modality count mismatch");
        // Fixed draw order per sample: tau, action noise, then one noise
        // block per modality in configured order.
        double tau = rng.uniform();
        in.tau[static_cast<std::size_t>(s)] = tau;
        in.task_ids[static_cast<std::size_t>(s)] = smp.task_id;
        for (int j = 0; j < cfg.obs_feat_dim; ++j)
            in.visual_feat.at(s, j) = smp.visual_feat.at(
                static_cast<std::size_t>(j));
        for (int j = 0; j < cfg.state_dim; ++j)
            in.state.at(s, j) = smp.state.at(static_cast<std::size_t>(j));

        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < adim; ++c) {
                double x = smp.actions.at(
                    static_cast<std::size_t>(r * adim + c));
                double eps = rng.normal();
                batch.action_clean.at(s * h + r, c) = x;
                batch.action_eps.at(s * h + r, c) = eps;
                in.noised_action.at(s * h + r, c) =
                    tau * x + (1.0 - tau) * eps;
            }
        }
        for (std::size_t i = 0; i < cfg.modalities.size(); ++i) {
            const int d = cfg.modalities[i].dim;
            for (int r = 0; r < h; ++r) {
                for (int c = 0; c < d; ++c) {
                    double w = smp.windows[i].at(
                        static_cast<std::size_t>(r * d + c));
                    double x = smp.futures[i].at(
                        static_cast<std::size_t>(r * d + c));
                    double eps = rng.normal();
                    in.windows[i].at(s * h + r, c) = w;
                    batch.future_clean[i].at(s * h + r, c) = x;
                    batch.future_eps[i].at(s * h + r, c) = eps;
                    in.noised_future[i].at(s * h + r, c) =
                        tau * x + (1.0 - tau) * eps;
                }
            }
        }
    }
    return batch;
}

} // namespace moss
