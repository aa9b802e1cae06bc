#include "moss/model.h"

#include <cmath>
#include <stdexcept>
#include <string>

namespace moss {

namespace {

void check_shape(const Tensor& t, int rows, int cols, const char* what) {
    if (!t.defined() || t.rank() != 2 || t.rows() != rows || t.cols() != cols)
        throw std::runtime_error(std::string("forward: ") + what +
                                 " must be [" + std::to_string(rows) + "," +
                                 std::to_string(cols) + "], got " +
                                 (t.defined() ? t.shape_str() : "undefined"));
}

} // namespace

Tensor noisy_interpolant(const Tensor& x, const Tensor& eps, double tau) {
    if (x.shape() != eps.shape())
        throw std::runtime_error("noisy_interpolant: shape mismatch " +
                                 x.shape_str() + " vs " + eps.shape_str());
    if (!(tau >= 0.0 && tau <= 1.0))
        throw std::runtime_error("noisy_interpolant: tau must be in [0,1], got " +
                                 std::to_string(tau));
    if (tau == 0.0)
        return Tensor::from(eps.shape(), eps.vec());
    if (tau == 1.0)
        return Tensor::from(x.shape(), x.vec());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = tau * x.data()[i] + (1.0 - tau) * eps.data()[i];
    return Tensor::from(x.shape(), std::move(out));
}

std::vector<double> tau_features(double tau, int width) {
    std::vector<double> f(width, 0.0);
    const int half = width / 2;
    for (int j = 0; j < half; ++j) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
        f[j] = std::sin(tau * 1000.0 * freq);
        f[half + j] = std::cos(tau * 1000.0 * freq);
    }
    if (width % 2 == 1)
        f[width - 1] = tau;
    return f;
}

ChunkState euler_sample(const VelocityField& field, const ChunkState& noise,
                        int K) {
    if (K < 1)
        throw std::runtime_error("euler_sample: K must be >= 1");
    ChunkState cur;
    cur.action = Tensor::from(noise.action.shape(), noise.action.vec());
    for (const Tensor& f : noise.futures)
        cur.futures.push_back(Tensor::from(f.shape(), f.vec()));
    const double step = 1.0 / static_cast<double>(K);
    for (int k = 0; k < K; ++k) {
        const double tau = static_cast<double>(k) * step;
        ChunkState vel = field(tau, cur);
        if (vel.action.shape() != cur.action.shape() ||
            vel.futures.size() != cur.futures.size())
            throw std::runtime_error(
                "euler_sample: velocity shapes do not match the state");
        for (std::size_t i = 0; i < cur.action.size(); ++i)
            cur.action.data()[i] += step * vel.action.data()[i];
        for (std::size_t m = 0; m < cur.futures.size(); ++m) {
            if (vel.futures[m].shape() != cur.futures[m].shape())
                throw std::runtime_error(
                    "euler_sample: future velocity shape mismatch");
            for (std::size_t i = 0; i < cur.futures[m].size(); ++i)
                cur.futures[m].data()[i] += step * vel.futures[m].data()[i];
        }
    }
    return cur;
}

StreamModel::StreamModel(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
    width_ = effective_width(cfg_);
    if (cfg_.fused)
        cfg_.fused_width = width_; // pin the resolved width for checkpoints
    params_ = build_params(cfg_, seed);
}

Tensor StreamModel::encode_observation(const std::vector<double>& visual_feat,
                                       int task_id) const {
    if (static_cast<int>(visual_feat.size()) != cfg_.obs_feat_dim)
        throw std::runtime_error("encode_observation: expected " +
                                 std::to_string(cfg_.obs_feat_dim) +
                                 " visual features, got " +
                                 std::to_string(visual_feat.size()));
    if (task_id < 0 || task_id >= cfg_.num_tasks)
        throw std::runtime_error("encode_observation: task_id " +
                                 std::to_string(task_id) + " out of range [0," +
                                 std::to_string(cfg_.num_tasks) + ")");
    Tensor feat = Tensor::from({1, cfg_.obs_feat_dim}, visual_feat);
    Tensor vis = ops::linear(feat, params_.at("enc.vis.w"), params_.at("enc.vis.b"));
    Tensor task = ops::rows_select(params_.at("enc.task"), {task_id});
    return ops::concat_rows({vis, task});
}

ForwardOutput StreamModel::forward(const ForwardInput& in, Tape* tape,
                                   bool want_attention) const {
    const int B = in.batch;
    const int H = cfg_.horizon;
    const int w = width_;
    const int n_mod = static_cast<int>(cfg_.modalities.size());
    if (B < 1)
        throw std::runtime_error("forward: batch must be >= 1");
    check_shape(in.visual_feat, B, cfg_.obs_feat_dim, "visual_feat");
    check_shape(in.state, B, cfg_.state_dim, "state");
    check_shape(in.noised_action, B * H, cfg_.action_dim, "noised_action");
    if (static_cast<int>(in.task_ids.size()) != B)
        throw std::runtime_error("forward: task_ids must have one entry per sample");
    for (int id : in.task_ids)
        if (id < 0 || id >= cfg_.num_tasks)
            throw std::runtime_error("forward: task_id " + std::to_string(id) +
                                     " out of range");
    if (static_cast<int>(in.tau.size()) != B)
        throw std::runtime_error("forward: tau must have one entry per sample");
    for (double t : in.tau)
        if (!(t >= 0.0 && t <= 1.0))
            throw std::runtime_error("forward: tau out of [0,1]");
    if (static_cast<int>(in.windows.size()) != n_mod ||
        static_cast<int>(in.noised_future.size()) != n_mod)
        throw std::runtime_error(
            "forward: expected one window and one noised future per modality");
    for (int i = 0; i < n_mod; ++i) {
        check_shape(in.windows[i], B * H, cfg_.modalities[i].dim,
                    ("window '" + cfg_.modalities[i].name + "'").c_str());
        check_shape(in.noised_future[i], B * H, cfg_.modalities[i].dim,
                    ("noised future '" + cfg_.modalities[i].name + "'").c_str());
    }

    const ParamStore& P = params_;
    auto param = [&P](const std::string& name) -> const Tensor& {
        return P.at(name);
    };

    // Shared flow-time features, one row per sample.
    std::vector<double> tf(static_cast<std::size_t>(B) * w);
    for (int b = 0; b < B; ++b) {
        const std::vector<double> row = tau_features(in.tau[b], w);
        std::copy(row.begin(), row.end(), tf.begin() + static_cast<std::size_t>(b) * w);
    }
    const Tensor tauf = Tensor::from({B, w}, std::move(tf));

    // Token segments.
    Tensor vis = ops::linear(in.visual_feat, param("enc.vis.w"), param("enc.vis.b"), tape);
    Tensor task = ops::rows_select(param("enc.task"), in.task_ids, tape);
    Tensor state_tok = ops::linear(in.state, param("act.embed.state.w"),
                                   param("act.embed.state.b"), tape);
    Tensor act_tok = ops::linear(in.noised_action, param("act.embed.act.w"),
                                 param("act.embed.act.b"), tape);
    Tensor act_seg = ops::concat_rows_per_sample({vis, task, state_tok, act_tok},
                                                 B, {1, 1, 1, H}, tape);
    act_seg = ops::add_broadcast_rows(act_seg, param("act.pos"), B, tape);

    std::vector<Tensor> mod_segs;
    for (int i = 0; i < n_mod; ++i) {
        const std::string prefix = "str." + cfg_.modalities[i].name;
        Tensor past = ops::linear(in.windows[i], param(prefix + ".embed.past.w"),
                                  param(prefix + ".embed.past.b"), tape);
        Tensor fut = ops::linear(in.noised_future[i], param(prefix + ".embed.fut.w"),
                                 param(prefix + ".embed.fut.b"), tape);
        Tensor seg = ops::concat_rows_per_sample({past, fut}, B, {H, H}, tape);
        mod_segs.push_back(
            ops::add_broadcast_rows(seg, param(prefix + ".pos"), B, tape));
    }

    struct StreamCtx {
        std::string prefix; // block/conditioning parameter prefix
        int tokens = 0;
        Tensor x;
        Tensor cond;
    };
    std::vector<StreamCtx> streams;
    if (!cfg_.fused) {
        streams.push_back({"act", cfg_.action_tokens(), act_seg, Tensor()});
        for (int i = 0; i < n_mod; ++i)
            streams.push_back({"str." + cfg_.modalities[i].name,
                               cfg_.modality_tokens(), mod_segs[i], Tensor()});
    } else {
        std::vector<Tensor> segs = {act_seg};
        std::vector<int> counts = {cfg_.action_tokens()};
        for (int i = 0; i < n_mod; ++i) {
            segs.push_back(mod_segs[i]);
            counts.push_back(cfg_.modality_tokens());
        }
        Tensor x = ops::concat_rows_per_sample(segs, B, counts, tape);
        int total = 0;
        for (int c : counts)
            total += c;
        streams.push_back({"act", total, x, Tensor()});
    }
    for (StreamCtx& s : streams)
        s.cond = ops::silu(ops::linear(tauf, param(s.prefix + ".tau.w"),
                                       param(s.prefix + ".tau.b"), tape),
                           tape);

    AttentionSummary attn;
    for (int l = 0; l < cfg_.depth; ++l) {
        std::vector<Tensor> qs, ks, vs, scale2, shift2;
        for (StreamCtx& s : streams) {
            const std::string base = s.prefix + ".blk" + std::to_string(l);
            Tensor ada = ops::linear(s.cond, param(base + ".ada.w"),
                                     param(base + ".ada.b"), tape);
            std::vector<Tensor> mods = ops::split_lastaxis(ada, 4, tape);
            Tensor h = ops::layer_norm(s.x, param(base + ".ln1.g"),
                                       param(base + ".ln1.b"), tape);
            h = ops::modulate_per_sample(h, mods[0], mods[1], s.tokens, tape);
            qs.push_back(ops::linear(h, param(base + ".q.w"), param(base + ".q.b"), tape));
            ks.push_back(ops::linear(h, param(base + ".k.w"), param(base + ".k.b"), tape));
            vs.push_back(ops::linear(h, param(base + ".v.w"), param(base + ".v.b"), tape));
            scale2.push_back(mods[2]);
            shift2.push_back(mods[3]);
        }
        ops::AttentionProbe probe;
        probe.query_stream = 0;
        probe.query_offset = cfg_.context_tokens() + 1;
        probe.query_len = H;
        std::vector<Tensor> attn_out = ops::joint_attention(
            qs, ks, vs, B, cfg_.heads, tape, want_attention ? &probe : nullptr);
        if (want_attention)
            attn.push_back(probe.stream_mass);
        for (std::size_t si = 0; si < streams.size(); ++si) {
            StreamCtx& s = streams[si];
            const std::string base = s.prefix + ".blk" + std::to_string(l);
            s.x = ops::add(s.x,
                           ops::linear(attn_out[si], param(base + ".proj.w"),
                                       param(base + ".proj.b"), tape),
                           tape);
            Tensor h2 = ops::layer_norm(s.x, param(base + ".ln2.g"),
                                        param(base + ".ln2.b"), tape);
            h2 = ops::modulate_per_sample(h2, scale2[si], shift2[si], s.tokens,
                                          tape);
            Tensor mid = ops::silu(ops::linear(h2, param(base + ".mlp1.w"),
                                               param(base + ".mlp1.b"), tape),
                                   tape);
            s.x = ops::add(s.x,
                           ops::linear(mid, param(base + ".mlp2.w"),
                                       param(base + ".mlp2.b"), tape),
                           tape);
        }
    }

    ForwardOutput out;
    out.attention = std::move(attn);
    const int action_offset = cfg_.context_tokens() + 1;
    Tensor act_last = ops::slice_rows_per_sample(
        streams[0].x, B, streams[0].tokens, action_offset, H, tape);
    out.action_velocity =
        ops::linear(act_last, param("act.head.w"), param("act.head.b"), tape);
    for (int i = 0; i < n_mod; ++i) {
        const std::string prefix = "str." + cfg_.modalities[i].name;
        Tensor fut_last;
        if (!cfg_.fused) {
            fut_last = ops::slice_rows_per_sample(
                streams[1 + i].x, B, cfg_.modality_tokens(), H, H, tape);
        } else {
            const int offset =
                cfg_.action_tokens() + i * cfg_.modality_tokens() + H;
            fut_last = ops::slice_rows_per_sample(streams[0].x, B,
                                                  streams[0].tokens, offset, H, tape);
        }
        out.modality_velocity.push_back(ops::linear(
            fut_last, param(prefix + ".head.w"), param(prefix + ".head.b"), tape));
    }
    return out;
}

ChunkState draw_chunk_noise(const ModelConfig& cfg, int batch, Rng& rng) {
    if (batch < 1)
        throw std::runtime_error("draw_chunk_noise: batch must be >= 1");
    const int H = cfg.horizon;
    ChunkState noise;
    {
        std::vector<double> e(static_cast<std::size_t>(batch) * H *
                              cfg.action_dim);
        for (double& x : e)
            x = rng.normal();
        noise.action = Tensor::from({batch * H, cfg.action_dim}, std::move(e));
    }
    for (const auto& m : cfg.modalities) {
        std::vector<double> e(static_cast<std::size_t>(batch) * H * m.dim);
        for (double& x : e)
            x = rng.normal();
        noise.futures.push_back(
            Tensor::from({batch * H, m.dim}, std::move(e)));
    }
    return noise;
}

ChunkState StreamModel::sample_chunks(const SampleInput& in, int K,
                                      const ChunkState& noise,
                                      AttentionSummary* attn) const {
    if (K < 1)
        throw std::runtime_error("sample_chunks: K must be >= 1");
    const int B = in.batch;
    const int n_mod = static_cast<int>(cfg_.modalities.size());
    if (static_cast<int>(noise.futures.size()) != n_mod)
        throw std::runtime_error(
            "sample_chunks: noise futures do not match modality count");

    const int n_streams = cfg_.fused ? 1 : 1 + n_mod;
    if (attn)
        attn->assign(cfg_.depth, std::vector<double>(n_streams, 0.0));

    VelocityField field = [&](double tau, const ChunkState& st) {
        ForwardInput fi;
        fi.batch = B;
        fi.visual_feat = in.visual_feat;
        fi.task_ids = in.task_ids;
        fi.state = in.state;
        fi.tau.assign(B, tau);
        fi.noised_action = st.action;
        fi.windows = in.windows;
        fi.noised_future = st.futures;
        ForwardOutput fo = forward(fi, nullptr, attn != nullptr);
        if (attn)
            for (int l = 0; l < cfg_.depth; ++l)
                for (int s = 0; s < n_streams; ++s)
                    (*attn)[l][s] += fo.attention[l][s];
        return ChunkState{fo.action_velocity, fo.modality_velocity};
    };
    ChunkState final_state = euler_sample(field, noise, K);
    if (attn)
        for (auto& layer : *attn)
            for (double& m : layer)
                m /= static_cast<double>(K);
    return final_state;
}

Tensor StreamModel::sample_action_chunk(const SampleInput& in, int K,
                                        Rng& noise_rng,
                                        AttentionSummary* attn) const {
    ChunkState noise = draw_chunk_noise(cfg_, in.batch, noise_rng);
    return sample_chunks(in, K, noise, attn).action;
}

} // namespace moss
