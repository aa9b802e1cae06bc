#pragma once

// Plain-loop transformer oracle used to cross-check the library's batched
// forward pass. Shares only the parameter store with the implementation
// under test; every numeric step here is written independently with
// nested loops and no Eigen.

#include <cmath>
#include <string>
#include <vector>

#include "moss/model.h"
#include "moss/params.h"
#include "moss/tensor.h"

namespace refmodel {

using Mat = std::vector<std::vector<double>>;

inline Mat mat_of(const moss::Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (int r = 0; r < t.rows(); ++r)
        for (int c = 0; c < t.cols(); ++c)
            m[r][c] = t.data()[static_cast<std::size_t>(r) * t.cols() + c];
    return m;
}

inline std::vector<double> vec_of(const moss::Tensor& t) { return t.vec(); }

inline Mat linear(const Mat& x, const Mat& w, const std::vector<double>& b) {
    Mat out(x.size(), std::vector<double>(b.size(), 0.0));
    for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t j = 0; j < b.size(); ++j) {
            double acc = b[j];
            for (std::size_t i = 0; i < x[r].size(); ++i)
                acc += x[r][i] * w[i][j];
            out[r][j] = acc;
        }
    return out;
}

inline Mat layer_norm(const Mat& x, const std::vector<double>& g,
                      const std::vector<double>& b) {
    Mat out(x.size(), std::vector<double>(g.size()));
    for (std::size_t r = 0; r < x.size(); ++r) {
        const std::size_t n = x[r].size();
        double mean = 0.0;
        for (double v : x[r])
            mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : x[r])
            var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::max(std::sqrt(var), 1e-5);
        for (std::size_t c = 0; c < n; ++c)
            out[r][c] = (x[r][c] - mean) * rstd * g[c] + b[c];
    }
    return out;
}

inline double silu1(double v) { return v / (1.0 + std::exp(-v)); }

inline Mat silu(const Mat& x) {
    Mat out = x;
    for (auto& row : out)
        for (double& v : row)
            v = silu1(v);
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& s) {
    double mx = s[0];
    for (double v : s)
        mx = std::max(mx, v);
    std::vector<double> e(s.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        e[i] = std::exp(s[i] - mx);
        sum += e[i];
    }
    for (double& v : e)
        v /= sum;
    return e;
}

// Independent recomputation of the sinusoidal flow-time features.
inline std::vector<double> tau_row(double tau, int width) {
    std::vector<double> f(width, 0.0);
    const int half = width / 2;
    for (int j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(10000.0) * j / half);
        f[j] = std::sin(tau * 1000.0 * freq);
        f[half + j] = std::cos(tau * 1000.0 * freq);
    }
    if (width % 2 == 1)
        f[width - 1] = tau;
    return f;
}

// Single-sample multi-stream attention: every stream's queries attend over
// the concatenation of all streams' keys/values.
inline std::vector<Mat> joint_attention(const std::vector<Mat>& qs,
                                        const std::vector<Mat>& ks,
                                        const std::vector<Mat>& vs,
                                        int heads) {
    const int w = static_cast<int>(qs[0][0].size());
    const int dh = w / heads;
    Mat joint_k, joint_v;
    for (std::size_t s = 0; s < ks.size(); ++s) {
        joint_k.insert(joint_k.end(), ks[s].begin(), ks[s].end());
        joint_v.insert(joint_v.end(), vs[s].begin(), vs[s].end());
    }
    std::vector<Mat> out;
    for (std::size_t s = 0; s < qs.size(); ++s) {
        Mat o(qs[s].size(), std::vector<double>(w, 0.0));
        for (std::size_t r = 0; r < qs[s].size(); ++r) {
            for (int h = 0; h < heads; ++h) {
                std::vector<double> scores(joint_k.size());
                for (std::size_t j = 0; j < joint_k.size(); ++j) {
                    double dot = 0.0;
                    for (int c = 0; c < dh; ++c)
                        dot += qs[s][r][h * dh + c] * joint_k[j][h * dh + c];
                    scores[j] = dot / std::sqrt(static_cast<double>(dh));
                }
                std::vector<double> p = softmax(scores);
                for (std::size_t j = 0; j < joint_k.size(); ++j)
                    for (int c = 0; c < dh; ++c)
                        o[r][h * dh + c] += p[j] * joint_v[j][h * dh + c];
            }
        }
        out.push_back(std::move(o));
    }
    return out;
}

struct RefOutput {
    Mat action_velocity;              // [B*H][action_dim]
    std::vector<Mat> modality_velocity;
};

inline RefOutput forward(const moss::StreamModel& model,
                         const moss::ForwardInput& in) {
    const moss::ModelConfig& cfg = model.config();
    const moss::ParamStore& P = model.params();
    const int B = in.batch;
    const int H = cfg.horizon;
    const int w = model.stream_width();
    const int n_mod = static_cast<int>(cfg.modalities.size());

    auto W = [&](const std::string& n) { return mat_of(P.at(n)); };
    auto V = [&](const std::string& n) { return vec_of(P.at(n)); };

    auto rows_of = [](const moss::Tensor& t, int first, int count) {
        Mat m(count, std::vector<double>(t.cols()));
        for (int r = 0; r < count; ++r)
            for (int c = 0; c < t.cols(); ++c)
                m[r][c] =
                    t.data()[static_cast<std::size_t>(first + r) * t.cols() + c];
        return m;
    };

    RefOutput out;
    out.action_velocity.assign(static_cast<std::size_t>(B) * H,
                               std::vector<double>(cfg.action_dim, 0.0));
    for (int i = 0; i < n_mod; ++i)
        out.modality_velocity.push_back(
            Mat(static_cast<std::size_t>(B) * H,
                std::vector<double>(cfg.modalities[i].dim, 0.0)));

    for (int b = 0; b < B; ++b) {
        // Token segments for this sample.
        Mat act_seg;
        {
            Mat feat = rows_of(in.visual_feat, b, 1);
            Mat vis = linear(feat, W("enc.vis.w"), V("enc.vis.b"));
            Mat task = {mat_of(P.at("enc.task"))[in.task_ids[b]]};
            Mat st = linear(rows_of(in.state, b, 1), W("act.embed.state.w"),
                            V("act.embed.state.b"));
            Mat act = linear(rows_of(in.noised_action, b * H, H),
                             W("act.embed.act.w"), V("act.embed.act.b"));
            act_seg = vis;
            act_seg.insert(act_seg.end(), task.begin(), task.end());
            act_seg.insert(act_seg.end(), st.begin(), st.end());
            act_seg.insert(act_seg.end(), act.begin(), act.end());
            Mat pos = mat_of(P.at("act.pos"));
            for (std::size_t r = 0; r < act_seg.size(); ++r)
                for (int c = 0; c < w; ++c)
                    act_seg[r][c] += pos[r][c];
        }
        std::vector<Mat> mod_segs;
        for (int i = 0; i < n_mod; ++i) {
            const std::string p = "str." + cfg.modalities[i].name;
            Mat past = linear(rows_of(in.windows[i], b * H, H),
                              W(p + ".embed.past.w"), V(p + ".embed.past.b"));
            Mat fut = linear(rows_of(in.noised_future[i], b * H, H),
                             W(p + ".embed.fut.w"), V(p + ".embed.fut.b"));
            Mat seg = past;
            seg.insert(seg.end(), fut.begin(), fut.end());
            Mat pos = mat_of(P.at(p + ".pos"));
            for (std::size_t r = 0; r < seg.size(); ++r)
                for (int c = 0; c < w; ++c)
                    seg[r][c] += pos[r][c];
            mod_segs.push_back(std::move(seg));
        }

        struct Stream {
            std::string prefix;
            Mat x;
            std::vector<double> cond;
        };
        std::vector<Stream> streams;
        if (!cfg.fused) {
            streams.push_back({"act", act_seg, {}});
            for (int i = 0; i < n_mod; ++i)
                streams.push_back(
                    {"str." + cfg.modalities[i].name, mod_segs[i], {}});
        } else {
            Mat x = act_seg;
            for (int i = 0; i < n_mod; ++i)
                x.insert(x.end(), mod_segs[i].begin(), mod_segs[i].end());
            streams.push_back({"act", std::move(x), {}});
        }
        Mat tf = {tau_row(in.tau[b], w)};
        for (Stream& s : streams)
            s.cond =
                silu(linear(tf, W(s.prefix + ".tau.w"), V(s.prefix + ".tau.b")))[0];

        for (int l = 0; l < cfg.depth; ++l) {
            std::vector<Mat> qs, ks, vs;
            std::vector<std::vector<double>> s2s, t2s;
            for (Stream& s : streams) {
                const std::string base = s.prefix + ".blk" + std::to_string(l);
                std::vector<double> ada =
                    linear({s.cond}, W(base + ".ada.w"), V(base + ".ada.b"))[0];
                std::vector<double> s1(ada.begin(), ada.begin() + w);
                std::vector<double> t1(ada.begin() + w, ada.begin() + 2 * w);
                s2s.emplace_back(ada.begin() + 2 * w, ada.begin() + 3 * w);
                t2s.emplace_back(ada.begin() + 3 * w, ada.end());
                Mat h = layer_norm(s.x, V(base + ".ln1.g"), V(base + ".ln1.b"));
                for (auto& row : h)
                    for (int c = 0; c < w; ++c)
                        row[c] = row[c] * (1.0 + s1[c]) + t1[c];
                qs.push_back(linear(h, W(base + ".q.w"), V(base + ".q.b")));
                ks.push_back(linear(h, W(base + ".k.w"), V(base + ".k.b")));
                vs.push_back(linear(h, W(base + ".v.w"), V(base + ".v.b")));
            }
            std::vector<Mat> att = joint_attention(qs, ks, vs, cfg.heads);
            for (std::size_t si = 0; si < streams.size(); ++si) {
                Stream& s = streams[si];
                const std::string base = s.prefix + ".blk" + std::to_string(l);
                Mat proj =
                    linear(att[si], W(base + ".proj.w"), V(base + ".proj.b"));
                for (std::size_t r = 0; r < s.x.size(); ++r)
                    for (int c = 0; c < w; ++c)
                        s.x[r][c] += proj[r][c];
                Mat h2 = layer_norm(s.x, V(base + ".ln2.g"), V(base + ".ln2.b"));
                for (auto& row : h2)
                    for (int c = 0; c < w; ++c)
                        row[c] = row[c] * (1.0 + s2s[si][c]) + t2s[si][c];
                Mat mid = silu(linear(h2, W(base + ".mlp1.w"), V(base + ".mlp1.b")));
                Mat up = linear(mid, W(base + ".mlp2.w"), V(base + ".mlp2.b"));
                for (std::size_t r = 0; r < s.x.size(); ++r)
                    for (int c = 0; c < w; ++c)
                        s.x[r][c] += up[r][c];
            }
        }

        const int action_offset = cfg.context_tokens() + 1;
        Mat act_rows(streams[0].x.begin() + action_offset,
                     streams[0].x.begin() + action_offset + H);
        Mat head = linear(act_rows, W("act.head.w"), V("act.head.b"));
        for (int r = 0; r < H; ++r)
            out.action_velocity[static_cast<std::size_t>(b) * H + r] = head[r];
        for (int i = 0; i < n_mod; ++i) {
            const std::string p = "str." + cfg.modalities[i].name;
            Mat fut_rows;
            if (!cfg.fused) {
                fut_rows.assign(streams[1 + i].x.begin() + H,
                                streams[1 + i].x.begin() + 2 * H);
            } else {
                const int offset =
                    cfg.action_tokens() + i * cfg.modality_tokens() + H;
                fut_rows.assign(streams[0].x.begin() + offset,
                                streams[0].x.begin() + offset + H);
            }
            Mat mh = linear(fut_rows, W(p + ".head.w"), V(p + ".head.b"));
            for (int r = 0; r < H; ++r)
                out.modality_velocity[i][static_cast<std::size_t>(b) * H + r] =
                    mh[r];
        }
    }
    return out;
}

} // namespace refmodel
