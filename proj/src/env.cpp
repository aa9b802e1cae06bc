#include "moss/env.h"

#include "moss/rng.h"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace moss::env {

namespace {

constexpr double kObjectRestY = 0.0;
constexpr double kIkDamping = 1e-4;

double clamp(double v, double lo, double hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

// Geometry parameter in [0, 1) shared by the two latent siblings of a
// seed pair (latent comes from the low bit, geometry from the rest).
double geometry_param(std::uint64_t seed) {
    Rng r(derive_seed(seed >> 1, "env-geometry"));
    return r.uniform();
}

// Damped least-squares joint step toward an end-effector target,
// limited to the per-joint action bound.
std::array<double, 2> ik_step(const std::array<double, 2>& q,
                              const std::array<double, 2>& target) {
    auto ee = forward_kinematics(q);
    double ex = target[0] - ee[0];
    double ey = target[1] - ee[1];
    auto J = jacobian(q);
    // J J^T + damping, inverted in closed form.
    double a = J[0][0] * J[0][0] + J[0][1] * J[0][1] + kIkDamping;
    double b = J[0][0] * J[1][0] + J[0][1] * J[1][1];
    double d = J[1][0] * J[1][0] + J[1][1] * J[1][1] + kIkDamping;
    double det = a * d - b * b;
    double ux = (d * ex - b * ey) / det;
    double uy = (-b * ex + a * ey) / det;
    std::array<double, 2> dq{J[0][0] * ux + J[1][0] * uy,
                             J[0][1] * ux + J[1][1] * uy};
    double m = std::max(std::abs(dq[0]), std::abs(dq[1]));
    if (m > kMaxJointDelta) {
        dq[0] *= kMaxJointDelta / m;
        dq[1] *= kMaxJointDelta / m;
    }
    return dq;
}

std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void append_real_array(std::string& out, const std::vector<double>& v) {
    out += '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += fmt_real(v[i]);
    }
    out += ']';
}

} // namespace

std::string task_name(int task_id) {
    switch (task_id) {
    case kFragileGrasp: return "fragile-grasp";
    case kBlindInsert: return "blind-insert";
    default:
        throw std::runtime_error("task_name: unknown task id " +
                                 std::to_string(task_id));
    }
}

int task_id_from_name(const std::string& name) {
    if (name == "fragile-grasp") return kFragileGrasp;
    if (name == "blind-insert") return kBlindInsert;
    throw std::runtime_error("task_id_from_name: unknown task '" + name + "'");
}

std::array<double, 2> forward_kinematics(const std::array<double, 2>& q) {
    return {kL1 * std::cos(q[0]) + kL2 * std::cos(q[0] + q[1]),
            kL1 * std::sin(q[0]) + kL2 * std::sin(q[0] + q[1])};
}

std::array<std::array<double, 2>, 2> jacobian(const std::array<double, 2>& q) {
    double s1 = std::sin(q[0]), c1 = std::cos(q[0]);
    double s12 = std::sin(q[0] + q[1]), c12 = std::cos(q[0] + q[1]);
    return {{{-kL1 * s1 - kL2 * s12, -kL2 * s12},
             {kL1 * c1 + kL2 * c12, kL2 * c12}}};
}

std::array<double, 2> contact_torque(const std::array<double, 2>& q,
                                     const std::array<double, 2>& f) {
    auto J = jacobian(q);
    return {J[0][0] * f[0] + J[1][0] * f[1],
            J[0][1] * f[0] + J[1][1] * f[1]};
}

TactileResult tactile_read(double aperture, double object_width,
                           double stiffness) {
    TactileResult r;
    double overlap = object_width - aperture;
    if (overlap <= 0.0) return r;
    r.force = stiffness * overlap;
    double break_force =
        stiffness == kSoftStiffness ? kSoftBreakForce : kHardBreakForce;
    if (r.force > break_force) {
        r.broken = true;
        return r;
    }
    r.reading = {r.force, r.force, 0.1 * r.force, 0.1 * r.force};
    return r;
}

ArmEnv::ArmEnv(int task_id, std::uint64_t seed, double obs_noise)
    : task_id_(task_id), seed_(seed), obs_noise_(obs_noise) {
    if (task_id != kFragileGrasp && task_id != kBlindInsert)
        throw std::runtime_error("ArmEnv: unknown task_id " +
                                 std::to_string(task_id));
    if (obs_noise < 0.0)
        throw std::runtime_error("ArmEnv: obs_noise must be >= 0");
    latent_ = static_cast<int>(seed & 1ULL);
    double u = geometry_param(seed);
    noise_state_ = derive_seed(seed, "env-obs-noise", static_cast<std::uint64_t>(task_id));
    if (task_id_ == kFragileGrasp) {
        q_ = {M_PI / 3.0, -M_PI / 3.0};
        aperture_ = 1.0;
        object_x_ = 1.35 + 0.1 * u;
        object_y_ = kObjectRestY;
    } else {
        q_ = {M_PI / 2.0, -M_PI / 2.0};
        aperture_ = 0.3;
        probe_x_ = 0.65 + 0.1 * u;
        socket_x_ = probe_x_ + (latent_ == 1 ? 1.0 : -1.0) * kSocketOffset;
    }
    build_observation();
}

double ArmEnv::noise() {
    Rng r(noise_state_);
    double v = r.normal();
    noise_state_ = derive_seed(noise_state_, "env-obs-noise-step");
    return v;
}

void ArmEnv::apply_task_physics() {
    auto ee = forward_kinematics(q_);
    if (task_id_ == kFragileGrasp) {
        double width = latent_ == 0 ? kSoftObjectWidth : kHardObjectWidth;
        double stiffness = latent_ == 0 ? kSoftStiffness : kHardStiffness;
        double lo = latent_ == 0 ? kSoftForceLo : kHardForceLo;
        double hi = latent_ == 0 ? kSoftForceHi : kHardForceHi;
        double dx = ee[0] - object_x_;
        double dy = ee[1] - object_y_;
        bool near = std::sqrt(dx * dx + dy * dy) <= kGraspRadius;
        TactileResult tr{};
        if (!broken_ && (attached_ || near))
            tr = tactile_read(aperture_, width, stiffness);
        grip_force_ = tr.force;
        if (tr.broken) {
            broken_ = true;
            attached_ = false;
            grip_force_ = 0.0;
            done_ = true;
            return;
        }
        if (!attached_ && near && tr.force >= kAttachForce) attached_ = true;
        if (attached_) {
            object_x_ = ee[0];
            object_y_ = ee[1];
            bool lifted = object_y_ > kObjectRestY + 1e-9;
            if (lifted && tr.force < lo) {
                // Grip too weak to carry the weight: the object slips.
                attached_ = false;
                object_y_ = kObjectRestY;
                grip_force_ = 0.0;
            } else if (lifted && object_y_ - kObjectRestY >= kLiftTarget &&
                       tr.force >= lo && tr.force <= hi) {
                success_ = true;
                done_ = true;
            }
        }
    } else {
        bool over_slot = std::abs(ee[0] - socket_x_) <= kSlotHalfWidth;
        if (!over_slot) {
            double press = std::max(0.0, kSurfaceY - ee[1]);
            if (press >= kPressLatch) pressed_ = true;
        }
        if (over_slot && ee[1] <= kSlotY) {
            success_ = true;
            done_ = true;
        }
    }
}

void ArmEnv::build_observation() {
    auto ee = forward_kinematics(q_);
    obs_.t = t_;
    obs_.state = {q_[0], q_[1], dq_[0], dq_[1], aperture_};
    if (task_id_ == kFragileGrasp) {
        obs_.visual_feat = {ee[0], ee[1], object_x_, object_y_,
                            aperture_, 1.0, 0.0, 0.0};
        double width = latent_ == 0 ? kSoftObjectWidth : kHardObjectWidth;
        double stiffness = latent_ == 0 ? kSoftStiffness : kHardStiffness;
        double dx = ee[0] - object_x_;
        double dy = ee[1] - object_y_;
        bool near = std::sqrt(dx * dx + dy * dy) <= kGraspRadius;
        TactileResult tr{};
        if (!broken_ && (attached_ || near))
            tr = tactile_read(aperture_, width, stiffness);
        if (tr.broken) tr = TactileResult{};
        obs_.tactile = {tr.reading[0], tr.reading[1], tr.reading[2],
                        tr.reading[3]};
        std::array<double, 2> tau{0.0, 0.0};
        if (attached_ && object_y_ > kObjectRestY + 1e-9)
            tau = contact_torque(q_, {0.0, -kHeldWeight});
        obs_.torque = {tau[0], tau[1]};
    } else {
        obs_.visual_feat = {ee[0], ee[1], probe_x_, kSurfaceY,
                            aperture_, 0.0, 1.0, 0.0};
        // The plug is held throughout; its grip reading carries no
        // information about the hidden socket side.
        obs_.tactile = {kPlugGripForce, kPlugGripForce, 0.1 * kPlugGripForce,
                        0.1 * kPlugGripForce};
        double sigma = latent_ == 1 ? 1.0 : -1.0;
        bool over_slot = std::abs(ee[0] - socket_x_) <= kSlotHalfWidth;
        std::array<double, 2> tau{0.0, 0.0};
        if (!over_slot) {
            double press = std::max(0.0, kSurfaceY - ee[1]);
            if (press > 0.0)
                tau = contact_torque(
                    q_, {sigma * kChamferLateralGain * press,
                         kSurfaceNormalGain * press});
        }
        obs_.torque = {tau[0], tau[1]};
    }
    if (obs_noise_ > 0.0) {
        for (double& v : obs_.tactile)
            if (v != 0.0) v += obs_noise_ * noise();
        for (double& v : obs_.torque)
            if (v != 0.0) v += obs_noise_ * noise();
    }
}

StepResult ArmEnv::step(const Action& action) {
    if (done_)
        throw std::runtime_error("ArmEnv::step: episode already finished");
    for (double a : action)
        if (!std::isfinite(a))
            throw std::runtime_error("ArmEnv::step: non-finite action entry");
    dq_[0] = clamp(action[0], -kMaxJointDelta, kMaxJointDelta);
    dq_[1] = clamp(action[1], -kMaxJointDelta, kMaxJointDelta);
    double dg = clamp(action[2], -kMaxApertureDelta, kMaxApertureDelta);
    q_[0] = std::remainder(q_[0] + dq_[0], 2.0 * M_PI);
    q_[1] = std::remainder(q_[1] + dq_[1], 2.0 * M_PI);
    aperture_ = clamp(aperture_ + dg, 0.0, 1.0);
    ++t_;
    apply_task_physics();
    if (!done_ && t_ >= kEpisodeHorizon) done_ = true;
    build_observation();
    return {obs_, done_, success_};
}

Action ArmEnv::expert_action() const {
    auto ee = forward_kinematics(q_);
    if (task_id_ == kFragileGrasp) {
        double target_g =
            latent_ == 0 ? kSoftObjectWidth - 0.5 * (kSoftForceLo + kSoftForceHi) / kSoftStiffness
                         : kHardObjectWidth - 0.5 * (kHardForceLo + kHardForceHi) / kHardStiffness;
        if (!attached_) {
            double dx = ee[0] - object_x_;
            double dy = ee[1] - object_y_;
            bool near = std::sqrt(dx * dx + dy * dy) <= 0.5 * kGraspRadius;
            if (!near) {
                auto dq = ik_step(q_, {object_x_, object_y_});
                return {dq[0], dq[1], 0.0};
            }
            double dg = clamp(target_g - aperture_, -kMaxApertureDelta,
                              kMaxApertureDelta);
            return {0.0, 0.0, dg};
        }
        if (std::abs(aperture_ - target_g) > 1e-9) {
            double dg = clamp(target_g - aperture_, -kMaxApertureDelta,
                              kMaxApertureDelta);
            return {0.0, 0.0, dg};
        }
        auto dq = ik_step(q_, {object_x_, kObjectRestY + kLiftTarget + 0.05});
        return {dq[0], dq[1], 0.0};
    }
    // BlindInsert: press at the probe point first so the torque channel
    // reveals the socket side, then slide toward it and descend.
    if (!pressed_) {
        auto dq = ik_step(q_, {probe_x_, kSurfaceY - kPressLatch - 0.01});
        return {dq[0], dq[1], 0.0};
    }
    if (std::abs(ee[0] - socket_x_) > 0.02) {
        auto dq = ik_step(q_, {socket_x_, kSurfaceY - 0.01});
        return {dq[0], dq[1], 0.0};
    }
    auto dq = ik_step(q_, {socket_x_, kSlotY - 0.01});
    return {dq[0], dq[1], 0.0};
}

EpisodeRecord run_expert_episode(int task_id, std::uint64_t seed,
                                 double obs_noise) {
    ArmEnv env(task_id, seed, obs_noise);
    EpisodeRecord rec;
    rec.task_id = task_id;
    rec.seed = seed;
    rec.latent = env.latent();
    rec.observations.push_back(env.observation());
    while (!env.done()) {
        Action a = env.expert_action();
        auto res = env.step(a);
        rec.actions.push_back(a);
        rec.observations.push_back(res.obs);
    }
    rec.success = env.success();
    return rec;
}

std::string episode_to_json(const EpisodeRecord& ep) {
    std::string out;
    out.reserve(1 << 14);
    out += "{\"task_id\":" + std::to_string(ep.task_id);
    out += ",\"seed\":" + std::to_string(ep.seed);
    out += ",\"latent\":" + std::to_string(ep.latent);
    out += ",\"success\":";
    out += ep.success ? "true" : "false";
    out += ",\"observations\":[";
    for (std::size_t i = 0; i < ep.observations.size(); ++i) {
        const Observation& o = ep.observations[i];
        if (i) out += ',';
        out += "{\"t\":" + std::to_string(o.t);
        out += ",\"visual_feat\":";
        append_real_array(out, o.visual_feat);
        out += ",\"state\":";
        append_real_array(out, o.state);
        out += ",\"tactile\":";
        append_real_array(out, o.tactile);
        out += ",\"torque\":";
        append_real_array(out, o.torque);
        out += '}';
    }
    out += "],\"actions\":[";
    for (std::size_t i = 0; i < ep.actions.size(); ++i) {
        if (i) out += ',';
        append_real_array(out, {ep.actions[i][0], ep.actions[i][1],
                                ep.actions[i][2]});
    }
    out += "]}";
    return out;
}

EpisodeRecord episode_from_json(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line);
    EpisodeRecord ep;
    ep.task_id = j.at("task_id").get<int>();
    ep.seed = j.at("seed").get<std::uint64_t>();
    ep.latent = j.at("latent").get<int>();
    ep.success = j.at("success").get<bool>();
    for (const auto& jo : j.at("observations")) {
        Observation o;
        o.t = jo.at("t").get<int>();
        o.visual_feat = jo.at("visual_feat").get<std::vector<double>>();
        o.state = jo.at("state").get<std::vector<double>>();
        o.tactile = jo.at("tactile").get<std::vector<double>>();
        o.torque = jo.at("torque").get<std::vector<double>>();
        ep.observations.push_back(std::move(o));
    }
    for (const auto& ja : j.at("actions")) {
        auto v = ja.get<std::vector<double>>();
        if (v.size() != 3)
            throw std::runtime_error(
                "episode_from_json: action must have 3 entries");
        ep.actions.push_back({v[0], v[1], v[2]});
    }
    return ep;
}

DemoGenReport generate_demos(int task_id, int n, std::uint64_t seed,
                             double obs_noise, const std::string& out_path) {
    if (n <= 0) throw std::runtime_error("generate_demos: n must be positive");
    std::ofstream out(out_path);
    if (!out)
        throw std::runtime_error("generate_demos: cannot open " + out_path);
    DemoGenReport report;
    report.path = out_path;
    // Seeds advance in pairs so the latent classes stay balanced even
    // when a rollout has to be regenerated.
    std::uint64_t base = seed;
    int written = 0;
    while (written < n) {
        EpisodeRecord rec = run_expert_episode(task_id, base, obs_noise);
        if (!rec.success) {
            ++report.retries;
            base += 2; // keep the latent parity of the slot being filled
            continue;
        }
        out << episode_to_json(rec) << '\n';
        ++written;
        ++base;
    }
    if (!out.good())
        throw std::runtime_error("generate_demos: write failed for " +
                                 out_path);
    report.episodes = written;
    return report;
}

std::vector<EpisodeRecord> load_demos(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_demos: cannot open " + path);
    std::vector<EpisodeRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(episode_from_json(line));
    }
    if (out.empty())
        throw std::runtime_error("load_demos: no episodes in " + path);
    return out;
}

} // namespace moss::env
