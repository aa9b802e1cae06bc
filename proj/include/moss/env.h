#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace moss::env {

// Geometry and task constants (desk-scale, dimensionless units).
constexpr double kL1 = 1.0;
constexpr double kL2 = 1.0;
constexpr int kEpisodeHorizon = 60;
constexpr double kMaxJointDelta = 0.1;
constexpr double kMaxApertureDelta = 0.1;

// FragileGrasp: two stiffness classes with disjoint success-force windows.
constexpr double kSoftStiffness = 2.0;
constexpr double kHardStiffness = 8.0;
constexpr double kSoftBreakForce = 0.6;
constexpr double kHardBreakForce = 1.5;
constexpr double kSoftObjectWidth = 0.50;
constexpr double kHardObjectWidth = 0.32;
constexpr double kSoftForceLo = 0.2, kSoftForceHi = 0.5;
constexpr double kHardForceLo = 0.8, kHardForceHi = 1.2;
constexpr double kAttachForce = 0.15;
constexpr double kLiftTarget = 0.2;
constexpr double kGraspRadius = 0.12;
constexpr double kHeldWeight = 0.2;

// BlindInsert: socket hidden 0.3 to the left or right of the probe point.
constexpr double kSurfaceY = -0.3;
constexpr double kSlotY = -0.38;
constexpr double kSlotHalfWidth = 0.05;
constexpr double kSocketOffset = 0.3;
constexpr double kChamferLateralGain = 2.0;
constexpr double kSurfaceNormalGain = 4.0;
constexpr double kPressLatch = 0.035;
constexpr double kPlugGripForce = 0.3;

enum TaskId : int { kFragileGrasp = 0, kBlindInsert = 1 };

// Names used by files and the command line: "fragile-grasp", "blind-insert".
std::string task_name(int task_id);
int task_id_from_name(const std::string& name);

std::array<double, 2> forward_kinematics(const std::array<double, 2>& q);
std::array<std::array<double, 2>, 2> jacobian(const std::array<double, 2>& q);
// tau = J(q)^T f for a planar contact force at the end-effector.
std::array<double, 2> contact_torque(const std::array<double, 2>& q,
                                     const std::array<double, 2>& f);

struct TactileResult {
    std::array<double, 4> reading{}; // per-finger normal x2, tangential x2
    double force = 0.0;              // normal force per finger
    bool broken = false;
};

// Hookean squeeze of an object of `object_width` by fingers at `aperture`
// (max opening 1.0); fragile objects break above the class force limit.
TactileResult tactile_read(double aperture, double object_width,
                           double stiffness);

struct Observation {
    std::vector<double> visual_feat; // 8 entries, never contains the latent
    std::vector<double> state;       // q1, q2, dq1, dq2, aperture
    std::vector<double> tactile;     // 4 entries
    std::vector<double> torque;      // 2 entries
    int t = 0;
};

using Action = std::array<double, 3>; // dq1, dq2, d_aperture

struct StepResult {
    Observation obs;
    bool done = false;
    bool success = false;
};

class ArmEnv {
public:
    // Resets immediately: latent from the seed's parity (balanced and
    // stratified), geometry from the remaining bits (shared by the two
    // latent siblings of a seed pair).
    ArmEnv(int task_id, std::uint64_t seed, double obs_noise = 0.0);

    const Observation& observation() const { return obs_; }
    bool done() const { return done_; }
    bool success() const { return success_; }
    int task_id() const { return task_id_; }
    int step_count() const { return t_; }

    // Analysis only; policies never see this.
    int latent() const { return latent_; }

    StepResult step(const Action& action);

    // Privileged scripted demonstrator; deterministic given the env state.
    Action expert_action() const;

private:
    void build_observation();
    void apply_task_physics();

    int task_id_ = 0;
    std::uint64_t seed_ = 0;
    double obs_noise_ = 0.0;
    int latent_ = 0;
    int t_ = 0;
    bool done_ = false;
    bool success_ = false;

    std::array<double, 2> q_{};
    std::array<double, 2> dq_{};
    double aperture_ = 1.0;

    // FragileGrasp internals.
    double object_x_ = 0.0;
    double object_y_ = 0.0;
    bool attached_ = false;
    double grip_force_ = 0.0;
    bool broken_ = false;

    // BlindInsert internals.
    double probe_x_ = 0.0;
    double socket_x_ = 0.0;
    bool pressed_ = false;

    Observation obs_;
    std::uint64_t noise_state_ = 0;

    double noise();
};

struct EpisodeRecord {
    int task_id = 0;
    std::uint64_t seed = 0;
    int latent = 0;
    bool success = false;
    std::vector<Observation> observations; // length = actions + 1
    std::vector<Action> actions;
};

// Rolls the scripted expert in a fresh env; returns the full record.
EpisodeRecord run_expert_episode(int task_id, std::uint64_t seed,
                                 double obs_noise);

struct DemoGenReport {
    std::string path;
    int episodes = 0;
    int retries = 0; // failed expert rollouts replaced by later seeds
};

// Writes n successful expert episodes as JSON Lines; reals carry 17
// significant digits so parsing restores them exactly.
DemoGenReport generate_demos(int task_id, int n, std::uint64_t seed,
                             double obs_noise, const std::string& out_path);

std::vector<EpisodeRecord> load_demos(const std::string& path);
std::string episode_to_json(const EpisodeRecord& ep);
EpisodeRecord episode_from_json(const std::string& line);

} // namespace moss::env
