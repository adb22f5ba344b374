#pragma once

#include "model.hpp"

#include <cstdint>
#include <optional>

namespace nsc::sim {

struct SimError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IntegratorConfig {
    double rel_tol = 1e-6;
    double abs_tol = 1e-8;
    double max_step = 0.0;   // 0 -> T/100
    double event_tol = 1e-9; // time-bisection tolerance [s]
    int max_jumps = -1;      // -1 -> model jump_bound
};

enum class Status { Completed, HitUnsafe, Blocked, JumpBudgetExhausted };

enum class Label { Negative = 0, Positive = 1 };

struct Segment {
    int mode = 0;
    std::vector<double> times;
    std::vector<std::vector<double>> states; // full env vectors (vars + params)
};

struct Jump {
    double time = 0.0;
    int transition = -1;
    std::vector<double> before; // pre-reset state
    std::vector<double> after;  // post-reset state
};

struct Trajectory {
    std::vector<Segment> segments;
    std::vector<Jump> jumps;
    Status status = Status::Completed;
    double final_time = 0.0;
    ha::State final_state;
    double unsafe_time = -1.0; // valid when status == HitUnsafe

    // jump time points: xi_0 = 0 followed by the interior jump times
    std::vector<double> jump_times() const;
};

enum class Policy { Deterministic, RandomWalk };

struct SimOptions {
    Policy policy = Policy::Deterministic;
    bool stop_on_unsafe = true;
    std::uint64_t seed = 0;
};

Trajectory simulate(const ha::HybridAutomaton &ha, const ha::State &s0, double T,
                    const SimOptions &opt, const IntegratorConfig &cfg);

struct OracleConfig {
    IntegratorConfig integ;
    int n_rollouts = 100; // random-walk rollouts for nondeterministic models
    std::uint64_t seed = 0;
};

// Simulation-based reachability label. Deterministic models run one
// trajectory; nondeterministic models take the any-hit answer over
// n_rollouts random walks (an under-approximation of Reach).
Label reach_oracle(const ha::HybridAutomaton &ha, const ha::State &s, const OracleConfig &cfg);

struct BackwardConfig {
    IntegratorConfig integ;
    int retry_budget = 100;
};

// Runs the reverse HA from unsafe state u for a uniform duration in (0, T];
// returns the endpoint if it leaves U and lands inside the sampling domain.
// Returns nullopt when the retry budget is exhausted.
std::optional<ha::State> backward_sample(const ha::HybridAutomaton &rev_ha, const ha::State &u,
                                         double T, const BackwardConfig &cfg, Rng &rng);

// Forward-simulates s for time T, then replays the mirrored run on
// reverse(ha); returns the sup-norm deviation from s over coordinates
// normalized by the sampling-domain widths. Requires the forward run to
// complete the full horizon.
double reverse_roundtrip_check(const ha::HybridAutomaton &ha, const ha::HybridAutomaton &rev_ha,
                               const ha::State &s, double T, const IntegratorConfig &cfg);

// CSV dump (t, mode, x1..xn) for plotting.
std::string trajectory_csv(const ha::HybridAutomaton &ha, const Trajectory &traj);

} // namespace nsc::sim
