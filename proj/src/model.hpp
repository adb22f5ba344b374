#pragma once

#include "expr.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nsc {
class Rng;
}

namespace nsc::ha {

struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Axis-aligned box over the continuous variables (state vars only).
struct Box {
    std::vector<std::array<double, 2>> range; // [lo, hi] per variable

    bool contains(std::span<const double> x, double tol = 0.0) const;
    void sample(Rng &rng, std::span<double> out) const;
    double volume() const;
};

// Per-variable reset. Affine covers y = a*x + offset; Interval is the
// nondeterministic form produced when reversing a constant reset. The offset
// may reference a model parameter (offset = b + b_scale * env[b_slot]) so
// resets like v := c stay correct under parametric sampling.
struct ResetSpec {
    enum class Kind { Identity, Constant, Affine, Interval };
    Kind kind = Kind::Identity;
    double a = 1.0, b = 0.0;
    int b_slot = -1;
    double b_scale = 1.0;
    double lo = 0.0, hi = 0.0; // interval

    double offset(std::span<const double> env) const {
        return b_slot >= 0 ? b + b_scale * env[static_cast<std::size_t>(b_slot)] : b;
    }
};

struct Transition {
    int source = -1, target = -1;
    expr::ExprPtr guard;
    expr::ExprPtr guard_margin;
    std::vector<ResetSpec> resets; // one per state variable
};

struct Mode {
    std::string id;
    std::vector<expr::ExprPtr> flow; // one per state variable
    expr::ExprPtr invariant;         // null means unconstrained
    expr::ExprPtr inv_margin;        // null when invariant is null/trivially true
};

struct ParameterSpec {
    std::string name;
    double value = 0.0; // default
    double lo = 0.0, hi = 0.0;
};

// mode + continuous vector; x holds the state variables followed by the
// parameter values, so it directly serves as an expression environment.
struct State {
    int mode = 0;
    std::vector<double> x;
};

struct HybridAutomaton {
    std::string id;
    std::vector<std::string> variables;
    std::vector<ParameterSpec> parameters;
    std::vector<std::string> names; // variables ++ parameter names (expr slots)
    std::vector<Mode> modes;
    std::vector<Transition> transitions;
    expr::ExprPtr unsafe;
    expr::ExprPtr unsafe_margin;
    std::vector<Box> domain;                    // sampling box per mode
    std::vector<std::vector<Box>> unsafe_boxes; // per mode, boxes for drawing unsafe states
    std::vector<std::optional<Box>> init;       // per mode
    double time_bound = 0.0;
    int jump_bound = 64;

    std::size_t num_vars() const { return variables.size(); }
    std::size_t num_params() const { return parameters.size(); }
    std::size_t dim() const { return variables.size() + parameters.size(); }

    int mode_index(const std::string &id) const;
    bool has_init() const;

    // state vector with parameters at their defaults
    State make_state(int mode, std::span<const double> vars) const;

    void validate_state(const State &s) const;
};

HybridAutomaton load_model(const std::string &path);
HybridAutomaton parse_model(const std::string &json_text);

// Def-7 reversal: flows negated, transitions inverted. Requires every reset
// to be identity, constant, or invertible affine.
HybridAutomaton reverse(const HybridAutomaton &ha);

std::vector<int> enabled_transitions(const HybridAutomaton &ha, const State &s);
bool in_unsafe(const HybridAutomaton &ha, const State &s);
bool in_invariant(const HybridAutomaton &ha, const State &s);
bool in_domain(const HybridAutomaton &ha, const State &s, double tol = 0.0);

void apply_reset(const Transition &tr, std::span<double> x, Rng *rng);

} // namespace nsc::ha
