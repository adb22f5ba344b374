#include "sim.hpp"

#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nsc::sim {

namespace {

// Dormand-Prince 5(4) coefficients
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                 e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
// dense-output weights
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

using Vec = std::vector<double>;

struct WatchFn {
    enum class Kind { Unsafe, Invariant, Guard };
    Kind kind;
    int transition = -1;
    const expr::Node *margin = nullptr;
    bool crossing_guard = false; // equality guard: fires on either sign change
};

bool contains_eq(const expr::Node &e) {
    if (e.kind == expr::Node::Kind::Bin && e.op == expr::BinOp::Eq) return true;
    for (const auto &a : e.args)
        if (contains_eq(*a)) return true;
    return false;
}

class Integrator {
public:
    Integrator(const ha::HybridAutomaton &ha, int mode, Vec y, double t,
               const IntegratorConfig &cfg, double T)
        : ha_(ha), cfg_(cfg), n_(ha.num_vars()), mode_(mode), y_(std::move(y)), t_(t) {
        max_step_ = cfg.max_step > 0.0 ? cfg.max_step : std::max(T, 1e-12) / 100.0;
        h_ = max_step_ / 10.0;
        k_.assign(7, Vec(n_, 0.0));
        rc_.assign(5, Vec(n_, 0.0));
        tmp_.assign(y_.size(), 0.0);
        deriv(y_, k_[0]);
    }

    double t() const { return t_; }
    const Vec &y() const { return y_; }
    int mode() const { return mode_; }

    void set_mode(int m) {
        mode_ = m;
        deriv(y_, k_[0]);
    }

    void set_state(double t, const Vec &y) {
        t_ = t;
        y_ = y;
        deriv(y_, k_[0]);
    }

    // one accepted adaptive step, clipped to t_end; sets step interval
    // [t0, t1] and dense-output data
    void step(double t_end) {
        double h = std::min({h_, max_step_, t_end - t_});
        for (;;) {
            if (h < 1e-14 * std::max(1.0, std::fabs(t_)))
                throw SimError("step-size underflow during integration");
            const double err = attempt(h);
            if (err <= 1.0) {
                const double grow = 0.9 * std::pow(std::max(err, 1e-10), -0.2);
                h_ = h * std::min(5.0, std::max(0.2, grow));
                accept(h);
                return;
            }
            h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
        }
    }

    double t0() const { return step_t0_; }
    double t1() const { return t_; }

    // dense output at theta in [0,1] over the last accepted step
    void interp(double theta, Vec &out) const {
        const double th1 = 1.0 - theta;
        out = y_;
        for (std::size_t i = 0; i < n_; ++i)
            out[i] = rc_[0][i] +
                     theta * (rc_[1][i] + th1 * (rc_[2][i] + theta * (rc_[3][i] + th1 * rc_[4][i])));
    }

    double time_at(double theta) const { return step_t0_ + theta * step_h_; }

private:
    void deriv(const Vec &x, Vec &dx) {
        const auto &flow = ha_.modes[static_cast<std::size_t>(mode_)].flow;
        for (std::size_t i = 0; i < n_; ++i) {
            try {
                dx[i] = expr::eval(*flow[i], x);
            } catch (const expr::EvalError &e) {
                throw SimError(std::string("non-finite derivative: ") + e.what());
            }
            if (!std::isfinite(dx[i])) throw SimError("non-finite derivative");
        }
    }

    double attempt(double h) {
        auto stage = [&](const Vec &coef_k, Vec &out) {
            out = y_;
            for (std::size_t s = 0; s < coef_k.size(); ++s)
                if (coef_k[s] != 0.0)
                    for (std::size_t i = 0; i < n_; ++i) out[i] += h * coef_k[s] * k_[s][i];
        };
        Vec ytmp(y_);
        auto add = [&](std::initializer_list<double> cs, std::size_t upto) {
            ytmp = y_;
            std::size_t s = 0;
            for (double c : cs) {
                if (c != 0.0)
                    for (std::size_t i = 0; i < n_; ++i) ytmp[i] += h * c * k_[s][i];
                ++s;
                if (s > upto) break;
            }
        };
        (void)stage;
        add({a21}, 0);
        deriv(ytmp, k_[1]);
        add({a31, a32}, 1);
        deriv(ytmp, k_[2]);
        add({a41, a42, a43}, 2);
        deriv(ytmp, k_[3]);
        add({a51, a52, a53, a54}, 3);
        deriv(ytmp, k_[4]);
        add({a61, a62, a63, a64, a65}, 4);
        deriv(ytmp, k_[5]);
        add({a71, 0.0, a73, a74, a75, a76}, 5);
        ynew_ = ytmp;
        deriv(ynew_, k_[6]);

        double err2 = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            const double e = h * (e1 * k_[0][i] + e3 * k_[2][i] + e4 * k_[3][i] + e5 * k_[4][i] +
                                  e6 * k_[5][i] + e7 * k_[6][i]);
            const double sc =
                cfg_.abs_tol + cfg_.rel_tol * std::max(std::fabs(y_[i]), std::fabs(ynew_[i]));
            err2 += (e / sc) * (e / sc);
        }
        return std::sqrt(err2 / double(n_));
    }

    void accept(double h) {
        step_t0_ = t_;
        step_h_ = h;
        for (std::size_t i = 0; i < n_; ++i) {
            const double dy = ynew_[i] - y_[i];
            const double bspl = h * k_[0][i] - dy;
            rc_[0][i] = y_[i];
            rc_[1][i] = dy;
            rc_[2][i] = bspl;
            rc_[3][i] = dy - h * k_[6][i] - bspl;
            rc_[4][i] = h * (d1 * k_[0][i] + d3 * k_[2][i] + d4 * k_[3][i] + d5 * k_[4][i] +
                             d6 * k_[5][i] + d7 * k_[6][i]);
        }
        t_ += h;
        y_ = ynew_;
        k_[0] = k_[6]; // FSAL
    }

    const ha::HybridAutomaton &ha_;
    const IntegratorConfig &cfg_;
    std::size_t n_;
    int mode_;
    Vec y_, ynew_, tmp_;
    std::vector<Vec> k_, rc_;
    double t_ = 0.0, h_ = 0.0, max_step_ = 0.0;
    double step_t0_ = 0.0, step_h_ = 0.0;
};

struct Crossing {
    double time;
    double theta;
    std::size_t watch;
};

class Simulator {
public:
    Simulator(const ha::HybridAutomaton &ha, const ha::State &s0, double T, const SimOptions &opt,
              const IntegratorConfig &cfg)
        : ha_(ha), opt_(opt), cfg_(cfg), T_(T), rng_(opt.seed) {
        ha.validate_state(s0);
        max_jumps_ = cfg.max_jumps >= 0 ? cfg.max_jumps : ha.jump_bound;
        traj_.final_state = s0;
        state_ = s0;
    }

    Trajectory run() {
        begin_segment(state_.mode, 0.0, state_.x);
        if (opt_.stop_on_unsafe && expr::eval_bool(ha_.unsafe, state_.x)) {
            finish(Status::HitUnsafe, 0.0);
            traj_.unsafe_time = 0.0;
            return traj_;
        }
        if (T_ <= 0.0) {
            finish(Status::Completed, 0.0);
            return traj_;
        }

        Integrator integ(ha_, state_.mode, state_.x, 0.0, cfg_, T_);
        build_watches();

        while (integ.t() < T_) {
            // discrete choices available at the current point
            if (!handle_point_events(integ)) return traj_;

            integ.step(T_);
            const auto cross = earliest_crossing(integ);
            if (!cross) {
                record(integ.t(), integ.y());
                continue;
            }

            Vec yc(state_.x.size());
            integ.interp(cross->theta, yc);
            const double tc = cross->time;
            const WatchFn &w = watches_[cross->watch];

            if (w.kind == WatchFn::Kind::Unsafe) {
                record(tc, yc);
                set_state(tc, yc, integ);
                finish(Status::HitUnsafe, tc);
                traj_.unsafe_time = tc;
                return traj_;
            }

            if (w.kind == WatchFn::Kind::Invariant) {
                record(tc, yc);
                set_state(tc, yc, integ);
                auto enabled = enabled_here();
                if (enabled.empty()) {
                    finish(Status::Blocked, tc);
                    return traj_;
                }
                if (!fire(pick(enabled, /*allow_continue=*/false), tc, integ)) return traj_;
                continue;
            }

            // guard crossing: collect every transition crossing at (nearly)
            // the same time
            std::vector<int> firing = transitions_crossing_at(integ, tc, yc);
            record(tc, yc);
            set_state(tc, yc, integ);
            int choice = pick(firing, /*allow_continue=*/opt_.policy == Policy::RandomWalk);
            if (choice >= 0) {
                if (!fire(choice, tc, integ)) return traj_;
            }
            // crossing guards are instantaneous; declining one just continues
        }

        record(integ.t(), integ.y());
        state_.x = integ.y();
        finish(Status::Completed, T_);
        return traj_;
    }

private:
    void build_watches() {
        watches_.clear();
        watches_.push_back({WatchFn::Kind::Unsafe, -1, ha_.unsafe_margin.get(), false});
        const auto &mode = ha_.modes[static_cast<std::size_t>(state_.mode)];
        if (mode.inv_margin)
            watches_.push_back({WatchFn::Kind::Invariant, -1, mode.inv_margin.get(), false});
        for (std::size_t i = 0; i < ha_.transitions.size(); ++i) {
            const auto &tr = ha_.transitions[i];
            if (tr.source != state_.mode) continue;
            watches_.push_back({WatchFn::Kind::Guard, static_cast<int>(i), tr.guard_margin.get(),
                                contains_eq(*tr.guard)});
        }
    }

    void begin_segment(int mode, double t, const Vec &y) {
        Segment seg;
        seg.mode = mode;
        seg.times.push_back(t);
        seg.states.push_back(y);
        traj_.segments.push_back(std::move(seg));
    }

    void record(double t, const Vec &y) {
        auto &seg = traj_.segments.back();
        seg.times.push_back(t);
        seg.states.push_back(y);
    }

    void set_state(double t, const Vec &y, Integrator &integ) {
        state_.x = y;
        integ.set_state(t, y);
    }

    void finish(Status st, double t) {
        traj_.status = st;
        traj_.final_time = t;
        traj_.final_state = state_;
    }

    std::vector<int> enabled_here() {
        std::vector<int> out;
        for (std::size_t i = 0; i < ha_.transitions.size(); ++i)
            if (ha_.transitions[i].source == state_.mode &&
                expr::eval_bool(ha_.transitions[i].guard, state_.x))
                out.push_back(static_cast<int>(i));
        return out;
    }

    // transitions enabled at the current point, before taking a step.
    // Returns false when the trajectory terminated.
    bool handle_point_events(Integrator &integ) {
        // crossing (equality) guards are handled by sign-change detection
        std::vector<int> enabled;
        for (std::size_t w = 0; w < watches_.size(); ++w) {
            const auto &wf = watches_[w];
            if (wf.kind != WatchFn::Kind::Guard || wf.crossing_guard) continue;
            if (expr::eval_bool(ha_.transitions[static_cast<std::size_t>(wf.transition)].guard,
                                state_.x))
                enabled.push_back(wf.transition);
        }
        if (enabled.empty()) {
            // blocked check: invariant already violated and nothing enabled
            const auto &mode = ha_.modes[static_cast<std::size_t>(state_.mode)];
            if (mode.invariant && !expr::eval_bool(mode.invariant, state_.x) &&
                enabled_here().empty()) {
                finish(Status::Blocked, integ.t());
                return false;
            }
            return true;
        }
        const int choice = pick(enabled, /*allow_continue=*/opt_.policy == Policy::RandomWalk);
        if (choice >= 0) return fire(choice, integ.t(), integ);
        return true;
    }

    // policy choice among candidate transitions; returns -1 for "continue"
    int pick(const std::vector<int> &candidates, bool allow_continue) {
        if (candidates.empty()) return -1;
        if (opt_.policy == Policy::Deterministic) {
            if (candidates.size() > 1)
                throw SimError("deterministic policy: " + std::to_string(candidates.size()) +
                               " transitions enabled simultaneously");
            return candidates[0];
        }
        const std::size_t n = candidates.size() + (allow_continue ? 1 : 0);
        const std::size_t i = static_cast<std::size_t>(rng_.below(n));
        return i < candidates.size() ? candidates[i] : -1;
    }

    bool fire(int transition, double t, Integrator &integ) {
        const auto &tr = ha_.transitions[static_cast<std::size_t>(transition)];
        Jump j;
        j.time = t;
        j.transition = transition;
        j.before = state_.x;
        ha::apply_reset(tr, state_.x, opt_.policy == Policy::RandomWalk ? &rng_ : nullptr);
        j.after = state_.x;
        traj_.jumps.push_back(std::move(j));
        state_.mode = tr.target;
        if (static_cast<int>(traj_.jumps.size()) > max_jumps_) {
            finish(Status::JumpBudgetExhausted, t);
            return false;
        }
        begin_segment(state_.mode, t, state_.x);
        integ.set_state(t, state_.x);
        integ.set_mode(state_.mode);
        build_watches();
        if (opt_.stop_on_unsafe && expr::eval_bool(ha_.unsafe, state_.x)) {
            finish(Status::HitUnsafe, t);
            traj_.unsafe_time = t;
            return false;
        }
        return true;
    }

    double margin_at(const WatchFn &w, const Vec &y) const { return expr::eval(*w.margin, y); }

    // scans the accepted step for the earliest relevant sign change
    std::optional<Crossing> earliest_crossing(Integrator &integ) {
        constexpr int kProbes = 4; // subdivisions scanned for sign changes
        std::optional<Crossing> best;
        Vec ya(state_.x.size()), yb(state_.x.size());
        for (std::size_t wi = 0; wi < watches_.size(); ++wi) {
            const auto &w = watches_[wi];
            if (w.kind == WatchFn::Kind::Unsafe && !opt_.stop_on_unsafe) continue;
            double th_a = 0.0;
            integ.interp(th_a, ya);
            double fa = margin_at(w, ya);
            for (int p = 1; p <= kProbes; ++p) {
                const double th_b = double(p) / kProbes;
                integ.interp(th_b, yb);
                const double fb = margin_at(w, yb);
                if (triggers(w, fa, fb)) {
                    const double theta = bisect(integ, w, th_a, fa, th_b);
                    const double tc = integ.time_at(theta);
                    if (!best || tc < best->time) best = Crossing{tc, theta, wi};
                    break;
                }
                th_a = th_b;
                fa = fb;
            }
        }
        return best;
    }

    bool triggers(const WatchFn &w, double fa, double fb) const {
        switch (w.kind) {
        case WatchFn::Kind::Unsafe: return fa < 0.0 && fb >= 0.0;
        case WatchFn::Kind::Invariant: return fa >= 0.0 && fb < 0.0;
        case WatchFn::Kind::Guard:
            if (w.crossing_guard) return (fa < 0.0) != (fb < 0.0);
            return fa < 0.0 && fb >= 0.0;
        }
        return false;
    }

    double bisect(Integrator &integ, const WatchFn &w, double th_lo, double f_lo, double th_hi) {
        Vec y(state_.x.size());
        const double h = integ.t1() - integ.t0();
        double lo = th_lo, hi = th_hi;
        while ((hi - lo) * h > cfg_.event_tol) {
            const double mid = 0.5 * (lo + hi);
            integ.interp(mid, y);
            const double fm = margin_at(w, y);
            if (triggers(w, f_lo, fm)) {
                hi = mid;
            } else {
                lo = mid;
                f_lo = fm;
            }
        }
        return hi; // side where the event condition holds
    }

    // all guard watches crossing within event_tol of tc
    std::vector<int> transitions_crossing_at(Integrator &integ, double tc, const Vec &yc) {
        std::vector<int> out;
        Vec y0(state_.x.size());
        integ.interp(0.0, y0);
        for (const auto &w : watches_) {
            if (w.kind != WatchFn::Kind::Guard) continue;
            const double f0 = margin_at(w, y0);
            const double fc = margin_at(w, yc);
            if (triggers(w, f0, fc) || std::fabs(fc) <= 1e-12 ||
                (!w.crossing_guard && f0 < 0.0 && fc >= -1e-12))
                out.push_back(w.transition);
        }
        if (out.empty()) {
            // localization slack: trust the detected crossing
            for (const auto &w : watches_)
                if (w.kind == WatchFn::Kind::Guard) out.push_back(w.transition);
        }
        return out;
    }

    const ha::HybridAutomaton &ha_;
    const SimOptions &opt_;
    const IntegratorConfig &cfg_;
    double T_;
    Rng rng_;
    int max_jumps_ = 0;
    ha::State state_;
    Trajectory traj_;
    std::vector<WatchFn> watches_;
};

} // namespace

std::vector<double> Trajectory::jump_times() const {
    std::vector<double> xs{0.0};
    for (const auto &j : jumps) xs.push_back(j.time);
    return xs;
}

Trajectory simulate(const ha::HybridAutomaton &ha, const ha::State &s0, double T,
                    const SimOptions &opt, const IntegratorConfig &cfg) {
    return Simulator(ha, s0, T, opt, cfg).run();
}

Label reach_oracle(const ha::HybridAutomaton &ha, const ha::State &s, const OracleConfig &cfg) {
    if (expr::eval_bool(ha.unsafe, s.x)) throw SimError("oracle precondition: state is unsafe");
    SimOptions opt;
    if (!ha.nondeterministic) {
        opt.policy = Policy::Deterministic;
        const auto traj = simulate(ha, s, ha.time_bound, opt, cfg.integ);
        return traj.status == Status::HitUnsafe ? Label::Positive : Label::Negative;
    }
    opt.policy = Policy::RandomWalk;
    Rng rng(cfg.seed);
    for (int r = 0; r < std::max(1, cfg.n_rollouts); ++r) {
        opt.seed = rng.next_u64();
        const auto traj = simulate(ha, s, ha.time_bound, opt, cfg.integ);
        if (traj.status == Status::HitUnsafe) return Label::Positive;
    }
    return Label::Negative;
}

std::optional<ha::State> backward_sample(const ha::HybridAutomaton &rev_ha, const ha::State &u,
                                         double T, const BackwardConfig &cfg, Rng &rng) {
    if (!expr::eval_bool(rev_ha.unsafe, u.x))
        throw SimError("backward_sample precondition: start state not in U");
    for (int attempt = 0; attempt < cfg.retry_budget; ++attempt) {
        const double tau = T * (1.0 - rng.uniform()); // (0, T]
        SimOptions opt;
        opt.policy = Policy::RandomWalk;
        opt.stop_on_unsafe = false;
        opt.seed = rng.next_u64();
        Trajectory traj;
        try {
            traj = simulate(rev_ha, u, tau, opt, cfg.integ);
        } catch (const SimError &) {
            continue; // e.g. blow-up along this rollout
        }
        if (traj.status != Status::Completed) continue;
        const ha::State &end = traj.final_state;
        if (expr::eval_bool(rev_ha.unsafe, end.x)) continue;
        if (!ha::in_domain(rev_ha, end)) continue;
        if (!ha::in_invariant(rev_ha, end)) continue;
        return end;
    }
    return std::nullopt;
}

double reverse_roundtrip_check(const ha::HybridAutomaton &ha, const ha::HybridAutomaton &rev_ha,
                               const ha::State &s, double T, const IntegratorConfig &cfg) {
    SimOptions fwd_opt;
    fwd_opt.policy = Policy::Deterministic;
    fwd_opt.stop_on_unsafe = false;
    const Trajectory fwd = simulate(ha, s, T, fwd_opt, cfg);
    if (fwd.status != Status::Completed)
        throw SimError("round-trip check: forward trajectory did not complete the horizon");

    // replay the mirrored run: same transitions, jump i at time T - xi_{k-i}
    ha::State cur = fwd.final_state;
    Integrator integ(rev_ha, cur.mode, cur.x, 0.0, cfg, T);
    Vec y(cur.x.size());
    for (auto it = fwd.jumps.rbegin(); it != fwd.jumps.rend(); ++it) {
        const double tj = T - it->time;
        while (integ.t() < tj) integ.step(tj);
        y = integ.y();

        // the mirrored reversed transition (target->source of the forward one)
        const auto &ftr = ha.transitions[static_cast<std::size_t>(it->transition)];
        int rev_idx = -1;
        for (std::size_t i = 0; i < rev_ha.transitions.size(); ++i)
            if (rev_ha.transitions[i].source == ftr.target && rev_ha.transitions[i].target == ftr.source)
                rev_idx = static_cast<int>(i);
        if (rev_idx < 0) throw SimError("round-trip check: mirrored transition missing");
        const auto &rtr = rev_ha.transitions[static_cast<std::size_t>(rev_idx)];
        const double g = expr::eval(rtr.guard_margin, y);
        double scale = 1.0;
        for (double v : y) scale = std::max(scale, std::fabs(v));
        if (std::fabs(g) > 1e-4 * scale)
            throw SimError("round-trip check: mirrored transition not enabled within tolerance");

        // inverse reset; non-injective components come from the recorded
        // forward pre-jump state
        for (std::size_t i = 0; i < ha.num_vars(); ++i) {
            const auto &r = rtr.resets[i];
            switch (r.kind) {
            case ha::ResetSpec::Kind::Identity: break;
            case ha::ResetSpec::Kind::Constant: y[i] = r.offset(y); break;
            case ha::ResetSpec::Kind::Affine: y[i] = r.a * y[i] + r.offset(y); break;
            case ha::ResetSpec::Kind::Interval: y[i] = it->before[i]; break;
            }
        }
        integ.set_state(tj, y);
        integ.set_mode(rtr.target);
    }
    while (integ.t() < T) integ.step(T);

    double dev = 0.0;
    const ha::Box &box = ha.domain[static_cast<std::size_t>(s.mode)];
    for (std::size_t i = 0; i < ha.num_vars(); ++i) {
        const double width = std::max(box.range[i][1] - box.range[i][0], 1e-12);
        dev = std::max(dev, std::fabs(integ.y()[i] - s.x[i]) / width);
    }
    return dev;
}

std::string trajectory_csv(const ha::HybridAutomaton &ha, const Trajectory &traj) {
    std::ostringstream out;
    out << "t,mode";
    for (const auto &v : ha.variables) out << ',' << v;
    out << '\n';
    for (const auto &seg : traj.segments)
        for (std::size_t i = 0; i < seg.times.size(); ++i) {
            out << expr::format_double(seg.times[i]) << ',' << ha.modes[static_cast<std::size_t>(seg.mode)].id;
            for (std::size_t v = 0; v < ha.num_vars(); ++v)
                out << ',' << expr::format_double(seg.states[i][v]);
            out << '\n';
        }
    return out.str();
}

} // namespace nsc::sim
