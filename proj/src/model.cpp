#include "model.hpp"

#include "rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

using nlohmann::json;

namespace nsc::ha {

bool Box::contains(std::span<const double> x, double tol) const {
    for (std::size_t i = 0; i < range.size(); ++i)
        if (x[i] < range[i][0] - tol || x[i] > range[i][1] + tol) return false;
    return true;
}

void Box::sample(Rng &rng, std::span<double> out) const {
    for (std::size_t i = 0; i < range.size(); ++i) out[i] = rng.uniform(range[i][0], range[i][1]);
}

double Box::volume() const {
    double v = 1.0;
    for (const auto &r : range) v *= std::max(0.0, r[1] - r[0]);
    return v;
}

int HybridAutomaton::mode_index(const std::string &mid) const {
    for (std::size_t i = 0; i < modes.size(); ++i)
        if (modes[i].id == mid) return static_cast<int>(i);
    throw ModelError("unknown mode '" + mid + "'");
}

bool HybridAutomaton::has_init() const {
    for (const auto &b : init)
        if (b) return true;
    return false;
}

State HybridAutomaton::make_state(int mode, std::span<const double> vars) const {
    State s;
    s.mode = mode;
    s.x.assign(dim(), 0.0);
    for (std::size_t i = 0; i < vars.size() && i < s.x.size(); ++i) s.x[i] = vars[i];
    for (std::size_t i = 0; i < parameters.size(); ++i) s.x[num_vars() + i] = parameters[i].value;
    return s;
}

void HybridAutomaton::validate_state(const State &s) const {
    if (s.mode < 0 || s.mode >= static_cast<int>(modes.size()))
        throw ModelError("state mode index out of range");
    if (s.x.size() != dim()) throw ModelError("state dimension mismatch");
}

std::vector<int> enabled_transitions(const HybridAutomaton &ha, const State &s) {
    ha.validate_state(s);
    std::vector<int> out;
    for (std::size_t i = 0; i < ha.transitions.size(); ++i)
        if (ha.transitions[i].source == s.mode && expr::eval_bool(ha.transitions[i].guard, s.x))
            out.push_back(static_cast<int>(i));
    return out;
}

bool in_unsafe(const HybridAutomaton &ha, const State &s) {
    return expr::eval_bool(ha.unsafe, s.x);
}

bool in_invariant(const HybridAutomaton &ha, const State &s) {
    const auto &inv = ha.modes[static_cast<std::size_t>(s.mode)].invariant;
    return !inv || expr::eval_bool(inv, s.x);
}

bool in_domain(const HybridAutomaton &ha, const State &s, double tol) {
    return ha.domain[static_cast<std::size_t>(s.mode)].contains(
        std::span(s.x).first(ha.num_vars()), tol);
}

void apply_reset(const Transition &tr, std::span<double> x, Rng *rng) {
    for (std::size_t i = 0; i < tr.resets.size(); ++i) {
        const ResetSpec &r = tr.resets[i];
        switch (r.kind) {
        case ResetSpec::Kind::Identity: break;
        case ResetSpec::Kind::Constant: x[i] = r.offset(x); break;
        case ResetSpec::Kind::Affine: x[i] = r.a * x[i] + r.offset(x); break;
        case ResetSpec::Kind::Interval:
            if (!rng) throw ModelError("nondeterministic reset requires an RNG");
            x[i] = r.lo == r.hi ? r.lo : rng->uniform(r.lo, r.hi);
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// JSON loading
// ---------------------------------------------------------------------------

namespace {

expr::ExprPtr parse_pred(const json &j, const char *what,
                         std::span<const std::string> names) {
    if (!j.is_string()) throw ModelError(std::string(what) + ": expected expression string");
    try {
        return expr::parse(j.get<std::string>(), names);
    } catch (const expr::ParseError &e) {
        throw ModelError(std::string(what) + ": " + e.what());
    }
}

bool trivially_true(const expr::ExprPtr &e) {
    return e->kind == expr::Node::Kind::Const && e->value != 0.0;
}

Box parse_box(const json &j, const HybridAutomaton &ha, const char *what) {
    Box box;
    box.range.assign(ha.num_vars(), {0.0, 0.0});
    std::vector<bool> seen(ha.num_vars(), false);
    if (!j.is_object()) throw ModelError(std::string(what) + ": expected {var: [lo,hi]}");
    for (auto it = j.begin(); it != j.end(); ++it) {
        auto v = std::find(ha.variables.begin(), ha.variables.end(), it.key());
        if (v == ha.variables.end())
            throw ModelError(std::string(what) + ": unknown variable '" + it.key() + "'");
        const auto idx = static_cast<std::size_t>(v - ha.variables.begin());
        const auto &r = it.value();
        if (!r.is_array() || r.size() != 2)
            throw ModelError(std::string(what) + ": range for '" + it.key() + "' must be [lo,hi]");
        box.range[idx] = {r[0].get<double>(), r[1].get<double>()};
        if (box.range[idx][0] > box.range[idx][1])
            throw ModelError(std::string(what) + ": empty range for '" + it.key() + "'");
        seen[idx] = true;
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i])
            throw ModelError(std::string(what) + ": missing range for '" + ha.variables[i] + "'");
    return box;
}

// accepts either one box per mode, keyed by mode id ("*" for all modes)
template <typename F>
void parse_per_mode(const json &j, const HybridAutomaton &ha, const char *what, F &&set) {
    if (!j.is_object()) throw ModelError(std::string(what) + ": expected object keyed by mode");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "*") {
            for (std::size_t m = 0; m < ha.modes.size(); ++m) set(m, it.value());
        } else {
            set(static_cast<std::size_t>(ha.mode_index(it.key())), it.value());
        }
    }
}

ResetSpec parse_reset(const json &j, const std::string &var, const HybridAutomaton &ha) {
    ResetSpec r;
    if (!j.is_object() || !j.contains("kind"))
        throw ModelError("reset for '" + var + "': expected {kind, args}");
    const std::string kind = j["kind"].get<std::string>();
    const json args = j.value("args", json::array());
    auto need = [&](std::size_t n) {
        if (args.size() != n)
            throw ModelError("reset for '" + var + "': kind '" + kind + "' takes " +
                             std::to_string(n) + " arg(s)");
    };
    // an offset arg is either a number or the name of a model parameter
    auto set_offset = [&](const json &a) {
        if (a.is_string()) {
            const std::string name = a.get<std::string>();
            for (std::size_t p = 0; p < ha.parameters.size(); ++p)
                if (ha.parameters[p].name == name) {
                    r.b = 0.0;
                    r.b_slot = static_cast<int>(ha.num_vars() + p);
                    return;
                }
            throw ModelError("reset for '" + var + "': unknown parameter '" + name + "'");
        }
        r.b = a.get<double>();
    };
    if (kind == "identity") {
        need(0);
    } else if (kind == "constant") {
        need(1);
        r.kind = ResetSpec::Kind::Constant;
        set_offset(args[0]);
    } else if (kind == "affine") {
        need(2);
        r.kind = ResetSpec::Kind::Affine;
        r.a = args[0].get<double>();
        set_offset(args[1]);
        if (r.a == 0.0) throw ModelError("reset for '" + var + "': affine slope must be nonzero");
    } else if (kind == "interval") {
        need(2);
        r.kind = ResetSpec::Kind::Interval;
        r.lo = args[0].get<double>();
        r.hi = args[1].get<double>();
        if (r.lo > r.hi) throw ModelError("reset for '" + var + "': empty interval");
    } else {
        throw ModelError("reset for '" + var + "': unknown kind '" + kind + "'");
    }
    return r;
}

} // namespace

HybridAutomaton parse_model(const std::string &text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception &e) {
        throw ModelError(std::string("model JSON: ") + e.what());
    }

    HybridAutomaton ha;
    ha.id = j.value("id", "model");
    if (!j.contains("variables") || !j["variables"].is_array() || j["variables"].empty())
        throw ModelError("model needs a nonempty 'variables' list");
    for (const auto &v : j["variables"]) ha.variables.push_back(v.get<std::string>());
    for (std::size_t i = 0; i < ha.variables.size(); ++i)
        for (std::size_t k = i + 1; k < ha.variables.size(); ++k)
            if (ha.variables[i] == ha.variables[k])
                throw ModelError("duplicate variable '" + ha.variables[i] + "'");

    for (const auto &p : j.value("parameters", json::array())) {
        ParameterSpec ps;
        ps.name = p.at("name").get<std::string>();
        ps.value = p.at("default").get<double>();
        if (p.contains("interval")) {
            ps.lo = p["interval"][0].get<double>();
            ps.hi = p["interval"][1].get<double>();
        } else {
            ps.lo = 0.5 * ps.value;
            ps.hi = 1.5 * ps.value;
            if (ps.lo > ps.hi) std::swap(ps.lo, ps.hi);
        }
        if (!(ps.lo <= ps.value && ps.value <= ps.hi))
            throw ModelError("parameter '" + ps.name + "': default outside its interval");
        ha.parameters.push_back(ps);
    }

    ha.names = ha.variables;
    for (const auto &p : ha.parameters) {
        if (std::find(ha.names.begin(), ha.names.end(), p.name) != ha.names.end())
            throw ModelError("parameter '" + p.name + "' clashes with a variable name");
        ha.names.push_back(p.name);
    }

    if (!j.contains("modes") || !j["modes"].is_array() || j["modes"].empty())
        throw ModelError("model needs at least one mode");
    for (const auto &m : j["modes"]) {
        Mode mode;
        mode.id = m.at("id").get<std::string>();
        const json &flow = m.at("flow");
        for (const auto &var : ha.variables) {
            if (!flow.contains(var)) throw ModelError("mode '" + mode.id + "': missing flow for '" + var + "'");
            mode.flow.push_back(parse_pred(flow[var], ("flow of " + var).c_str(), ha.names));
        }
        if (m.contains("invariant")) {
            auto inv = parse_pred(m["invariant"], "invariant", ha.names);
            if (!trivially_true(inv)) {
                mode.invariant = inv;
                mode.inv_margin = expr::margin(inv);
            }
        }
        ha.modes.push_back(std::move(mode));
    }

    for (const auto &t : j.value("transitions", json::array())) {
        Transition tr;
        tr.source = ha.mode_index(t.at("from").get<std::string>());
        tr.target = ha.mode_index(t.at("to").get<std::string>());
        tr.guard = parse_pred(t.at("guard"), "guard", ha.names);
        tr.guard_margin = expr::margin(tr.guard);
        tr.resets.assign(ha.num_vars(), ResetSpec{});
        for (auto it = t.value("resets", json::object()).begin();
             it != t.value("resets", json::object()).end(); ++it) {
            auto v = std::find(ha.variables.begin(), ha.variables.end(), it.key());
            if (v == ha.variables.end())
                throw ModelError("reset references unknown variable '" + it.key() + "'");
            tr.resets[static_cast<std::size_t>(v - ha.variables.begin())] =
                parse_reset(it.value(), it.key(), ha);
        }
        ha.transitions.push_back(std::move(tr));
    }

    ha.unsafe = parse_pred(j.at("unsafe"), "unsafe", ha.names);
    ha.unsafe_margin = expr::margin(ha.unsafe);

    ha.domain.resize(ha.modes.size());
    std::vector<bool> have_domain(ha.modes.size(), false);
    parse_per_mode(j.at("domain"), ha, "domain", [&](std::size_t m, const json &b) {
        ha.domain[m] = parse_box(b, ha, "domain");
        have_domain[m] = true;
    });
    for (std::size_t m = 0; m < ha.modes.size(); ++m)
        if (!have_domain[m]) throw ModelError("missing sampling domain for mode '" + ha.modes[m].id + "'");

    ha.unsafe_boxes.resize(ha.modes.size());
    if (j.contains("unsafe_domain"))
        parse_per_mode(j["unsafe_domain"], ha, "unsafe_domain", [&](std::size_t m, const json &b) {
            if (b.is_array())
                for (const auto &bb : b) ha.unsafe_boxes[m].push_back(parse_box(bb, ha, "unsafe_domain"));
            else
                ha.unsafe_boxes[m].push_back(parse_box(b, ha, "unsafe_domain"));
        });

    ha.init.resize(ha.modes.size());
    if (j.contains("init"))
        parse_per_mode(j["init"], ha, "init", [&](std::size_t m, const json &b) {
            ha.init[m] = parse_box(b, ha, "init");
        });

    ha.time_bound = j.at("T").get<double>();
    if (ha.time_bound < 0.0) throw ModelError("time bound must be nonnegative");
    ha.jump_bound = j.value("jump_bound", 64);
    if (ha.jump_bound < 0) throw ModelError("jump bound must be nonnegative");
    return ha;
}

HybridAutomaton load_model(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw ModelError("cannot open model file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_model(ss.str());
}

// ---------------------------------------------------------------------------
// Reversal (Def. 7)
// ---------------------------------------------------------------------------

namespace {

// expression form of a reset offset (b + b_scale * param)
expr::ExprPtr offset_expr(const HybridAutomaton &ha, const ResetSpec &r) {
    if (r.b_slot < 0) return expr::constant(r.b);
    expr::ExprPtr p = expr::variable(ha.names[static_cast<std::size_t>(r.b_slot)], r.b_slot);
    if (r.b_scale != 1.0) p = expr::binary(expr::BinOp::Mul, expr::constant(r.b_scale), p);
    if (r.b != 0.0) p = expr::binary(expr::BinOp::Add, expr::constant(r.b), p);
    return p;
}

// bounds a single-variable conjunct places on that variable; atoms must look
// like  var cmp const-expr  or  const-expr cmp var
bool atom_bounds(const expr::ExprPtr &atom, int slot, std::span<const double> defaults,
                 double &lo, double &hi) {
    using expr::BinOp;
    using expr::Node;
    if (atom->kind != Node::Kind::Bin) return false;
    const auto &a = atom->args[0];
    const auto &b = atom->args[1];
    bool var_left = a->kind == Node::Kind::Var && a->slot == slot;
    bool var_right = b->kind == Node::Kind::Var && b->slot == slot;
    if (var_left == var_right) return false;
    const auto &other = var_left ? b : a;
    if (expr::references(*other, slot)) return false;
    double c;
    try {
        c = expr::eval(other, defaults);
    } catch (const expr::EvalError &) {
        return false;
    }
    BinOp op = atom->op;
    if (var_right) { // flip to var-on-left form
        switch (op) {
        case BinOp::Lt: op = BinOp::Gt; break;
        case BinOp::Le: op = BinOp::Ge; break;
        case BinOp::Gt: op = BinOp::Lt; break;
        case BinOp::Ge: op = BinOp::Le; break;
        default: break;
        }
    }
    switch (op) {
    case BinOp::Ge: case BinOp::Gt: lo = std::max(lo, c); return true;
    case BinOp::Le: case BinOp::Lt: hi = std::min(hi, c); return true;
    case BinOp::Eq: lo = std::max(lo, c); hi = std::min(hi, c); return true;
    default: return false;
    }
}

} // namespace

HybridAutomaton reverse(const HybridAutomaton &ha) {
    HybridAutomaton rev = ha;
    for (auto &mode : rev.modes)
        for (auto &f : mode.flow) f = expr::negate(f);

    rev.transitions.clear();
    for (const auto &tr : ha.transitions) {
        for (const auto &r : tr.resets)
            if (r.kind == ResetSpec::Kind::Interval)
                throw ModelError("cannot reverse a transition with an interval reset");

        Transition out;
        out.source = tr.target;
        out.target = tr.source;
        out.resets.assign(ha.num_vars(), ResetSpec{});

        // substitution x_i := (y_i - b)/a for invertible components, used to
        // push the guard through the reset image
        std::vector<expr::ExprPtr> subst(ha.dim());
        std::vector<bool> is_const(ha.num_vars(), false);
        for (std::size_t i = 0; i < ha.num_vars(); ++i) {
            const ResetSpec &r = tr.resets[i];
            switch (r.kind) {
            case ResetSpec::Kind::Identity:
                break;
            case ResetSpec::Kind::Affine: {
                out.resets[i].kind = ResetSpec::Kind::Affine;
                out.resets[i].a = 1.0 / r.a;
                out.resets[i].b = -r.b / r.a;
                out.resets[i].b_slot = r.b_slot;
                out.resets[i].b_scale = -r.b_scale / r.a;
                auto v = expr::variable(ha.variables[i], static_cast<int>(i));
                subst[i] = expr::binary(expr::BinOp::Div,
                                        expr::binary(expr::BinOp::Sub, v, offset_expr(ha, r)),
                                        expr::constant(r.a));
                break;
            }
            case ResetSpec::Kind::Constant:
                is_const[i] = true;
                break;
            case ResetSpec::Kind::Interval:
                break; // rejected above
            }
        }

        // guard image v(g): conjuncts over constant-reset variables become
        // existentially quantified (they feed the reversed interval resets);
        // the rest are rewritten through the affine inverses
        std::vector<expr::ExprPtr> atoms;
        expr::conjuncts(tr.guard, atoms);

        std::vector<double> defaults(ha.dim(), 0.0);
        for (std::size_t p = 0; p < ha.parameters.size(); ++p)
            defaults[ha.num_vars() + p] = ha.parameters[p].value;

        const Box &src_domain = ha.domain[static_cast<std::size_t>(tr.source)];
        expr::ExprPtr rev_guard;
        auto add_conjunct = [&](expr::ExprPtr e) {
            rev_guard = rev_guard ? expr::binary(expr::BinOp::And, rev_guard, e) : e;
        };

        for (std::size_t i = 0; i < ha.num_vars(); ++i) {
            if (!is_const[i]) continue;
            // reversed guard pins the variable at its forward reset value
            add_conjunct(expr::binary(expr::BinOp::Eq,
                                      expr::variable(ha.variables[i], static_cast<int>(i)),
                                      offset_expr(ha, tr.resets[i])));
            // reversed reset draws from {x in g} clipped to the source domain
            double lo = src_domain.range[i][0];
            double hi = src_domain.range[i][1];
            for (const auto &atom : atoms)
                if (expr::references(*atom, static_cast<int>(i)))
                    atom_bounds(atom, static_cast<int>(i), defaults, lo, hi);
            if (lo > hi) hi = lo; // guard bound lies outside the sampling box
            out.resets[i].kind = ResetSpec::Kind::Interval;
            out.resets[i].lo = lo;
            out.resets[i].hi = hi;
        }

        for (const auto &atom : atoms) {
            bool touches_const = false;
            for (std::size_t i = 0; i < ha.num_vars(); ++i)
                if (is_const[i] && expr::references(*atom, static_cast<int>(i))) {
                    touches_const = true;
                    break;
                }
            if (touches_const) continue;
            add_conjunct(expr::substitute(atom, subst));
        }

        if (!rev_guard) rev_guard = expr::constant(1.0);
        out.guard = rev_guard;
        out.guard_margin = expr::margin(rev_guard);
        rev.transitions.push_back(std::move(out));
    }
    return rev;
}

} // namespace nsc::ha
