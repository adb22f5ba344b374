#include "expr.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace nsc::expr {

ExprPtr constant(double v) {
    auto n = std::make_shared<Node>();
    n->kind = Node::Kind::Const;
    n->value = v;
    return n;
}

ExprPtr variable(std::string name, int slot) {
    auto n = std::make_shared<Node>();
    n->kind = Node::Kind::Var;
    n->name = std::move(name);
    n->slot = slot;
    return n;
}

ExprPtr negate(ExprPtr e) {
    auto n = std::make_shared<Node>();
    n->kind = Node::Kind::Neg;
    n->args = {std::move(e)};
    return n;
}

ExprPtr binary(BinOp op, ExprPtr a, ExprPtr b) {
    auto n = std::make_shared<Node>();
    n->kind = Node::Kind::Bin;
    n->op = op;
    n->args = {std::move(a), std::move(b)};
    return n;
}

static ExprPtr call2(Func fn, ExprPtr a, ExprPtr b) {
    auto n = std::make_shared<Node>();
    n->kind = Node::Kind::Call;
    n->fn = fn;
    n->args = {std::move(a), std::move(b)};
    return n;
}

// ---------------------------------------------------------------------------
// Parser. Grammar (loosest to tightest):
//   expr  := or
//   or    := and ("or" and)*
//   and   := cmp ("and" cmp)*
//   cmp   := add ((< | <= | > | >= | == | !=) add)?
//   add   := mul ((+ | -) mul)*
//   mul   := unary ((* | /) unary)*
//   unary := "-" unary | "not" unary | pow
//   pow   := atom ("^" unary)?
//   atom  := number | ident | func "(" args ")" | "(" expr ")" | "if" "(" ... ")"
// Note "^" binds tighter than unary minus: -2^2 == -(2^2).
// ---------------------------------------------------------------------------

namespace {

struct FuncInfo {
    const char *name;
    Func fn;
    int arity;
};

constexpr FuncInfo k_funcs[] = {
    {"sin", Func::Sin, 1},  {"cos", Func::Cos, 1},   {"tan", Func::Tan, 1},
    {"exp", Func::Exp, 1},  {"sqrt", Func::Sqrt, 1}, {"abs", Func::Abs, 1},
    {"sign", Func::Sign, 1}, {"min", Func::Min, 2},  {"max", Func::Max, 2},
};

class Parser {
public:
    Parser(std::string_view text, std::span<const std::string> declared)
        : text_(text), declared_(declared) {}

    ExprPtr run() {
        if (text_.find_first_not_of(" \t\r\n") == std::string_view::npos)
            throw ParseError("empty expression", 0);
        ExprPtr e = parse_or();
        skip_ws();
        if (pos_ != text_.size())
            throw ParseError("unexpected trailing input", pos_);
        return e;
    }

private:
    std::string_view text_;
    std::span<const std::string> declared_;
    std::size_t pos_ = 0;

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool eat(std::string_view tok) {
        skip_ws();
        if (text_.substr(pos_, tok.size()) == tok) {
            pos_ += tok.size();
            return true;
        }
        return false;
    }

    bool eat_word(std::string_view word) {
        skip_ws();
        if (text_.substr(pos_, word.size()) != word) return false;
        const std::size_t end = pos_ + word.size();
        if (end < text_.size()) {
            const char c = text_[end];
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') return false;
        }
        pos_ = end;
        return true;
    }

    char peek() {
        skip_ws();
        return pos_ < text_.size() ? text_[pos_] : '\0';
    }

    ExprPtr parse_or() {
        ExprPtr e = parse_and();
        while (eat_word("or")) e = binary(BinOp::Or, e, parse_and());
        return e;
    }

    ExprPtr parse_and() {
        ExprPtr e = parse_cmp();
        while (eat_word("and")) e = binary(BinOp::And, e, parse_cmp());
        return e;
    }

    ExprPtr parse_cmp() {
        ExprPtr e = parse_add();
        skip_ws();
        if (eat("<=")) return binary(BinOp::Le, e, parse_add());
        if (eat(">=")) return binary(BinOp::Ge, e, parse_add());
        if (eat("==")) return binary(BinOp::Eq, e, parse_add());
        if (eat("!=")) return binary(BinOp::Ne, e, parse_add());
        if (eat("<")) return binary(BinOp::Lt, e, parse_add());
        if (eat(">")) return binary(BinOp::Gt, e, parse_add());
        return e;
    }

    ExprPtr parse_add() {
        ExprPtr e = parse_mul();
        for (;;) {
            if (eat("+")) e = binary(BinOp::Add, e, parse_mul());
            else if (eat("-")) e = binary(BinOp::Sub, e, parse_mul());
            else return e;
        }
    }

    ExprPtr parse_mul() {
        ExprPtr e = parse_unary();
        for (;;) {
            if (eat("*")) e = binary(BinOp::Mul, e, parse_unary());
            else if (eat("/")) e = binary(BinOp::Div, e, parse_unary());
            else return e;
        }
    }

    ExprPtr parse_unary() {
        if (eat("-")) return negate(parse_unary());
        if (eat_word("not")) {
            auto n = std::make_shared<Node>();
            n->kind = Node::Kind::Not;
            n->args = {parse_unary()};
            return n;
        }
        return parse_pow();
    }

    ExprPtr parse_pow() {
        ExprPtr e = parse_atom();
        if (eat("^")) return binary(BinOp::Pow, e, parse_unary());
        return e;
    }

    ExprPtr parse_atom() {
        skip_ws();
        if (pos_ >= text_.size()) throw ParseError("unexpected end of input", pos_);
        const char c = text_[pos_];
        if (c == '(') {
            ++pos_;
            ExprPtr e = parse_or();
            if (!eat(")")) throw ParseError("expected ')'", pos_);
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_ident();
        throw ParseError(std::string("unexpected character '") + c + "'", pos_);
    }

    ExprPtr parse_number() {
        const char *first = text_.data() + pos_;
        const char *last = text_.data() + text_.size();
        double v = 0.0;
        auto [p, ec] = std::from_chars(first, last, v);
        if (ec != std::errc()) throw ParseError("malformed number", pos_);
        pos_ = static_cast<std::size_t>(p - text_.data());
        return constant(v);
    }

    ExprPtr parse_ident() {
        const std::size_t start = pos_;
        while (pos_ < text_.size() &&
               (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
            ++pos_;
        std::string name(text_.substr(start, pos_ - start));

        if (name == "if") return parse_if(start);
        for (const auto &f : k_funcs)
            if (name == f.name) return parse_call(f, start);

        for (std::size_t i = 0; i < declared_.size(); ++i)
            if (declared_[i] == name) return variable(std::move(name), static_cast<int>(i));
        throw ParseError("unknown identifier '" + name + "'", start);
    }

    ExprPtr parse_if(std::size_t start) {
        if (!eat("(")) throw ParseError("expected '(' after if", pos_);
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::If;
        n->args.push_back(parse_or());
        if (!eat(",")) throw ParseError("if expects 3 arguments", start);
        n->args.push_back(parse_or());
        if (!eat(",")) throw ParseError("if expects 3 arguments", start);
        n->args.push_back(parse_or());
        if (!eat(")")) throw ParseError("expected ')'", pos_);
        return n;
    }

    ExprPtr parse_call(const FuncInfo &f, std::size_t start) {
        if (!eat("(")) throw ParseError(std::string("expected '(' after ") + f.name, pos_);
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::Call;
        n->fn = f.fn;
        n->args.push_back(parse_or());
        while (eat(",")) n->args.push_back(parse_or());
        if (!eat(")")) throw ParseError("expected ')'", pos_);
        if (static_cast<int>(n->args.size()) != f.arity)
            throw ParseError(std::string(f.name) + " expects " + std::to_string(f.arity) +
                                 " argument(s), got " + std::to_string(n->args.size()),
                             start);
        return n;
    }
};

} // namespace

ExprPtr parse(std::string_view text, std::span<const std::string> declared) {
    return Parser(text, declared).run();
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

static double check_finite(double v, const char *what) {
    if (!std::isfinite(v)) throw EvalError(std::string("non-finite result in ") + what);
    return v;
}

double eval(const Node &e, std::span<const double> env) {
    switch (e.kind) {
    case Node::Kind::Const:
        return e.value;
    case Node::Kind::Var:
        return env[static_cast<std::size_t>(e.slot)];
    case Node::Kind::Neg:
        return -eval(*e.args[0], env);
    case Node::Kind::Not:
        return eval(*e.args[0], env) != 0.0 ? 0.0 : 1.0;
    case Node::Kind::If:
        return eval(*e.args[0], env) != 0.0 ? eval(*e.args[1], env) : eval(*e.args[2], env);
    case Node::Kind::Call: {
        const double a = eval(*e.args[0], env);
        switch (e.fn) {
        case Func::Sin: return std::sin(a);
        case Func::Cos: return std::cos(a);
        case Func::Tan: return check_finite(std::tan(a), "tan");
        case Func::Exp: return check_finite(std::exp(a), "exp");
        case Func::Sqrt:
            if (a < 0.0) throw EvalError("sqrt of negative value");
            return std::sqrt(a);
        case Func::Abs: return std::fabs(a);
        case Func::Sign: return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0);
        case Func::Min: return std::min(a, eval(*e.args[1], env));
        case Func::Max: return std::max(a, eval(*e.args[1], env));
        }
        throw EvalError("bad function tag");
    }
    case Node::Kind::Bin: {
        const double a = eval(*e.args[0], env);
        switch (e.op) {
        case BinOp::Lt: return a < eval(*e.args[1], env) ? 1.0 : 0.0;
        case BinOp::Le: return a <= eval(*e.args[1], env) ? 1.0 : 0.0;
        case BinOp::Gt: return a > eval(*e.args[1], env) ? 1.0 : 0.0;
        case BinOp::Ge: return a >= eval(*e.args[1], env) ? 1.0 : 0.0;
        case BinOp::Eq: return a == eval(*e.args[1], env) ? 1.0 : 0.0;
        case BinOp::Ne: return a != eval(*e.args[1], env) ? 1.0 : 0.0;
        case BinOp::And: return (a != 0.0 && eval(*e.args[1], env) != 0.0) ? 1.0 : 0.0;
        case BinOp::Or: return (a != 0.0 || eval(*e.args[1], env) != 0.0) ? 1.0 : 0.0;
        case BinOp::Add: return check_finite(a + eval(*e.args[1], env), "+");
        case BinOp::Sub: return check_finite(a - eval(*e.args[1], env), "-");
        case BinOp::Mul: return check_finite(a * eval(*e.args[1], env), "*");
        case BinOp::Div: {
            const double b = eval(*e.args[1], env);
            if (b == 0.0) throw EvalError("division by zero");
            return check_finite(a / b, "/");
        }
        case BinOp::Pow: return check_finite(std::pow(a, eval(*e.args[1], env)), "^");
        }
        throw EvalError("bad operator tag");
    }
    }
    throw EvalError("bad node kind");
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

std::string format_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

namespace {

// precedence levels matching the grammar; a child is parenthesized when its
// level is below the minimum its position requires
int level_of(const Node &e) {
    switch (e.kind) {
    case Node::Kind::Const: return e.value < 0.0 ? 6 : 8;
    case Node::Kind::Var:
    case Node::Kind::Call:
    case Node::Kind::If: return 8;
    case Node::Kind::Neg:
    case Node::Kind::Not: return 6;
    case Node::Kind::Bin:
        switch (e.op) {
        case BinOp::Or: return 1;
        case BinOp::And: return 2;
        case BinOp::Lt: case BinOp::Le: case BinOp::Gt:
        case BinOp::Ge: case BinOp::Eq: case BinOp::Ne: return 3;
        case BinOp::Add: case BinOp::Sub: return 4;
        case BinOp::Mul: case BinOp::Div: return 5;
        case BinOp::Pow: return 7;
        }
    }
    return 8;
}

const char *op_text(BinOp op) {
    switch (op) {
    case BinOp::Add: return " + ";
    case BinOp::Sub: return " - ";
    case BinOp::Mul: return "*";
    case BinOp::Div: return "/";
    case BinOp::Pow: return "^";
    case BinOp::Lt: return " < ";
    case BinOp::Le: return " <= ";
    case BinOp::Gt: return " > ";
    case BinOp::Ge: return " >= ";
    case BinOp::Eq: return " == ";
    case BinOp::Ne: return " != ";
    case BinOp::And: return " and ";
    case BinOp::Or: return " or ";
    }
    return "?";
}

const char *func_text(Func fn) {
    switch (fn) {
    case Func::Sin: return "sin";
    case Func::Cos: return "cos";
    case Func::Tan: return "tan";
    case Func::Exp: return "exp";
    case Func::Sqrt: return "sqrt";
    case Func::Abs: return "abs";
    case Func::Sign: return "sign";
    case Func::Min: return "min";
    case Func::Max: return "max";
    }
    return "?";
}

void print(const Node &e, int min_level, std::string &out) {
    const bool parens = level_of(e) < min_level;
    if (parens) out += '(';
    switch (e.kind) {
    case Node::Kind::Const:
        out += format_double(e.value);
        break;
    case Node::Kind::Var:
        out += e.name;
        break;
    case Node::Kind::Neg:
        out += '-';
        print(*e.args[0], 6, out);
        break;
    case Node::Kind::Not:
        out += "not ";
        print(*e.args[0], 6, out);
        break;
    case Node::Kind::If:
        out += "if(";
        print(*e.args[0], 0, out);
        out += ", ";
        print(*e.args[1], 0, out);
        out += ", ";
        print(*e.args[2], 0, out);
        out += ')';
        break;
    case Node::Kind::Call:
        out += func_text(e.fn);
        out += '(';
        for (std::size_t i = 0; i < e.args.size(); ++i) {
            if (i) out += ", ";
            print(*e.args[i], 0, out);
        }
        out += ')';
        break;
    case Node::Kind::Bin: {
        const int lv = level_of(e);
        // pow is atom^unary; comparisons do not chain
        const int left_min = e.op == BinOp::Pow ? 8 : (lv == 3 ? 4 : lv);
        const int right_min = e.op == BinOp::Pow ? 6 : (lv == 3 ? 4 : lv + 1);
        print(*e.args[0], left_min, out);
        out += op_text(e.op);
        print(*e.args[1], right_min, out);
        break;
    }
    }
    if (parens) out += ')';
}

} // namespace

std::string to_string(const Node &e) {
    std::string out;
    print(e, 0, out);
    return out;
}

bool equal(const Node &a, const Node &b) {
    if (a.kind != b.kind || a.args.size() != b.args.size()) return false;
    switch (a.kind) {
    case Node::Kind::Const:
        if (!(a.value == b.value)) return false;
        break;
    case Node::Kind::Var:
        if (a.slot != b.slot || a.name != b.name) return false;
        break;
    case Node::Kind::Bin:
        if (a.op != b.op) return false;
        break;
    case Node::Kind::Call:
        if (a.fn != b.fn) return false;
        break;
    default:
        break;
    }
    for (std::size_t i = 0; i < a.args.size(); ++i)
        if (!equal(*a.args[i], *b.args[i])) return false;
    return true;
}

ExprPtr substitute(const ExprPtr &e, std::span<const ExprPtr> repl) {
    if (e->kind == Node::Kind::Var) {
        const auto s = static_cast<std::size_t>(e->slot);
        if (s < repl.size() && repl[s]) return repl[s];
        return e;
    }
    if (e->args.empty()) return e;
    auto n = std::make_shared<Node>(*e);
    for (auto &a : n->args) a = substitute(a, repl);
    return n;
}

bool references(const Node &e, int slot) {
    if (e.kind == Node::Kind::Var) return e.slot == slot;
    for (const auto &a : e.args)
        if (references(*a, slot)) return true;
    return false;
}

void conjuncts(const ExprPtr &e, std::vector<ExprPtr> &out) {
    if (e->kind == Node::Kind::Bin && e->op == BinOp::And) {
        conjuncts(e->args[0], out);
        conjuncts(e->args[1], out);
    } else {
        out.push_back(e);
    }
}

ExprPtr margin(const ExprPtr &p) {
    switch (p->kind) {
    case Node::Kind::Bin:
        switch (p->op) {
        case BinOp::Ge:
        case BinOp::Gt:
        case BinOp::Eq: // equality guards are crossing expressions: a - b
            return binary(BinOp::Sub, p->args[0], p->args[1]);
        case BinOp::Le:
        case BinOp::Lt:
            return binary(BinOp::Sub, p->args[1], p->args[0]);
        case BinOp::And:
            return call2(Func::Min, margin(p->args[0]), margin(p->args[1]));
        case BinOp::Or:
            return call2(Func::Max, margin(p->args[0]), margin(p->args[1]));
        default:
            break;
        }
        break;
    case Node::Kind::Not:
        return negate(margin(p->args[0]));
    case Node::Kind::Const:
        return constant(p->value != 0.0 ? 1.0 : -1.0);
    default:
        break;
    }
    throw EvalError("predicate has no margin form: " + to_string(p));
}

} // namespace nsc::expr
