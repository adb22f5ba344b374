#pragma once

#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nsc::expr {

struct ParseError : std::runtime_error {
    ParseError(const std::string &msg, std::size_t pos)
        : std::runtime_error(msg + " at position " + std::to_string(pos)), position(pos) {}
    std::size_t position;
};

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class BinOp { Add, Sub, Mul, Div, Pow, Lt, Le, Gt, Ge, Eq, Ne, And, Or };
enum class Func { Sin, Cos, Tan, Exp, Sqrt, Abs, Sign, Min, Max };

struct Node;
using ExprPtr = std::shared_ptr<const Node>;

/* AST node. One of:
 *   Const  value
 *   Var    name/slot (slot indexes the declared-name list)
 *   Neg    args[0]
 *   Not    args[0]
 *   Bin    op, args[0], args[1]
 *   Call   fn, args (arity 1, or 2 for min/max)
 *   If     args = {cond, then, else}
 */
struct Node {
    enum class Kind { Const, Var, Neg, Not, Bin, Call, If };
    Kind kind;
    double value = 0.0;
    std::string name;
    int slot = -1;
    BinOp op = BinOp::Add;
    Func fn = Func::Sin;
    std::vector<ExprPtr> args;
};

ExprPtr constant(double v);
ExprPtr variable(std::string name, int slot);
ExprPtr negate(ExprPtr e);
ExprPtr binary(BinOp op, ExprPtr a, ExprPtr b);

// Parses `text` against the declared variable/parameter names; variable slots
// are indices into `declared`. Undeclared identifiers are rejected.
ExprPtr parse(std::string_view text, std::span<const std::string> declared);

// env is indexed by variable slot. Comparisons and boolean ops yield 1.0/0.0;
// if() evaluates only the taken branch. Non-finite results raise EvalError.
double eval(const Node &e, std::span<const double> env);

inline double eval(const ExprPtr &e, std::span<const double> env) { return eval(*e, env); }

inline bool eval_bool(const Node &e, std::span<const double> env) { return eval(e, env) != 0.0; }
inline bool eval_bool(const ExprPtr &e, std::span<const double> env) { return eval(*e, env) != 0.0; }

// Output reparses to a structurally identical AST.
std::string to_string(const Node &e);
inline std::string to_string(const ExprPtr &e) { return to_string(*e); }

bool equal(const Node &a, const Node &b);
inline bool equal(const ExprPtr &a, const ExprPtr &b) { return equal(*a, *b); }

// Replaces every variable whose slot has a non-null entry in `repl`.
ExprPtr substitute(const ExprPtr &e, std::span<const ExprPtr> repl);

// True if the expression references the given slot.
bool references(const Node &e, int slot);

// Flattens a conjunction ("a and b and c") into its conjuncts; a non-`and`
// expression yields itself.
void conjuncts(const ExprPtr &e, std::vector<ExprPtr> &out);

// Quantitative satisfaction margin: >= 0 where the predicate holds, with the
// magnitude tracking distance to the boundary. Comparisons a>=b map to a-b,
// a<=b to b-a, equalities to -(|a-b|) shifted so a crossing changes sign; see
// margin() implementation for the exact encoding used for event detection.
ExprPtr margin(const ExprPtr &predicate);

std::string format_double(double v);

} // namespace nsc::expr
