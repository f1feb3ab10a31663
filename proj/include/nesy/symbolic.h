// Machine-Coaching style policies: prioritized defeasible rules over signed
// atoms, with forward deduction and exact abduction to a propositional
// formula.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nesy {

/// Upper bound on the number of atoms; contexts are stored as bitmasks.
inline constexpr int kMaxAtoms = 30;

enum class Sign : std::uint8_t { Negative = 0, Positive = 1 };

inline Sign operator!(Sign s) { return s == Sign::Positive ? Sign::Negative : Sign::Positive; }

/// Atom a<k> has index k-1.
struct Atom {
	int index = 0;
	std::string name() const { return "a" + std::to_string(index + 1); }
	friend bool operator==(Atom, Atom) = default;
};

struct Literal {
	Atom atom;
	Sign sign = Sign::Positive;
	std::string to_string() const;
	friend bool operator==(const Literal&, const Literal&) = default;
};

struct Rule {
	std::vector<Literal> body;
	Sign head = Sign::Positive;

	std::string to_string() const;
	friend bool operator==(const Rule&, const Rule&) = default;
};

/// Total assignment of signs to atoms a1..an. Bit i set means atom i positive.
class Context {
public:
	Context() = default;
	Context(int n_atoms, std::uint32_t positive_bits);

	int size() const { return n_; }
	std::uint32_t bits() const { return bits_; }
	Sign sign(int atom) const { return (bits_ >> atom) & 1u ? Sign::Positive : Sign::Negative; }
	bool satisfies(const Literal& lit) const { return sign(lit.atom.index) == lit.sign; }
	bool satisfies(const Rule& rule) const;
	std::string to_string() const;

	friend bool operator==(const Context&, const Context&) = default;

private:
	int n_ = 0;
	std::uint32_t bits_ = 0;
};

enum class Decision : std::uint8_t { HeadNegative = 0, HeadPositive = 1, Abstain = 2 };

const char* to_string(Decision d);
inline Decision decision_of(Sign s) { return s == Sign::Positive ? Decision::HeadPositive : Decision::HeadNegative; }

/// Ordered rules; index is priority, later rules win. Immutable after
/// construction, so it can be shared between organisms.
class Policy {
public:
	Policy() = default;
	explicit Policy(std::vector<Rule> rules);

	const std::vector<Rule>& rules() const { return rules_; }
	std::size_t size() const { return rules_.size(); }
	bool empty() const { return rules_.empty(); }
	const Rule& latest() const { return rules_.back(); }
	/// 64-bit FNV-1a of the rendered text; changes whenever any rule changes.
	std::uint64_t fingerprint() const { return fingerprint_; }

	friend bool operator==(const Policy& a, const Policy& b) { return a.rules_ == b.rules_; }

private:
	std::vector<Rule> rules_;
	std::uint64_t fingerprint_ = 0;
};

class ParseError : public std::runtime_error {
public:
	ParseError(int line, int column, const std::string& what);
	int line() const { return line_; }
	int column() const { return column_; }

private:
	int line_;
	int column_;
};

class InvalidRule : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// Parses "lit(, lit)* implies [-]head" lines; first line has lowest priority.
/// Every atom must be one of a1..a<n_atoms>.
Policy parse_policy(std::string_view text, int n_atoms);
Rule parse_rule(std::string_view line, int n_atoms);
std::string render_policy(const Policy& policy);

/// Throws InvalidRule on an empty body, repeated atom or atom outside A.
void validate_rule(const Rule& rule, int n_atoms);

Decision deduce(const Policy& policy, const Context& ctx);

/// Returns a new policy with `rule` appended at the highest priority.
Policy induce(const Policy& policy, const Rule& rule, int n_atoms);

bool is_homogeneous(const Rule& rule);

/// Propositional formula in negation normal form over atom literals.
class Formula {
public:
	enum class Kind : std::uint8_t { False, True, Lit, And, Or };

	static Formula falsum();
	static Formula truth();
	static Formula literal(Literal lit);
	/// Constant folding applies: empty conjunction is True, any False child
	/// makes it False, True children are dropped, singletons collapse.
	static Formula conj(std::vector<Formula> children);
	static Formula disj(std::vector<Formula> children);

	Kind kind() const { return kind_; }
	const Literal& lit() const { return lit_; }
	const std::vector<Formula>& children() const { return children_; }

	bool evaluate(const Context& ctx) const;
	/// NNF negation (De Morgan pushed to the literals).
	Formula negated() const;
	std::string to_string() const;

	friend bool operator==(const Formula&, const Formula&) = default;

private:
	Kind kind_ = Kind::False;
	Literal lit_;
	std::vector<Formula> children_;
};

/// Formula satisfied by exactly the total contexts on which deduce() returns
/// `label`. `label` must not be Abstain.
Formula abduce(const Policy& policy, Decision label);

/// Formula satisfied by exactly the contexts on which no rule fires.
Formula abstain_formula(const Policy& policy);

} // namespace nesy
