#include "nesy/symbolic.h"

#include "nesy/hash.h"

#include <algorithm>
#include <cctype>

namespace nesy {

std::string Literal::to_string() const {
	return (sign == Sign::Negative ? "-" : "") + atom.name();
}

std::string Rule::to_string() const {
	std::string out;
	for (std::size_t i = 0; i < body.size(); ++i) {
		if (i) out += ", ";
		out += body[i].to_string();
	}
	out += " implies ";
	out += head == Sign::Negative ? "-head" : "head";
	return out;
}

Context::Context(int n_atoms, std::uint32_t positive_bits) : n_(n_atoms), bits_(positive_bits) {
	if (n_atoms < 0 || n_atoms > kMaxAtoms) throw std::invalid_argument("context size out of range");
	if (n_atoms < 32) bits_ &= (std::uint32_t{1} << n_atoms) - 1u;
}

bool Context::satisfies(const Rule& rule) const {
	return std::all_of(rule.body.begin(), rule.body.end(), [this](const Literal& l) { return satisfies(l); });
}

std::string Context::to_string() const {
	std::string out = "{";
	for (int i = 0; i < n_; ++i) {
		if (i) out += ", ";
		out += Literal{Atom{i}, sign(i)}.to_string();
	}
	return out + "}";
}

const char* to_string(Decision d) {
	switch (d) {
	case Decision::HeadPositive: return "head";
	case Decision::HeadNegative: return "-head";
	case Decision::Abstain: return "abstain";
	}
	return "?";
}

Policy::Policy(std::vector<Rule> rules) : rules_(std::move(rules)) {
	fingerprint_ = fnv1a64(render_policy(*this));
}

ParseError::ParseError(int line, int column, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what),
      line_(line), column_(column) {}

void validate_rule(const Rule& rule, int n_atoms) {
	if (rule.body.empty()) throw InvalidRule("rule body is empty");
	std::uint32_t seen = 0;
	for (const Literal& l : rule.body) {
		if (l.atom.index < 0 || l.atom.index >= n_atoms)
			throw InvalidRule("atom " + l.atom.name() + " outside a1..a" + std::to_string(n_atoms));
		std::uint32_t bit = std::uint32_t{1} << l.atom.index;
		if (seen & bit) throw InvalidRule("atom " + l.atom.name() + " appears twice in a body");
		seen |= bit;
	}
}

namespace {

class LineParser {
public:
	LineParser(std::string_view text, int line, int n_atoms) : s_(text), line_(line), n_atoms_(n_atoms) {}

	Rule parse() {
		Rule rule;
		std::uint32_t seen = 0;
		for (;;) {
			skip_spaces();
			int col = column();
			Literal lit = literal();
			std::uint32_t bit = std::uint32_t{1} << lit.atom.index;
			if (seen & bit) fail(col, "duplicate atom " + lit.atom.name() + " in body");
			seen |= bit;
			rule.body.push_back(lit);
			skip_spaces();
			if (peek() == ',') {
				++pos_;
				continue;
			}
			break;
		}
		keyword("implies");
		skip_spaces();
		int col = column();
		if (peek() == '-') {
			rule.head = Sign::Negative;
			++pos_;
		}
		if (s_.substr(pos_, 4) != "head" || (pos_ + 4 < s_.size() && is_ident(s_[pos_ + 4])))
			fail(col, "rule head must be 'head' or '-head'");
		pos_ += 4;
		skip_spaces();
		if (pos_ != s_.size()) fail(column(), "unexpected trailing text");
		return rule;
	}

private:
	static bool is_ident(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
	char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
	int column() const { return static_cast<int>(pos_) + 1; }
	void skip_spaces() {
		while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\r')) ++pos_;
	}
	[[noreturn]] void fail(int col, const std::string& msg) const { throw ParseError(line_, col, msg); }

	Literal literal() {
		int col = column();
		Literal lit;
		if (peek() == '-') {
			lit.sign = Sign::Negative;
			++pos_;
		}
		std::size_t start = pos_;
		while (pos_ < s_.size() && is_ident(s_[pos_])) ++pos_;
		std::string_view name = s_.substr(start, pos_ - start);
		if (name.empty()) fail(col, "expected a literal");
		if (name.size() < 2 || name[0] != 'a' ||
		    !std::all_of(name.begin() + 1, name.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
		    name[1] == '0') {
			fail(col, "unknown atom '" + std::string(name) + "'");
		}
		if (name.size() > 4) fail(col, "unknown atom '" + std::string(name) + "'");
		int k = std::stoi(std::string(name.substr(1)));
		if (k > n_atoms_) fail(col, "unknown atom '" + std::string(name) + "'");
		lit.atom.index = k - 1;
		return lit;
	}

	void keyword(std::string_view kw) {
		int col = column();
		if (s_.substr(pos_, kw.size()) != kw) fail(col, "expected ',' or '" + std::string(kw) + "'");
		pos_ += kw.size();
		if (pos_ < s_.size() && is_ident(s_[pos_])) fail(col, "expected '" + std::string(kw) + "'");
	}

	std::string_view s_;
	std::size_t pos_ = 0;
	int line_;
	int n_atoms_;
};

} // namespace

Rule parse_rule(std::string_view line, int n_atoms) { return LineParser(line, 1, n_atoms).parse(); }

Policy parse_policy(std::string_view text, int n_atoms) {
	std::vector<Rule> rules;
	int line_no = 0;
	std::size_t pos = 0;
	while (pos <= text.size()) {
		std::size_t end = text.find('\n', pos);
		if (end == std::string_view::npos) end = text.size();
		std::string_view line = text.substr(pos, end - pos);
		++line_no;
		bool blank = std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
		if (!blank) rules.push_back(LineParser(line, line_no, n_atoms).parse());
		pos = end + 1;
	}
	return Policy(std::move(rules));
}

std::string render_policy(const Policy& policy) {
	std::string out;
	for (const Rule& r : policy.rules()) {
		out += r.to_string();
		out += '\n';
	}
	return out;
}

Decision deduce(const Policy& policy, const Context& ctx) {
	const auto& rules = policy.rules();
	for (auto it = rules.rbegin(); it != rules.rend(); ++it)
		if (ctx.satisfies(*it)) return decision_of(it->head);
	return Decision::Abstain;
}

Policy induce(const Policy& policy, const Rule& rule, int n_atoms) {
	validate_rule(rule, n_atoms);
	std::vector<Rule> rules = policy.rules();
	rules.push_back(rule);
	return Policy(std::move(rules));
}

bool is_homogeneous(const Rule& rule) {
	return std::all_of(rule.body.begin(), rule.body.end(),
	                   [&](const Literal& l) { return l.sign == rule.body.front().sign; });
}

// ---------------------------------------------------------------------------

Formula Formula::falsum() { return Formula{}; }

Formula Formula::truth() {
	Formula f;
	f.kind_ = Kind::True;
	return f;
}

Formula Formula::literal(Literal lit) {
	Formula f;
	f.kind_ = Kind::Lit;
	f.lit_ = lit;
	return f;
}

namespace {

Formula fold(std::vector<Formula> children, Formula::Kind op) {
	using K = Formula::Kind;
	const K absorbing = op == K::And ? K::False : K::True;
	const K neutral = op == K::And ? K::True : K::False;
	std::vector<Formula> kept;
	kept.reserve(children.size());
	for (Formula& c : children) {
		if (c.kind() == absorbing) return absorbing == K::True ? Formula::truth() : Formula::falsum();
		if (c.kind() == neutral) continue;
		if (c.kind() == op) {
			for (const Formula& g : c.children()) kept.push_back(g);
			continue;
		}
		kept.push_back(std::move(c));
	}
	if (kept.empty()) return neutral == K::True ? Formula::truth() : Formula::falsum();
	if (kept.size() == 1) return std::move(kept.front());
	return op == K::And ? Formula::conj(std::move(kept)) : Formula::disj(std::move(kept));
}

} // namespace

Formula Formula::conj(std::vector<Formula> children) {
	bool flat = children.size() >= 2 && std::none_of(children.begin(), children.end(), [](const Formula& c) {
		return c.kind_ == Kind::True || c.kind_ == Kind::False || c.kind_ == Kind::And;
	});
	if (!flat) return fold(std::move(children), Kind::And);
	Formula f;
	f.kind_ = Kind::And;
	f.children_ = std::move(children);
	return f;
}

Formula Formula::disj(std::vector<Formula> children) {
	bool flat = children.size() >= 2 && std::none_of(children.begin(), children.end(), [](const Formula& c) {
		return c.kind_ == Kind::True || c.kind_ == Kind::False || c.kind_ == Kind::Or;
	});
	if (!flat) return fold(std::move(children), Kind::Or);
	Formula f;
	f.kind_ = Kind::Or;
	f.children_ = std::move(children);
	return f;
}

bool Formula::evaluate(const Context& ctx) const {
	switch (kind_) {
	case Kind::False: return false;
	case Kind::True: return true;
	case Kind::Lit: return ctx.satisfies(lit_);
	case Kind::And:
		return std::all_of(children_.begin(), children_.end(), [&](const Formula& c) { return c.evaluate(ctx); });
	case Kind::Or:
		return std::any_of(children_.begin(), children_.end(), [&](const Formula& c) { return c.evaluate(ctx); });
	}
	return false;
}

Formula Formula::negated() const {
	switch (kind_) {
	case Kind::False: return truth();
	case Kind::True: return falsum();
	case Kind::Lit: return literal(Literal{lit_.atom, !lit_.sign});
	case Kind::And:
	case Kind::Or: {
		std::vector<Formula> neg;
		neg.reserve(children_.size());
		for (const Formula& c : children_) neg.push_back(c.negated());
		return kind_ == Kind::And ? disj(std::move(neg)) : conj(std::move(neg));
	}
	}
	return falsum();
}

std::string Formula::to_string() const {
	switch (kind_) {
	case Kind::False: return "false";
	case Kind::True: return "true";
	case Kind::Lit: return lit_.to_string();
	case Kind::And:
	case Kind::Or: {
		std::string out = "(";
		for (std::size_t i = 0; i < children_.size(); ++i) {
			if (i) out += kind_ == Kind::And ? " & " : " | ";
			out += children_[i].to_string();
		}
		return out + ")";
	}
	}
	return "?";
}

namespace {

Formula body_conj(const Rule& r) {
	std::vector<Formula> lits;
	lits.reserve(r.body.size());
	for (const Literal& l : r.body) lits.push_back(Formula::literal(l));
	return Formula::conj(std::move(lits));
}

} // namespace

Formula abduce(const Policy& policy, Decision label) {
	if (label == Decision::Abstain) throw std::invalid_argument("abduce: label must be head or -head");
	const Sign want = label == Decision::HeadPositive ? Sign::Positive : Sign::Negative;
	const auto& rules = policy.rules();
	std::vector<Formula> proofs;
	for (std::size_t i = 0; i < rules.size(); ++i) {
		if (rules[i].head != want) continue;
		std::vector<Formula> parts{body_conj(rules[i])};
		for (std::size_t j = i + 1; j < rules.size(); ++j)
			if (rules[j].head != want) parts.push_back(body_conj(rules[j]).negated());
		proofs.push_back(Formula::conj(std::move(parts)));
	}
	return Formula::disj(std::move(proofs));
}

Formula abstain_formula(const Policy& policy) {
	std::vector<Formula> parts;
	for (const Rule& r : policy.rules()) parts.push_back(body_conj(r).negated());
	return Formula::conj(std::move(parts));
}

} // namespace nesy
