#include "nesy/diagram.h"

#include "nesy/hash.h"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace nesy {

Diagram::Diagram(int num_vars, std::vector<Node> nodes, NodeId root)
    : num_vars_(num_vars), nodes_(std::move(nodes)), root_(root) {}

bool Diagram::evaluate(const Context& ctx) const {
	NodeId n = root_;
	while (n > kTrue) n = ctx.sign(nodes_[n].var) == Sign::Positive ? nodes_[n].high : nodes_[n].low;
	return n == kTrue;
}

std::uint64_t Diagram::model_count() const {
	// counts[k] = models over variables var(k)..n-1
	std::vector<std::uint64_t> counts(nodes_.size());
	auto level = [&](NodeId id) { return id <= kTrue ? num_vars_ : nodes_[id].var; };
	counts[kFalse] = 0;
	counts[kTrue] = 1;
	for (NodeId k = 2; k < nodes_.size(); ++k) {
		const Node& n = nodes_[k];
		counts[k] = (counts[n.low] << (level(n.low) - n.var - 1)) + (counts[n.high] << (level(n.high) - n.var - 1));
	}
	return counts[root_] << level(root_);
}

namespace {

struct TripleHash {
	std::size_t operator()(const Diagram::Node& n) const {
		return splitmix64((std::uint64_t(n.var) << 48) ^ (std::uint64_t(n.low) << 24) ^ n.high);
	}
};

// Hash-consing builder; node ids here are builder-local.
class Builder {
public:
	explicit Builder(int num_vars) : num_vars_(num_vars) {
		nodes_.push_back({num_vars, Diagram::kFalse, Diagram::kFalse});
		nodes_.push_back({num_vars, Diagram::kTrue, Diagram::kTrue});
	}

	NodeId make(int var, NodeId low, NodeId high) {
		if (low == high) return low;
		Diagram::Node key{var, low, high};
		auto [it, inserted] = unique_.try_emplace(key, static_cast<NodeId>(nodes_.size()));
		if (inserted) nodes_.push_back(key);
		return it->second;
	}

	NodeId literal(const Literal& l) {
		if (l.atom.index < 0 || l.atom.index >= num_vars_) throw std::invalid_argument("formula atom outside diagram variables");
		return l.sign == Sign::Positive ? make(l.atom.index, Diagram::kFalse, Diagram::kTrue)
		                                : make(l.atom.index, Diagram::kTrue, Diagram::kFalse);
	}

	NodeId apply(bool is_and, NodeId a, NodeId b) {
		if (is_and) {
			if (a == Diagram::kFalse || b == Diagram::kFalse) return Diagram::kFalse;
			if (a == Diagram::kTrue) return b;
			if (b == Diagram::kTrue) return a;
		} else {
			if (a == Diagram::kTrue || b == Diagram::kTrue) return Diagram::kTrue;
			if (a == Diagram::kFalse) return b;
			if (b == Diagram::kFalse) return a;
		}
		if (a == b) return a;
		if (a > b) std::swap(a, b);
		std::uint64_t key = (std::uint64_t(a) << 33) | (std::uint64_t(b) << 1) | (is_and ? 1u : 0u);
		if (auto it = memo_.find(key); it != memo_.end()) return it->second;
		const Diagram::Node na = nodes_[a];
		const Diagram::Node nb = nodes_[b];
		const int var = std::min(na.var, nb.var);
		NodeId a_lo = na.var == var ? na.low : a, a_hi = na.var == var ? na.high : a;
		NodeId b_lo = nb.var == var ? nb.low : b, b_hi = nb.var == var ? nb.high : b;
		NodeId lo = apply(is_and, a_lo, b_lo);
		NodeId hi = apply(is_and, a_hi, b_hi);
		NodeId r = make(var, lo, hi);
		memo_.emplace(key, r);
		return r;
	}

	NodeId build(const Formula& f) {
		using K = Formula::Kind;
		switch (f.kind()) {
		case K::False: return Diagram::kFalse;
		case K::True: return Diagram::kTrue;
		case K::Lit: return literal(f.lit());
		case K::And:
		case K::Or: {
			const bool is_and = f.kind() == K::And;
			NodeId acc = is_and ? Diagram::kTrue : Diagram::kFalse;
			for (const Formula& c : f.children()) acc = apply(is_and, acc, build(c));
			return acc;
		}
		}
		return Diagram::kFalse;
	}

	// Renumbers the sub-diagram under `root` in post-order, low child first.
	Diagram extract(NodeId root) const {
		std::vector<Diagram::Node> out{{num_vars_, Diagram::kFalse, Diagram::kFalse},
		                               {num_vars_, Diagram::kTrue, Diagram::kTrue}};
		std::vector<NodeId> remap(nodes_.size(), ~NodeId{0});
		remap[Diagram::kFalse] = Diagram::kFalse;
		remap[Diagram::kTrue] = Diagram::kTrue;
		// Iterative post-order DFS.
		std::vector<std::pair<NodeId, int>> stack{{root, 0}};
		while (!stack.empty()) {
			auto& [id, state] = stack.back();
			if (remap[id] != ~NodeId{0}) {
				stack.pop_back();
				continue;
			}
			const Diagram::Node& n = nodes_[id];
			if (state == 0) {
				state = 1;
				stack.emplace_back(n.low, 0);
			} else if (state == 1) {
				state = 2;
				stack.emplace_back(n.high, 0);
			} else {
				remap[id] = static_cast<NodeId>(out.size());
				out.push_back({n.var, remap[n.low], remap[n.high]});
				stack.pop_back();
			}
		}
		return Diagram(num_vars_, std::move(out), remap[root]);
	}

private:
	int num_vars_;
	std::vector<Diagram::Node> nodes_;
	std::unordered_map<Diagram::Node, NodeId, TripleHash> unique_;
	std::unordered_map<std::uint64_t, NodeId> memo_;
};

} // namespace

Diagram compile(const Formula& formula, int num_vars) {
	if (num_vars < 0 || num_vars > kMaxAtoms) throw std::invalid_argument("compile: variable count out of range");
	Builder b(num_vars);
	return b.extract(b.build(formula));
}

void dump(const Diagram& d, std::ostream& out) {
	const auto& nodes = d.nodes();
	for (std::size_t k = 0; k < nodes.size(); ++k)
		out << k << ' ' << nodes[k].var << ' ' << nodes[k].low << ' ' << nodes[k].high << '\n';
}

// ---------------------------------------------------------------------------

WmcGraph::WmcGraph(const Diagram& d) : num_vars_(d.num_vars()), root_(d.root()) {
	const auto& nodes = d.nodes();
	var_.reserve(nodes.size());
	low_.reserve(nodes.size());
	high_.reserve(nodes.size());
	for (const auto& n : nodes) {
		var_.push_back(n.var);
		low_.push_back(n.low);
		high_.push_back(n.high);
	}
}

double WmcGraph::wmc(std::span<const double> p) const {
	if (p.size() != static_cast<std::size_t>(num_vars_)) throw std::invalid_argument("wmc: probability vector size mismatch");
	if (root_ <= 1) return root_ == 1 ? 1.0 : 0.0;
	std::vector<double> value(var_.size());
	value[0] = 0.0;
	value[1] = 1.0;
	for (std::size_t k = 2; k <= root_; ++k) {
		const double pk = p[var_[k]];
		value[k] = pk * value[high_[k]] + (1.0 - pk) * value[low_[k]];
	}
	return value[root_];
}

double WmcGraph::wmc_with_gradient(std::span<const double> p, std::span<double> grad) const {
	if (p.size() != static_cast<std::size_t>(num_vars_) || grad.size() != p.size())
		throw std::invalid_argument("wmc: probability vector size mismatch");
	std::fill(grad.begin(), grad.end(), 0.0);
	if (root_ <= 1) return root_ == 1 ? 1.0 : 0.0;
	const std::size_t n = root_ + 1;
	std::vector<double> value(2 * n);
	double* adj = value.data() + n;
	value[0] = 0.0;
	value[1] = 1.0;
	for (std::size_t k = 2; k < n; ++k) {
		const double pk = p[var_[k]];
		value[k] = pk * value[high_[k]] + (1.0 - pk) * value[low_[k]];
	}
	adj[root_] = 1.0;
	for (std::size_t k = root_; k >= 2; --k) {
		const double a = adj[k];
		if (a == 0.0) continue;
		const double pk = p[var_[k]];
		grad[var_[k]] += a * (value[high_[k]] - value[low_[k]]);
		adj[high_[k]] += a * pk;
		adj[low_[k]] += a * (1.0 - pk);
	}
	return value[root_];
}

SemanticLoss semantic_loss(const WmcGraph& graph, std::span<const double> p, std::span<double> grad) {
	SemanticLoss out;
	out.wmc = graph.wmc_with_gradient(p, grad);
	const double denom = std::max(out.wmc, kLossEpsilon);
	out.clamped = out.wmc < kLossEpsilon;
	out.loss = -std::log(denom);
	for (double& g : grad) g = -g / denom;
	return out;
}

double wmc(const Diagram& d, std::span<const double> p) { return WmcGraph(d).wmc(p); }

SemanticLoss semantic_loss(const Diagram& d, std::span<const double> p, std::span<double> grad) {
	return semantic_loss(WmcGraph(d), p, grad);
}

// ---------------------------------------------------------------------------

std::shared_ptr<const WmcGraph> CompilationCache::get_or_compile(const Policy& policy, Decision label, int n_atoms) {
	if (label == Decision::Abstain) throw std::invalid_argument("get_or_compile: label must be head or -head");
	auto build = [&] {
		++compilations_;
		return std::make_shared<const WmcGraph>(compile(abduce(policy, label), n_atoms));
	};
	if (!enabled_) return build();
	const std::uint64_t key =
	    splitmix64(policy.fingerprint() ^ (label == Decision::HeadPositive ? 0x2545f4914f6cdd1dull : 0ull)) ^
	    static_cast<std::uint64_t>(n_atoms);
	if (auto it = entries_.find(key); it != entries_.end()) {
		assert(it->second.text == render_policy(policy) && it->second.label == label && it->second.n_atoms == n_atoms);
		++hits_;
		return it->second.graph;
	}
	Entry e;
	e.graph = build();
#ifndef NDEBUG
	e.text = render_policy(policy);
	e.label = label;
	e.n_atoms = n_atoms;
#endif
	entries_.emplace(key, e);
	return e.graph;
}

void CompilationCache::clear() {
	entries_.clear();
}

} // namespace nesy
