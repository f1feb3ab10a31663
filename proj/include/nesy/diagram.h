// Reduced ordered binary decision diagrams over atoms a1..an (natural order),
// weighted model counting and the semantic loss.
#pragma once

#include "nesy/symbolic.h"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace nesy {

using NodeId = std::uint32_t;

/// Canonical ROBDD. Nodes 0 and 1 are the False and True terminals; decision
/// nodes follow in post-order (children before parents), so the node array is
/// already a valid evaluation order.
class Diagram {
public:
	struct Node {
		int var;  // num_vars for terminals
		NodeId low;
		NodeId high;
		friend bool operator==(const Node&, const Node&) = default;
	};

	static constexpr NodeId kFalse = 0;
	static constexpr NodeId kTrue = 1;

	Diagram() = default;
	Diagram(int num_vars, std::vector<Node> nodes, NodeId root);

	int num_vars() const { return num_vars_; }
	NodeId root() const { return root_; }
	const std::vector<Node>& nodes() const { return nodes_; }
	std::size_t decision_nodes() const { return nodes_.size() - 2; }
	bool is_false() const { return root_ == kFalse; }
	bool is_true() const { return root_ == kTrue; }
	bool is_constant() const { return root_ <= kTrue; }

	bool evaluate(const Context& ctx) const;
	/// Number of satisfying total assignments over num_vars variables.
	std::uint64_t model_count() const;

	friend bool operator==(const Diagram&, const Diagram&) = default;

private:
	int num_vars_ = 0;
	std::vector<Node> nodes_{{0, kFalse, kFalse}, {0, kTrue, kTrue}};
	NodeId root_ = kFalse;
};

/// Compiles an NNF formula over atoms a1..a<num_vars>. Logically equivalent
/// formulas yield identical diagrams.
Diagram compile(const Formula& formula, int num_vars);

/// One node per line, "id var low high", in node order (terminals first,
/// with var = num_vars).
void dump(const Diagram& d, std::ostream& out);

/// Flattened evaluation tape of a diagram. Immutable, shareable.
class WmcGraph {
public:
	explicit WmcGraph(const Diagram& d);

	int num_vars() const { return num_vars_; }
	std::size_t size() const { return var_.size(); }
	bool is_false() const { return root_ == 0; }
	bool is_true() const { return root_ == 1; }
	bool is_constant() const { return root_ <= 1; }

	/// Weighted model count with weight p[i] for a_i positive, 1 - p[i] otherwise.
	double wmc(std::span<const double> p) const;
	/// Forward pass followed by a reverse pass; returns the WMC and writes
	/// dWMC/dp into `grad` (size num_vars, overwritten).
	double wmc_with_gradient(std::span<const double> p, std::span<double> grad) const;

private:
	int num_vars_;
	NodeId root_;
	// Slot 0 and 1 hold the terminal values; node k occupies slot k.
	std::vector<int> var_;
	std::vector<NodeId> low_;
	std::vector<NodeId> high_;
};

inline constexpr double kLossEpsilon = 1e-12;

struct SemanticLoss {
	double loss = 0.0;
	double wmc = 0.0;
	/// True when the WMC fell below kLossEpsilon (label unreachable).
	bool clamped = false;
};

/// loss = -ln(max(wmc, eps)); grad[i] = -(dwmc/dp_i) / max(wmc, eps).
SemanticLoss semantic_loss(const WmcGraph& graph, std::span<const double> p, std::span<double> grad);
double wmc(const Diagram& d, std::span<const double> p);
SemanticLoss semantic_loss(const Diagram& d, std::span<const double> p, std::span<double> grad);

/// Compiled graphs per (policy fingerprint, label). Confined to one training
/// task; not thread-safe. When disabled every lookup compiles afresh.
class CompilationCache {
public:
	explicit CompilationCache(bool enabled = true) : enabled_(enabled) {}

	std::shared_ptr<const WmcGraph> get_or_compile(const Policy& policy, Decision label, int n_atoms);

	bool enabled() const { return enabled_; }
	std::size_t compilations() const { return compilations_; }
	std::size_t hits() const { return hits_; }
	std::size_t size() const { return entries_.size(); }
	void clear();

private:
	struct Entry {
		std::shared_ptr<const WmcGraph> graph;
#ifndef NDEBUG
		std::string text;
		Decision label;
		int n_atoms;
#endif
	};

	bool enabled_;
	std::size_t compilations_ = 0;
	std::size_t hits_ = 0;
	std::unordered_map<std::uint64_t, Entry> entries_;
};

} // namespace nesy
