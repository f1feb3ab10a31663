#include "nesy/evolution.h"

#include "nesy/hash.h"
#include "nesy/pool.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace nesy {

std::vector<MutationSpec> plan_mutations(const Policy& parent, int n_atoms, int n_splus, std::mt19937_64& rng) {
	if (n_atoms <= 0 || n_atoms > kMaxAtoms) throw std::invalid_argument("plan_mutations: bad atom count");
	if (n_splus < 0) throw std::invalid_argument("plan_mutations: n_splus must be non-negative");
	std::vector<MutationSpec> symbolic;
	symbolic.push_back({.symbolic = SymbolicMutation::Clone});
	const std::uint32_t mask = (1u << n_atoms) - 1u;
	for (int i = 0; i < n_splus; ++i) {
		const Context x(n_atoms, static_cast<std::uint32_t>(rng()) & mask);
		for (Sign head : {Sign::Positive, Sign::Negative}) {
			MutationSpec m{.symbolic = SymbolicMutation::Add};
			m.context = x;
			m.head = head;
			symbolic.push_back(m);
		}
	}
	if (!parent.empty() && parent.latest().body.size() > 1) {
		for (std::size_t j = 0; j < parent.latest().body.size(); ++j) {
			MutationSpec m{.symbolic = SymbolicMutation::Simplify};
			m.drop_index = static_cast<int>(j);
			symbolic.push_back(m);
		}
	}
	std::vector<MutationSpec> out;
	out.reserve(2 * symbolic.size());
	for (const auto& s : symbolic) {
		MutationSpec inherit = s;
		inherit.neural = NeuralMutation::Inherit;
		out.push_back(inherit);
		MutationSpec reinit = s;
		reinit.neural = NeuralMutation::Reinit;
		reinit.reinit_seed = rng();
		out.push_back(reinit);
	}
	return out;
}

Policy mutate_policy(const Policy& parent, const MutationSpec& m, int n_atoms) {
	switch (m.symbolic) {
	case SymbolicMutation::Seed:
	case SymbolicMutation::Clone: return parent;
	case SymbolicMutation::Add: {
		if (m.context.size() != n_atoms) throw std::invalid_argument("S+ context must assign every atom");
		Rule r;
		r.head = m.head;
		for (int i = 0; i < n_atoms; ++i) r.body.push_back({Atom{i}, m.context.sign(i)});
		return induce(parent, r, n_atoms);
	}
	case SymbolicMutation::Simplify: {
		if (parent.empty()) throw std::invalid_argument("S- needs a nonempty parent policy");
		const Rule& latest = parent.latest();
		if (m.drop_index < 0 || static_cast<std::size_t>(m.drop_index) >= latest.body.size())
			throw std::invalid_argument("S- literal index out of range");
		Rule r;
		r.head = latest.head;
		for (std::size_t j = 0; j < latest.body.size(); ++j)
			if (static_cast<int>(j) != m.drop_index) r.body.push_back(latest.body[j]);
		return induce(parent, r, n_atoms);
	}
	}
	return parent;
}

std::vector<Organism> spawn_population(const Organism& parent, int n_splus, std::mt19937_64& rng,
                                       std::uint64_t first_id, bool cache_enabled) {
	const auto plan = plan_mutations(parent.policy(), parent.n_atoms(), n_splus, rng);
	std::vector<Organism> out;
	out.reserve(plan.size());
	std::uint64_t id = first_id;
	for (const auto& m : plan) {
		Policy policy = mutate_policy(parent.policy(), m, parent.n_atoms());
		if (m.neural == NeuralMutation::Inherit) {
			out.emplace_back(id++, parent.id(), m.tag(), parent.n_atoms(), std::move(policy), parent.net(), parent.adam(),
			                 cache_enabled);
		} else {
			Net net = Net::xavier(m.reinit_seed, parent.net().shape());
			auto adam = NetAdam::for_params(net.params());
			out.emplace_back(id++, parent.id(), m.tag(), parent.n_atoms(), std::move(policy), std::move(net),
			                 std::move(adam), cache_enabled);
		}
	}
	return out;
}

// ---------------------------------------------------------------------------
// Fitness and selection

Status status_of(Decision decision, Decision label) {
	if (decision == Decision::Abstain) return Status::Abstain;
	return decision == label ? Status::Correct : Status::Wrong;
}

int score(Status parent, Status offspring) {
	static constexpr int kMatrix[3][3] = {
	    // offspring:  C   A   W
	    {0, -1, -1},  // parent C
	    {+1, 0, -1},  // parent A
	    {+1, +1, 0},  // parent W
	};
	return kMatrix[static_cast<int>(parent)][static_cast<int>(offspring)];
}

char group_letter(FitnessGroup g) {
	switch (g) {
	case FitnessGroup::Beneficial: return 'b';
	case FitnessGroup::Neutral: return 'n';
	case FitnessGroup::Detrimental: return 'd';
	}
	return '?';
}

FitnessGroup classify(long raw, std::size_t n, double t) {
	const double bound = t * static_cast<double>(n);
	const double r = static_cast<double>(raw);
	if (r > bound) return FitnessGroup::Beneficial;
	if (std::abs(r) <= bound) return FitnessGroup::Neutral;
	return FitnessGroup::Detrimental;
}

FitnessReport relative_fitness(std::span<const Decision> parent, std::span<const Decision> offspring,
                               std::span<const Decision> labels, double t) {
	if (parent.size() != offspring.size() || parent.size() != labels.size())
		throw std::invalid_argument("relative_fitness: decision sequences differ in length");
	FitnessReport r;
	for (std::size_t i = 0; i < labels.size(); ++i)
		r.raw += score(status_of(parent[i], labels[i]), status_of(offspring[i], labels[i]));
	r.normalized = labels.empty() ? 0.0 : static_cast<double>(r.raw) / static_cast<double>(labels.size());
	r.group = classify(r.raw, labels.size(), t);
	return r;
}

std::vector<double> selection_probabilities(std::span<const FitnessReport> reports, double k) {
	if (reports.empty()) throw std::invalid_argument("select_fittest: empty population");
	std::vector<double> p(reports.size(), 0.0);
	auto in = [&](FitnessGroup g) {
		std::vector<std::size_t> idx;
		for (std::size_t i = 0; i < reports.size(); ++i)
			if (reports[i].group == g) idx.push_back(i);
		return idx;
	};
	if (auto b = in(FitnessGroup::Beneficial); !b.empty()) {
		double total = 0.0;
		for (auto i : b) total += std::pow(static_cast<double>(reports[i].raw), k);
		for (auto i : b) p[i] = std::pow(static_cast<double>(reports[i].raw), k) / total;
		return p;
	}
	if (auto n = in(FitnessGroup::Neutral); !n.empty()) {
		for (auto i : n) p[i] = 1.0 / static_cast<double>(n.size());
		return p;
	}
	long best = reports[0].raw;
	for (const auto& r : reports) best = std::max(best, r.raw);
	std::size_t ties = 0;
	for (const auto& r : reports) ties += r.raw == best ? 1 : 0;
	for (std::size_t i = 0; i < reports.size(); ++i)
		if (reports[i].raw == best) p[i] = 1.0 / static_cast<double>(ties);
	return p;
}

std::size_t select_fittest(std::span<const FitnessReport> reports, double k, std::mt19937_64& rng) {
	const auto p = selection_probabilities(reports, k);
	// Inverse CDF with a single uniform draw; skips zero-probability entries.
	std::uniform_real_distribution<double> unif(0.0, 1.0);
	const double u = unif(rng);
	double acc = 0.0;
	std::size_t last = 0;
	for (std::size_t i = 0; i < p.size(); ++i) {
		if (p[i] <= 0.0) continue;
		last = i;
		acc += p[i];
		if (u < acc) return i;
	}
	return last;
}

// ---------------------------------------------------------------------------
// Evolution

namespace {

struct Evaluated {
	std::vector<Decision> decisions;
	PerformanceTriple val;
	StuckDiagnostics stuck;
};

GlyphProbabilities perception(const EvolutionConfig& cfg, const Organism& o, const ExemplarSet& set) {
	return cfg.stub ? perceive(*cfg.stub, set) : perceive(o.net(), set);
}

Evaluated evaluate_on(const EvolutionConfig& cfg, const Organism& o, const ExemplarSet& set) {
	Evaluated e;
	const auto probs = perception(cfg, o, set);
	e.decisions = deduce_all(o.policy(), probs, set);
	e.val = score_decisions(e.decisions, set);
	e.stuck = detect_stuck(o.policy(), probs, set);
	return e;
}

std::vector<Decision> labels_of(const ExemplarSet& set) {
	std::vector<Decision> out;
	out.reserve(set.size());
	for (const auto& inst : set.instances) out.push_back(inst.label);
	return out;
}

} // namespace

Lineage evolve(const EvolutionConfig& cfg, const ExemplarSplits& data, std::uint64_t seed,
               const GenerationCallback& on_generation) {
	if (cfg.maxgen < 0) throw std::invalid_argument("maxgen must be non-negative");
	if (cfg.n_splus < 0) throw std::invalid_argument("n_splus must be non-negative");
	if (!(cfg.k > 0.0)) throw std::invalid_argument("k must be positive");
	if (!(cfg.t >= 0.0)) throw std::invalid_argument("t must be non-negative");
	if (data.train.empty() || data.val.empty() || data.test.empty()) throw std::invalid_argument("dataset is empty");
	const int n_atoms = data.train.n_atoms;
	if (data.val.n_atoms != n_atoms || data.test.n_atoms != n_atoms)
		throw std::invalid_argument("splits disagree on the atom count");

	std::mt19937_64 rng(derive_seed(seed, {0xe701u}));
	WorkerPool pool(cfg.workers);
	const auto labels = labels_of(data.val);

	Lineage lineage;
	{
		Net net = Net::xavier(derive_seed(seed, {0, 0}), cfg.shape);
		auto adam = NetAdam::for_params(net.params());
		Organism seed_org(1, 0, MutationTag{}, n_atoms, Policy{}, std::move(net), std::move(adam), cfg.cache);
		auto ev = evaluate_on(cfg, seed_org, data.val);
		LineageEntry e{.generation = 0, .organism = std::move(seed_org)};
		e.population = 1;
		e.val = ev.val;
		e.stuck = ev.stuck;
		lineage.entries.push_back(std::move(e));
		if (on_generation) on_generation(lineage.entries.back());
	}
	std::uint64_t next_id = 2;
	std::vector<Decision> parent_decisions = evaluate_on(cfg, lineage.entries[0].organism, data.val).decisions;

	for (int gen = 1; gen <= cfg.maxgen; ++gen) {
		if (lineage.fittest().val.correct >= cfg.early_stop) {
			lineage.early_stopped = true;
			break;
		}
		auto offspring = spawn_population(lineage.fittest().organism, cfg.n_splus, rng, next_id, cfg.cache);
		next_id += offspring.size();

		std::vector<TrainReport> trained(offspring.size());
		std::vector<Evaluated> evaluated(offspring.size());
		pool.parallel_for(offspring.size(), [&](std::size_t i) {
			if (!cfg.stub) {
				trained[i] = train(offspring[i], data.train, cfg.train,
				                   derive_seed(seed, {static_cast<std::uint64_t>(gen), i}));
			}
			evaluated[i] = evaluate_on(cfg, offspring[i], data.val);
		});

		std::vector<FitnessReport> reports;
		reports.reserve(offspring.size());
		for (const auto& ev : evaluated) reports.push_back(relative_fitness(parent_decisions, ev.decisions, labels, cfg.t));
		const std::size_t pick = select_fittest(reports, cfg.k, rng);

		Organism chosen = std::move(offspring[pick]);
		chosen.release_cache();
		LineageEntry e{.generation = gen, .organism = std::move(chosen)};
		e.fitness = reports[pick];
		e.population = offspring.size();
		for (const auto& r : reports) {
			e.beneficial += r.group == FitnessGroup::Beneficial;
			e.neutral += r.group == FitnessGroup::Neutral;
			e.detrimental += r.group == FitnessGroup::Detrimental;
		}
		for (const auto& t : trained) e.diverged_offspring += t.diverged ? 1 : 0;
		e.val = evaluated[pick].val;
		e.stuck = evaluated[pick].stuck;
		const auto& tr = trained[pick];
		e.semantic_loss = tr.semantic_loss.empty() ? 0.0 : tr.semantic_loss.back();
		e.reconstruction_loss = tr.reconstruction_loss.empty() ? 0.0 : tr.reconstruction_loss.back();
		e.diverged = tr.diverged;
		parent_decisions = std::move(evaluated[pick].decisions);
		lineage.entries.push_back(std::move(e));
		if (on_generation) on_generation(lineage.entries.back());
	}
	if (!lineage.early_stopped && lineage.fittest().val.correct >= cfg.early_stop) lineage.early_stopped = true;

	pool.parallel_for(lineage.entries.size(), [&](std::size_t i) {
		auto& e = lineage.entries[i];
		e.test = evaluate(e.organism.policy(), perception(cfg, e.organism, data.test), data.test);
	});
	return lineage;
}

void write_lineage_jsonl(std::ostream& out, const Lineage& lineage) {
	auto triple = [](const PerformanceTriple& t) {
		nlohmann::ordered_json j;
		j["correct"] = t.correct;
		j["abstain"] = t.abstain;
		j["wrong"] = t.wrong;
		return j;
	};
	for (const auto& e : lineage.entries) {
		nlohmann::ordered_json j;
		j["generation"] = e.generation;
		j["id"] = e.organism.id();
		j["parent_id"] = e.organism.parent_id();
		j["mutation"] = e.organism.tag().to_string();
		j["group"] = e.generation == 0 ? std::string("-") : std::string(1, group_letter(e.fitness.group));
		j["raw_fitness"] = e.fitness.raw;
		j["normalized_fitness"] = e.fitness.normalized;
		j["population"] = e.population;
		j["beneficial"] = e.beneficial;
		j["neutral"] = e.neutral;
		j["detrimental"] = e.detrimental;
		j["val"] = triple(e.val);
		j["test"] = triple(e.test);
		j["semantic_loss"] = e.semantic_loss;
		j["reconstruction_loss"] = e.reconstruction_loss;
		j["diverged"] = e.diverged;
		j["diverged_offspring"] = e.diverged_offspring;
		j["stuck"] = e.stuck.stuck();
		j["uniform_perception"] = e.stuck.uniform_perception;
		j["latest_rule_homogeneous"] = e.stuck.latest_rule_homogeneous;
		j["positive_fraction"] = e.stuck.positive_fraction;
		auto rules = nlohmann::ordered_json::array();
		for (const auto& r : e.organism.policy().rules()) rules.push_back(r.to_string());
		j["policy"] = std::move(rules);
		out << j.dump() << '\n';
	}
}

} // namespace nesy
