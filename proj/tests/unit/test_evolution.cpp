#include "doctest.h"
#include "oracles.h"

#include "nesy/evolution.h"

#include <map>
#include <numeric>
#include <sstream>

using namespace nesy;

namespace {

constexpr Status C = Status::Correct, A = Status::Abstain, W = Status::Wrong;

std::vector<FitnessReport> reports_for(std::initializer_list<long> raws, std::size_t n = 100, double t = 0.0) {
	std::vector<FitnessReport> out;
	for (long r : raws) out.push_back({r, static_cast<double>(r) / static_cast<double>(n), classify(r, n, t)});
	return out;
}

ExemplarSplits toy_splits(const Policy& target, int n, SplitSizes sizes, std::uint64_t seed) {
	auto pool = std::make_shared<const GlyphPool>(synth_glyphs(8, 0.2, seed));
	std::mt19937_64 rng(seed);
	return build_exemplar_set(target, n, sizes, pool, pool, rng);
}

Organism organism_with(const Policy& p, int n) {
	Net net = Net::xavier(3);
	auto adam = NetAdam::for_params(net.params());
	return Organism(1, 0, {}, n, p, std::move(net), std::move(adam));
}

} // namespace

TEST_CASE("score matrix") {
	CHECK(score(C, C) == 0);
	CHECK(score(C, A) == -1);
	CHECK(score(C, W) == -1);
	CHECK(score(A, C) == 1);
	CHECK(score(A, A) == 0);
	CHECK(score(A, W) == -1);
	CHECK(score(W, C) == 1);
	CHECK(score(W, A) == 1);
	CHECK(score(W, W) == 0);
}

TEST_CASE("relative fitness of a worked example") {
	using D = Decision;
	const std::vector<D> labels{D::HeadPositive, D::HeadNegative, D::HeadPositive};
	const std::vector<D> parent{D::HeadPositive, D::Abstain, D::HeadNegative};  // C A W
	const std::vector<D> child = labels;                                           // C C C
	FitnessReport r = relative_fitness(parent, child, labels);
	CHECK(r.raw == 2);
	CHECK(r.normalized == doctest::Approx(2.0 / 3.0));
	CHECK(r.group == FitnessGroup::Beneficial);
	CHECK(relative_fitness(child, parent, labels).raw == -2);
	CHECK(relative_fitness(parent, parent, labels).group == FitnessGroup::Neutral);
	CHECK_THROWS(relative_fitness(parent, std::vector<D>{D::Abstain}, labels));
}

TEST_CASE("beneficial selection is proportional to score^k") {
	auto r = reports_for({1, 2, -1, 0});
	auto p = selection_probabilities(r, 2.0);
	CHECK(p[0] == doctest::Approx(0.2));
	CHECK(p[1] == doctest::Approx(0.8));
	CHECK(p[2] == 0.0);
	CHECK(p[3] == 0.0);
	CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));

	std::mt19937_64 rng(1);
	int picks1 = 0;
	for (int i = 0; i < 10000; ++i) {
		const auto s = select_fittest(r, 2.0, rng);
		REQUIRE((s == 0 || s == 1));
		picks1 += s == 1;
	}
	CHECK(std::abs(picks1 / 10000.0 - 0.8) < 0.02);
}

TEST_CASE("neutral selection is uniform") {
	auto r = reports_for({0, 0, -3, 0, 0});
	std::mt19937_64 rng(7);
	std::map<std::size_t, int> counts;
	const int draws = 10000;
	for (int i = 0; i < draws; ++i) ++counts[select_fittest(r, 2.0, rng)];
	CHECK(counts.count(2) == 0);
	double chi2 = 0.0;
	for (std::size_t i : {0u, 1u, 3u, 4u}) {
		const double e = draws / 4.0;
		chi2 += (counts[i] - e) * (counts[i] - e) / e;
	}
	CHECK(chi2 < 11.345);  // chi-square 3 dof, 99%
}

TEST_CASE("detrimental fallback picks the best score") {
	auto r = reports_for({-3, -1, -5});
	std::mt19937_64 rng(2);
	for (int i = 0; i < 100; ++i) CHECK(select_fittest(r, 2.0, rng) == 1);
	CHECK_THROWS(selection_probabilities(std::vector<FitnessReport>{}, 2.0));
}

TEST_CASE("groups partition the population") {
	std::mt19937_64 rng(5);
	std::uniform_int_distribution<long> d(-20, 20);
	for (double t : {0.0, 0.05}) {
		for (int trial = 0; trial < 100; ++trial) {
			const long raw = d(rng);
			const auto g = classify(raw, 100, t);
			const double bound = t * 100;
			const int in = (raw > bound) + (std::abs(raw) <= bound) + (raw < -bound);
			CHECK(in == 1);
			if (raw > bound) CHECK(g == FitnessGroup::Beneficial);
			else if (raw < -bound) CHECK(g == FitnessGroup::Detrimental);
			else CHECK(g == FitnessGroup::Neutral);
		}
	}
	CHECK(classify(0, 100, 0.0) == FitnessGroup::Neutral);
	CHECK(classify(1, 100, 0.0) == FitnessGroup::Beneficial);
	CHECK(classify(5, 100, 0.05) == FitnessGroup::Neutral);
}

TEST_CASE("population size and mutation plan") {
	std::mt19937_64 rng(9);
	Organism empty = organism_with(Policy{}, 4);
	auto pop = spawn_population(empty, 5, rng, 10);
	CHECK(pop.size() == 22);
	CHECK(pop.front().id() == 10);
	CHECK(pop.back().id() == 31);

	const Policy eight = parse_policy("a1, a2, a3, a4, a5, a6, a7, a8 implies head", 8);
	Organism big = organism_with(eight, 8);
	auto plan = plan_mutations(eight, 8, 5, rng);
	CHECK(plan.size() == 38);

	// A single-literal latest rule cannot be simplified further.
	CHECK(plan_mutations(parse_policy("a1 implies head", 4), 4, 5, rng).size() == 22);

	auto offspring = spawn_population(big, 5, rng, 100);
	REQUIRE(offspring.size() == 38);
	int reinit_differs = 0, inherit_same = 0, nrw = 0, npw = 0;
	for (const auto& o : offspring) {
		CHECK(o.parent_id() == big.id());
		if (o.tag().neural == NeuralMutation::Inherit) {
			++npw;
			inherit_same += o.net() == big.net();
		} else {
			++nrw;
			reinit_differs += !(o.net() == big.net());
		}
		switch (o.tag().symbolic) {
		case SymbolicMutation::Clone: CHECK(o.policy() == eight); break;
		case SymbolicMutation::Add:
			CHECK(o.policy().size() == 2);
			CHECK(o.policy().latest().body.size() == 8);
			break;
		case SymbolicMutation::Simplify:
			CHECK(o.policy().size() == 2);
			CHECK(o.policy().latest().body.size() == 7);
			CHECK(o.policy().latest().head == Sign::Positive);
			break;
		default: FAIL("unexpected tag");
		}
	}
	CHECK(npw == 19);
	CHECK(nrw == 19);
	CHECK(inherit_same == 19);
	CHECK(reinit_differs == 19);
}

TEST_CASE("S+ adds a total-context rule on top") {
	MutationSpec m{.symbolic = SymbolicMutation::Add};
	m.context = Context(3, 0b101);
	m.head = Sign::Negative;
	const Policy p = mutate_policy(parse_policy("a1 implies head", 3), m, 3);
	CHECK(render_policy(p) == "a1 implies head\na1, -a2, a3 implies -head\n");
	CHECK(deduce(p, Context(3, 0b101)) == Decision::HeadNegative);
	CHECK(deduce(p, Context(3, 0b001)) == Decision::HeadPositive);
}

TEST_CASE("perfect perception solves a single-rule target") {
	const int n = 4;
	const Policy target = parse_policy("a1, -a3 implies head", n);
	int solved = 0;
	for (std::uint64_t s = 0; s < 20; ++s) {
		auto data = toy_splits(target, n, {200, 200, 200}, 40 + s);
		EvolutionConfig cfg;
		cfg.maxgen = 25;
		cfg.stub = perfect_perception();
		Lineage l = evolve(cfg, data, s);
		solved += l.fittest().val.correct >= 0.99;
	}
	CHECK(solved >= 19);
}

TEST_CASE("maxgen 0 keeps only the seed organism") {
	const Policy target = parse_policy("a1 implies head\na2 implies -head", 2);
	auto data = toy_splits(target, 2, {50, 50, 50}, 1);
	EvolutionConfig cfg;
	cfg.maxgen = 0;
	Lineage l = evolve(cfg, data, 1);
	REQUIRE(l.entries.size() == 1);
	CHECK(l.entries[0].organism.policy().empty());
	CHECK(l.entries[0].val == PerformanceTriple{0.0, 1.0, 0.0});
	CHECK(l.entries[0].test == PerformanceTriple{0.0, 1.0, 0.0});
	std::ostringstream out;
	write_lineage_jsonl(out, l);
	const std::string text = out.str();
	CHECK(std::count(text.begin(), text.end(), '\n') == 1);
}

TEST_CASE("lineage chain, early stop and worker determinism") {
	const int n = 3;
	const Policy target = parse_policy("a1 implies head\na2, -a3 implies -head", n);
	auto data = toy_splits(target, n, {200, 100, 100}, 2);
	EvolutionConfig cfg;
	cfg.maxgen = 3;
	cfg.train.epochs = 1;
	cfg.train.batch_size = 100;
	cfg.early_stop = 2.0;  // never
	Lineage a = evolve(cfg, data, 11);
	REQUIRE(a.entries.size() == 4);
	CHECK_FALSE(a.early_stopped);
	for (std::size_t i = 1; i < a.entries.size(); ++i) {
		CHECK(a.entries[i].generation == static_cast<int>(i));
		CHECK(a.entries[i].organism.parent_id() == a.entries[i - 1].organism.id());
		const Policy& parent = a.entries[i - 1].organism.policy();
		const std::size_t drops = parent.empty() || parent.latest().body.size() == 1 ? 0 : parent.latest().body.size();
		CHECK(a.entries[i].population == 2 * (1 + 2 * 5 + drops));
		CHECK(a.entries[i].beneficial + a.entries[i].neutral + a.entries[i].detrimental == a.entries[i].population);
	}
	cfg.workers = 3;
	Lineage b = evolve(cfg, data, 11);
	std::ostringstream ja, jb;
	write_lineage_jsonl(ja, a);
	write_lineage_jsonl(jb, b);
	CHECK(ja.str() == jb.str());
	for (std::size_t i = 0; i < a.entries.size(); ++i) CHECK(a.entries[i].organism.net() == b.entries[i].organism.net());

	cfg.workers = 0;
	cfg.stub = perfect_perception();
	cfg.early_stop = 0.99;
	cfg.maxgen = 50;
	Lineage c = evolve(cfg, data, 3);
	if (c.fittest().val.correct >= 0.99) {
		CHECK(c.early_stopped);
		for (std::size_t i = 0; i + 1 < c.entries.size(); ++i) CHECK(c.entries[i].val.correct < 0.99);
	}
}

TEST_CASE("configuration errors") {
	const Policy target = parse_policy("a1 implies head", 1);
	auto data = toy_splits(target, 1, {10, 10, 10}, 1);
	EvolutionConfig cfg;
	cfg.maxgen = -1;
	CHECK_THROWS_AS(evolve(cfg, data, 1), std::invalid_argument);
	cfg.maxgen = 1;
	cfg.k = 0;
	CHECK_THROWS_AS(evolve(cfg, data, 1), std::invalid_argument);
}
