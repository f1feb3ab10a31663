// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr, artifacts under the output directory (argv[1], default
// ./acceptance_out). `--only 1,4,6` restricts the run to some criteria;
// 7 through 10 reuse the criterion 6 experiment and pull it in.

#include "oracles.h"

#include "nesy/baseline.h"
#include "nesy/harness.h"
#include "nesy/hash.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

using namespace nesy;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
	return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Tolerances and gates.
constexpr double kWmcTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kChainTol = 1e-3;
constexpr double kAbduceSeconds = 60.0;
constexpr double kMinCacheSpeedup = 2.0;
constexpr double kMinMedianCorrect = 0.90;
constexpr double kMaxMedianWrong = 0.10;
constexpr double kMinSettledFraction = 0.80;
constexpr double kMinBaselineAccuracy = 0.95;

struct Outcome {
	bool pass = false;
	std::string detail;
};

std::string fmt(const char* f, auto... args) {
	char buf[512];
	std::snprintf(buf, sizeof buf, f, args...);
	return buf;
}

std::string slurp(const fs::path& p) {
	std::ifstream in(p, std::ios::binary);
	std::ostringstream s;
	s << in.rdbuf();
	return s.str();
}

bool same_bits(const TensorList<float>& a, const TensorList<float>& b) {
	if (a.size() != b.size()) return false;
	for (std::size_t i = 0; i < a.size(); ++i)
		if (a[i].size() != b[i].size() || std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(float)) != 0)
			return false;
	return true;
}

// ---------------------------------------------------------------------------

Outcome abduction() {
	const auto t0 = Clock::now();
	std::mt19937_64 rng(1001);
	long mismatches = 0, contexts = 0;
	for (int i = 0; i < 200; ++i) {
		const int n = 2 + i % 7;
		const Policy p = oracle::random_policy(n, 8, rng);
		for (Decision label : {Decision::HeadPositive, Decision::HeadNegative}) {
			const Formula f = abduce(p, label);
			for (const auto& c : oracle::all_contexts(n)) {
				// preimage by an independent top-down rule walk
				Decision d = Decision::Abstain;
				for (auto it = p.rules().rbegin(); it != p.rules().rend(); ++it) {
					bool fires = true;
					for (const auto& l : it->body) fires = fires && c.sign(l.atom.index) == l.sign;
					if (fires) {
						d = decision_of(it->head);
						break;
					}
				}
				mismatches += f.evaluate(c) != (d == label);
				++contexts;
			}
		}
	}
	const double secs = seconds_since(t0);
	return {mismatches == 0 && secs < kAbduceSeconds,
	        fmt("%ld mismatches over %ld context checks, %.2f s", mismatches, contexts, secs)};
}

Outcome wmc_exactness() {
	std::mt19937_64 rng(1002);
	double worst = 0.0, worst_sum = 0.0;
	for (int i = 0; i < 200; ++i) {
		const int n = 1 + i % 10;
		const Policy p = oracle::random_policy(n, 8, rng);
		const Decision label = rng() & 1 ? Decision::HeadPositive : Decision::HeadNegative;
		const auto probs = oracle::random_probs(n, rng);
		worst = std::max(worst, std::abs(wmc(compile(abduce(p, label), n), probs) -
		                                 oracle::label_mass(p, label, probs, n)));
		const double s = wmc(compile(abduce(p, Decision::HeadPositive), n), probs) +
		                 wmc(compile(abduce(p, Decision::HeadNegative), n), probs) +
		                 wmc(compile(abstain_formula(p), n), probs);
		worst_sum = std::max(worst_sum, std::abs(s - 1.0));
	}
	return {worst <= kWmcTol && worst_sum <= kWmcTol,
	        fmt("max |wmc - enumeration| %.3g, max |sum - 1| %.3g (tol %.0e)", worst, worst_sum, kWmcTol)};
}

double full_chain_error() {
	const int n = 4;
	const Policy pol = parse_policy("a1, -a2 implies head\na3 implies -head\na1, a4 implies head", n);
	const Policy brute = pol;
	auto net = Encoder<double>::xavier(303);
	std::mt19937_64 irng(404);
	std::uniform_real_distribution<double> u(0.0, 1.0);
	std::vector<double> img(static_cast<std::size_t>(n) * kImageSize);
	for (double& x : img) x = u(irng);

	// loss from the oracle mass; gradient from the compiled graph and backprop
	auto probs_of = [&](const Encoder<double>& e) {
		Encoder<double>::Workspace ws;
		e.forward(img, n, ws);
		std::vector<double> p(n);
		for (int i = 0; i < n; ++i) p[i] = 1.0 / (1.0 + std::exp(ws.logits[2 * i + 1] - ws.logits[2 * i]));
		return p;
	};
	auto oracle_loss = [&](const Encoder<double>& e) {
		return -std::log(oracle::label_mass(brute, Decision::HeadPositive, probs_of(e), n));
	};
	WmcGraph graph(compile(abduce(pol, Decision::HeadPositive), n));
	Encoder<double>::Workspace ws;
	net.forward(img, n, ws);
	std::vector<double> p(n), g(n), dlogits(2 * n);
	for (int i = 0; i < n; ++i) p[i] = 1.0 / (1.0 + std::exp(ws.logits[2 * i + 1] - ws.logits[2 * i]));
	semantic_loss(graph, p, g);
	for (int i = 0; i < n; ++i) {
		dlogits[2 * i] = g[i] * p[i] * (1 - p[i]);
		dlogits[2 * i + 1] = -dlogits[2 * i];
	}
	auto grads = zeros_like(net.params());
	net.backward(ws, dlogits, grads);

	std::mt19937_64 rng(505);
	double worst = 0.0;
	const double h = 1e-5;
	for (int k = 0; k < 40; ++k) {
		const std::size_t t = rng() % net.params().size();
		const std::size_t j = rng() % net.params()[t].size();
		double& w = net.params()[t][j];
		const double keep = w;
		w = keep + h;
		const double fp = oracle_loss(net);
		w = keep - h;
		const double fm = oracle_loss(net);
		w = keep;
		worst = std::max(worst, oracle::rel_err(grads[t][j], (fp - fm) / (2 * h), 1e-7));
	}
	return worst;
}

Outcome gradients() {
	std::mt19937_64 rng(1003);
	std::uniform_real_distribution<double> u(0.05, 0.95);
	double worst = 0.0;
	int cases = 0;
	while (cases < 100) {
		const int n = 2 + static_cast<int>(rng() % 5);
		const Policy pol = oracle::random_policy(n, 6, rng);
		const Decision label = rng() & 1 ? Decision::HeadPositive : Decision::HeadNegative;
		const Diagram d = compile(abduce(pol, label), n);
		if (d.is_constant()) continue;
		std::vector<double> p(n), g(n);
		for (double& x : p) x = u(rng);
		if (oracle::label_mass(pol, label, p, n) < 1e-6) continue;
		semantic_loss(d, p, g);
		// Atoms the formula ignores have an exact zero gradient; h = 1e-5 keeps
		// the rounding noise of the difference quotient (~eps/h) below the floor.
		const double h = 1e-5;
		for (int i = 0; i < n; ++i) {
			auto up = p, dn = p;
			up[i] += h;
			dn[i] -= h;
			const double fd = (std::log(oracle::label_mass(pol, label, dn, n)) -
			                   std::log(oracle::label_mass(pol, label, up, n))) / (2 * h);
			worst = std::max(worst, oracle::rel_err(g[i], fd, 1e-6));
		}
		++cases;
	}
	const double chain = full_chain_error();
	return {worst <= kGradTol && chain <= kChainTol,
	        fmt("semantic loss max rel err %.3g over %d cases (tol %.0e); full chain %.3g (tol %.0e)", worst, cases,
	            kGradTol, chain, kChainTol)};
}

Outcome cache(const fs::path& out) {
	ExperimentConfig cfg = ExperimentConfig::desk();
	cfg.out_dir = out / "cache";
	DatasetFactory factory(cfg);
	RunData d = factory.make({0, 1});
	const int n = cfg.n_atoms;
	std::set<Decision> labels;
	for (const auto& inst : d.splits.train.instances) labels.insert(inst.label);

	// A parent holding the target, and its 22 offspring: every organism
	// trained for one epoch with its own cache on or off.
	auto population = [&](bool on) {
		Net net = Net::xavier(11);
		auto adam = NetAdam::for_params(net.params());
		Organism parent(1, 0, MutationTag{}, n, d.target, std::move(net), std::move(adam), on);
		std::mt19937_64 rng(12);
		return spawn_population(parent, cfg.n_splus, rng, 2, on);
	};
	TrainConfig tc;
	tc.epochs = 1;
	tc.batch_size = cfg.batch_size;
	auto pop_on = population(true), pop_off = population(false);
	bool identical = true, counts = true;
	std::size_t comp_on = 0, comp_off = 0;
	double t_on = 0.0, t_off = 0.0;
	for (std::size_t i = 0; i < pop_on.size(); ++i) {
		auto t0 = Clock::now();
		const TrainReport a = train(pop_on[i], d.splits.train, tc, 100 + i);
		t_on += seconds_since(t0);
		t0 = Clock::now();
		const TrainReport b = train(pop_off[i], d.splits.train, tc, 100 + i);
		t_off += seconds_since(t0);
		identical = identical && a.semantic_loss.size() == b.semantic_loss.size() &&
		            std::memcmp(a.semantic_loss.data(), b.semantic_loss.data(), a.semantic_loss.size() * sizeof(double)) == 0 &&
		            same_bits(pop_on[i].net().params(), pop_off[i].net().params());
		// one policy per organism
		counts = counts && pop_on[i].cache().compilations() == labels.size();
		comp_on += pop_on[i].cache().compilations();
		comp_off += pop_off[i].cache().compilations();
	}

	// 1000-instance shared-label batch, best of 5
	const std::size_t m = 1000;
	std::vector<Decision> batch_labels(m, Decision::HeadPositive);
	std::vector<double> probs(m * n), g_on(probs.size()), g_off(probs.size());
	std::mt19937_64 prng(13);
	std::uniform_real_distribution<double> u(0.01, 0.99);
	for (double& p : probs) p = u(prng);
	double s_on = 1e300, s_off = 1e300, l_on = 0, l_off = 0;
	std::size_t batch_comp_on = 0;
	for (int r = 0; r < 5; ++r) {
		CompilationCache on(true), off(false);
		auto t0 = Clock::now();
		l_on = semantic_batch(on, d.target, n, batch_labels, probs, g_on);
		s_on = std::min(s_on, seconds_since(t0));
		t0 = Clock::now();
		l_off = semantic_batch(off, d.target, n, batch_labels, probs, g_off);
		s_off = std::min(s_off, seconds_since(t0));
		batch_comp_on = on.compilations();
	}
	const bool batch_same = std::memcmp(&l_on, &l_off, sizeof l_on) == 0 &&
	                        std::memcmp(g_on.data(), g_off.data(), g_on.size() * sizeof(double)) == 0;
	const double speedup = s_off / s_on;
	return {identical && counts && batch_same && batch_comp_on == 1 && speedup >= kMinCacheSpeedup,
	        fmt("epoch bit-identical %s over %zu organisms; compilations %zu on vs %zu off (%zu labels x 1 policy each); "
	            "epoch time %.2f s on vs %.2f s off; 1000-instance batch %.3g s vs %.3g s, speedup %.1fx (gate %.0fx)",
	            identical ? "yes" : "no", pop_on.size(), comp_on, comp_off, labels.size(), t_on, t_off, s_on, s_off,
	            speedup, kMinCacheSpeedup)};
}

Outcome selection() {
	// Appendix score matrix: rows parent C/A/W, columns offspring C/A/W
	const int expected[3][3] = {{0, -1, -1}, {1, 0, -1}, {1, 1, 0}};
	const Status st[3] = {Status::Correct, Status::Abstain, Status::Wrong};
	int matrix_ok = 0;
	for (int r = 0; r < 3; ++r)
		for (int c = 0; c < 3; ++c) matrix_ok += score(st[r], st[c]) == expected[r][c];

	std::vector<FitnessReport> two{{1, 0.01, FitnessGroup::Beneficial}, {2, 0.02, FitnessGroup::Beneficial}};
	const auto p = selection_probabilities(two, 2.0);
	const bool probs_ok = p.size() == 2 && std::abs(p[0] - 0.2) <= 1e-15 && std::abs(p[1] - 0.8) <= 1e-15;

	std::mt19937_64 rng(1005);
	std::uniform_int_distribution<long> draw(-50, 50);
	long partition_errors = 0;
	for (int trial = 0; trial < 1000; ++trial) {
		std::vector<FitnessReport> reps;
		for (int i = 0; i < 22; ++i) {
			const long raw = draw(rng);
			reps.push_back({raw, raw / 500.0, classify(raw, 500, 0.0)});
		}
		for (const auto& r : reps) {
			const FitnessGroup want =
			    r.raw > 0 ? FitnessGroup::Beneficial : r.raw == 0 ? FitnessGroup::Neutral : FitnessGroup::Detrimental;
			partition_errors += r.group != want;
		}
		// probabilities live only in the chosen group
		const auto q = selection_probabilities(reps, 2.0);
		const bool any_b = std::any_of(reps.begin(), reps.end(), [](auto& r) { return r.raw > 0; });
		const bool any_n = std::any_of(reps.begin(), reps.end(), [](auto& r) { return r.raw == 0; });
		for (std::size_t i = 0; i < reps.size(); ++i) {
			const bool allowed = any_b ? reps[i].raw > 0 : any_n ? reps[i].raw == 0 : true;
			if (!allowed && q[i] != 0.0) ++partition_errors;
		}
	}
	return {matrix_ok == 9 && probs_ok && partition_errors == 0,
	        fmt("score matrix %d/9 entries; [1,2] k=2 -> [%.17g, %.17g]; %ld partition errors over 1000 populations",
	            matrix_ok, p[0], p[1], partition_errors)};
}

// ---------------------------------------------------------------------------
// Desk experiment shared by criteria 6 to 10

ExperimentConfig desk_config(const fs::path& out) {
	ExperimentConfig cfg = ExperimentConfig::desk();
	cfg.policies = 5;
	cfg.seeds.clear();
	for (std::uint64_t s = 1; s <= 10; ++s) cfg.seeds.push_back(s);
	cfg.workers = std::thread::hardware_concurrency() > 1 ? std::thread::hardware_concurrency() : 0;
	cfg.out_dir = out;
	return cfg;
}

struct Desk {
	ExperimentConfig cfg;
	ExperimentReport evolve, baseline;
};

Desk run_desk(const fs::path& out) {
	Desk d;
	d.cfg = desk_config(out / "evolve");
	std::cerr << "desk evolution: " << d.cfg.policies << " policies x " << d.cfg.seeds.size() << " seeds, "
	          << d.cfg.workers << " workers" << std::endl;
	d.evolve = run_experiment(d.cfg, &std::cerr);
	ExperimentConfig b = d.cfg;
	b.mode = Mode::Baseline;
	b.out_dir = out / "baseline";
	d.baseline = run_experiment(b, &std::cerr);
	return d;
}

double median_of(const std::vector<RunSummary>& runs, double (*get)(const RunSummary&)) {
	std::vector<double> v;
	for (const auto& r : runs) v.push_back(get(r));
	return describe(v).median;
}

Outcome evolution(const Desk& d) {
	const auto& runs = d.evolve.runs;
	const double c = median_of(runs, [](const RunSummary& r) { return r.test.correct; });
	const double w = median_of(runs, [](const RunSummary& r) { return r.test.wrong; });
	std::vector<double> cs;
	for (const auto& r : runs) cs.push_back(r.test.correct);
	const Stats s = describe(cs);
	return {c >= kMinMedianCorrect && w <= kMaxMedianWrong,
	        fmt("%zu runs: median test correct %.4f (gate %.2f), median wrong %.4f (gate %.2f), mean correct %.4f, "
	            "sd %.4f; wall clock %.0f s with %u worker(s) on %u hardware thread(s)",
	            runs.size(), c, kMinMedianCorrect, w, kMaxMedianWrong, s.mean, s.sd, d.evolve.seconds, d.cfg.workers,
	            std::thread::hardware_concurrency())};
}

Outcome dynamics(const Desk& d) {
	std::size_t settled = 0;
	for (const auto& r : d.evolve.runs) settled += r.settled;
	const double frac = static_cast<double>(settled) / static_cast<double>(d.evolve.runs.size());
	return {frac >= kMinSettledFraction, fmt("%zu/%zu runs settle (final abstain <= 0.05, 5-generation moving average "
	                                         "non-increasing): %.2f (gate %.2f)",
	                                         settled, d.evolve.runs.size(), frac, kMinSettledFraction)};
}

Outcome baseline(const Desk& d) {
	const double acc = median_of(d.baseline.runs, [](const RunSummary& r) { return r.baseline_accuracy; });
	std::size_t diverged = 0;
	for (const auto& r : d.baseline.runs) diverged += r.diverged;
	const double ratio = d.evolve.seconds / std::max(d.baseline.seconds, 1e-9);
	return {acc >= kMinBaselineAccuracy,
	        fmt("median test accuracy %.4f after %d epochs (gate %.2f), %zu diverged; wall clock baseline %.1f s vs "
	            "evolution %.1f s, cost ratio %.1fx",
	            acc, d.cfg.baseline_epochs, kMinBaselineAccuracy, diverged, d.baseline.seconds, d.evolve.seconds,
	            ratio)};
}

Outcome stuck(const Desk& d) {
	// injection: homogeneous latest rule over a collapsed perception stub
	const Policy target = parse_policy("a1 implies head\na2, -a3 implies -head", 3);
	auto pool = std::make_shared<const GlyphPool>(synth_glyphs(8, 0.2, 9));
	std::mt19937_64 rng(9);
	auto data = build_exemplar_set(target, 3, {100, 100, 100}, pool, pool, rng);
	const Policy homog = parse_policy("a1 implies head\na1, a2 implies head", 3);
	const auto s = detect_stuck(homog, perceive(constant_perception(0.99), data.val), data.val);
	const auto healthy = detect_stuck(target, perceive(perfect_perception(), data.val), data.val);
	const bool injected = s.stuck() && s.uniform_perception && s.latest_rule_homogeneous && !healthy.stuck();

	std::size_t flagged = 0;
	for (const auto& r : d.evolve.runs) flagged += r.stuck_generations > 0;
	const double frac = static_cast<double>(flagged) / static_cast<double>(d.evolve.runs.size());
	return {injected, fmt("injected stub flagged %s; desk runs stuck at any generation: %zu/%zu = %.2f (reported)",
	                      injected ? "yes" : "no", flagged, d.evolve.runs.size(), frac)};
}

// Non-timing files under `root`, relative paths.
std::map<std::string, std::string> artifacts(const fs::path& root) {
	std::map<std::string, std::string> out;
	for (const auto& e : fs::recursive_directory_iterator(root)) {
		if (!e.is_regular_file() || e.path().filename() == "timing.csv") continue;
		out[fs::relative(e.path(), root).string()] = slurp(e.path());
	}
	return out;
}

Outcome determinism(const Desk& d, const fs::path& out) {
	// (a) a whole smaller experiment run twice, every non-timing file compared
	std::size_t files = 0, differ = 0;
	for (Mode mode : {Mode::Datagen, Mode::Evolve, Mode::Baseline}) {
		ExperimentConfig c = ExperimentConfig::desk();
		c.mode = mode;
		c.policies = 2;
		c.seeds = {3, 4};
		c.maxgen = 5;
		c.sizes = {400, 200, 200};
		c.baseline_epochs = 5;
		c.workers = d.cfg.workers;
		std::map<std::string, std::string> a, b;
		for (const char* rep : {"a", "b"}) {
			c.out_dir = out / "determinism" / to_string(mode) / rep;
			fs::remove_all(c.out_dir);
			run_experiment(c);
			(rep[0] == 'a' ? a : b) = artifacts(c.out_dir);
		}
		files += a.size();
		differ += a != b;
		for (const auto& [k, v] : a) differ += !b.count(k) || b.at(k) != v;
	}
	// (b) two desk runs re-run on their own reproduce their files from the full experiment
	std::size_t rerun_files = 0;
	for (const RunKey& key : {RunKey{0, 1}, RunKey{1, 10}}) {
		ExperimentConfig c = d.cfg;
		c.policies = key.policy + 1;  // run keys always start at policy 0
		c.seeds = {key.seed};
		c.out_dir = out / "determinism" / ("desk_" + key.name());
		fs::remove_all(c.out_dir);
		run_experiment(c);
		const auto fresh = artifacts(c.out_dir / "runs" / key.name());
		const auto orig = artifacts(d.cfg.out_dir / "runs" / key.name());
		rerun_files += fresh.size();
		differ += fresh != orig;
	}
	return {differ == 0 && files > 0 && rerun_files > 0,
	        fmt("%zu files across datagen/evolve/baseline re-runs and %zu desk run files; %zu differences", files,
	            rerun_files, differ)};
}

} // namespace

int main(int argc, char** argv) {
	fs::path out = "acceptance_out";
	std::set<int> only;
	for (int i = 1; i < argc; ++i) {
		const std::string a = argv[i];
		if (a == "--only" && i + 1 < argc) {
			std::stringstream s(argv[++i]);
			for (std::string tok; std::getline(s, tok, ',');) only.insert(std::stoi(tok));
		} else {
			out = a;
		}
	}
	auto wanted = [&](int c) { return only.empty() || only.count(c) > 0; };
	fs::create_directories(out);

	std::vector<std::pair<int, Outcome>> results;
	auto record = [&](int id, const char* name, const std::function<Outcome()>& f) {
		if (!wanted(id)) return;
		const auto t0 = Clock::now();
		Outcome o;
		try {
			o = f();
		} catch (const std::exception& e) {
			o = {false, std::string("exception: ") + e.what()};
		}
		o.detail += fmt(" [%.1f s]", seconds_since(t0));
		const std::string line = fmt("%s %2d %s: ", o.pass ? "PASS" : "FAIL", id, name) + o.detail;
		std::cout << line << std::endl;
		results.push_back({id, o});
	};

	record(1, "abduction soundness and completeness", abduction);
	record(2, "WMC exactness", wmc_exactness);
	record(3, "gradient correctness", gradients);
	record(4, "cache transparency and speedup", [&] { return cache(out); });
	record(5, "selection mechanics", selection);

	std::optional<Desk> desk;
	if (wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(10)) {
		try {
			desk = run_desk(out / "desk");
		} catch (const std::exception& e) {
			std::cerr << "desk experiment failed: " << e.what() << std::endl;
		}
	}
	auto with_desk = [&](auto f) {
		return [&, f]() -> Outcome {
			if (!desk) return {false, "desk experiment did not complete"};
			return f(*desk);
		};
	};
	record(6, "desk-scale evolution", with_desk(evolution));
	record(7, "abstain dynamics", with_desk(dynamics));
	record(8, "end-to-end baseline", with_desk(baseline));
	record(9, "stuck-state diagnostic", with_desk(stuck));
	record(10, "determinism", with_desk([&](const Desk& d) { return determinism(d, out); }));

	std::ofstream report(out / "acceptance.txt");
	bool all = true;
	for (const auto& [id, o] : results) {
		report << (o.pass ? "PASS " : "FAIL ") << id << ": " << o.detail << '\n';
		all = all && o.pass;
	}
	return all ? 0 : 1;
}
