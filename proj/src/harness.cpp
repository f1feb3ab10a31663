#include "nesy/harness.h"

#include "nesy/hash.h"
#include "nesy/pool.h"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

namespace nesy {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
	return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
	char buf[40];
	std::snprintf(buf, sizeof buf, "%.17g", v);
	return buf;
}

std::string csv_quote(const std::string& s) {
	std::string out = "\"";
	for (char c : s) {
		if (c == '"') out += "\"\"";
		else if (c == '\n') out += "; ";
		else out += c;
	}
	if (out.size() >= 3 && out.compare(out.size() - 2, 2, "; ") == 0) out.resize(out.size() - 2);
	return out + "\"";
}

std::ofstream open_out(const fs::path& path) {
	std::error_code ec;
	fs::create_directories(path.parent_path(), ec);
	std::ofstream out(path, std::ios::binary);
	if (!out) throw IoError("cannot write " + path.string());
	return out;
}

void check_written(std::ofstream& out, const fs::path& path) {
	out.flush();
	if (!out) throw IoError("write failed: " + path.string());
}

void write_file(const fs::path& path, const std::string& text) {
	auto out = open_out(path);
	out << text;
	check_written(out, path);
}

std::string triple_csv(const PerformanceTriple& t) {
	return num(t.correct) + ',' + num(t.abstain) + ',' + num(t.wrong);
}

} // namespace

const char* to_string(Mode m) {
	switch (m) {
	case Mode::Evolve: return "evolve";
	case Mode::Baseline: return "baseline";
	case Mode::Datagen: return "datagen";
	case Mode::ValidatePerf: return "validate-perf";
	}
	return "?";
}

Mode parse_mode(const std::string& text) {
	for (Mode m : {Mode::Evolve, Mode::Baseline, Mode::Datagen, Mode::ValidatePerf})
		if (text == to_string(m)) return m;
	throw ConfigError("unknown mode '" + text + "'");
}

GlyphSource parse_glyph_source(const std::string& text) {
	if (text == "synthetic") return GlyphSource::Synthetic;
	if (text == "mnist") return GlyphSource::Mnist;
	throw ConfigError("unknown glyph source '" + text + "'");
}

ExperimentConfig ExperimentConfig::paper_scale() {
	ExperimentConfig c;
	c.n_atoms = 8;
	c.sizes = {20000, 2000, 2000};
	c.maxgen = 500;
	c.batch_size = 2000;
	c.baseline_epochs = 100;
	c.glyphs = GlyphSource::Mnist;
	return c;
}

void ExperimentConfig::validate() const {
	auto require = [](bool ok, const char* what) {
		if (!ok) throw ConfigError(what);
	};
	require(n_atoms >= 1 && n_atoms <= kMaxAtoms, "n_atoms out of range");
	require(sizes.train > 0 && sizes.val > 0 && sizes.test > 0, "dataset sizes must be positive");
	require(maxgen >= 0, "maxgen must be non-negative");
	require(t >= 0.0 && t <= 1.0, "t must lie in [0, 1]");
	require(k > 0.0, "k must be positive");
	require(n_splus >= 0, "n_splus must be non-negative");
	require(epochs > 0, "epochs must be positive");
	require(baseline_epochs > 0, "baseline epochs must be positive");
	require(batch_size > 0, "batch size must be positive");
	require(loss.semantic >= 0.0 && loss.reconstruction >= 0.0 && loss.semantic + loss.reconstruction > 0.0,
	        "loss ratio weights must be non-negative and not both zero");
	require(!seeds.empty(), "at least one seed is required");
	require(policies > 0, "policies must be positive");
	require(early_stop > 0.0 && early_stop <= 1.0, "early stop must lie in (0, 1]");
	require(glyphs_per_class > 0, "glyphs per class must be positive");
	require(glyph_noise >= 0.0 && glyph_noise < 0.5, "glyph noise must lie in [0, 0.5)");
	std::vector<std::uint64_t> s = seeds;
	std::sort(s.begin(), s.end());
	require(std::adjacent_find(s.begin(), s.end()) == s.end(), "seeds must be distinct");
}

std::string ExperimentConfig::to_json() const {
	nlohmann::ordered_json j;
	j["mode"] = to_string(mode);
	j["n_atoms"] = n_atoms;
	j["sizes"] = {{"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test}};
	j["maxgen"] = maxgen;
	j["t"] = t;
	j["k"] = k;
	j["n_splus"] = n_splus;
	j["epochs"] = epochs;
	j["baseline_epochs"] = baseline_epochs;
	j["batch_size"] = batch_size;
	j["loss"] = loss.to_string();
	j["workers"] = workers;
	j["seeds"] = seeds;
	j["policies"] = policies;
	j["policy_seed"] = policy_seed;
	j["cache"] = cache;
	j["early_stop"] = early_stop;
	j["glyphs"] = to_string(glyphs);
	if (glyphs == GlyphSource::Synthetic) {
		j["glyphs_per_class"] = glyphs_per_class;
		j["glyph_noise"] = glyph_noise;
	}
	return j.dump(2) + "\n";
}

std::string RunKey::name() const { return "p" + std::to_string(policy) + "_s" + std::to_string(seed); }

std::vector<RunKey> run_keys(const ExperimentConfig& cfg) {
	std::vector<RunKey> keys;
	for (int p = 0; p < cfg.policies; ++p)
		for (std::uint64_t s : cfg.seeds) keys.push_back({p, s});
	return keys;
}

DatasetFactory::DatasetFactory(const ExperimentConfig& cfg) : cfg_(cfg) {
	if (cfg_.glyphs != GlyphSource::Mnist) return;
	fs::path dir = cfg_.data_dir;
	if (dir.empty()) {
		const char* env = std::getenv(kDataDirEnv);
		if (!env || !*env) throw DataError(std::string("MNIST glyphs need a data directory; set ") + kDataDirEnv);
		dir = env;
	}
	mnist_train_ = std::make_shared<GlyphPool>(load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"));
	mnist_test_ = std::make_shared<GlyphPool>(load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"));
}

RunData DatasetFactory::make(const RunKey& key) {
	const auto p = static_cast<std::uint64_t>(key.policy);
	TargetPolicySpec spec;
	spec.n_atoms = cfg_.n_atoms;
	std::mt19937_64 prng(derive_seed(cfg_.policy_seed, {p}));
	RunData d;
	d.target = generate_target_policy(spec, prng);

	std::shared_ptr<const GlyphPool> train_pool = mnist_train_, test_pool = mnist_test_;
	if (cfg_.glyphs == GlyphSource::Synthetic) {
		train_pool = std::make_shared<GlyphPool>(synth_glyphs(cfg_.glyphs_per_class, cfg_.glyph_noise, derive_seed(key.seed, {1})));
		test_pool = std::make_shared<GlyphPool>(synth_glyphs(cfg_.glyphs_per_class, cfg_.glyph_noise, derive_seed(key.seed, {2})));
	}
	std::mt19937_64 drng(derive_seed(key.seed, {3, p}));
	d.splits = build_exemplar_set(d.target, cfg_.n_atoms, cfg_.sizes, train_pool, test_pool, drng);
	d.manifest = {.seed = key.seed, .n_atoms = cfg_.n_atoms, .target_policy = render_policy(d.target), .glyphs = cfg_.glyphs};
	return d;
}

EvolutionConfig evolution_config(const ExperimentConfig& cfg) {
	EvolutionConfig e;
	e.maxgen = cfg.maxgen;
	e.t = cfg.t;
	e.k = cfg.k;
	e.n_splus = cfg.n_splus;
	e.train.epochs = cfg.epochs;
	e.train.batch_size = cfg.batch_size;
	e.train.loss = cfg.loss;
	e.early_stop = cfg.early_stop;
	e.workers = cfg.workers;
	e.cache = cfg.cache;
	return e;
}

bool abstain_settles(const std::vector<double>& abstain, int window, double final_max) {
	if (abstain.empty() || window < 1) return false;
	if (abstain.back() > final_max) return false;
	double prev = 0.0;
	for (std::size_t i = 0; i < abstain.size(); ++i) {
		const std::size_t lo = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - window : 0;
		double sum = 0.0;
		for (std::size_t j = lo; j <= i; ++j) sum += abstain[j];
		const double avg = sum / static_cast<double>(i + 1 - lo);
		if (i > 0 && avg > prev + 1e-12) return false;
		prev = avg;
	}
	return true;
}

std::vector<double> interpolate_unit_scale(const std::vector<double>& series, int points) {
	std::vector<double> out(static_cast<std::size_t>(points), series.empty() ? 0.0 : series.front());
	if (series.size() < 2 || points < 2) return out;
	const double last = static_cast<double>(series.size() - 1);
	for (int s = 0; s < points; ++s) {
		const double x = last * s / (points - 1);
		const auto i = std::min(static_cast<std::size_t>(x), series.size() - 2);
		const double f = x - static_cast<double>(i);
		out[static_cast<std::size_t>(s)] = series[i] + f * (series[i + 1] - series[i]);
	}
	return out;
}

Stats describe(std::vector<double> v) {
	Stats s;
	if (v.empty()) return s;
	std::sort(v.begin(), v.end());
	const std::size_t n = v.size();
	s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
	s.min = v.front();
	s.max = v.back();
	double sum = 0.0;
	for (double x : v) sum += x;
	s.mean = sum / static_cast<double>(n);
	if (n > 1) {
		double ss = 0.0;
		for (double x : v) ss += (x - s.mean) * (x - s.mean);
		s.sd = std::sqrt(ss / static_cast<double>(n - 1));
	}
	return s;
}

void write_generations_csv(std::ostream& out, const Lineage& lineage) {
	out << "generation,id,parent_id,mutation,group,raw_fitness,normalized_fitness,"
	       "val_correct,val_abstain,val_wrong,test_correct,test_abstain,test_wrong,"
	       "semantic_loss,reconstruction_loss,stuck,rules\n";
	for (const auto& e : lineage.entries) {
		out << e.generation << ',' << e.organism.id() << ',' << e.organism.parent_id() << ','
		    << e.organism.tag().to_string() << ',' << (e.generation == 0 ? '-' : group_letter(e.fitness.group)) << ','
		    << e.fitness.raw << ',' << num(e.fitness.normalized) << ',' << triple_csv(e.val) << ','
		    << triple_csv(e.test) << ',' << num(e.semantic_loss) << ',' << num(e.reconstruction_loss) << ','
		    << (e.stuck.stuck() ? 1 : 0) << ',' << e.organism.policy().size() << '\n';
	}
}

void write_curve_csv(std::ostream& out, const BaselineReport& report) {
	out << "epoch,train_loss,train_accuracy,val_loss,val_accuracy,test_loss,test_accuracy\n";
	for (const auto& m : report.curve)
		out << m.epoch << ',' << num(m.train_loss) << ',' << num(m.train_accuracy) << ',' << num(m.val_loss) << ','
		    << num(m.val_accuracy) << ',' << num(m.test_loss) << ',' << num(m.test_accuracy) << '\n';
}

namespace {

void write_stats(const fs::path& path, const std::vector<std::pair<std::string, std::vector<double>>>& metrics) {
	std::ostringstream o;
	o << "metric,runs,median,mean,sd,min,max\n";
	for (const auto& [name, values] : metrics) {
		const Stats s = describe(values);
		o << name << ',' << values.size() << ',' << num(s.median) << ',' << num(s.mean) << ',' << num(s.sd) << ','
		  << num(s.min) << ',' << num(s.max) << '\n';
	}
	write_file(path, o.str());
}

void write_aggregate(const fs::path& path, const std::vector<Lineage>& lineages) {
	// mean over runs of each series on the unified 1..100 scale
	constexpr int kPoints = 100;
	using Getter = double (*)(const LineageEntry&);
	const std::pair<const char*, Getter> columns[] = {
	    {"val_correct", [](const LineageEntry& e) { return e.val.correct; }},
	    {"val_abstain", [](const LineageEntry& e) { return e.val.abstain; }},
	    {"val_wrong", [](const LineageEntry& e) { return e.val.wrong; }},
	    {"test_correct", [](const LineageEntry& e) { return e.test.correct; }},
	    {"test_abstain", [](const LineageEntry& e) { return e.test.abstain; }},
	    {"test_wrong", [](const LineageEntry& e) { return e.test.wrong; }},
	    {"semantic_loss", [](const LineageEntry& e) { return e.semantic_loss; }},
	};
	std::vector<std::vector<double>> mean(std::size(columns), std::vector<double>(kPoints, 0.0));
	for (const auto& lin : lineages) {
		for (std::size_t c = 0; c < std::size(columns); ++c) {
			std::vector<double> series;
			for (const auto& e : lin.entries) series.push_back(columns[c].second(e));
			const auto interp = interpolate_unit_scale(series, kPoints);
			for (int s = 0; s < kPoints; ++s) mean[c][s] += interp[s] / static_cast<double>(lineages.size());
		}
	}
	std::ostringstream o;
	o << "step";
	for (const auto& col : columns) o << ',' << col.first;
	o << '\n';
	for (int s = 0; s < kPoints; ++s) {
		o << s + 1;
		for (std::size_t c = 0; c < std::size(columns); ++c) o << ',' << num(mean[c][s]);
		o << '\n';
	}
	write_file(path, o.str());
}

void write_timing(const fs::path& path, const ExperimentReport& report, Mode mode) {
	std::ostringstream o;
	o << "run,mode,seconds\n";
	for (const auto& r : report.runs) o << r.key.name() << ',' << to_string(mode) << ',' << num(r.seconds) << '\n';
	o << "total," << to_string(mode) << ',' << num(report.seconds) << '\n';
	write_file(path, o.str());
}

std::vector<double> column(const std::vector<RunSummary>& runs, double (*get)(const RunSummary&)) {
	std::vector<double> v;
	for (const auto& r : runs) v.push_back(get(r));
	return v;
}

void run_evolve(const ExperimentConfig& cfg, ExperimentReport& report, std::ostream* log) {
	DatasetFactory factory(cfg);
	const EvolutionConfig ecfg = evolution_config(cfg);
	std::vector<Lineage> lineages;
	for (const RunKey& key : run_keys(cfg)) {
		const auto t0 = Clock::now();
		RunData d = factory.make(key);
		const fs::path dir = cfg.out_dir / "runs" / key.name();
		auto on_gen = [&](const LineageEntry& e) {
			if (!log) return;
			*log << key.name() << " gen " << e.generation << " val c=" << e.val.correct << " a=" << e.val.abstain
			     << " w=" << e.val.wrong << " rules=" << e.organism.policy().size()
			     << (e.stuck.stuck() ? " stuck" : "") << std::endl;
		};
		Lineage lin = evolve(ecfg, d.splits, derive_seed(key.seed, {4, static_cast<std::uint64_t>(key.policy)}), on_gen);

		{
			const fs::path p = dir / "lineage.jsonl";
			auto out = open_out(p);
			write_lineage_jsonl(out, lin);
			check_written(out, p);
		}
		{
			const fs::path p = dir / "generations.csv";
			auto out = open_out(p);
			write_generations_csv(out, lin);
			check_written(out, p);
		}
		write_file(dir / "target_policy.txt", d.manifest.target_policy);
		write_file(dir / "final_policy.txt", render_policy(lin.fittest().organism.policy()));

		RunSummary s;
		s.key = key;
		s.target = d.manifest.target_policy;
		s.generations = lin.fittest().generation;
		s.early_stopped = lin.early_stopped;
		s.val = lin.fittest().val;
		s.test = lin.fittest().test;
		std::vector<double> abstain;
		for (const auto& e : lin.entries) {
			s.stuck_generations += e.stuck.stuck() ? 1 : 0;
			s.diverged = s.diverged || e.diverged;
			abstain.push_back(e.test.abstain);
		}
		s.settled = abstain_settles(abstain);
		s.seconds = seconds_since(t0);
		if (log)
			*log << key.name() << " done: generations " << s.generations << " test c=" << s.test.correct
			     << " a=" << s.test.abstain << " w=" << s.test.wrong << " (" << s.seconds << " s)" << std::endl;
		report.runs.push_back(std::move(s));
		lin.entries.shrink_to_fit();
		lineages.push_back(std::move(lin));
	}

	std::ostringstream o;
	o << "policy,seed,generations,early_stopped,val_correct,val_abstain,val_wrong,"
	     "test_correct,test_abstain,test_wrong,stuck_generations,settled,target\n";
	for (const auto& r : report.runs)
		o << r.key.policy << ',' << r.key.seed << ',' << r.generations << ',' << (r.early_stopped ? 1 : 0) << ','
		  << triple_csv(r.val) << ',' << triple_csv(r.test) << ',' << r.stuck_generations << ','
		  << (r.settled ? 1 : 0) << ',' << csv_quote(r.target) << '\n';
	write_file(cfg.out_dir / "summary.csv", o.str());

	const auto& runs = report.runs;
	write_stats(cfg.out_dir / "stats.csv",
	            {{"test_correct", column(runs, [](const RunSummary& r) { return r.test.correct; })},
	             {"test_abstain", column(runs, [](const RunSummary& r) { return r.test.abstain; })},
	             {"test_wrong", column(runs, [](const RunSummary& r) { return r.test.wrong; })},
	             {"val_correct", column(runs, [](const RunSummary& r) { return r.val.correct; })},
	             {"generations", column(runs, [](const RunSummary& r) { return double(r.generations); })},
	             {"stuck_any", column(runs, [](const RunSummary& r) { return r.stuck_generations > 0 ? 1.0 : 0.0; })},
	             {"settled", column(runs, [](const RunSummary& r) { return r.settled ? 1.0 : 0.0; })}});
	write_aggregate(cfg.out_dir / "aggregate.csv", lineages);
}

void run_baseline(const ExperimentConfig& cfg, ExperimentReport& report, std::ostream* log) {
	DatasetFactory factory(cfg);
	BaselineConfig bcfg;
	bcfg.epochs = cfg.baseline_epochs;
	bcfg.batch_size = cfg.batch_size;
	for (const RunKey& key : run_keys(cfg)) {
		const auto t0 = Clock::now();
		RunData d = factory.make(key);
		const auto p = static_cast<std::uint64_t>(key.policy);
		BaselineNet net = BaselineNet::xavier(cfg.n_atoms, derive_seed(key.seed, {5, p}));
		BaselineReport rep = train_baseline(net, d.splits, bcfg, derive_seed(key.seed, {6, p}));
		const fs::path path = cfg.out_dir / "runs" / key.name() / "curve.csv";
		auto out = open_out(path);
		write_curve_csv(out, rep);
		check_written(out, path);

		RunSummary s;
		s.key = key;
		s.target = d.manifest.target_policy;
		s.baseline_epochs = static_cast<int>(rep.curve.size());
		s.baseline_accuracy = rep.curve.empty() ? 0.0 : rep.curve.back().test_accuracy;
		s.diverged = rep.diverged;
		s.seconds = seconds_since(t0);
		if (log)
			*log << key.name() << " baseline: epochs " << s.baseline_epochs << " test accuracy " << s.baseline_accuracy
			     << (s.diverged ? " (diverged)" : "") << " (" << s.seconds << " s)" << std::endl;
		report.runs.push_back(std::move(s));
	}
	std::ostringstream o;
	o << "policy,seed,epochs,diverged,test_accuracy,target\n";
	for (const auto& r : report.runs)
		o << r.key.policy << ',' << r.key.seed << ',' << r.baseline_epochs << ',' << (r.diverged ? 1 : 0) << ','
		  << num(r.baseline_accuracy) << ',' << csv_quote(r.target) << '\n';
	write_file(cfg.out_dir / "summary.csv", o.str());
	write_stats(cfg.out_dir / "stats.csv",
	            {{"test_accuracy", column(report.runs, [](const RunSummary& r) { return r.baseline_accuracy; })},
	             {"diverged", column(report.runs, [](const RunSummary& r) { return r.diverged ? 1.0 : 0.0; })}});
}

void run_datagen(const ExperimentConfig& cfg, ExperimentReport& report, std::ostream* log) {
	DatasetFactory factory(cfg);
	std::ostringstream o;
	o << "policy,seed,train,val,test,rejections,train_positive,target\n";
	for (const RunKey& key : run_keys(cfg)) {
		const auto t0 = Clock::now();
		RunData d = factory.make(key);
		try {
			save_exemplar_sets(cfg.out_dir / "datasets" / key.name(), d.splits, d.manifest);
		} catch (const DataError&) {
			throw;
		} catch (const std::runtime_error& e) {
			throw IoError(e.what());
		}
		std::size_t pos = 0;
		for (const auto& inst : d.splits.train.instances) pos += inst.label == Decision::HeadPositive;
		o << key.policy << ',' << key.seed << ',' << d.splits.train.size() << ',' << d.splits.val.size() << ','
		  << d.splits.test.size() << ',' << d.splits.rejections << ','
		  << num(static_cast<double>(pos) / static_cast<double>(d.splits.train.size())) << ','
		  << csv_quote(d.manifest.target_policy) << '\n';
		RunSummary s;
		s.key = key;
		s.target = d.manifest.target_policy;
		s.seconds = seconds_since(t0);
		if (log) *log << key.name() << " dataset written" << std::endl;
		report.runs.push_back(std::move(s));
	}
	write_file(cfg.out_dir / "summary.csv", o.str());
}

} // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
	cfg.validate();
	if (cfg.mode == Mode::ValidatePerf) throw ConfigError("validate-perf has its own entry point");
	const auto t0 = Clock::now();
	write_file(cfg.out_dir / "config.json", cfg.to_json());
	ExperimentReport report;
	switch (cfg.mode) {
	case Mode::Evolve: run_evolve(cfg, report, log); break;
	case Mode::Baseline: run_baseline(cfg, report, log); break;
	case Mode::Datagen: run_datagen(cfg, report, log); break;
	case Mode::ValidatePerf: break;
	}
	report.seconds = seconds_since(t0);
	write_timing(cfg.out_dir / "timing.csv", report, cfg.mode);
	return report;
}

namespace {

std::uint64_t fingerprint_batch(const std::vector<Organism>& batch, const std::vector<TrainReport>& reports) {
	std::uint64_t h = 0xcbf29ce484222325ull;
	auto mix = [&h](const void* p, std::size_t n) { h = fnv1a64(std::string_view(static_cast<const char*>(p), n), h); };
	for (std::size_t i = 0; i < batch.size(); ++i) {
		for (const auto& t : batch[i].net().params()) mix(t.data(), t.size() * sizeof(float));
		for (double l : reports[i].semantic_loss) mix(&l, sizeof l);
	}
	return h;
}

} // namespace

PerfReport validate_perf(const ExperimentConfig& cfg, unsigned max_workers, std::ostream* log) {
	cfg.validate();
	const std::uint64_t seed = cfg.seeds.front();
	DatasetFactory factory(cfg);
	RunData d = factory.make({0, seed});
	const int n = cfg.n_atoms;

	// Parent holding the target policy, so every offspring has a non-trivial
	// diagram for both labels.
	auto make_batch = [&](bool cache) {
		Net net = Net::xavier(derive_seed(seed, {7}));
		auto adam = NetAdam::for_params(net.params());
		Organism parent(1, 0, MutationTag{}, n, d.target, std::move(net), std::move(adam), cache);
		std::mt19937_64 rng(derive_seed(seed, {8}));
		return spawn_population(parent, cfg.n_splus, rng, 2, cache);
	};
	TrainConfig tc;
	tc.epochs = 1;
	tc.batch_size = cfg.batch_size;
	tc.loss = cfg.loss;

	PerfReport rep;
	rep.max_workers = std::max(1u, max_workers);
	for (bool cache : {true, false}) {
		for (unsigned w = 0; w <= rep.max_workers; ++w) {
			auto batch = make_batch(cache);
			std::vector<TrainReport> reports(batch.size());
			WorkerPool pool(w);
			const auto t0 = Clock::now();
			pool.parallel_for(batch.size(), [&](std::size_t i) {
				reports[i] = train(batch[i], d.splits.train, tc, derive_seed(seed, {9, i}));
			});
			PerfRow row;
			row.seconds = seconds_since(t0);
			row.workers = w;
			row.cache = cache;
			row.label = std::string(cache ? "cache-on" : "cache-off") + (w == 0 ? "/inline" : "/w" + std::to_string(w));
			row.fingerprint = fingerprint_batch(batch, reports);
			rep.organisms = batch.size();
			if (log) *log << row.label << ": " << row.seconds << " s" << std::endl;
			rep.training.push_back(std::move(row));
		}
	}

	auto time_of = [&](bool cache, unsigned w) {
		for (const auto& r : rep.training)
			if (r.cache == cache && r.workers == w) return r.seconds;
		return 0.0;
	};
	rep.identical = std::all_of(rep.training.begin(), rep.training.end(),
	                            [&](const PerfRow& r) { return r.fingerprint == rep.training.front().fingerprint; });
	rep.cache_not_slower = true;
	for (unsigned w = 0; w <= rep.max_workers; ++w)
		rep.cache_not_slower = rep.cache_not_slower && time_of(true, w) <= time_of(false, w);
	rep.training_speedup = time_of(false, 0) / std::max(time_of(true, 0), 1e-12);
	// worker scaling is only expected up to the number of hardware threads
	const unsigned saturation = std::min(rep.max_workers, std::max(1u, std::thread::hardware_concurrency()));
	rep.scaling_monotone = true;
	for (bool cache : {true, false})
		for (unsigned w = 2; w <= saturation; ++w)
			rep.scaling_monotone = rep.scaling_monotone && time_of(cache, w) <= time_of(cache, w - 1) * 1.10;
	rep.pool_overhead_ok = std::abs(time_of(true, 1) - time_of(true, 0)) <= 0.20 * time_of(true, 0);

	// shared-label semantic batch
	rep.batch_instances = 1000;
	std::vector<Decision> labels(rep.batch_instances, Decision::HeadPositive);
	std::vector<double> probs(rep.batch_instances * static_cast<std::size_t>(n));
	std::mt19937_64 prng(derive_seed(seed, {10}));
	std::uniform_real_distribution<double> unif(0.01, 0.99);
	for (double& p : probs) p = unif(prng);
	std::vector<double> g_on(probs.size()), g_off(probs.size());
	double l_on = 0.0, l_off = 0.0;
	constexpr int kRepeats = 5;
	rep.batch_seconds_on = rep.batch_seconds_off = 1e300;
	for (int r = 0; r < kRepeats; ++r) {
		CompilationCache on(true), off(false);
		auto t0 = Clock::now();
		l_on = semantic_batch(on, d.target, n, labels, probs, g_on);
		rep.batch_seconds_on = std::min(rep.batch_seconds_on, seconds_since(t0));
		t0 = Clock::now();
		l_off = semantic_batch(off, d.target, n, labels, probs, g_off);
		rep.batch_seconds_off = std::min(rep.batch_seconds_off, seconds_since(t0));
		rep.compilations_on = on.compilations();
		rep.compilations_off = off.compilations();
	}
	rep.batch_identical = std::memcmp(&l_on, &l_off, sizeof l_on) == 0 &&
	                      std::memcmp(g_on.data(), g_off.data(), g_on.size() * sizeof(double)) == 0;

	std::ostringstream csv;
	csv << "config,workers,cache,seconds,fingerprint\n";
	for (const auto& r : rep.training)
		csv << r.label << ',' << r.workers << ',' << (r.cache ? 1 : 0) << ',' << num(r.seconds) << ',' << r.fingerprint
		    << '\n';
	write_file(cfg.out_dir / "perf.csv", csv.str());

	nlohmann::ordered_json j;
	j["organisms"] = rep.organisms;
	j["max_workers"] = rep.max_workers;
	j["hardware_threads"] = std::thread::hardware_concurrency();
	j["training_speedup"] = rep.training_speedup;
	j["identical"] = rep.identical;
	j["cache_not_slower"] = rep.cache_not_slower;
	j["scaling_monotone"] = rep.scaling_monotone;
	j["pool_overhead_ok"] = rep.pool_overhead_ok;
	j["batch"] = {{"instances", rep.batch_instances},
	              {"compilations_on", rep.compilations_on},
	              {"compilations_off", rep.compilations_off},
	              {"seconds_on", rep.batch_seconds_on},
	              {"seconds_off", rep.batch_seconds_off},
	              {"speedup", rep.cache_speedup()},
	              {"identical", rep.batch_identical}};
	j["passed"] = rep.passed();
	write_file(cfg.out_dir / "perf.json", j.dump(2) + "\n");
	return rep;
}

} // namespace nesy
