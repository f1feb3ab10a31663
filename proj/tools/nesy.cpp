// Command-line front end. Exit codes: 0 success, 2 usage or configuration,
// 3 data, 4 I/O, 5 performance validation failed, 1 anything else.
#include "nesy/harness.h"

#include "CLI11.hpp"

#include <iostream>
#include <thread>

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kIo = 4, kPerfFailed = 5 };

int fail(int code, const char* category, const std::string& what) {
	std::cerr << "nesy: " << category << " error: " << what << '\n';
	return code;
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"Evolution of neural-symbolic organisms"};

	std::string mode = "evolve", glyphs, loss, data_dir, out_dir = "runs";
	bool paper_scale = false, no_cache = false, quiet = false;
	int n_atoms = 0, maxgen = 0, n_splus = 0, epochs = 0, baseline_epochs = 0, policies = 0, seed_count = 0;
	std::size_t train_size = 0, val_size = 0, test_size = 0, batch_size = 0, per_class = 0;
	double t = 0, k = 0, noise = 0, early_stop = 0;
	unsigned workers = 0, max_workers = 0;
	std::uint64_t policy_seed = 0;
	std::vector<std::uint64_t> seeds;

	app.add_option("--mode", mode, "evolve | baseline | datagen | validate-perf")
	    ->check(CLI::IsMember({"evolve", "baseline", "datagen", "validate-perf"}));
	app.add_flag("--paper-scale", paper_scale, "8 atoms, MNIST, 20000/2000/2000, maxgen 500, batch 2000");
	app.add_option("--n-atoms", n_atoms);
	app.add_option("--train-size", train_size);
	app.add_option("--val-size", val_size);
	app.add_option("--test-size", test_size);
	app.add_option("--maxgen", maxgen);
	app.add_option("--t", t, "neutrality threshold");
	app.add_option("--k", k, "selection exponent");
	app.add_option("--n-splus", n_splus, "random contexts per generation");
	app.add_option("--epochs", epochs, "organism training epochs per generation");
	app.add_option("--baseline-epochs", baseline_epochs);
	app.add_option("--batch-size", batch_size);
	app.add_option("--loss", loss, "semantic:reconstruction, e.g. 1:0 or 3:1");
	app.add_option("--workers", workers, "worker threads (0 runs inline)");
	app.add_option("--max-workers", max_workers, "validate-perf: largest worker count timed");
	app.add_option("--seed", seeds, "run seed (repeatable)");
	app.add_option("--seeds", seed_count, "use seeds 1..N");
	app.add_option("--policies", policies, "target policies per seed");
	app.add_option("--policy-seed", policy_seed);
	app.add_option("--early-stop", early_stop);
	app.add_flag("--no-cache", no_cache, "recompile diagrams for every instance");
	app.add_option("--glyphs", glyphs, "synthetic | mnist")->check(CLI::IsMember({"synthetic", "mnist"}));
	app.add_option("--glyphs-per-class", per_class);
	app.add_option("--glyph-noise", noise);
	app.add_option("--data-dir", data_dir, std::string("MNIST IDX directory (default $") + nesy::kDataDirEnv + ")");
	app.add_option("--out", out_dir, "output directory");
	app.add_flag("--quiet", quiet);

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& e) {
		const int rc = app.exit(e);
		return rc == 0 ? kOk : kConfig;
	}

	try {
		auto cfg = paper_scale ? nesy::ExperimentConfig::paper_scale() : nesy::ExperimentConfig::desk();
		cfg.mode = nesy::parse_mode(mode);
		auto given = [&](const char* name) { return app.count(name) > 0; };
		if (given("--n-atoms")) cfg.n_atoms = n_atoms;
		if (given("--train-size")) cfg.sizes.train = train_size;
		if (given("--val-size")) cfg.sizes.val = val_size;
		if (given("--test-size")) cfg.sizes.test = test_size;
		if (given("--maxgen")) cfg.maxgen = maxgen;
		if (given("--t")) cfg.t = t;
		if (given("--k")) cfg.k = k;
		if (given("--n-splus")) cfg.n_splus = n_splus;
		if (given("--epochs")) cfg.epochs = epochs;
		if (given("--baseline-epochs")) cfg.baseline_epochs = baseline_epochs;
		if (given("--batch-size")) cfg.batch_size = batch_size;
		if (given("--loss")) {
			try {
				cfg.loss = nesy::LossRatio::parse(loss);
			} catch (const std::exception& e) {
				throw nesy::ConfigError(e.what());
			}
		}
		if (given("--workers")) cfg.workers = workers;
		if (given("--seed") && given("--seeds")) throw nesy::ConfigError("--seed and --seeds are exclusive");
		if (given("--seed")) cfg.seeds = seeds;
		if (given("--seeds")) {
			if (seed_count <= 0) throw nesy::ConfigError("--seeds must be positive");
			cfg.seeds.clear();
			for (int s = 1; s <= seed_count; ++s) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
		}
		if (given("--policies")) cfg.policies = policies;
		if (given("--policy-seed")) cfg.policy_seed = policy_seed;
		if (given("--early-stop")) cfg.early_stop = early_stop;
		if (no_cache) cfg.cache = false;
		if (given("--glyphs")) cfg.glyphs = nesy::parse_glyph_source(glyphs);
		if (given("--glyphs-per-class")) cfg.glyphs_per_class = per_class;
		if (given("--glyph-noise")) cfg.glyph_noise = noise;
		if (given("--data-dir")) cfg.data_dir = data_dir;
		cfg.out_dir = out_dir;

		std::ostream* log = quiet ? nullptr : &std::cerr;
		if (cfg.mode == nesy::Mode::ValidatePerf) {
			const unsigned w = given("--max-workers") ? max_workers : std::max(1u, std::thread::hardware_concurrency());
			const auto rep = nesy::validate_perf(cfg, w, log);
			std::cout << "organisms " << rep.organisms << ", training speedup (cache off/on) " << rep.training_speedup
			          << ", shared-label batch speedup " << rep.cache_speedup() << " (compilations "
			          << rep.compilations_on << " vs " << rep.compilations_off << ")\n"
			          << "identical " << rep.identical << ", cache not slower " << rep.cache_not_slower
			          << ", scaling monotone " << rep.scaling_monotone << ", pool overhead ok " << rep.pool_overhead_ok
			          << '\n';
			return rep.passed() ? kOk : kPerfFailed;
		}
		const auto rep = nesy::run_experiment(cfg, log);
		std::cout << rep.runs.size() << " run(s) written to " << cfg.out_dir.string() << " in " << rep.seconds
		          << " s\n";
		return kOk;
	} catch (const nesy::ConfigError& e) {
		return fail(kConfig, "configuration", e.what());
	} catch (const std::invalid_argument& e) {
		return fail(kConfig, "configuration", e.what());
	} catch (const nesy::DataError& e) {
		return fail(kData, "data", e.what());
	} catch (const nesy::IoError& e) {
		return fail(kIo, "I/O", e.what());
	} catch (const std::filesystem::filesystem_error& e) {
		return fail(kIo, "I/O", e.what());
	} catch (const std::exception& e) {
		return fail(kInternal, "internal", e.what());
	}
}
