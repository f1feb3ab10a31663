// Experiment orchestration: configuration, per-run datasets, artifact
// emission (lineage, per-generation CSV, summaries, interpolated aggregate)
// and the cache / worker-pool performance validation.
#pragma once

#include "nesy/baseline.h"
#include "nesy/evolution.h"

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace nesy {

class ConfigError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

enum class Mode : std::uint8_t { Evolve, Baseline, Datagen, ValidatePerf };
const char* to_string(Mode m);
Mode parse_mode(const std::string& text);
GlyphSource parse_glyph_source(const std::string& text);

/// Variable naming the directory holding the four MNIST IDX files.
inline constexpr const char* kDataDirEnv = "NESY_DATA_DIR";

struct ExperimentConfig {
	Mode mode = Mode::Evolve;
	int n_atoms = 4;
	SplitSizes sizes{2000, 500, 500};
	int maxgen = 100;
	double t = 0.0;
	double k = 2.0;
	int n_splus = 5;
	int epochs = 5;            // organism training epochs per generation
	int baseline_epochs = 50;
	std::size_t batch_size = 200;
	LossRatio loss;
	unsigned workers = 0;      // 0 runs everything on the calling thread
	std::vector<std::uint64_t> seeds{1};
	int policies = 1;          // target policies; every seed runs on each
	std::uint64_t policy_seed = 42;
	bool cache = true;
	double early_stop = 0.99;
	GlyphSource glyphs = GlyphSource::Synthetic;
	std::size_t glyphs_per_class = 8;
	double glyph_noise = 0.2;
	std::filesystem::path data_dir;  // MNIST; defaults to $NESY_DATA_DIR
	std::filesystem::path out_dir = "runs";

	static ExperimentConfig desk() { return {}; }
	/// 8 atoms, MNIST, 20000/2000/2000, maxgen 500, batch 2000, 100 baseline epochs.
	static ExperimentConfig paper_scale();

	/// Throws ConfigError.
	void validate() const;
	/// Everything except out_dir, so two output locations compare equal.
	std::string to_json() const;
};

struct RunKey {
	int policy = 0;
	std::uint64_t seed = 0;
	std::string name() const;  // "p0_s1"
};

std::vector<RunKey> run_keys(const ExperimentConfig& cfg);

struct RunData {
	Policy target;
	ExemplarSplits splits;
	DatasetManifest manifest;
};

/// The dataset of one run: target policy from (policy_seed, policy), glyph
/// pools and exemplar sampling from the run seed. MNIST pools are read once
/// and reused.
class DatasetFactory {
public:
	explicit DatasetFactory(const ExperimentConfig& cfg);
	RunData make(const RunKey& key);

private:
	ExperimentConfig cfg_;
	std::shared_ptr<const GlyphPool> mnist_train_, mnist_test_;
};

EvolutionConfig evolution_config(const ExperimentConfig& cfg);

struct RunSummary {
	RunKey key;
	std::string target;
	int generations = 0;
	bool early_stopped = false;
	PerformanceTriple val{}, test{};
	int stuck_generations = 0;
	bool settled = false;         // abstain dynamics property
	double baseline_accuracy = 0.0;
	int baseline_epochs = 0;
	bool diverged = false;
	double seconds = 0.0;         // timing only, never in deterministic files
};

struct ExperimentReport {
	std::vector<RunSummary> runs;
	double seconds = 0.0;
};

/// Final abstain at most `final_max` and its trailing `window`-entry moving
/// average never increases.
bool abstain_settles(const std::vector<double>& abstain, int window = 5, double final_max = 0.05);

/// Linear interpolation of a per-generation series onto steps 1..points.
std::vector<double> interpolate_unit_scale(const std::vector<double>& series, int points = 100);

struct Stats {
	double median = 0.0, mean = 0.0, sd = 0.0, min = 0.0, max = 0.0;
};
Stats describe(std::vector<double> values);

/// CSV writers (schema fixed; doubles printed with 17 significant digits).
void write_generations_csv(std::ostream& out, const Lineage& lineage);
void write_curve_csv(std::ostream& out, const BaselineReport& report);

/// Runs evolve, baseline or datagen for every run key and writes artifacts
/// under cfg.out_dir. Progress goes to `log` when non-null.
ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

struct PerfRow {
	std::string label;
	unsigned workers = 0;
	bool cache = true;
	double seconds = 0.0;
	std::uint64_t fingerprint = 0;  // final weights and losses of the whole batch
};

struct PerfReport {
	std::vector<PerfRow> training;
	std::size_t organisms = 0;
	// 1000-instance shared-label semantic batch
	std::size_t batch_instances = 0;
	std::size_t compilations_on = 0, compilations_off = 0;
	double batch_seconds_on = 0.0, batch_seconds_off = 0.0;
	bool batch_identical = false;
	double cache_speedup() const { return batch_seconds_on > 0 ? batch_seconds_off / batch_seconds_on : 0.0; }
	double training_speedup = 0.0;  // cache off / on, sequential
	bool identical = false;         // every training fingerprint agrees
	bool cache_not_slower = false;
	bool scaling_monotone = false;
	bool pool_overhead_ok = false;  // 1 worker within 20% of inline
	unsigned max_workers = 0;
	bool passed() const { return identical && batch_identical && cache_not_slower && scaling_monotone && pool_overhead_ok; }
};

/// Trains a fixed batch of offspring for one epoch under cache on/off and
/// worker counts 0..max_workers; times a 1000-instance semantic batch.
/// Writes perf.csv and perf.json under cfg.out_dir.
PerfReport validate_perf(const ExperimentConfig& cfg, unsigned max_workers, std::ostream* log = nullptr);

} // namespace nesy
