// Evolution of organisms: symbolic x neural mutations, relative fitness via
// the score matrix, threshold-group selection and the lineage of fittest
// organisms.
#pragma once

#include "nesy/organism.h"

#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

namespace nesy {

struct MutationSpec {
	SymbolicMutation symbolic = SymbolicMutation::Clone;
	Context context{};              // Add: the random total context
	Sign head = Sign::Positive;     // Add: head of the new rule
	int drop_index = -1;            // Simplify: literal removed from the latest body
	NeuralMutation neural = NeuralMutation::Inherit;
	std::uint64_t reinit_seed = 0;  // Reinit: Xavier seed

	MutationTag tag() const { return {symbolic, neural}; }
};

/// Offspring recipes in canonical order: S0, then S+ (context, +head) and
/// (context, -head) for each of n_splus contexts, then S- per droppable
/// literal; each paired with Npw and Nrw. A latest rule with a single
/// literal offers no S- (its body cannot become empty).
std::vector<MutationSpec> plan_mutations(const Policy& parent, int n_atoms, int n_splus, std::mt19937_64& rng);

/// Applies the symbolic part of a mutation.
Policy mutate_policy(const Policy& parent, const MutationSpec& m, int n_atoms);

/// Materializes the offspring; ids are first_id, first_id + 1, ...
std::vector<Organism> spawn_population(const Organism& parent, int n_splus, std::mt19937_64& rng,
                                       std::uint64_t first_id, bool cache_enabled = true);

enum class Status : std::uint8_t { Correct, Abstain, Wrong };
Status status_of(Decision decision, Decision label);

/// Rows are the parent's status, columns the offspring's.
int score(Status parent, Status offspring);

enum class FitnessGroup : std::uint8_t { Beneficial, Neutral, Detrimental };
char group_letter(FitnessGroup g);

struct FitnessReport {
	long raw = 0;
	double normalized = 0.0;  // raw / |E_val|
	FitnessGroup group = FitnessGroup::Neutral;
};

FitnessGroup classify(long raw, std::size_t n, double t);

FitnessReport relative_fitness(std::span<const Decision> parent, std::span<const Decision> offspring,
                               std::span<const Decision> labels, double t = 0.0);

/// Probability of each report being selected (zero outside the chosen group;
/// for the detrimental fallback, uniform over the maximum-score ties).
std::vector<double> selection_probabilities(std::span<const FitnessReport> reports, double k);

std::size_t select_fittest(std::span<const FitnessReport> reports, double k, std::mt19937_64& rng);

struct EvolutionConfig {
	int maxgen = 500;
	double t = 0.0;
	double k = 2.0;
	int n_splus = 5;
	TrainConfig train;
	double early_stop = 0.99;  // correct fraction of the fittest on E_val
	unsigned workers = 0;
	bool cache = true;
	EncoderShape shape;
	/// When set, perception is this stub and no network is trained.
	std::optional<PerceptionStub> stub;
};

struct LineageEntry {
	int generation = 0;
	Organism organism;
	FitnessReport fitness{};
	std::size_t population = 0;
	std::size_t beneficial = 0, neutral = 0, detrimental = 0;
	PerformanceTriple val{};
	PerformanceTriple test{};
	double semantic_loss = 0.0;        // last epoch of the fittest's training
	double reconstruction_loss = 0.0;
	bool diverged = false;             // the fittest's training diverged
	std::size_t diverged_offspring = 0;
	StuckDiagnostics stuck{};          // of the fittest, on E_val
};

struct Lineage {
	std::vector<LineageEntry> entries;
	bool early_stopped = false;
	const LineageEntry& fittest() const { return entries.back(); }
};

using GenerationCallback = std::function<void(const LineageEntry&)>;

/// Generation 0 is an empty-policy Xavier organism. Every later generation
/// trains its whole population on E_train, scores it against the parent on
/// E_val and appends the selected organism. Stops once the fittest reaches
/// `early_stop` correct on E_val or after maxgen generations; every entry is
/// then evaluated on E_test. Reproducible from `seed` for any worker count.
Lineage evolve(const EvolutionConfig& config, const ExemplarSplits& data, std::uint64_t seed,
               const GenerationCallback& on_generation = {});

/// One JSON object per entry.
void write_lineage_jsonl(std::ostream& out, const Lineage& lineage);

} // namespace nesy
