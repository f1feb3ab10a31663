// A NeSy organism: a policy, a perception encoder and its optimizer state,
// with the chained deduce pipeline and abductive (semantic-loss) training.
#pragma once

#include "nesy/datagen.h"
#include "nesy/diagram.h"
#include "nesy/nn.h"
#include "nesy/symbolic.h"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nesy {

using Net = Encoder<float>;
using NetAdam = AdamState<float>;

enum class SymbolicMutation : std::uint8_t { Seed, Clone, Add, Simplify };
enum class NeuralMutation : std::uint8_t { Seed, Inherit, Reinit };

struct MutationTag {
	SymbolicMutation symbolic = SymbolicMutation::Seed;
	NeuralMutation neural = NeuralMutation::Seed;
	/// "S0/Npw", "S+/Nrw", "S-/Npw", ... or "seed".
	std::string to_string() const;
	friend bool operator==(const MutationTag&, const MutationTag&) = default;
};

/// Relative weights of the semantic and reconstruction losses (1:0 disables
/// the decoder).
struct LossRatio {
	double semantic = 1.0;
	double reconstruction = 0.0;
	bool uses_decoder() const { return reconstruction > 0.0; }
	std::string to_string() const;
	static LossRatio parse(const std::string& text);
};

class Organism {
public:
	Organism(std::uint64_t id, std::uint64_t parent_id, MutationTag tag, int n_atoms, Policy policy, Net net,
	         NetAdam adam, bool cache_enabled = true);

	std::uint64_t id() const { return id_; }
	std::uint64_t parent_id() const { return parent_id_; }
	const MutationTag& tag() const { return tag_; }
	int n_atoms() const { return n_atoms_; }
	const Policy& policy() const { return policy_; }

	Net& net() { return net_; }
	const Net& net() const { return net_; }
	NetAdam& adam() { return adam_; }
	const NetAdam& adam() const { return adam_; }
	CompilationCache& cache() { return cache_; }
	const CompilationCache& cache() const { return cache_; }

	bool has_decoder() const { return decoder_.has_value(); }
	Decoder<float>& decoder() { return *decoder_; }
	const Decoder<float>& decoder() const { return *decoder_; }
	AdamState<float>& decoder_adam() { return decoder_adam_; }
	void attach_decoder(Decoder<float> decoder, AdamState<float> adam);

	/// Drops compiled graphs (lineage copies do not need them).
	void release_cache() { cache_.clear(); }

private:
	std::uint64_t id_;
	std::uint64_t parent_id_;
	MutationTag tag_;
	int n_atoms_;
	Policy policy_;
	Net net_;
	NetAdam adam_;
	CompilationCache cache_;
	std::optional<Decoder<float>> decoder_;
	AdamState<float> decoder_adam_;
};

/// Probability that each glyph of a pool depicts a positive atom; entries
/// not referenced by the evaluated set are left at -1.
struct GlyphProbabilities {
	std::vector<double> p;
	double operator[](std::uint32_t glyph) const { return p[glyph]; }
};

/// Replaces the encoder with a fixed per-glyph probability (test stubs and
/// the perfect-perception oracle).
using PerceptionStub = std::function<double(const GlyphPool& pool, std::uint32_t glyph)>;

PerceptionStub perfect_perception();
PerceptionStub constant_perception(double p);

GlyphProbabilities perceive(const Net& net, const ExemplarSet& set);
GlyphProbabilities perceive(const PerceptionStub& stub, const ExemplarSet& set);

/// The Translator: p >= 0.5 hardens to positive.
Context harden(std::span<const double> p);

/// Full pipeline on raw images (n_atoms x 28 x 28).
Decision organism_deduce(const Organism& o, std::span<const float> images);
std::vector<Decision> deduce_all(const Policy& policy, const GlyphProbabilities& probs, const ExemplarSet& set);
std::vector<Decision> deduce_all(const Organism& o, const ExemplarSet& set);

struct PerformanceTriple {
	double correct = 0.0;
	double abstain = 0.0;
	double wrong = 0.0;
	friend bool operator==(const PerformanceTriple&, const PerformanceTriple&) = default;
};

PerformanceTriple score_decisions(std::span<const Decision> decisions, const ExemplarSet& set);
PerformanceTriple evaluate(const Organism& o, const ExemplarSet& set);
PerformanceTriple evaluate(const Policy& policy, const GlyphProbabilities& probs, const ExemplarSet& set);

struct StuckDiagnostics {
	double positive_fraction = 0.0;  // hardened atom readings that are positive
	bool uniform_perception = false; // positive_fraction >= threshold or <= 1 - threshold
	bool latest_rule_homogeneous = false;
	bool identical_deductions = false;
	/// A homogeneous latest rule over collapsed perception.
	bool stuck() const { return latest_rule_homogeneous && uniform_perception; }
};

inline constexpr double kUniformPerceptionThreshold = 0.98;

StuckDiagnostics detect_stuck(const Organism& o, const ExemplarSet& set);
StuckDiagnostics detect_stuck(const Policy& policy, const GlyphProbabilities& probs, const ExemplarSet& set);

struct TrainConfig {
	int epochs = 5;
	std::size_t batch_size = 2000;
	LossRatio loss;
	double gumbel_temperature = 1.0;
	/// Images per encoder pass; bounds workspace memory.
	std::size_t chunk = 256;
};

struct TrainReport {
	std::vector<double> semantic_loss;       // mean per epoch
	std::vector<double> reconstruction_loss; // mean per epoch (0 when disabled)
	std::size_t adam_steps = 0;
	std::size_t clamped = 0;                 // instances whose label was unreachable
	bool diverged = false;
	std::string error;
};

/// Semantic-loss training of the encoder against the organism's policy. Only
/// batches containing a label whose compiled diagram is not constant (or any
/// batch, when reconstruction is on) produce an Adam step. Deterministic in
/// (organism state, data, seed).
TrainReport train(Organism& o, const ExemplarSet& train_set, const TrainConfig& config, std::uint64_t seed);

/// Semantic loss and dL/dp for a batch of instances whose atom probabilities
/// are already known (instances x n_atoms, row-major). Used to time the
/// compiled-graph cache in isolation.
double semantic_batch(CompilationCache& cache, const Policy& policy, int n_atoms, std::span<const Decision> labels,
                      std::span<const double> probs, std::span<double> grads);

/// Snapshot directory: policy.txt, encoder.ckpt, meta.json.
void save_snapshot(const std::filesystem::path& dir, const Organism& o);
Organism load_snapshot(const std::filesystem::path& dir);

} // namespace nesy
