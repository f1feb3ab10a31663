// Target policies, exemplar sets and the digit glyph pools they are drawn
// with (MNIST IDX files or synthetic strokes).
#pragma once

#include "nesy/symbolic.h"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nesy {

class DataError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

enum class GlyphSource : std::uint8_t { Mnist, Synthetic };
const char* to_string(GlyphSource s);

/// Images of digits 1 (positive atom) and 2 (negative atom), 28x28 in [0,1].
struct GlyphPool {
	GlyphSource source = GlyphSource::Synthetic;
	std::vector<float> pixels;        // size() x kImageSize
	std::vector<std::uint8_t> digits; // 1 or 2

	std::size_t size() const { return digits.size(); }
	std::span<const float> image(std::size_t i) const;
	std::size_t count(int digit) const;
	std::vector<std::uint32_t> indices_of(int digit) const;
	void add(std::span<const float> image, int digit);
};

/// Reads an IDX image/label file pair and keeps the 1s and 2s.
GlyphPool load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// `count` glyphs per class rendered from fixed stroke templates, jittered
/// by up to floor(5 * noise) pixels and perturbed by uniform per-pixel noise
/// in [-noise, noise]. noise must be in [0, 0.5).
GlyphPool synth_glyphs(std::size_t count, double noise, std::uint64_t seed);

/// Noise-free template of digit 1 or 2.
std::vector<float> glyph_template(int digit);

struct TargetPolicySpec {
	int n_atoms = 8;
	int min_rules = 3;
	int max_rules = 8;
	int min_body = 1;
	int max_body = 4;
	/// Each head label must cover at least this fraction of all contexts.
	double min_label_fraction = 0.10;
	/// Abstentions must cover less than this fraction of all contexts.
	double max_abstain_fraction = 0.90;
	int max_attempts = 100000;
};

struct LabelFractions {
	double positive = 0.0;
	double negative = 0.0;
	double abstain = 0.0;
};

/// Fractions of the 2^n total contexts labeled head / -head / abstained.
LabelFractions label_fractions(const Policy& policy, int n_atoms);

Policy generate_target_policy(const TargetPolicySpec& spec, std::mt19937_64& rng);

enum class Split : std::uint8_t { Train, Val, Test };
const char* to_string(Split s);

struct Instance {
	std::vector<std::uint32_t> glyphs;  // one pool index per atom
	Decision label = Decision::Abstain;
	Context context;                    // ground truth, never read by learners
};

struct ExemplarSet {
	Split split = Split::Train;
	int n_atoms = 0;
	std::shared_ptr<const GlyphPool> pool;
	std::vector<Instance> instances;

	std::size_t size() const { return instances.size(); }
	bool empty() const { return instances.empty(); }
	/// n_atoms x kImageSize images of instance i.
	std::vector<float> images(std::size_t i) const;
};

struct SplitSizes {
	std::size_t train = 20000;
	std::size_t val = 2000;
	std::size_t test = 2000;
};

struct ExemplarSplits {
	ExemplarSet train;
	ExemplarSet val;
	ExemplarSet test;
	std::size_t rejections = 0;
};

/// Train and val draw glyphs from `train_pool`, test from `test_pool`.
/// Contexts are sampled uniformly with replacement; abstained ones rejected.
ExemplarSplits build_exemplar_set(const Policy& target, int n_atoms, const SplitSizes& sizes,
                                  std::shared_ptr<const GlyphPool> train_pool,
                                  std::shared_ptr<const GlyphPool> test_pool, std::mt19937_64& rng);

struct DatasetManifest {
	std::uint64_t seed = 0;
	int n_atoms = 0;
	std::string target_policy;
	GlyphSource glyphs = GlyphSource::Synthetic;
};

/// Writes manifest.json and images.bin (little-endian float32, instances in
/// split order train, val, test, each n_atoms x 28 x 28).
void save_exemplar_sets(const std::filesystem::path& dir, const ExemplarSplits& splits, const DatasetManifest& manifest);
/// Inverse of save_exemplar_sets; every stored image becomes its own glyph.
ExemplarSplits load_exemplar_sets(const std::filesystem::path& dir, DatasetManifest* manifest = nullptr);

} // namespace nesy
