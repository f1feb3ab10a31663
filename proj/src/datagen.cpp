#include "nesy/datagen.h"

#include "nesy/nn.h"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace nesy {

const char* to_string(GlyphSource s) { return s == GlyphSource::Mnist ? "mnist" : "synthetic"; }

const char* to_string(Split s) {
	switch (s) {
	case Split::Train: return "train";
	case Split::Val: return "val";
	case Split::Test: return "test";
	}
	return "?";
}

std::span<const float> GlyphPool::image(std::size_t i) const {
	return std::span<const float>(pixels).subspan(i * kImageSize, kImageSize);
}

std::size_t GlyphPool::count(int digit) const {
	return static_cast<std::size_t>(std::count(digits.begin(), digits.end(), static_cast<std::uint8_t>(digit)));
}

std::vector<std::uint32_t> GlyphPool::indices_of(int digit) const {
	std::vector<std::uint32_t> out;
	for (std::size_t i = 0; i < digits.size(); ++i)
		if (digits[i] == digit) out.push_back(static_cast<std::uint32_t>(i));
	return out;
}

void GlyphPool::add(std::span<const float> img, int digit) {
	if (img.size() != static_cast<std::size_t>(kImageSize)) throw DataError("glyph must be 28x28");
	pixels.insert(pixels.end(), img.begin(), img.end());
	digits.push_back(static_cast<std::uint8_t>(digit));
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
	std::ifstream in(p, std::ios::binary);
	if (!in) throw DataError("cannot open " + p.string());
	return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
	if (off + 4 > b.size()) throw DataError("IDX: truncated header");
	return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
	       std::uint32_t(b[off + 3]);
}

} // namespace

GlyphPool load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
	const auto img = read_file(images_path);
	const auto lab = read_file(labels_path);
	if (img.size() < 4 || be32(img, 0) != 0x00000803u) throw DataError("IDX: bad image magic in " + images_path.string());
	if (lab.size() < 4 || be32(lab, 0) != 0x00000801u) throw DataError("IDX: bad label magic in " + labels_path.string());
	const std::uint32_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
	const std::uint32_t n_labels = be32(lab, 4);
	if (rows != kImageSide || cols != kImageSide) throw DataError("IDX: images are not 28x28");
	if (n != n_labels) throw DataError("IDX: image and label counts differ");
	if (img.size() < 16 + std::size_t(n) * kImageSize) throw DataError("IDX: truncated image data");
	if (lab.size() < 8 + std::size_t(n)) throw DataError("IDX: truncated label data");

	GlyphPool pool;
	pool.source = GlyphSource::Mnist;
	std::vector<float> buf(kImageSize);
	for (std::uint32_t i = 0; i < n; ++i) {
		const int digit = lab[8 + i];
		if (digit != 1 && digit != 2) continue;
		const unsigned char* px = img.data() + 16 + std::size_t(i) * kImageSize;
		for (int j = 0; j < kImageSize; ++j) buf[j] = static_cast<float>(px[j]) / 255.0f;
		pool.add(buf, digit);
	}
	return pool;
}

// ---------------------------------------------------------------------------
// Synthetic glyphs

namespace {

struct Pt {
	double x, y;
};

double seg_distance(Pt p, Pt a, Pt b) {
	const double vx = b.x - a.x, vy = b.y - a.y;
	const double len2 = vx * vx + vy * vy;
	double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
	t = std::clamp(t, 0.0, 1.0);
	const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
	return std::sqrt(dx * dx + dy * dy);
}

const std::vector<std::vector<Pt>>& strokes(int digit) {
	static const std::vector<std::vector<Pt>> one = {
	    {{11.0, 8.5}, {14.5, 5.0}, {14.5, 23.0}},
	    {{11.0, 23.0}, {18.0, 23.0}},
	};
	static const std::vector<std::vector<Pt>> two = {
	    {{8.5, 9.5}, {10.5, 6.5}, {14.0, 5.0}, {17.5, 6.5}, {19.0, 9.5}, {18.0, 13.0}, {8.5, 22.5}},
	    {{8.5, 22.5}, {20.0, 22.5}},
	};
	return digit == 1 ? one : two;
}

constexpr double kStrokeRadius = 1.4;

} // namespace

std::vector<float> glyph_template(int digit) {
	if (digit != 1 && digit != 2) throw std::invalid_argument("glyph_template: digit must be 1 or 2");
	std::vector<float> img(kImageSize, 0.0f);
	for (int y = 0; y < kImageSide; ++y)
		for (int x = 0; x < kImageSide; ++x) {
			double d = 1e9;
			for (const auto& poly : strokes(digit))
				for (std::size_t i = 0; i + 1 < poly.size(); ++i) d = std::min(d, seg_distance({x + 0.5, y + 0.5}, poly[i], poly[i + 1]));
			img[y * kImageSide + x] = static_cast<float>(std::clamp(kStrokeRadius + 0.5 - d, 0.0, 1.0));
		}
	return img;
}

GlyphPool synth_glyphs(std::size_t count, double noise, std::uint64_t seed) {
	if (!(noise >= 0.0 && noise < 0.5)) throw std::invalid_argument("synth_glyphs: noise must be in [0, 0.5)");
	std::mt19937_64 rng(seed);
	const int max_shift = static_cast<int>(std::floor(noise * 5.0));
	std::uniform_int_distribution<int> shift(-max_shift, max_shift);
	std::uniform_real_distribution<double> jitter(-noise, noise);
	const std::array<std::vector<float>, 2> templates = {glyph_template(1), glyph_template(2)};

	GlyphPool pool;
	pool.source = GlyphSource::Synthetic;
	pool.pixels.reserve(2 * count * kImageSize);
	std::vector<float> img(kImageSize);
	for (std::size_t i = 0; i < count; ++i)
		for (int digit = 1; digit <= 2; ++digit) {
			const auto& tpl = templates[digit - 1];
			const int dx = shift(rng), dy = shift(rng);
			for (int y = 0; y < kImageSide; ++y)
				for (int x = 0; x < kImageSide; ++x) {
					const int sx = x - dx, sy = y - dy;
					double v = (sx >= 0 && sx < kImageSide && sy >= 0 && sy < kImageSide) ? tpl[sy * kImageSide + sx] : 0.0;
					if (noise > 0.0) v += jitter(rng);
					img[y * kImageSide + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
				}
			pool.add(img, digit);
		}
	return pool;
}

// ---------------------------------------------------------------------------
// Target policies

LabelFractions label_fractions(const Policy& policy, int n_atoms) {
	const std::uint32_t total = std::uint32_t{1} << n_atoms;
	std::size_t pos = 0, neg = 0, abst = 0;
	for (std::uint32_t bits = 0; bits < total; ++bits) {
		switch (deduce(policy, Context(n_atoms, bits))) {
		case Decision::HeadPositive: ++pos; break;
		case Decision::HeadNegative: ++neg; break;
		case Decision::Abstain: ++abst; break;
		}
	}
	const double t = static_cast<double>(total);
	return {pos / t, neg / t, abst / t};
}

Policy generate_target_policy(const TargetPolicySpec& spec, std::mt19937_64& rng) {
	if (spec.n_atoms < 1 || spec.n_atoms > 16 || spec.min_rules < 1 || spec.max_rules < spec.min_rules ||
	    spec.min_body < 1 || spec.max_body < spec.min_body)
		throw std::invalid_argument("generate_target_policy: invalid spec");
	std::uniform_int_distribution<int> n_rules(spec.min_rules, spec.max_rules);
	std::uniform_int_distribution<int> body_len(spec.min_body, std::min(spec.max_body, spec.n_atoms));
	std::bernoulli_distribution coin(0.5);
	std::vector<int> atoms(spec.n_atoms);

	for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
		std::vector<Rule> rules(static_cast<std::size_t>(n_rules(rng)));
		for (Rule& r : rules) {
			std::iota(atoms.begin(), atoms.end(), 0);
			std::shuffle(atoms.begin(), atoms.end(), rng);
			const int len = body_len(rng);
			std::vector<int> chosen(atoms.begin(), atoms.begin() + len);
			std::sort(chosen.begin(), chosen.end());
			for (int a : chosen) r.body.push_back({Atom{a}, coin(rng) ? Sign::Positive : Sign::Negative});
			r.head = coin(rng) ? Sign::Positive : Sign::Negative;
		}
		Policy p(std::move(rules));
		const LabelFractions f = label_fractions(p, spec.n_atoms);
		if (f.positive >= spec.min_label_fraction && f.negative >= spec.min_label_fraction &&
		    f.abstain < spec.max_abstain_fraction)
			return p;
	}
	throw DataError("generate_target_policy: resampling budget exhausted");
}

// ---------------------------------------------------------------------------
// Exemplar sets

std::vector<float> ExemplarSet::images(std::size_t i) const {
	std::vector<float> out;
	out.reserve(static_cast<std::size_t>(n_atoms) * kImageSize);
	for (std::uint32_t g : instances.at(i).glyphs) {
		auto img = pool->image(g);
		out.insert(out.end(), img.begin(), img.end());
	}
	return out;
}

ExemplarSplits build_exemplar_set(const Policy& target, int n_atoms, const SplitSizes& sizes,
                                  std::shared_ptr<const GlyphPool> train_pool,
                                  std::shared_ptr<const GlyphPool> test_pool, std::mt19937_64& rng) {
	if (n_atoms < 1 || n_atoms > kMaxAtoms) throw std::invalid_argument("build_exemplar_set: invalid atom count");
	for (const auto* pool : {train_pool.get(), test_pool.get()})
		if (!pool || pool->count(1) == 0 || pool->count(2) == 0) throw DataError("glyph pool is missing digit 1 or 2");

	ExemplarSplits out;
	const std::uint32_t mask = n_atoms >= 32 ? ~0u : (std::uint32_t{1} << n_atoms) - 1u;

	auto fill = [&](ExemplarSet& set, Split split, std::size_t size, std::shared_ptr<const GlyphPool> pool) {
		set.split = split;
		set.n_atoms = n_atoms;
		set.pool = pool;
		set.instances.reserve(size);
		const std::array<std::vector<std::uint32_t>, 2> by_digit = {pool->indices_of(2), pool->indices_of(1)};
		const std::size_t budget = 1000 * size + 1000;
		std::size_t attempts = 0;
		while (set.instances.size() < size) {
			if (++attempts > budget) throw DataError("build_exemplar_set: target abstains too often");
			Context ctx(n_atoms, static_cast<std::uint32_t>(rng()) & mask);
			Decision label = deduce(target, ctx);
			if (label == Decision::Abstain) {
				++out.rejections;
				continue;
			}
			Instance inst;
			inst.label = label;
			inst.context = ctx;
			inst.glyphs.resize(n_atoms);
			for (int a = 0; a < n_atoms; ++a) {
				const auto& choices = by_digit[ctx.sign(a) == Sign::Positive ? 1 : 0];
				std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
				inst.glyphs[a] = choices[pick(rng)];
			}
			set.instances.push_back(std::move(inst));
		}
	};
	fill(out.train, Split::Train, sizes.train, train_pool);
	fill(out.val, Split::Val, sizes.val, train_pool);
	fill(out.test, Split::Test, sizes.test, test_pool);
	return out;
}

// ---------------------------------------------------------------------------
// Persistence

void save_exemplar_sets(const std::filesystem::path& dir, const ExemplarSplits& splits, const DatasetManifest& m) {
	std::filesystem::create_directories(dir);
	nlohmann::ordered_json j;
	j["format"] = "nesy-exemplars";
	j["version"] = 1;
	j["seed"] = m.seed;
	j["n_atoms"] = m.n_atoms;
	j["glyphs"] = to_string(m.glyphs);
	j["target_policy"] = m.target_policy;
	j["image_file"] = "images.bin";
	j["image_shape"] = {28, 28};
	for (const ExemplarSet* set : {&splits.train, &splits.val, &splits.test}) {
		std::string labels, contexts;
		for (const Instance& inst : set->instances) {
			labels += inst.label == Decision::HeadPositive ? '+' : '-';
			for (int a = 0; a < set->n_atoms; ++a) contexts += inst.context.sign(a) == Sign::Positive ? '+' : '-';
		}
		j["splits"][to_string(set->split)] = {{"size", set->size()}, {"labels", labels}, {"contexts", contexts}};
	}
	std::ofstream mf(dir / "manifest.json", std::ios::binary);
	if (!mf) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
	mf << j.dump(2) << '\n';

	std::ofstream bin(dir / "images.bin", std::ios::binary);
	if (!bin) throw std::runtime_error("cannot write " + (dir / "images.bin").string());
	std::vector<unsigned char> buf(static_cast<std::size_t>(kImageSize) * 4);
	for (const ExemplarSet* set : {&splits.train, &splits.val, &splits.test})
		for (const Instance& inst : set->instances)
			for (std::uint32_t g : inst.glyphs) {
				auto img = set->pool->image(g);
				for (int k = 0; k < kImageSize; ++k) {
					const std::uint32_t u = std::bit_cast<std::uint32_t>(img[k]);
					for (int b = 0; b < 4; ++b) buf[4 * k + b] = static_cast<unsigned char>(u >> (8 * b));
				}
				bin.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
			}
	if (!bin) throw std::runtime_error("write failed: " + (dir / "images.bin").string());
}

ExemplarSplits load_exemplar_sets(const std::filesystem::path& dir, DatasetManifest* manifest) {
	std::ifstream mf(dir / "manifest.json");
	if (!mf) throw DataError("cannot open " + (dir / "manifest.json").string());
	nlohmann::json j;
	try {
		mf >> j;
	} catch (const nlohmann::json::exception& e) {
		throw DataError(std::string("manifest: ") + e.what());
	}
	if (j.value("format", "") != "nesy-exemplars") throw DataError("manifest: unknown format");
	const int n_atoms = j.at("n_atoms").get<int>();
	DatasetManifest m;
	m.seed = j.at("seed").get<std::uint64_t>();
	m.n_atoms = n_atoms;
	m.target_policy = j.at("target_policy").get<std::string>();
	m.glyphs = j.at("glyphs").get<std::string>() == "mnist" ? GlyphSource::Mnist : GlyphSource::Synthetic;
	if (manifest) *manifest = m;

	const auto raw = read_file(dir / "images.bin");
	std::size_t offset = 0;
	ExemplarSplits out;
	for (auto [set, split] : {std::pair{&out.train, Split::Train}, {&out.val, Split::Val}, {&out.test, Split::Test}}) {
		const auto& js = j.at("splits").at(to_string(split));
		const std::size_t size = js.at("size").get<std::size_t>();
		const std::string labels = js.at("labels").get<std::string>();
		const std::string contexts = js.at("contexts").get<std::string>();
		if (labels.size() != size || contexts.size() != size * n_atoms) throw DataError("manifest: split sizes inconsistent");
		auto pool = std::make_shared<GlyphPool>();
		pool->source = m.glyphs;
		set->split = split;
		set->n_atoms = n_atoms;
		std::vector<float> img(kImageSize);
		for (std::size_t i = 0; i < size; ++i) {
			Instance inst;
			inst.label = labels[i] == '+' ? Decision::HeadPositive : Decision::HeadNegative;
			std::uint32_t bits = 0;
			for (int a = 0; a < n_atoms; ++a) {
				const bool pos = contexts[i * n_atoms + a] == '+';
				if (pos) bits |= std::uint32_t{1} << a;
				if (offset + static_cast<std::size_t>(kImageSize) * 4 > raw.size()) throw DataError("images.bin: truncated");
				for (int k = 0; k < kImageSize; ++k) {
					std::uint32_t u = 0;
					for (int b = 0; b < 4; ++b) u |= std::uint32_t(raw[offset + 4 * k + b]) << (8 * b);
					img[k] = std::bit_cast<float>(u);
				}
				offset += static_cast<std::size_t>(kImageSize) * 4;
				inst.glyphs.push_back(static_cast<std::uint32_t>(pool->size()));
				pool->add(img, pos ? 1 : 2);
			}
			inst.context = Context(n_atoms, bits);
			set->instances.push_back(std::move(inst));
		}
		set->pool = pool;
	}
	return out;
}

} // namespace nesy
