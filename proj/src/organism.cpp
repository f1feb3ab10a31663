#include "nesy/organism.h"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace nesy {

std::string MutationTag::to_string() const {
	if (symbolic == SymbolicMutation::Seed) return "seed";
	std::string s;
	switch (symbolic) {
	case SymbolicMutation::Clone: s = "S0"; break;
	case SymbolicMutation::Add: s = "S+"; break;
	case SymbolicMutation::Simplify: s = "S-"; break;
	case SymbolicMutation::Seed: break;
	}
	return s + (neural == NeuralMutation::Reinit ? "/Nrw" : "/Npw");
}

std::string LossRatio::to_string() const {
	std::ostringstream out;
	out << semantic << ':' << reconstruction;
	return out.str();
}

LossRatio LossRatio::parse(const std::string& text) {
	const auto colon = text.find(':');
	if (colon == std::string::npos) throw std::invalid_argument("loss ratio must look like 1:0 or 3:1");
	LossRatio r;
	try {
		std::size_t used = 0;
		r.semantic = std::stod(text.substr(0, colon), &used);
		if (used != colon) throw std::invalid_argument("");
		const std::string rest = text.substr(colon + 1);
		r.reconstruction = std::stod(rest, &used);
		if (used != rest.size()) throw std::invalid_argument("");
	} catch (const std::exception&) {
		throw std::invalid_argument("loss ratio must look like 1:0 or 3:1");
	}
	if (r.semantic < 0 || r.reconstruction < 0 || r.semantic + r.reconstruction <= 0)
		throw std::invalid_argument("loss ratio weights must be non-negative and not both zero");
	return r;
}

Organism::Organism(std::uint64_t id, std::uint64_t parent_id, MutationTag tag, int n_atoms, Policy policy, Net net,
                   NetAdam adam, bool cache_enabled)
    : id_(id), parent_id_(parent_id), tag_(tag), n_atoms_(n_atoms), policy_(std::move(policy)), net_(std::move(net)),
      adam_(std::move(adam)), cache_(cache_enabled) {
	if (n_atoms_ <= 0 || n_atoms_ > kMaxAtoms) throw std::invalid_argument("organism: bad atom count");
	for (const auto& r : policy_.rules()) validate_rule(r, n_atoms_);
	if (adam_.m.size() != net_.params().size()) adam_ = NetAdam::for_params(net_.params());
}

void Organism::attach_decoder(Decoder<float> decoder, AdamState<float> adam) {
	if (adam.m.size() != decoder.params().size()) adam = AdamState<float>::for_params(decoder.params());
	decoder_ = std::move(decoder);
	decoder_adam_ = std::move(adam);
}

// ---------------------------------------------------------------------------
// Perception

namespace {

// Softmax component 0 from logits, in double so it saturates late.
double positive_probability(double z0, double z1) { return 1.0 / (1.0 + std::exp(z1 - z0)); }

std::vector<std::uint32_t> referenced_glyphs(const ExemplarSet& set) {
	std::vector<char> seen(set.pool ? set.pool->size() : 0, 0);
	std::vector<std::uint32_t> out;
	for (const auto& inst : set.instances)
		for (auto g : inst.glyphs)
			if (!seen[g]) {
				seen[g] = 1;
				out.push_back(g);
			}
	std::sort(out.begin(), out.end());
	return out;
}

void gather(const GlyphPool& pool, std::span<const std::uint32_t> glyphs, std::vector<float>& buf) {
	buf.resize(glyphs.size() * kImageSize);
	for (std::size_t i = 0; i < glyphs.size(); ++i) {
		const auto img = pool.image(glyphs[i]);
		std::copy(img.begin(), img.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * kImageSize));
	}
}

constexpr std::size_t kPerceiveChunk = 256;

} // namespace

PerceptionStub perfect_perception() {
	return [](const GlyphPool& pool, std::uint32_t g) { return pool.digits[g] == 1 ? 1.0 : 0.0; };
}

PerceptionStub constant_perception(double p) {
	return [p](const GlyphPool&, std::uint32_t) { return p; };
}

GlyphProbabilities perceive(const Net& net, const ExemplarSet& set) {
	GlyphProbabilities out;
	if (!set.pool) return out;
	out.p.assign(set.pool->size(), -1.0);
	const auto glyphs = referenced_glyphs(set);
	Net::Workspace ws;
	std::vector<float> buf;
	for (std::size_t start = 0; start < glyphs.size(); start += kPerceiveChunk) {
		const std::size_t n = std::min(kPerceiveChunk, glyphs.size() - start);
		const auto chunk = std::span<const std::uint32_t>(glyphs).subspan(start, n);
		gather(*set.pool, chunk, buf);
		net.forward(buf, static_cast<int>(n), ws);
		for (std::size_t i = 0; i < n; ++i) out.p[chunk[i]] = positive_probability(ws.logits[2 * i], ws.logits[2 * i + 1]);
	}
	return out;
}

GlyphProbabilities perceive(const PerceptionStub& stub, const ExemplarSet& set) {
	GlyphProbabilities out;
	if (!set.pool) return out;
	out.p.assign(set.pool->size(), -1.0);
	for (auto g : referenced_glyphs(set)) out.p[g] = stub(*set.pool, g);
	return out;
}

Context harden(std::span<const double> p) {
	if (p.size() > static_cast<std::size_t>(kMaxAtoms)) throw std::invalid_argument("harden: too many atoms");
	std::uint32_t bits = 0;
	for (std::size_t i = 0; i < p.size(); ++i)
		if (p[i] >= 0.5) bits |= 1u << i;
	return Context(static_cast<int>(p.size()), bits);
}

Decision organism_deduce(const Organism& o, std::span<const float> images) {
	const int n = o.n_atoms();
	if (images.size() != static_cast<std::size_t>(n) * kImageSize)
		throw std::invalid_argument("organism_deduce: expected n_atoms images of 28x28");
	Net::Workspace ws;
	o.net().forward(images, n, ws);
	std::vector<double> p(n);
	for (int i = 0; i < n; ++i) p[i] = positive_probability(ws.logits[2 * i], ws.logits[2 * i + 1]);
	return deduce(o.policy(), harden(p));
}

namespace {

Context context_of(const Instance& inst, const GlyphProbabilities& probs) {
	std::uint32_t bits = 0;
	for (std::size_t i = 0; i < inst.glyphs.size(); ++i)
		if (probs[inst.glyphs[i]] >= 0.5) bits |= 1u << i;
	return Context(static_cast<int>(inst.glyphs.size()), bits);
}

} // namespace

std::vector<Decision> deduce_all(const Policy& policy, const GlyphProbabilities& probs, const ExemplarSet& set) {
	std::vector<Decision> out;
	out.reserve(set.size());
	for (const auto& inst : set.instances) out.push_back(deduce(policy, context_of(inst, probs)));
	return out;
}

std::vector<Decision> deduce_all(const Organism& o, const ExemplarSet& set) {
	return deduce_all(o.policy(), perceive(o.net(), set), set);
}

PerformanceTriple score_decisions(std::span<const Decision> decisions, const ExemplarSet& set) {
	if (decisions.size() != set.size()) throw std::invalid_argument("score_decisions: size mismatch");
	PerformanceTriple t;
	if (set.empty()) return t;
	std::size_t c = 0, a = 0, w = 0;
	for (std::size_t i = 0; i < decisions.size(); ++i) {
		if (decisions[i] == Decision::Abstain)
			++a;
		else if (decisions[i] == set.instances[i].label)
			++c;
		else
			++w;
	}
	const double n = static_cast<double>(set.size());
	t.correct = static_cast<double>(c) / n;
	t.abstain = static_cast<double>(a) / n;
	t.wrong = static_cast<double>(w) / n;
	return t;
}

PerformanceTriple evaluate(const Policy& policy, const GlyphProbabilities& probs, const ExemplarSet& set) {
	return score_decisions(deduce_all(policy, probs, set), set);
}

PerformanceTriple evaluate(const Organism& o, const ExemplarSet& set) { return score_decisions(deduce_all(o, set), set); }

StuckDiagnostics detect_stuck(const Policy& policy, const GlyphProbabilities& probs, const ExemplarSet& set) {
	StuckDiagnostics d;
	d.latest_rule_homogeneous = !policy.rules().empty() && is_homogeneous(policy.latest());
	std::size_t pos = 0, total = 0;
	for (const auto& inst : set.instances)
		for (auto g : inst.glyphs) {
			pos += probs[g] >= 0.5 ? 1 : 0;
			++total;
		}
	d.positive_fraction = total ? static_cast<double>(pos) / static_cast<double>(total) : 0.0;
	d.uniform_perception = total > 0 && (d.positive_fraction >= kUniformPerceptionThreshold ||
	                                     d.positive_fraction <= 1.0 - kUniformPerceptionThreshold);
	const auto decisions = deduce_all(policy, probs, set);
	d.identical_deductions =
	    !decisions.empty() && std::all_of(decisions.begin(), decisions.end(), [&](Decision x) { return x == decisions[0]; });
	return d;
}

StuckDiagnostics detect_stuck(const Organism& o, const ExemplarSet& set) {
	return detect_stuck(o.policy(), perceive(o.net(), set), set);
}

// ---------------------------------------------------------------------------
// Training

double semantic_batch(CompilationCache& cache, const Policy& policy, int n_atoms, std::span<const Decision> labels,
                      std::span<const double> probs, std::span<double> grads) {
	const std::size_t n = static_cast<std::size_t>(n_atoms);
	if (probs.size() != labels.size() * n || grads.size() != probs.size())
		throw std::invalid_argument("semantic_batch: size mismatch");
	double total = 0.0;
	for (std::size_t i = 0; i < labels.size(); ++i) {
		const auto graph = cache.get_or_compile(policy, labels[i], n_atoms);
		total += semantic_loss(*graph, probs.subspan(i * n, n), grads.subspan(i * n, n)).loss;
	}
	return labels.empty() ? 0.0 : total / static_cast<double>(labels.size());
}

namespace {

struct BatchScratch {
	std::vector<int> slot_of;                  // pool glyph -> batch slot, -1 if absent
	std::vector<std::uint32_t> glyphs;         // slot -> pool glyph
	std::vector<double> occurrences;           // slot -> references in batch
	std::vector<double> p;                     // slot -> positive probability
	std::vector<double> dp;                    // slot -> dL/dp
	std::vector<std::shared_ptr<const WmcGraph>> graphs;
	std::vector<float> images, dlogits, code, dout, dcode;
	std::vector<double> inst_p, inst_grad;
};

} // namespace

TrainReport train(Organism& o, const ExemplarSet& set, const TrainConfig& cfg, std::uint64_t seed) {
	TrainReport report;
	if (cfg.epochs < 0 || cfg.batch_size == 0 || cfg.chunk == 0) throw std::invalid_argument("train: bad configuration");
	if (set.n_atoms != o.n_atoms()) throw std::invalid_argument("train: atom count mismatch");
	if (!set.pool || set.empty()) {
		report.semantic_loss.assign(static_cast<std::size_t>(cfg.epochs), 0.0);
		report.reconstruction_loss.assign(static_cast<std::size_t>(cfg.epochs), 0.0);
		return report;
	}
	const bool recon = cfg.loss.uses_decoder();
	if (recon && !o.has_decoder())
		o.attach_decoder(Decoder<float>::xavier(seed ^ 0xdec0de, o.net().shape()), AdamState<float>{});
	const double w_sem = cfg.loss.semantic, w_rec = cfg.loss.reconstruction;
	const std::size_t n = static_cast<std::size_t>(o.n_atoms());
	const GlyphPool& pool = *set.pool;

	std::mt19937_64 rng(seed);
	std::vector<std::size_t> order(set.size());
	std::iota(order.begin(), order.end(), std::size_t{0});

	BatchScratch s;
	s.slot_of.assign(pool.size(), -1);
	TensorList<float> grads = zeros_like(o.net().params());
	TensorList<float> dec_grads;
	if (recon) dec_grads = zeros_like(o.decoder().params());
	Net::Workspace ws;
	Decoder<float>::Workspace dws;
	std::vector<float> dlogit_chunk;

	for (int epoch = 0; epoch < cfg.epochs && !report.diverged; ++epoch) {
		std::shuffle(order.begin(), order.end(), rng);
		double sem_sum = 0.0, rec_sum = 0.0;
		std::size_t rec_batches = 0;

		for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
			const std::size_t bsize = std::min(cfg.batch_size, order.size() - start);
			const auto batch = std::span<const std::size_t>(order).subspan(start, bsize);

			s.graphs.resize(bsize);
			bool informative = false;
			for (std::size_t b = 0; b < bsize; ++b) {
				s.graphs[b] = o.cache().get_or_compile(o.policy(), set.instances[batch[b]].label, o.n_atoms());
				informative = informative || !s.graphs[b]->is_constant();
			}
			if (!informative && !recon) {
				// Nothing depends on the network: the loss is the same for any weights.
				for (std::size_t b = 0; b < bsize; ++b) {
					if (s.graphs[b]->is_false()) {
						sem_sum += -std::log(kLossEpsilon);
						++report.clamped;
					}
				}
				continue;
			}

			// Unique glyphs of the batch, in order of first appearance.
			s.glyphs.clear();
			s.occurrences.clear();
			for (auto idx : batch)
				for (auto g : set.instances[idx].glyphs) {
					if (s.slot_of[g] < 0) {
						s.slot_of[g] = static_cast<int>(s.glyphs.size());
						s.glyphs.push_back(g);
						s.occurrences.push_back(0.0);
					}
					s.occurrences[static_cast<std::size_t>(s.slot_of[g])] += 1.0;
				}
			const std::size_t slots = s.glyphs.size();
			const std::size_t n_chunks = (slots + cfg.chunk - 1) / cfg.chunk;
			s.p.assign(slots, 0.0);
			s.dp.assign(slots, 0.0);

			auto forward_chunk = [&](std::size_t c) {
				const std::size_t lo = c * cfg.chunk, cnt = std::min(cfg.chunk, slots - lo);
				gather(pool, std::span<const std::uint32_t>(s.glyphs).subspan(lo, cnt), s.images);
				o.net().forward(s.images, static_cast<int>(cnt), ws);
				for (std::size_t i = 0; i < cnt; ++i)
					s.p[lo + i] = positive_probability(ws.logits[2 * i], ws.logits[2 * i + 1]);
			};

			// Pass 1: probabilities for every glyph, then the semantic loss.
			for (std::size_t c = 0; c < n_chunks; ++c) forward_chunk(c);
			s.inst_p.resize(n);
			s.inst_grad.resize(n);
			const double inv_b = 1.0 / static_cast<double>(bsize);
			for (std::size_t b = 0; b < bsize; ++b) {
				const auto& inst = set.instances[batch[b]];
				for (std::size_t i = 0; i < n; ++i) s.inst_p[i] = s.p[static_cast<std::size_t>(s.slot_of[inst.glyphs[i]])];
				const auto sl = semantic_loss(*s.graphs[b], s.inst_p, s.inst_grad);
				sem_sum += sl.loss;
				if (sl.clamped) ++report.clamped;
				for (std::size_t i = 0; i < n; ++i)
					s.dp[static_cast<std::size_t>(s.slot_of[inst.glyphs[i]])] += w_sem * inv_b * s.inst_grad[i];
			}

			// Pass 2: backward per chunk (re-running forward when the batch spans
			// several chunks, so only one workspace is ever alive).
			for (auto& g : grads) g.fill(0.0f);
			for (auto& g : dec_grads) g.fill(0.0f);
			double rec_batch = 0.0;
			const double total_refs = static_cast<double>(bsize * n);
			for (std::size_t c = 0; c < n_chunks; ++c) {
				const std::size_t lo = c * cfg.chunk, cnt = std::min(cfg.chunk, slots - lo);
				if (n_chunks > 1) forward_chunk(c);
				dlogit_chunk.assign(2 * cnt, 0.0f);
				std::vector<double> dz(2 * cnt, 0.0);
				for (std::size_t i = 0; i < cnt; ++i) {
					const double p = s.p[lo + i];
					const double g = s.dp[lo + i] * p * (1.0 - p);
					dz[2 * i] += g;
					dz[2 * i + 1] -= g;
				}
				if (recon) {
					// Gumbel-Softmax code per glyph, decoded and compared to the glyph.
					s.code.resize(2 * cnt);
					for (std::size_t i = 0; i < cnt; ++i) {
						const auto y = gumbel_softmax({ws.logits[2 * i], ws.logits[2 * i + 1]}, cfg.gumbel_temperature, rng);
						s.code[2 * i] = static_cast<float>(y[0]);
						s.code[2 * i + 1] = static_cast<float>(y[1]);
					}
					o.decoder().forward(s.code, static_cast<int>(cnt), dws);
					s.dout.resize(cnt * kImageSize);
					for (std::size_t i = 0; i < cnt; ++i) {
						const double weight = s.occurrences[lo + i] / total_refs;
						auto out = std::span<float>(s.dout).subspan(i * kImageSize, kImageSize);
						const double m = mse<float>(std::span<const float>(dws.out).subspan(i * kImageSize, kImageSize),
						                            pool.image(s.glyphs[lo + i]), out);
						rec_batch += weight * m;
						for (auto& v : out) v = static_cast<float>(v * w_rec * weight);
					}
					s.dcode.resize(2 * cnt);
					o.decoder().backward(s.code, dws, s.dout, dec_grads, s.dcode);
					// d softmax((z+g)/tau) / dz = (diag(y) - y y^T) / tau
					for (std::size_t i = 0; i < cnt; ++i) {
						const double y0 = s.code[2 * i], y1 = s.code[2 * i + 1];
						const double u = (static_cast<double>(s.dcode[2 * i]) - s.dcode[2 * i + 1]) * y0 * y1 /
						                 cfg.gumbel_temperature;
						dz[2 * i] += u;
						dz[2 * i + 1] -= u;
					}
				}
				for (std::size_t i = 0; i < 2 * cnt; ++i) dlogit_chunk[i] = static_cast<float>(dz[i]);
				o.net().backward(ws, dlogit_chunk, grads);
			}
			for (auto g : s.glyphs) s.slot_of[g] = -1;
			if (recon) {
				rec_sum += rec_batch;
				++rec_batches;
			}

			// Both updates or neither, so a divergent batch leaves the last valid weights.
			const auto finite = [](const TensorList<float>& ts) {
				return std::all_of(ts.begin(), ts.end(), [](const Tensor<float>& t) { return t.all_finite(); });
			};
			if (!finite(grads) || !finite(dec_grads)) {
				report.diverged = true;
				report.error = "non-finite gradient";
				break;
			}
			adam_step(o.adam(), o.net().params(), grads);
			if (recon) adam_step(o.decoder_adam(), o.decoder().params(), dec_grads);
			++report.adam_steps;
		}
		report.semantic_loss.push_back(sem_sum / static_cast<double>(set.size()));
		report.reconstruction_loss.push_back(rec_batches ? rec_sum / static_cast<double>(rec_batches) : 0.0);
		if (!std::isfinite(report.semantic_loss.back()) || !std::isfinite(report.reconstruction_loss.back())) {
			report.diverged = true;
			report.error = "non-finite loss";
		}
	}
	return report;
}

// ---------------------------------------------------------------------------
// Snapshots

void save_snapshot(const std::filesystem::path& dir, const Organism& o) {
	std::filesystem::create_directories(dir);
	{
		std::ofstream out(dir / "policy.txt", std::ios::binary);
		out << render_policy(o.policy());
		if (!out) throw std::runtime_error("cannot write " + (dir / "policy.txt").string());
	}
	{
		std::ofstream out(dir / "encoder.ckpt", std::ios::binary);
		save_checkpoint(out, o.net().architecture(), o.net().params());
		if (!out) throw std::runtime_error("cannot write " + (dir / "encoder.ckpt").string());
	}
	nlohmann::ordered_json j;
	j["id"] = o.id();
	j["parent_id"] = o.parent_id();
	j["mutation"] = o.tag().to_string();
	j["n_atoms"] = o.n_atoms();
	j["conv1"] = o.net().shape().conv1;
	j["conv2"] = o.net().shape().conv2;
	j["fc1"] = o.net().shape().fc1;
	j["fc2"] = o.net().shape().fc2;
	j["adam_step"] = o.adam().step;
	std::ofstream out(dir / "meta.json", std::ios::binary);
	out << j.dump(2) << '\n';
	if (!out) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
}

namespace {

MutationTag parse_tag(const std::string& s) {
	MutationTag t;
	if (s == "seed") return t;
	if (s.size() != 6 || s[2] != '/') throw std::runtime_error("snapshot: bad mutation tag " + s);
	const std::string sym = s.substr(0, 2), neu = s.substr(3);
	if (sym == "S0") t.symbolic = SymbolicMutation::Clone;
	else if (sym == "S+") t.symbolic = SymbolicMutation::Add;
	else if (sym == "S-") t.symbolic = SymbolicMutation::Simplify;
	else throw std::runtime_error("snapshot: bad mutation tag " + s);
	if (neu == "Npw") t.neural = NeuralMutation::Inherit;
	else if (neu == "Nrw") t.neural = NeuralMutation::Reinit;
	else throw std::runtime_error("snapshot: bad mutation tag " + s);
	return t;
}

} // namespace

Organism load_snapshot(const std::filesystem::path& dir) {
	std::ifstream mf(dir / "meta.json");
	if (!mf) throw std::runtime_error("cannot open " + (dir / "meta.json").string());
	const auto j = nlohmann::json::parse(mf);
	const int n_atoms = j.at("n_atoms").get<int>();
	EncoderShape shape{j.at("conv1").get<int>(), j.at("conv2").get<int>(), j.at("fc1").get<int>(), j.at("fc2").get<int>()};

	std::ifstream pf(dir / "policy.txt");
	if (!pf) throw std::runtime_error("cannot open " + (dir / "policy.txt").string());
	std::stringstream text;
	text << pf.rdbuf();
	Policy policy = parse_policy(text.str(), n_atoms);

	Net net(shape);
	std::ifstream cf(dir / "encoder.ckpt", std::ios::binary);
	if (!cf) throw std::runtime_error("cannot open " + (dir / "encoder.ckpt").string());
	load_checkpoint(cf, net.architecture(), net.params());
	auto adam = NetAdam::for_params(net.params());
	return Organism(j.at("id").get<std::uint64_t>(), j.at("parent_id").get<std::uint64_t>(),
	                parse_tag(j.at("mutation").get<std::string>()), n_atoms, std::move(policy), std::move(net),
	                std::move(adam));
}

} // namespace nesy
