#include "nesy/baseline.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace nesy {

BaselineNet BaselineNet::xavier(int n_atoms, std::uint64_t seed, EncoderShape shape, int hidden) {
	if (n_atoms <= 0 || hidden <= 0) throw std::invalid_argument("baseline: bad dimensions");
	BaselineNet net;
	net.n_atoms = n_atoms;
	net.hidden = hidden;
	net.encoder = Encoder<float>::xavier(seed, shape);
	const int in = 2 * n_atoms;
	net.head.emplace_back(std::vector<int>{hidden, in});
	net.head.emplace_back(std::vector<int>{hidden});
	net.head.emplace_back(std::vector<int>{2, hidden});
	net.head.emplace_back(std::vector<int>{2});
	std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
	auto fill = [&](Tensor<float>& t, double fan_in, double fan_out) {
		const double bound = std::sqrt(6.0 / (fan_in + fan_out));
		std::uniform_real_distribution<double> dist(-bound, bound);
		for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(dist(rng));
	};
	fill(net.head[0], in, hidden);
	fill(net.head[2], hidden, 2);
	return net;
}

std::size_t BaselineNet::parameter_count() const {
	std::size_t n = encoder.parameter_count();
	for (const auto& t : head) n += t.size();
	return n;
}

namespace {

struct Features {
	std::vector<int> slot_of;            // pool glyph -> slot
	std::vector<std::uint32_t> glyphs;   // slot -> glyph
	std::vector<double> f;               // slot -> softmax (2 values)
};

void gather(const GlyphPool& pool, std::span<const std::uint32_t> glyphs, std::vector<float>& buf) {
	buf.resize(glyphs.size() * kImageSize);
	for (std::size_t i = 0; i < glyphs.size(); ++i) {
		const auto img = pool.image(glyphs[i]);
		std::copy(img.begin(), img.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * kImageSize));
	}
}

void softmax2(double z0, double z1, double* out) {
	const double m = std::max(z0, z1);
	const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
	out[0] = e0 / (e0 + e1);
	out[1] = e1 / (e0 + e1);
}

int target_of(Decision label) { return label == Decision::HeadPositive ? 0 : 1; }

// Head forward for one instance; returns the class probabilities and keeps
// the hidden activations for backward.
void head_forward(const BaselineNet& net, const double* x, std::vector<double>& hidden, double* probs) {
	const int in = 2 * net.n_atoms;
	const float* w1 = net.head[0].data();
	const float* b1 = net.head[1].data();
	const float* w2 = net.head[2].data();
	const float* b2 = net.head[3].data();
	hidden.resize(static_cast<std::size_t>(net.hidden));
	for (int j = 0; j < net.hidden; ++j) {
		double a = b1[j];
		for (int i = 0; i < in; ++i) a += static_cast<double>(w1[j * in + i]) * x[i];
		hidden[j] = a > 0.0 ? a : 0.0;
	}
	double z[2];
	for (int o = 0; o < 2; ++o) {
		double a = b2[o];
		for (int j = 0; j < net.hidden; ++j) a += static_cast<double>(w2[o * net.hidden + j]) * hidden[j];
		z[o] = a;
	}
	softmax2(z[0], z[1], probs);
}

double cross_entropy(const double* probs, int target) { return -std::log(std::max(probs[target], 1e-300)); }

} // namespace

SetMetrics evaluate_baseline(const BaselineNet& net, const ExemplarSet& set, std::size_t chunk) {
	SetMetrics m;
	if (set.empty()) return m;
	const GlyphPool& pool = *set.pool;
	std::vector<double> f(pool.size() * 2, 0.0);
	std::vector<char> seen(pool.size(), 0);
	std::vector<std::uint32_t> glyphs;
	for (const auto& inst : set.instances)
		for (auto g : inst.glyphs)
			if (!seen[g]) {
				seen[g] = 1;
				glyphs.push_back(g);
			}
	Encoder<float>::Workspace ws;
	std::vector<float> buf;
	for (std::size_t lo = 0; lo < glyphs.size(); lo += chunk) {
		const std::size_t cnt = std::min(chunk, glyphs.size() - lo);
		const auto part = std::span<const std::uint32_t>(glyphs).subspan(lo, cnt);
		gather(pool, part, buf);
		net.encoder.forward(buf, static_cast<int>(cnt), ws);
		for (std::size_t i = 0; i < cnt; ++i) softmax2(ws.logits[2 * i], ws.logits[2 * i + 1], &f[2 * part[i]]);
	}
	std::vector<double> x(2 * static_cast<std::size_t>(net.n_atoms)), hidden;
	double loss = 0.0;
	std::size_t correct = 0;
	for (const auto& inst : set.instances) {
		for (int a = 0; a < net.n_atoms; ++a) {
			x[2 * a] = f[2 * inst.glyphs[a]];
			x[2 * a + 1] = f[2 * inst.glyphs[a] + 1];
		}
		double p[2];
		head_forward(net, x.data(), hidden, p);
		const int t = target_of(inst.label);
		loss += cross_entropy(p, t);
		const int pred = p[0] >= p[1] ? 0 : 1;
		correct += pred == t ? 1 : 0;
	}
	m.loss = loss / static_cast<double>(set.size());
	m.accuracy = static_cast<double>(correct) / static_cast<double>(set.size());
	return m;
}

BaselineReport train_baseline(BaselineNet& net, const ExemplarSplits& data, const BaselineConfig& cfg,
                              std::uint64_t seed) {
	if (cfg.epochs < 0 || cfg.batch_size == 0 || cfg.chunk == 0) throw std::invalid_argument("baseline: bad configuration");
	const ExemplarSet& set = data.train;
	if (set.empty()) throw std::invalid_argument("baseline: empty training set");
	if (set.n_atoms != net.n_atoms) throw std::invalid_argument("baseline: atom count mismatch");
	const GlyphPool& pool = *set.pool;
	const std::size_t n = static_cast<std::size_t>(net.n_atoms);
	const int in = 2 * net.n_atoms;

	BaselineReport report;
	std::mt19937_64 rng(seed);
	auto enc_adam = AdamState<float>::for_params(net.encoder.params());
	auto head_adam = AdamState<float>::for_params(net.head);
	TensorList<float> enc_grads = zeros_like(net.encoder.params());
	TensorList<float> head_grads = zeros_like(net.head);
	std::vector<double> hg_w1, hg_b1, hg_w2, hg_b2;

	std::vector<std::size_t> order(set.size());
	std::iota(order.begin(), order.end(), std::size_t{0});
	std::vector<int> slot_of(pool.size(), -1);
	std::vector<std::uint32_t> glyphs;
	std::vector<double> feat, dfeat, x(2 * n), hidden, dh(static_cast<std::size_t>(net.hidden));
	std::vector<float> buf, dlogits;
	Encoder<float>::Workspace ws;

	for (int epoch = 1; epoch <= cfg.epochs && !report.diverged; ++epoch) {
		std::shuffle(order.begin(), order.end(), rng);
		for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
			const std::size_t bsize = std::min(cfg.batch_size, order.size() - start);
			const auto batch = std::span<const std::size_t>(order).subspan(start, bsize);
			glyphs.clear();
			for (auto idx : batch)
				for (auto g : set.instances[idx].glyphs)
					if (slot_of[g] < 0) {
						slot_of[g] = static_cast<int>(glyphs.size());
						glyphs.push_back(g);
					}
			const std::size_t slots = glyphs.size();
			const std::size_t n_chunks = (slots + cfg.chunk - 1) / cfg.chunk;
			feat.assign(2 * slots, 0.0);
			dfeat.assign(2 * slots, 0.0);
			auto forward_chunk = [&](std::size_t c) {
				const std::size_t lo = c * cfg.chunk, cnt = std::min(cfg.chunk, slots - lo);
				gather(pool, std::span<const std::uint32_t>(glyphs).subspan(lo, cnt), buf);
				net.encoder.forward(buf, static_cast<int>(cnt), ws);
				for (std::size_t i = 0; i < cnt; ++i)
					softmax2(ws.logits[2 * i], ws.logits[2 * i + 1], &feat[2 * (lo + i)]);
			};
			for (std::size_t c = 0; c < n_chunks; ++c) forward_chunk(c);

			hg_w1.assign(net.head[0].size(), 0.0);
			hg_b1.assign(net.head[1].size(), 0.0);
			hg_w2.assign(net.head[2].size(), 0.0);
			hg_b2.assign(net.head[3].size(), 0.0);
			const double inv_b = 1.0 / static_cast<double>(bsize);
			const float* w1 = net.head[0].data();
			const float* w2 = net.head[2].data();
			for (auto idx : batch) {
				const auto& inst = set.instances[idx];
				for (std::size_t a = 0; a < n; ++a) {
					const auto s = static_cast<std::size_t>(slot_of[inst.glyphs[a]]);
					x[2 * a] = feat[2 * s];
					x[2 * a + 1] = feat[2 * s + 1];
				}
				double p[2];
				head_forward(net, x.data(), hidden, p);
				const int t = target_of(inst.label);
				const double dz[2] = {(p[0] - (t == 0)) * inv_b, (p[1] - (t == 1)) * inv_b};
				for (int o = 0; o < 2; ++o) {
					hg_b2[o] += dz[o];
					for (int j = 0; j < net.hidden; ++j) hg_w2[o * net.hidden + j] += dz[o] * hidden[j];
				}
				for (int j = 0; j < net.hidden; ++j) {
					const double g = hidden[j] > 0.0 ? dz[0] * w2[j] + dz[1] * w2[net.hidden + j] : 0.0;
					dh[j] = g;
					hg_b1[j] += g;
					for (int i = 0; i < in; ++i) hg_w1[j * in + i] += g * x[i];
				}
				for (std::size_t a = 0; a < n; ++a) {
					const auto s = static_cast<std::size_t>(slot_of[inst.glyphs[a]]);
					for (int k = 0; k < 2; ++k) {
						double g = 0.0;
						const int i = static_cast<int>(2 * a) + k;
						for (int j = 0; j < net.hidden; ++j) g += static_cast<double>(w1[j * in + i]) * dh[j];
						dfeat[2 * s + k] += g;
					}
				}
			}

			for (auto& g : enc_grads) g.fill(0.0f);
			for (std::size_t c = 0; c < n_chunks; ++c) {
				const std::size_t lo = c * cfg.chunk, cnt = std::min(cfg.chunk, slots - lo);
				if (n_chunks > 1) forward_chunk(c);
				dlogits.resize(2 * cnt);
				for (std::size_t i = 0; i < cnt; ++i) {
					// d softmax / dz = diag(f) - f f^T
					const double f0 = feat[2 * (lo + i)], f1 = feat[2 * (lo + i) + 1];
					const double u = (dfeat[2 * (lo + i)] - dfeat[2 * (lo + i) + 1]) * f0 * f1;
					dlogits[2 * i] = static_cast<float>(u);
					dlogits[2 * i + 1] = static_cast<float>(-u);
				}
				net.encoder.backward(ws, dlogits, enc_grads);
			}
			for (auto g : glyphs) slot_of[g] = -1;

			auto copy = [](const std::vector<double>& src, Tensor<float>& dst) {
				for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]);
			};
			copy(hg_w1, head_grads[0]);
			copy(hg_b1, head_grads[1]);
			copy(hg_w2, head_grads[2]);
			copy(hg_b2, head_grads[3]);
			try {
				// Check both before touching either, so a divergent step changes nothing.
				for (const auto& g : enc_grads)
					if (!g.all_finite()) throw DivergenceError("baseline: non-finite encoder gradient");
				for (const auto& g : head_grads)
					if (!g.all_finite()) throw DivergenceError("baseline: non-finite head gradient");
				adam_step(enc_adam, net.encoder.params(), enc_grads);
				adam_step(head_adam, net.head, head_grads);
			} catch (const DivergenceError& e) {
				report.diverged = true;
				report.error = e.what();
				break;
			}
			++report.adam_steps;
		}
		EpochMetrics m;
		m.epoch = epoch;
		const auto tr = evaluate_baseline(net, data.train, cfg.chunk);
		const auto va = evaluate_baseline(net, data.val, cfg.chunk);
		const auto te = evaluate_baseline(net, data.test, cfg.chunk);
		m.train_loss = tr.loss;
		m.train_accuracy = tr.accuracy;
		m.val_loss = va.loss;
		m.val_accuracy = va.accuracy;
		m.test_loss = te.loss;
		m.test_accuracy = te.accuracy;
		report.curve.push_back(m);
		if (!std::isfinite(tr.loss)) {
			report.diverged = true;
			report.error = "non-finite training loss";
		}
	}
	return report;
}

} // namespace nesy
