#include "doctest.h"
#include "oracles.h"

#include "nesy/diagram.h"
#include "nesy/nn.h"

#include <sstream>

using namespace nesy;

namespace {

std::vector<double> random_images(int count, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	std::uniform_real_distribution<double> u(0.0, 1.0);
	std::vector<double> img(static_cast<std::size_t>(count) * kImageSize);
	for (double& x : img) x = u(rng);
	return img;
}

// sum_b sum_k w[2b+k] * logits[2b+k]
double linear_probe(const Encoder<double>& net, std::span<const double> images, int batch, std::span<const double> w) {
	Encoder<double>::Workspace ws;
	net.forward(images, batch, ws);
	double s = 0.0;
	for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * ws.logits[i];
	return s;
}

} // namespace

TEST_CASE("xavier: deterministic, bounded, zero biases") {
	auto a = Encoder<float>::xavier(3);
	auto b = Encoder<float>::xavier(3);
	auto c = Encoder<float>::xavier(4);
	CHECK(a == b);
	CHECK_FALSE(a == c);
	CHECK(a.parameter_count() == c.parameter_count());

	const auto& fc1 = a.params()[4];
	REQUIRE(fc1.shape() == std::vector<int>{120, 400});
	const double bound = std::sqrt(6.0 / 520.0);
	CHECK(bound == doctest::Approx(0.10742).epsilon(1e-4));
	float lo = 1, hi = -1;
	for (std::size_t i = 0; i < fc1.size(); ++i) {
		lo = std::min(lo, fc1[i]);
		hi = std::max(hi, fc1[i]);
	}
	CHECK(lo >= -bound);
	CHECK(hi <= bound);
	CHECK(hi > 0.9 * bound);
	for (std::size_t i = 1; i < a.params().size(); i += 2)
		for (std::size_t j = 0; j < a.params()[i].size(); ++j) CHECK(a.params()[i][j] == 0.0f);
}

TEST_CASE("encoder: shapes and softmax range") {
	auto net = Encoder<double>::xavier(1);
	CHECK(net.params()[0].shape() == std::vector<int>{8, 3, 3, 1});
	CHECK(net.params()[2].shape() == std::vector<int>{16, 3, 3, 8});
	CHECK(net.params()[8].shape() == std::vector<int>{2, 84});
	const auto img = random_images(5, 2);
	Encoder<double>::Workspace ws;
	net.forward(img, 5, ws);
	for (int b = 0; b < 5; ++b) {
		CHECK(ws.probs[2 * b] > 0.0);
		CHECK(ws.probs[2 * b] < 1.0);
		CHECK(ws.probs[2 * b] + ws.probs[2 * b + 1] == doctest::Approx(1.0).epsilon(1e-14));
	}
	CHECK_THROWS_AS(net.forward(std::span<const double>(img).first(100), 1, ws), std::invalid_argument);
}

TEST_CASE("encode_sequence: length, shared weights") {
	auto net = Encoder<float>::xavier(9);
	auto d = random_images(4, 5);
	std::vector<float> img(d.begin(), d.end());
	std::copy_n(img.begin(), kImageSize, img.begin() + 2 * kImageSize);  // image 0 == image 2
	auto p = encode_sequence<float>(net, img, 4);
	REQUIRE(p.size() == 4);
	for (double x : p) CHECK((x > 0.0 && x < 1.0));
	CHECK(p[0] == p[2]);
	CHECK_THROWS_AS(encode_sequence<float>(net, img, 3), std::invalid_argument);
}

TEST_CASE("encode_sequence: fresh nets read near one half") {
	double sum = 0.0;
	const int nets = 40, per = 25;
	for (int s = 0; s < nets; ++s) {
		auto net = Encoder<float>::xavier(100 + s);
		auto d = random_images(per, 1000 + s);
		std::vector<float> img(d.begin(), d.end());
		for (double x : encode_sequence<float>(net, img, per)) sum += x;
	}
	const double mean = sum / (nets * per);
	CHECK(mean >= 0.3);
	CHECK(mean <= 0.7);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
	auto net = Encoder<double>::xavier(2);
	const auto img = random_images(3, 8);
	Encoder<double>::Workspace ws;
	net.forward(img, 3, ws);
	auto grads = zeros_like(net.params());
	std::vector<double> up(6, 0.0);
	net.backward(ws, up, grads);
	for (const auto& g : grads)
		for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == 0.0);
}

TEST_CASE("backward: matches central differences on random parameters") {
	auto net = Encoder<double>::xavier(12);
	// biases nonzero so every parameter class is exercised
	std::mt19937_64 rng(5);
	std::uniform_real_distribution<double> small(-0.05, 0.05);
	for (std::size_t i = 1; i < net.params().size(); i += 2)
		for (std::size_t j = 0; j < net.params()[i].size(); ++j) net.params()[i][j] = small(rng);

	const int batch = 3;
	const auto img = random_images(batch, 77);
	std::vector<double> w(2 * batch);
	for (double& x : w) x = small(rng) * 20;

	Encoder<double>::Workspace ws;
	net.forward(img, batch, ws);
	auto grads = zeros_like(net.params());
	net.backward(ws, w, grads);

	// ReLU and max-pool kinks sit densely in conv1's input space; a step of
	// 1e-6 keeps the difference quotient on one linear piece.
	const double h = 1e-6;
	int checked = 0;
	double worst = 0.0;
	for (std::size_t tensor = 0; tensor < net.params().size(); ++tensor) {
		for (int rep = 0; rep < 2; ++rep) {
			const std::size_t j = rng() % net.params()[tensor].size();
			double& param = net.params()[tensor][j];
			const double keep = param;
			param = keep + h;
			const double fp = linear_probe(net, img, batch, w);
			param = keep - h;
			const double fm = linear_probe(net, img, batch, w);
			param = keep;
			const double fd = (fp - fm) / (2 * h);
			worst = std::max(worst, oracle::rel_err(grads[tensor][j], fd, 1e-6));
			++checked;
		}
	}
	CHECK(checked == 20);
	CHECK(worst <= 1e-3);
}

TEST_CASE("backward: duplicated images accumulate per-position contributions") {
	auto net = Encoder<double>::xavier(4);
	auto one = random_images(1, 3);
	std::vector<double> two(one);
	two.insert(two.end(), one.begin(), one.end());
	const std::vector<double> g1{0.3, -0.7}, g2{0.3, -0.7, -1.1, 0.2}, g3{-1.1, 0.2};

	auto grads_of = [&](std::span<const double> images, int batch, std::span<const double> up) {
		Encoder<double>::Workspace ws;
		net.forward(images, batch, ws);
		auto g = zeros_like(net.params());
		net.backward(ws, up, g);
		return g;
	};
	auto a = grads_of(one, 1, g1);
	auto b = grads_of(one, 1, g3);
	auto both = grads_of(two, 2, g2);
	for (std::size_t t = 0; t < both.size(); ++t)
		for (std::size_t j = 0; j < both[t].size(); ++j) REQUIRE(both[t][j] == doctest::Approx(a[t][j] + b[t][j]).epsilon(1e-10));
}

TEST_CASE("full chain: semantic loss through the encoder matches finite differences") {
	// 4-atom toy: loss = -ln WMC(label formula) with p_i from the encoder
	const int n = 4;
	Policy pol = parse_policy("a1, -a2 implies head\na3 implies -head\na1, a4 implies head", n);
	WmcGraph graph(compile(abduce(pol, Decision::HeadPositive), n));
	auto net = Encoder<double>::xavier(31);
	const auto img = random_images(n, 41);

	auto loss_of = [&](const Encoder<double>& e, std::vector<double>* dlogits) {
		Encoder<double>::Workspace ws;
		e.forward(img, n, ws);
		std::vector<double> p(n), g(n);
		for (int i = 0; i < n; ++i) p[i] = 1.0 / (1.0 + std::exp(ws.logits[2 * i + 1] - ws.logits[2 * i]));
		const auto sl = semantic_loss(graph, p, g);
		if (dlogits) {
			dlogits->assign(2 * n, 0.0);
			for (int i = 0; i < n; ++i) {
				(*dlogits)[2 * i] = g[i] * p[i] * (1 - p[i]);
				(*dlogits)[2 * i + 1] = -(*dlogits)[2 * i];
			}
		}
		return sl.loss;
	};
	std::vector<double> dlogits;
	loss_of(net, &dlogits);
	Encoder<double>::Workspace ws;
	net.forward(img, n, ws);
	auto grads = zeros_like(net.params());
	net.backward(ws, dlogits, grads);

	std::mt19937_64 rng(6);
	double worst = 0.0;
	const double h = 1e-5;
	for (int k = 0; k < 30; ++k) {
		const std::size_t t = rng() % net.params().size();
		const std::size_t j = rng() % net.params()[t].size();
		double& w = net.params()[t][j];
		const double keep = w;
		w = keep + h;
		const double fp = loss_of(net, nullptr);
		w = keep - h;
		const double fm = loss_of(net, nullptr);
		w = keep;
		worst = std::max(worst, oracle::rel_err(grads[t][j], (fp - fm) / (2 * h), 1e-7));
	}
	CHECK(worst <= 1e-3);
}

TEST_CASE("adam: zero gradient, first step, scalar simulation") {
	TensorList<double> p{Tensor<double>({3}, 1.0)};
	auto st = AdamState<double>::for_params(p);
	TensorList<double> g{Tensor<double>({3}, 0.0)};
	st.m[0].fill(0.5);
	adam_step(st, p, g);
	CHECK(st.step == 1);
	CHECK(st.m[0][0] == doctest::Approx(0.45));
	// bias-corrected zero-gradient step still moves by the decayed momentum; a
	// fresh state does not move at all
	auto fresh = AdamState<double>::for_params(p);
	TensorList<double> q{Tensor<double>({3}, 1.0)};
	adam_step(fresh, q, g);
	CHECK(q[0][0] == 1.0);

	TensorList<double> w{Tensor<double>({2}, 0.0)};
	auto s = AdamState<double>::for_params(w);
	TensorList<double> g1{Tensor<double>({2})};
	g1[0][0] = 3.0;
	g1[0][1] = -0.01;
	adam_step(s, w, g1);
	CHECK(w[0][0] == doctest::Approx(-1e-3).epsilon(1e-6));
	CHECK(w[0][1] == doctest::Approx(1e-3).epsilon(1e-4));
	CHECK(std::abs(w[0][0]) <= 1e-3 * (1 + 1e-6));

	// scalar oracle: constant gradient, closed-form Adam recursion
	TensorList<double> x{Tensor<double>({1}, 0.5)};
	auto sx = AdamState<double>::for_params(x);
	TensorList<double> gx{Tensor<double>({1}, 0.2)};
	double m = 0, v = 0, ref = 0.5, prev = 0.5;
	for (int t = 1; t <= 50; ++t) {
		adam_step(sx, x, gx);
		m = 0.9 * m + 0.1 * 0.2;
		v = 0.999 * v + 0.001 * 0.04;
		ref -= 1e-3 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
		CHECK(x[0][0] < prev);
		prev = x[0][0];
	}
	CHECK(x[0][0] == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("adam: non-finite gradient signals divergence and leaves state untouched") {
	TensorList<float> p{Tensor<float>({2}, 1.0f)};
	auto st = AdamState<float>::for_params(p);
	TensorList<float> g{Tensor<float>({2}, 0.0f)};
	g[0][1] = std::numeric_limits<float>::quiet_NaN();
	CHECK_THROWS_AS(adam_step(st, p, g), DivergenceError);
	CHECK(st.step == 0);
	CHECK(p[0][0] == 1.0f);
}

TEST_CASE("gumbel softmax") {
	auto hot = gumbel_softmax({0.0, 0.0}, 1e6, std::uint64_t{5});
	CHECK(hot[0] == doctest::Approx(0.5).epsilon(0.1));
	CHECK(std::abs(hot[0] - 0.5) <= 0.05);
	auto a = gumbel_softmax({0.3, -0.2}, 1.0, std::uint64_t{17});
	auto b = gumbel_softmax({0.3, -0.2}, 1.0, std::uint64_t{17});
	CHECK(a == b);
	CHECK(a[0] + a[1] == doctest::Approx(1.0));
	CHECK_THROWS_AS(gumbel_softmax({0.0, 0.0}, 0.0, std::uint64_t{1}), std::invalid_argument);

	std::mt19937_64 rng(2024);
	int first = 0;
	const int draws = 10000;
	for (int i = 0; i < draws; ++i) {
		auto y = gumbel_softmax({std::log(0.8), std::log(0.2)}, 1.0, rng);
		first += y[0] > y[1];
	}
	CHECK(std::abs(first / double(draws) - 0.8) <= 0.02);
}

TEST_CASE("mse") {
	std::vector<float> img(kImageSize);
	for (int i = 0; i < kImageSize; ++i) img[i] = static_cast<float>((i % 7) / 7.0);
	std::vector<float> g(kImageSize);
	CHECK(mse<float>(img, img, g) == 0.0);
	std::vector<float> zero(kImageSize, 0.0f);
	double sq = 0.0;
	for (float x : img) sq += double(x) * x;
	CHECK(mse<float>(zero, img, {}) == doctest::Approx(sq / kImageSize).epsilon(1e-12));
}

TEST_CASE("decoder: output shape and range") {
	auto dec = Decoder<float>::xavier(3);
	std::vector<float> code{0.9f, 0.1f, 0.2f, 0.8f};
	Decoder<float>::Workspace ws;
	dec.forward(code, 2, ws);
	REQUIRE(ws.out.size() == 2u * kImageSize);
	for (float x : ws.out) REQUIRE((x > 0.0f && x < 1.0f));
}

TEST_CASE("decoder: gradient matches central differences") {
	auto dec = Decoder<float>::xavier(8);
	Decoder<double> d(EncoderShape{});
	for (std::size_t i = 0; i < d.params().size(); ++i) d.params()[i] = dec.params()[i].cast<double>();
	// Zero-padded upsampling leaves pre-activations at exactly the bias; with
	// zero biases those sit on the ReLU kink, so move them off it.
	std::mt19937_64 brng(4);
	std::uniform_real_distribution<double> small(-0.05, 0.05);
	for (std::size_t i = 1; i < d.params().size(); i += 2)
		for (std::size_t j = 0; j < d.params()[i].size(); ++j) d.params()[i][j] = small(brng);
	const std::vector<double> code{0.7, 0.3};
	const auto target = random_images(1, 9);
	auto loss = [&](const Decoder<double>& net) {
		Decoder<double>::Workspace ws;
		net.forward(code, 1, ws);
		return mse<double>(ws.out, target, {});
	};
	Decoder<double>::Workspace ws;
	d.forward(code, 1, ws);
	std::vector<double> dout(kImageSize);
	mse<double>(ws.out, target, dout);
	auto grads = zeros_like(d.params());
	std::vector<double> dcode(2);
	d.backward(code, ws, dout, grads, dcode);
	std::mt19937_64 rng(1);
	double worst = 0.0;
	// same kink argument as the encoder check
	const double h = 1e-7;
	for (int k = 0; k < 20; ++k) {
		const std::size_t t = rng() % d.params().size();
		const std::size_t j = rng() % d.params()[t].size();
		double& w = d.params()[t][j];
		const double keep = w;
		w = keep + h;
		const double fp = loss(d);
		w = keep - h;
		const double fm = loss(d);
		w = keep;
		worst = std::max(worst, oracle::rel_err(grads[t][j], (fp - fm) / (2 * h), 1e-7));
	}
	CHECK(worst <= 1e-3);
}

TEST_CASE("checkpoint round trip and architecture guard") {
	auto net = Encoder<float>::xavier(10);
	std::stringstream buf;
	save_checkpoint(buf, net.architecture(), net.params());
	const std::string bytes = buf.str();
	CHECK(bytes.substr(0, 8) == "NESYCKPT");
	Encoder<float> back;
	std::istringstream in(bytes);
	load_checkpoint(in, back.architecture(), back.params());
	CHECK(back == net);

	Encoder<float> other(EncoderShape{4, 8, 60, 40});
	std::istringstream in2(bytes);
	CHECK_THROWS(load_checkpoint(in2, other.architecture(), other.params()));
	std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
	CHECK_THROWS(load_checkpoint(truncated, back.architecture(), back.params()));
}
