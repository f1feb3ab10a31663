#include "nesy/nn.h"

#include "nesy/hash.h"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

namespace nesy {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;
template <typename T>
using CMapV = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

// 3x3 valid convolution geometry over channel-minor maps.
struct Geom {
	int c, h, w, b;
	int oh() const { return h - 2; }
	int ow() const { return w - 2; }
	int k() const { return c * 9; }
	int positions() const { return b * oh() * ow(); }
};

// col is k x positions, column-major; row = (ky*3 + kx)*c + ch, so each
// kernel row is one contiguous run of 3*c input values.
template <typename T>
void im2col(const T* in, const Geom& g, T* col) {
	const int oh = g.oh(), ow = g.ow(), run = 3 * g.c;
	T* dst = col;
	for (int b = 0; b < g.b; ++b)
		for (int y = 0; y < oh; ++y)
			for (int x = 0; x < ow; ++x)
				for (int ky = 0; ky < 3; ++ky, dst += run) {
					const T* src = in + (static_cast<std::size_t>(b * g.h + y + ky) * g.w + x) * g.c;
					std::copy(src, src + run, dst);
				}
}

// Scatter-add of im2col columns back onto the input map.
template <typename T>
void col2im_add(const T* col, const Geom& g, T* in) {
	const int oh = g.oh(), ow = g.ow(), run = 3 * g.c;
	const T* src = col;
	for (int b = 0; b < g.b; ++b)
		for (int y = 0; y < oh; ++y)
			for (int x = 0; x < ow; ++x)
				for (int ky = 0; ky < 3; ++ky, src += run) {
					T* dst = in + (static_cast<std::size_t>(b * g.h + y + ky) * g.w + x) * g.c;
					for (int i = 0; i < run; ++i) dst[i] += src[i];
				}
}

// 2x2 stride-2 max pool (floor); arg holds the flat input index of each max.
template <typename T>
void maxpool(const T* in, int c, int h, int w, int batch, T* out, int* arg) {
	const int oh = h / 2, ow = w / 2;
	const int right = c, down = w * c;
	int o = 0;
	for (int b = 0; b < batch; ++b)
		for (int y = 0; y < oh; ++y)
			for (int x = 0; x < ow; ++x) {
				const int base = ((b * h + 2 * y) * w + 2 * x) * c;
				for (int ch = 0; ch < c; ++ch, ++o) {
					int best = base + ch;
					for (int off : {right, down, down + right})
						if (in[base + ch + off] > in[best]) best = base + ch + off;
					out[o] = in[best];
					arg[o] = best;
				}
			}
}

// Nearest 2x upsample of (h x w) into (out_h x out_w); cells beyond 2h/2w stay zero.
template <typename T>
void upsample(const T* in, int c, int h, int w, int batch, int out_h, int out_w, T* out) {
	std::fill(out, out + static_cast<std::size_t>(batch) * out_h * out_w * c, T{0});
	for (int b = 0; b < batch; ++b)
		for (int y = 0; y < std::min(out_h, 2 * h); ++y)
			for (int x = 0; x < std::min(out_w, 2 * w); ++x) {
				const T* src = in + static_cast<std::size_t>((b * h + y / 2) * w + x / 2) * c;
				T* dst = out + static_cast<std::size_t>((b * out_h + y) * out_w + x) * c;
				std::copy(src, src + c, dst);
			}
}

template <typename T>
void upsample_backward(const T* dout, int c, int h, int w, int batch, int out_h, int out_w, T* din) {
	std::fill(din, din + static_cast<std::size_t>(batch) * h * w * c, T{0});
	for (int b = 0; b < batch; ++b)
		for (int y = 0; y < std::min(out_h, 2 * h); ++y)
			for (int x = 0; x < std::min(out_w, 2 * w); ++x) {
				const T* src = dout + static_cast<std::size_t>((b * out_h + y) * out_w + x) * c;
				T* dst = din + static_cast<std::size_t>((b * h + y / 2) * w + x / 2) * c;
				for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
			}
}

template <typename T>
void add_bias_relu(std::vector<T>& act, const Tensor<T>& bias, bool relu) {
	const std::size_t c = bias.size();
	const T* bb = bias.data();
	for (std::size_t i = 0; i < act.size(); i += c) {
		T* a = act.data() + i;
		if (relu)
			for (std::size_t ch = 0; ch < c; ++ch) a[ch] = std::max(a[ch] + bb[ch], T{0});
		else
			for (std::size_t ch = 0; ch < c; ++ch) a[ch] += bb[ch];
	}
}

template <typename T>
void relu_mask(std::vector<T>& grad, const std::vector<T>& act) {
	for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = act[i] > T{0} ? grad[i] : T{0};
}

template <typename T>
void bias_grad(const std::vector<T>& dact, Tensor<T>& db) {
	const std::size_t c = db.size();
	T* g = db.data();
	for (std::size_t i = 0; i < dact.size(); i += c)
		for (std::size_t ch = 0; ch < c; ++ch) g[ch] += dact[i + ch];
}

// Scatters pooled gradients onto the argmax positions of a zeroed map.
template <typename T>
void unpool(const std::vector<T>& dpool, const std::vector<int>& arg, std::vector<T>& dact) {
	std::fill(dact.begin(), dact.end(), T{0});
	for (std::size_t i = 0; i < dpool.size(); ++i) dact[static_cast<std::size_t>(arg[i])] += dpool[i];
}

template <typename T>
void fill_xavier(Tensor<T>& t, double fan_in, double fan_out, std::mt19937_64& rng) {
	const double bound = std::sqrt(6.0 / (fan_in + fan_out));
	std::uniform_real_distribution<double> dist(-bound, bound);
	for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
}

std::string shape_string(const char* kind, const EncoderShape& s) {
	return std::string(kind) + ":conv1=" + std::to_string(s.conv1) + ",conv2=" + std::to_string(s.conv2) +
	       ",fc1=" + std::to_string(s.fc1) + ",fc2=" + std::to_string(s.fc2);
}

constexpr int kPool2Side = 5;  // 28 -> 26 -> 13 -> 11 -> 5

} // namespace

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
Encoder<T>::Encoder(EncoderShape s) : shape_(s) {
	const int flat = s.conv2 * kPool2Side * kPool2Side;
	params_.emplace_back(std::vector<int>{s.conv1, 3, 3, 1});  // [out][ky][kx][in]
	params_.emplace_back(std::vector<int>{s.conv1});
	params_.emplace_back(std::vector<int>{s.conv2, 3, 3, s.conv1});
	params_.emplace_back(std::vector<int>{s.conv2});
	params_.emplace_back(std::vector<int>{s.fc1, flat});
	params_.emplace_back(std::vector<int>{s.fc1});
	params_.emplace_back(std::vector<int>{s.fc2, s.fc1});
	params_.emplace_back(std::vector<int>{s.fc2});
	params_.emplace_back(std::vector<int>{kOutputs, s.fc2});
	params_.emplace_back(std::vector<int>{kOutputs});
}

template <typename T>
Encoder<T> Encoder<T>::xavier(std::uint64_t seed, EncoderShape s) {
	Encoder net(s);
	std::mt19937_64 rng(seed);
	auto& p = net.params_;
	fill_xavier(p[0], 1 * 9, s.conv1 * 9, rng);
	fill_xavier(p[2], s.conv1 * 9, s.conv2 * 9, rng);
	fill_xavier(p[4], s.conv2 * kPool2Side * kPool2Side, s.fc1, rng);
	fill_xavier(p[6], s.fc1, s.fc2, rng);
	fill_xavier(p[8], s.fc2, kOutputs, rng);
	return net;
}

template <typename T>
std::size_t Encoder<T>::parameter_count() const {
	std::size_t n = 0;
	for (const auto& t : params_) n += t.size();
	return n;
}

template <typename T>
std::vector<std::string> Encoder<T>::parameter_names() {
	return {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc1.weight",
	        "fc1.bias",     "fc2.weight", "fc2.bias",     "fc3.weight", "fc3.bias"};
}

template <typename T>
std::string Encoder<T>::architecture() const {
	return shape_string("encoder", shape_);
}

template <typename T>
void Encoder<T>::forward(std::span<const T> images, int batch, Workspace& ws) const {
	if (images.size() != static_cast<std::size_t>(batch) * kImageSize)
		throw std::invalid_argument("encoder: image buffer does not match batch size");
	const auto& s = shape_;
	const auto& p = params_;
	ws.batch = batch;

	const Geom g1{1, kImageSide, kImageSide, batch};
	ws.col1.resize(static_cast<std::size_t>(g1.k()) * g1.positions());
	im2col(images.data(), g1, ws.col1.data());
	ws.act1.resize(static_cast<std::size_t>(s.conv1) * g1.positions());
	MapM<T>(ws.act1.data(), s.conv1, g1.positions()).noalias() =
	    CMapM<T>(p[0].data(), g1.k(), s.conv1).transpose() * CMapM<T>(ws.col1.data(), g1.k(), g1.positions());
	add_bias_relu(ws.act1, p[1], true);

	const int h1 = g1.oh() / 2;  // 13
	ws.pool1.resize(static_cast<std::size_t>(batch) * h1 * h1 * s.conv1);
	ws.arg1.resize(ws.pool1.size());
	maxpool(ws.act1.data(), s.conv1, g1.oh(), g1.ow(), batch, ws.pool1.data(), ws.arg1.data());

	const Geom g2{s.conv1, h1, h1, batch};
	ws.col2.resize(static_cast<std::size_t>(g2.k()) * g2.positions());
	im2col(ws.pool1.data(), g2, ws.col2.data());
	ws.act2.resize(static_cast<std::size_t>(s.conv2) * g2.positions());
	MapM<T>(ws.act2.data(), s.conv2, g2.positions()).noalias() =
	    CMapM<T>(p[2].data(), g2.k(), s.conv2).transpose() * CMapM<T>(ws.col2.data(), g2.k(), g2.positions());
	add_bias_relu(ws.act2, p[3], true);

	const int flat = s.conv2 * kPool2Side * kPool2Side;
	ws.pool2.resize(static_cast<std::size_t>(batch) * flat);
	ws.arg2.resize(ws.pool2.size());
	maxpool(ws.act2.data(), s.conv2, g2.oh(), g2.ow(), batch, ws.pool2.data(), ws.arg2.data());

	ws.h1.resize(static_cast<std::size_t>(s.fc1) * batch);
	MapM<T>(ws.h1.data(), s.fc1, batch).noalias() =
	    CMapM<T>(p[4].data(), flat, s.fc1).transpose() * CMapM<T>(ws.pool2.data(), flat, batch);
	add_bias_relu(ws.h1, p[5], true);

	ws.h2.resize(static_cast<std::size_t>(s.fc2) * batch);
	MapM<T>(ws.h2.data(), s.fc2, batch).noalias() =
	    CMapM<T>(p[6].data(), s.fc1, s.fc2).transpose() * CMapM<T>(ws.h1.data(), s.fc1, batch);
	add_bias_relu(ws.h2, p[7], true);

	ws.logits.resize(static_cast<std::size_t>(kOutputs) * batch);
	MapM<T>(ws.logits.data(), kOutputs, batch).noalias() =
	    CMapM<T>(p[8].data(), s.fc2, kOutputs).transpose() * CMapM<T>(ws.h2.data(), s.fc2, batch);
	add_bias_relu(ws.logits, p[9], false);

	ws.probs.resize(ws.logits.size());
	for (int b = 0; b < batch; ++b) {
		const T z0 = ws.logits[2 * b], z1 = ws.logits[2 * b + 1];
		const T m = std::max(z0, z1);
		const T e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
		ws.probs[2 * b] = e0 / (e0 + e1);
		ws.probs[2 * b + 1] = e1 / (e0 + e1);
	}
}

template <typename T>
void Encoder<T>::backward(Workspace& ws, std::span<const T> dlogits, TensorList<T>& grads) const {
	const int batch = ws.batch;
	if (dlogits.size() != static_cast<std::size_t>(kOutputs) * batch)
		throw std::invalid_argument("encoder: upstream gradient does not match batch size");
	const auto& s = shape_;
	const auto& p = params_;
	const int flat = s.conv2 * kPool2Side * kPool2Side;
	CMapM<T> dz(dlogits.data(), kOutputs, batch);

	// fc3
	MapM<T>(grads[8].data(), s.fc2, kOutputs).noalias() += CMapM<T>(ws.h2.data(), s.fc2, batch) * dz.transpose();
	for (int b = 0; b < batch; ++b)
		for (int o = 0; o < kOutputs; ++o) grads[9][o] += dz(o, b);
	ws.dh2.resize(ws.h2.size());
	MapM<T>(ws.dh2.data(), s.fc2, batch).noalias() = CMapM<T>(p[8].data(), s.fc2, kOutputs) * dz;
	relu_mask(ws.dh2, ws.h2);

	// fc2
	MapM<T>(grads[6].data(), s.fc1, s.fc2).noalias() +=
	    CMapM<T>(ws.h1.data(), s.fc1, batch) * CMapM<T>(ws.dh2.data(), s.fc2, batch).transpose();
	bias_grad(ws.dh2, grads[7]);
	ws.dh1.resize(ws.h1.size());
	MapM<T>(ws.dh1.data(), s.fc1, batch).noalias() =
	    CMapM<T>(p[6].data(), s.fc1, s.fc2) * CMapM<T>(ws.dh2.data(), s.fc2, batch);
	relu_mask(ws.dh1, ws.h1);

	// fc1
	MapM<T>(grads[4].data(), flat, s.fc1).noalias() +=
	    CMapM<T>(ws.pool2.data(), flat, batch) * CMapM<T>(ws.dh1.data(), s.fc1, batch).transpose();
	bias_grad(ws.dh1, grads[5]);
	ws.dpool2.resize(ws.pool2.size());
	MapM<T>(ws.dpool2.data(), flat, batch).noalias() =
	    CMapM<T>(p[4].data(), flat, s.fc1) * CMapM<T>(ws.dh1.data(), s.fc1, batch);

	// pool2 / conv2
	ws.dact2.resize(ws.act2.size());
	unpool(ws.dpool2, ws.arg2, ws.dact2);
	relu_mask(ws.dact2, ws.act2);
	const int h1 = (kImageSide - 2) / 2;
	const Geom g2{s.conv1, h1, h1, batch};
	MapM<T>(grads[2].data(), g2.k(), s.conv2).noalias() +=
	    CMapM<T>(ws.col2.data(), g2.k(), g2.positions()) * CMapM<T>(ws.dact2.data(), s.conv2, g2.positions()).transpose();
	bias_grad(ws.dact2, grads[3]);
	ws.dcol2.resize(ws.col2.size());
	MapM<T>(ws.dcol2.data(), g2.k(), g2.positions()).noalias() =
	    CMapM<T>(p[2].data(), g2.k(), s.conv2) * CMapM<T>(ws.dact2.data(), s.conv2, g2.positions());
	ws.dpool1.assign(ws.pool1.size(), T{0});
	col2im_add(ws.dcol2.data(), g2, ws.dpool1.data());

	// pool1 / conv1
	ws.dact1.resize(ws.act1.size());
	unpool(ws.dpool1, ws.arg1, ws.dact1);
	relu_mask(ws.dact1, ws.act1);
	const Geom g1{1, kImageSide, kImageSide, batch};
	MapM<T>(grads[0].data(), g1.k(), s.conv1).noalias() +=
	    CMapM<T>(ws.col1.data(), g1.k(), g1.positions()) * CMapM<T>(ws.dact1.data(), s.conv1, g1.positions()).transpose();
	bias_grad(ws.dact1, grads[1]);
}

// ---------------------------------------------------------------------------
// Decoder

template <typename T>
Decoder<T>::Decoder(EncoderShape s) : shape_(s) {
	const int flat = s.conv2 * kPool2Side * kPool2Side;
	params_.emplace_back(std::vector<int>{s.fc2, 2});
	params_.emplace_back(std::vector<int>{s.fc2});
	params_.emplace_back(std::vector<int>{s.fc1, s.fc2});
	params_.emplace_back(std::vector<int>{s.fc1});
	params_.emplace_back(std::vector<int>{flat, s.fc1});
	params_.emplace_back(std::vector<int>{flat});
	params_.emplace_back(std::vector<int>{s.conv2, 3, 3, s.conv1});  // [in][ky][kx][out]
	params_.emplace_back(std::vector<int>{s.conv1});
	params_.emplace_back(std::vector<int>{s.conv1, 3, 3, 1});
	params_.emplace_back(std::vector<int>{1});
}

template <typename T>
Decoder<T> Decoder<T>::xavier(std::uint64_t seed, EncoderShape s) {
	Decoder net(s);
	std::mt19937_64 rng(seed);
	auto& p = net.params_;
	const int flat = s.conv2 * kPool2Side * kPool2Side;
	fill_xavier(p[0], 2, s.fc2, rng);
	fill_xavier(p[2], s.fc2, s.fc1, rng);
	fill_xavier(p[4], s.fc1, flat, rng);
	fill_xavier(p[6], s.conv2 * 9, s.conv1 * 9, rng);
	fill_xavier(p[8], s.conv1 * 9, 1 * 9, rng);
	return net;
}

template <typename T>
std::string Decoder<T>::architecture() const {
	return shape_string("decoder", shape_);
}

namespace {
constexpr int kUp1 = 11, kT1 = 13, kUp2 = 26;
}

template <typename T>
void Decoder<T>::forward(std::span<const T> code, int batch, Workspace& ws) const {
	if (code.size() != static_cast<std::size_t>(2) * batch) throw std::invalid_argument("decoder: code size mismatch");
	const auto& s = shape_;
	const auto& p = params_;
	const int flat = s.conv2 * kPool2Side * kPool2Side;
	ws.batch = batch;

	ws.h1.resize(static_cast<std::size_t>(s.fc2) * batch);
	MapM<T>(ws.h1.data(), s.fc2, batch).noalias() = CMapM<T>(p[0].data(), 2, s.fc2).transpose() * CMapM<T>(code.data(), 2, batch);
	add_bias_relu(ws.h1, p[1], true);
	ws.h2.resize(static_cast<std::size_t>(s.fc1) * batch);
	MapM<T>(ws.h2.data(), s.fc1, batch).noalias() =
	    CMapM<T>(p[2].data(), s.fc2, s.fc1).transpose() * CMapM<T>(ws.h1.data(), s.fc2, batch);
	add_bias_relu(ws.h2, p[3], true);
	ws.h3.resize(static_cast<std::size_t>(flat) * batch);
	MapM<T>(ws.h3.data(), flat, batch).noalias() =
	    CMapM<T>(p[4].data(), s.fc1, flat).transpose() * CMapM<T>(ws.h2.data(), s.fc1, batch);
	add_bias_relu(ws.h3, p[5], true);

	ws.up1.resize(static_cast<std::size_t>(batch) * kUp1 * kUp1 * s.conv2);
	upsample(ws.h3.data(), s.conv2, kPool2Side, kPool2Side, batch, kUp1, kUp1, ws.up1.data());

	// Transposed conv: columns = W * input, scattered onto the larger map.
	const Geom t1{s.conv1, kT1, kT1, batch};  // geometry of the *output* map
	ws.col1.resize(static_cast<std::size_t>(t1.k()) * t1.positions());
	MapM<T>(ws.col1.data(), t1.k(), t1.positions()).noalias() =
	    CMapM<T>(p[6].data(), t1.k(), s.conv2) * CMapM<T>(ws.up1.data(), s.conv2, t1.positions());
	ws.act1.assign(static_cast<std::size_t>(batch) * kT1 * kT1 * s.conv1, T{0});
	col2im_add(ws.col1.data(), t1, ws.act1.data());
	add_bias_relu(ws.act1, p[7], true);

	ws.up2.resize(static_cast<std::size_t>(batch) * kUp2 * kUp2 * s.conv1);
	upsample(ws.act1.data(), s.conv1, kT1, kT1, batch, kUp2, kUp2, ws.up2.data());

	const Geom t2{1, kImageSide, kImageSide, batch};
	ws.col2.resize(static_cast<std::size_t>(t2.k()) * t2.positions());
	MapM<T>(ws.col2.data(), t2.k(), t2.positions()).noalias() =
	    CMapM<T>(p[8].data(), t2.k(), s.conv1) * CMapM<T>(ws.up2.data(), s.conv1, t2.positions());
	ws.out.assign(static_cast<std::size_t>(batch) * kImageSize, T{0});
	col2im_add(ws.col2.data(), t2, ws.out.data());
	for (T& v : ws.out) v = T{1} / (T{1} + std::exp(-(v + p[9][0])));
}

template <typename T>
void Decoder<T>::backward(std::span<const T> code, const Workspace& ws, std::span<const T> dout, TensorList<T>& grads,
                          std::span<T> dcode) const {
	const int batch = ws.batch;
	const auto& s = shape_;
	const auto& p = params_;
	const int flat = s.conv2 * kPool2Side * kPool2Side;

	std::vector<T> dpre(ws.out.size());
	for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dout[i] * ws.out[i] * (T{1} - ws.out[i]);
	for (T v : dpre) grads[9][0] += v;

	const Geom t2{1, kImageSide, kImageSide, batch};
	std::vector<T> dcol2(ws.col2.size());
	im2col(dpre.data(), t2, dcol2.data());
	MapM<T>(grads[8].data(), t2.k(), s.conv1).noalias() +=
	    CMapM<T>(dcol2.data(), t2.k(), t2.positions()) * CMapM<T>(ws.up2.data(), s.conv1, t2.positions()).transpose();
	std::vector<T> dup2(ws.up2.size());
	MapM<T>(dup2.data(), s.conv1, t2.positions()).noalias() =
	    CMapM<T>(p[8].data(), t2.k(), s.conv1).transpose() * CMapM<T>(dcol2.data(), t2.k(), t2.positions());

	std::vector<T> dact1(ws.act1.size());
	upsample_backward(dup2.data(), s.conv1, kT1, kT1, batch, kUp2, kUp2, dact1.data());
	relu_mask(dact1, ws.act1);
	bias_grad(dact1, grads[7]);

	const Geom t1{s.conv1, kT1, kT1, batch};
	std::vector<T> dcol1(ws.col1.size());
	im2col(dact1.data(), t1, dcol1.data());
	MapM<T>(grads[6].data(), t1.k(), s.conv2).noalias() +=
	    CMapM<T>(dcol1.data(), t1.k(), t1.positions()) * CMapM<T>(ws.up1.data(), s.conv2, t1.positions()).transpose();
	std::vector<T> dup1(ws.up1.size());
	MapM<T>(dup1.data(), s.conv2, t1.positions()).noalias() =
	    CMapM<T>(p[6].data(), t1.k(), s.conv2).transpose() * CMapM<T>(dcol1.data(), t1.k(), t1.positions());

	std::vector<T> dh3(ws.h3.size());
	upsample_backward(dup1.data(), s.conv2, kPool2Side, kPool2Side, batch, kUp1, kUp1, dh3.data());
	relu_mask(dh3, ws.h3);
	MapM<T>(grads[4].data(), s.fc1, flat).noalias() +=
	    CMapM<T>(ws.h2.data(), s.fc1, batch) * CMapM<T>(dh3.data(), flat, batch).transpose();
	bias_grad(dh3, grads[5]);
	std::vector<T> dh2(ws.h2.size());
	MapM<T>(dh2.data(), s.fc1, batch).noalias() = CMapM<T>(p[4].data(), s.fc1, flat) * CMapM<T>(dh3.data(), flat, batch);
	relu_mask(dh2, ws.h2);
	MapM<T>(grads[2].data(), s.fc2, s.fc1).noalias() +=
	    CMapM<T>(ws.h1.data(), s.fc2, batch) * CMapM<T>(dh2.data(), s.fc1, batch).transpose();
	bias_grad(dh2, grads[3]);
	std::vector<T> dh1(ws.h1.size());
	MapM<T>(dh1.data(), s.fc2, batch).noalias() = CMapM<T>(p[2].data(), s.fc2, s.fc1) * CMapM<T>(dh2.data(), s.fc1, batch);
	relu_mask(dh1, ws.h1);
	MapM<T>(grads[0].data(), 2, s.fc2).noalias() += CMapM<T>(code.data(), 2, batch) * CMapM<T>(dh1.data(), s.fc2, batch).transpose();
	bias_grad(dh1, grads[1]);
	if (!dcode.empty())
		MapM<T>(dcode.data(), 2, batch).noalias() = CMapM<T>(p[0].data(), 2, s.fc2) * CMapM<T>(dh1.data(), s.fc2, batch);
}

// ---------------------------------------------------------------------------

template <typename T>
void adam_step(AdamState<T>& st, TensorList<T>& params, const TensorList<T>& grads) {
	if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
		throw std::invalid_argument("adam: parameter/gradient/state count mismatch");
	for (std::size_t i = 0; i < params.size(); ++i) {
		if (grads[i].size() != params[i].size() || st.m[i].size() != params[i].size())
			throw std::invalid_argument("adam: tensor shape mismatch");
		if (!grads[i].all_finite()) throw DivergenceError("adam: non-finite gradient");
	}
	++st.step;
	const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
	const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
	for (std::size_t i = 0; i < params.size(); ++i) {
		T* w = params[i].data();
		T* m = st.m[i].data();
		T* v = st.v[i].data();
		const T* g = grads[i].data();
		for (std::size_t j = 0; j < params[i].size(); ++j) {
			const double gj = g[j];
			const double mj = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
			const double vj = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
			m[j] = static_cast<T>(mj);
			v[j] = static_cast<T>(vj);
			w[j] = static_cast<T>(w[j] - st.lr * (mj / c1) / (std::sqrt(vj / c2) + st.eps));
		}
	}
}

std::array<double, 2> gumbel_softmax(std::array<double, 2> logits, double temperature, std::mt19937_64& rng) {
	if (!(temperature > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
	std::uniform_real_distribution<double> unif(std::numeric_limits<double>::min(), 1.0);
	const double m = std::max(logits[0], logits[1]);
	const double lse = m + std::log(std::exp(logits[0] - m) + std::exp(logits[1] - m));
	std::array<double, 2> s;
	for (int i = 0; i < 2; ++i) {
		double u = unif(rng);
		if (u >= 1.0) u = std::nextafter(1.0, 0.0);
		s[i] = (logits[i] - lse - std::log(-std::log(u))) / temperature;
	}
	const double sm = std::max(s[0], s[1]);
	const double e0 = std::exp(s[0] - sm), e1 = std::exp(s[1] - sm);
	return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

std::array<double, 2> gumbel_softmax(std::array<double, 2> logits, double temperature, std::uint64_t seed) {
	std::mt19937_64 rng(seed);
	return gumbel_softmax(logits, temperature, rng);
}

template <typename T>
double mse(std::span<const T> recon, std::span<const T> target, std::span<T> grad) {
	if (recon.size() != target.size() || (!grad.empty() && grad.size() != recon.size()))
		throw std::invalid_argument("mse: size mismatch");
	if (recon.empty()) return 0.0;
	double sum = 0.0;
	const double scale = 2.0 / static_cast<double>(recon.size());
	for (std::size_t i = 0; i < recon.size(); ++i) {
		const double d = static_cast<double>(recon[i]) - static_cast<double>(target[i]);
		sum += d * d;
		if (!grad.empty()) grad[i] = static_cast<T>(scale * d);
	}
	return sum / static_cast<double>(recon.size());
}

template <typename T>
std::vector<double> encode_sequence(const Encoder<T>& net, std::span<const T> images, int n_atoms) {
	if (n_atoms <= 0 || images.size() != static_cast<std::size_t>(n_atoms) * kImageSize)
		throw std::invalid_argument("encode_sequence: expected n_atoms images of 28x28");
	typename Encoder<T>::Workspace ws;
	net.forward(images, n_atoms, ws);
	std::vector<double> p(n_atoms);
	for (int i = 0; i < n_atoms; ++i) p[i] = static_cast<double>(ws.probs[2 * i]);
	return p;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'E', 'S', 'Y', 'C', 'K', 'P', 'T'};

template <typename U>
void put_le(std::ostream& out, U v) {
	unsigned char buf[sizeof(U)];
	for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
	out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
	unsigned char buf[sizeof(U)];
	if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw std::runtime_error("checkpoint: truncated");
	U v = 0;
	for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
	return v;
}

} // namespace

template <typename T>
void save_checkpoint(std::ostream& out, const std::string& architecture, const TensorList<T>& params) {
	out.write(kMagic, sizeof(kMagic));
	put_le<std::uint32_t>(out, kCheckpointVersion);
	put_le<std::uint64_t>(out, fnv1a64(architecture));
	std::uint64_t count = 0;
	for (const auto& t : params) count += t.size();
	put_le<std::uint64_t>(out, count);
	for (const auto& t : params)
		for (std::size_t i = 0; i < t.size(); ++i) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
	if (!out) throw std::runtime_error("checkpoint: write failed");
}

template <typename T>
void load_checkpoint(std::istream& in, const std::string& architecture, TensorList<T>& params) {
	char magic[8];
	if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
		throw std::runtime_error("checkpoint: bad magic");
	if (get_le<std::uint32_t>(in) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
	if (get_le<std::uint64_t>(in) != fnv1a64(architecture)) throw std::runtime_error("checkpoint: architecture mismatch");
	std::uint64_t count = 0;
	for (const auto& t : params) count += t.size();
	if (get_le<std::uint64_t>(in) != count) throw std::runtime_error("checkpoint: parameter count mismatch");
	for (auto& t : params)
		for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(in)));
}

#define NESY_INSTANTIATE(T)                                                                                   \
	template class Encoder<T>;                                                                                \
	template class Decoder<T>;                                                                                \
	template void adam_step<T>(AdamState<T>&, TensorList<T>&, const TensorList<T>&);                          \
	template double mse<T>(std::span<const T>, std::span<const T>, std::span<T>);                             \
	template std::vector<double> encode_sequence<T>(const Encoder<T>&, std::span<const T>, int);              \
	template void save_checkpoint<T>(std::ostream&, const std::string&, const TensorList<T>&);                \
	template void load_checkpoint<T>(std::istream&, const std::string&, TensorList<T>&);

NESY_INSTANTIATE(float)
NESY_INSTANTIATE(double)

#undef NESY_INSTANTIATE

} // namespace nesy
