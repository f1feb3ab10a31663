// Small convolutional encoder/decoder with hand-written reverse-mode
// gradients, Xavier initialization, Adam and Gumbel-Softmax.
//
// Activations use a channel-minor layout: element (b, y, x, c) of a batch of
// C-channel HxW maps lives at ((b*H + y)*W + x)*C + c. With C = 1 this is a
// plain stack of row-major 28x28 images.
#pragma once

#include "nesy/tensor.h"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nesy {

inline constexpr int kImageSide = 28;
inline constexpr int kImageSize = kImageSide * kImageSide;

class DivergenceError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Layer widths. Defaults are the classic LeNet-style fit for 28x28 inputs.
struct EncoderShape {
	int conv1 = 8;
	int conv2 = 16;
	int fc1 = 120;
	int fc2 = 84;
	friend bool operator==(const EncoderShape&, const EncoderShape&) = default;
};

/// conv3x3(1->c1) relu pool2, conv3x3(c1->c2) relu pool2, fc 25*c2->fc1 relu,
/// fc1->fc2 relu, fc2->2, softmax. Component 0 of the softmax is the
/// probability that the glyph depicts a positive atom (digit 1).
template <typename T>
class Encoder {
public:
	static constexpr int kOutputs = 2;

	struct Workspace {
		int batch = 0;
		std::vector<T> col1, act1, pool1, col2, act2, pool2, h1, h2;
		std::vector<int> arg1, arg2;
		std::vector<T> logits;  // 2 x batch, column per image
		std::vector<T> probs;   // softmax of logits
		// backward scratch
		std::vector<T> dh2, dh1, dpool2, dact2, dcol2, dpool1, dact1;
	};

	explicit Encoder(EncoderShape shape = {});
	static Encoder xavier(std::uint64_t seed, EncoderShape shape = {});

	const EncoderShape& shape() const { return shape_; }
	TensorList<T>& params() { return params_; }
	const TensorList<T>& params() const { return params_; }
	std::size_t parameter_count() const;
	static std::vector<std::string> parameter_names();
	std::string architecture() const;

	/// `images` holds `batch` images of kImageSize values each.
	void forward(std::span<const T> images, int batch, Workspace& ws) const;
	/// Accumulates parameter gradients for upstream dL/dlogits (2 x batch)
	/// into `grads`, using the activations stored by the last forward().
	void backward(Workspace& ws, std::span<const T> dlogits, TensorList<T>& grads) const;

	template <typename U>
	Encoder<U> cast() const {
		Encoder<U> out(shape_);
		for (std::size_t i = 0; i < params_.size(); ++i) out.params()[i] = params_[i].template cast<U>();
		return out;
	}

	friend bool operator==(const Encoder&, const Encoder&) = default;

private:
	EncoderShape shape_;
	TensorList<T> params_;
};

/// Mirror of the encoder: fc 2->fc2->fc1->25*c2, nearest 2x upsample (5->11
/// with one zero row/col), transposed conv c2->c1 (11->13) relu, 2x upsample
/// (13->26), transposed conv c1->1 (26->28), sigmoid.
template <typename T>
class Decoder {
public:
	struct Workspace {
		int batch = 0;
		std::vector<T> h1, h2, h3, up1, col1, act1, up2, col2, out;
	};

	explicit Decoder(EncoderShape shape = {});
	static Decoder xavier(std::uint64_t seed, EncoderShape shape = {});

	TensorList<T>& params() { return params_; }
	const TensorList<T>& params() const { return params_; }
	std::string architecture() const;

	/// `code` is 2 x batch; output images in ws.out (batch x kImageSize).
	void forward(std::span<const T> code, int batch, Workspace& ws) const;
	/// Accumulates parameter gradients; writes dL/dcode (2 x batch).
	void backward(std::span<const T> code, const Workspace& ws, std::span<const T> dout, TensorList<T>& grads,
	              std::span<T> dcode) const;

	friend bool operator==(const Decoder&, const Decoder&) = default;

private:
	EncoderShape shape_;
	TensorList<T> params_;
};

/// Adam with bias correction.
template <typename T>
struct AdamState {
	TensorList<T> m;
	TensorList<T> v;
	std::int64_t step = 0;
	double lr = 1e-3;
	double beta1 = 0.9;
	double beta2 = 0.999;
	double eps = 1e-8;

	static AdamState for_params(const TensorList<T>& params) {
		AdamState s;
		s.m = zeros_like(params);
		s.v = zeros_like(params);
		return s;
	}
	friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Throws DivergenceError (and leaves everything untouched) if any gradient
/// is non-finite.
template <typename T>
void adam_step(AdamState<T>& state, TensorList<T>& params, const TensorList<T>& grads);

/// softmax((log softmax(logits) + g) / temperature), g_i = -log(-log u_i).
std::array<double, 2> gumbel_softmax(std::array<double, 2> logits, double temperature, std::mt19937_64& rng);
std::array<double, 2> gumbel_softmax(std::array<double, 2> logits, double temperature, std::uint64_t seed);

/// Mean squared error over all pixels; writes dL/drecon when `grad` is non-empty.
template <typename T>
double mse(std::span<const T> recon, std::span<const T> target, std::span<T> grad);

/// Encodes n images (n x kImageSize) and returns per-atom positive probabilities.
template <typename T>
std::vector<double> encode_sequence(const Encoder<T>& net, std::span<const T> images, int n_atoms);

// Checkpoint: "NESYCKPT", u32 version, u64 architecture hash, u64 value count,
// then little-endian float32 values in parameter declaration order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(std::ostream& out, const std::string& architecture, const TensorList<T>& params);
/// Reads into `params` (shapes must already be set); throws on mismatch.
template <typename T>
void load_checkpoint(std::istream& in, const std::string& architecture, TensorList<T>& params);

} // namespace nesy
