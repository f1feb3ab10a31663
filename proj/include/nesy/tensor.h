#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nesy {

/// Dense row-major array with a shape.
template <typename T>
class Tensor {
public:
	Tensor() = default;
	explicit Tensor(std::vector<int> shape, T fill = T{})
	    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

	const std::vector<int>& shape() const { return shape_; }
	std::size_t size() const { return data_.size(); }
	T* data() { return data_.data(); }
	const T* data() const { return data_.data(); }
	std::span<T> span() { return data_; }
	std::span<const T> span() const { return data_; }
	T& operator[](std::size_t i) { return data_[i]; }
	const T& operator[](std::size_t i) const { return data_[i]; }

	void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
	bool all_finite() const {
		for (const T& x : data_)
			if (!std::isfinite(x)) return false;
		return true;
	}

	template <typename U>
	Tensor<U> cast() const {
		Tensor<U> out(shape_);
		for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
		return out;
	}

	static std::size_t element_count(const std::vector<int>& shape) {
		std::size_t n = 1;
		for (int d : shape) {
			if (d < 0) throw std::invalid_argument("negative tensor dimension");
			n *= static_cast<std::size_t>(d);
		}
		return n;
	}

	friend bool operator==(const Tensor&, const Tensor&) = default;

private:
	std::vector<int> shape_;
	std::vector<T> data_;
};

template <typename T>
using TensorList = std::vector<Tensor<T>>;

template <typename T>
TensorList<T> zeros_like(const TensorList<T>& ts) {
	TensorList<T> out;
	out.reserve(ts.size());
	for (const auto& t : ts) out.emplace_back(t.shape());
	return out;
}

} // namespace nesy
