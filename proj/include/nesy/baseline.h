// End-to-end neural baseline: the organism encoder applied to every atom
// image, its 2n concatenated softmax outputs fed to fc 2n->64 relu -> 2,
// trained with softmax cross-entropy on the labels.
#pragma once

#include "nesy/datagen.h"
#include "nesy/nn.h"

#include <string>
#include <vector>

namespace nesy {

struct BaselineNet {
	int n_atoms = 0;
	int hidden = 64;
	Encoder<float> encoder;
	TensorList<float> head;  // fc1.w [hidden, 2n], fc1.b, fc2.w [2, hidden], fc2.b

	static BaselineNet xavier(int n_atoms, std::uint64_t seed, EncoderShape shape = {}, int hidden = 64);
	std::size_t parameter_count() const;
};

struct BaselineConfig {
	int epochs = 100;
	std::size_t batch_size = 2000;
	std::size_t chunk = 256;
};

struct EpochMetrics {
	int epoch = 0;
	double train_loss = 0.0, train_accuracy = 0.0;
	double val_loss = 0.0, val_accuracy = 0.0;
	double test_loss = 0.0, test_accuracy = 0.0;
};

struct BaselineReport {
	std::vector<EpochMetrics> curve;
	std::size_t adam_steps = 0;
	bool diverged = false;
	std::string error;
};

struct SetMetrics {
	double loss = 0.0;
	double accuracy = 0.0;
};

/// Mean cross-entropy and accuracy; class 0 is HeadPositive.
SetMetrics evaluate_baseline(const BaselineNet& net, const ExemplarSet& set, std::size_t chunk = 256);

/// Trains in place and records metrics on all three splits after each epoch.
/// A divergent step stops training; the curve so far is kept.
BaselineReport train_baseline(BaselineNet& net, const ExemplarSplits& data, const BaselineConfig& config,
                              std::uint64_t seed);

} // namespace nesy
