#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adn/netspec.hpp"
#include "adn/volume.hpp"

namespace adn {

enum class OptimizerKind { SgdMomentum, Adam };

struct TrainConfig {
  double learning_rate = 0.01;  // 0 leaves the parameters untouched
  double momentum = 0.9;        // SGD only
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  double positive_fraction = 0.5;
  std::uint64_t seed = 1;
  std::size_t validation_interval = 100;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_epsilon = 1e-8;

  void validate() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig load_train_config(const std::filesystem::path& path);

// A slice range of a labelled volume. Training and validation only ever touch
// voxels of slices inside their range.
struct LabeledSlices {
  const Volume* volume = nullptr;
  const LabelVolume* labels = nullptr;
  SliceRange slices;
};

struct Batch {
  std::vector<Tensor> patches;        // [C, fov, fov] each
  std::vector<std::uint8_t> labels;   // centre-voxel class, 1 = synapse
};

// round(batch_size * positive_fraction) synapse-centred patches, rounding a
// fractional remainder up with probability equal to that remainder, and the
// rest background-centred. Within each class centres are uniform.
Batch sample_batch(const NetworkSpec& spec, const LabeledSlices& data, const TrainConfig& config,
                   std::mt19937_64& rng);

// Per-layer parameter gradients; entries for non-conv layers are empty.
struct LayerGradient {
  Tensor weights;
  std::vector<float> bias;
};

struct Gradients {
  std::vector<LayerGradient> layers;
  double loss = 0;  // mean cross-entropy over the batch
};

// Mean softmax cross-entropy of a patch-mode network and its parameter
// gradients.
Gradients backward(const NetworkSpec& spec, std::span<const Tensor> patches,
                   std::span<const std::uint8_t> labels);

// Fan-based uniform initialization, +-sqrt(6 / (fan_in + fan_out)); biases zero.
NetworkSpec initialize_parameters(const NetworkSpec& architecture, std::uint64_t seed);

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0;    // mean training cross-entropy since the previous record
  double val_f1 = 0;  // validation voxel F1 at threshold 0.5
  double seconds = 0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::string csv() const;  // step,loss,val_f1,seconds
};

struct TrainResult {
  NetworkSpec spec;  // parameters of the best validation record
  TrainLog log;
  std::size_t best_step = 0;
  double best_val_f1 = 0;
};

struct TrainHooks {
  std::function<void(std::size_t step, const NetworkSpec& current)> on_validation;
};

// Validation voxel F1 at threshold 0.5 using dense inference.
double validation_f1(const NetworkSpec& patch, const LabeledSlices& data);

TrainResult train(const NetworkSpec& initial, const LabeledSlices& train_data,
                  const LabeledSlices& validation_data, const TrainConfig& config,
                  const TrainHooks& hooks = {});

}  // namespace adn
