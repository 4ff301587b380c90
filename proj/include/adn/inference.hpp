#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "adn/netspec.hpp"
#include "adn/tensor.hpp"
#include "adn/volume.hpp"

namespace adn {

// Patch centre in slice coordinates. The patch covering it starts at
// (row - origin_offset, col - origin_offset), origin_offset = (fov - 1) / 2.
struct Position {
  std::size_t row = 0, col = 0;
  auto operator<=>(const Position&) const = default;
};

inline std::size_t origin_offset(const NetworkSpec& spec) {
  return (spec.field_of_view() - 1) / 2;
}

struct ForwardStats {
  std::size_t layer_evaluations = 0;
};

// Evaluates every layer exactly once on `input` ([C, H, W]).
Tensor forward(const NetworkSpec& spec, const Tensor& input, ForwardStats* stats = nullptr);

// Sliding-window evaluation: synapse probability for each requested centre,
// each computed from its own fov x fov patch.
std::vector<float> apply_patchwise(const NetworkSpec& patch, const Tensor& slice,
                                   std::span<const Position> centres);
// Every valid centre, as a [1, H - fov + 1, W - fov + 1] map.
Tensor apply_patchwise(const NetworkSpec& patch, const Tensor& slice);

struct DenseOptions {
  // Output rows per tile; 0 evaluates the whole slice at once. Tiles overlap
  // by fov - 1 input rows and give bit-identical results.
  std::size_t tile_rows = 0;
};

// One fully convolutional pass; returns the [1, H - fov + 1, W - fov + 1]
// synapse probability map. Requires a dense-mode network.
Tensor apply_dense(const NetworkSpec& dense, const Tensor& slice, DenseOptions options = {},
                   ForwardStats* stats = nullptr);

// Per-voxel synapse probability over a stack of slices, cropped to the valid
// region: map voxel (z, y, x) describes source voxel
// (z + slice_offset, y + origin_offset, x + origin_offset).
struct ProbabilityMap {
  Dims dims;
  std::vector<float> values;
  std::size_t origin_offset = 0;
  std::size_t slice_offset = 0;
  std::string source_volume_id;
  std::string network_checksum;

  float at(std::size_t z, std::size_t y, std::size_t x) const {
    return values[(z * dims.height + y) * dims.width + x];
  }
  bool operator==(const ProbabilityMap&) const = default;
};

struct PredictOptions {
  std::optional<SliceRange> slices;  // source slices to classify
  std::size_t tile_rows = 0;
};

// Patch mode needs a patch network; dense mode converts a patch network on the
// fly. With C input channels each map slice is centred on a stack of C
// adjacent slices; slices lacking neighbours are skipped.
ProbabilityMap predict_volume(const NetworkSpec& spec, const Volume& volume, Mode mode,
                              const PredictOptions& options = {});

Bytes encode_probability_map(const ProbabilityMap& map);
ProbabilityMap decode_probability_map(std::span<const std::uint8_t> bytes);
void save_probability_map(const ProbabilityMap& map, const std::filesystem::path& path);
ProbabilityMap load_probability_map(const std::filesystem::path& path);

struct BenchmarkConfig {
  std::vector<std::size_t> thread_counts{1, 0};  // 0 = all cores
  std::size_t warmup_runs = 1;
  std::size_t timed_runs = 5;
  double patch_sample_fraction = 0.01;
  std::size_t slice = 0;
  bool scaling_probe = true;
  std::string hardware_note;
};

struct ModeTiming {
  Mode mode = Mode::Dense;
  std::size_t threads = 1;
  double seconds_per_slice = 0;  // median; extrapolated for patch mode
  double seconds_total = 0;      // all timed runs
  std::size_t voxels_classified = 0;
  double voxels_per_second = 0;
  std::size_t positions_timed = 0;
  bool extrapolated = false;
  bool outputs_identical = true;
  std::optional<double> speedup_vs_patch;
};

// Cost of evaluating n versus 2n requested positions.
struct ScalingProbe {
  std::size_t positions = 0;
  double patch_seconds_n = 0, patch_seconds_2n = 0;
  double dense_seconds_n = 0, dense_seconds_2n = 0;
  double patch_ratio() const { return patch_seconds_2n / patch_seconds_n; }
  double dense_ratio() const { return dense_seconds_2n / dense_seconds_n; }
};

struct BenchmarkReport {
  std::vector<ModeTiming> timings;
  std::optional<ScalingProbe> scaling;
  Dims slice_dims;
  std::size_t field_of_view = 0;
  std::string network_checksum;
  std::string volume_id;
  std::string hardware_note;
  BenchmarkConfig config;

  const ModeTiming* find(Mode mode, std::size_t threads) const;
};

// Stratified grid sample of valid centres covering about `fraction` of them.
std::vector<Position> stratified_positions(std::size_t height, std::size_t width,
                                           std::size_t fov, double fraction);

BenchmarkReport benchmark(const NetworkSpec& patch, const Volume& volume,
                          const std::set<Mode>& modes, const BenchmarkConfig& config = {});

nlohmann::json to_json(const BenchmarkReport& report);

}  // namespace adn
