#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adn/inference.hpp"
#include "adn/volume.hpp"

namespace adn {

// Face4 / Full8 label each slice independently; Face6 / Full26 link slices.
enum class Connectivity { Face4, Full8, Face6, Full26 };

const char* to_string(Connectivity c);
Connectivity connectivity_from_string(const std::string& s);

// Component ids are 1..count() in raster order of each component's first voxel.
struct ComponentSet {
  Dims dims;
  std::vector<std::uint32_t> label_map;
  std::vector<std::size_t> sizes;  // sizes[k - 1] is the voxel count of id k

  std::size_t count() const noexcept { return sizes.size(); }
};

ComponentSet connected_components(std::span<const std::uint8_t> binary, Dims dims,
                                  Connectivity connectivity);

struct MatchCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
  bool operator==(const MatchCounts&) const = default;
};

// A truth object is detected once if any predicted object overlaps it by at
// least `min_overlap_voxels`; a predicted object overlapping no truth object
// that much is one false positive.
MatchCounts match_objects(const ComponentSet& pred, const ComponentSet& truth,
                          std::size_t min_overlap_voxels);

struct PRPoint {
  double threshold = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 1, recall = 1, f1 = 1;

  // precision = 1 when nothing is predicted, recall = 1 when nothing is there.
  static PRPoint from_counts(double threshold, MatchCounts counts);
};

double f1_score(double precision, double recall);

enum class EvalMode { Voxel, Object };

const char* to_string(EvalMode mode);

struct EvalParams {
  EvalMode mode = EvalMode::Object;
  Connectivity connectivity = Connectivity::Full26;
  std::size_t min_overlap_voxels = 1;
  // Golden-section refinement of the best threshold, to 1e-3.
  bool refine = true;
};

struct DetectionReport {
  std::vector<PRPoint> curve;  // ascending threshold
  PRPoint best;
  EvalParams params;
  std::string volume_id;
  std::string network_checksum;
  std::size_t origin_offset = 0;
  std::size_t slice_offset = 0;
};

// 0.05, 0.10, ..., 0.95.
std::vector<double> default_thresholds();

// Counts at a single threshold on aligned grids.
MatchCounts count_at_threshold(std::span<const float> prob, std::span<const std::uint8_t> truth,
                               Dims dims, double threshold, const EvalParams& params);

// Curve over aligned grids (truth already cropped to the map).
DetectionReport pr_curve(std::span<const float> prob, std::span<const std::uint8_t> truth,
                         Dims dims, std::span<const double> thresholds, const EvalParams& params);

// Crops `truth` by the map's recorded offsets, then sweeps.
DetectionReport pr_curve(const ProbabilityMap& prob, const LabelVolume& truth,
                         std::span<const double> thresholds, const EvalParams& params);

// Ground truth restricted to the grid covered by `prob`.
std::vector<std::uint8_t> crop_to_map(const LabelVolume& truth, const ProbabilityMap& prob);

// Precision on the constant-F1 contour at the given recall.
double contour_precision(double f1_level, double recall);

// (recall, precision) samples of the constant-F1 contour for the feasible
// recalls [f1 / (2 - f1), 1].
std::vector<std::pair<double, double>> f1_contour(double f1_level, std::size_t resolution);

std::string pr_csv(const DetectionReport& report);
std::string contour_csv(std::span<const std::pair<double, double>> points);
nlohmann::json to_json(const DetectionReport& report);

// Best object-level test F1 reported for the reference classifiers, on their
// own data. Comparison only.
struct ReferenceScore {
  const char* classifier;
  double test_f1;
};
inline constexpr ReferenceScore kReferenceScores[] = {
    {"V-RF", 0.801}, {"V-CNN", 0.820}, {"V-CNN-2", 0.869}};

}  // namespace adn
