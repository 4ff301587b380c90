#include "adn/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "adn/error.hpp"
#include "adn/parallel.hpp"

namespace adn {
namespace {

struct Offset {
  int dz, dy, dx;
};

// Neighbours preceding or following a voxel; both halves are needed for a
// flood fill.
std::vector<Offset> neighbourhood(Connectivity c) {
  std::vector<Offset> out;
  const bool three_d = c == Connectivity::Face6 || c == Connectivity::Full26;
  const bool full = c == Connectivity::Full8 || c == Connectivity::Full26;
  for (int dz = three_d ? -1 : 0; dz <= (three_d ? 1 : 0); ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manhattan == 0) continue;
        if (!full && manhattan != 1) continue;
        out.push_back({dz, dy, dx});
      }
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void require_same_grid(std::size_t a, std::size_t b, const char* what) {
  if (a != b) fail(Errc::GridMismatch, std::string(what) + ": grids differ in size");
}

nlohmann::json point_json(const PRPoint& p) {
  return {{"threshold", p.threshold}, {"tp", p.tp},           {"fp", p.fp}, {"fn", p.fn},
          {"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

// Higher F1 wins; ties go to the lower threshold.
bool better(const PRPoint& a, const PRPoint& b) {
  return a.f1 > b.f1 || (a.f1 == b.f1 && a.threshold < b.threshold);
}

}  // namespace

const char* to_string(Connectivity c) {
  switch (c) {
    case Connectivity::Face4: return "face4";
    case Connectivity::Full8: return "full8";
    case Connectivity::Face6: return "face6";
    case Connectivity::Full26: return "full26";
  }
  return "?";
}

Connectivity connectivity_from_string(const std::string& s) {
  if (s == "face4") return Connectivity::Face4;
  if (s == "full8") return Connectivity::Full8;
  if (s == "face6") return Connectivity::Face6;
  if (s == "full26") return Connectivity::Full26;
  fail(Errc::InvalidArgument, "unknown connectivity \"" + s + "\" (face4|full8|face6|full26)");
}

const char* to_string(EvalMode mode) { return mode == EvalMode::Voxel ? "voxel" : "object"; }

ComponentSet connected_components(std::span<const std::uint8_t> binary, Dims dims,
                                  Connectivity connectivity) {
  require_same_grid(binary.size(), dims.voxels(), "connected_components");
  ComponentSet set;
  set.dims = dims;
  set.label_map.assign(dims.voxels(), 0);
  const auto offsets = neighbourhood(connectivity);
  const auto D = static_cast<long>(dims.depth), H = static_cast<long>(dims.height),
             W = static_cast<long>(dims.width);
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < binary.size(); ++seed) {
    if (!binary[seed] || set.label_map[seed]) continue;
    const auto id = static_cast<std::uint32_t>(set.sizes.size() + 1);
    std::size_t size = 0;
    set.label_map[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      ++size;
      const long z = static_cast<long>(v) / (H * W), y = (static_cast<long>(v) / W) % H,
                 x = static_cast<long>(v) % W;
      for (const Offset& o : offsets) {
        const long nz = z + o.dz, ny = y + o.dy, nx = x + o.dx;
        if (nz < 0 || ny < 0 || nx < 0 || nz >= D || ny >= H || nx >= W) continue;
        const auto n = static_cast<std::size_t>((nz * H + ny) * W + nx);
        if (binary[n] && !set.label_map[n]) {
          set.label_map[n] = id;
          stack.push_back(n);
        }
      }
    }
    set.sizes.push_back(size);
  }
  return set;
}

MatchCounts match_objects(const ComponentSet& pred, const ComponentSet& truth,
                          std::size_t min_overlap_voxels) {
  if (pred.dims != truth.dims) fail(Errc::GridMismatch, "match_objects: grids differ");
  if (min_overlap_voxels == 0) fail(Errc::InvalidArgument, "min_overlap_voxels must be positive");
  std::unordered_map<std::uint64_t, std::size_t> overlap;
  for (std::size_t i = 0; i < pred.label_map.size(); ++i) {
    const std::uint32_t p = pred.label_map[i], t = truth.label_map[i];
    if (p && t) ++overlap[(static_cast<std::uint64_t>(p) << 32) | t];
  }
  std::vector<bool> pred_hit(pred.count() + 1, false), truth_hit(truth.count() + 1, false);
  for (const auto& [key, n] : overlap) {
    if (n < min_overlap_voxels) continue;
    pred_hit[key >> 32] = true;
    truth_hit[key & 0xffffffffu] = true;
  }
  MatchCounts c;
  c.tp = static_cast<std::size_t>(std::count(truth_hit.begin() + 1, truth_hit.end(), true));
  c.fn = truth.count() - c.tp;
  c.fp = pred.count() - static_cast<std::size_t>(std::count(pred_hit.begin() + 1, pred_hit.end(), true));
  return c;
}

double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s == 0.0 ? 0.0 : 2.0 * precision * recall / s;
}

PRPoint PRPoint::from_counts(double threshold, MatchCounts c) {
  PRPoint p;
  p.threshold = threshold;
  p.tp = c.tp;
  p.fp = c.fp;
  p.fn = c.fn;
  p.precision = c.tp + c.fp == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  p.recall = c.tp + c.fn == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  p.f1 = f1_score(p.precision, p.recall);
  return p;
}

std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 19; ++i) t.push_back(i * 0.05);
  return t;
}

MatchCounts count_at_threshold(std::span<const float> prob, std::span<const std::uint8_t> truth,
                               Dims dims, double threshold, const EvalParams& params) {
  require_same_grid(prob.size(), dims.voxels(), "probability map");
  require_same_grid(truth.size(), dims.voxels(), "ground truth");
  std::vector<std::uint8_t> pred(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) pred[i] = prob[i] >= threshold ? 1 : 0;
  if (params.mode == EvalMode::Voxel) {
    MatchCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      c.tp += pred[i] & truth[i];
      c.fp += pred[i] & (truth[i] ^ 1u);
      c.fn += (pred[i] ^ 1u) & truth[i];
    }
    return c;
  }
  return match_objects(connected_components(pred, dims, params.connectivity),
                       connected_components(truth, dims, params.connectivity),
                       params.min_overlap_voxels);
}

DetectionReport pr_curve(std::span<const float> prob, std::span<const std::uint8_t> truth,
                         Dims dims, std::span<const double> thresholds, const EvalParams& params) {
  if (thresholds.empty()) fail(Errc::InvalidArgument, "threshold list is empty");
  require_same_grid(prob.size(), dims.voxels(), "probability map");
  require_same_grid(truth.size(), dims.voxels(), "ground truth");
  std::vector<double> sorted(thresholds.begin(), thresholds.end());
  for (double t : sorted) {
    if (!(t >= 0.0 && t <= 1.0)) fail(Errc::InvalidArgument, "thresholds must lie in [0,1]");
  }
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  auto point_at = [&](double t) {
    return PRPoint::from_counts(t, count_at_threshold(prob, truth, dims, t, params));
  };
  DetectionReport report;
  report.params = params;
  report.curve.resize(sorted.size());
  parallel_for(sorted.size(), [&](std::size_t first, std::size_t last) {
    for (std::size_t i = first; i < last; ++i) report.curve[i] = point_at(sorted[i]);
  });
  std::size_t best_index = 0;
  for (std::size_t i = 1; i < report.curve.size(); ++i) {
    if (better(report.curve[i], report.curve[best_index])) best_index = i;
  }
  report.best = report.curve[best_index];

  if (params.refine && sorted.size() > 1) {
    // Bracket the best sweep point by its neighbours and golden-section on F1.
    double lo = best_index > 0 ? sorted[best_index - 1] : sorted[0];
    double hi = best_index + 1 < sorted.size() ? sorted[best_index + 1] : sorted.back();
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = hi - ratio * (hi - lo), b = lo + ratio * (hi - lo);
    PRPoint pa = point_at(a), pb = point_at(b);
    while (hi - lo > 1e-3) {
      if (pa.f1 >= pb.f1) {
        hi = b;
        b = a;
        pb = pa;
        a = hi - ratio * (hi - lo);
        pa = point_at(a);
      } else {
        lo = a;
        a = b;
        pa = pb;
        b = lo + ratio * (hi - lo);
        pb = point_at(b);
      }
    }
    PRPoint refined = pa.f1 >= pb.f1 ? pa : pb;
    if (refined.f1 > report.best.f1) {
      report.best = refined;
      auto pos = std::lower_bound(report.curve.begin(), report.curve.end(), refined.threshold,
                                  [](const PRPoint& p, double t) { return p.threshold < t; });
      if (pos == report.curve.end() || pos->threshold != refined.threshold) {
        report.curve.insert(pos, refined);
      }
    }
  }
  return report;
}

std::vector<std::uint8_t> crop_to_map(const LabelVolume& truth, const ProbabilityMap& prob) {
  const Dims& t = truth.dims();
  const Dims& m = prob.dims;
  const auto off = prob.origin_offset;
  const bool aligned = m.height <= t.height && m.width <= t.width &&
                       (t.height - m.height) / 2 == off && (t.width - m.width) / 2 == off &&
                       t.height - m.height == t.width - m.width &&
                       prob.slice_offset + m.depth <= t.depth;
  if (!aligned) {
    fail(Errc::GridMismatch,
         "grid mismatch: map " + std::to_string(m.depth) + "x" + std::to_string(m.height) + "x" +
             std::to_string(m.width) + " at offsets (z " + std::to_string(prob.slice_offset) +
             ", xy " + std::to_string(off) + ") does not fit labels " + std::to_string(t.depth) +
             "x" + std::to_string(t.height) + "x" + std::to_string(t.width));
  }
  if (!prob.source_volume_id.empty() && !truth.volume_id().empty() &&
      prob.source_volume_id != truth.volume_id()) {
    fail(Errc::GridMismatch, "grid mismatch: map was computed from volume " + prob.source_volume_id +
                                 " but labels belong to volume " + truth.volume_id());
  }
  std::vector<std::uint8_t> out(m.voxels());
  for (std::size_t z = 0; z < m.depth; ++z) {
    for (std::size_t y = 0; y < m.height; ++y) {
      for (std::size_t x = 0; x < m.width; ++x) {
        out[(z * m.height + y) * m.width + x] = truth.at(z + prob.slice_offset, y + off, x + off);
      }
    }
  }
  return out;
}

DetectionReport pr_curve(const ProbabilityMap& prob, const LabelVolume& truth,
                         std::span<const double> thresholds, const EvalParams& params) {
  const auto cropped = crop_to_map(truth, prob);
  DetectionReport report = pr_curve(prob.values, cropped, prob.dims, thresholds, params);
  report.volume_id = prob.source_volume_id;
  report.network_checksum = prob.network_checksum;
  report.origin_offset = prob.origin_offset;
  report.slice_offset = prob.slice_offset;
  return report;
}

double contour_precision(double f1_level, double recall) {
  return f1_level * recall / (2.0 * recall - f1_level);
}

std::vector<std::pair<double, double>> f1_contour(double f1_level, std::size_t resolution) {
  if (!(f1_level > 0.0 && f1_level <= 1.0)) {
    fail(Errc::InvalidArgument, "F1 level must lie in (0, 1]");
  }
  if (resolution == 0) fail(Errc::InvalidArgument, "contour resolution must be positive");
  const double r_min = f1_level / (2.0 - f1_level);
  std::vector<std::pair<double, double>> points;
  if (r_min >= 1.0 || resolution == 1) {
    points.emplace_back(1.0, contour_precision(f1_level, 1.0));
    return points;
  }
  for (std::size_t i = 0; i < resolution; ++i) {
    const double r = i + 1 == resolution
                         ? 1.0
                         : r_min + (1.0 - r_min) * static_cast<double>(i) /
                                       static_cast<double>(resolution - 1);
    points.emplace_back(r, std::min(1.0, contour_precision(f1_level, r)));
  }
  return points;
}

std::string pr_csv(const DetectionReport& report) {
  std::string out = "threshold,tp,fp,fn,precision,recall,f1\n";
  for (const PRPoint& p : report.curve) {
    out += fmt(p.threshold) + "," + std::to_string(p.tp) + "," + std::to_string(p.fp) + "," +
           std::to_string(p.fn) + "," + fmt(p.precision) + "," + fmt(p.recall) + "," + fmt(p.f1) +
           "\n";
  }
  return out;
}

std::string contour_csv(std::span<const std::pair<double, double>> points) {
  std::string out = "recall,precision\n";
  for (const auto& [r, p] : points) out += fmt(r) + "," + fmt(p) + "\n";
  return out;
}

nlohmann::json to_json(const DetectionReport& report) {
  nlohmann::json j;
  j["mode"] = to_string(report.params.mode);
  j["matching"] = {{"rule", "any-overlap"},
                   {"min_overlap_voxels", report.params.min_overlap_voxels},
                   {"connectivity", to_string(report.params.connectivity)},
                   {"threshold_refinement", report.params.refine ? "golden-section 1e-3" : "none"}};
  j["provenance"] = {{"volume_id", report.volume_id},
                     {"network_checksum", report.network_checksum},
                     {"origin_offset", report.origin_offset},
                     {"slice_offset", report.slice_offset}};
  j["best"] = point_json(report.best);
  j["curve"] = nlohmann::json::array();
  for (const PRPoint& p : report.curve) j["curve"].push_back(point_json(p));
  nlohmann::json refs = nlohmann::json::object();
  for (const auto& r : kReferenceScores) refs[r.classifier] = r.test_f1;
  j["reference_test_f1"] = refs;
  return j;
}

}  // namespace adn
