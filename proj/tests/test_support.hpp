#pragma once

// Shared generators and independent reference implementations for the test
// suites. Nothing here calls into the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "adn/metrics.hpp"
#include "adn/netspec.hpp"
#include "adn/tensor.hpp"
#include "adn/training.hpp"

namespace adn::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> u(lo, hi);
  for (float& v : t.values()) v = u(rng);
  return t;
}

inline std::vector<float> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

// Naive valid convolution in double precision.
inline std::vector<double> reference_conv2d(const Tensor& in, const Tensor& k,
                                            std::span<const float> bias, std::size_t stride,
                                            std::size_t rate) {
  const std::size_t cin = in.extent(0), h = in.extent(1), w = in.extent(2);
  const std::size_t cout = k.extent(0), kh = k.extent(2), kw = k.extent(3);
  const std::size_t eh = kh + (kh - 1) * rate, ew = kw + (kw - 1) * rate;
  const std::size_t oh = (h - eh) / stride + 1, ow = (w - ew) / stride + 1;
  std::vector<double> out(cout * oh * ow);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = bias[o];
        for (std::size_t i = 0; i < cin; ++i)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              acc += static_cast<double>(k(o, i, ky, kx)) *
                     in(i, y * stride + ky * (rate + 1), x * stride + kx * (rate + 1));
        out[(o * oh + y) * ow + x] = acc;
      }
  return out;
}

// Kernel with `rate` zeros inserted between adjacent taps.
inline Tensor zero_stuff(const Tensor& k, std::size_t rate) {
  const std::size_t kh = k.extent(2), kw = k.extent(3);
  Tensor out({k.extent(0), k.extent(1), kh + (kh - 1) * rate, kw + (kw - 1) * rate});
  for (std::size_t o = 0; o < k.extent(0); ++o)
    for (std::size_t i = 0; i < k.extent(1); ++i)
      for (std::size_t y = 0; y < kh; ++y)
        for (std::size_t x = 0; x < kw; ++x) out(o, i, y * (rate + 1), x * (rate + 1)) = k(o, i, y, x);
  return out;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(static_cast<double>(a[i]) - b[i]));
  }
  return worst;
}

struct NetGenOptions {
  std::size_t min_convs = 1, max_convs = 4;
  std::size_t max_pools = 2;
  std::size_t max_channels = 8;
  std::size_t max_extent = 5;
  std::size_t max_fov = 33;
  std::size_t input_channels = 1;
  bool native_dilation = true;
};

// Random valid patch network: convs (optionally natively dilated) with ReLUs,
// stride-2 pools between them, a final 2-channel conv and softmax. Parameters
// are initialized from `rng`.
inline NetworkSpec random_patch_net(std::mt19937_64& rng, const NetGenOptions& opt = {}) {
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  for (;;) {
    const std::size_t convs = pick(opt.min_convs, opt.max_convs);
    const std::size_t pools = pick(0, opt.max_pools);
    // pool_after[i]: number of pools following conv i (never after the last).
    std::vector<std::size_t> pool_after(convs, 0);
    for (std::size_t p = 0; p < pools && convs > 1; ++p) ++pool_after[pick(0, convs - 2)];
    std::vector<LayerSpec> layers;
    for (std::size_t c = 0; c < convs; ++c) {
      const bool last = c + 1 == convs;
      const std::size_t rate = opt.native_dilation && pick(0, 3) == 0 ? 1 : 0;
      layers.push_back(LayerSpec::conv(pick(1, opt.max_extent), last ? 2 : pick(1, opt.max_channels),
                                       DilationRate{rate}));
      if (!last) layers.push_back(LayerSpec::relu());
      for (std::size_t p = 0; p < pool_after[c]; ++p) {
        layers.push_back(LayerSpec::maxpool(pick(2, 3), 2));
      }
    }
    layers.push_back(LayerSpec::softmax());
    NetworkSpec arch(opt.input_channels, layers);
    if (arch.field_of_view() > opt.max_fov) continue;
    NetworkSpec net = initialize_parameters(arch, rng());
    // Random biases so that ReLUs and pools see both signs.
    for (const auto& l : net.layers()) {
      if (l.params) l.params->bias = random_vector(l.params->bias.size(), rng);
    }
    return net;
  }
}

// Double-precision reference for the patch-mode loss. The first pass records
// every ReLU sign and pool argmax; later passes replay those decisions, so the
// loss is a smooth function of the parameters and central differences are
// exact up to rounding.
class FrozenLoss {
 public:
  struct Params {
    std::vector<std::vector<double>> weights, bias;  // per layer, empty if not conv
  };

  FrozenLoss(const NetworkSpec& spec, std::vector<Tensor> patches, std::vector<std::uint8_t> labels)
      : spec_(spec), patches_(std::move(patches)), labels_(std::move(labels)) {
    for (const auto& l : spec.layers()) {
      params_.weights.emplace_back();
      params_.bias.emplace_back();
      if (!l.params) continue;
      params_.weights.back().assign(l.params->weights.values().begin(), l.params->weights.values().end());
      params_.bias.back().assign(l.params->bias.begin(), l.params->bias.end());
    }
    decisions_.resize(patches_.size());
    for (std::size_t s = 0; s < patches_.size(); ++s) run(params_, s, true);
  }

  const Params& params() const { return params_; }

  double loss(const Params& p) const {
    double total = 0;
    for (std::size_t s = 0; s < patches_.size(); ++s) total += run(p, s, false);
    return total / static_cast<double>(patches_.size());
  }
  double loss() const { return loss(params_); }

 private:
  struct Map {
    std::size_t c, h, w;
    std::vector<double> v;
    double& at(std::size_t i, std::size_t y, std::size_t x) { return v[(i * h + y) * w + x]; }
  };

  double run(const Params& p, std::size_t s, bool record) const {
    const Tensor& patch = patches_[s];
    Map cur{patch.extent(0), patch.extent(1), patch.extent(2),
            std::vector<double>(patch.values().begin(), patch.values().end())};
    auto& dec = decisions_[s];
    if (record) dec.assign(spec_.layers().size(), {});
    for (std::size_t li = 0; li < spec_.layers().size(); ++li) {
      const LayerSpec& l = spec_.layers()[li];
      const std::size_t sp = l.dilation.rate + 1, eff = l.effective_extent();
      if (l.kind == LayerKind::Conv) {
        const std::size_t k = l.kernel_extent, co = l.out_channels;
        Map out{co, (cur.h - eff) / l.stride + 1, (cur.w - eff) / l.stride + 1, {}};
        out.v.assign(co * out.h * out.w, 0.0);
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t y = 0; y < out.h; ++y)
            for (std::size_t x = 0; x < out.w; ++x) {
              double acc = p.bias[li][o];
              for (std::size_t i = 0; i < cur.c; ++i)
                for (std::size_t ky = 0; ky < k; ++ky)
                  for (std::size_t kx = 0; kx < k; ++kx)
                    acc += p.weights[li][((o * cur.c + i) * k + ky) * k + kx] *
                           cur.at(i, y * l.stride + ky * sp, x * l.stride + kx * sp);
              out.at(o, y, x) = acc;
            }
        cur = std::move(out);
      } else if (l.kind == LayerKind::ReLU) {
        if (record) {
          for (double v : cur.v) dec[li].push_back(v > 0 ? 1 : 0);
        }
        for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] = dec[li][i] ? cur.v[i] : 0.0;
      } else if (l.kind == LayerKind::MaxPool) {
        const std::size_t k = l.kernel_extent;
        Map out{cur.c, (cur.h - eff) / l.stride + 1, (cur.w - eff) / l.stride + 1, {}};
        out.v.assign(out.c * out.h * out.w, 0.0);
        std::size_t o = 0;
        for (std::size_t i = 0; i < cur.c; ++i)
          for (std::size_t y = 0; y < out.h; ++y)
            for (std::size_t x = 0; x < out.w; ++x, ++o) {
              if (record) {
                std::size_t best = (i * cur.h + y * l.stride) * cur.w + x * l.stride;
                for (std::size_t ky = 0; ky < k; ++ky)
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::size_t idx = (i * cur.h + y * l.stride + ky * sp) * cur.w + x * l.stride + kx * sp;
                    if (cur.v[idx] > cur.v[best]) best = idx;
                  }
                dec[li].push_back(best);
              }
              out.v[o] = cur.v[dec[li][o]];
            }
        cur = std::move(out);
      }
    }
    // Softmax cross-entropy on the single output location.
    const double m = std::max(cur.v[0], cur.v[1]);
    const double lse = m + std::log(std::exp(cur.v[0] - m) + std::exp(cur.v[1] - m));
    return lse - cur.v[labels_[s]];
  }

  const NetworkSpec& spec_;
  std::vector<Tensor> patches_;
  std::vector<std::uint8_t> labels_;
  Params params_;
  mutable std::vector<std::vector<std::vector<std::size_t>>> decisions_;
};

struct GradientCheck {
  std::size_t checked = 0, failures = 0;
  double worst_excess = -1;  // largest |a - fd| minus the allowed tolerance
  double largest_fd = 0;
};

// Compares library gradients with central differences of FrozenLoss.
// Tolerance per entry: max(rel * |fd|, abs).
inline GradientCheck check_gradients(const NetworkSpec& spec, const std::vector<Tensor>& patches,
                                     const std::vector<std::uint8_t>& labels, double rel = 1e-3,
                                     double abs_tol = 1e-5, double eps = 1e-4) {
  Gradients g = backward(spec, patches, labels);
  FrozenLoss oracle(spec, patches, labels);
  GradientCheck out;
  auto compare = [&](double analytic, double fd) {
    const double tol = std::max(rel * std::fabs(fd), abs_tol);
    const double excess = std::fabs(analytic - fd) - tol;
    ++out.checked;
    out.largest_fd = std::max(out.largest_fd, std::fabs(fd));
    if (excess > 0) ++out.failures;
    out.worst_excess = std::max(out.worst_excess, excess);
  };
  FrozenLoss::Params p = oracle.params();
  for (std::size_t li = 0; li < p.weights.size(); ++li) {
    for (int which = 0; which < 2; ++which) {
      auto& vec = which == 0 ? p.weights[li] : p.bias[li];
      for (std::size_t i = 0; i < vec.size(); ++i) {
        const double saved = vec[i];
        vec[i] = saved + eps;
        const double up = oracle.loss(p);
        vec[i] = saved - eps;
        const double down = oracle.loss(p);
        vec[i] = saved;
        const double fd = (up - down) / (2 * eps);
        const double analytic =
            which == 0 ? g.layers[li].weights.values()[i] : g.layers[li].bias[i];
        compare(analytic, fd);
      }
    }
  }
  return out;
}

// Component labelling by union-find over neighbouring voxel pairs,
// relabelled so that ids follow the raster order of each component's first voxel.
inline std::vector<std::uint32_t> brute_components(std::span<const std::uint8_t> mask, Dims d,
                                                   Connectivity conn) {
  const std::size_t n = d.voxels();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  const bool cross_slice = conn == Connectivity::Face6 || conn == Connectivity::Full26;
  const bool full = conn == Connectivity::Full8 || conn == Connectivity::Full26;
  for (std::size_t a = 0; a < n; ++a) {
    if (!mask[a]) continue;
    const long az = long(a / d.plane()), ay = long(a / d.width % d.height), ax = long(a % d.width);
    for (long dz = -1; dz <= 1; ++dz)
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long steps = std::labs(dz) + std::labs(dy) + std::labs(dx);
          if (steps == 0 || (dz && !cross_slice) || (!full && steps != 1)) continue;
          const long z = az + dz, y = ay + dy, x = ax + dx;
          if (z < 0 || y < 0 || x < 0 || z >= long(d.depth) || y >= long(d.height) || x >= long(d.width)) continue;
          const std::size_t b = (std::size_t(z) * d.height + std::size_t(y)) * d.width + std::size_t(x);
          if (mask[b]) parent[find(a)] = find(b);
        }
  }
  std::vector<std::uint32_t> out(n, 0);
  std::map<std::size_t, std::uint32_t> ids;
  for (std::size_t a = 0; a < n; ++a) {
    if (!mask[a]) continue;
    auto [it, fresh] = ids.emplace(find(a), static_cast<std::uint32_t>(ids.size() + 1));
    out[a] = it->second;
  }
  return out;
}

inline MatchCounts brute_match(const std::vector<std::uint32_t>& pred, const std::vector<std::uint32_t>& truth,
                               std::size_t min_overlap) {
  const std::uint32_t np = pred.empty() ? 0 : *std::max_element(pred.begin(), pred.end());
  const std::uint32_t nt = truth.empty() ? 0 : *std::max_element(truth.begin(), truth.end());
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> overlap;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && truth[i]) ++overlap[{pred[i], truth[i]}];
  }
  std::vector<bool> pred_hit(np + 1, false), truth_hit(nt + 1, false);
  for (const auto& [key, voxels] : overlap) {
    if (voxels < min_overlap) continue;
    pred_hit[key.first] = true;
    truth_hit[key.second] = true;
  }
  MatchCounts m;
  for (std::uint32_t t = 1; t <= nt; ++t) truth_hit[t] ? ++m.tp : ++m.fn;
  for (std::uint32_t p = 1; p <= np; ++p) m.fp += !pred_hit[p];
  return m;
}

inline MatchCounts brute_counts(std::span<const float> prob, std::span<const std::uint8_t> truth, Dims d,
                                double threshold, const EvalParams& params) {
  std::vector<std::uint8_t> pred(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) pred[i] = prob[i] >= threshold;
  if (params.mode == EvalMode::Voxel) {
    MatchCounts m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] && truth[i]) ++m.tp;
      if (pred[i] && !truth[i]) ++m.fp;
      if (!pred[i] && truth[i]) ++m.fn;
    }
    return m;
  }
  return brute_match(brute_components(pred, d, params.connectivity),
                     brute_components(truth, d, params.connectivity), params.min_overlap_voxels);
}

// Random binary blobs: a sparse seed mask grown by a few random dilation steps.
inline std::vector<std::uint8_t> random_blob_mask(Dims d, std::mt19937_64& rng, double density) {
  std::bernoulli_distribution seed(density), grow(0.5);
  std::vector<std::uint8_t> m(d.voxels());
  for (auto& v : m) v = seed(rng);
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<std::uint8_t> next = m;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      const std::size_t x = i % d.width;
      if (x + 1 < d.width && grow(rng)) next[i + 1] = 1;
      if (i + d.width < m.size() && grow(rng)) next[i + d.width] = 1;
      if (i + d.plane() < m.size() && grow(rng)) next[i + d.plane()] = 1;
    }
    m = std::move(next);
  }
  return m;
}

}  // namespace adn::test
