#include "adn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "adn/error.hpp"
#include "adn/inference.hpp"
#include "adn/metrics.hpp"
#include "adn/parallel.hpp"

namespace adn {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) fail(Errc::InvalidArgument, "train config: " + what);
}

struct StackGeometry {
  std::size_t fov, off, channels, below, above;
  explicit StackGeometry(const NetworkSpec& spec)
      : fov(spec.field_of_view()),
        off((spec.field_of_view() - 1) / 2),
        channels(spec.input_channels()),
        below((spec.input_channels() - 1) / 2),
        above(spec.input_channels() / 2) {}
};

// Centre slices whose full channel stack lies inside `range`.
SliceRange centre_slices(const StackGeometry& g, SliceRange range) {
  if (range.size() < g.channels) return {range.begin, range.begin};
  return {range.begin + g.below, range.end - g.above};
}

void check_data(const LabeledSlices& data, const char* what) {
  if (!data.volume || !data.labels) fail(Errc::InvalidArgument, std::string(what) + ": no data");
  if (data.volume->dims() != data.labels->dims()) {
    fail(Errc::GridMismatch, std::string(what) + ": labels do not match volume");
  }
  if (data.slices.end > data.volume->dims().depth || data.slices.begin >= data.slices.end) {
    fail(Errc::InvalidArgument, std::string(what) + ": slice range out of bounds");
  }
}

// Caches the synapse and background centre lists of a labelled range.
class PatchSampler {
 public:
  PatchSampler(const NetworkSpec& spec, const LabeledSlices& data) : geom_(spec), data_(data) {
    check_data(data, "sampler");
    const Dims& d = data.volume->dims();
    if (d.height < geom_.fov || d.width < geom_.fov) {
      fail(Errc::ShapeMismatch, "slices smaller than the field of view");
    }
    const SliceRange zs = centre_slices(geom_, data.slices);
    for (std::size_t z = zs.begin; z < zs.end; ++z) {
      for (std::size_t y = geom_.off; y + geom_.fov - geom_.off <= d.height; ++y) {
        for (std::size_t x = geom_.off; x + geom_.fov - geom_.off <= d.width; ++x) {
          const std::size_t idx = (z * d.height + y) * d.width + x;
          (data.labels->mask()[idx] ? positives_ : negatives_).push_back(idx);
        }
      }
    }
    if (positives_.empty()) fail(Errc::ClassAbsent, "no synapse-centred patches in the training range");
    if (negatives_.empty()) fail(Errc::ClassAbsent, "no background-centred patches in the training range");
  }

  Batch sample(const TrainConfig& config, std::mt19937_64& rng) const {
    const double want = static_cast<double>(config.batch_size) * config.positive_fraction;
    std::size_t n_pos = static_cast<std::size_t>(std::floor(want));
    const double remainder = want - static_cast<double>(n_pos);
    if (remainder > 0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      if (u(rng) < remainder) ++n_pos;
    }
    n_pos = std::min(n_pos, config.batch_size);
    Batch batch;
    batch.patches.reserve(config.batch_size);
    auto draw = [&](const std::vector<std::size_t>& pool, std::uint8_t label) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      batch.patches.push_back(extract(pool[pick(rng)]));
      batch.labels.push_back(label);
    };
    for (std::size_t i = 0; i < n_pos; ++i) draw(positives_, 1);
    for (std::size_t i = n_pos; i < config.batch_size; ++i) draw(negatives_, 0);
    return batch;
  }

 private:
  Tensor extract(std::size_t centre) const {
    const Dims& d = data_.volume->dims();
    const std::size_t z = centre / d.plane(), y = (centre / d.width) % d.height, x = centre % d.width;
    const std::size_t top = y - geom_.off, left = x - geom_.off, fov = geom_.fov;
    Tensor patch({geom_.channels, fov, fov});
    for (std::size_t c = 0; c < geom_.channels; ++c) {
      auto plane = data_.volume->slice(z - geom_.below + c);
      for (std::size_t r = 0; r < fov; ++r) {
        std::memcpy(patch.data() + (c * fov + r) * fov, plane.data() + (top + r) * d.width + left,
                    fov * sizeof(float));
      }
    }
    return patch;
  }

  StackGeometry geom_;
  LabeledSlices data_;
  std::vector<std::size_t> positives_, negatives_;
};

Tensor maxpool_with_argmax(const Tensor& in, const LayerSpec& l, std::vector<std::size_t>& argmax) {
  const std::size_t c = in.extent(0), h = in.extent(1), w = in.extent(2);
  const std::size_t oh = output_extent(h, l.kernel_extent, l.stride, l.dilation);
  const std::size_t ow = output_extent(w, l.kernel_extent, l.stride, l.dilation);
  if (oh == 0 || ow == 0) fail(Errc::ShapeMismatch, "pooling window larger than input");
  const std::size_t sp = l.dilation.spacing();
  Tensor out({c, oh, ow});
  argmax.assign(out.size(), 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (ch * h + y * l.stride) * w + x * l.stride;
        for (std::size_t ky = 0; ky < l.kernel_extent; ++ky) {
          for (std::size_t kx = 0; kx < l.kernel_extent; ++kx) {
            const std::size_t idx = (ch * h + y * l.stride + ky * sp) * w + x * l.stride + kx * sp;
            if (in.data()[best] < in.data()[idx]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + y) * ow + x;
        out.data()[o] = in.data()[best];
        argmax[o] = best;
      }
    }
  }
  return out;
}

// Single-sample loss and gradients; `grads` must be zero-initialized.
double sample_backward(const NetworkSpec& spec, const Tensor& patch, std::uint8_t label,
                       std::vector<LayerGradient>& grads) {
  const auto& layers = spec.layers();
  const std::size_t L = layers.size();
  std::vector<Tensor> acts(L + 1);
  std::vector<std::vector<std::size_t>> argmax(L);
  acts[0] = patch;
  for (std::size_t l = 0; l < L; ++l) {
    const LayerSpec& layer = layers[l];
    switch (layer.kind) {
      case LayerKind::Conv:
        if (!layer.params) fail(Errc::InconsistentSpec, "convolution layer has no parameters");
        acts[l + 1] = conv2d(acts[l], layer.params->weights, layer.params->bias, layer.stride,
                             layer.dilation);
        break;
      case LayerKind::MaxPool:
        acts[l + 1] = maxpool_with_argmax(acts[l], layer, argmax[l]);
        break;
      case LayerKind::ReLU:
        acts[l + 1] = relu(acts[l]);
        break;
      case LayerKind::Softmax:
        acts[l + 1] = softmax_channels(acts[l]);
        break;
    }
  }
  const Tensor& probs = acts[L];
  if (probs.extent(1) != 1 || probs.extent(2) != 1) {
    fail(Errc::ShapeMismatch, "backward expects patches of exactly the field of view");
  }
  const float p_true = probs.data()[label];
  const double loss = -std::log(std::max(static_cast<double>(p_true), 1e-30));

  // d loss / d logits of the final softmax.
  Tensor g = probs;
  g.data()[label] -= 1.0f;
  for (std::size_t l = L - 1; l-- > 0;) {
    const LayerSpec& layer = layers[l];
    const Tensor& in = acts[l];
    switch (layer.kind) {
      case LayerKind::Conv: {
        const Tensor& w = layer.params->weights;
        const std::size_t cout = w.extent(0), cin = w.extent(1), k = w.extent(2);
        const std::size_t h = in.extent(1), width = in.extent(2);
        const std::size_t oh = g.extent(1), ow = g.extent(2);
        const std::size_t s = layer.stride, sp = layer.dilation.spacing();
        LayerGradient& lg = grads[l];
        const bool need_input_grad = l > 0;
        Tensor din(need_input_grad ? in.shape() : Shape{});
        for (std::size_t o = 0; o < cout; ++o) {
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
              const float go = g(o, y, x);
              lg.bias[o] += go;
              if (go == 0.0f) continue;
              for (std::size_t i = 0; i < cin; ++i) {
                for (std::size_t ky = 0; ky < k; ++ky) {
                  const std::size_t row = (i * h + y * s + ky * sp) * width + x * s;
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::size_t idx = row + kx * sp;
                    lg.weights(o, i, ky, kx) += go * in.data()[idx];
                    if (need_input_grad) din.data()[idx] += w(o, i, ky, kx) * go;
                  }
                }
              }
            }
          }
        }
        g = std::move(din);
        break;
      }
      case LayerKind::MaxPool: {
        Tensor din(in.shape());
        for (std::size_t o = 0; o < g.size(); ++o) din.data()[argmax[l][o]] += g.data()[o];
        g = std::move(din);
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!(in.data()[i] > 0.0f)) g.data()[i] = 0.0f;
        }
        break;
      case LayerKind::Softmax:
        fail(Errc::InconsistentSpec, "softmax must be the final layer");
    }
  }
  return loss;
}

std::vector<LayerGradient> zero_gradients(const NetworkSpec& spec) {
  std::vector<LayerGradient> grads(spec.layers().size());
  for (std::size_t l = 0; l < grads.size(); ++l) {
    const auto& layer = spec.layers()[l];
    if (layer.kind == LayerKind::Conv && layer.params) {
      grads[l].weights = Tensor(layer.params->weights.shape());
      grads[l].bias.assign(layer.params->bias.size(), 0.0f);
    }
  }
  return grads;
}

bool all_finite(const Gradients& g) {
  if (!std::isfinite(g.loss)) return false;
  for (const auto& lg : g.layers) {
    for (float v : lg.weights.values()) {
      if (!std::isfinite(v)) return false;
    }
    for (float v : lg.bias) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// Optimizer state for one parameter buffer.
struct Slot {
  std::vector<float> first, second;
};

class Optimizer {
 public:
  Optimizer(const TrainConfig& config, const NetworkSpec& spec) : config_(config) {
    for (const auto& layer : spec.layers()) {
      if (!layer.params) continue;
      slots_.push_back(make_slot(layer.params->weights.size()));
      slots_.push_back(make_slot(layer.params->bias.size()));
    }
  }

  void step(const NetworkSpec& spec, const Gradients& grads) {
    ++t_;
    std::size_t slot = 0;
    for (std::size_t l = 0; l < spec.layers().size(); ++l) {
      const auto& layer = spec.layers()[l];
      if (!layer.params) continue;
      apply(layer.params->weights.values(), grads.layers[l].weights.values(), slots_[slot++]);
      apply(layer.params->bias, grads.layers[l].bias, slots_[slot++]);
    }
  }

 private:
  Slot make_slot(std::size_t n) const {
    Slot s;
    s.first.assign(n, 0.0f);
    if (config_.optimizer == OptimizerKind::Adam) s.second.assign(n, 0.0f);
    return s;
  }

  void apply(std::span<float> params, std::span<const float> grad, Slot& s) const {
    const auto lr = static_cast<float>(config_.learning_rate);
    if (config_.optimizer == OptimizerKind::SgdMomentum) {
      const auto mu = static_cast<float>(config_.momentum);
      for (std::size_t i = 0; i < params.size(); ++i) {
        s.first[i] = mu * s.first[i] - lr * grad[i];
        params[i] += s.first[i];
      }
      return;
    }
    const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      s.first[i] = static_cast<float>(b1 * s.first[i] + (1.0 - b1) * grad[i]);
      s.second[i] = static_cast<float>(b2 * s.second[i] + (1.0 - b2) * grad[i] * grad[i]);
      const double m = s.first[i] / c1, v = s.second[i] / c2;
      params[i] -= static_cast<float>(config_.learning_rate * m / (std::sqrt(v) + config_.adam_epsilon));
    }
  }

  TrainConfig config_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  require(std::isfinite(learning_rate) && learning_rate >= 0, "learning_rate must be >= 0");
  require(momentum >= 0 && momentum < 1, "momentum must lie in [0, 1)");
  require(batch_size > 0, "batch_size must be positive");
  require(steps > 0, "steps must be positive");
  require(positive_fraction > 0 && positive_fraction < 1, "positive_fraction must lie in (0, 1)");
  require(validation_interval > 0, "validation_interval must be positive");
  require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1,
          "adam betas must lie in [0, 1)");
  require(adam_epsilon > 0, "adam_epsilon must be positive");
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.positive_fraction = j.value("positive_fraction", c.positive_fraction);
    c.seed = j.value("seed", c.seed);
    c.validation_interval = j.value("validation_interval", c.validation_interval);
    const std::string opt = j.value("optimizer", std::string("sgd"));
    if (opt == "sgd") {
      c.optimizer = OptimizerKind::SgdMomentum;
    } else if (opt == "adam") {
      c.optimizer = OptimizerKind::Adam;
    } else {
      fail(Errc::InvalidArgument, "train config: unknown optimizer \"" + opt + "\" (sgd|adam)");
    }
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::InvalidArgument, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"positive_fraction", c.positive_fraction},
          {"seed", c.seed},
          {"validation_interval", c.validation_interval},
          {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon}};
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  Bytes bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) fail(Errc::InvalidArgument, path.string() + ": not valid JSON");
  return train_config_from_json(j);
}

Batch sample_batch(const NetworkSpec& spec, const LabeledSlices& data, const TrainConfig& config,
                   std::mt19937_64& rng) {
  config.validate();
  return PatchSampler(spec, data).sample(config, rng);
}

Gradients backward(const NetworkSpec& spec, std::span<const Tensor> patches,
                   std::span<const std::uint8_t> labels) {
  if (spec.mode() != Mode::Patch) fail(Errc::InvalidArgument, "backward needs a patch-mode network");
  if (patches.empty() || patches.size() != labels.size()) {
    fail(Errc::ShapeMismatch, "batch needs matching, non-empty patch and label lists");
  }
  const std::size_t fov = spec.field_of_view();
  const Shape expected{spec.input_channels(), fov, fov};
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i].shape() != expected) fail(Errc::ShapeMismatch, "patch shape does not match the network");
    if (labels[i] > 1) fail(Errc::InvalidArgument, "labels must be 0 or 1");
  }

  std::vector<std::vector<LayerGradient>> per_sample(patches.size());
  std::vector<double> losses(patches.size());
  parallel_for(patches.size(), [&](std::size_t first, std::size_t last) {
    for (std::size_t i = first; i < last; ++i) {
      per_sample[i] = zero_gradients(spec);
      losses[i] = sample_backward(spec, patches[i], labels[i], per_sample[i]);
    }
  });

  // Reduce in sample order so the result does not depend on the worker count.
  Gradients out;
  out.layers = zero_gradients(spec);
  const float scale = 1.0f / static_cast<float>(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    out.loss += losses[i];
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      auto dst = out.layers[l].weights.values();
      auto src = per_sample[i][l].weights.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      for (std::size_t k = 0; k < out.layers[l].bias.size(); ++k) {
        out.layers[l].bias[k] += per_sample[i][l].bias[k];
      }
    }
  }
  out.loss /= static_cast<double>(patches.size());
  for (auto& lg : out.layers) {
    for (float& v : lg.weights.values()) v *= scale;
    for (float& v : lg.bias) v *= scale;
  }
  return out;
}

NetworkSpec initialize_parameters(const NetworkSpec& architecture, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> layers = architecture.layers();
  std::size_t channels = architecture.input_channels();
  for (auto& l : layers) {
    if (l.kind != LayerKind::Conv) continue;
    const std::size_t area = l.kernel_extent * l.kernel_extent;
    const double limit = std::sqrt(6.0 / static_cast<double>((channels + l.out_channels) * area));
    std::uniform_real_distribution<float> u(static_cast<float>(-limit), static_cast<float>(limit));
    auto params = std::make_shared<ConvParams>();
    params->weights = Tensor({l.out_channels, channels, l.kernel_extent, l.kernel_extent});
    for (float& v : params->weights.values()) v = u(rng);
    params->bias.assign(l.out_channels, 0.0f);
    l.params = std::move(params);
    channels = l.out_channels;
  }
  return NetworkSpec(architecture.input_channels(), std::move(layers), architecture.mode(),
                     architecture.patch_size());
}

std::string TrainLog::csv() const {
  std::string out = "step,loss,val_f1,seconds\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.3f\n", r.step, r.loss, r.val_f1, r.seconds);
    out += buf;
  }
  return out;
}

double validation_f1(const NetworkSpec& patch, const LabeledSlices& data) {
  check_data(data, "validation");
  const NetworkSpec dense = patch.mode() == Mode::Patch ? patch_to_dense(patch) : patch;
  const StackGeometry g(dense);
  const SliceRange zs = centre_slices(g, data.slices);
  if (zs.begin >= zs.end) fail(Errc::ShapeMismatch, "validation range thinner than the channel stack");
  const Dims& d = data.volume->dims();
  MatchCounts c;
  for (std::size_t z = zs.begin; z < zs.end; ++z) {
    Tensor map = apply_dense(dense, data.volume->slice_stack(z - g.below, g.channels));
    const std::size_t oh = map.extent(1), ow = map.extent(2);
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const bool pred = map(0, y, x) >= 0.5f;
        const bool truth = data.labels->mask()[(z * d.height + y + g.off) * d.width + x + g.off] != 0;
        c.tp += pred && truth;
        c.fp += pred && !truth;
        c.fn += !pred && truth;
      }
    }
  }
  return PRPoint::from_counts(0.5, c).f1;
}

TrainResult train(const NetworkSpec& initial, const LabeledSlices& train_data,
                  const LabeledSlices& validation_data, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (initial.mode() != Mode::Patch) fail(Errc::InvalidArgument, "training needs a patch-mode network");
  if (!initial.has_params()) fail(Errc::InvalidArgument, "network has uninitialized parameters");
  check_data(train_data, "training");
  check_data(validation_data, "validation");
  if (train_data.volume == validation_data.volume &&
      train_data.slices.overlaps(validation_data.slices)) {
    fail(Errc::InvalidArgument, "training and validation slices overlap");
  }

  const auto start = std::chrono::steady_clock::now();
  NetworkSpec current = initial.deep_copy();
  PatchSampler sampler(current, train_data);
  std::mt19937_64 rng(config.seed);
  Optimizer optimizer(config, current);

  TrainResult result{initial.deep_copy(), {}, 0, -1.0};
  double interval_loss = 0;
  std::size_t interval_steps = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    Batch batch = sampler.sample(config, rng);
    Gradients grads = backward(current, batch.patches, batch.labels);
    if (!all_finite(grads)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "training diverged at step %zu (loss %g); lower the learning rate",
                    step, grads.loss);
      fail(Errc::Divergence, buf);
    }
    optimizer.step(current, grads);
    interval_loss += grads.loss;
    ++interval_steps;

    if (step % config.validation_interval == 0 || step == config.steps) {
      TrainRecord rec;
      rec.step = step;
      rec.loss = interval_loss / static_cast<double>(interval_steps);
      rec.val_f1 = validation_f1(current, validation_data);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.records.push_back(rec);
      interval_loss = 0;
      interval_steps = 0;
      if (rec.val_f1 > result.best_val_f1) {
        result.best_val_f1 = rec.val_f1;
        result.best_step = step;
        result.spec = current.deep_copy();
      }
      if (hooks.on_validation) hooks.on_validation(step, current);
    }
  }
  return result;
}

}  // namespace adn
