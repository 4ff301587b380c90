#include "adn/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include "adn/error.hpp"
#include "adn/parallel.hpp"

namespace adn {
namespace {

constexpr std::string_view kMapMagic = "ADNPROB1";

void check_slice(const NetworkSpec& spec, const Tensor& slice) {
  if (slice.rank() != 3 || slice.extent(0) != spec.input_channels()) {
    fail(Errc::ShapeMismatch, "slice must be [" + std::to_string(spec.input_channels()) +
                                  ",H,W] for this network");
  }
  const std::size_t fov = spec.field_of_view();
  if (slice.extent(1) < fov || slice.extent(2) < fov) {
    fail(Errc::ShapeMismatch, "slice " + std::to_string(slice.extent(1)) + "x" +
                                  std::to_string(slice.extent(2)) +
                                  " is smaller than the field of view " + std::to_string(fov));
  }
}

// Rows [row0, row0 + rows) of a [C, H, W] tensor.
Tensor row_window(const Tensor& t, std::size_t row0, std::size_t rows) {
  const std::size_t c = t.extent(0), w = t.extent(2), h = t.extent(1);
  Tensor out({c, rows, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::memcpy(out.data() + ch * rows * w, t.data() + (ch * h + row0) * w, rows * w * sizeof(float));
  }
  return out;
}

Tensor extract_patch(const Tensor& slice, std::size_t top, std::size_t left, std::size_t fov) {
  const std::size_t c = slice.extent(0), h = slice.extent(1), w = slice.extent(2);
  Tensor patch({c, fov, fov});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < fov; ++y) {
      std::memcpy(patch.data() + (ch * fov + y) * fov, slice.data() + (ch * h + top + y) * w + left,
                  fov * sizeof(float));
    }
  }
  return patch;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Restores the worker count on scope exit.
class ThreadScope {
 public:
  explicit ThreadScope(std::size_t n) : saved_(thread_count()) { set_thread_count(n); }
  ~ThreadScope() { set_thread_count(saved_); }
  ThreadScope(const ThreadScope&) = delete;
  ThreadScope& operator=(const ThreadScope&) = delete;

 private:
  std::size_t saved_;
};

}  // namespace

Tensor forward(const NetworkSpec& spec, const Tensor& input, ForwardStats* stats) {
  Tensor x = input;
  for (const LayerSpec& l : spec.layers()) {
    switch (l.kind) {
      case LayerKind::Conv:
        if (!l.params) fail(Errc::InconsistentSpec, "convolution layer has no parameters");
        x = conv2d(x, l.params->weights, l.params->bias, l.stride, l.dilation);
        break;
      case LayerKind::MaxPool:
        x = maxpool2d(x, l.kernel_extent, l.stride, l.dilation);
        break;
      case LayerKind::ReLU:
        x = relu(x);
        break;
      case LayerKind::Softmax:
        x = softmax_channels(x);
        break;
    }
    if (stats) ++stats->layer_evaluations;
  }
  return x;
}

std::vector<float> apply_patchwise(const NetworkSpec& patch, const Tensor& slice,
                                   std::span<const Position> centres) {
  if (patch.mode() != Mode::Patch) {
    fail(Errc::InvalidArgument, "apply_patchwise needs a patch-mode network");
  }
  check_slice(patch, slice);
  const std::size_t fov = patch.field_of_view(), off = origin_offset(patch);
  const std::size_t max_row = slice.extent(1) - fov + off, max_col = slice.extent(2) - fov + off;
  for (const Position& p : centres) {
    if (p.row < off || p.col < off || p.row > max_row || p.col > max_col) {
      fail(Errc::InvalidArgument, "position (" + std::to_string(p.row) + "," +
                                      std::to_string(p.col) + ") is outside the valid centre region [" +
                                      std::to_string(off) + "," + std::to_string(max_row) + "]x[" +
                                      std::to_string(off) + "," + std::to_string(max_col) + "]");
    }
  }
  std::vector<float> probs(centres.size());
  parallel_for(centres.size(), [&](std::size_t first, std::size_t last) {
    for (std::size_t i = first; i < last; ++i) {
      Tensor out = forward(patch, extract_patch(slice, centres[i].row - off, centres[i].col - off, fov));
      probs[i] = out(1, 0, 0);
    }
  });
  return probs;
}

Tensor apply_patchwise(const NetworkSpec& patch, const Tensor& slice) {
  check_slice(patch, slice);
  const std::size_t fov = patch.field_of_view(), off = origin_offset(patch);
  const std::size_t oh = slice.extent(1) - fov + 1, ow = slice.extent(2) - fov + 1;
  std::vector<Position> centres;
  centres.reserve(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) centres.push_back({y + off, x + off});
  }
  return Tensor({1, oh, ow}, apply_patchwise(patch, slice, centres));
}

Tensor apply_dense(const NetworkSpec& dense, const Tensor& slice, DenseOptions options,
                   ForwardStats* stats) {
  if (dense.mode() != Mode::Dense) {
    fail(Errc::InvalidArgument, "apply_dense needs a dense-mode network; convert it first");
  }
  check_slice(dense, slice);
  const std::size_t fov = dense.field_of_view();
  const std::size_t oh = slice.extent(1) - fov + 1, ow = slice.extent(2) - fov + 1;
  const std::size_t tile = options.tile_rows == 0 ? oh : std::min(options.tile_rows, oh);
  Tensor map({1, oh, ow});
  for (std::size_t y0 = 0; y0 < oh; y0 += tile) {
    const std::size_t rows = std::min(tile, oh - y0);
    Tensor out = (y0 == 0 && rows == oh) ? forward(dense, slice, stats)
                                         : forward(dense, row_window(slice, y0, rows + fov - 1), stats);
    if (out.extent(1) != rows || out.extent(2) != ow) {
      fail(Errc::InconsistentSpec, "dense network output extent does not match its field of view");
    }
    std::memcpy(map.data() + y0 * ow, out.data() + rows * ow, rows * ow * sizeof(float));
  }
  return map;
}

ProbabilityMap predict_volume(const NetworkSpec& spec, const Volume& volume, Mode mode,
                              const PredictOptions& options) {
  if (mode == Mode::Patch && spec.mode() != Mode::Patch) {
    fail(Errc::InvalidArgument, "patch-mode prediction needs a patch-mode network");
  }
  const NetworkSpec net = (mode == Mode::Dense && spec.mode() == Mode::Patch) ? patch_to_dense(spec) : spec;
  const std::size_t channels = net.input_channels();
  const Dims& d = volume.dims();
  const SliceRange range = options.slices.value_or(SliceRange{0, d.depth});
  if (range.end > d.depth || range.begin >= range.end) {
    fail(Errc::InvalidArgument, "slice range out of bounds");
  }
  const std::size_t below = (channels - 1) / 2, above = channels / 2;
  const std::size_t first = std::max(range.begin, below);
  const std::size_t last = std::min(range.end, d.depth >= above ? d.depth - above : 0);
  if (first >= last) {
    fail(Errc::ShapeMismatch, "volume is thinner than the " + std::to_string(channels) +
                                  "-slice channel stack");
  }
  const std::size_t fov = net.field_of_view();
  if (d.height < fov || d.width < fov) {
    fail(Errc::ShapeMismatch, "slices are smaller than the field of view " + std::to_string(fov));
  }

  ProbabilityMap map;
  map.dims = Dims{last - first, d.height - fov + 1, d.width - fov + 1};
  map.origin_offset = origin_offset(net);
  map.slice_offset = first;
  map.source_volume_id = volume.volume_id();
  map.network_checksum = network_checksum(spec);
  map.values.resize(map.dims.voxels());
  for (std::size_t z = first; z < last; ++z) {
    Tensor stack = volume.slice_stack(z - below, channels);
    Tensor probs = mode == Mode::Dense ? apply_dense(net, stack, DenseOptions{options.tile_rows})
                                       : apply_patchwise(net, stack);
    std::copy(probs.values().begin(), probs.values().end(),
              map.values.begin() + static_cast<std::ptrdiff_t>((z - first) * map.dims.plane()));
  }
  return map;
}

Bytes encode_probability_map(const ProbabilityMap& map) {
  nlohmann::json header;
  header["dims"] = {map.dims.depth, map.dims.height, map.dims.width};
  header["origin_offset"] = map.origin_offset;
  header["slice_offset"] = map.slice_offset;
  header["source_volume_id"] = map.source_volume_id;
  header["network_checksum"] = map.network_checksum;
  Bytes payload;
  append_f32_le(payload, map.values);
  return write_container(kMapMagic, header, payload);
}

ProbabilityMap decode_probability_map(std::span<const std::uint8_t> bytes) {
  ContainerView view = read_container(bytes, kMapMagic, ChecksumPolicy::Deferred, "probability map");
  ProbabilityMap map;
  try {
    auto dims = view.header.at("dims").get<std::vector<std::size_t>>();
    if (dims.size() != 3) fail(Errc::Corrupt, "probability map: dims must have three entries");
    map.dims = Dims{dims[0], dims[1], dims[2]};
    map.origin_offset = view.header.at("origin_offset").get<std::size_t>();
    map.slice_offset = view.header.value("slice_offset", std::size_t{0});
    map.source_volume_id = view.header.value("source_volume_id", std::string());
    map.network_checksum = view.header.value("network_checksum", std::string());
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::Corrupt, std::string("probability map: malformed header: ") + e.what());
  }
  if (view.payload.size() != map.dims.voxels() * 4) {
    fail(Errc::SizeMismatch, "probability map: payload does not match dims");
  }
  if (!view.checksum_ok) fail(Errc::Checksum, "probability map: CRC32 mismatch");
  map.values = decode_f32_le(view.payload);
  return map;
}

void save_probability_map(const ProbabilityMap& map, const std::filesystem::path& path) {
  write_file(path, encode_probability_map(map));
}

ProbabilityMap load_probability_map(const std::filesystem::path& path) {
  return decode_probability_map(read_file(path));
}

std::vector<Position> stratified_positions(std::size_t height, std::size_t width,
                                           std::size_t fov, double fraction) {
  if (height < fov || width < fov) fail(Errc::ShapeMismatch, "slice smaller than field of view");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    fail(Errc::InvalidArgument, "sample fraction must lie in (0, 1]");
  }
  const std::size_t oh = height - fov + 1, ow = width - fov + 1, off = (fov - 1) / 2;
  const auto step = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(1.0 / std::sqrt(fraction))));
  std::vector<Position> out;
  for (std::size_t y = step / 2; y < oh; y += step) {
    for (std::size_t x = step / 2; x < ow; x += step) out.push_back({y + off, x + off});
  }
  return out;
}

const ModeTiming* BenchmarkReport::find(Mode mode, std::size_t threads) const {
  for (const auto& t : timings) {
    if (t.mode == mode && t.threads == threads) return &t;
  }
  return nullptr;
}

BenchmarkReport benchmark(const NetworkSpec& spec, const Volume& volume,
                          const std::set<Mode>& modes, const BenchmarkConfig& config) {
  if (modes.empty()) fail(Errc::InvalidArgument, "benchmark needs at least one mode");
  if (config.timed_runs == 0) fail(Errc::InvalidArgument, "benchmark needs at least one timed run");
  if (modes.count(Mode::Patch) && spec.mode() != Mode::Patch) {
    fail(Errc::InvalidArgument, "patch-mode benchmark needs a patch-mode network");
  }
  const NetworkSpec dense = spec.mode() == Mode::Patch ? patch_to_dense(spec) : spec;
  const std::size_t fov = dense.field_of_view();
  const std::size_t below = (spec.input_channels() - 1) / 2;
  const std::size_t z = std::max(config.slice, below);
  const Tensor slice = volume.slice_stack(z - below, spec.input_channels());
  check_slice(dense, slice);
  const std::size_t oh = slice.extent(1) - fov + 1, ow = slice.extent(2) - fov + 1;
  const std::size_t voxels = oh * ow;

  BenchmarkReport report;
  report.slice_dims = Dims{1, slice.extent(1), slice.extent(2)};
  report.field_of_view = fov;
  report.network_checksum = network_checksum(spec);
  report.volume_id = volume.volume_id();
  report.hardware_note = config.hardware_note;
  report.config = config;

  const std::vector<Position> sample =
      modes.count(Mode::Patch) ? stratified_positions(slice.extent(1), slice.extent(2), fov,
                                                      config.patch_sample_fraction)
                               : std::vector<Position>{};

  std::vector<std::size_t> thread_counts;
  for (std::size_t t : config.thread_counts) {
    std::size_t n = t == 0 ? std::max(1u, std::thread::hardware_concurrency()) : t;
    if (std::find(thread_counts.begin(), thread_counts.end(), n) == thread_counts.end()) {
      thread_counts.push_back(n);
    }
  }

  for (std::size_t threads : thread_counts) {
    ThreadScope scope(threads);
    std::optional<double> patch_seconds;
    // Patch before dense so the dense entry can carry the speedup.
    for (Mode mode : {Mode::Patch, Mode::Dense}) {
      if (!modes.count(mode)) continue;
      ModeTiming timing;
      timing.mode = mode;
      timing.threads = threads;
      std::vector<double> times;
      std::vector<float> reference;
      auto run_once = [&] {
        if (mode == Mode::Dense) {
          Tensor map = apply_dense(dense, slice);
          return std::vector<float>(map.values().begin(), map.values().end());
        }
        return apply_patchwise(spec, slice, sample);
      };
      for (std::size_t i = 0; i < config.warmup_runs; ++i) reference = run_once();
      for (std::size_t i = 0; i < config.timed_runs; ++i) {
        const auto start = Clock::now();
        std::vector<float> out = run_once();
        times.push_back(seconds_since(start));
        if (reference.empty()) reference = out;
        timing.outputs_identical = timing.outputs_identical && out == reference;
      }
      timing.seconds_total = 0;
      for (double t : times) timing.seconds_total += t;
      const double measured = median(times);
      if (mode == Mode::Patch) {
        timing.positions_timed = sample.size();
        timing.extrapolated = sample.size() != voxels;
        timing.seconds_per_slice = measured * static_cast<double>(voxels) / static_cast<double>(sample.size());
        patch_seconds = timing.seconds_per_slice;
      } else {
        timing.positions_timed = voxels;
        timing.seconds_per_slice = measured;
        if (patch_seconds) timing.speedup_vs_patch = *patch_seconds / measured;
      }
      timing.voxels_classified = voxels;
      timing.voxels_per_second = static_cast<double>(voxels) / timing.seconds_per_slice;
      report.timings.push_back(timing);
    }
  }

  if (config.scaling_probe && modes.count(Mode::Patch) && modes.count(Mode::Dense)) {
    ThreadScope scope(thread_counts.front());
    ScalingProbe probe;
    // Second half of the doubled set is the stratified grid shifted by half a cell.
    std::vector<Position> doubled = sample;
    const std::size_t off = (fov - 1) / 2;
    for (const Position& p : sample) {
      Position q{p.row, p.col + 1};
      if (q.col > off + ow - 1) q.col = p.col - 1;
      doubled.push_back(q);
    }
    probe.positions = sample.size();
    auto run_patch = [&](const std::vector<Position>& centres) {
      const auto start = Clock::now();
      apply_patchwise(spec, slice, centres);
      return seconds_since(start);
    };
    std::vector<float> picked(doubled.size());
    auto run_dense = [&](const std::vector<Position>& centres) {
      const auto start = Clock::now();
      Tensor map = apply_dense(dense, slice);
      for (std::size_t k = 0; k < centres.size(); ++k) {
        picked[k] = map(0, centres[k].row - off, centres[k].col - off);
      }
      return seconds_since(start);
    };
    // n and 2n runs alternate (order flipped every run) so that clock drift
    // on a shared machine hits both sides alike.
    auto interleaved = [&](auto run, double& seconds_n, double& seconds_2n) {
      std::vector<double> tn, t2n;
      for (std::size_t i = 0; i < config.timed_runs; ++i) {
        if (i % 2 == 0) {
          tn.push_back(run(sample));
          t2n.push_back(run(doubled));
        } else {
          t2n.push_back(run(doubled));
          tn.push_back(run(sample));
        }
      }
      seconds_n = median(tn);
      seconds_2n = median(t2n);
    };
    interleaved(run_patch, probe.patch_seconds_n, probe.patch_seconds_2n);
    interleaved(run_dense, probe.dense_seconds_n, probe.dense_seconds_2n);
    report.scaling = probe;
  }
  return report;
}

nlohmann::json to_json(const BenchmarkReport& report) {
  nlohmann::json j;
  j["network_checksum"] = report.network_checksum;
  j["volume_id"] = report.volume_id;
  j["slice"] = report.config.slice;
  j["slice_dims"] = {report.slice_dims.height, report.slice_dims.width};
  j["field_of_view"] = report.field_of_view;
  j["hardware_note"] = report.hardware_note;
  j["hardware_threads"] = std::thread::hardware_concurrency();
  j["protocol"] = {{"warmup_runs", report.config.warmup_runs},
                   {"timed_runs", report.config.timed_runs},
                   {"statistic", "median"},
                   {"patch_sample", "stratified grid"},
                   {"patch_sample_fraction", report.config.patch_sample_fraction}};
  j["timings"] = nlohmann::json::array();
  for (const auto& t : report.timings) {
    nlohmann::json e;
    e["mode"] = to_string(t.mode);
    e["threads"] = t.threads;
    e["wall_time_seconds_per_slice"] = t.seconds_per_slice;
    e["wall_time_seconds_total"] = t.seconds_total;
    e["voxels_classified"] = t.voxels_classified;
    e["voxels_per_second"] = t.voxels_per_second;
    e["positions_timed"] = t.positions_timed;
    e["extrapolated"] = t.extrapolated;
    e["outputs_identical"] = t.outputs_identical;
    if (t.speedup_vs_patch) e["speedup_vs_patch"] = *t.speedup_vs_patch;
    j["timings"].push_back(e);
  }
  if (report.scaling) {
    const auto& s = *report.scaling;
    j["scaling"] = {{"positions", s.positions},
                    {"patch_seconds_n", s.patch_seconds_n},
                    {"patch_seconds_2n", s.patch_seconds_2n},
                    {"patch_ratio", s.patch_ratio()},
                    {"dense_seconds_n", s.dense_seconds_n},
                    {"dense_seconds_2n", s.dense_seconds_2n},
                    {"dense_ratio", s.dense_ratio()}};
  }
  return j;
}

}  // namespace adn
