#include "adn/cli.hpp"

#include <cmath>
#include <cstring>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "adn/error.hpp"
#include "adn/inference.hpp"
#include "adn/metrics.hpp"
#include "adn/netspec.hpp"
#include "adn/parallel.hpp"
#include "adn/training.hpp"
#include "adn/volume.hpp"

namespace adn {
namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kInternal = 2;

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Text goes to `path`, or to `out` when no path was given.
void emit(std::ostream& out, const std::string& path, const std::string& text) {
  if (path.empty()) {
    out << text;
  } else {
    write_text(path, text);
  }
}

SliceRange parse_slices(const std::string& s) {
  const auto colon = s.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument(s);
    SliceRange r{std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
    if (r.end <= r.begin) throw std::invalid_argument(s);
    return r;
  } catch (const std::logic_error&) {
    fail(Errc::InvalidArgument, "slice range \"" + s + "\" must be BEGIN:END with BEGIN < END");
  }
}

// Accepts either an "ADNSPEC1" container or an architecture JSON file.
NetworkSpec load_any_network(const std::string& path) {
  Bytes bytes = read_file(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "ADNSPEC1", 8) == 0) return deserialize(bytes);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) fail(Errc::Corrupt, path + ": neither a network file nor architecture JSON");
  return architecture_from_json(j);
}

NetworkSpec require_params(NetworkSpec spec, const std::string& path) {
  if (!spec.has_params()) fail(Errc::InvalidArgument, path + ": network has no trained parameters");
  return spec;
}

struct SynthArgs {
  std::string volume, labels, manifest;
  SynthConfig config;
};

struct TrainArgs {
  std::string net, config, manifest, volume, labels, train_slices, val_slices, out, log;
  bool checkpoints = false;
};

struct PredictArgs {
  std::string net, volume, mode = "dense", out, slices, manifest, split;
  std::size_t tile_rows = 0;
};

struct EvalArgs {
  std::string map, labels, mode = "object", connectivity = "full26", json, csv;
  std::size_t min_overlap = 1;
  std::vector<double> thresholds;
  bool no_refine = false;
};

struct BenchArgs {
  std::string net, volume, out, note;
  std::vector<std::string> modes{"patch", "dense"};
  std::vector<std::size_t> threads{1, 0};
  std::size_t slice = 0, runs = 5, warmup = 1;
  double sample_fraction = 0.01;
  bool no_scaling = false;
};

struct ContourArgs {
  double level = 0;
  std::size_t resolution = 50;
  std::string out;
};

struct VerifyArgs {
  std::string net, dense, volume, slices;
  double tolerance = 1e-4;
};

int do_synth(const SynthArgs& a, std::ostream& out) {
  SynthDataset ds = synth_dataset(a.config);
  save_volume(ds.volume, a.volume);
  save_labels(ds.labels, a.labels);
  out << "volume " << a.volume << " (" << ds.volume.dims().depth << "x" << ds.volume.dims().height
      << "x" << ds.volume.dims().width << ", id " << ds.volume.volume_id() << ")\n"
      << "labels " << a.labels << " (" << ds.labels.positives() << " synapse voxels)\n";
  if (!a.manifest.empty()) {
    // Reference 75 / 25 / 100 proportions.
    const std::size_t depth = a.config.dims.depth;
    const std::size_t train_end = depth * 3 / 8, val_end = depth / 2;
    if (train_end == 0 || val_end <= train_end || val_end >= depth) {
      fail(Errc::InvalidArgument, "volume too thin for a train/validation/test split");
    }
    const auto base = std::filesystem::absolute(a.manifest).parent_path();
    auto rel = [&](const std::string& p) {
      return std::filesystem::relative(std::filesystem::absolute(p), base);
    };
    SplitManifest m;
    m.entries["train"] = {rel(a.volume), rel(a.labels), {0, train_end}};
    m.entries["validation"] = {rel(a.volume), rel(a.labels), {train_end, val_end}};
    m.entries["test"] = {rel(a.volume), rel(a.labels), {val_end, depth}};
    save_manifest(m, a.manifest);
    out << "manifest " << a.manifest << " (train 0:" << train_end << ", validation " << train_end
        << ":" << val_end << ", test " << val_end << ":" << depth << ")\n";
  }
  return kOk;
}

int do_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig config = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  config.validate();
  NetworkSpec net = load_any_network(a.net);
  if (!net.has_params()) net = initialize_parameters(net, config.seed);

  std::string volume_path, labels_path;
  SliceRange train_range, val_range;
  if (!a.manifest.empty()) {
    SplitManifest m = load_manifest(a.manifest);
    const SplitEntry& tr = m.at("train");
    const SplitEntry& va = m.at("validation");
    if (tr.volume != va.volume || tr.labels != va.labels) {
      fail(Errc::InvalidArgument, "train and validation splits must come from the same volume file");
    }
    volume_path = tr.volume.string();
    labels_path = tr.labels.string();
    train_range = tr.slices;
    val_range = va.slices;
  } else {
    if (a.volume.empty() || a.labels.empty() || a.train_slices.empty() || a.val_slices.empty()) {
      fail(Errc::InvalidArgument,
           "train needs --manifest or all of --volume, --labels, --train-slices, --val-slices");
    }
    volume_path = a.volume;
    labels_path = a.labels;
    train_range = parse_slices(a.train_slices);
    val_range = parse_slices(a.val_slices);
    if (train_range.overlaps(val_range)) {
      fail(Errc::InvalidArgument, "training and validation slice ranges overlap");
    }
  }
  Volume volume = load_volume(volume_path);
  LabelVolume labels = load_labels(labels_path, volume);

  TrainHooks hooks;
  if (a.checkpoints) {
    hooks.on_validation = [&](std::size_t step, const NetworkSpec& current) {
      std::filesystem::path p(a.out);
      p.replace_extension(".step" + std::to_string(step) + p.extension().string());
      save_network(current, p);
    };
  }
  TrainResult result = train(net, {&volume, &labels, train_range}, {&volume, &labels, val_range},
                             config, hooks);
  save_network(result.spec, a.out);
  if (!a.log.empty()) write_text(a.log, result.log.csv());
  out << "trained " << config.steps << " steps; best validation voxel F1 " << result.best_val_f1
      << " at step " << result.best_step << "\nnetwork " << a.out << " (checksum "
      << network_checksum(result.spec) << ")\n";
  return kOk;
}

int do_convert(const std::string& in, const std::string& dst, std::ostream& out) {
  NetworkSpec patch = load_any_network(in);
  NetworkSpec dense = patch_to_dense(patch);
  save_network(dense, dst);
  out << "dense network " << dst << " (field of view " << dense.field_of_view() << ")\n";
  return kOk;
}

Mode parse_mode(const std::string& s) {
  if (s == "patch") return Mode::Patch;
  if (s == "dense") return Mode::Dense;
  fail(Errc::InvalidArgument, "mode must be patch or dense");
}

int do_predict(const PredictArgs& a, std::ostream& out) {
  NetworkSpec net = require_params(load_any_network(a.net), a.net);
  std::string volume_path = a.volume;
  PredictOptions options;
  options.tile_rows = a.tile_rows;
  if (!a.manifest.empty()) {
    if (a.split.empty()) fail(Errc::InvalidArgument, "--manifest needs --split");
    const SplitManifest m = load_manifest(a.manifest);
    const SplitEntry& e = m.at(a.split);
    if (volume_path.empty()) volume_path = e.volume.string();
    options.slices = e.slices;
  }
  if (volume_path.empty()) fail(Errc::InvalidArgument, "predict needs --volume or --manifest");
  if (!a.slices.empty()) options.slices = parse_slices(a.slices);
  Volume volume = load_volume(volume_path);
  ProbabilityMap map = predict_volume(net, volume, parse_mode(a.mode), options);
  save_probability_map(map, a.out);
  out << "probability map " << a.out << " (" << map.dims.depth << "x" << map.dims.height << "x"
      << map.dims.width << ", origin offset " << map.origin_offset << ", first slice "
      << map.slice_offset << ")\n";
  return kOk;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  EvalParams params;
  if (a.mode == "voxel") {
    params.mode = EvalMode::Voxel;
  } else if (a.mode == "object") {
    params.mode = EvalMode::Object;
  } else {
    fail(Errc::InvalidArgument, "eval mode must be voxel or object");
  }
  params.connectivity = connectivity_from_string(a.connectivity);
  params.min_overlap_voxels = a.min_overlap;
  params.refine = !a.no_refine;
  ProbabilityMap map = load_probability_map(a.map);
  LabelVolume labels = load_labels(a.labels);
  const std::vector<double> thresholds = a.thresholds.empty() ? default_thresholds() : a.thresholds;
  DetectionReport report = pr_curve(map, labels, thresholds, params);
  if (!a.csv.empty()) write_text(a.csv, pr_csv(report));
  emit(out, a.json, to_json(report).dump(2) + "\n");
  if (!a.json.empty()) {
    out << a.mode << " F1 " << report.best.f1 << " at threshold " << report.best.threshold
        << " (precision " << report.best.precision << ", recall " << report.best.recall << ")\n";
  }
  return kOk;
}

int do_bench(const BenchArgs& a, std::ostream& out) {
  NetworkSpec net = require_params(load_any_network(a.net), a.net);
  Volume volume = load_volume(a.volume);
  std::set<Mode> modes;
  for (const auto& m : a.modes) modes.insert(parse_mode(m));
  BenchmarkConfig config;
  config.thread_counts = a.threads;
  config.timed_runs = a.runs;
  config.warmup_runs = a.warmup;
  config.patch_sample_fraction = a.sample_fraction;
  config.slice = a.slice;
  config.scaling_probe = !a.no_scaling;
  config.hardware_note = a.note;
  BenchmarkReport report = benchmark(net, volume, modes, config);
  emit(out, a.out, to_json(report).dump(2) + "\n");
  return kOk;
}

int do_contour(const ContourArgs& a, std::ostream& out) {
  emit(out, a.out, contour_csv(f1_contour(a.level, a.resolution)));
  return kOk;
}

int do_verify(const VerifyArgs& a, std::ostream& out) {
  NetworkSpec patch = require_params(load_any_network(a.net), a.net);
  if (patch.mode() != Mode::Patch) fail(Errc::InvalidArgument, "verify needs the patch-mode network");
  NetworkSpec dense = patch_to_dense(patch);
  if (!a.dense.empty()) {
    NetworkSpec given = load_any_network(a.dense);
    if (!(given == dense)) {
      out << "MISMATCH: " << a.dense << " is not the dense conversion of " << a.net << "\n";
      return kValidation;
    }
    dense = std::move(given);
  }
  Volume volume = load_volume(a.volume);
  PredictOptions options;
  if (!a.slices.empty()) options.slices = parse_slices(a.slices);
  ProbabilityMap by_patch = predict_volume(patch, volume, Mode::Patch, options);
  ProbabilityMap by_dense = predict_volume(dense, volume, Mode::Dense, options);
  double worst = 0;
  for (std::size_t i = 0; i < by_patch.values.size(); ++i) {
    worst = std::max(worst, static_cast<double>(std::fabs(by_patch.values[i] - by_dense.values[i])));
  }
  const bool ok = by_patch.dims == by_dense.dims && worst <= a.tolerance;
  out << (ok ? "OK" : "MISMATCH") << ": " << by_patch.values.size()
      << " positions, max |dense - patch| = " << worst << " (tolerance " << a.tolerance << ")\n";
  return ok ? kOk : kValidation;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patch-to-dense conversion, inference and evaluation of dilated CNN synapse detectors",
               "adn"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic blob volume and labels");
  s->add_option("--volume", synth.volume, "Output volume file")->required();
  s->add_option("--labels", synth.labels, "Output label file")->required();
  s->add_option("--manifest", synth.manifest, "Also write a train/validation/test split manifest");
  s->add_option("--depth", synth.config.dims.depth);
  s->add_option("--height", synth.config.dims.height);
  s->add_option("--width", synth.config.dims.width);
  s->add_option("--blobs", synth.config.blobs);
  s->add_option("--radius-min", synth.config.radius_min);
  s->add_option("--radius-max", synth.config.radius_max);
  s->add_option("--noise", synth.config.noise);
  s->add_option("--seed", synth.config.seed);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a patch-mode network");
  t->add_option("--net", tr.net, "Architecture JSON or network file")->required();
  t->add_option("--config", tr.config, "Training config JSON");
  t->add_option("--manifest", tr.manifest, "Split manifest (train + validation entries)");
  t->add_option("--volume", tr.volume);
  t->add_option("--labels", tr.labels);
  t->add_option("--train-slices", tr.train_slices, "BEGIN:END");
  t->add_option("--val-slices", tr.val_slices, "BEGIN:END");
  t->add_option("--out", tr.out, "Output network file")->required();
  t->add_option("--log", tr.log, "Training log CSV");
  t->add_flag("--checkpoints", tr.checkpoints, "Save a checkpoint at every validation step");

  std::string convert_in, convert_out;
  auto* c = app.add_subcommand("convert", "Convert a patch network to its dense form");
  c->add_option("--in", convert_in)->required();
  c->add_option("--out", convert_out)->required();

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Compute a probability map");
  p->add_option("--net", pr.net)->required();
  p->add_option("--volume", pr.volume);
  p->add_option("--mode", pr.mode, "patch|dense")->check(CLI::IsMember({"patch", "dense"}));
  p->add_option("--out", pr.out)->required();
  p->add_option("--slices", pr.slices, "BEGIN:END");
  p->add_option("--manifest", pr.manifest);
  p->add_option("--split", pr.split, "Manifest entry to predict");
  p->add_option("--tile-rows", pr.tile_rows, "Dense output rows per tile (0 = whole slice)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Precision-recall evaluation of a probability map");
  e->alias("pr-curve");
  e->add_option("--map", ev.map)->required();
  e->add_option("--labels", ev.labels)->required();
  e->add_option("--mode", ev.mode, "voxel|object")->check(CLI::IsMember({"voxel", "object"}));
  e->add_option("--connectivity", ev.connectivity, "face4|full8|face6|full26");
  e->add_option("--min-overlap", ev.min_overlap)->check(CLI::PositiveNumber);
  e->add_option("--thresholds", ev.thresholds)->delimiter(',');
  e->add_flag("--no-refine", ev.no_refine, "Skip golden-section threshold refinement");
  e->add_option("--json", ev.json, "DetectionReport JSON (stdout if omitted)");
  e->add_option("--csv", ev.csv, "P-R curve CSV");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Time patch and dense inference");
  b->add_option("--net", be.net)->required();
  b->add_option("--volume", be.volume)->required();
  b->add_option("--modes", be.modes)->delimiter(',');
  b->add_option("--threads", be.threads, "Worker counts, 0 = all cores")->delimiter(',');
  b->add_option("--slice", be.slice);
  b->add_option("--runs", be.runs);
  b->add_option("--warmup", be.warmup);
  b->add_option("--sample-fraction", be.sample_fraction);
  b->add_option("--note", be.note, "Hardware note");
  b->add_flag("--no-scaling", be.no_scaling);
  b->add_option("--out", be.out, "Report JSON (stdout if omitted)");

  ContourArgs co;
  auto* k = app.add_subcommand("contour", "Constant-F1 contour as CSV");
  k->add_option("--f1", co.level)->required();
  k->add_option("--resolution", co.resolution);
  k->add_option("--out", co.out);

  VerifyArgs ve;
  auto* v = app.add_subcommand("verify", "Check dense inference against the sliding-window oracle");
  v->add_option("--net", ve.net, "Patch-mode network")->required();
  v->add_option("--dense", ve.dense, "Converted network to check as well");
  v->add_option("--volume", ve.volume)->required();
  v->add_option("--slices", ve.slices, "BEGIN:END");
  v->add_option("--tolerance", ve.tolerance);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    if (pe.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "adn: " << pe.what() << "\n\n" << app.help();
    return kValidation;
  }

  try {
    if (*s) return do_synth(synth, out);
    if (*t) return do_train(tr, out);
    if (*c) return do_convert(convert_in, convert_out, out);
    if (*p) return do_predict(pr, out);
    if (*e) return do_eval(ev, out);
    if (*b) return do_bench(be, out);
    if (*k) return do_contour(co, out);
    if (*v) return do_verify(ve, out);
  } catch (const Error& ex) {
    err << "adn: " << to_string(ex.code()) << ": " << ex.what() << "\n";
    return kValidation;
  } catch (const std::exception& ex) {
    err << "adn: internal error: " << ex.what() << "\n";
    return kInternal;
  }
  err << app.help();
  return kValidation;
}

}  // namespace adn
