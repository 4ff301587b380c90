#include "adn/netspec.hpp"

#include <string>

#include "adn/error.hpp"

namespace adn {
namespace {

constexpr std::string_view kMagic = "ADNSPEC1";
constexpr int kVersion = 1;

[[noreturn]] void reject(const std::string& what) { fail(Errc::InconsistentSpec, what); }

std::string layer_name(std::size_t index, const LayerSpec& layer) {
  return "layer " + std::to_string(index) + " (" + to_string(layer.kind) + ")";
}

LayerKind kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "maxpool") return LayerKind::MaxPool;
  if (s == "relu") return LayerKind::ReLU;
  if (s == "softmax") return LayerKind::Softmax;
  reject("unknown layer kind \"" + s + "\"");
}

Mode mode_from_string(const std::string& s) {
  if (s == "patch") return Mode::Patch;
  if (s == "dense") return Mode::Dense;
  reject("unknown network mode \"" + s + "\"");
}

nlohmann::json layer_to_json(const LayerSpec& layer) {
  nlohmann::json j;
  j["kind"] = to_string(layer.kind);
  if (layer.has_window()) {
    j["kernel_extent"] = layer.kernel_extent;
    j["stride"] = layer.stride;
    j["dilation"] = layer.dilation.rate;
  }
  if (layer.kind == LayerKind::Conv) j["out_channels"] = layer.out_channels;
  return j;
}

LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec layer;
  layer.kind = kind_from_string(j.at("kind").get<std::string>());
  if (layer.has_window()) {
    layer.kernel_extent = j.at("kernel_extent").get<std::size_t>();
    layer.stride = j.value("stride", std::size_t{1});
    layer.dilation = DilationRate{j.value("dilation", std::size_t{0})};
  } else if (j.contains("kernel_extent") || j.contains("stride") || j.contains("out_channels")) {
    reject(std::string(to_string(layer.kind)) + " layers take no extent, stride or channels");
  }
  if (layer.kind == LayerKind::Conv) {
    layer.out_channels = j.at("out_channels").get<std::size_t>();
  }
  return layer;
}

template <typename F>
auto with_json_errors(F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::InconsistentSpec, std::string("malformed network description: ") + e.what());
  }
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

const char* to_string(Mode mode) { return mode == Mode::Patch ? "patch" : "dense"; }

LayerSpec LayerSpec::conv(std::size_t extent, std::size_t out_channels,
                          DilationRate dilation) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.kernel_extent = extent;
  l.out_channels = out_channels;
  l.dilation = dilation;
  return l;
}

LayerSpec LayerSpec::maxpool(std::size_t window, std::size_t stride,
                             DilationRate dilation) {
  LayerSpec l;
  l.kind = LayerKind::MaxPool;
  l.kernel_extent = window;
  l.stride = stride;
  l.dilation = dilation;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::softmax() {
  LayerSpec l;
  l.kind = LayerKind::Softmax;
  return l;
}

bool LayerSpec::operator==(const LayerSpec& other) const {
  if (kind != other.kind || kernel_extent != other.kernel_extent ||
      out_channels != other.out_channels || stride != other.stride ||
      dilation != other.dilation) {
    return false;
  }
  if (static_cast<bool>(params) != static_cast<bool>(other.params)) return false;
  return !params || params == other.params || *params == *other.params;
}

std::size_t field_of_view(std::span<const LayerSpec> layers) {
  std::size_t fov = 1;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (!it->has_window()) continue;
    fov = (fov - 1) * it->stride + it->effective_extent();
  }
  return fov;
}

NetworkSpec::NetworkSpec(std::size_t input_channels, std::vector<LayerSpec> layers,
                         Mode mode, std::optional<std::size_t> patch_size)
    : input_channels_(input_channels),
      layers_(std::move(layers)),
      mode_(mode),
      patch_size_(patch_size) {
  if (input_channels_ == 0) reject("input_channels must be positive");
  if (layers_.empty()) reject("network has no layers");
  std::size_t channels = input_channels_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const std::string name = layer_name(i, l);
    if (l.has_window()) {
      if (l.kernel_extent == 0) reject(name + ": kernel extent must be positive");
      if (l.stride == 0) reject(name + ": stride must be positive");
      if (mode_ == Mode::Dense && l.stride != 1) {
        reject(name + ": dense networks use unit strides only");
      }
    } else if (l.kernel_extent != 0 || l.out_channels != 0 || l.stride != 1 ||
               l.dilation.rate != 0 || l.params) {
      reject(name + ": carries no extent, stride or parameters");
    }
    if (l.kind == LayerKind::MaxPool && (l.out_channels != 0 || l.params)) {
      reject(name + ": pooling layers carry no channels or parameters");
    }
    if (l.kind == LayerKind::Conv) {
      if (l.out_channels == 0) reject(name + ": out_channels must be positive");
      if (l.params) {
        const Shape expected{l.out_channels, channels, l.kernel_extent, l.kernel_extent};
        if (l.params->weights.shape() != expected || l.params->bias.size() != l.out_channels) {
          reject(name + ": parameter shape does not match " + std::to_string(l.out_channels) +
                 "x" + std::to_string(channels) + "x" + std::to_string(l.kernel_extent) + "x" +
                 std::to_string(l.kernel_extent));
        }
      }
      channels = l.out_channels;
    }
    if (l.kind == LayerKind::Softmax && i + 1 != layers_.size()) {
      reject(name + ": softmax must be the final layer");
    }
  }
  if (layers_.back().kind != LayerKind::Softmax || channels != 2) {
    reject("network must end in a softmax over exactly 2 channels");
  }
  field_of_view_ = adn::field_of_view(layers_);
  if (patch_size_ && !output_extent(*patch_size_, *patch_size_)) {
    reject("declared patch size " + std::to_string(*patch_size_) + " is smaller than the network");
  }
}

bool NetworkSpec::has_params() const noexcept {
  for (const auto& l : layers_) {
    if (l.kind == LayerKind::Conv && !l.params) return false;
  }
  return true;
}

std::size_t NetworkSpec::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    if (l.params) n += l.params->weights.size() + l.params->bias.size();
  }
  return n;
}

std::optional<std::pair<std::size_t, std::size_t>> NetworkSpec::output_extent(
    std::size_t height, std::size_t width) const {
  for (const auto& l : layers_) {
    if (!l.has_window()) continue;
    height = adn::output_extent(height, l.kernel_extent, l.stride, l.dilation);
    width = adn::output_extent(width, l.kernel_extent, l.stride, l.dilation);
    if (height == 0 || width == 0) return std::nullopt;
  }
  return std::make_pair(height, width);
}

NetworkSpec NetworkSpec::deep_copy() const {
  std::vector<LayerSpec> layers = layers_;
  for (auto& l : layers) {
    if (l.params) l.params = std::make_shared<ConvParams>(*l.params);
  }
  return NetworkSpec(input_channels_, std::move(layers), mode_, patch_size_);
}

bool NetworkSpec::operator==(const NetworkSpec& other) const {
  return input_channels_ == other.input_channels_ && mode_ == other.mode_ &&
         patch_size_ == other.patch_size_ && layers_ == other.layers_;
}

NetworkSpec patch_to_dense(const NetworkSpec& patch) {
  if (patch.mode() != Mode::Patch) reject("patch_to_dense expects a patch-mode network");
  const std::size_t fov = patch.field_of_view();
  const std::size_t declared = patch.patch_size().value_or(fov);
  auto out = patch.output_extent(declared, declared);
  if (declared != fov || !out || out->first != 1 || out->second != 1) {
    reject("patch network does not map its " + std::to_string(declared) + "x" +
           std::to_string(declared) + " patch to a 1x1 output (field of view " +
           std::to_string(fov) + ")");
  }

  std::vector<LayerSpec> dense = patch.layers();
  std::size_t spacing = 1;
  for (std::size_t i = 0; i < dense.size(); ++i) {
    LayerSpec& l = dense[i];
    if (!l.has_window()) continue;
    if (l.kind == LayerKind::Conv && l.stride != 1) {
      fail(Errc::Unsupported, layer_name(i, l) +
                                  ": strided convolutions cannot be converted; "
                                  "only pooling layers may carry a stride");
    }
    l.dilation = l.dilation.on_grid(spacing);
    if (l.kind == LayerKind::MaxPool) {
      spacing *= l.stride;
      l.stride = 1;
    }
  }
  return NetworkSpec(patch.input_channels(), std::move(dense), Mode::Dense, patch.patch_size());
}

nlohmann::json architecture_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["input_channels"] = spec.input_channels();
  j["mode"] = to_string(spec.mode());
  if (spec.patch_size()) j["patch_size"] = *spec.patch_size();
  j["layers"] = nlohmann::json::array();
  for (const auto& l : spec.layers()) j["layers"].push_back(layer_to_json(l));
  return j;
}

NetworkSpec architecture_from_json(const nlohmann::json& j) {
  return with_json_errors([&] {
    std::vector<LayerSpec> layers;
    for (const auto& lj : j.at("layers")) layers.push_back(layer_from_json(lj));
    std::optional<std::size_t> patch_size;
    if (j.contains("patch_size")) patch_size = j.at("patch_size").get<std::size_t>();
    return NetworkSpec(j.value("input_channels", std::size_t{1}), std::move(layers),
                       mode_from_string(j.value("mode", std::string("patch"))), patch_size);
  });
}

NetworkSpec load_architecture(const std::filesystem::path& path) {
  Bytes bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) fail(Errc::Corrupt, path.string() + ": not valid JSON");
  return architecture_from_json(j);
}

Bytes serialize(const NetworkSpec& spec) {
  nlohmann::json header = architecture_to_json(spec);
  header["version"] = kVersion;
  Bytes payload;
  for (std::size_t i = 0; i < spec.layers().size(); ++i) {
    const LayerSpec& l = spec.layers()[i];
    if (!l.params) continue;
    auto& lj = header["layers"][i];
    lj["weights"] = {{"offset", payload.size()}, {"count", l.params->weights.size()}};
    append_f32_le(payload, l.params->weights.values());
    lj["bias"] = {{"offset", payload.size()}, {"count", l.params->bias.size()}};
    append_f32_le(payload, l.params->bias);
  }
  return write_container(kMagic, header, payload);
}

NetworkSpec deserialize(std::span<const std::uint8_t> bytes) {
  ContainerView view = read_container(bytes, kMagic, ChecksumPolicy::Early, "network file");
  return with_json_errors([&] {
    const int version = view.header.at("version").get<int>();
    if (version != kVersion) {
      fail(Errc::UnknownVersion, "network file version " + std::to_string(version) +
                                     " is not supported (expected " +
                                     std::to_string(kVersion) + ")");
    }
    NetworkSpec arch = architecture_from_json(view.header);
    std::vector<LayerSpec> layers = arch.layers();
    std::size_t channels = arch.input_channels();
    auto blob = [&](const nlohmann::json& ref, std::size_t expected) {
      const std::size_t offset = ref.at("offset").get<std::size_t>();
      const std::size_t count = ref.at("count").get<std::size_t>();
      if (count != expected || offset + count * 4 > view.payload.size()) {
        fail(Errc::InconsistentSpec, "parameter blob does not match layer shape");
      }
      return decode_f32_le(view.payload.subspan(offset, count * 4));
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
      LayerSpec& l = layers[i];
      const auto& lj = view.header["layers"][i];
      if (l.kind == LayerKind::Conv) {
        if (lj.contains("weights")) {
          Shape shape{l.out_channels, channels, l.kernel_extent, l.kernel_extent};
          const std::size_t n = l.out_channels * channels * l.kernel_extent * l.kernel_extent;
          auto params = std::make_shared<ConvParams>();
          params->weights = Tensor(shape, blob(lj.at("weights"), n));
          params->bias = blob(lj.at("bias"), l.out_channels);
          l.params = std::move(params);
        }
        channels = l.out_channels;
      }
    }
    return NetworkSpec(arch.input_channels(), std::move(layers), arch.mode(), arch.patch_size());
  });
}

void save_network(const NetworkSpec& spec, const std::filesystem::path& path) {
  write_file(path, serialize(spec));
}

NetworkSpec load_network(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

std::string network_checksum(const NetworkSpec& spec) {
  Bytes bytes = serialize(spec);
  return hex32(crc32(bytes));
}

}  // namespace adn
