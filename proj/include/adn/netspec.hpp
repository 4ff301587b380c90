#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adn/container.hpp"
#include "adn/tensor.hpp"

namespace adn {

enum class LayerKind { Conv, MaxPool, ReLU, Softmax };
enum class Mode { Patch, Dense };

const char* to_string(LayerKind kind);
const char* to_string(Mode mode);

struct ConvParams {
  Tensor weights;            // [out_channels, in_channels, k, k]
  std::vector<float> bias;   // [out_channels]

  bool operator==(const ConvParams&) const = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t kernel_extent = 0;  // Conv, MaxPool
  std::size_t out_channels = 0;   // Conv
  std::size_t stride = 1;         // Conv, MaxPool
  DilationRate dilation{};        // Conv, MaxPool
  // Conv only. Shared between a patch network and its dense conversion.
  std::shared_ptr<ConvParams> params;

  static LayerSpec conv(std::size_t extent, std::size_t out_channels,
                        DilationRate dilation = {});
  static LayerSpec maxpool(std::size_t window, std::size_t stride,
                           DilationRate dilation = {});
  static LayerSpec relu();
  static LayerSpec softmax();

  bool has_window() const noexcept {
    return kind == LayerKind::Conv || kind == LayerKind::MaxPool;
  }
  std::size_t effective_extent() const noexcept {
    return has_window() ? dilation.effective_extent(kernel_extent) : 1;
  }

  // Structural equality plus parameter values (not pointer identity).
  bool operator==(const LayerSpec& other) const;
};

// Receptive-field extent of an arbitrary layer stack: fov <- (fov-1)*stride +
// effective extent, swept from the last layer to the first.
std::size_t field_of_view(std::span<const LayerSpec> layers);

// Linear chain of layers ending in a 2-channel softmax (channel 1 = synapse).
// Construction validates channel chaining, parameter shapes and the per-kind
// field rules; a constructed spec is immutable apart from the values inside
// its shared parameter tensors.
class NetworkSpec {
 public:
  NetworkSpec(std::size_t input_channels, std::vector<LayerSpec> layers,
              Mode mode = Mode::Patch,
              std::optional<std::size_t> patch_size = std::nullopt);

  std::size_t input_channels() const noexcept { return input_channels_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  Mode mode() const noexcept { return mode_; }
  std::size_t field_of_view() const noexcept { return field_of_view_; }
  // Declared patch extent, if the source file carried one.
  std::optional<std::size_t> patch_size() const noexcept { return patch_size_; }

  bool has_params() const noexcept;
  std::size_t parameter_count() const noexcept;

  // Spatial output extents for an input of the given extents; nullopt if some
  // layer does not fit.
  std::optional<std::pair<std::size_t, std::size_t>> output_extent(
      std::size_t height, std::size_t width) const;

  // Copy whose parameters live in fresh buffers.
  NetworkSpec deep_copy() const;

  bool operator==(const NetworkSpec& other) const;

 private:
  std::size_t input_channels_;
  std::vector<LayerSpec> layers_;
  Mode mode_;
  std::optional<std::size_t> patch_size_;
  std::size_t field_of_view_ = 1;
};

// Replaces every pooling stride by 1 and spaces the taps of all following
// layers by the accumulated stride product, so the network evaluates every
// patch position of a whole image in one pass. Parameters are shared.
NetworkSpec patch_to_dense(const NetworkSpec& patch);

// Architecture description (layers without parameters) as JSON.
nlohmann::json architecture_to_json(const NetworkSpec& spec);
NetworkSpec architecture_from_json(const nlohmann::json& j);
NetworkSpec load_architecture(const std::filesystem::path& path);

// "ADNSPEC1" network container.
Bytes serialize(const NetworkSpec& spec);
NetworkSpec deserialize(std::span<const std::uint8_t> bytes);
void save_network(const NetworkSpec& spec, const std::filesystem::path& path);
NetworkSpec load_network(const std::filesystem::path& path);

// CRC32 of the serialized container, hex encoded.
std::string network_checksum(const NetworkSpec& spec);

}  // namespace adn
