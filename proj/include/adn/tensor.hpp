#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <vector>

namespace adn {

using Shape = std::vector<std::size_t>;

// Dense row-major float32 tensor. Feature maps are [C, H, W]; convolution
// kernels are [C_out, C_in, kH, kW]. The shape is fixed at construction.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const float> values() const noexcept { return data_; }
  std::span<float> values() noexcept { return data_; }
  const float* data() const noexcept { return data_.data(); }
  float* data() noexcept { return data_.data(); }

  float& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  float operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  float& operator()(std::size_t o, std::size_t i, std::size_t y, std::size_t x) {
    return data_[((o * shape_[1] + i) * shape_[2] + y) * shape_[3] + x];
  }
  float operator()(std::size_t o, std::size_t i, std::size_t y,
                   std::size_t x) const {
    return data_[((o * shape_[1] + i) * shape_[2] + y) * shape_[3] + x];
  }

  // Bitwise equality of shape and contents.
  bool operator==(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Number of fixed zeros inserted between adjacent kernel taps. A rate of r
// spaces taps r + 1 samples apart; rate 0 is ordinary convolution.
struct DilationRate {
  std::size_t rate = 0;

  constexpr std::size_t spacing() const noexcept { return rate + 1; }
  constexpr std::size_t effective_extent(std::size_t k) const noexcept {
    return k + (k - 1) * rate;
  }
  // Rate obtained when taps of this rate are read from a grid already spaced
  // `grid_spacing` apart.
  constexpr DilationRate on_grid(std::size_t grid_spacing) const noexcept {
    return DilationRate{grid_spacing * spacing() - 1};
  }

  friend constexpr auto operator<=>(DilationRate, DilationRate) = default;
};

// floor((in - effective) / stride) + 1, or 0 if the window does not fit.
std::size_t output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          DilationRate dilation) noexcept;

// Valid (unpadded) 2D convolution. Each output is the sum over taps in
// (in-channel, row, column) order followed by the bias, so results are
// bit-reproducible for any thread count.
Tensor conv2d(const Tensor& input, const Tensor& kernel,
              std::span<const float> bias, std::size_t stride,
              DilationRate dilation);

Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride,
                 DilationRate dilation);

Tensor relu(const Tensor& input);

// Per-location softmax across channels of a [C, H, W] tensor, C >= 2.
Tensor softmax_channels(const Tensor& input);

}  // namespace adn
