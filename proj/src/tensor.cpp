#include "adn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>

#include "adn/error.hpp"
#include "adn/parallel.hpp"

namespace adn {
namespace {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void require_feature_map(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    fail(Errc::ShapeMismatch, std::string(what) + " must be [C,H,W], got " +
                                  shape_string(t.shape()));
  }
  if (t.empty()) fail(Errc::ShapeMismatch, std::string(what) + " has zero extent");
}

// Output rows handled by one work item. Small enough that the accumulator
// block stays cache resident while every tap streams over it.
constexpr std::size_t kRowBlock = 8;

}  // namespace

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != element_count(shape_)) {
    fail(Errc::ShapeMismatch, "tensor data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
  }
}

bool Tensor::operator==(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(),
                      data_.size() * sizeof(float)) == 0);
}

std::size_t output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          DilationRate dilation) noexcept {
  std::size_t eff = dilation.effective_extent(kernel);
  if (kernel == 0 || stride == 0 || eff > in) return 0;
  return (in - eff) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel,
              std::span<const float> bias, std::size_t stride,
              DilationRate dilation) {
  require_feature_map(input, "conv2d input");
  if (kernel.rank() != 4) {
    fail(Errc::ShapeMismatch, "conv2d kernel must be [C_out,C_in,kH,kW], got " +
                                  shape_string(kernel.shape()));
  }
  const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
  if (kernel.extent(1) != cin) {
    fail(Errc::ShapeMismatch, "conv2d kernel expects " +
                                  std::to_string(kernel.extent(1)) +
                                  " input channels, input has " + std::to_string(cin));
  }
  if (bias.size() != cout) {
    fail(Errc::ShapeMismatch, "conv2d bias length " + std::to_string(bias.size()) +
                                  " != output channels " + std::to_string(cout));
  }
  if (stride == 0) fail(Errc::InvalidArgument, "conv2d stride must be positive");
  const std::size_t oh = output_extent(h, kh, stride, dilation);
  const std::size_t ow = output_extent(w, kw, stride, dilation);
  if (oh == 0 || ow == 0) {
    fail(Errc::ShapeMismatch,
         "conv2d effective kernel " + std::to_string(dilation.effective_extent(kh)) +
             "x" + std::to_string(dilation.effective_extent(kw)) +
             " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  }

  Tensor out({cout, oh, ow});
  const std::size_t sp = dilation.spacing();
  const std::size_t blocks = (oh + kRowBlock - 1) / kRowBlock;
  const float* in = input.data();
  const float* k = kernel.data();
  float* o = out.data();

  parallel_for(cout * blocks, [&](std::size_t first, std::size_t last) {
    for (std::size_t item = first; item < last; ++item) {
      const std::size_t oc = item / blocks;
      const std::size_t y0 = (item % blocks) * kRowBlock;
      const std::size_t y1 = std::min(oh, y0 + kRowBlock);
      float* oplane = o + oc * oh * ow;
      std::fill(oplane + y0 * ow, oplane + y1 * ow, 0.0f);
      for (std::size_t ic = 0; ic < cin; ++ic) {
        const float* iplane = in + ic * h * w;
        const float* kplane = k + (oc * cin + ic) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const float tap = kplane[ky * kw + kx];
            for (std::size_t y = y0; y < y1; ++y) {
              const float* irow = iplane + (y * stride + ky * sp) * w + kx * sp;
              float* orow = oplane + y * ow;
              if (stride == 1) {
                for (std::size_t x = 0; x < ow; ++x) orow[x] += tap * irow[x];
              } else {
                for (std::size_t x = 0; x < ow; ++x) orow[x] += tap * irow[x * stride];
              }
            }
          }
        }
      }
      const float b = bias[oc];
      for (std::size_t i = y0 * ow; i < y1 * ow; ++i) oplane[i] += b;
    }
  });
  return out;
}

Tensor maxpool2d(const Tensor& input, std::size_t window, std::size_t stride,
                 DilationRate dilation) {
  require_feature_map(input, "maxpool2d input");
  if (window == 0 || stride == 0) {
    fail(Errc::InvalidArgument, "maxpool2d window and stride must be positive");
  }
  const std::size_t c = input.extent(0), h = input.extent(1), w = input.extent(2);
  const std::size_t oh = output_extent(h, window, stride, dilation);
  const std::size_t ow = output_extent(w, window, stride, dilation);
  if (oh == 0 || ow == 0) {
    fail(Errc::ShapeMismatch,
         "maxpool2d effective window " +
             std::to_string(dilation.effective_extent(window)) +
             " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor out({c, oh, ow});
  const std::size_t sp = dilation.spacing();
  const float* in = input.data();
  float* o = out.data();
  parallel_for(c * oh, [&](std::size_t first, std::size_t last) {
    for (std::size_t item = first; item < last; ++item) {
      const std::size_t ch = item / oh, y = item % oh;
      const float* iplane = in + ch * h * w;
      float* orow = o + (ch * oh + y) * ow;
      const float* first_row = iplane + (y * stride) * w;
      for (std::size_t x = 0; x < ow; ++x) orow[x] = first_row[x * stride];
      for (std::size_t ky = 0; ky < window; ++ky) {
        for (std::size_t kx = 0; kx < window; ++kx) {
          const float* irow = iplane + (y * stride + ky * sp) * w + kx * sp;
          for (std::size_t x = 0; x < ow; ++x) {
            orow[x] = std::max(orow[x], irow[x * stride]);
          }
        }
      }
    }
  });
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor softmax_channels(const Tensor& input) {
  require_feature_map(input, "softmax input");
  const std::size_t c = input.extent(0);
  if (c < 2) fail(Errc::ShapeMismatch, "softmax needs at least 2 channels");
  const std::size_t plane = input.extent(1) * input.extent(2);
  Tensor out(input.shape());
  const float* in = input.data();
  float* o = out.data();
  for (std::size_t p = 0; p < plane; ++p) {
    float peak = in[p];
    for (std::size_t ch = 1; ch < c; ++ch) peak = std::max(peak, in[ch * plane + p]);
    float sum = 0.0f;
    for (std::size_t ch = 0; ch < c; ++ch) {
      float e = std::exp(in[ch * plane + p] - peak);
      o[ch * plane + p] = e;
      sum += e;
    }
    for (std::size_t ch = 0; ch < c; ++ch) o[ch * plane + p] /= sum;
  }
  return out;
}

}  // namespace adn
