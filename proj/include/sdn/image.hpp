#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdn/errors.hpp"

namespace sdn {

struct Shape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;

  [[nodiscard]] constexpr std::size_t pixels() const { return height * width; }
  [[nodiscard]] constexpr std::size_t size() const { return height * width * channels; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// Planar real-valued grid: value (c, y, x) lives at index (c * height + y) * width + x.
///
/// The tag distinguishes grids that share a layout but not a meaning (pixel values
/// versus score values), so the two cannot be mixed up at call sites.
template <class Tag>
class Grid {
 public:
  explicit Grid(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
    validate_shape();
    if (!std::isfinite(fill)) throw DomainError("grid fill value is not finite");
  }

  Grid(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_.size()) {
      throw ShapeError("grid data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
    require_finite();
  }

  Grid(std::size_t height, std::size_t width, std::size_t channels = 1, double fill = 0.0)
      : Grid(Shape{height, width, channels}, fill) {}

  /// Reinterprets a grid of another kind with the same layout.
  template <class OtherTag>
  [[nodiscard]] static Grid from(const Grid<OtherTag>& other) {
    return Grid(other.shape(), std::vector<double>(other.values().begin(), other.values().end()));
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t height() const { return shape_.height; }
  [[nodiscard]] std::size_t width() const { return shape_.width; }
  [[nodiscard]] std::size_t channels() const { return shape_.channels; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] double& operator[](std::size_t i) { return data_[i]; }
  [[nodiscard]] double operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }
  [[nodiscard]] double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }

  [[nodiscard]] std::span<double> values() { return data_; }
  [[nodiscard]] std::span<const double> values() const { return data_; }

  [[nodiscard]] std::span<double> channel(std::size_t c) {
    return std::span<double>(data_).subspan(c * shape_.pixels(), shape_.pixels());
  }
  [[nodiscard]] std::span<const double> channel(std::size_t c) const {
    return std::span<const double>(data_).subspan(c * shape_.pixels(), shape_.pixels());
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void require_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw DomainError("non-finite value at flat index " + std::to_string(i));
      }
    }
  }

  friend bool operator==(const Grid& a, const Grid& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void validate_shape() const {
    if (shape_.height == 0 || shape_.width == 0 || shape_.channels == 0) {
      throw ShapeError("grid dimensions must be positive, got " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

struct ImageTag {};
struct ScoreTag {};

/// Pixel grid, nominal range [0, 255].
using Image = Grid<ImageTag>;
/// Gradient of a log-density with respect to an image; same layout as the image.
using ScoreField = Grid<ScoreTag>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) throw ShapeError(std::string(what) + ": shape " + to_string(a) + " vs " + to_string(b));
}

/// Peak signal-to-noise ratio with peak 255. Identical inputs give +infinity.
template <class TagA, class TagB>
double psnr(const Grid<TagA>& reference, const Grid<TagB>& test) {
  require_same_shape(reference.shape(), test.shape(), "psnr");
  double sum = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = reference[i] - test[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(reference.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

/// Uniform random contiguous crops (all channels). Deterministic given the generator state.
inline std::vector<Image> sample_patches(const Image& image, std::size_t patch_size, std::size_t count,
                                         std::mt19937_64& rng) {
  if (patch_size < 8) throw ShapeError("patch size must be at least 8, got " + std::to_string(patch_size));
  if (patch_size > image.height() || patch_size > image.width()) {
    throw ShapeError("patch size " + std::to_string(patch_size) + " exceeds image " + to_string(image.shape()));
  }
  std::uniform_int_distribution<std::size_t> oy(0, image.height() - patch_size);
  std::uniform_int_distribution<std::size_t> ox(0, image.width() - patch_size);
  std::vector<Image> patches;
  patches.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t y0 = oy(rng);
    const std::size_t x0 = ox(rng);
    Image patch(patch_size, patch_size, image.channels());
    for (std::size_t c = 0; c < image.channels(); ++c) {
      for (std::size_t y = 0; y < patch_size; ++y) {
        for (std::size_t x = 0; x < patch_size; ++x) patch.at(c, y, x) = image.at(c, y0 + y, x0 + x);
      }
    }
    patches.push_back(std::move(patch));
  }
  return patches;
}

/// Single channel `c` of `image` as its own one-channel image.
inline Image extract_channel(const Image& image, std::size_t c) {
  auto ch = image.channel(c);
  return Image(Shape{image.height(), image.width(), 1}, std::vector<double>(ch.begin(), ch.end()));
}

/// Periodic shift by (dy, dx): out(y, x) = in(y - dy, x - dx).
template <class Tag>
Grid<Tag> roll(const Grid<Tag>& g, std::ptrdiff_t dy, std::ptrdiff_t dx) {
  Grid<Tag> out(g.shape());
  const auto h = static_cast<std::ptrdiff_t>(g.height());
  const auto w = static_cast<std::ptrdiff_t>(g.width());
  for (std::size_t c = 0; c < g.channels(); ++c) {
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        const auto sy = static_cast<std::size_t>(((y - dy) % h + h) % h);
        const auto sx = static_cast<std::size_t>(((x - dx) % w + w) % w);
        out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = g.at(c, sy, sx);
      }
    }
  }
  return out;
}

template <class Tag>
double max_abs_diff(const Grid<Tag>& a, const Grid<Tag>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sdn
