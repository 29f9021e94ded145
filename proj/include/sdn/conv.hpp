#pragma once

// Circular 2-D convolution A, its adjoint, and its exact inverse.
//
// Kernels are odd-sized and anchored at the center tap, so
//   (A u)(y, x) = sum_{i,j} K(i, j) u(y - (i - r), x - (j - r))   with periodic indices.
// Each channel is transformed independently. The inverse divides by the transfer
// function in the Fourier domain (FFTW). FFTW planning is not thread-safe; callers
// that invert concurrently must serialize.

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sdn/errors.hpp"
#include "sdn/image.hpp"

namespace sdn {

class ConvKernel {
 public:
  /// Magnitude below which a transfer-function value counts as singular.
  static constexpr double kSingularThreshold = 1e-9;
  /// Grid on which invertibility is screened at construction.
  static constexpr std::size_t kScreenGrid = 256;

  ConvKernel(std::size_t size, std::vector<double> taps);

  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] std::size_t radius() const { return size_ / 2; }
  [[nodiscard]] double tap(std::size_t i, std::size_t j) const { return taps_[i * size_ + j]; }
  [[nodiscard]] const std::vector<double>& taps() const { return taps_; }
  [[nodiscard]] double normalization() const {
    double s = 0.0;
    for (double t : taps_) s += t;
    return s;
  }
  /// Point-reflected kernel: the impulse response of the adjoint.
  [[nodiscard]] ConvKernel reflected() const {
    std::vector<double> r(taps_.rbegin(), taps_.rend());
    return ConvKernel(size_, std::move(r));
  }
  [[nodiscard]] bool is_identity() const {
    for (std::size_t i = 0; i < taps_.size(); ++i) {
      if (taps_[i] != (i == taps_.size() / 2 ? 1.0 : 0.0)) return false;
    }
    return true;
  }

  friend bool operator==(const ConvKernel&, const ConvKernel&) = default;

 private:
  std::size_t size_;
  std::vector<double> taps_;
};

namespace detail {

struct FftwBuffer {
  explicit FftwBuffer(std::size_t n) : ptr(fftw_alloc_complex(n)), n(n) {
    if (ptr == nullptr) throw NumericalError("fftw allocation failed");
  }
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;

  fftw_complex* ptr;
  std::size_t n;
};

class Fft2d {
 public:
  Fft2d(std::size_t h, std::size_t w, int sign) : buf_(h * w) {
    plan_ = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf_.ptr, buf_.ptr, sign, FFTW_ESTIMATE);
    if (plan_ == nullptr) throw NumericalError("fftw planning failed");
  }
  ~Fft2d() { fftw_destroy_plan(plan_); }
  Fft2d(const Fft2d&) = delete;
  Fft2d& operator=(const Fft2d&) = delete;

  fftw_complex* data() { return buf_.ptr; }
  void execute() { fftw_execute(plan_); }

 private:
  FftwBuffer buf_;
  fftw_plan plan_;
};

inline std::size_t wrap(std::ptrdiff_t v, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  return static_cast<std::size_t>(((v % m) + m) % m);
}

}  // namespace detail

/// Transfer function of A on an h x w periodic grid, row-major.
inline std::vector<std::complex<double>> kernel_spectrum(const ConvKernel& kernel, std::size_t h, std::size_t w) {
  detail::Fft2d fft(h, w, FFTW_FORWARD);
  fftw_complex* d = fft.data();
  for (std::size_t i = 0; i < h * w; ++i) d[i][0] = d[i][1] = 0.0;
  const auto r = static_cast<std::ptrdiff_t>(kernel.radius());
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    for (std::size_t j = 0; j < kernel.size(); ++j) {
      const std::size_t y = detail::wrap(static_cast<std::ptrdiff_t>(i) - r, h);
      const std::size_t x = detail::wrap(static_cast<std::ptrdiff_t>(j) - r, w);
      d[y * w + x][0] += kernel.tap(i, j);
    }
  }
  fft.execute();
  std::vector<std::complex<double>> out(h * w);
  for (std::size_t i = 0; i < h * w; ++i) out[i] = {d[i][0], d[i][1]};
  return out;
}

inline ConvKernel::ConvKernel(std::size_t size, std::vector<double> taps) : size_(size), taps_(std::move(taps)) {
  if (size_ == 0 || size_ % 2 == 0) throw ShapeError("kernel size must be odd, got " + std::to_string(size_));
  if (taps_.size() != size_ * size_) {
    throw ShapeError("kernel of size " + std::to_string(size_) + " needs " + std::to_string(size_ * size_) +
                     " taps, got " + std::to_string(taps_.size()));
  }
  for (double t : taps_) {
    if (!std::isfinite(t)) throw ParameterError("kernel tap is not finite");
  }
  const std::size_t n = std::max(kScreenGrid, size_);
  const auto spec = kernel_spectrum(*this, n, n);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (std::abs(spec[i]) <= kSingularThreshold) {
      throw SingularityError("kernel transfer function vanishes at frequency (" + std::to_string(i / n) + ", " +
                             std::to_string(i % n) + ") on a " + std::to_string(n) + "x" + std::to_string(n) +
                             " grid");
    }
  }
}

/// The 3x3 correlation kernel used by every correlated noise model.
inline ConvKernel default_kernel() {
  return ConvKernel(3, {0.05, 0.1, 0.05,  //
                        0.1, 0.4, 0.1,    //
                        0.05, 0.1, 0.05});
}

inline ConvKernel identity_kernel() { return ConvKernel(1, {1.0}); }

/// Text format: first token k, then k rows of k reals.
inline ConvKernel parse_kernel(const std::string& text) {
  std::istringstream in(text);
  std::size_t k = 0;
  if (!(in >> k)) throw ConfigError("kernel text: missing size");
  std::vector<double> taps(k * k);
  for (auto& t : taps) {
    if (!(in >> t)) throw ConfigError("kernel text: expected " + std::to_string(k * k) + " taps");
  }
  return ConvKernel(k, std::move(taps));
}

inline ConvKernel load_kernel(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open kernel file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kernel(ss.str());
}

inline std::string format_kernel(const ConvKernel& kernel) {
  std::ostringstream out;
  out.precision(17);
  out << kernel.size() << "\n";
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    for (std::size_t j = 0; j < kernel.size(); ++j) out << (j ? " " : "") << kernel.tap(i, j);
    out << "\n";
  }
  return out.str();
}

namespace detail {

template <class Tag>
void require_fits(const Grid<Tag>& g, const ConvKernel& k) {
  if (g.height() < k.size() || g.width() < k.size()) {
    throw ShapeError("image " + to_string(g.shape()) + " smaller than " + std::to_string(k.size()) + "x" +
                     std::to_string(k.size()) + " kernel");
  }
}

// Spatial circular convolution with sign = +1 (A) or -1 (A^T).
template <class Tag>
Grid<Tag> circular_conv(const Grid<Tag>& g, const ConvKernel& kernel, int sign) {
  require_fits(g, kernel);
  Grid<Tag> out(g.shape());
  const std::size_t h = g.height();
  const std::size_t w = g.width();
  const auto r = static_cast<std::ptrdiff_t>(kernel.radius());
  for (std::size_t c = 0; c < g.channels(); ++c) {
    auto src = g.channel(c);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < kernel.size(); ++i) {
      for (std::size_t j = 0; j < kernel.size(); ++j) {
        const double t = kernel.tap(i, j);
        if (t == 0.0) continue;
        const std::ptrdiff_t dy = sign * (static_cast<std::ptrdiff_t>(i) - r);
        const std::ptrdiff_t dx = sign * (static_cast<std::ptrdiff_t>(j) - r);
        for (std::size_t y = 0; y < h; ++y) {
          const std::size_t sy = wrap(static_cast<std::ptrdiff_t>(y) - dy, h);
          const double* srow = &src[sy * w];
          double* drow = &dst[y * w];
          for (std::size_t x = 0; x < w; ++x) drow[x] += t * srow[wrap(static_cast<std::ptrdiff_t>(x) - dx, w)];
        }
      }
    }
  }
  return out;
}

// Divides by the transfer function (or its conjugate for the adjoint inverse).
template <class Tag>
Grid<Tag> spectral_divide(const Grid<Tag>& g, const ConvKernel& kernel, bool conjugate) {
  require_fits(g, kernel);
  const std::size_t h = g.height();
  const std::size_t w = g.width();
  const auto spec = kernel_spectrum(kernel, h, w);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (std::abs(spec[i]) <= ConvKernel::kSingularThreshold) {
      throw SingularityError("convolution not invertible on " + std::to_string(h) + "x" + std::to_string(w) +
                             " grid: transfer function magnitude " + std::to_string(std::abs(spec[i])) +
                             " at frequency (" + std::to_string(i / w) + ", " + std::to_string(i % w) + ")");
    }
  }
  Fft2d fwd(h, w, FFTW_FORWARD);
  Fft2d inv(h, w, FFTW_BACKWARD);
  Grid<Tag> out(g.shape());
  const double norm = 1.0 / static_cast<double>(h * w);
  for (std::size_t c = 0; c < g.channels(); ++c) {
    auto src = g.channel(c);
    fftw_complex* a = fwd.data();
    for (std::size_t i = 0; i < h * w; ++i) {
      a[i][0] = src[i];
      a[i][1] = 0.0;
    }
    fwd.execute();
    fftw_complex* b = inv.data();
    for (std::size_t i = 0; i < h * w; ++i) {
      const std::complex<double> den = conjugate ? std::conj(spec[i]) : spec[i];
      const std::complex<double> q = std::complex<double>(a[i][0], a[i][1]) / den;
      b[i][0] = q.real();
      b[i][1] = q.imag();
    }
    inv.execute();
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < h * w; ++i) dst[i] = b[i][0] * norm;
  }
  return out;
}

}  // namespace detail

/// A u: circular convolution per channel.
template <class Tag>
Grid<Tag> conv_apply(const Grid<Tag>& g, const ConvKernel& kernel) {
  return detail::circular_conv(g, kernel, +1);
}

/// A^T u: convolution with the point-reflected kernel.
template <class Tag>
Grid<Tag> conv_transpose_apply(const Grid<Tag>& g, const ConvKernel& kernel) {
  return detail::circular_conv(g, kernel, -1);
}

/// A^{-1} u, exact under periodic boundaries.
template <class Tag>
Grid<Tag> conv_inverse_apply(const Grid<Tag>& g, const ConvKernel& kernel) {
  if (kernel.is_identity()) return g;
  return detail::spectral_divide(g, kernel, false);
}

/// A^{-T} u.
template <class Tag>
Grid<Tag> conv_inverse_transpose_apply(const Grid<Tag>& g, const ConvKernel& kernel) {
  if (kernel.is_identity()) return g;
  return detail::spectral_divide(g, kernel, true);
}

/// log |det A| for one channel of an h x w grid.
inline double conv_log_abs_det(const ConvKernel& kernel, std::size_t h, std::size_t w) {
  double s = 0.0;
  for (const auto& v : kernel_spectrum(kernel, h, w)) s += std::log(std::abs(v));
  return s;
}

}  // namespace sdn
