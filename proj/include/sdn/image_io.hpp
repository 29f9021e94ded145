#pragma once

// Binary PGM (P5) / PPM (P6) and the lossless raw interchange format.
//
// Raw layout: uint32 height, uint32 width, uint32 channels, then height*width*channels
// float64 values in planar order, everything little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sdn/errors.hpp"
#include "sdn/image.hpp"

namespace sdn {

enum class ImageFormat { Pgm, Ppm, Raw };

namespace detail {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string netpbm_token(const std::vector<unsigned char>& buf, std::size_t& pos) {
  while (pos < buf.size()) {
    if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(buf[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') tok.push_back(static_cast<char>(buf[pos++]));
  return tok;
}

inline std::size_t parse_dim(const std::string& tok, const std::string& what, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(tok, &used);
    if (used != tok.size() || v == 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError("netpbm: bad " + what + " '" + tok + "' in " + path.string());
  }
}

inline Image read_netpbm(const std::vector<unsigned char>& buf, const std::filesystem::path& path) {
  std::size_t pos = 0;
  const std::string magic = netpbm_token(buf, pos);
  std::size_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw IoError("unsupported netpbm variant '" + magic + "' in " + path.string() + " (only P5/P6)");
  }
  const std::size_t width = parse_dim(netpbm_token(buf, pos), "width", path);
  const std::size_t height = parse_dim(netpbm_token(buf, pos), "height", path);
  const std::size_t maxval = parse_dim(netpbm_token(buf, pos), "maxval", path);
  if (maxval > 65535) throw IoError("netpbm: maxval " + std::to_string(maxval) + " too large in " + path.string());
  ++pos;  // single whitespace byte after maxval
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t count = width * height * channels;
  if (buf.size() < pos + count * bytes_per) throw IoError("netpbm: truncated pixel data in " + path.string());

  Image img(height, width, channels);
  const double scale = 255.0 / static_cast<double>(maxval);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t k = pos + ((y * width + x) * channels + c) * bytes_per;
        const unsigned v = bytes_per == 1 ? buf[k] : (static_cast<unsigned>(buf[k]) << 8U) | buf[k + 1];
        img.at(c, y, x) = static_cast<double>(v) * scale;
      }
    }
  }
  return img;
}

inline Image read_raw(const std::vector<unsigned char>& buf, const std::filesystem::path& path) {
  if (buf.size() < 12) throw IoError("raw: truncated header in " + path.string());
  std::uint32_t dims[3];
  for (int i = 0; i < 3; ++i) {
    std::memcpy(&dims[i], buf.data() + 4 * i, 4);
    dims[i] = byteswap_if_big(dims[i]);
  }
  const Shape shape{dims[0], dims[1], dims[2]};
  if (buf.size() != 12 + shape.size() * 8) {
    throw IoError("raw: payload size does not match " + to_string(shape) + " in " + path.string());
  }
  std::vector<double> data(shape.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    double v = 0.0;
    std::memcpy(&v, buf.data() + 12 + 8 * i, 8);
    data[i] = byteswap_if_big(v);
  }
  return Image(shape, std::move(data));
}

inline unsigned char quantize8(double v) {
  const double clamped = std::clamp(v, 0.0, 255.0);
  return static_cast<unsigned char>(std::floor(clamped + 0.5));
}

}  // namespace detail

inline ImageFormat format_for_path(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".pgm") return ImageFormat::Pgm;
  if (ext == ".ppm") return ImageFormat::Ppm;
  if (ext == ".raw") return ImageFormat::Raw;
  throw IoError("unsupported image format '" + ext + "' for " + path.string() + " (expected .pgm, .ppm or .raw)");
}

/// Loads an image, scaling values to [0, 255] regardless of on-disk bit depth.
inline Image read_image(const std::filesystem::path& path) {
  const ImageFormat fmt = format_for_path(path);
  const auto buf = detail::slurp(path);
  if (fmt == ImageFormat::Raw) return detail::read_raw(buf, path);
  return detail::read_netpbm(buf, path);
}

/// Writes PGM/PPM (8-bit, clamped to [0, 255], rounded half up) or lossless raw, chosen by extension.
inline void write_image(const Image& image, const std::filesystem::path& path) {
  const ImageFormat fmt = format_for_path(path);
  std::string bytes;
  if (fmt == ImageFormat::Raw) {
    bytes.resize(12 + image.size() * 8);
    const std::uint32_t dims[3] = {static_cast<std::uint32_t>(image.height()),
                                   static_cast<std::uint32_t>(image.width()),
                                   static_cast<std::uint32_t>(image.channels())};
    for (int i = 0; i < 3; ++i) {
      const auto d = detail::byteswap_if_big(dims[i]);
      std::memcpy(bytes.data() + 4 * i, &d, 4);
    }
    for (std::size_t i = 0; i < image.size(); ++i) {
      const double v = detail::byteswap_if_big(image[i]);
      std::memcpy(bytes.data() + 12 + 8 * i, &v, 8);
    }
  } else {
    const std::size_t want = fmt == ImageFormat::Pgm ? 1 : 3;
    if (image.channels() != want) {
      throw IoError("cannot write " + std::to_string(image.channels()) + "-channel image as " + path.string());
    }
    bytes = (fmt == ImageFormat::Pgm ? "P5\n" : "P6\n") + std::to_string(image.width()) + " " +
            std::to_string(image.height()) + "\n255\n";
    for (std::size_t y = 0; y < image.height(); ++y) {
      for (std::size_t x = 0; x < image.width(); ++x) {
        for (std::size_t c = 0; c < want; ++c) bytes.push_back(static_cast<char>(detail::quantize8(image.at(c, y, x))));
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace sdn
