#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sdn/image.hpp"

namespace sdn::fixture {

inline Image random_image(std::size_t h, std::size_t w, std::size_t c, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(h, w, c);
  for (auto& v : img.values()) v = u(rng);
  return img;
}

inline ScoreField random_field(std::size_t h, std::size_t w, double lo, double hi, std::uint64_t seed) {
  return ScoreField::from(random_image(h, w, 1, lo, hi, seed));
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::path(SDN_TEST_TMPDIR) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace sdn::fixture
