#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "brunet/archive.hpp"
#include "brunet/tensor.hpp"

namespace brunet {

/// Min-max scale applied when quantizing an image to 8 bits: byte = round(255 * (v - min) / (max - min)).
struct PgmScale {
  double min = 0.0;
  double max = 0.0;
};

/// Binary 8-bit grayscale NetPBM (P5) of an (H, W) plane.
inline std::vector<std::uint8_t> encode_pgm(std::span<const float> plane, std::size_t height, std::size_t width,
                                            PgmScale* scale_out = nullptr) {
  if (plane.size() != height * width) throw InvalidArgument("PGM plane size does not match height x width");
  const auto [lo_it, hi_it] = std::minmax_element(plane.begin(), plane.end());
  const double lo = plane.empty() ? 0.0 : *lo_it;
  const double hi = plane.empty() ? 0.0 : *hi_it;
  if (scale_out) *scale_out = {lo, hi};
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const double range = hi - lo;
  for (float v : plane) {
    const double s = range > 0 ? (static_cast<double>(v) - lo) / range : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0)));
  }
  return out;
}

/// Writes time step t, channel c of a rank-4 tensor.
template <class T>
PgmScale write_pgm(const std::filesystem::path& path, const Tensor<T>& x, std::size_t t = 0, std::size_t c = 0) {
  if (x.rank() != 4) throw InvalidArgument("write_pgm expects a rank-4 tensor");
  std::vector<float> plane;
  plane.reserve(x.dim(kHeight) * x.dim(kWidth));
  for (std::size_t h = 0; h < x.dim(kHeight); ++h)
    for (std::size_t w = 0; w < x.dim(kWidth); ++w) plane.push_back(static_cast<float>(x.at(t, h, w, c)));
  PgmScale scale;
  write_file_atomic(path, encode_pgm(plane, x.dim(kHeight), x.dim(kWidth), &scale));
  return scale;
}

}  // namespace brunet
