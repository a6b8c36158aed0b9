#pragma once

#include <bit>
#include <cstdint>
#include <optional>
#include <vector>

#include "sflow/errors.hpp"
#include "sflow/types.hpp"

namespace sflow {

/// Row-major grayscale image with intensities in [0, 1].
struct GrayImage {
  int width = 0, height = 0;
  std::vector<double> data;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0) : width(w), height(h), data(size_t(w) * h, fill) {}

  double at(int x, int y) const { return data[size_t(y) * width + x]; }
  double& at(int x, int y) { return data[size_t(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  /// Bilinear intensity sample; nullopt when the 4 integer neighbors are not
  /// all inside the image.
  std::optional<double> sample(const Vec2& p) const;
};

/// Per-pixel Census descriptors over a 9x7 window (62 comparison bits).
/// Bit k is set when the k-th neighbor (row-major scan, center skipped) is
/// strictly darker than the center; ties give 0.
struct CensusImage {
  static constexpr int kHalfX = 4;
  static constexpr int kHalfY = 3;
  static constexpr int kBits = 62;

  int width = 0, height = 0;
  std::vector<uint64_t> desc;
  std::vector<uint8_t> valid;

  uint64_t at(int x, int y) const { return desc[size_t(y) * width + x]; }
  bool valid_at(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height && valid[size_t(y) * width + x];
  }
};

/// Throws ImageTooSmall for images under 9x7.
CensusImage census_transform(const GrayImage& img);

/// Hamming distance between two descriptors, in [0, 62].
inline int census_distance(uint64_t a, uint64_t b) { return std::popcount(a ^ b); }

struct CensusCostSample {
  double cost = 0.0;
  Vec2 gradient = Vec2::Zero();
};

/// Bilinear-interpolated Census cost against a reference descriptor, with the
/// analytic derivative w.r.t. the subpixel location. Returns nullopt when any
/// of the 4 integer neighbors is an invalid census pixel.
std::optional<CensusCostSample> interpolated_census_cost(const CensusImage& census,
                                                         const Vec2& at, uint64_t ref_descriptor);

/// Image pyramid with per-level Census descriptors. Level 0 is the input;
/// each coarser level is the 2x2 box-filtered, 2-subsampled predecessor.
struct Pyramid {
  struct Level {
    GrayImage image;
    CensusImage census;
  };
  std::vector<Level> levels;

  int depth() const { return static_cast<int>(levels.size()); }
};

/// Throws ImageTooSmall when the coarsest requested level falls under 9x7.
Pyramid build_pyramid(const GrayImage& img, int levels);

/// Maps level-0 pixel coordinates to level-L coordinates under repeated 2x2
/// box downsampling (pixel centers at 2x+0.5 of the finer grid).
inline Vec2 to_level(const Vec2& p, int level) {
  const double s = static_cast<double>(1u << level);
  return Vec2((p.x() + 0.5) / s - 0.5, (p.y() + 0.5) / s - 0.5);
}

}  // namespace sflow
