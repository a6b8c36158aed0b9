#include "sflow/census.hpp"

#include <cmath>

namespace sflow {

std::optional<double> GrayImage::sample(const Vec2& p) const {
  const int x0 = static_cast<int>(std::floor(p.x()));
  const int y0 = static_cast<int>(std::floor(p.y()));
  if (x0 < 0 || y0 < 0 || x0 + 1 >= width || y0 + 1 >= height) {
    return std::nullopt;
  }
  const double fx = p.x() - x0;
  const double fy = p.y() - y0;
  const double v00 = at(x0, y0), v10 = at(x0 + 1, y0);
  const double v01 = at(x0, y0 + 1), v11 = at(x0 + 1, y0 + 1);
  return (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11;
}

CensusImage census_transform(const GrayImage& img) {
  constexpr int hx = CensusImage::kHalfX;
  constexpr int hy = CensusImage::kHalfY;
  if (img.width < 2 * hx + 1 || img.height < 2 * hy + 1) {
    throw ImageTooSmall("census_transform: image under 9x7");
  }
  CensusImage out;
  out.width = img.width;
  out.height = img.height;
  out.desc.assign(size_t(img.width) * img.height, 0);
  out.valid.assign(size_t(img.width) * img.height, 0);

  for (int y = hy; y < img.height - hy; ++y) {
    for (int x = hx; x < img.width - hx; ++x) {
      const double center = img.at(x, y);
      uint64_t d = 0;
      int bit = 0;
      for (int dy = -hy; dy <= hy; ++dy) {
        for (int dx = -hx; dx <= hx; ++dx) {
          if (dx == 0 && dy == 0) continue;
          if (img.at(x + dx, y + dy) < center) {
            d |= (uint64_t(1) << bit);
          }
          ++bit;
        }
      }
      out.desc[size_t(y) * img.width + x] = d;
      out.valid[size_t(y) * img.width + x] = 1;
    }
  }
  return out;
}

std::optional<CensusCostSample> interpolated_census_cost(const CensusImage& census,
                                                         const Vec2& at, uint64_t ref_descriptor) {
  const int x0 = static_cast<int>(std::floor(at.x()));
  const int y0 = static_cast<int>(std::floor(at.y()));
  if (!census.valid_at(x0, y0) || !census.valid_at(x0 + 1, y0) || !census.valid_at(x0, y0 + 1) ||
      !census.valid_at(x0 + 1, y0 + 1)) {
    return std::nullopt;
  }
  const double fx = at.x() - x0;
  const double fy = at.y() - y0;
  const double d00 = census_distance(census.at(x0, y0), ref_descriptor);
  const double d10 = census_distance(census.at(x0 + 1, y0), ref_descriptor);
  const double d01 = census_distance(census.at(x0, y0 + 1), ref_descriptor);
  const double d11 = census_distance(census.at(x0 + 1, y0 + 1), ref_descriptor);

  CensusCostSample s;
  s.cost = (1 - fx) * (1 - fy) * d00 + fx * (1 - fy) * d10 + (1 - fx) * fy * d01 + fx * fy * d11;
  s.gradient.x() = (1 - fy) * (d10 - d00) + fy * (d11 - d01);
  s.gradient.y() = (1 - fx) * (d01 - d00) + fx * (d11 - d10);
  return s;
}

namespace {

GrayImage box_downsample(const GrayImage& in) {
  GrayImage out(in.width / 2, in.height / 2);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      out.at(x, y) = 0.25 * (in.at(2 * x, 2 * y) + in.at(2 * x + 1, 2 * y) +
                             in.at(2 * x, 2 * y + 1) + in.at(2 * x + 1, 2 * y + 1));
    }
  }
  return out;
}

}  // namespace

Pyramid build_pyramid(const GrayImage& img, int levels) {
  if (levels < 1) {
    throw ImageTooSmall("build_pyramid: levels must be >= 1");
  }
  Pyramid pyr;
  pyr.levels.reserve(levels);
  GrayImage current = img;
  for (int l = 0; l < levels; ++l) {
    if (l > 0) {
      if (current.width / 2 < 2 * CensusImage::kHalfX + 1 ||
          current.height / 2 < 2 * CensusImage::kHalfY + 1) {
        throw ImageTooSmall("build_pyramid: level under 9x7 at requested depth");
      }
      current = box_downsample(current);
    }
    Pyramid::Level level;
    level.census = census_transform(current);
    level.image = std::move(current);
    pyr.levels.push_back(std::move(level));
    if (l + 1 < levels) {
      current = pyr.levels.back().image;
    }
  }
  return pyr;
}

}  // namespace sflow
