#include <doctest.h>

#include <random>

#include "sflow/census.hpp"
#include "test_support.hpp"

using namespace sflow;

namespace {

// Brute-force enumeration of the 62 comparisons, independent of the
// production bit packing only in that it re-derives every comparison.
uint64_t enumerate_descriptor(const GrayImage& img, int x, int y) {
  uint64_t d = 0;
  int bit = 0;
  for (int dy = -CensusImage::kHalfY; dy <= CensusImage::kHalfY; ++dy) {
    for (int dx = -CensusImage::kHalfX; dx <= CensusImage::kHalfX; ++dx) {
      if (dx == 0 && dy == 0) continue;
      if (img.at(x + dx, y + dy) < img.at(x, y)) d |= uint64_t(1) << bit;
      ++bit;
    }
  }
  return d;
}

GrayImage ramp_image(int w, int h) {
  GrayImage img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) img.at(x, y) = double(x) / (w - 1);
  }
  return img;
}

GrayImage noise_image(int w, int h, uint64_t seed) {
  GrayImage img(w, h);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST_CASE("census of a constant image is all zero bits") {
  const GrayImage img(20, 15, 0.5);
  const CensusImage census = census_transform(img);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (census.valid_at(x, y)) CHECK(census.at(x, y) == 0);
    }
  }
}

TEST_CASE("census of a horizontal ramp sets exactly the darker-column bits") {
  const GrayImage img = ramp_image(32, 16);
  const CensusImage census = census_transform(img);
  for (int y = CensusImage::kHalfY; y < img.height - CensusImage::kHalfY; ++y) {
    for (int x = CensusImage::kHalfX; x < img.width - CensusImage::kHalfX; ++x) {
      CHECK(census.at(x, y) == enumerate_descriptor(img, x, y));
      // On a strictly increasing ramp: 4 columns x 7 rows to the left are darker.
      CHECK(census_distance(census.at(x, y), 0) == 28);
    }
  }
}

TEST_CASE("census of a bright pixel on black sets all bits at that pixel") {
  GrayImage img(20, 15, 0.0);
  img.at(10, 7) = 1.0;
  const CensusImage census = census_transform(img);
  CHECK(census_distance(census.at(10, 7), 0) == 62);
  CHECK(census.at(10, 7) == enumerate_descriptor(img, 10, 7));
}

TEST_CASE("census marks borders invalid") {
  const CensusImage census = census_transform(GrayImage(20, 15, 0.1));
  CHECK_FALSE(census.valid_at(0, 0));
  CHECK_FALSE(census.valid_at(3, 7));
  CHECK_FALSE(census.valid_at(10, 2));
  CHECK(census.valid_at(4, 3));
}

TEST_CASE("census rejects undersized images") {
  CHECK_THROWS_AS(census_transform(GrayImage(8, 7)), ImageTooSmall);
  CHECK_THROWS_AS(census_transform(GrayImage(9, 6)), ImageTooSmall);
  CHECK_NOTHROW(census_transform(GrayImage(9, 7)));
}

TEST_CASE("census distance equals the popcount of the xor") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<uint64_t> bits(0, (uint64_t(1) << 62) - 1);
  for (int trial = 0; trial < 200; ++trial) {
    const uint64_t a = bits(rng), b = bits(rng);
    int manual = 0;
    for (int k = 0; k < 62; ++k) {
      manual += int(((a ^ b) >> k) & 1);
    }
    CHECK(census_distance(a, b) == manual);
    CHECK(census_distance(a, b) == census_distance(b, a));
  }
  CHECK(census_distance(0xabcdef, 0xabcdef) == 0);
  CHECK(census_distance(0, (uint64_t(1) << 62) - 1) == 62);
}

TEST_CASE("census is invariant to strictly monotone intensity remapping") {
  const GrayImage img = noise_image(30, 20, 5);
  GrayImage gamma = img;
  for (auto& v : gamma.data) v = std::pow(v, 2.2);
  GrayImage sqrt_img = img;
  for (auto& v : sqrt_img.data) v = std::sqrt(v);
  const CensusImage a = census_transform(img);
  const CensusImage b = census_transform(gamma);
  const CensusImage c = census_transform(sqrt_img);
  CHECK(a.desc == b.desc);
  CHECK(a.desc == c.desc);
}

TEST_CASE("interpolated cost at integer pixels equals the plain distance") {
  const GrayImage img = noise_image(30, 20, 7);
  const CensusImage census = census_transform(img);
  const uint64_t ref = census.at(10, 10);
  for (int x = 5; x < 24; ++x) {
    const auto s = interpolated_census_cost(census, Vec2(x, 8), ref);
    REQUIRE(s.has_value());
    CHECK(s->cost == double(census_distance(census.at(x, 8), ref)));
  }
}

TEST_CASE("interpolated cost blends four equal-weight corners") {
  // Hand-built census image with distances (0, 62, 0, 62) around one cell.
  CensusImage census;
  census.width = 2;
  census.height = 2;
  const uint64_t ones = (uint64_t(1) << 62) - 1;
  census.desc = {0, ones, 0, ones};
  census.valid = {1, 1, 1, 1};
  const auto s = interpolated_census_cost(census, Vec2(0.5, 0.5), 0);
  REQUIRE(s.has_value());
  CHECK(s->cost == doctest::Approx(31.0));
}

TEST_CASE("interpolated cost is unavailable when a corner is invalid") {
  const GrayImage img = noise_image(30, 20, 9);
  const CensusImage census = census_transform(img);
  CHECK_FALSE(interpolated_census_cost(census, Vec2(3.2, 8.0), 0).has_value());
  CHECK(interpolated_census_cost(census, Vec2(10.2, 8.0), 0).has_value());
}

TEST_CASE("interpolated cost gradient matches finite differences") {
  const GrayImage img = noise_image(64, 48, 11);
  const CensusImage census = census_transform(img);
  const uint64_t ref = census.at(30, 20);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> ux(6.0, 57.0), uy(5.0, 41.0), frac(0.05, 0.95);
  const double h = 1e-4;
  int checked = 0;
  double worst = 0.0;
  while (checked < 200) {
    const Vec2 at(std::floor(ux(rng)) + frac(rng), std::floor(uy(rng)) + frac(rng));
    const auto s = interpolated_census_cost(census, at, ref);
    if (!s) continue;
    const auto xp = interpolated_census_cost(census, at + Vec2(h, 0), ref);
    const auto xm = interpolated_census_cost(census, at - Vec2(h, 0), ref);
    const auto yp = interpolated_census_cost(census, at + Vec2(0, h), ref);
    const auto ym = interpolated_census_cost(census, at - Vec2(0, h), ref);
    REQUIRE((xp && xm && yp && ym));
    const Vec2 fd((xp->cost - xm->cost) / (2 * h), (yp->cost - ym->cost) / (2 * h));
    const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1.0);
    worst = std::max(worst, (s->gradient - fd).cwiseAbs().maxCoeff() / scale);
    ++checked;
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("interpolated cost is continuous across integer gridlines") {
  const GrayImage img = noise_image(40, 30, 15);
  const CensusImage census = census_transform(img);
  const uint64_t ref = census.at(20, 15);
  for (int k = 8; k < 30; ++k) {
    const double eps = 1e-9;
    const auto lo = interpolated_census_cost(census, Vec2(k - eps, 12.3), ref);
    const auto hi = interpolated_census_cost(census, Vec2(k + eps, 12.3), ref);
    REQUIRE((lo && hi));
    CHECK(std::abs(lo->cost - hi->cost) < 1e-6);
  }
}

TEST_CASE("interpolated cost and gradient respect the bilinear bounds") {
  const GrayImage img = noise_image(40, 30, 17);
  const CensusImage census = census_transform(img);
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> ux(5.0, 34.0), uy(4.0, 25.0);
  std::uniform_int_distribution<uint64_t> bits(0, (uint64_t(1) << 62) - 1);
  for (int trial = 0; trial < 500; ++trial) {
    const auto s = interpolated_census_cost(census, Vec2(ux(rng), uy(rng)), bits(rng));
    if (!s) continue;
    CHECK(s->cost >= 0.0);
    CHECK(s->cost <= 62.0);
    CHECK(s->gradient.norm() <= 62.0 * std::sqrt(2.0) + 1e-9);
  }
}

TEST_CASE("single-level pyramid is the input image with its census") {
  const GrayImage img = noise_image(32, 24, 21);
  const Pyramid pyr = build_pyramid(img, 1);
  REQUIRE(pyr.depth() == 1);
  CHECK(pyr.levels[0].image.data == img.data);
  CHECK(pyr.levels[0].census.desc == census_transform(img).desc);
}

TEST_CASE("pyramid of a constant image keeps zero descriptors at all levels") {
  const Pyramid pyr = build_pyramid(GrayImage(64, 64, 0.3), 3);
  REQUIRE(pyr.depth() == 3);
  CHECK(pyr.levels[0].image.width == 64);
  CHECK(pyr.levels[1].image.width == 32);
  CHECK(pyr.levels[2].image.width == 16);
  for (const auto& level : pyr.levels) {
    for (size_t i = 0; i < level.census.desc.size(); ++i) {
      if (level.census.valid[i]) CHECK(level.census.desc[i] == 0);
    }
  }
}

TEST_CASE("pyramid box filter averages a period-2 checkerboard to flat 0.5") {
  GrayImage img(32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) img.at(x, y) = double((x + y) % 2);
  }
  const Pyramid pyr = build_pyramid(img, 2);
  for (const double v : pyr.levels[1].image.data) {
    CHECK(v == doctest::Approx(0.5));   // hand-computed 2x2 average
  }
}

TEST_CASE("pyramid dimensions floor-divide per level") {
  const GrayImage img = noise_image(65, 37, 23);
  const Pyramid pyr = build_pyramid(img, 2);
  CHECK(pyr.levels[1].image.width == 32);
  CHECK(pyr.levels[1].image.height == 18);
}

TEST_CASE("pyramid refuses a depth that undercuts the census window") {
  CHECK_THROWS_AS(build_pyramid(GrayImage(32, 24, 0.1), 3), ImageTooSmall);
  CHECK_NOTHROW(build_pyramid(GrayImage(40, 32, 0.1), 3));
}
