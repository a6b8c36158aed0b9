#pragma once

#include <random>
#include <vector>

#include "sflow/census.hpp"
#include "sflow/geometry.hpp"

namespace sflow {

/// Dense superpixel labeling: contiguous labels 0..count-1, every pixel
/// labeled, each region 4-connected.
struct SuperpixelMap {
  int width = 0, height = 0, count = 0;
  std::vector<int32_t> labels;
  std::vector<std::vector<int32_t>> regions;   // pixel indices per label
  std::vector<Vec2> centroids;

  int32_t label_at(int x, int y) const { return labels[size_t(y) * width + x]; }
};

/// Boundary pixels per adjacent label pair, stored once with i < j. A listed
/// pixel belongs to one of the two regions and touches the other under
/// 4-connectivity.
struct BoundarySet {
  struct Edge {
    int i = -1, j = -1;
    std::vector<Vec2i> pixels;
  };
  std::vector<Edge> edges;
};

struct SegmentationConfig {
  double intensity_weight = 0.1;   // SLIC color normalizer, intensities in [0,1]
  int iterations = 10;
};

/// SLIC-style k-means over (x, y, intensity) with gradient-aware seed
/// placement and 4-connectivity enforcement. The realized count stays within
/// roughly 15% of the target.
SuperpixelMap segment(const GrayImage& reference, int target_count,
                      const SegmentationConfig& config = {});

/// Rebuilds a SuperpixelMap from a raw label image (e.g. an ingested
/// segmentation). Disconnected components of one label are split into
/// separate superpixels so the connectivity invariant holds.
SuperpixelMap superpixels_from_labels(int width, int height, const std::vector<int32_t>& labels);

BoundarySet extract_boundaries(const SuperpixelMap& spmap);

/// Per-pixel disparity in pixels; negative entries are invalid.
struct DisparityMap {
  static constexpr double kInvalid = -1.0;
  int width = 0, height = 0;
  std::vector<double> d;

  DisparityMap() = default;
  DisparityMap(int w, int h) : width(w), height(h), d(size_t(w) * h, kInvalid) {}

  double at(int x, int y) const { return d[size_t(y) * width + x]; }
  double& at(int x, int y) { return d[size_t(y) * width + x]; }
  bool valid(int x, int y) const { return at(x, y) >= 0.0; }
};

struct StereoPriorConfig {
  int max_disparity = 128;
  int lr_tolerance = 1;
  bool subpixel = true;
};

/// Winner-take-all census matching along the scanline with a uniqueness
/// margin and left-right consistency check. Assumes a rectified pair.
DisparityMap stereo_prior(const GrayImage& left, const GrayImage& right,
                          const StereoPriorConfig& config = {});

struct PlaneFit {
  Plane plane;
  double confidence = 0.0;   // RANSAC inlier ratio; 0 for fallback planes
};

struct PlaneFitConfig {
  int ransac_iterations = 100;
  double inlier_threshold_px = 1.0;
  double min_inlier_ratio = 0.5;
  int max_points = 250;
  double min_inverse_depth = 1e-4;
  double max_inverse_depth = 10.0;
};

/// Per-superpixel 3-point RANSAC over back-projected disparities, scored by
/// reprojected disparity error. Falls back to the frontal-parallel plane at
/// the median depth when the inlier ratio is under min_inlier_ratio or the
/// fit induces a degenerate stereo homography.
std::vector<PlaneFit> fit_planes(const DisparityMap& disparity, const SuperpixelMap& spmap,
                                 const CameraRig& rig, const PlaneFitConfig& config,
                                 std::mt19937_64& rng);

enum class FramePair { Stereo0, Stereo1, Temporal };

struct SampledMatch {
  Vec2 pixel;
  Vec2 displacement;
  FramePair tag = FramePair::Stereo0;
  int superpixel = -1;
};

struct SampledMatches {
  std::vector<SampledMatch> samples;
};

/// Samples stereo matches where the census distance across the pair is at
/// most max_bits, capped and spatially spread per superpixel.
SampledMatches sample_matches(const CensusImage& left, const CensusImage& right,
                              const DisparityMap& disparity, const SuperpixelMap& spmap,
                              int cap_per_superpixel = 20, int max_bits = 3);

}  // namespace sflow
