#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sflow/census.hpp"
#include "sflow/geometry.hpp"
#include "sflow/segmentation.hpp"

namespace sflow {

/// Semi-dense temporal matches from the reference frame into left t+1.
struct MatchField {
  enum class Source { Ingested, BuiltIn };
  struct Match {
    Vec2 p0;
    Vec2 p1;
  };
  std::vector<Match> matches;
  Source source = Source::BuiltIn;
};

/// Parses whitespace-separated "x0 y0 x1 y1" lines ('#' starts a comment).
/// Throws ParseError with the line number, EmptyMatchField when nothing
/// remains, and drops out-of-bounds endpoints when bounds are given.
MatchField load_matches(const std::string& path, int width = 0, int height = 0);

struct BuiltinMatcherConfig {
  int grid_stride = 4;
  int coarse_search_radius = 8;
  int refine_radius = 2;
  int max_bits = 14;
};

/// Coarse-to-fine census block matching over the pyramids; the fallback when
/// no external match file is supplied.
MatchField builtin_matches(const Pyramid& reference, const Pyramid& target,
                           const BuiltinMatcherConfig& config = {});

/// One rigid-motion candidate: scene motion expressed in the reference frame
/// (camera transform folded in).
struct MotionHypothesis {
  PoseSE3 motion;
  std::vector<int> inliers;     // indices into the lifted correspondence set
  double inlier_ratio = 0.0;
  bool is_camera = false;       // first retained hypothesis
};

/// A match lifted to 3D through its superpixel's plane; p1_point is present
/// when the endpoint could also be lifted by the t+1 depth prior.
struct LiftedCorrespondence {
  Vec3 x0;
  Vec2 p1;
  std::optional<Vec3> x1;
  int superpixel = -1;
  int match_index = -1;
};

std::vector<LiftedCorrespondence> lift_matches(const MatchField& matches,
                                               const std::vector<PlaneFit>& planes,
                                               const SuperpixelMap& spmap, const CameraRig& rig,
                                               const DisparityMap* disparity_t1);

struct RansacConfig {
  double sigma = 1.0;              // reprojection std; inliers within 3*sigma
  double min_inlier_ratio = 0.2;
  int max_hypotheses = 20;
  int iterations = 400;
  double claim_fraction = 0.5;     // superpixel pruning threshold
  int min_pool = 12;
  uint64_t seed = 0;
};

/// Iterated RANSAC over the lifted matches: 3-point aligned 3D-3D when the
/// endpoints lift, 3-point resection otherwise; superpixels whose matches are
/// mostly inliers leave the pool after each accepted hypothesis. Throws
/// NoHypothesis when no candidate clears the inlier ratio.
std::vector<MotionHypothesis> ransac_hypotheses(const std::vector<LiftedCorrespondence>& lifted,
                                                const SuperpixelMap& spmap, const CameraRig& rig,
                                                const RansacConfig& config);

struct RefineConfig {
  int max_iterations = 20;
  double huber_k = 1.5;
  double lambda_init = 1e-4;
};

/// Huber-weighted Levenberg-Marquardt over SE(3) on the hypothesis inliers;
/// the refined reprojection cost never exceeds the initial one.
MotionHypothesis refine_hypothesis(const MotionHypothesis& h,
                                   const std::vector<LiftedCorrespondence>& lifted,
                                   const CameraRig& rig, const RefineConfig& config = {});

/// Minimal solvers, exposed for testing. Both recover the motion X with
/// p1 ~ project(K * X * x0).
PoseSE3 align_rigid_3d3d(const std::vector<Vec3>& from, const std::vector<Vec3>& to);
std::vector<PoseSE3> resect_p3p(const std::vector<Vec3>& points, const std::vector<Vec3>& rays);

struct LabelAssignment {
  std::vector<int> label;        // per superpixel, hypothesis index
  std::vector<Vec3> energies;    // (E_depth, E_photometric, E_cluster) at the chosen label
};

struct AssignConfig {
  double alpha = 1.0;
  double beta = 0.25;
  int max_pixels = 96;
  double neighborhood_radius = 60.0;
  double min_sigma_intensity = 0.02;
  double min_sigma_depth = 0.5;
  bool argmax_convention = false;   // flip of the energy-combination sign
};

/// Bayesian hypothesis-to-superpixel assignment from depth, photometric, and
/// feature-clustering energies. Superpixels without any valid evidence take
/// the camera hypothesis.
LabelAssignment assign_labels(const std::vector<MotionHypothesis>& hypotheses,
                              const std::vector<PlaneFit>& planes, const GrayImage& image0,
                              const GrayImage& image1, const DisparityMap& disparity0,
                              const DisparityMap& disparity1,
                              const std::vector<LiftedCorrespondence>& features,
                              const SuperpixelMap& spmap, const CameraRig& rig,
                              const AssignConfig& config = {});

}  // namespace sflow
