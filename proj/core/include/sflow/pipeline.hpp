#pragma once

#include <string>
#include <vector>

#include "sflow/factor_graph.hpp"
#include "sflow/hypotheses.hpp"
#include "sflow/kitti_io.hpp"
#include "sflow/segmentation.hpp"

namespace sflow {

struct ImageQuad {
  GrayImage left0, right0, left1, right1;
};

/// Every tunable of the five-stage estimator, loadable from a JSON config
/// file. Factor toggles expose the ablation mechanism.
struct PipelineConfig {
  int superpixel_target = 2000;
  SegmentationConfig segmentation;
  std::string superpixels_path;

  int pyramid_levels = 3;
  bool census_multiscale = true;
  double census_sigma = 8.0;
  double census_huber_k = 1.5;
  int census_samples_per_superpixel = 96;

  double match_sigma = 1.0;
  double match_huber_k = 2.0;
  int matches_per_superpixel = 20;

  double boundary_sigma = 0.01;
  double boundary_huber_k = 1.0;
  int boundary_pixels_per_edge = 24;

  double motion_smooth_sigma_rot = 0.05;
  double motion_smooth_sigma_trans = 0.05;
  double motion_smooth_huber_k = 1.0;
  double prior_sigma = 10.0;

  LMConfig lm;

  StereoPriorConfig stereo;
  std::string disparity_path;

  PlaneFitConfig plane_fit;
  RansacConfig ransac;
  BuiltinMatcherConfig matcher;
  std::string matches_path;
  AssignConfig assign;

  bool enable_census = true;
  bool enable_match = true;
  bool enable_boundary_static = true;
  bool enable_boundary_motion = true;
  bool enable_motion_smooth = true;
  bool enable_prior = true;

  int threads = 0;

  /// Throws FormatError on out-of-range values or when every unary factor of
  /// an optimized stage is disabled.
  void validate() const;

  static PipelineConfig from_json_file(const std::string& path);
  static PipelineConfig from_json_text(const std::string& text);
  std::string to_json() const;
};

struct StageTrace {
  std::string name;
  double seconds = 0.0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::string note;
};

struct SceneFlowResult {
  SuperpixelMap superpixels;
  BoundarySet boundaries;
  std::vector<PlaneFit> initial_planes;
  std::vector<MovingPlane> planes;
  DisparityMap prior_disparity0, prior_disparity1;
  std::vector<MotionHypothesis> hypotheses;
  std::vector<LiftedCorrespondence> lifted_matches;
  LabelAssignment assignment;
  PoseSE3 camera_motion;
  DisparityMap d1, d2;
  FlowMap flow;
  std::vector<StageTrace> stages;
  bool superpixels_ingested = false;
  bool disparity_ingested = false;
  bool matches_ingested = false;
};

/// The five-stage estimator: initialization, planar graph optimization,
/// motion hypotheses, per-group local motion optimization, global refinement.
/// Stage errors are rethrown with the stage name prefixed; a missing motion
/// hypothesis degrades to the static-scene fallback.
SceneFlowResult run_pipeline(const ImageQuad& images, const CameraRig& rig,
                             const PipelineConfig& config);

/// Dense D1/D2/flow maps from the per-superpixel planes and motions.
/// Degenerate planes leave their pixels invalid.
void rasterize(const std::vector<MovingPlane>& planes, const SuperpixelMap& spmap,
               const CameraRig& rig, DisparityMap* d1, DisparityMap* d2, FlowMap* flow);

/// Evenly spread sample of a superpixel's pixels (row-major stride).
std::vector<Vec2> subsample_region(const std::vector<int32_t>& region, int width, int max_count);

}  // namespace sflow
