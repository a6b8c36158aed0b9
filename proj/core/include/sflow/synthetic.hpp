#pragma once

#include <string>
#include <vector>

#include "sflow/census.hpp"
#include "sflow/geometry.hpp"
#include "sflow/kitti_io.hpp"
#include "sflow/segmentation.hpp"

namespace sflow {

/// One textured planar patch: the rectangle it owns in the reference image
/// (x1/y1 exclusive) and its rigid motion relative to the scene.
struct PlaneSpecEntry {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  Plane plane;
  PoseSE3 object_motion;   // identity for static geometry
  bool is_object = false;
};

struct SceneSpec {
  int width = 0, height = 0;
  CameraRig rig;
  PoseSE3 camera_motion;   // reference frame t -> t+1 camera transform
  std::vector<PlaneSpecEntry> planes;
  double texture_wavelength = 24.0;
  int texture_octaves = 2;
  double texture_contrast = 0.8;
};

/// Parses the plain-text scene description ('#' comments):
///   size W H
///   calib fx fy cx cy baseline
///   camera wx wy wz vx vy vz
///   texture wavelength octaves contrast
///   plane x0 y0 x1 y1 normal nx ny nz [motion wx wy wz vx vy vz]
SceneSpec parse_scene_spec(const std::string& path);
SceneSpec parse_scene_spec_text(const std::string& text, const std::string& origin = "<memory>");
std::string scene_spec_to_text(const SceneSpec& spec);

/// A rendered four-view scene with exact ground truth. The renderer casts
/// rays against the planar patches directly and never goes through the
/// homography code it is used to validate.
struct SyntheticScene {
  SceneSpec spec;
  GrayImage left0, right0, left1, right1;
  DisparityMap gt_d1, gt_d2;
  DisparityMap view_disparity1;   // left t+1 frame's own disparity, on its grid
  FlowMap gt_flow;
  std::vector<int32_t> gt_labels;       // owning plane per reference pixel
  MaskImage noc_mask;                   // visible in all three other views
  MaskImage fg_mask;                    // pixels of moving-object planes
  std::vector<PoseSE3> full_motions;    // camera_motion * object_motion per plane
};

/// Throws SpecError when the patches leave reference pixels uncovered.
SyntheticScene generate_synthetic(const SceneSpec& spec, uint64_t seed);

}  // namespace sflow
