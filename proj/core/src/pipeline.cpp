#include "sflow/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "sflow/parallel.hpp"

namespace sflow {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void PipelineConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw FormatError(std::string("config: ") + name + " must be positive");
  };
  positive(census_sigma, "census.sigma");
  positive(census_huber_k, "census.huber_k");
  positive(match_sigma, "match.sigma");
  positive(match_huber_k, "match.huber_k");
  positive(boundary_sigma, "boundary.sigma");
  positive(boundary_huber_k, "boundary.huber_k");
  positive(motion_smooth_sigma_rot, "motion_smooth.sigma_rot");
  positive(motion_smooth_sigma_trans, "motion_smooth.sigma_trans");
  positive(motion_smooth_huber_k, "motion_smooth.huber_k");
  positive(prior_sigma, "prior.sigma");
  positive(ransac.sigma, "ransac.sigma");
  positive(lm.lambda_init, "lm.lambda_init");
  if (superpixel_target < 1) throw FormatError("config: superpixels.target must be >= 1");
  if (pyramid_levels < 1) throw FormatError("config: pyramid_levels must be >= 1");
  if (!enable_census && !enable_match) {
    throw FormatError("config: at least one unary factor (census or match) must stay enabled");
  }
}

namespace {

void load_section(const json& j, const char* name, const std::function<void(const json&)>& fn) {
  if (j.contains(name)) {
    if (!j.at(name).is_object()) {
      throw FormatError(std::string("config: section '") + name + "' must be an object");
    }
    fn(j.at(name));
  }
}

}  // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text, nullptr, true, true);   // allow comments
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  PipelineConfig c;
  try {
    load_section(j, "superpixels", [&](const json& s) {
      c.superpixel_target = s.value("target", c.superpixel_target);
      c.segmentation.intensity_weight = s.value("compactness", c.segmentation.intensity_weight);
      c.segmentation.iterations = s.value("iterations", c.segmentation.iterations);
    });
    c.pyramid_levels = j.value("pyramid_levels", c.pyramid_levels);
    load_section(j, "census", [&](const json& s) {
      c.census_sigma = s.value("sigma", c.census_sigma);
      c.census_huber_k = s.value("huber_k", c.census_huber_k);
      c.census_samples_per_superpixel = s.value("samples_per_superpixel", c.census_samples_per_superpixel);
      c.census_multiscale = s.value("multiscale", c.census_multiscale);
    });
    load_section(j, "match", [&](const json& s) {
      c.match_sigma = s.value("sigma", c.match_sigma);
      c.match_huber_k = s.value("huber_k", c.match_huber_k);
      c.matches_per_superpixel = s.value("max_per_superpixel", c.matches_per_superpixel);
    });
    load_section(j, "boundary", [&](const json& s) {
      c.boundary_sigma = s.value("sigma", c.boundary_sigma);
      c.boundary_huber_k = s.value("huber_k", c.boundary_huber_k);
      c.boundary_pixels_per_edge = s.value("max_pixels_per_edge", c.boundary_pixels_per_edge);
    });
    load_section(j, "motion_smooth", [&](const json& s) {
      c.motion_smooth_sigma_rot = s.value("sigma_rot", c.motion_smooth_sigma_rot);
      c.motion_smooth_sigma_trans = s.value("sigma_trans", c.motion_smooth_sigma_trans);
      c.motion_smooth_huber_k = s.value("huber_k", c.motion_smooth_huber_k);
    });
    load_section(j, "prior", [&](const json& s) { c.prior_sigma = s.value("sigma", c.prior_sigma); });
    load_section(j, "lm", [&](const json& s) {
      c.lm.lambda_init = s.value("lambda_init", c.lm.lambda_init);
      c.lm.lambda_factor = s.value("lambda_factor", c.lm.lambda_factor);
      c.lm.lambda_max = s.value("lambda_max", c.lm.lambda_max);
      c.lm.max_iterations = s.value("max_iterations", c.lm.max_iterations);
      c.lm.rel_decrease_tol = s.value("rel_decrease_tol", c.lm.rel_decrease_tol);
    });
    load_section(j, "stereo_prior", [&](const json& s) {
      c.stereo.max_disparity = s.value("max_disparity", c.stereo.max_disparity);
      c.stereo.subpixel = s.value("subpixel", c.stereo.subpixel);
    });
    load_section(j, "plane_fit", [&](const json& s) {
      c.plane_fit.ransac_iterations = s.value("iterations", c.plane_fit.ransac_iterations);
      c.plane_fit.inlier_threshold_px = s.value("inlier_threshold_px", c.plane_fit.inlier_threshold_px);
      c.plane_fit.min_inlier_ratio = s.value("min_inlier_ratio", c.plane_fit.min_inlier_ratio);
    });
    load_section(j, "ransac", [&](const json& s) {
      c.ransac.sigma = s.value("sigma", c.ransac.sigma);
      c.ransac.min_inlier_ratio = s.value("min_inlier_ratio", c.ransac.min_inlier_ratio);
      c.ransac.max_hypotheses = s.value("max_hypotheses", c.ransac.max_hypotheses);
      c.ransac.iterations = s.value("iterations", c.ransac.iterations);
      c.ransac.claim_fraction = s.value("claim_fraction", c.ransac.claim_fraction);
    });
    load_section(j, "matcher", [&](const json& s) {
      c.matcher.grid_stride = s.value("grid_stride", c.matcher.grid_stride);
      c.matcher.coarse_search_radius = s.value("coarse_search_radius", c.matcher.coarse_search_radius);
      c.matcher.refine_radius = s.value("refine_radius", c.matcher.refine_radius);
      c.matcher.max_bits = s.value("max_bits", c.matcher.max_bits);
    });
    load_section(j, "assign", [&](const json& s) {
      c.assign.alpha = s.value("alpha", c.assign.alpha);
      c.assign.beta = s.value("beta", c.assign.beta);
      c.assign.neighborhood_radius = s.value("neighborhood_radius", c.assign.neighborhood_radius);
      c.assign.argmax_convention = s.value("argmax_convention", c.assign.argmax_convention);
    });
    load_section(j, "factors", [&](const json& s) {
      c.enable_census = s.value("census", c.enable_census);
      c.enable_match = s.value("match", c.enable_match);
      c.enable_boundary_static = s.value("boundary_static", c.enable_boundary_static);
      c.enable_boundary_motion = s.value("boundary_motion", c.enable_boundary_motion);
      c.enable_motion_smooth = s.value("motion_smooth", c.enable_motion_smooth);
      c.enable_prior = s.value("prior", c.enable_prior);
    });
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config: cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_json_text(buffer.str());
}

std::string PipelineConfig::to_json() const {
  json j;
  j["superpixels"] = {{"target", superpixel_target},
                      {"compactness", segmentation.intensity_weight},
                      {"iterations", segmentation.iterations}};
  j["pyramid_levels"] = pyramid_levels;
  j["census"] = {{"sigma", census_sigma},
                 {"huber_k", census_huber_k},
                 {"samples_per_superpixel", census_samples_per_superpixel},
                 {"multiscale", census_multiscale}};
  j["match"] = {{"sigma", match_sigma},
                {"huber_k", match_huber_k},
                {"max_per_superpixel", matches_per_superpixel}};
  j["boundary"] = {{"sigma", boundary_sigma},
                   {"huber_k", boundary_huber_k},
                   {"max_pixels_per_edge", boundary_pixels_per_edge}};
  j["motion_smooth"] = {{"sigma_rot", motion_smooth_sigma_rot},
                        {"sigma_trans", motion_smooth_sigma_trans},
                        {"huber_k", motion_smooth_huber_k}};
  j["prior"] = {{"sigma", prior_sigma}};
  j["lm"] = {{"lambda_init", lm.lambda_init},
             {"lambda_factor", lm.lambda_factor},
             {"lambda_max", lm.lambda_max},
             {"max_iterations", lm.max_iterations},
             {"rel_decrease_tol", lm.rel_decrease_tol}};
  j["stereo_prior"] = {{"max_disparity", stereo.max_disparity}, {"subpixel", stereo.subpixel}};
  j["plane_fit"] = {{"iterations", plane_fit.ransac_iterations},
                    {"inlier_threshold_px", plane_fit.inlier_threshold_px},
                    {"min_inlier_ratio", plane_fit.min_inlier_ratio}};
  j["ransac"] = {{"sigma", ransac.sigma},
                 {"min_inlier_ratio", ransac.min_inlier_ratio},
                 {"max_hypotheses", ransac.max_hypotheses},
                 {"iterations", ransac.iterations},
                 {"claim_fraction", ransac.claim_fraction}};
  j["matcher"] = {{"grid_stride", matcher.grid_stride},
                  {"coarse_search_radius", matcher.coarse_search_radius},
                  {"refine_radius", matcher.refine_radius},
                  {"max_bits", matcher.max_bits}};
  j["assign"] = {{"alpha", assign.alpha},
                 {"beta", assign.beta},
                 {"neighborhood_radius", assign.neighborhood_radius},
                 {"argmax_convention", assign.argmax_convention}};
  j["factors"] = {{"census", enable_census},
                  {"match", enable_match},
                  {"boundary_static", enable_boundary_static},
                  {"boundary_motion", enable_boundary_motion},
                  {"motion_smooth", enable_motion_smooth},
                  {"prior", enable_prior}};
  j["threads"] = threads;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Shared helpers

std::vector<Vec2> subsample_region(const std::vector<int32_t>& region, int width, int max_count) {
  std::vector<Vec2> out;
  if (region.empty() || max_count <= 0) return out;
  const size_t take = std::min<size_t>(max_count, region.size());
  out.reserve(take);
  for (size_t k = 0; k < take; ++k) {
    const int p = region[k * region.size() / take];
    out.emplace_back(p % width, p / width);
  }
  return out;
}

namespace {

std::vector<Vec2> subsample_boundary(const std::vector<Vec2i>& pixels, int max_count) {
  std::vector<Vec2> out;
  if (pixels.empty() || max_count <= 0) return out;
  const size_t take = std::min<size_t>(max_count, pixels.size());
  out.reserve(take);
  for (size_t k = 0; k < take; ++k) {
    const Vec2i p = pixels[k * pixels.size() / take];
    out.emplace_back(p.x(), p.y());
  }
  return out;
}

NoiseModel motion_smooth_noise(const PipelineConfig& c) {
  VecX s(6);
  s << c.motion_smooth_sigma_rot, c.motion_smooth_sigma_rot, c.motion_smooth_sigma_rot,
      c.motion_smooth_sigma_trans, c.motion_smooth_sigma_trans, c.motion_smooth_sigma_trans;
  return NoiseModel::diagonal(s, c.motion_smooth_huber_k);
}

NoiseModel prior_noise(const PipelineConfig& c) {
  // Pure L2 conditioning: the Huber threshold is never reached.
  return NoiseModel::diagonal(VecX::Constant(9, c.prior_sigma), 1e9);
}

struct StageClock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

template <typename Fn>
auto run_stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const SolverFailure& e) {
    throw SolverFailure(name + ": " + e.what());
  } catch (const NoHypothesis&) {
    throw;
  } catch (const Error& e) {
    throw Error(name + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Rasterization

void rasterize(const std::vector<MovingPlane>& planes, const SuperpixelMap& spmap,
               const CameraRig& rig, DisparityMap* d1, DisparityMap* d2, FlowMap* flow) {
  const CameraIntrinsics& intr = rig.intrinsics;
  const double fb = intr.fx * rig.baseline();
  *d1 = DisparityMap(spmap.width, spmap.height);
  *d2 = DisparityMap(spmap.width, spmap.height);
  *flow = FlowMap(spmap.width, spmap.height);

  const Mat3 K_inv = intr.K_inv();
  parallel_for(spmap.count, [&](int sp) {
    const MovingPlane& theta = planes[sp];
    if (!theta.plane.valid()) return;
    Mat3 Hs;
    try {
      Hs = stereo_homography(theta.plane, rig);
    } catch (const DegenerateHomography&) {
      return;
    }
    const Mat3 A = theta.motion.R;
    const Vec3 a = theta.motion.t;
    for (const int p : spmap.regions[sp]) {
      const int x = p % spmap.width;
      const int y = p / spmap.width;
      const Vec3 v = K_inv * Vec3(x, y, 1.0);
      const double rho0 = -theta.plane.n.dot(v);
      if (rho0 <= 1e-9) continue;

      const Vec3 qs = Hs * Vec3(x, y, 1.0);
      if (std::abs(qs.z()) > 1e-12) {
        const double disp = x - qs.x() / qs.z();
        if (disp > 0.0 && disp < spmap.width) d1->at(x, y) = disp;
      }

      const Vec3 y1 = A * v + rho0 * a;   // transferred point, projective scale
      if (y1.z() > 1e-9) {
        const Vec2 q = intr.project(y1);
        flow->set(x, y, q - Vec2(x, y));
        const double z1 = y1.z() / rho0;
        const double disp2 = fb / z1;
        if (disp2 > 0.0 && disp2 < spmap.width) d2->at(x, y) = disp2;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct FactorBuildContext {
  const PipelineConfig& config;
  const CameraRig& rig;
  const SuperpixelMap& spmap;
  const BoundarySet& boundaries;
  const Pyramid* pyr_left0;
  const Pyramid* pyr_right0;
  const Pyramid* pyr_left1;
  const Pyramid* pyr_right1;
  std::vector<std::vector<Vec2>> census_pixels;          // per superpixel
  std::vector<std::vector<Vec2>> stereo_match_pixels;    // per superpixel
  std::vector<std::vector<Vec2>> stereo_match_disp;
  std::vector<std::vector<Vec2>> temporal_match_pixels;  // per superpixel
  std::vector<std::vector<Vec2>> temporal_match_disp;

  int census_levels() const {
    return config.census_multiscale ? config.pyramid_levels : 1;
  }

  void add_census(FactorGraph* g, int var, int sp, const Pyramid* target, const PoseSE3& cam,
                  bool use_motion) const {
    if (!config.enable_census || census_pixels[sp].empty()) return;
    g->factors.push_back(std::make_unique<PhotoCensusFactor>(
        var, census_pixels[sp], pyr_left0, target, cam, rig.intrinsics, use_motion,
        census_levels(), NoiseModel::isotropic(config.census_sigma, config.census_huber_k)));
  }

  void add_stereo_matches(FactorGraph* g, int var, int sp) const {
    if (!config.enable_match || stereo_match_pixels[sp].empty()) return;
    g->factors.push_back(std::make_unique<MatchFactor>(
        var, stereo_match_pixels[sp], stereo_match_disp[sp], rig.stereo_transform, rig.intrinsics,
        false, NoiseModel::isotropic(config.match_sigma, config.match_huber_k)));
  }

  void add_temporal_matches(FactorGraph* g, int var, int sp) const {
    if (!config.enable_match || temporal_match_pixels[sp].empty()) return;
    g->factors.push_back(std::make_unique<MatchFactor>(
        var, temporal_match_pixels[sp], temporal_match_disp[sp], PoseSE3::Identity(),
        rig.intrinsics, true, NoiseModel::isotropic(config.match_sigma, config.match_huber_k)));
  }
};

}  // namespace

SceneFlowResult run_pipeline(const ImageQuad& images, const CameraRig& rig,
                             const PipelineConfig& config) {
  config.validate();
  if (!rig.valid()) throw FormatError("run_pipeline: invalid camera rig");
  const int w = images.left0.width, h = images.left0.height;
  for (const GrayImage* img : {&images.right0, &images.left1, &images.right1}) {
    if (img->width != w || img->height != h) {
      throw DimensionMismatch("run_pipeline: the four images must share dimensions");
    }
  }
  set_worker_threads(config.threads);

  SceneFlowResult result;

  // -------------------------------------------------------------- stage 1
  Pyramid pyr_l0, pyr_r0, pyr_l1, pyr_r1;
  run_stage("initialization", [&]() {
    StageClock clock;
    pyr_l0 = build_pyramid(images.left0, config.pyramid_levels);
    pyr_r0 = build_pyramid(images.right0, config.pyramid_levels);
    pyr_l1 = build_pyramid(images.left1, config.pyramid_levels);
    pyr_r1 = build_pyramid(images.right1, config.pyramid_levels);

    if (!config.superpixels_path.empty()) {
      int lw = 0, lh = 0;
      const auto labels = read_label_png(config.superpixels_path, &lw, &lh);
      if (lw != w || lh != h) {
        throw DimensionMismatch("initialization: superpixel override size mismatch");
      }
      result.superpixels = superpixels_from_labels(w, h, labels);
      result.superpixels_ingested = true;
    } else {
      result.superpixels = segment(images.left0, config.superpixel_target, config.segmentation);
    }
    result.boundaries = extract_boundaries(result.superpixels);

    if (!config.disparity_path.empty()) {
      result.prior_disparity0 = read_disparity_png(config.disparity_path);
      if (result.prior_disparity0.width != w || result.prior_disparity0.height != h) {
        throw DimensionMismatch("initialization: disparity override size mismatch");
      }
      result.disparity_ingested = true;
    } else {
      result.prior_disparity0 = stereo_prior(images.left0, images.right0, config.stereo);
    }
    result.prior_disparity1 = stereo_prior(images.left1, images.right1, config.stereo);

    std::mt19937_64 rng(config.ransac.seed ^ 0x9e3779b97f4a7c15ull);
    result.initial_planes =
        fit_planes(result.prior_disparity0, result.superpixels, rig, config.plane_fit, rng);

    StageTrace trace;
    trace.name = "initialization";
    trace.seconds = clock.seconds();
    trace.note = result.superpixels_ingested ? "superpixels ingested" : "superpixels built-in";
    result.stages.push_back(trace);
    return 0;
  });

  const SuperpixelMap& spmap = result.superpixels;

  FactorBuildContext ctx{config,  rig,      spmap,    result.boundaries,
                         &pyr_l0, &pyr_r0,  &pyr_l1,  &pyr_r1,
                         {},      {},       {},       {},      {}};
  ctx.census_pixels.resize(spmap.count);
  for (int sp = 0; sp < spmap.count; ++sp) {
    ctx.census_pixels[sp] =
        subsample_region(spmap.regions[sp], w, config.census_samples_per_superpixel);
  }
  {
    const SampledMatches samples =
        sample_matches(pyr_l0.levels[0].census, pyr_r0.levels[0].census, result.prior_disparity0,
                       spmap, config.matches_per_superpixel);
    ctx.stereo_match_pixels.resize(spmap.count);
    ctx.stereo_match_disp.resize(spmap.count);
    for (const auto& s : samples.samples) {
      ctx.stereo_match_pixels[s.superpixel].push_back(s.pixel);
      ctx.stereo_match_disp[s.superpixel].push_back(s.displacement);
    }
  }

  // -------------------------------------------------------------- stage 2
  run_stage("planar", [&]() {
    StageClock clock;
    FactorGraph graph;
    graph.variables.reserve(spmap.count);
    for (int sp = 0; sp < spmap.count; ++sp) {
      graph.add_variable(MovingPlane{result.initial_planes[sp].plane, PoseSE3::Identity()},
                         ParamMask::PlaneOnly);
    }
    for (int sp = 0; sp < spmap.count; ++sp) {
      ctx.add_census(&graph, sp, sp, &pyr_r0, rig.stereo_transform, false);
      ctx.add_stereo_matches(&graph, sp, sp);
    }
    if (config.enable_boundary_static) {
      for (const auto& edge : result.boundaries.edges) {
        auto pixels = subsample_boundary(edge.pixels, config.boundary_pixels_per_edge);
        if (pixels.empty()) continue;
        graph.factors.push_back(std::make_unique<BoundaryStaticFactor>(
            edge.i, edge.j, std::move(pixels), rig.intrinsics,
            NoiseModel::isotropic(config.boundary_sigma, config.boundary_huber_k)));
      }
    }
    if (config.enable_prior) {
      for (int sp = 0; sp < spmap.count; ++sp) {
        graph.factors.push_back(
            std::make_unique<PriorFactor>(sp, graph.variables[sp], prior_noise(config)));
      }
    }

    const SolveStats stats = solve_lm(graph, config.lm);
    result.planes.resize(spmap.count);
    for (int sp = 0; sp < spmap.count; ++sp) {
      result.planes[sp] = graph.variables[sp];
    }

    StageTrace trace;
    trace.name = "planar";
    trace.seconds = clock.seconds();
    trace.initial_cost = stats.initial_cost;
    trace.final_cost = stats.final_cost;
    trace.iterations = stats.iterations;
    trace.note = stats.stop_reason;
    result.stages.push_back(trace);
    return 0;
  });

  // -------------------------------------------------------------- stage 3
  bool static_fallback = false;
  run_stage("hypotheses", [&]() {
    StageClock clock;
    MatchField matches;
    if (!config.matches_path.empty()) {
      matches = load_matches(config.matches_path, w, h);
      result.matches_ingested = true;
    } else {
      matches = builtin_matches(pyr_l0, pyr_l1, config.matcher);
    }

    std::vector<PlaneFit> fits(spmap.count);
    for (int sp = 0; sp < spmap.count; ++sp) {
      fits[sp] = {result.planes[sp].plane, result.initial_planes[sp].confidence};
    }
    result.lifted_matches = lift_matches(matches, fits, spmap, rig, &result.prior_disparity1);

    StageTrace trace;
    trace.name = "hypotheses";
    try {
      result.hypotheses = ransac_hypotheses(result.lifted_matches, spmap, rig, config.ransac);
    } catch (const NoHypothesis&) {
      static_fallback = true;
      MotionHypothesis identity;
      identity.is_camera = true;
      identity.inlier_ratio = 0.0;
      result.hypotheses = {identity};
      trace.note = "no hypothesis cleared the inlier ratio; static-scene fallback";
    }
    result.camera_motion = result.hypotheses.front().motion;
    trace.seconds = clock.seconds();
    if (trace.note.empty()) {
      trace.note = std::to_string(result.hypotheses.size()) + " hypotheses";
    }
    result.stages.push_back(trace);
    return 0;
  });

  // Temporal match payloads, grouped per superpixel.
  ctx.temporal_match_pixels.resize(spmap.count);
  ctx.temporal_match_disp.resize(spmap.count);
  {
    std::vector<std::vector<int>> per_sp(spmap.count);
    for (size_t k = 0; k < result.lifted_matches.size(); ++k) {
      per_sp[result.lifted_matches[k].superpixel].push_back(static_cast<int>(k));
    }
    const CameraIntrinsics& intr = rig.intrinsics;
    for (int sp = 0; sp < spmap.count; ++sp) {
      const auto& list = per_sp[sp];
      const size_t take = std::min<size_t>(config.matches_per_superpixel, list.size());
      for (size_t k = 0; k < take; ++k) {
        const auto& c = result.lifted_matches[list[k * list.size() / take]];
        const Vec2 p0 = intr.project(c.x0);
        ctx.temporal_match_pixels[sp].push_back(p0);
        ctx.temporal_match_disp[sp].push_back(c.p1 - p0);
      }
    }
  }

  // -------------------------------------------------------------- stage 4
  run_stage("local_motion", [&]() {
    StageClock clock;
    if (static_fallback) {
      result.assignment.label.assign(spmap.count, 0);
      result.assignment.energies.assign(spmap.count, Vec3::Zero());
    } else {
      std::vector<PlaneFit> fits(spmap.count);
      for (int sp = 0; sp < spmap.count; ++sp) {
        fits[sp] = {result.planes[sp].plane, result.initial_planes[sp].confidence};
      }
      result.assignment =
          assign_labels(result.hypotheses, fits, images.left0, images.left1,
                        result.prior_disparity0, result.prior_disparity1, result.lifted_matches,
                        spmap, rig, config.assign);
    }
    for (int sp = 0; sp < spmap.count; ++sp) {
      result.planes[sp].motion = result.hypotheses[result.assignment.label[sp]].motion;
    }

    // Independent graph per hypothesis group, motion parameters only.
    std::vector<std::vector<int>> groups(result.hypotheses.size());
    for (int sp = 0; sp < spmap.count; ++sp) {
      groups[result.assignment.label[sp]].push_back(sp);
    }

    StageTrace trace;
    trace.name = "local_motion";
    std::vector<SolveStats> group_stats(groups.size());

    for (size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& members = groups[gi];
      if (members.empty()) continue;
      std::vector<int> var_of(spmap.count, -1);
      FactorGraph graph;
      for (size_t m = 0; m < members.size(); ++m) {
        var_of[members[m]] = graph.add_variable(result.planes[members[m]], ParamMask::MotionOnly);
      }
      for (const int sp : members) {
        ctx.add_census(&graph, var_of[sp], sp, &pyr_l1, PoseSE3::Identity(), true);
        ctx.add_temporal_matches(&graph, var_of[sp], sp);
      }
      for (const auto& edge : result.boundaries.edges) {
        if (var_of[edge.i] < 0 || var_of[edge.j] < 0) continue;
        if (config.enable_boundary_motion) {
          auto pixels = subsample_boundary(edge.pixels, config.boundary_pixels_per_edge);
          if (!pixels.empty()) {
            graph.factors.push_back(std::make_unique<BoundaryMotionFactor>(
                var_of[edge.i], var_of[edge.j], std::move(pixels), PoseSE3::Identity(),
                rig.intrinsics,
                NoiseModel::isotropic(config.boundary_sigma, config.boundary_huber_k)));
          }
        }
        if (config.enable_motion_smooth) {
          graph.factors.push_back(std::make_unique<MotionSmoothFactor>(
              var_of[edge.i], var_of[edge.j], motion_smooth_noise(config)));
        }
      }
      if (config.enable_prior) {
        for (size_t m = 0; m < members.size(); ++m) {
          graph.factors.push_back(std::make_unique<PriorFactor>(
              static_cast<int>(m), graph.variables[m], prior_noise(config)));
        }
      }
      group_stats[gi] = solve_lm(graph, config.lm);
      for (size_t m = 0; m < members.size(); ++m) {
        result.planes[members[m]].motion = graph.variables[m].motion;
      }
    }

    for (const auto& s : group_stats) {
      trace.initial_cost += s.initial_cost;
      trace.final_cost += s.final_cost;
      trace.iterations = std::max(trace.iterations, s.iterations);
    }
    trace.seconds = clock.seconds();
    trace.note = std::to_string(groups.size()) + " motion groups";
    result.stages.push_back(trace);
    return 0;
  });

  // -------------------------------------------------------------- stage 5
  run_stage("global", [&]() {
    StageClock clock;
    FactorGraph graph;
    for (int sp = 0; sp < spmap.count; ++sp) {
      graph.add_variable(result.planes[sp], ParamMask::Both);
    }
    for (int sp = 0; sp < spmap.count; ++sp) {
      ctx.add_census(&graph, sp, sp, &pyr_r0, rig.stereo_transform, false);
      ctx.add_census(&graph, sp, sp, &pyr_l1, PoseSE3::Identity(), true);
      ctx.add_census(&graph, sp, sp, &pyr_r1, rig.stereo_transform, true);
      ctx.add_stereo_matches(&graph, sp, sp);
      ctx.add_temporal_matches(&graph, sp, sp);
    }
    for (const auto& edge : result.boundaries.edges) {
      auto pixels = subsample_boundary(edge.pixels, config.boundary_pixels_per_edge);
      if (pixels.empty()) continue;
      if (config.enable_boundary_static) {
        graph.factors.push_back(std::make_unique<BoundaryStaticFactor>(
            edge.i, edge.j, pixels, rig.intrinsics,
            NoiseModel::isotropic(config.boundary_sigma, config.boundary_huber_k)));
      }
      if (config.enable_boundary_motion) {
        graph.factors.push_back(std::make_unique<BoundaryMotionFactor>(
            edge.i, edge.j, std::move(pixels), PoseSE3::Identity(), rig.intrinsics,
            NoiseModel::isotropic(config.boundary_sigma, config.boundary_huber_k)));
      }
      if (config.enable_motion_smooth) {
        graph.factors.push_back(std::make_unique<MotionSmoothFactor>(edge.i, edge.j,
                                                                     motion_smooth_noise(config)));
      }
    }
    if (config.enable_prior) {
      for (int sp = 0; sp < spmap.count; ++sp) {
        graph.factors.push_back(
            std::make_unique<PriorFactor>(sp, graph.variables[sp], prior_noise(config)));
      }
    }

    const SolveStats stats = solve_lm(graph, config.lm);
    for (int sp = 0; sp < spmap.count; ++sp) {
      result.planes[sp] = graph.variables[sp];
    }

    StageTrace trace;
    trace.name = "global";
    trace.seconds = clock.seconds();
    trace.initial_cost = stats.initial_cost;
    trace.final_cost = stats.final_cost;
    trace.iterations = stats.iterations;
    trace.note = stats.stop_reason;
    result.stages.push_back(trace);
    return 0;
  });

  rasterize(result.planes, spmap, rig, &result.d1, &result.d2, &result.flow);
  return result;
}

}  // namespace sflow
