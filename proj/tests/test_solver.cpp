#include <doctest.h>

#include <Eigen/Dense>
#include <random>

#include "sflow/factor_graph.hpp"
#include "sflow/pipeline.hpp"
#include "sflow/synthetic.hpp"
#include "test_support.hpp"

using namespace sflow;
namespace tt = sflow::testing;

namespace {

std::vector<Vec2> grid_pixels(int x0, int y0, int x1, int y1, int step) {
  std::vector<Vec2> out;
  for (int y = y0; y < y1; y += step) {
    for (int x = x0; x < x1; x += step) out.emplace_back(x, y);
  }
  return out;
}

}  // namespace

TEST_CASE("a zero-residual graph converges in one iteration at cost zero") {
  MovingPlane anchor{Plane::frontal(8.0), PoseSE3::Identity()};
  FactorGraph graph;
  graph.add_variable(anchor, ParamMask::Both);
  graph.factors.push_back(
      std::make_unique<PriorFactor>(0, anchor, NoiseModel::diagonal(VecX::Constant(9, 1.0), 1e9)));
  const SolveStats stats = solve_lm(graph, LMConfig{});
  CHECK(stats.iterations == 1);
  CHECK(stats.final_cost == 0.0);
}

TEST_CASE("a pure-quadratic graph reaches the closed-form optimum in two iterations") {
  // Plane-only variables with linear boundary and prior factors: the problem
  // is an exact linear least squares with a dense closed form.
  std::mt19937_64 rng(3);
  const CameraIntrinsics intr{400, 420, 320, 240};
  FactorGraph graph;
  std::vector<MovingPlane> anchors;
  for (int v = 0; v < 4; ++v) {
    anchors.push_back({tt::random_plane(rng), PoseSE3::Identity()});
    graph.add_variable({tt::random_plane(rng), PoseSE3::Identity()}, ParamMask::PlaneOnly);
  }
  const NoiseModel bnoise = NoiseModel::isotropic(0.01, 1e9);
  const NoiseModel pnoise = NoiseModel::diagonal(VecX::Constant(9, 5.0), 1e9);
  graph.factors.push_back(std::make_unique<BoundaryStaticFactor>(
      0, 1, grid_pixels(100, 80, 560, 420, 70), intr, bnoise));
  graph.factors.push_back(std::make_unique<BoundaryStaticFactor>(
      1, 2, grid_pixels(60, 120, 600, 400, 90), intr, bnoise));
  graph.factors.push_back(std::make_unique<BoundaryStaticFactor>(
      2, 3, grid_pixels(150, 60, 500, 460, 80), intr, bnoise));
  for (int v = 0; v < 4; ++v) {
    graph.factors.push_back(std::make_unique<PriorFactor>(v, anchors[v], pnoise));
  }

  // Closed form from the (exactly linear) whitened system at the start.
  const SparseSystem sys = linearize(graph);
  MatX J = MatX::Zero(0, sys.num_cols);
  VecX r(0);
  for (const auto& row : sys.rows) {
    const int base = static_cast<int>(J.rows());
    J.conservativeResize(base + row.residual.size(), Eigen::NoChange);
    J.bottomRows(row.residual.size()).setZero();
    r.conservativeResize(base + row.residual.size());
    r.tail(row.residual.size()) = row.residual;
    for (const auto& e : row.entries) {
      J.block(base, e.col_offset, row.residual.size(), e.J.cols()) = e.J;
    }
  }
  const VecX delta_star = (J.transpose() * J).ldlt().solve(-J.transpose() * r);

  std::vector<Vec3> optimum(4);
  for (int v = 0; v < 4; ++v) {
    optimum[v] = graph.variables[v].plane.n + delta_star.segment<3>(sys.var_col_offset[v]);
  }

  LMConfig cfg;
  cfg.lambda_init = 1e-10;   // quadratic problem, no damping needed
  cfg.max_iterations = 2;
  const SolveStats stats = solve_lm(graph, cfg);
  CHECK(stats.iterations <= 2);
  for (int v = 0; v < 4; ++v) {
    CHECK((graph.variables[v].plane.n - optimum[v]).norm() < 1e-8);
  }
  for (size_t k = 1; k < stats.accepted_costs.size(); ++k) {
    CHECK(stats.accepted_costs[k] <= stats.accepted_costs[k - 1]);
  }
}

TEST_CASE("accepted costs never increase on a nonlinear problem") {
  std::mt19937_64 rng(5);
  FactorGraph graph;
  for (int v = 0; v < 3; ++v) {
    graph.add_variable({tt::random_plane(rng), tt::random_pose(rng, 0.4, 0.8)}, ParamMask::Both);
  }
  graph.factors.push_back(
      std::make_unique<MotionSmoothFactor>(0, 1, NoiseModel::isotropic(0.05, 1.0)));
  graph.factors.push_back(
      std::make_unique<MotionSmoothFactor>(1, 2, NoiseModel::isotropic(0.05, 1.0)));
  const CameraIntrinsics intr{300, 300, 320, 240};
  graph.factors.push_back(std::make_unique<BoundaryMotionFactor>(
      0, 2, grid_pixels(100, 100, 540, 380, 60), PoseSE3::Identity(), intr,
      NoiseModel::isotropic(0.01, 1.0)));
  for (int v = 0; v < 3; ++v) {
    graph.factors.push_back(std::make_unique<PriorFactor>(
        v, MovingPlane{tt::random_plane(rng), tt::random_pose(rng, 0.4, 0.8)},
        NoiseModel::diagonal(VecX::Constant(9, 2.0), 1e9)));
  }
  const SolveStats stats = solve_lm(graph, LMConfig{});
  REQUIRE(stats.accepted_costs.size() > 1);
  for (size_t k = 1; k < stats.accepted_costs.size(); ++k) {
    CHECK(stats.accepted_costs[k] <= stats.accepted_costs[k - 1]);
  }
  CHECK(stats.final_cost < stats.initial_cost);
}

TEST_CASE("stereo census and match factors recover a perturbed plane") {
  SceneSpec spec;
  spec.width = 200;
  spec.height = 160;
  spec.rig = CameraRig::rectified({250, 250, 100, 80}, 0.4);
  spec.texture_wavelength = 12.0;
  spec.texture_octaves = 2;
  spec.texture_contrast = 0.9;
  PlaneSpecEntry entry;
  entry.x0 = 0;
  entry.y0 = 0;
  entry.x1 = spec.width;
  entry.y1 = spec.height;
  entry.plane.n = Vec3(0.006, -0.004, -0.15);
  spec.planes.push_back(entry);
  const SyntheticScene scene = generate_synthetic(spec, 11);

  const Pyramid pyr_l = build_pyramid(scene.left0, 3);
  const Pyramid pyr_r = build_pyramid(scene.right0, 3);

  FactorGraph graph;
  Plane start = entry.plane;
  start.n *= 1.10;   // 10% off
  graph.add_variable({start, PoseSE3::Identity()}, ParamMask::PlaneOnly);
  graph.factors.push_back(std::make_unique<PhotoCensusFactor>(
      0, grid_pixels(15, 12, 185, 148, 7), &pyr_l, &pyr_r, spec.rig.stereo_transform,
      spec.rig.intrinsics, false, 3, NoiseModel::isotropic(8.0, 1.5)));

  // Matches from the exact ground-truth disparity.
  std::vector<Vec2> mpx;
  std::vector<Vec2> mdisp;
  for (int y = 20; y < 150; y += 26) {
    for (int x = 20; x < 190; x += 26) {
      mpx.emplace_back(x, y);
      mdisp.emplace_back(-scene.gt_d1.at(x, y), 0.0);
    }
  }
  graph.factors.push_back(std::make_unique<MatchFactor>(0, mpx, mdisp, spec.rig.stereo_transform,
                                                        spec.rig.intrinsics, false,
                                                        NoiseModel::isotropic(1.0, 2.0)));

  const SolveStats stats = solve_lm(graph, LMConfig{});
  CHECK(stats.final_cost < stats.initial_cost);

  const Vec2 center(spec.width / 2.0, spec.height / 2.0);
  const double rho_true = inverse_depth(entry.plane, center, spec.rig.intrinsics);
  const double rho_est = inverse_depth(graph.variables[0].plane, center, spec.rig.intrinsics);
  CHECK(std::abs(rho_est - rho_true) / rho_true < 0.01);
}

TEST_CASE("the solver reports failure when the system never factorizes") {
  // A NaN displacement poisons the gradient; every damped solve fails and the
  // solver must give up at lambda_max.
  FactorGraph graph;
  graph.add_variable({Plane::frontal(10.0), PoseSE3::Identity()}, ParamMask::PlaneOnly);
  const CameraIntrinsics intr{100, 100, 50, 50};
  graph.factors.push_back(std::make_unique<MatchFactor>(
      0, std::vector<Vec2>{Vec2(30, 30)},
      std::vector<Vec2>{Vec2(std::nan(""), 0.0)}, PoseSE3{Mat3::Identity(), Vec3(-0.5, 0, 0)},
      intr, false, NoiseModel::isotropic(1.0, 2.0)));
  LMConfig cfg;
  cfg.lambda_max = 1e4;
  CHECK_THROWS_AS(solve_lm(graph, cfg), SolverFailure);
}

TEST_CASE("masked-out parameters never move") {
  std::mt19937_64 rng(7);
  FactorGraph graph;
  const MovingPlane init{tt::random_plane(rng), tt::random_pose(rng, 0.2, 0.4)};
  graph.add_variable(init, ParamMask::PlaneOnly);
  graph.factors.push_back(std::make_unique<PriorFactor>(
      0, MovingPlane{tt::random_plane(rng), tt::random_pose(rng, 0.2, 0.4)},
      NoiseModel::diagonal(VecX::Constant(9, 1.0), 1e9)));
  solve_lm(graph, LMConfig{});
  CHECK((graph.variables[0].motion.R - init.motion.R).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((graph.variables[0].motion.t - init.motion.t).norm() < 1e-12);
  CHECK((graph.variables[0].plane.n - init.plane.n).norm() > 0.0);
}
