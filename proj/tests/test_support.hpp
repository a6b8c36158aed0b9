#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "sflow/factor_graph.hpp"
#include "sflow/geometry.hpp"

namespace sflow::testing {

// ---------------------------------------------------------------------------
// Random feasible instances

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vec3 v(n(rng), n(rng), n(rng));
  while (v.norm() < 1e-6) v = Vec3(n(rng), n(rng), n(rng));
  return v.normalized();
}

inline Plane random_plane(std::mt19937_64& rng, double max_tilt = 0.4) {
  std::uniform_real_distribution<double> depth(4.0, 15.0);
  std::uniform_real_distribution<double> tilt(-max_tilt, max_tilt);
  const Mat3 R = so3_exp(Vec3(tilt(rng), tilt(rng), 0.0));
  const Vec3 dir = R * Vec3(0, 0, 1);
  const double z0 = depth(rng);
  return Plane{-dir / (dir.z() * z0)};
}

inline PoseSE3 random_pose(std::mt19937_64& rng, double max_angle = 0.2, double max_trans = 0.5) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vec3 axis = random_unit(rng);
  const double angle = max_angle * u(rng);
  PoseSE3 out;
  out.R = so3_exp(axis * angle);
  out.t = max_trans * u(rng) * random_unit(rng);
  return out;
}

inline Vec6 random_twist(std::mt19937_64& rng, double max_angle, double max_trans) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec6 xi;
  xi.head<3>() = random_unit(rng) * max_angle * u(rng);
  xi.tail<3>() = random_unit(rng) * max_trans * u(rng);
  return xi;
}

inline CameraRig random_rig(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> f(300.0, 800.0);
  std::uniform_real_distribution<double> c(-40.0, 40.0);
  std::uniform_real_distribution<double> b(0.2, 1.0);
  return CameraRig::rectified({f(rng), f(rng), 320.0 + c(rng), 240.0 + c(rng)}, b(rng));
}

// ---------------------------------------------------------------------------
// Independent oracles

/// Transfers a pixel through back-projection, the two rigid transforms, and
/// re-projection. No homography involved.
inline Vec2 project_through_plane(const Plane& plane, const PoseSE3& motion, const PoseSE3& cam,
                                  const CameraIntrinsics& intr, const Vec2& pixel) {
  const Vec3 ray = intr.ray(pixel);
  const double inv_z = -plane.n.dot(ray);
  const Vec3 x0 = ray / inv_z;
  const Vec3 y = cam * (motion * x0);
  return intr.project(y);
}

/// Dense 4x4 matrix exponential by scaling-and-squaring plus Taylor.
inline Mat4 matrix_exp(Mat4 A) {
  int squarings = 0;
  double norm = A.cwiseAbs().sum();
  while (norm > 0.5) {
    A *= 0.5;
    norm *= 0.5;
    ++squarings;
  }
  Mat4 sum = Mat4::Identity();
  Mat4 term = Mat4::Identity();
  for (int k = 1; k <= 24; ++k) {
    term = term * A / double(k);
    sum += term;
  }
  for (int i = 0; i < squarings; ++i) sum = sum * sum;
  return sum;
}

inline Mat4 twist_matrix(const Vec6& xi) {
  Mat4 m = Mat4::Zero();
  m.topLeftCorner<3, 3>() = so3_hat(xi.head<3>());
  m.topRightCorner<3, 1>() = xi.tail<3>();
  return m;
}

/// Scalar reference of the Huber rho and IRLS weight.
inline double huber_rho_ref(double e, double k) {
  return e <= k ? 0.5 * e * e : k * e - 0.5 * k * k;
}
inline double huber_weight_ref(double e, double k) { return (e <= k || e == 0.0) ? 1.0 : k / e; }

// ---------------------------------------------------------------------------
// Finite-difference Jacobian harness

struct FdOptions {
  double step = 1e-5;
  // Rows whose finite difference straddles a census gridline are skipped when
  // the factor provides warped coordinates; harmless for smooth factors.
  double denom_floor = 1e-6;
};

struct FdResult {
  double max_rel_err = 0.0;
  int rows_checked = 0;
};

/// Central finite differences of a factor's residual over the 9-dim tangent
/// of each variable, compared to the analytic Jacobians row by row. Rows that
/// are inactive (identically zero residual and Jacobian) are skipped;
/// `row_ok(i)` can veto rows near census gridlines.
inline FdResult fd_check_factor(const Factor& f, const std::vector<MovingPlane>& vars,
                                const FdOptions& opt = {},
                                const std::function<bool(int)>& row_ok = nullptr) {
  VecX r0;
  MatX J0, J1;
  f.evaluate(vars, &r0, &J0, f.arity() == 2 ? &J1 : nullptr);
  const int rows = static_cast<int>(r0.size());

  std::vector<MatX> fd(f.arity(), MatX::Zero(rows, 9));
  for (int v = 0; v < f.arity(); ++v) {
    for (int c = 0; c < 9; ++c) {
      TangentDelta dp, dm;
      Vec9 e = Vec9::Zero();
      e(c) = opt.step;
      dp.dn = e.head<3>();
      dp.dx = e.tail<6>();
      e(c) = -opt.step;
      dm.dn = e.head<3>();
      dm.dx = e.tail<6>();

      std::vector<MovingPlane> plus = vars, minus = vars;
      plus[f.var(v)] = retract(vars[f.var(v)], dp);
      minus[f.var(v)] = retract(vars[f.var(v)], dm);
      VecX rp, rm;
      f.evaluate(plus, &rp, nullptr, nullptr);
      f.evaluate(minus, &rm, nullptr, nullptr);
      fd[v].col(c) = (rp - rm) / (2.0 * opt.step);
    }
  }

  FdResult out;
  const std::vector<const MatX*> analytic = {&J0, &J1};
  for (int i = 0; i < rows; ++i) {
    if (row_ok && !row_ok(i)) continue;
    double scale = opt.denom_floor;
    for (int v = 0; v < f.arity(); ++v) {
      scale = std::max(scale, fd[v].row(i).cwiseAbs().maxCoeff());
    }
    bool any = scale > opt.denom_floor;
    for (int v = 0; v < f.arity() && !any; ++v) {
      any = analytic[v]->row(i).cwiseAbs().maxCoeff() > opt.denom_floor;
    }
    if (!any) continue;   // inactive row
    ++out.rows_checked;
    for (int v = 0; v < f.arity(); ++v) {
      const double err = (analytic[v]->row(i) - fd[v].row(i)).cwiseAbs().maxCoeff();
      out.max_rel_err = std::max(out.max_rel_err, err / scale);
    }
  }
  return out;
}

}  // namespace sflow::testing
