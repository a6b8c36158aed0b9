#include "sflow/factor_graph.hpp"

#include <Eigen/SparseCholesky>
#include <cmath>
#include <iostream>

namespace sflow {

VecX NoiseModel::whiten(const VecX& r) const {
  VecX out(r.size());
  if (sigmas.size() == 1) {
    out = r / sigmas(0);
  } else {
    out = r.cwiseQuotient(sigmas);
  }
  return out;
}

RobustResult robust_whiten(const VecX& residual, const NoiseModel& noise) {
  RobustResult out;
  out.whitened = noise.whiten(residual);
  const double e = out.whitened.norm();
  out.weight = (e <= noise.huber_k || e == 0.0) ? 1.0 : noise.huber_k / e;
  out.whitened *= std::sqrt(out.weight);
  return out;
}

double robust_cost(const VecX& residual, const NoiseModel& noise) {
  const double e = noise.whiten(residual).norm();
  const double k = noise.huber_k;
  return e <= k ? 0.5 * e * e : k * e - 0.5 * k * k;
}

// ---------------------------------------------------------------------------
// Warp chain shared by the photo and match factors.
//
// v = K^-1 [u v 1], rho0 = -n.v, [A|a] = cam * motion; the transferred point
// up to projective scale is y = A v + rho0 a and the observed pixel is the
// pinhole projection of y.
namespace {

struct WarpContext {
  Mat3 A;
  Vec3 a;
  bool use_motion;
  Mat3 K_inv;
  CameraIntrinsics intr;

  static WarpContext make(const MovingPlane& p, const PoseSE3& cam, const CameraIntrinsics& intr,
                          bool use_motion) {
    WarpContext c;
    c.use_motion = use_motion;
    if (use_motion) {
      c.A = cam.R * p.motion.R;
      c.a = cam.R * p.motion.t + cam.t;
    } else {
      c.A = cam.R;
      c.a = cam.t;
    }
    c.K_inv = intr.K_inv();
    c.intr = intr;
    // Rank check of the induced homography K (A - a n^T) K^-1.
    if (std::abs((c.A - c.a * p.plane.n.transpose()).determinant()) < 1e-12) {
      throw DegenerateHomography("factor: plane induces a degenerate homography");
    }
    return c;
  }

  // Warped pixel and its 2x9 derivative w.r.t. [dn; domega; dv]. Returns
  // false when the transferred point falls on the camera plane.
  bool warp(const Vec3& n, const Vec2& pixel, Vec2* q, Eigen::Matrix<double, 2, 9>* J) const {
    const Vec3 v = K_inv * Vec3(pixel.x(), pixel.y(), 1.0);
    const double rho0 = -n.dot(v);
    const Vec3 y = A * v + rho0 * a;
    if (std::abs(y.z()) < 1e-12) {
      return false;
    }
    *q = intr.project(y);
    if (J != nullptr) {
      Eigen::Matrix<double, 2, 3> dq_dy;
      const double iz = 1.0 / y.z();
      dq_dy << intr.fx * iz, 0, -intr.fx * y.x() * iz * iz, 0, intr.fy * iz,
          -intr.fy * y.y() * iz * iz;
      J->setZero();
      J->block<2, 3>(0, 0) = dq_dy * (-a * v.transpose());
      if (use_motion) {
        J->block<2, 3>(0, 3) = dq_dy * (-A * so3_hat(v));
        J->block<2, 3>(0, 6) = dq_dy * (rho0 * A);
      }
    }
    return true;
  }

  // Inverse depth of the transferred point and its 1x9 derivative.
  bool transferred_inverse_depth(const Vec3& n, const Vec2& pixel, double* rho,
                                 Eigen::Matrix<double, 1, 9>* J) const {
    const Vec3 v = K_inv * Vec3(pixel.x(), pixel.y(), 1.0);
    const double rho0 = -n.dot(v);
    const double alpha = A.row(2) * v;
    const double beta = a.z();
    const double denom = alpha + rho0 * beta;
    if (std::abs(denom) < 1e-12) {
      return false;
    }
    *rho = rho0 / denom;
    if (J != nullptr) {
      J->setZero();
      const double d2 = denom * denom;
      J->block<1, 3>(0, 0) = -(alpha / d2) * v.transpose();
      if (use_motion) {
        J->block<1, 3>(0, 3) = (rho0 / d2) * (A * so3_hat(v)).row(2);
        J->block<1, 3>(0, 6) = -(rho0 * rho0 / d2) * A.row(2);
      }
    }
    return true;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// PhotoCensusFactor

PhotoCensusFactor::PhotoCensusFactor(int var, std::vector<Vec2> pixels, const Pyramid* reference,
                                     const Pyramid* target, const PoseSE3& cam_transform,
                                     const CameraIntrinsics& intr, bool use_motion, int levels,
                                     NoiseModel noise)
    : Factor(FactorKind::PhotoCensus, {var, -1}, 1, std::move(noise)),
      pixels_(std::move(pixels)),
      target_(target),
      cam_(cam_transform),
      intr_(intr),
      use_motion_(use_motion),
      levels_(std::min({levels, reference->depth(), target->depth()})) {
  // Reference descriptors are re-extracted per level at the scaled,
  // rounded reference pixel; the target cost is then sampled relative to
  // that anchor so an identity warp scores exactly zero at every level.
  ref_desc_.assign(size_t(levels_) * pixels_.size(), 0);
  ref_valid_.assign(size_t(levels_) * pixels_.size(), 0);
  ref_anchor_.assign(size_t(levels_) * pixels_.size(), Vec2::Zero());
  for (int l = 0; l < levels_; ++l) {
    const CensusImage& census = reference->levels[l].census;
    for (size_t k = 0; k < pixels_.size(); ++k) {
      const Vec2 pl = to_level(pixels_[k], l);
      const int x = static_cast<int>(std::lround(pl.x()));
      const int y = static_cast<int>(std::lround(pl.y()));
      if (census.valid_at(x, y)) {
        ref_desc_[size_t(l) * pixels_.size() + k] = census.at(x, y);
        ref_valid_[size_t(l) * pixels_.size() + k] = 1;
        ref_anchor_[size_t(l) * pixels_.size() + k] = Vec2(x, y);
      }
    }
  }
}

void PhotoCensusFactor::evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                                 MatX* J1) const {
  (void)J1;
  const MovingPlane& theta = vars[vars_[0]];
  const WarpContext ctx = WarpContext::make(theta, cam_, intr_, use_motion_);

  residual->setZero(residual_dim());
  if (J0 != nullptr) J0->setZero(residual_dim(), 9);

  for (size_t k = 0; k < pixels_.size(); ++k) {
    Vec2 q;
    Eigen::Matrix<double, 2, 9> dq;
    if (!ctx.warp(theta.plane.n, pixels_[k], &q, J0 != nullptr ? &dq : nullptr)) {
      continue;
    }
    for (int l = 0; l < levels_; ++l) {
      const size_t ref_idx = size_t(l) * pixels_.size() + k;
      if (!ref_valid_[ref_idx]) continue;
      const Vec2 at = ref_anchor_[ref_idx] + (q - pixels_[k]) / double(1u << l);
      const auto sample =
          interpolated_census_cost(target_->levels[l].census, at, ref_desc_[ref_idx]);
      if (!sample) continue;
      const int row = l * static_cast<int>(pixels_.size()) + static_cast<int>(k);
      (*residual)(row) = sample->cost;
      if (J0 != nullptr) {
        const double scale = 1.0 / double(1u << l);
        J0->row(row) = (sample->gradient.transpose() * scale) * dq;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// MatchFactor

MatchFactor::MatchFactor(int var, std::vector<Vec2> pixels, std::vector<Vec2> displacements,
                         const PoseSE3& cam_transform, const CameraIntrinsics& intr,
                         bool use_motion, NoiseModel noise)
    : Factor(FactorKind::Match, {var, -1}, 1, std::move(noise)),
      pixels_(std::move(pixels)),
      displacements_(std::move(displacements)),
      cam_(cam_transform),
      intr_(intr),
      use_motion_(use_motion) {}

void MatchFactor::evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                           MatX* J1) const {
  (void)J1;
  const MovingPlane& theta = vars[vars_[0]];
  const WarpContext ctx = WarpContext::make(theta, cam_, intr_, use_motion_);

  residual->setZero(residual_dim());
  if (J0 != nullptr) J0->setZero(residual_dim(), 9);

  for (size_t k = 0; k < pixels_.size(); ++k) {
    Vec2 q;
    Eigen::Matrix<double, 2, 9> dq;
    if (!ctx.warp(theta.plane.n, pixels_[k], &q, J0 != nullptr ? &dq : nullptr)) {
      continue;
    }
    residual->segment<2>(2 * k) = pixels_[k] + displacements_[k] - q;
    if (J0 != nullptr) {
      J0->block<2, 9>(2 * k, 0) = -dq;
    }
  }
}

// ---------------------------------------------------------------------------
// BoundaryStaticFactor

BoundaryStaticFactor::BoundaryStaticFactor(int var_i, int var_j, std::vector<Vec2> boundary_pixels,
                                           const CameraIntrinsics& intr, NoiseModel noise)
    : Factor(FactorKind::BoundaryStatic, {var_i, var_j}, 2, std::move(noise)),
      pixels_(std::move(boundary_pixels)),
      intr_(intr) {}

void BoundaryStaticFactor::evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                                    MatX* J1) const {
  const Vec3& ni = vars[vars_[0]].plane.n;
  const Vec3& nj = vars[vars_[1]].plane.n;
  residual->setZero(residual_dim());
  if (J0 != nullptr) J0->setZero(residual_dim(), 9);
  if (J1 != nullptr) J1->setZero(residual_dim(), 9);

  const Mat3 K_inv = intr_.K_inv();
  for (size_t k = 0; k < pixels_.size(); ++k) {
    const Vec3 v = K_inv * Vec3(pixels_[k].x(), pixels_[k].y(), 1.0);
    (*residual)(k) = -(ni - nj).dot(v);
    if (J0 != nullptr) J0->block<1, 3>(k, 0) = -v.transpose();
    if (J1 != nullptr) J1->block<1, 3>(k, 0) = v.transpose();
  }
}

// ---------------------------------------------------------------------------
// BoundaryMotionFactor

BoundaryMotionFactor::BoundaryMotionFactor(int var_i, int var_j, std::vector<Vec2> boundary_pixels,
                                           const PoseSE3& cam_transform,
                                           const CameraIntrinsics& intr, NoiseModel noise)
    : Factor(FactorKind::BoundaryMotion, {var_i, var_j}, 2, std::move(noise)),
      pixels_(std::move(boundary_pixels)),
      cam_(cam_transform),
      intr_(intr) {}

void BoundaryMotionFactor::evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                                    MatX* J1) const {
  const MovingPlane& ti = vars[vars_[0]];
  const MovingPlane& tj = vars[vars_[1]];
  const WarpContext ci = WarpContext::make(ti, cam_, intr_, true);
  const WarpContext cj = WarpContext::make(tj, cam_, intr_, true);

  residual->setZero(residual_dim());
  if (J0 != nullptr) J0->setZero(residual_dim(), 9);
  if (J1 != nullptr) J1->setZero(residual_dim(), 9);

  for (size_t k = 0; k < pixels_.size(); ++k) {
    double rho_i, rho_j;
    Eigen::Matrix<double, 1, 9> di, dj;
    if (!ci.transferred_inverse_depth(ti.plane.n, pixels_[k], &rho_i, J0 ? &di : nullptr) ||
        !cj.transferred_inverse_depth(tj.plane.n, pixels_[k], &rho_j, J1 ? &dj : nullptr)) {
      continue;
    }
    (*residual)(k) = rho_i - rho_j;
    if (J0 != nullptr) J0->row(k) = di;
    if (J1 != nullptr) J1->row(k) = -dj;
  }
}

// ---------------------------------------------------------------------------
// MotionSmoothFactor

MotionSmoothFactor::MotionSmoothFactor(int var_i, int var_j, NoiseModel noise)
    : Factor(FactorKind::MotionSmooth, {var_i, var_j}, 2, std::move(noise)) {}

void MotionSmoothFactor::evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                                  MatX* J1) const {
  const PoseSE3& xi = vars[vars_[0]].motion;
  const PoseSE3& xj = vars[vars_[1]].motion;
  const Vec6 r = se3_log(xi.inverse() * xj);
  residual->resize(6);
  *residual = r;
  if (J0 != nullptr) {
    J0->setZero(6, 9);
    J0->block<6, 6>(0, 3) = -se3_left_jacobian_inv(r);
  }
  if (J1 != nullptr) {
    J1->setZero(6, 9);
    J1->block<6, 6>(0, 3) = se3_right_jacobian_inv(r);
  }
}

// ---------------------------------------------------------------------------
// PriorFactor

PriorFactor::PriorFactor(int var, MovingPlane anchor, NoiseModel noise)
    : Factor(FactorKind::Prior, {var, -1}, 1, std::move(noise)), anchor_(std::move(anchor)) {}

void PriorFactor::evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                           MatX* J1) const {
  (void)J1;
  const MovingPlane& theta = vars[vars_[0]];
  const Vec6 rm = se3_log(anchor_.motion.inverse() * theta.motion);
  residual->resize(9);
  residual->head<3>() = theta.plane.n - anchor_.plane.n;
  residual->tail<6>() = rm;
  if (J0 != nullptr) {
    J0->setZero(9, 9);
    J0->block<3, 3>(0, 0) = Mat3::Identity();
    J0->block<6, 6>(3, 3) = se3_right_jacobian_inv(rm);
  }
}

// ---------------------------------------------------------------------------
// Graph cost, linearization, solve

double FactorGraph::total_cost(int* inactive) const {
  double cost = 0.0;
  int dropped = 0;
  VecX r;
  for (const auto& f : factors) {
    try {
      f->evaluate(variables, &r, nullptr, nullptr);
    } catch (const Error&) {
      ++dropped;
      continue;
    }
    const int m = f->measurement_dim();
    for (int g = 0; g + m <= r.size(); g += m) {
      cost += robust_cost(r.segment(g, m), f->noise());
    }
  }
  if (inactive != nullptr) *inactive = dropped;
  return cost;
}

namespace {

// Column selection of the full 9-wide Jacobian for a variable's mask.
MatX masked_block(const MatX& J, ParamMask mask) {
  switch (mask) {
    case ParamMask::PlaneOnly:
      return J.leftCols<3>();
    case ParamMask::MotionOnly:
      return J.rightCols<6>();
    case ParamMask::Both:
      return J;
  }
  return J;
}

}  // namespace

SparseSystem linearize(const FactorGraph& graph) {
  SparseSystem sys;
  const int n = static_cast<int>(graph.variables.size());
  sys.var_col_offset.assign(n, -1);
  sys.var_col_width.assign(n, 0);
  int col = 0;
  for (int i = 0; i < n; ++i) {
    sys.var_col_width[i] = mask_width(graph.masks[i]);
    sys.var_col_offset[i] = col;
    col += sys.var_col_width[i];
  }
  sys.num_cols = col;

  sys.rows.reserve(graph.factors.size());
  VecX r;
  MatX J0, J1;
  for (size_t fi = 0; fi < graph.factors.size(); ++fi) {
    const Factor& f = *graph.factors[fi];
    try {
      f.evaluate(graph.variables, &r, &J0, f.arity() == 2 ? &J1 : nullptr);
    } catch (const Error&) {
      ++sys.inactive_factors;
      continue;
    }

    RowBlock block;
    block.factor_index = static_cast<int>(fi);
    block.residual.setZero(r.size());
    std::vector<MatX*> jacobians{&J0};
    if (f.arity() == 2) jacobians.push_back(&J1);
    block.entries.resize(f.arity());
    for (int v = 0; v < f.arity(); ++v) {
      block.entries[v].var = f.var(v);
      block.entries[v].col_offset = sys.var_col_offset[f.var(v)];
      block.entries[v].J.setZero(r.size(), sys.var_col_width[f.var(v)]);
    }

    // Per-measurement whitening and Huber IRLS weighting.
    const int m = f.measurement_dim();
    const NoiseModel& noise = f.noise();
    for (int g = 0; g + m <= r.size(); g += m) {
      const RobustResult rw = robust_whiten(r.segment(g, m), noise);
      block.residual.segment(g, m) = rw.whitened;
      const double s = std::sqrt(rw.weight);
      for (int v = 0; v < f.arity(); ++v) {
        MatX rows = masked_block(jacobians[v]->middleRows(g, m), graph.masks[f.var(v)]);
        if (noise.sigmas.size() == 1) {
          rows *= s / noise.sigmas(0);
        } else {
          rows = (noise.sigmas.cwiseInverse() * s).asDiagonal() * rows;
        }
        block.entries[v].J.middleRows(g, m) = rows;
      }
    }
    sys.rows.push_back(std::move(block));
  }
  return sys;
}

double SparseSystem::quadratic_cost() const {
  double c = 0.0;
  for (const auto& b : rows) {
    c += b.residual.squaredNorm();
  }
  return 0.5 * c;
}

void SparseSystem::normal_equations(Eigen::SparseMatrix<double>* H, VecX* g) const {
  std::vector<Eigen::Triplet<double>> triplets;
  size_t nnz_estimate = 0;
  for (const auto& b : rows) {
    size_t w = 0;
    for (const auto& e : b.entries) w += e.J.cols();
    nnz_estimate += w * w;
  }
  triplets.reserve(nnz_estimate);

  g->setZero(num_cols);
  for (const auto& b : rows) {
    for (const auto& ea : b.entries) {
      g->segment(ea.col_offset, ea.J.cols()) += ea.J.transpose() * b.residual;
      for (const auto& eb : b.entries) {
        const MatX h = ea.J.transpose() * eb.J;
        for (int c = 0; c < h.cols(); ++c) {
          for (int rr = 0; rr < h.rows(); ++rr) {
            triplets.emplace_back(ea.col_offset + rr, eb.col_offset + c, h(rr, c));
          }
        }
      }
    }
  }
  H->resize(num_cols, num_cols);
  H->setFromTriplets(triplets.begin(), triplets.end());
}

namespace {

void apply_step(const FactorGraph& graph, const VecX& delta, const SparseSystem& sys,
                std::vector<MovingPlane>* out) {
  *out = graph.variables;
  for (size_t i = 0; i < graph.variables.size(); ++i) {
    const int off = sys.var_col_offset[i];
    TangentDelta d;
    switch (graph.masks[i]) {
      case ParamMask::PlaneOnly:
        d.dn = delta.segment<3>(off);
        break;
      case ParamMask::MotionOnly:
        d.dx = delta.segment<6>(off);
        break;
      case ParamMask::Both:
        d.dn = delta.segment<3>(off);
        d.dx = delta.segment<6>(off + 3);
        break;
    }
    (*out)[i] = retract(graph.variables[i], d);
  }
}

}  // namespace

SolveStats solve_lm(FactorGraph& graph, const LMConfig& config) {
  SolveStats stats;
  double cost = graph.total_cost(&stats.inactive_factors);
  stats.initial_cost = cost;
  stats.accepted_costs.push_back(cost);

  if (cost <= config.abs_cost_tol) {
    stats.iterations = 1;
    stats.final_cost = cost;
    stats.stop_reason = "cost at zero";
    return stats;
  }

  double lambda = config.lambda_init;
  Eigen::SparseMatrix<double> H, D;
  VecX g;

  for (int iter = 1; iter <= config.max_iterations; ++iter) {
    stats.iterations = iter;
    const SparseSystem sys = linearize(graph);
    stats.inactive_factors = sys.inactive_factors;
    if (sys.num_cols == 0) {
      stats.stop_reason = "no active parameters";
      break;
    }
    sys.normal_equations(&H, &g);
    if (g.lpNorm<Eigen::Infinity>() < 1e-14) {
      stats.stop_reason = "vanishing gradient";
      break;
    }

    // Marquardt scaling: damp with the diagonal of H, floored to stay PD.
    VecX diag = H.diagonal();
    for (int i = 0; i < diag.size(); ++i) diag(i) = std::max(diag(i), 1e-12);
    D.resize(H.rows(), H.cols());
    D.setIdentity();
    for (int i = 0; i < diag.size(); ++i) D.coeffRef(i, i) = diag(i);

    while (true) {
      Eigen::SparseMatrix<double> Hd = H + lambda * D;
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(Hd);
      bool singular = ldlt.info() != Eigen::Success;
      VecX delta;
      if (!singular) {
        delta = ldlt.solve(-g);
        singular = ldlt.info() != Eigen::Success || !delta.allFinite();
      }
      if (singular) {
        if (lambda >= config.lambda_max) {
          throw SolverFailure("solve_lm: damped system singular at lambda_max");
        }
        lambda *= config.lambda_factor;
        continue;
      }

      std::vector<MovingPlane> candidate;
      apply_step(graph, delta, sys, &candidate);
      std::swap(graph.variables, candidate);
      const double new_cost = graph.total_cost(nullptr);
      if (new_cost < cost) {
        const double rel = (cost - new_cost) / std::max(cost, 1e-300);
        cost = new_cost;
        stats.accepted_costs.push_back(cost);
        ++stats.accepted_steps;
        lambda = std::max(lambda / config.lambda_factor, 1e-12);
        if (config.verbose) {
          std::cerr << "lm iter " << iter << " cost " << cost << " lambda " << lambda << "\n";
        }
        if (rel < config.rel_decrease_tol || cost <= config.abs_cost_tol) {
          stats.stop_reason = "converged";
          stats.final_cost = cost;
          return stats;
        }
        break;
      }
      std::swap(graph.variables, candidate);   // reject, restore
      lambda *= config.lambda_factor;
      if (lambda > config.lambda_max) {
        stats.stop_reason = "lambda exceeded lambda_max";
        stats.final_cost = cost;
        return stats;
      }
    }
  }
  if (stats.stop_reason.empty()) stats.stop_reason = "max iterations";
  stats.final_cost = cost;
  return stats;
}

}  // namespace sflow
