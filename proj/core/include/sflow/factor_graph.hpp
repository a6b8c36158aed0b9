#pragma once

#include <Eigen/SparseCore>
#include <array>
#include <memory>
#include <string>
#include <vector>

#include "sflow/census.hpp"
#include "sflow/geometry.hpp"

namespace sflow {

/// Robust Gaussian noise model: per-dimension standard deviations (size 1
/// broadcasts) and a Huber threshold in Mahalanobis units.
struct NoiseModel {
  VecX sigmas;
  double huber_k = 1.0;

  static NoiseModel isotropic(double sigma, double huber_k) {
    NoiseModel m;
    m.sigmas = VecX::Constant(1, sigma);
    m.huber_k = huber_k;
    return m;
  }
  static NoiseModel diagonal(const VecX& sigmas, double huber_k) { return NoiseModel{sigmas, huber_k}; }

  /// r ./ sigma with broadcast.
  VecX whiten(const VecX& r) const;
};

struct RobustResult {
  VecX whitened;   // sqrt(weight)-scaled Mahalanobis residual (IRLS convention)
  double weight = 1.0;
};

/// Mahalanobis-scales the residual, then applies the Huber IRLS weight:
/// 1 for |r| <= k, k/|r| beyond. Returns the sqrt(weight)-scaled residual.
RobustResult robust_whiten(const VecX& residual, const NoiseModel& noise);

/// Huber rho of the Mahalanobis norm: e^2/2 inside the threshold,
/// k*e - k^2/2 beyond. This is the cost the solver accepts/rejects on.
double robust_cost(const VecX& residual, const NoiseModel& noise);

enum class FactorKind { PhotoCensus, Match, BoundaryStatic, BoundaryMotion, MotionSmooth, Prior };

enum class ParamMask { PlaneOnly, MotionOnly, Both };

inline int mask_width(ParamMask m) { return m == ParamMask::Both ? 9 : (m == ParamMask::PlaneOnly ? 3 : 6); }

/// A residual factor over one or two MovingPlane variables. evaluate() fills
/// the raw (un-whitened) residual and Jacobians w.r.t. the full 9-dim tangent
/// [dn(3); dx(6)] of each variable. Rows for samples that leave the image are
/// zeroed (inactive); hard geometric degeneracies throw.
class Factor {
 public:
  virtual ~Factor() = default;

  FactorKind kind() const { return kind_; }
  int arity() const { return arity_; }
  int var(int k) const { return vars_[k]; }
  const NoiseModel& noise() const { return noise_; }

  virtual int residual_dim() const = 0;
  /// Rows per independently-robustified measurement (1 census sample,
  /// 2 for a match, 6 for a motion difference, ...).
  virtual int measurement_dim() const = 0;
  virtual void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                        MatX* J1) const = 0;

 protected:
  Factor(FactorKind kind, std::array<int, 2> vars, int arity, NoiseModel noise)
      : kind_(kind), vars_(vars), arity_(arity), noise_(std::move(noise)) {}

  FactorKind kind_;
  std::array<int, 2> vars_;
  int arity_;
  NoiseModel noise_;
};

/// Census photo-consistency of a superpixel against one observed view,
/// one scalar cost row per sampled pixel per pyramid level. With use_motion
/// false the warp depends on the plane alone (stereo pair at t).
class PhotoCensusFactor final : public Factor {
 public:
  PhotoCensusFactor(int var, std::vector<Vec2> pixels, const Pyramid* reference,
                    const Pyramid* target, const PoseSE3& cam_transform,
                    const CameraIntrinsics& intr, bool use_motion, int levels, NoiseModel noise);

  int residual_dim() const override { return static_cast<int>(pixels_.size()) * levels_; }
  int measurement_dim() const override { return 1; }
  void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                MatX* J1) const override;

 private:
  std::vector<Vec2> pixels_;
  const Pyramid* target_;
  PoseSE3 cam_;
  CameraIntrinsics intr_;
  bool use_motion_;
  int levels_;
  std::vector<uint64_t> ref_desc_;    // levels_ x pixels_
  std::vector<uint8_t> ref_valid_;
  std::vector<Vec2> ref_anchor_;      // rounded level coordinates of the reference pixel
};

/// Point-match consistency (2 rows per match): (p + m) - dehom(H p).
class MatchFactor final : public Factor {
 public:
  MatchFactor(int var, std::vector<Vec2> pixels, std::vector<Vec2> displacements,
              const PoseSE3& cam_transform, const CameraIntrinsics& intr, bool use_motion,
              NoiseModel noise);

  int residual_dim() const override { return 2 * static_cast<int>(pixels_.size()); }
  int measurement_dim() const override { return 2; }
  void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                MatX* J1) const override;

 private:
  std::vector<Vec2> pixels_;
  std::vector<Vec2> displacements_;
  PoseSE3 cam_;
  CameraIntrinsics intr_;
  bool use_motion_;
};

/// Inverse-depth agreement of two static planes along their shared boundary.
class BoundaryStaticFactor final : public Factor {
 public:
  BoundaryStaticFactor(int var_i, int var_j, std::vector<Vec2> boundary_pixels,
                       const CameraIntrinsics& intr, NoiseModel noise);

  int residual_dim() const override { return static_cast<int>(pixels_.size()); }
  int measurement_dim() const override { return 1; }
  void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                MatX* J1) const override;

 private:
  std::vector<Vec2> pixels_;
  CameraIntrinsics intr_;
};

/// Inverse-depth agreement of two moving planes after motion, expressed in
/// the observed frame.
class BoundaryMotionFactor final : public Factor {
 public:
  BoundaryMotionFactor(int var_i, int var_j, std::vector<Vec2> boundary_pixels,
                       const PoseSE3& cam_transform, const CameraIntrinsics& intr,
                       NoiseModel noise);

  int residual_dim() const override { return static_cast<int>(pixels_.size()); }
  int measurement_dim() const override { return 1; }
  void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                MatX* J1) const override;

 private:
  std::vector<Vec2> pixels_;
  PoseSE3 cam_;
  CameraIntrinsics intr_;
};

/// SE(3) Between residual Log(Xi^-1 Xj) between adjacent superpixels.
class MotionSmoothFactor final : public Factor {
 public:
  MotionSmoothFactor(int var_i, int var_j, NoiseModel noise);

  int residual_dim() const override { return 6; }
  int measurement_dim() const override { return 6; }
  void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                MatX* J1) const override;
};

/// Soft anchor [n - n_a; Log(Xa^-1 X)]; with a loose sigma it conditions the
/// normal equations without moving the optimum noticeably.
class PriorFactor final : public Factor {
 public:
  PriorFactor(int var, MovingPlane anchor, NoiseModel noise);

  int residual_dim() const override { return 9; }
  int measurement_dim() const override { return 9; }
  void evaluate(const std::vector<MovingPlane>& vars, VecX* residual, MatX* J0,
                MatX* J1) const override;

 private:
  MovingPlane anchor_;
};

struct FactorGraph {
  std::vector<MovingPlane> variables;
  std::vector<ParamMask> masks;   // one per variable
  std::vector<std::unique_ptr<Factor>> factors;

  int add_variable(const MovingPlane& v, ParamMask mask = ParamMask::Both) {
    variables.push_back(v);
    masks.push_back(mask);
    return static_cast<int>(variables.size()) - 1;
  }

  /// Sum of per-measurement Huber costs. Factors that throw degeneracy
  /// errors contribute nothing and are counted in *inactive if given.
  double total_cost(int* inactive = nullptr) const;
};

/// One linearized factor: whitened, robust-weighted residual rows plus one
/// dense Jacobian block per involved variable (over its active parameters).
struct RowBlock {
  int factor_index = -1;
  VecX residual;
  struct Entry {
    int var = -1;
    int col_offset = -1;
    MatX J;   // rows x mask_width(var mask)
  };
  std::vector<Entry> entries;
};

struct SparseSystem {
  std::vector<RowBlock> rows;
  std::vector<int> var_col_offset;   // -1 for fully masked-out variables
  std::vector<int> var_col_width;
  int num_cols = 0;
  int inactive_factors = 0;

  /// 0.5 * ||stacked residual||^2 over all row blocks.
  double quadratic_cost() const;
  /// Gauss-Newton normal equations H = J^T J, g = J^T r.
  void normal_equations(Eigen::SparseMatrix<double>* H, VecX* g) const;
};

/// Linearizes every factor at the current variables; factor evaluation errors
/// become inactive (dropped) row blocks.
SparseSystem linearize(const FactorGraph& graph);

struct LMConfig {
  double lambda_init = 1e-4;
  double lambda_factor = 10.0;
  double lambda_max = 1e8;
  int max_iterations = 30;
  double rel_decrease_tol = 1e-6;
  double abs_cost_tol = 1e-14;
  bool verbose = false;
};

struct SolveStats {
  int iterations = 0;
  int accepted_steps = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> accepted_costs;
  int inactive_factors = 0;
  std::string stop_reason;
};

/// Levenberg-Marquardt with per-variable manifold retraction and diagonal
/// damping; accepted costs are non-increasing by construction. Throws
/// SolverFailure when the damped system stays singular at lambda_max.
SolveStats solve_lm(FactorGraph& graph, const LMConfig& config);

}  // namespace sflow
