#include "sflow/geometry.hpp"

#include <Eigen/SVD>
#include <cmath>

namespace sflow {

namespace {
// Series fallbacks kick in below this angle; the closed forms are
// well-conditioned above it.
constexpr double kTaylorAngle = 1e-3;
}

Mat3 so3_hat(const Vec3& w) {
  Mat3 m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = so3_hat(w);
  double c1, c2;
  if (theta2 < kTaylorAngle * kTaylorAngle) {
    c1 = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0;
    c2 = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
  } else {
    const double theta = std::sqrt(theta2);
    c1 = std::sin(theta) / theta;
    c2 = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + c1 * W + c2 * W * W;
}

Vec3 so3_log(const Mat3& R) {
  const double tr = R.trace();
  if (tr < -1.0 + 1e-9) {
    throw LogSingularity("so3_log: rotation angle at pi");
  }
  const Vec3 vee(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  const double s = 0.5 * vee.norm();                          // sin(theta)
  const double c = std::clamp((tr - 1.0) * 0.5, -1.0, 1.0);   // cos(theta)
  const double theta = std::atan2(s, c);
  if (theta < kTaylorAngle) {
    return (0.5 + theta * theta / 12.0) * vee;
  }
  return (theta / (2.0 * s)) * vee;
}

Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = so3_hat(w);
  double c1, c2;
  if (theta2 < kTaylorAngle * kTaylorAngle) {
    c1 = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0;
    c2 = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0;
  } else {
    const double theta = std::sqrt(theta2);
    c1 = (1.0 - std::cos(theta)) / theta2;
    c2 = (theta - std::sin(theta)) / (theta2 * theta);
  }
  return Mat3::Identity() + c1 * W + c2 * W * W;
}

Mat3 so3_left_jacobian_inv(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = so3_hat(w);
  double coef;
  if (theta2 < kTaylorAngle * kTaylorAngle) {
    coef = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0;
  } else {
    const double theta = std::sqrt(theta2);
    const double half = 0.5 * theta;
    coef = 1.0 / theta2 - 0.5 * std::cos(half) / (theta * std::sin(half));
  }
  return Mat3::Identity() - 0.5 * W + coef * W * W;
}

PoseSE3 se3_exp(const Vec6& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  return PoseSE3{so3_exp(w), so3_left_jacobian(w) * v};
}

Vec6 se3_log(const PoseSE3& pose) {
  const Vec3 w = so3_log(pose.R);
  Vec6 xi;
  xi.head<3>() = w;
  xi.tail<3>() = so3_left_jacobian_inv(w) * pose.t;
  return xi;
}

namespace {

// Coupling block of the SE(3) left Jacobian (Barfoot's Q matrix) for a twist
// [omega; v], with series fallbacks below theta ~ 1e-3.
Mat3 se3_jacobian_q(const Vec3& w, const Vec3& v) {
  const Mat3 W = so3_hat(w);
  const Mat3 V = so3_hat(v);
  const double theta = w.norm();

  double c2, c3, c4;
  if (theta < 1e-3) {
    const double t2 = theta * theta;
    c2 = 1.0 / 6.0 - t2 / 120.0;
    c3 = 1.0 / 24.0 - t2 / 720.0;
    c4 = 1.0 / 120.0 - t2 / 2520.0;
  } else {
    const double t3 = theta * theta * theta;
    const double t4 = t3 * theta;
    const double t5 = t4 * theta;
    const double s = std::sin(theta), c = std::cos(theta);
    c2 = (theta - s) / t3;
    c3 = (theta * theta + 2.0 * c - 2.0) / (2.0 * t4);
    c4 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t5);
  }

  const Mat3 WV = W * V, VW = V * W, WVW = W * V * W;
  return 0.5 * V + c2 * (WV + VW + WVW) + c3 * (W * WV + VW * W - 3.0 * WVW) +
         c4 * (WVW * W + W * WVW);
}

}  // namespace

Mat6 se3_left_jacobian_inv(const Vec6& xi) {
  const Vec3 w = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const Mat3 Jinv = so3_left_jacobian_inv(w);
  const Mat3 Q = se3_jacobian_q(w, v);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = Jinv;
  out.bottomRightCorner<3, 3>() = Jinv;
  out.bottomLeftCorner<3, 3>() = -Jinv * Q * Jinv;
  return out;
}

Mat6 se3_right_jacobian_inv(const Vec6& xi) { return se3_left_jacobian_inv(-xi); }

Mat3 orthonormalized(const Mat3& R) {
  Eigen::JacobiSVD<Mat3> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    out = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return out;
}

Vec3 transfer_point(const Vec3& x0, const Plane& plane, const PoseSE3& motion,
                    const PoseSE3& cam_transform) {
  Vec4 h;
  h << x0, -plane.n.dot(x0);
  const Vec4 h1 = cam_transform.matrix() * (motion.matrix() * h);
  if (std::abs(h1(3)) < 1e-12) {
    throw DegenerateScale("transfer_point: homogeneous scale below 1e-12");
  }
  return h1.head<3>() / h1(3);
}

Mat3 induced_homography(const MovingPlane& p, const PoseSE3& cam_transform,
                        const CameraIntrinsics& intr) {
  const Mat3 A = cam_transform.R * p.motion.R;
  const Vec3 a = cam_transform.R * p.motion.t + cam_transform.t;
  const Mat3 H = intr.K() * (A - a * p.plane.n.transpose()) * intr.K_inv();
  if (std::abs(H.determinant()) < 1e-12) {
    throw DegenerateHomography("induced_homography: |det H| below 1e-12");
  }
  return H;
}

Mat3 stereo_homography(const Plane& plane, const CameraRig& rig) {
  return induced_homography(MovingPlane{plane, PoseSE3::Identity()}, rig.stereo_transform,
                            rig.intrinsics);
}

double inverse_depth(const Plane& plane, const Vec2& pixel, const CameraIntrinsics& intr) {
  const double rho = -plane.n.dot(intr.ray(pixel));
  if (std::abs(rho) < 1e-12) {
    throw RayParallelToPlane("inverse_depth: ray parallel to plane");
  }
  return rho;
}

MovingPlane retract(const MovingPlane& theta, const TangentDelta& delta) {
  MovingPlane out;
  out.plane.n = theta.plane.n + delta.dn;
  out.motion = theta.motion * se3_exp(delta.dx);
  out.motion.R = orthonormalized(out.motion.R);
  return out;
}

Vec2 apply_homography(const Mat3& H, const Vec2& p) {
  const Vec3 q = H * Vec3(p.x(), p.y(), 1.0);
  if (std::abs(q.z()) < 1e-12) {
    throw DegenerateScale("apply_homography: homogeneous scale below 1e-12");
  }
  return Vec2(q.x() / q.z(), q.y() / q.z());
}

}  // namespace sflow
