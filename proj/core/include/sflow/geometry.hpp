#pragma once

#include "sflow/errors.hpp"
#include "sflow/types.hpp"

namespace sflow {

/// Plane in normal coordinates: n·x + 1 = 0 for every 3D point x on the
/// plane. The direction of n encodes orientation, its magnitude the inverse
/// distance to the origin. n = 0 (plane at infinity) is not a valid scene
/// plane.
struct Plane {
  Vec3 n = Vec3::Zero();

  bool valid() const { return n.allFinite() && n.squaredNorm() > 0.0; }

  /// Frontal-parallel plane at positive depth z.
  static Plane frontal(double depth) { return Plane{Vec3(0.0, 0.0, -1.0 / depth)}; }

  /// n·x + 1, zero on the plane.
  double signed_residual(const Vec3& x) const { return n.dot(x) + 1.0; }
};

/// Rigid transform in SE(3), stored as rotation matrix + translation.
struct PoseSE3 {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static PoseSE3 Identity() { return PoseSE3{}; }

  Vec3 operator*(const Vec3& x) const { return R * x + t; }

  PoseSE3 operator*(const PoseSE3& o) const { return PoseSE3{R * o.R, R * o.t + t}; }

  PoseSE3 inverse() const { return PoseSE3{R.transpose(), -(R.transpose() * t)}; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = t;
    return m;
  }

  bool is_rigid(double tol = 1e-9) const {
    return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(R.determinant() - 1.0) < tol && t.allFinite();
  }
};

/// The unknown attached to one superpixel: a plane and its rigid motion.
struct MovingPlane {
  Plane plane;
  PoseSE3 motion;
};

/// Tangent-space update for a MovingPlane: plain 3-vector for the plane,
/// 6-vector twist [omega; v] for the motion.
struct TangentDelta {
  Vec3 dn = Vec3::Zero();
  Vec6 dx = Vec6::Zero();
};

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;

  bool valid() const { return fx > 0.0 && fy > 0.0; }

  Mat3 K() const {
    Mat3 k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }

  Mat3 K_inv() const {
    Mat3 k;
    k << 1.0 / fx, 0, -cx / fx, 0, 1.0 / fy, -cy / fy, 0, 0, 1;
    return k;
  }

  /// Back-projected ray of a pixel, normalized to z = 1.
  Vec3 ray(const Vec2& px) const {
    return Vec3((px.x() - cx) / fx, (px.y() - cy) / fy, 1.0);
  }

  Vec2 project(const Vec3& x) const {
    return Vec2(fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy);
  }
};

/// Stereo camera pair with shared intrinsics. stereo_transform maps points
/// from the reference (left) frame into the right frame.
struct CameraRig {
  CameraIntrinsics intrinsics;
  PoseSE3 stereo_transform;

  double baseline() const { return stereo_transform.t.norm(); }
  bool valid() const { return intrinsics.valid() && baseline() > 0.0; }

  /// Rectified rig: right camera offset by `baseline` along +x.
  static CameraRig rectified(const CameraIntrinsics& intr, double baseline) {
    return CameraRig{intr, PoseSE3{Mat3::Identity(), Vec3(-baseline, 0, 0)}};
  }
};

Mat3 so3_hat(const Vec3& w);
Mat3 so3_exp(const Vec3& w);
Vec3 so3_log(const Mat3& R);  // throws LogSingularity near angle pi
Mat3 so3_left_jacobian(const Vec3& w);
Mat3 so3_left_jacobian_inv(const Vec3& w);

/// Exponential map of a twist [omega; v].
PoseSE3 se3_exp(const Vec6& xi);
/// Inverse of se3_exp; throws LogSingularity for rotation angle at pi.
Vec6 se3_log(const PoseSE3& pose);
/// Inverse left Jacobian of SE(3) at xi, block form [[J^-1 0],[-J^-1 Q J^-1, J^-1]].
Mat6 se3_left_jacobian_inv(const Vec6& xi);
/// Inverse right Jacobian: Jr^-1(xi) = Jl^-1(-xi).
Mat6 se3_right_jacobian_inv(const Vec6& xi);

/// Nearest rotation matrix in Frobenius norm (polar projection).
Mat3 orthonormalized(const Mat3& R);

/// Transfers an on-plane point from the reference frame to an observed frame
/// through the plane motion and the camera transform, using the homogeneous
/// representation [x, -n·x].
Vec3 transfer_point(const Vec3& x0, const Plane& plane, const PoseSE3& motion,
                    const PoseSE3& cam_transform);

/// Homography induced by a moving plane: H = K (A - a n^T) K^-1 with
/// [A|a] = cam_transform * motion. Throws DegenerateHomography when H is
/// (numerically) rank deficient.
Mat3 induced_homography(const MovingPlane& p, const PoseSE3& cam_transform,
                        const CameraIntrinsics& intr);

/// Static-plane homography from the reference frame to the right frame.
Mat3 stereo_homography(const Plane& plane, const CameraRig& rig);

/// Inverse depth of the plane point seen at `pixel`: -n·(K^-1 [u v 1]).
/// Throws RayParallelToPlane when the ray does not meet the plane.
double inverse_depth(const Plane& plane, const Vec2& pixel, const CameraIntrinsics& intr);

/// Manifold retraction: plane by vector addition, motion by right
/// multiplication with the exponential of the twist. The rotation is
/// re-orthonormalized to keep the SE(3) invariant over long solves.
MovingPlane retract(const MovingPlane& theta, const TangentDelta& delta);

/// Applies a homography to a pixel and dehomogenizes. Throws DegenerateScale
/// when the homogeneous scale collapses.
Vec2 apply_homography(const Mat3& H, const Vec2& p);

}  // namespace sflow
