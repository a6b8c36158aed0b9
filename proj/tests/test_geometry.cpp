#include <doctest.h>

#include "sflow/geometry.hpp"
#include "test_support.hpp"

using namespace sflow;
namespace tt = sflow::testing;

TEST_CASE("transfer_point identity chain keeps the point") {
  const Vec3 x0(0, 0, 10);
  const Plane plane{Vec3(0, 0, -0.1)};
  const Vec3 x1 = transfer_point(x0, plane, PoseSE3::Identity(), PoseSE3::Identity());
  CHECK((x1 - x0).norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("transfer_point pure camera translation") {
  const Vec3 x0(0, 0, 10);
  const Plane plane{Vec3(0, 0, -0.1)};
  const PoseSE3 cam{Mat3::Identity(), Vec3(-0.5, 0, 0)};
  const Vec3 x1 = transfer_point(x0, plane, PoseSE3::Identity(), cam);
  CHECK((x1 - Vec3(-0.5, 0, 10)).norm() < 1e-12);
}

TEST_CASE("transfer_point equals composing the rigid transforms directly") {
  std::mt19937_64 rng(7);
  const Plane plane{Vec3(0, 0, -0.1)};
  PoseSE3 motion;
  motion.R = so3_exp(Vec3(0, 5.0 * M_PI / 180.0, 0));
  motion.t = Vec3(0.1, 0, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const PoseSE3 cam = tt::random_pose(rng);
    // A point on the plane (z = 10 frontal plane).
    const Vec3 x0(1, 2, 10);
    REQUIRE(std::abs(plane.signed_residual(x0)) < 1e-9);
    const Vec3 got = transfer_point(x0, plane, motion, cam);
    const Vec3 want = cam * (motion * x0);   // oracle: compose and transform
    CHECK((got - want).norm() < 1e-9);
  }
}

TEST_CASE("transfer_point rejects a collapsing homogeneous scale") {
  // Point on a plane through the origin: -n.x = 0.
  const Plane plane{Vec3(0, 0, -0.1)};
  const Vec3 x0(1, 1, 0);   // -n.x0 = 0
  CHECK_THROWS_AS(transfer_point(x0, plane, PoseSE3::Identity(), PoseSE3::Identity()),
                  DegenerateScale);
}

TEST_CASE("induced_homography is the identity for the identity chain") {
  const MovingPlane p{Plane{Vec3(0.01, -0.02, -0.1)}, PoseSE3::Identity()};
  const CameraIntrinsics intr{100, 100, 0, 0};
  const Mat3 H = induced_homography(p, PoseSE3::Identity(), intr);
  CHECK((H - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("induced_homography of a rectified stereo shift is a disparity shift") {
  const MovingPlane p{Plane{Vec3(0, 0, -0.1)}, PoseSE3::Identity()};
  const PoseSE3 cam{Mat3::Identity(), Vec3(-0.5, 0, 0)};
  const CameraIntrinsics intr{100, 100, 0, 0};
  const Mat3 H = induced_homography(p, cam, intr);
  Mat3 want;
  want << 1, 0, -5, 0, 1, 0, 0, 0, 1;   // disparity 5 px = fx * baseline / depth
  CHECK((H - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("homography agrees with the back-project/transform/project oracle") {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const CameraRig rig = tt::random_rig(rng);
    const Plane plane = tt::random_plane(rng);
    const PoseSE3 motion = tt::random_pose(rng, 0.1, 0.3);
    const PoseSE3 cam = tt::random_pose(rng, 0.1, 0.3);
    const Mat3 H = induced_homography({plane, motion}, cam, rig.intrinsics);
    std::uniform_real_distribution<double> px(100.0, 540.0), py(100.0, 380.0);
    for (int k = 0; k < 5; ++k) {
      const Vec2 p(px(rng), py(rng));
      const Vec2 via_h = apply_homography(H, p);
      const Vec2 via_oracle = tt::project_through_plane(plane, motion, cam, rig.intrinsics, p);
      worst = std::max(worst, (via_h - via_oracle).norm());
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("stereo_homography equals induced_homography with identity motion") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const CameraRig rig = tt::random_rig(rng);
    const Plane plane = tt::random_plane(rng);
    const Mat3 a = stereo_homography(plane, rig);
    const Mat3 b = induced_homography({plane, PoseSE3::Identity()}, rig.stereo_transform,
                                      rig.intrinsics);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);   // bit-for-bit
  }
}

TEST_CASE("stereo_homography of a frontal plane shifts by fx*b/d") {
  const CameraRig rig = CameraRig::rectified({100, 100, 0, 0}, 0.5);
  const Plane plane = Plane::frontal(10.0);
  const Mat3 H = stereo_homography(plane, rig);
  const Vec2 q = apply_homography(H, Vec2(30, 7));
  CHECK(q.x() == doctest::Approx(30 - 5.0).epsilon(1e-12));
  CHECK(q.y() == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("stereo_homography degenerates when the plane holds the right camera center") {
  const CameraRig rig = CameraRig::rectified({100, 100, 0, 0}, 0.5);
  // Right camera center in reference coordinates is (0.5, 0, 0); the plane
  // x = 0.5 contains it and is parallel to the focal axis.
  const Plane plane{Vec3(-2.0, 0, 0)};
  CHECK_THROWS_AS(stereo_homography(plane, rig), DegenerateHomography);
}

TEST_CASE("inverse_depth of a frontal plane is constant") {
  const CameraIntrinsics intr{100, 100, 50, 50};
  const Plane plane{Vec3(0, 0, -0.1)};
  CHECK(inverse_depth(plane, Vec2(50, 50), intr) == doctest::Approx(0.1));
  CHECK(inverse_depth(plane, Vec2(3, 97), intr) == doctest::Approx(0.1));
}

TEST_CASE("inverse_depth of a tilted plane matches the explicit ray intersection") {
  const CameraIntrinsics intr{100, 100, 0, 0};
  const Plane plane{Vec3(-0.02, 0, -0.08)};
  // Ray of pixel (50, 0) is (0.5, 0, 1); -n.ray = 0.02*0.5 + 0.08 = 0.09.
  CHECK(inverse_depth(plane, Vec2(50, 0), intr) == doctest::Approx(0.09).epsilon(1e-12));
}

TEST_CASE("inverse_depth throws for a ray parallel to the plane") {
  const CameraIntrinsics intr{100, 100, 0, 0};
  const Plane plane{Vec3(0, 0.1, 0)};   // horizontal plane through the optical axis
  CHECK_THROWS_AS(inverse_depth(plane, Vec2(10, 0), intr), RayParallelToPlane);
}

TEST_CASE("inverse_depth is linear in the plane vector") {
  std::mt19937_64 rng(17);
  const CameraIntrinsics intr{400, 420, 310, 230};
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Plane a = tt::random_plane(rng);
    const Plane b = tt::random_plane(rng);
    const double s = u(rng), t = u(rng);
    const Vec2 px(100 + 400 * std::abs(u(rng)), 50 + 350 * std::abs(u(rng)));
    const Plane combo{s * a.n + t * b.n};
    if (!combo.valid()) continue;
    double lhs;
    try {
      lhs = inverse_depth(combo, px, intr);
    } catch (const RayParallelToPlane&) {
      continue;
    }
    const double rhs = s * (-a.n.dot(intr.ray(px))) + t * (-b.n.dot(intr.ray(px)));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("retract with a zero delta is the identity") {
  std::mt19937_64 rng(19);
  const MovingPlane theta{tt::random_plane(rng), tt::random_pose(rng)};
  const MovingPlane out = retract(theta, TangentDelta{});
  CHECK((out.plane.n - theta.plane.n).norm() == 0.0);
  CHECK((out.motion.R - theta.motion.R).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((out.motion.t - theta.motion.t).norm() < 1e-12);
}

TEST_CASE("retract adds the plane delta componentwise") {
  MovingPlane theta;
  theta.plane.n = Vec3(0, 0, -0.1);
  TangentDelta delta;
  delta.dn = Vec3(0.01, 0, 0);
  const MovingPlane out = retract(theta, delta);
  CHECK((out.plane.n - Vec3(0.01, 0, -0.1)).norm() == 0.0);
}

TEST_CASE("retract matches the numerical matrix exponential of the twist") {
  MovingPlane theta;
  theta.plane.n = Vec3(0, 0, -0.1);
  TangentDelta delta;
  delta.dx << 0, 0, M_PI / 2, 0, 0, 0;
  const MovingPlane out = retract(theta, delta);
  const Mat4 expected = tt::matrix_exp(tt::twist_matrix(delta.dx));
  CHECK((out.motion.R - expected.topLeftCorner<3, 3>()).cwiseAbs().maxCoeff() < 1e-9);
  // The quarter turn about z sends x to y.
  CHECK((out.motion.R * Vec3(1, 0, 0) - Vec3(0, 1, 0)).norm() < 1e-9);
}

TEST_CASE("se3 exponential of zero is the identity") {
  const PoseSE3 p = se3_exp(Vec6::Zero());
  CHECK((p.R - Mat3::Identity()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.t.norm() == 0.0);
}

TEST_CASE("se3 exponential first order in a small rotation") {
  const double theta = 1e-5;
  Vec6 xi;
  xi << 0, 0, theta, 0, 0, 0;
  const PoseSE3 p = se3_exp(xi);
  const Mat3 first_order = Mat3::Identity() + so3_hat(Vec3(0, 0, theta));
  CHECK((p.R - first_order).cwiseAbs().maxCoeff() < 10 * theta * theta);
}

TEST_CASE("se3 log o exp round-trips to 1e-9 for angles under 3") {
  std::mt19937_64 rng(23);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec6 xi = tt::random_twist(rng, 3.0, 2.0);
    const Vec6 back = se3_log(se3_exp(xi));
    worst = std::max(worst, (back - xi).norm());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("se3 exp o log round-trips on matrices") {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    const PoseSE3 p = tt::random_pose(rng, 2.5, 3.0);
    const PoseSE3 q = se3_exp(se3_log(p));
    CHECK((q.R - p.R).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((q.t - p.t).norm() < 1e-9);
  }
}

TEST_CASE("se3 log throws at a half-turn") {
  PoseSE3 p;
  p.R = so3_exp(Vec3(0, 0, M_PI));
  CHECK_THROWS_AS(se3_log(p), LogSingularity);
}

TEST_CASE("se3 matrix exponential agrees with the numerical oracle") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec6 xi = tt::random_twist(rng, 2.0, 2.0);
    const PoseSE3 p = se3_exp(xi);
    const Mat4 expected = tt::matrix_exp(tt::twist_matrix(xi));
    CHECK((p.matrix() - expected).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("inverse left jacobian matches finite differences of the log") {
  std::mt19937_64 rng(37);
  for (int trial = 0; trial < 30; ++trial) {
    const Vec6 r = tt::random_twist(rng, 1.5, 1.0);
    const Mat6 Jinv = se3_left_jacobian_inv(r);
    // d/d eps Log(Exp(eps) Exp(r)) at 0 equals Jl^-1(r).
    const double h = 1e-6;
    Mat6 fd;
    for (int c = 0; c < 6; ++c) {
      Vec6 e = Vec6::Zero();
      e(c) = h;
      const Vec6 plus = se3_log(se3_exp(e) * se3_exp(r));
      e(c) = -h;
      const Vec6 minus = se3_log(se3_exp(e) * se3_exp(r));
      fd.col(c) = (plus - minus) / (2 * h);
    }
    CHECK((Jinv - fd).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("retraction stays local as the delta shrinks") {
  std::mt19937_64 rng(41);
  const MovingPlane theta{tt::random_plane(rng), tt::random_pose(rng)};
  for (double scale = 1e-1; scale > 1e-8; scale *= 0.1) {
    TangentDelta delta;
    delta.dn = scale * tt::random_unit(rng);
    delta.dx = scale * tt::random_twist(rng, 1.0, 1.0);
    const MovingPlane out = retract(theta, delta);
    const double dist = (out.plane.n - theta.plane.n).norm() +
                        se3_log(theta.motion.inverse() * out.motion).norm();
    CHECK(dist <= 2.0 * (delta.dn.norm() + delta.dx.norm()) + 1e-12);
  }
}

TEST_CASE("retraction keeps the rotation orthonormal over many steps") {
  std::mt19937_64 rng(43);
  MovingPlane theta{tt::random_plane(rng), tt::random_pose(rng)};
  for (int k = 0; k < 2000; ++k) {
    TangentDelta delta;
    delta.dx = tt::random_twist(rng, 0.05, 0.05);
    theta = retract(theta, delta);
  }
  CHECK(theta.motion.is_rigid(1e-9));
}
