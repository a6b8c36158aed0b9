#include "sflow/hypotheses.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace sflow {

// ---------------------------------------------------------------------------
// Match ingestion

MatchField load_matches(const std::string& path, int width, int height) {
  std::ifstream in(path);
  if (!in) {
    throw ParseError("load_matches: cannot open " + path);
  }
  MatchField field;
  field.source = MatchField::Source::Ingested;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    double x0, y0, x1, y1;
    if (!(ls >> x0)) continue;   // blank or comment-only line
    if (!(ls >> y0 >> x1 >> y1)) {
      throw ParseError("load_matches: malformed line " + std::to_string(line_no) + " in " + path);
    }
    if (width > 0 && (x0 < 0 || x0 >= width || y0 < 0 || y0 >= height || x1 < 0 || x1 >= width ||
                      y1 < 0 || y1 >= height)) {
      continue;
    }
    field.matches.push_back({Vec2(x0, y0), Vec2(x1, y1)});
  }
  if (field.matches.empty()) {
    throw EmptyMatchField("load_matches: no matches in " + path);
  }
  return field;
}

namespace {

// Best integer offset of `desc` within the target census image around a
// center, by Hamming distance. Returns false without a valid candidate.
bool search_offset(const CensusImage& target, uint64_t desc, const Vec2i& center, int radius,
                   Vec2i* best, int* best_cost) {
  *best_cost = 1 << 30;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      const int x = center.x() + dx, y = center.y() + dy;
      if (!target.valid_at(x, y)) continue;
      const int c = census_distance(desc, target.at(x, y));
      if (c < *best_cost) {
        *best_cost = c;
        *best = Vec2i(x, y);
      }
    }
  }
  return *best_cost < (1 << 30);
}

}  // namespace

MatchField builtin_matches(const Pyramid& reference, const Pyramid& target,
                           const BuiltinMatcherConfig& config) {
  MatchField field;
  field.source = MatchField::Source::BuiltIn;
  const int coarsest = std::min(reference.depth(), target.depth()) - 1;
  const GrayImage& base = reference.levels[0].image;

  for (int y = CensusImage::kHalfY; y < base.height - CensusImage::kHalfY;
       y += config.grid_stride) {
    for (int x = CensusImage::kHalfX; x < base.width - CensusImage::kHalfX;
         x += config.grid_stride) {
      const Vec2 p0(x, y);
      bool ok = true;
      Vec2 guess = p0;
      for (int l = coarsest; l >= 0 && ok; --l) {
        const CensusImage& ref_census = reference.levels[l].census;
        const Vec2 pl = to_level(p0, l);
        const int rx = static_cast<int>(std::lround(pl.x()));
        const int ry = static_cast<int>(std::lround(pl.y()));
        if (!ref_census.valid_at(rx, ry)) {
          ok = false;
          break;
        }
        const Vec2 gl = to_level(guess, l);
        const Vec2i center(static_cast<int>(std::lround(gl.x())),
                           static_cast<int>(std::lround(gl.y())));
        const int radius = (l == coarsest) ? config.coarse_search_radius : config.refine_radius;
        Vec2i best;
        int cost;
        if (!search_offset(target.levels[l].census, ref_census.at(rx, ry), center, radius,
                           &best, &cost)) {
          ok = false;
          break;
        }
        if (l == 0 && cost > config.max_bits) {
          ok = false;
          break;
        }
        // Lift the level-L coordinate back to level 0.
        const double s = double(1u << l);
        guess = Vec2((best.x() + 0.5) * s - 0.5, (best.y() + 0.5) * s - 0.5);
      }
      if (ok) {
        field.matches.push_back({p0, guess});
      }
    }
  }
  return field;
}

// ---------------------------------------------------------------------------
// Lifting and minimal solvers

std::vector<LiftedCorrespondence> lift_matches(const MatchField& matches,
                                               const std::vector<PlaneFit>& planes,
                                               const SuperpixelMap& spmap, const CameraRig& rig,
                                               const DisparityMap* disparity_t1) {
  std::vector<LiftedCorrespondence> out;
  out.reserve(matches.matches.size());
  const CameraIntrinsics& intr = rig.intrinsics;
  const double fb = intr.fx * rig.baseline();

  for (size_t m = 0; m < matches.matches.size(); ++m) {
    const auto& match = matches.matches[m];
    const int x = static_cast<int>(std::lround(match.p0.x()));
    const int y = static_cast<int>(std::lround(match.p0.y()));
    if (x < 0 || x >= spmap.width || y < 0 || y >= spmap.height) continue;
    const int sp = spmap.label_at(x, y);
    if (planes[sp].confidence <= 0.0) continue;   // fallback planes do not lift

    double rho;
    try {
      rho = inverse_depth(planes[sp].plane, match.p0, intr);
    } catch (const RayParallelToPlane&) {
      continue;
    }
    if (rho <= 1e-6) continue;

    LiftedCorrespondence c;
    c.x0 = intr.ray(match.p0) / rho;
    c.p1 = match.p1;
    c.superpixel = sp;
    c.match_index = static_cast<int>(m);
    if (disparity_t1 != nullptr) {
      const int x1 = static_cast<int>(std::lround(match.p1.x()));
      const int y1 = static_cast<int>(std::lround(match.p1.y()));
      if (x1 >= 0 && x1 < disparity_t1->width && y1 >= 0 && y1 < disparity_t1->height &&
          disparity_t1->valid(x1, y1)) {
        const double z1 = fb / disparity_t1->at(x1, y1);
        c.x1 = intr.ray(match.p1) * z1;
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

PoseSE3 align_rigid_3d3d(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  Vec3 cf = Vec3::Zero(), ct = Vec3::Zero();
  for (const auto& p : from) cf += p;
  for (const auto& p : to) ct += p;
  cf /= double(from.size());
  ct /= double(to.size());
  Mat3 W = Mat3::Zero();
  for (size_t k = 0; k < from.size(); ++k) {
    W += (to[k] - ct) * (from[k] - cf).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(W, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 S = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) S(2, 2) = -1.0;
  PoseSE3 pose;
  pose.R = svd.matrixU() * S * svd.matrixV().transpose();
  pose.t = ct - pose.R * cf;
  return pose;
}

namespace {

// Real roots of x^4 + a3 x^3 + a2 x^2 + a1 x + a0 via the companion matrix.
std::vector<double> quartic_real_roots(double a3, double a2, double a1, double a0) {
  Mat4 companion = Mat4::Zero();
  companion(1, 0) = companion(2, 1) = companion(3, 2) = 1.0;
  companion(0, 3) = -a0;
  companion(1, 3) = -a1;
  companion(2, 3) = -a2;
  companion(3, 3) = -a3;
  Eigen::EigenSolver<Mat4> es(companion, false);
  std::vector<double> roots;
  for (int i = 0; i < 4; ++i) {
    const auto ev = es.eigenvalues()(i);
    if (std::abs(ev.imag()) < 1e-8 * std::max(1.0, std::abs(ev.real()))) {
      roots.push_back(ev.real());
    }
  }
  return roots;
}

}  // namespace

std::vector<PoseSE3> resect_p3p(const std::vector<Vec3>& points, const std::vector<Vec3>& rays) {
  // Grunert's distance formulation: side lengths of the world triangle and
  // cosines between the viewing rays give a quartic in the distance ratio.
  const Vec3 j1 = rays[0].normalized();
  const Vec3 j2 = rays[1].normalized();
  const Vec3 j3 = rays[2].normalized();
  const double a2 = (points[1] - points[2]).squaredNorm();
  const double b2 = (points[0] - points[2]).squaredNorm();
  const double c2 = (points[0] - points[1]).squaredNorm();
  if (a2 < 1e-12 || b2 < 1e-12 || c2 < 1e-12) return {};
  const double ca = j2.dot(j3);
  const double cb = j1.dot(j3);
  const double cg = j1.dot(j2);

  const double q = (a2 - c2) / b2;
  const double r = (a2 + c2) / b2;

  const double A4 = (q - 1.0) * (q - 1.0) - 4.0 * (c2 / b2) * ca * ca;
  const double A3 = 4.0 * (q * (1.0 - q) * cb - (1.0 - r) * ca * cg + 2.0 * (c2 / b2) * ca * ca * cb);
  const double A2 = 2.0 * (q * q - 1.0 + 2.0 * q * q * cb * cb + 2.0 * ((b2 - c2) / b2) * ca * ca -
                           4.0 * r * ca * cb * cg + 2.0 * ((b2 - a2) / b2) * cg * cg);
  const double A1 = 4.0 * (-q * (1.0 + q) * cb + 2.0 * (a2 / b2) * cg * cg * cb - (1.0 - r) * ca * cg);
  const double A0 = (1.0 + q) * (1.0 + q) - 4.0 * (a2 / b2) * cg * cg;

  std::vector<PoseSE3> solutions;
  if (std::abs(A4) < 1e-14) return solutions;

  for (const double v : quartic_real_roots(A3 / A4, A2 / A4, A1 / A4, A0 / A4)) {
    if (v <= 0.0) continue;
    const double denom_u = 2.0 * (cg - v * ca);
    if (std::abs(denom_u) < 1e-12) continue;
    const double u = ((-1.0 + q) * v * v - 2.0 * q * cb * v + 1.0 + q) / denom_u;
    if (u <= 0.0) continue;
    const double s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb);
    if (s1_sq <= 0.0) continue;
    const double s1 = std::sqrt(s1_sq);
    const double s2 = u * s1;
    const double s3 = v * s1;
    const std::vector<Vec3> cam_points = {s1 * j1, s2 * j2, s3 * j3};
    solutions.push_back(align_rigid_3d3d(points, cam_points));
  }
  return solutions;
}

// ---------------------------------------------------------------------------
// RANSAC

namespace {

double reprojection_error(const PoseSE3& motion, const LiftedCorrespondence& c,
                          const CameraIntrinsics& intr) {
  const Vec3 y = motion * c.x0;
  if (y.z() < 1e-9) return 1e18;
  return (intr.project(y) - c.p1).norm();
}

std::vector<int> count_inliers(const PoseSE3& motion,
                               const std::vector<LiftedCorrespondence>& lifted,
                               const std::vector<uint8_t>& active, const CameraIntrinsics& intr,
                               double threshold) {
  std::vector<int> inliers;
  for (size_t k = 0; k < lifted.size(); ++k) {
    if (!active[k]) continue;
    if (reprojection_error(motion, lifted[k], intr) < threshold) {
      inliers.push_back(static_cast<int>(k));
    }
  }
  return inliers;
}

}  // namespace

std::vector<MotionHypothesis> ransac_hypotheses(const std::vector<LiftedCorrespondence>& lifted,
                                                const SuperpixelMap& spmap, const CameraRig& rig,
                                                const RansacConfig& config) {
  std::vector<MotionHypothesis> hypotheses;
  if (lifted.size() < 3) {
    throw NoHypothesis("ransac_hypotheses: fewer than 3 lifted matches");
  }
  std::mt19937_64 rng(config.seed);
  std::vector<uint8_t> active(lifted.size(), 1);
  int active_count = static_cast<int>(lifted.size());
  const double threshold = 3.0 * config.sigma;
  const CameraIntrinsics& intr = rig.intrinsics;

  while (static_cast<int>(hypotheses.size()) < config.max_hypotheses &&
         active_count >= std::max(3, config.min_pool)) {
    std::vector<int> pool;
    pool.reserve(active_count);
    for (size_t k = 0; k < lifted.size(); ++k) {
      if (active[k]) pool.push_back(static_cast<int>(k));
    }
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);

    PoseSE3 best_motion;
    int best_count = -1;
    for (int it = 0; it < config.iterations; ++it) {
      const int i0 = pool[pick(rng)], i1 = pool[pick(rng)], i2 = pool[pick(rng)];
      if (i0 == i1 || i0 == i2 || i1 == i2) continue;
      const std::array<const LiftedCorrespondence*, 3> tri = {&lifted[i0], &lifted[i1],
                                                              &lifted[i2]};
      std::vector<PoseSE3> candidates;
      if (tri[0]->x1 && tri[1]->x1 && tri[2]->x1) {
        candidates.push_back(align_rigid_3d3d({tri[0]->x0, tri[1]->x0, tri[2]->x0},
                                              {*tri[0]->x1, *tri[1]->x1, *tri[2]->x1}));
      } else {
        candidates = resect_p3p({tri[0]->x0, tri[1]->x0, tri[2]->x0},
                                {intr.ray(tri[0]->p1), intr.ray(tri[1]->p1), intr.ray(tri[2]->p1)});
      }
      for (const auto& motion : candidates) {
        int count = 0;
        for (const int k : pool) {
          if (reprojection_error(motion, lifted[k], intr) < threshold) ++count;
        }
        if (count > best_count) {
          best_count = count;
          best_motion = motion;
        }
      }
    }

    if (best_count < 3 || double(best_count) / double(active_count) <= config.min_inlier_ratio) {
      break;
    }

    MotionHypothesis h;
    h.motion = best_motion;
    h.inliers = count_inliers(best_motion, lifted, active, intr, threshold);
    h.inlier_ratio = double(h.inliers.size()) / double(active_count);
    h = refine_hypothesis(h, lifted, rig, {});
    h.inliers = count_inliers(h.motion, lifted, active, intr, threshold);
    h.inlier_ratio = double(h.inliers.size()) / double(active_count);
    if (h.inlier_ratio <= config.min_inlier_ratio) {
      break;
    }
    h.is_camera = hypotheses.empty();

    // Superpixel-level pruning: regions whose matches are mostly inliers are
    // claimed, and all of their matches leave the pool with the inliers.
    std::vector<int> sp_total(spmap.count, 0), sp_inlier(spmap.count, 0);
    for (size_t k = 0; k < lifted.size(); ++k) {
      if (active[k]) ++sp_total[lifted[k].superpixel];
    }
    for (const int k : h.inliers) ++sp_inlier[lifted[k].superpixel];
    std::vector<uint8_t> claimed(spmap.count, 0);
    for (int sp = 0; sp < spmap.count; ++sp) {
      if (sp_total[sp] > 0 && sp_inlier[sp] > config.claim_fraction * sp_total[sp]) {
        claimed[sp] = 1;
      }
    }
    for (size_t k = 0; k < lifted.size(); ++k) {
      if (active[k] && claimed[lifted[k].superpixel]) {
        active[k] = 0;
        --active_count;
      }
    }
    for (const int k : h.inliers) {
      if (active[k]) {
        active[k] = 0;
        --active_count;
      }
    }
    hypotheses.push_back(std::move(h));
  }

  if (hypotheses.empty()) {
    throw NoHypothesis("ransac_hypotheses: no hypothesis above the inlier ratio");
  }
  return hypotheses;
}

// ---------------------------------------------------------------------------
// Refinement

namespace {

double huber_cost(double e, double k) { return e <= k ? 0.5 * e * e : k * e - 0.5 * k * k; }

double refine_cost(const PoseSE3& motion, const std::vector<LiftedCorrespondence>& lifted,
                   const std::vector<int>& inliers, const CameraIntrinsics& intr, double huber_k) {
  double cost = 0.0;
  for (const int k : inliers) {
    cost += huber_cost(reprojection_error(motion, lifted[k], intr), huber_k);
  }
  return cost;
}

}  // namespace

MotionHypothesis refine_hypothesis(const MotionHypothesis& h,
                                   const std::vector<LiftedCorrespondence>& lifted,
                                   const CameraRig& rig, const RefineConfig& config) {
  if (h.inliers.size() < 3) {
    throw SolverFailure("refine_hypothesis: fewer than 3 inliers");
  }
  const CameraIntrinsics& intr = rig.intrinsics;
  MotionHypothesis out = h;
  double cost = refine_cost(out.motion, lifted, out.inliers, intr, config.huber_k);
  double lambda = config.lambda_init;

  for (int iter = 0; iter < config.max_iterations; ++iter) {
    Mat6 H = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    for (const int k : out.inliers) {
      const Vec3 y = out.motion * lifted[k].x0;
      if (y.z() < 1e-9) continue;
      const Vec2 r = intr.project(y) - lifted[k].p1;
      Eigen::Matrix<double, 2, 3> dq_dy;
      const double iz = 1.0 / y.z();
      dq_dy << intr.fx * iz, 0, -intr.fx * y.x() * iz * iz, 0, intr.fy * iz,
          -intr.fy * y.y() * iz * iz;
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = dq_dy * (-out.motion.R * so3_hat(lifted[k].x0));
      J.rightCols<3>() = dq_dy * out.motion.R;
      const double e = r.norm();
      const double w = (e <= config.huber_k || e == 0.0) ? 1.0 : config.huber_k / e;
      H += w * J.transpose() * J;
      g += w * J.transpose() * r;
    }

    bool improved = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Mat6 Hd = H;
      Hd.diagonal() += lambda * Hd.diagonal().cwiseMax(1e-12);
      const Vec6 delta = Hd.ldlt().solve(-g);
      if (!delta.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      PoseSE3 candidate = out.motion * se3_exp(delta);
      candidate.R = orthonormalized(candidate.R);
      const double new_cost = refine_cost(candidate, lifted, out.inliers, intr, config.huber_k);
      if (new_cost < cost) {
        const double rel = (cost - new_cost) / std::max(cost, 1e-300);
        out.motion = candidate;
        cost = new_cost;
        lambda = std::max(lambda / 10.0, 1e-12);
        improved = true;
        if (rel < 1e-10) iter = config.max_iterations;
        break;
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label assignment

LabelAssignment assign_labels(const std::vector<MotionHypothesis>& hypotheses,
                              const std::vector<PlaneFit>& planes, const GrayImage& image0,
                              const GrayImage& image1, const DisparityMap& disparity0,
                              const DisparityMap& disparity1,
                              const std::vector<LiftedCorrespondence>& features,
                              const SuperpixelMap& spmap, const CameraRig& rig,
                              const AssignConfig& config) {
  const CameraIntrinsics& intr = rig.intrinsics;
  const double fb = intr.fx * rig.baseline();
  const int num_h = static_cast<int>(hypotheses.size());

  // Feature -> hypothesis membership (first hypothesis claiming it wins).
  std::vector<int> feature_label(features.size(), -1);
  for (int l = 0; l < num_h; ++l) {
    for (const int k : hypotheses[l].inliers) {
      if (feature_label[k] < 0) feature_label[k] = l;
    }
  }

  int camera_index = 0;
  for (int l = 0; l < num_h; ++l) {
    if (hypotheses[l].is_camera) camera_index = l;
  }

  LabelAssignment out;
  out.label.assign(spmap.count, camera_index);
  out.energies.assign(spmap.count, Vec3::Zero());

  auto depth_at = [&](const DisparityMap& dm, const Vec2& p) -> double {
    const int x = static_cast<int>(std::lround(p.x()));
    const int y = static_cast<int>(std::lround(p.y()));
    if (x < 0 || x >= dm.width || y < 0 || y >= dm.height || !dm.valid(x, y)) return -1.0;
    if (dm.at(x, y) < 1e-6) return -1.0;
    return fb / dm.at(x, y);
  };

  for (int sp = 0; sp < spmap.count; ++sp) {
    const auto& region = spmap.regions[sp];
    const Plane& plane = planes[sp].plane;

    // Neighborhood feature set and its empirical spreads.
    std::vector<int> nbh;
    for (size_t k = 0; k < features.size(); ++k) {
      if (feature_label[k] < 0) continue;
      const Vec2 fp(features[k].x0.x() / features[k].x0.z() * intr.fx + intr.cx,
                    features[k].x0.y() / features[k].x0.z() * intr.fy + intr.cy);
      if ((fp - spmap.centroids[sp]).norm() <= config.neighborhood_radius) {
        nbh.push_back(static_cast<int>(k));
      }
    }
    double mean_i = 0.0, mean_d = 0.0;
    std::vector<double> f_int(nbh.size()), f_dep(nbh.size());
    for (size_t n = 0; n < nbh.size(); ++n) {
      const auto& f = features[nbh[n]];
      const Vec2 fp = intr.project(f.x0);
      const auto v = image0.sample(fp);
      f_int[n] = v ? *v : 0.0;
      f_dep[n] = f.x0.z();
      mean_i += f_int[n];
      mean_d += f_dep[n];
    }
    double sigma_i = config.min_sigma_intensity, sigma_d = config.min_sigma_depth;
    if (nbh.size() > 1) {
      mean_i /= double(nbh.size());
      mean_d /= double(nbh.size());
      double vi = 0.0, vd = 0.0;
      for (size_t n = 0; n < nbh.size(); ++n) {
        vi += (f_int[n] - mean_i) * (f_int[n] - mean_i);
        vd += (f_dep[n] - mean_d) * (f_dep[n] - mean_d);
      }
      sigma_i = std::max(std::sqrt(vi / double(nbh.size())), config.min_sigma_intensity);
      sigma_d = std::max(std::sqrt(vd / double(nbh.size())), config.min_sigma_depth);
    }

    const size_t stride = std::max<size_t>(1, region.size() / config.max_pixels);
    double best_score = 1e300;
    int best_l = -1;
    Vec3 best_e = Vec3::Zero();

    for (int l = 0; l < num_h; ++l) {
      const PoseSE3& motion = hypotheses[l].motion;
      Mat3 A = motion.R;
      Vec3 a = motion.t;
      double e_depth = 0.0, e_photo = 0.0, e_cluster = 0.0;
      int valid_pixels = 0;

      for (size_t k = 0; k < region.size(); k += stride) {
        const int x = region[k] % spmap.width;
        const int y = region[k] / spmap.width;
        const Vec3 v = intr.ray(Vec2(x, y));
        const double rho0 = -plane.n.dot(v);
        if (rho0 <= 1e-9) continue;
        const Vec3 y3 = A * v + rho0 * a;   // transferred point, projective scale
        if (y3.z() < 1e-9) continue;
        const Vec2 q = intr.project(y3);
        const double z_transferred = y3.z() / rho0;

        const double d1 = depth_at(disparity1, q);
        const auto i1 = image1.sample(q);
        if (d1 <= 0.0 || !i1) continue;
        ++valid_pixels;
        e_depth += (d1 - z_transferred) * (d1 - z_transferred);
        const double di = image0.at(x, y) - *i1;
        e_photo += di * di;

        // Feature affinity toward this hypothesis' neighborhood features.
        const double z0 = 1.0 / rho0;
        for (const int fk : nbh) {
          if (feature_label[fk] != l) continue;
          const auto& f = features[fk];
          const Vec2 fp = intr.project(f.x0);
          const auto fi = image0.sample(fp);
          if (!fi) continue;
          const double ddi = image0.at(x, y) - *fi;
          const double ddd = z0 - f.x0.z();
          e_cluster += std::exp(-(ddi * ddi) / (sigma_i * sigma_i)) *
                       std::exp(-(ddd * ddd) / (sigma_d * sigma_d));
        }
      }
      if (valid_pixels == 0) continue;

      const double sign = config.argmax_convention ? -1.0 : 1.0;
      const double score = sign * (e_depth + config.alpha * e_photo) - config.beta * e_cluster;
      if (score < best_score) {
        best_score = score;
        best_l = l;
        best_e = Vec3(e_depth, e_photo, e_cluster);
      }
    }

    if (best_l >= 0) {
      out.label[sp] = best_l;
      out.energies[sp] = best_e;
    }
  }
  return out;
}

}  // namespace sflow
