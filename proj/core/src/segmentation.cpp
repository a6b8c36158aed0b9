#include "sflow/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>

namespace sflow {

namespace {

void finalize_regions(SuperpixelMap* map) {
  map->regions.assign(map->count, {});
  map->centroids.assign(map->count, Vec2::Zero());
  for (int y = 0; y < map->height; ++y) {
    for (int x = 0; x < map->width; ++x) {
      const int32_t l = map->label_at(x, y);
      map->regions[l].push_back(y * map->width + x);
      map->centroids[l] += Vec2(x, y);
    }
  }
  for (int l = 0; l < map->count; ++l) {
    if (!map->regions[l].empty()) {
      map->centroids[l] /= double(map->regions[l].size());
    }
  }
}

// Splits every 4-connected component into its own label and renumbers
// contiguously in scan order.
void relabel_components(SuperpixelMap* map) {
  const int w = map->width, h = map->height;
  std::vector<int32_t> out(size_t(w) * h, -1);
  int next = 0;
  std::deque<int> queue;
  for (int start = 0; start < w * h; ++start) {
    if (out[start] >= 0) continue;
    const int32_t l = map->labels[start];
    out[start] = next;
    queue.push_back(start);
    while (!queue.empty()) {
      const int p = queue.front();
      queue.pop_front();
      const int px = p % w, py = p / w;
      const int nbors[4][2] = {{px - 1, py}, {px + 1, py}, {px, py - 1}, {px, py + 1}};
      for (const auto& nb : nbors) {
        if (nb[0] < 0 || nb[0] >= w || nb[1] < 0 || nb[1] >= h) continue;
        const int q = nb[1] * w + nb[0];
        if (out[q] < 0 && map->labels[q] == l) {
          out[q] = next;
          queue.push_back(q);
        }
      }
    }
    ++next;
  }
  map->labels = std::move(out);
  map->count = next;
}

// Merges components below min_size into the dominant 4-neighbor region.
void absorb_small_components(SuperpixelMap* map, int min_size) {
  const int w = map->width, h = map->height;
  while (true) {
    finalize_regions(map);
    int merged = 0;
    for (int l = 0; l < map->count; ++l) {
      if (map->regions[l].empty() || static_cast<int>(map->regions[l].size()) >= min_size) {
        continue;
      }
      // Most frequent neighboring label wins.
      std::map<int32_t, int> votes;
      for (const int p : map->regions[l]) {
        const int px = p % w, py = p / w;
        const int nbors[4][2] = {{px - 1, py}, {px + 1, py}, {px, py - 1}, {px, py + 1}};
        for (const auto& nb : nbors) {
          if (nb[0] < 0 || nb[0] >= w || nb[1] < 0 || nb[1] >= h) continue;
          const int32_t nl = map->label_at(nb[0], nb[1]);
          if (nl != l) ++votes[nl];
        }
      }
      if (votes.empty()) continue;
      const int32_t target =
          std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
            return a.second < b.second || (a.second == b.second && a.first > b.first);
          })->first;
      for (const int p : map->regions[l]) map->labels[p] = target;
      ++merged;
    }
    if (merged == 0) break;
    relabel_components(map);
  }
}

}  // namespace

SuperpixelMap segment(const GrayImage& img, int target_count, const SegmentationConfig& config) {
  SuperpixelMap map;
  map.width = img.width;
  map.height = img.height;

  const double step = std::sqrt(double(img.width) * img.height / std::max(target_count, 1));
  const int nx = std::max(1, static_cast<int>(std::lround(img.width / step)));
  const int ny = std::max(1, static_cast<int>(std::lround(img.height / step)));
  const int k = nx * ny;

  struct Cluster {
    double x, y, intensity;
  };
  std::vector<Cluster> clusters(k);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      double cx = (i + 0.5) * img.width / nx;
      double cy = (j + 0.5) * img.height / ny;
      // Seed on the locally flattest pixel of a 3x3 neighborhood.
      int bx = std::clamp(static_cast<int>(cx), 1, img.width - 2);
      int by = std::clamp(static_cast<int>(cy), 1, img.height - 2);
      double best = 1e300;
      int sx = bx, sy = by;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int x = bx + dx, y = by + dy;
          if (x < 1 || x >= img.width - 1 || y < 1 || y >= img.height - 1) continue;
          const double grad = std::abs(img.at(x + 1, y) - img.at(x - 1, y)) +
                              std::abs(img.at(x, y + 1) - img.at(x, y - 1));
          if (grad < best) {
            best = grad;
            sx = x;
            sy = y;
          }
        }
      }
      clusters[j * nx + i] = {double(sx), double(sy), img.at(sx, sy)};
    }
  }

  map.labels.assign(size_t(img.width) * img.height, 0);
  std::vector<double> best_dist;
  const double inv_iw2 = 1.0 / (config.intensity_weight * config.intensity_weight);
  const double inv_s2 = 1.0 / (step * step);

  for (int it = 0; it < config.iterations; ++it) {
    best_dist.assign(size_t(img.width) * img.height, 1e300);
    for (int c = 0; c < k; ++c) {
      const auto& cl = clusters[c];
      const int x0 = std::max(0, static_cast<int>(cl.x - step));
      const int x1 = std::min(img.width - 1, static_cast<int>(cl.x + step));
      const int y0 = std::max(0, static_cast<int>(cl.y - step));
      const int y1 = std::min(img.height - 1, static_cast<int>(cl.y + step));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double di = img.at(x, y) - cl.intensity;
          const double dx = x - cl.x, dy = y - cl.y;
          const double dist = di * di * inv_iw2 + (dx * dx + dy * dy) * inv_s2;
          const size_t idx = size_t(y) * img.width + x;
          if (dist < best_dist[idx]) {
            best_dist[idx] = dist;
            map.labels[idx] = c;
          }
        }
      }
    }
    // Update cluster means.
    std::vector<double> sx(k, 0), sy(k, 0), si(k, 0), cnt(k, 0);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const int32_t l = map.label_at(x, y);
        sx[l] += x;
        sy[l] += y;
        si[l] += img.at(x, y);
        cnt[l] += 1;
      }
    }
    for (int c = 0; c < k; ++c) {
      if (cnt[c] > 0) {
        clusters[c] = {sx[c] / cnt[c], sy[c] / cnt[c], si[c] / cnt[c]};
      }
    }
  }

  map.count = k;
  relabel_components(&map);
  const int min_size = std::max(4, static_cast<int>(step * step / 16));
  absorb_small_components(&map, min_size);
  finalize_regions(&map);
  return map;
}

SuperpixelMap superpixels_from_labels(int width, int height, const std::vector<int32_t>& labels) {
  if (static_cast<int>(labels.size()) != width * height) {
    throw DimensionMismatch("superpixels_from_labels: label buffer size mismatch");
  }
  SuperpixelMap map;
  map.width = width;
  map.height = height;
  map.labels = labels;
  map.count = 0;
  relabel_components(&map);
  finalize_regions(&map);
  return map;
}

BoundarySet extract_boundaries(const SuperpixelMap& spmap) {
  std::map<std::pair<int, int>, std::vector<Vec2i>> edges;
  const int w = spmap.width, h = spmap.height;
  auto add = [&](int a, int b, int x, int y, int nx, int ny) {
    const auto key = std::minmax(a, b);
    auto& pixels = edges[{key.first, key.second}];
    pixels.emplace_back(x, y);
    pixels.emplace_back(nx, ny);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int32_t l = spmap.label_at(x, y);
      if (x + 1 < w && spmap.label_at(x + 1, y) != l) add(l, spmap.label_at(x + 1, y), x, y, x + 1, y);
      if (y + 1 < h && spmap.label_at(x, y + 1) != l) add(l, spmap.label_at(x, y + 1), x, y, x, y + 1);
    }
  }
  BoundarySet out;
  out.edges.reserve(edges.size());
  for (auto& [key, pixels] : edges) {
    std::sort(pixels.begin(), pixels.end(), [](const Vec2i& a, const Vec2i& b) {
      return a.y() != b.y() ? a.y() < b.y() : a.x() < b.x();
    });
    pixels.erase(std::unique(pixels.begin(), pixels.end(),
                             [](const Vec2i& a, const Vec2i& b) { return a == b; }),
                 pixels.end());
    out.edges.push_back({key.first, key.second, std::move(pixels)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stereo prior

namespace {

struct ScanlineMatch {
  int best_d = -1;
  int best_cost = 1 << 30;
  bool unique = true;
};

// WTA over the scanline for one pixel; candidates outside the valid census
// band are skipped. Uniqueness requires the best cost to beat every candidate
// more than 1 disparity away.
ScanlineMatch scan_best(const CensusImage& a, const CensusImage& b, int x, int y, int max_d,
                        int direction) {
  ScanlineMatch m;
  int second = 1 << 30;
  for (int d = 0; d <= max_d; ++d) {
    const int xb = x + direction * d;
    if (!b.valid_at(xb, y)) continue;
    const int cost = census_distance(a.at(x, y), b.at(xb, y));
    if (cost < m.best_cost) {
      if (m.best_d >= 0 && std::abs(d - m.best_d) > 1) second = m.best_cost;
      m.best_cost = cost;
      m.best_d = d;
    } else if (std::abs(d - m.best_d) > 1 && cost < second) {
      second = cost;
    }
  }
  m.unique = m.best_d >= 0 && m.best_cost < second;
  return m;
}

}  // namespace

DisparityMap stereo_prior(const GrayImage& left, const GrayImage& right,
                          const StereoPriorConfig& config) {
  const CensusImage cl = census_transform(left);
  const CensusImage cr = census_transform(right);
  const int w = left.width, h = left.height;

  // Right-image disparities for the consistency check.
  std::vector<int> right_d(size_t(w) * h, -1);
  for (int y = CensusImage::kHalfY; y < h - CensusImage::kHalfY; ++y) {
    for (int x = CensusImage::kHalfX; x < w - CensusImage::kHalfX; ++x) {
      const auto m = scan_best(cr, cl, x, y, std::min(config.max_disparity, w - 1 - x), +1);
      if (m.best_d >= 0 && m.unique) right_d[size_t(y) * w + x] = m.best_d;
    }
  }

  DisparityMap out(w, h);
  for (int y = CensusImage::kHalfY; y < h - CensusImage::kHalfY; ++y) {
    for (int x = CensusImage::kHalfX; x < w - CensusImage::kHalfX; ++x) {
      const auto m = scan_best(cl, cr, x, y, std::min(config.max_disparity, x), -1);
      if (m.best_d < 0 || !m.unique) continue;
      const int xr = x - m.best_d;
      const int rd = right_d[size_t(y) * w + xr];
      if (rd < 0 || std::abs(rd - m.best_d) > config.lr_tolerance) continue;

      double d = m.best_d;
      if (config.subpixel && m.best_cost > 0 && m.best_d > 0 && x - m.best_d - 1 >= 0) {
        const int xm = x - (m.best_d - 1), xp = x - (m.best_d + 1);
        if (cr.valid_at(xm, y) && cr.valid_at(xp, y)) {
          const double cm = census_distance(cl.at(x, y), cr.at(xm, y));
          const double cp = census_distance(cl.at(x, y), cr.at(xp, y));
          const double denom = cm - 2.0 * m.best_cost + cp;
          if (denom > 1e-9) {
            d += std::clamp(0.5 * (cm - cp) / denom, -0.5, 0.5);
          }
        }
      }
      if (d >= 0.0 && d < w) out.at(x, y) = d;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plane fitting

std::vector<PlaneFit> fit_planes(const DisparityMap& disparity, const SuperpixelMap& spmap,
                                 const CameraRig& rig, const PlaneFitConfig& config,
                                 std::mt19937_64& rng) {
  const CameraIntrinsics& intr = rig.intrinsics;
  const double fb = intr.fx * rig.baseline();

  // Scene-wide median depth for superpixels without any valid disparity.
  std::vector<double> all_d;
  all_d.reserve(disparity.d.size() / 4);
  for (const double d : disparity.d) {
    if (d > 0.0) all_d.push_back(d);
  }
  double scene_median_depth = 10.0;
  if (!all_d.empty()) {
    std::nth_element(all_d.begin(), all_d.begin() + all_d.size() / 2, all_d.end());
    scene_median_depth = fb / all_d[all_d.size() / 2];
  }

  auto clamped_frontal = [&](double depth) {
    const double rho = std::clamp(1.0 / depth, config.min_inverse_depth, config.max_inverse_depth);
    return Plane{Vec3(0, 0, -rho)};
  };

  std::vector<PlaneFit> fits(spmap.count);
  std::vector<Vec2> px;
  std::vector<double> dvals;
  std::vector<Vec3> points;

  for (int sp = 0; sp < spmap.count; ++sp) {
    px.clear();
    dvals.clear();
    points.clear();
    const auto& region = spmap.regions[sp];
    const size_t stride = std::max<size_t>(1, region.size() / config.max_points);
    for (size_t k = 0; k < region.size(); k += stride) {
      const int x = region[k] % spmap.width;
      const int y = region[k] / spmap.width;
      const double d = disparity.at(x, y);
      if (d <= 0.0) continue;
      px.emplace_back(x, y);
      dvals.push_back(d);
      const double z = fb / d;
      points.push_back(intr.ray(Vec2(x, y)) * z);
    }

    if (points.size() < 3) {
      fits[sp] = {clamped_frontal(scene_median_depth), 0.0};
      continue;
    }

    std::vector<double> med = dvals;
    std::nth_element(med.begin(), med.begin() + med.size() / 2, med.end());
    const double median_depth = fb / med[med.size() / 2];

    std::uniform_int_distribution<size_t> pick(0, points.size() - 1);
    Vec3 best_n = Vec3::Zero();
    int best_inliers = -1;
    for (int it = 0; it < config.ransac_iterations; ++it) {
      const size_t i0 = pick(rng), i1 = pick(rng), i2 = pick(rng);
      if (i0 == i1 || i0 == i2 || i1 == i2) continue;
      Mat3 A;
      A.row(0) = points[i0].transpose();
      A.row(1) = points[i1].transpose();
      A.row(2) = points[i2].transpose();
      if (std::abs(A.determinant()) < 1e-9) continue;
      const Vec3 n = A.partialPivLu().solve(Vec3::Constant(-1.0));
      if (!n.allFinite()) continue;
      int inliers = 0;
      for (size_t k = 0; k < px.size(); ++k) {
        const double pred = fb * (-n.dot(intr.ray(px[k])));
        if (std::abs(pred - dvals[k]) <= config.inlier_threshold_px) ++inliers;
      }
      if (inliers > best_inliers) {
        best_inliers = inliers;
        best_n = n;
      }
    }

    const double ratio = best_inliers <= 0 ? 0.0 : double(best_inliers) / double(px.size());
    bool ok = ratio >= config.min_inlier_ratio;
    Vec3 n = best_n;

    if (ok) {
      // Least-squares refit on inliers, linear in n over disparities.
      MatX A(px.size(), 3);
      VecX b(px.size());
      int rows = 0;
      for (size_t k = 0; k < px.size(); ++k) {
        const double pred = fb * (-best_n.dot(intr.ray(px[k])));
        if (std::abs(pred - dvals[k]) > config.inlier_threshold_px) continue;
        A.row(rows) = -fb * intr.ray(px[k]).transpose();
        b(rows) = dvals[k];
        ++rows;
      }
      if (rows >= 3) {
        const Vec3 refit =
            (A.topRows(rows).transpose() * A.topRows(rows))
                .ldlt()
                .solve(A.topRows(rows).transpose() * b.head(rows));
        if (refit.allFinite()) n = refit;
      }
    }

    if (ok) {
      // Reject fits outside the representable band or with a degenerate
      // stereo homography.
      const Plane candidate{n};
      const double rho_c = -n.dot(intr.ray(spmap.centroids[sp]));
      if (!candidate.valid() || rho_c < config.min_inverse_depth ||
          rho_c > config.max_inverse_depth) {
        ok = false;
      } else {
        try {
          stereo_homography(candidate, rig);
        } catch (const DegenerateHomography&) {
          ok = false;
        }
      }
      if (ok) {
        fits[sp] = {candidate, ratio};
        continue;
      }
    }
    fits[sp] = {clamped_frontal(median_depth), 0.0};
  }
  return fits;
}

// ---------------------------------------------------------------------------
// Match sampling

SampledMatches sample_matches(const CensusImage& left, const CensusImage& right,
                              const DisparityMap& disparity, const SuperpixelMap& spmap,
                              int cap_per_superpixel, int max_bits) {
  SampledMatches out;
  std::vector<SampledMatch> candidates;
  for (int sp = 0; sp < spmap.count; ++sp) {
    candidates.clear();
    for (const int p : spmap.regions[sp]) {
      const int x = p % spmap.width;
      const int y = p / spmap.width;
      const double d = disparity.at(x, y);
      if (d < 0.0) continue;
      const int xr = static_cast<int>(std::lround(x - d));
      if (!left.valid_at(x, y) || !right.valid_at(xr, y)) continue;
      if (census_distance(left.at(x, y), right.at(xr, y)) > max_bits) continue;
      candidates.push_back({Vec2(x, y), Vec2(-d, 0.0), FramePair::Stereo0, sp});
    }
    if (candidates.empty()) continue;
    // Evenly spaced picks over the scan-ordered candidates keep the samples
    // spread across the region.
    const size_t take = std::min<size_t>(cap_per_superpixel, candidates.size());
    for (size_t k = 0; k < take; ++k) {
      out.samples.push_back(candidates[k * candidates.size() / take]);
    }
  }
  return out;
}

}  // namespace sflow
