#include "sflow/synthetic.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace sflow {

// ---------------------------------------------------------------------------
// Scene spec parsing

namespace {

Vec6 read_twist(std::istringstream& ls, const std::string& what, int line_no) {
  Vec6 xi;
  for (int i = 0; i < 6; ++i) {
    if (!(ls >> xi(i))) {
      throw ParseError("scene spec: bad " + what + " on line " + std::to_string(line_no));
    }
  }
  return xi;
}

}  // namespace

SceneSpec parse_scene_spec_text(const std::string& text, const std::string& origin) {
  SceneSpec spec;
  bool have_size = false, have_calib = false;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;

    if (key == "size") {
      if (!(ls >> spec.width >> spec.height) || spec.width <= 0 || spec.height <= 0) {
        throw ParseError("scene spec: bad size on line " + std::to_string(line_no));
      }
      have_size = true;
    } else if (key == "calib") {
      double fx, fy, cx, cy, baseline;
      if (!(ls >> fx >> fy >> cx >> cy >> baseline) || fx <= 0 || fy <= 0 || baseline <= 0) {
        throw ParseError("scene spec: bad calib on line " + std::to_string(line_no));
      }
      spec.rig = CameraRig::rectified({fx, fy, cx, cy}, baseline);
      have_calib = true;
    } else if (key == "camera") {
      spec.camera_motion = se3_exp(read_twist(ls, "camera twist", line_no));
    } else if (key == "texture") {
      if (!(ls >> spec.texture_wavelength >> spec.texture_octaves >> spec.texture_contrast)) {
        throw ParseError("scene spec: bad texture on line " + std::to_string(line_no));
      }
    } else if (key == "plane") {
      PlaneSpecEntry p;
      std::string tag;
      if (!(ls >> p.x0 >> p.y0 >> p.x1 >> p.y1 >> tag) || tag != "normal") {
        throw ParseError("scene spec: bad plane on line " + std::to_string(line_no));
      }
      if (!(ls >> p.plane.n.x() >> p.plane.n.y() >> p.plane.n.z())) {
        throw ParseError("scene spec: bad plane normal on line " + std::to_string(line_no));
      }
      if (ls >> tag) {
        if (tag != "motion") {
          throw ParseError("scene spec: unexpected token '" + tag + "' on line " +
                           std::to_string(line_no));
        }
        const Vec6 xi = read_twist(ls, "plane motion", line_no);
        p.object_motion = se3_exp(xi);
        p.is_object = xi.norm() > 0.0;
      }
      if (!p.plane.valid()) {
        throw ParseError("scene spec: invalid plane normal on line " + std::to_string(line_no));
      }
      spec.planes.push_back(p);
    } else {
      throw ParseError("scene spec: unknown key '" + key + "' on line " + std::to_string(line_no) +
                       " of " + origin);
    }
  }
  if (!have_size || !have_calib || spec.planes.empty()) {
    throw ParseError("scene spec: missing size/calib/plane sections in " + origin);
  }
  return spec;
}

SceneSpec parse_scene_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("scene spec: cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_scene_spec_text(buffer.str(), path);
}

std::string scene_spec_to_text(const SceneSpec& spec) {
  std::ostringstream out;
  out.precision(17);
  out << "size " << spec.width << " " << spec.height << "\n";
  const auto& intr = spec.rig.intrinsics;
  out << "calib " << intr.fx << " " << intr.fy << " " << intr.cx << " " << intr.cy << " "
      << spec.rig.baseline() << "\n";
  const Vec6 cam = se3_log(spec.camera_motion);
  out << "camera";
  for (int i = 0; i < 6; ++i) out << " " << cam(i);
  out << "\n";
  out << "texture " << spec.texture_wavelength << " " << spec.texture_octaves << " "
      << spec.texture_contrast << "\n";
  for (const auto& p : spec.planes) {
    out << "plane " << p.x0 << " " << p.y0 << " " << p.x1 << " " << p.y1 << " normal "
        << p.plane.n.x() << " " << p.plane.n.y() << " " << p.plane.n.z();
    const Vec6 xi = se3_log(p.object_motion);
    if (xi.norm() > 0.0) {
      out << " motion";
      for (int i = 0; i < 6; ++i) out << " " << xi(i);
    }
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Procedural texture: smooth value noise over the 3D material coordinates of
// each plane, hashed so every (seed, plane, octave) has its own field.

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double lattice_value(uint64_t seed, int64_t ix, int64_t iy, int64_t iz) {
  uint64_t h = seed;
  h = splitmix64(h ^ uint64_t(ix) * 0x8da6b343ull);
  h = splitmix64(h ^ uint64_t(iy) * 0xd8163841ull);
  h = splitmix64(h ^ uint64_t(iz) * 0xcb1ab31full);
  return double(h >> 11) * (1.0 / 9007199254740992.0);   // [0, 1)
}

double smooth(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

double value_noise(uint64_t seed, const Vec3& p) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const int64_t ix = int64_t(fx), iy = int64_t(fy), iz = int64_t(fz);
  const double tx = smooth(p.x() - fx), ty = smooth(p.y() - fy), tz = smooth(p.z() - fz);
  double acc = 0.0;
  for (int dz = 0; dz <= 1; ++dz) {
    for (int dy = 0; dy <= 1; ++dy) {
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
        acc += w * lattice_value(seed, ix + dx, iy + dy, iz + dz);
      }
    }
  }
  return acc;
}

class PlaneTexture {
 public:
  PlaneTexture(const SceneSpec& spec, uint64_t seed) : spec_(spec) {
    for (size_t k = 0; k < spec.planes.size(); ++k) {
      seeds_.push_back(splitmix64(seed ^ splitmix64(0x517cc1b727220a95ull + k)));
    }
  }

  double at(int plane, const Vec3& material_point) const {
    double acc = 0.0;
    double weight = 0.65;
    double freq = 1.0 / spec_.texture_wavelength;
    double total = 0.0;
    for (int o = 0; o < spec_.texture_octaves; ++o) {
      acc += weight * value_noise(splitmix64(seeds_[plane] + o), material_point * freq);
      total += weight;
      weight *= 0.5;
      freq *= 2.0;
    }
    const double v = 0.5 + spec_.texture_contrast * (acc / total - 0.5);
    return std::clamp(v, 0.01, 0.99);
  }

 private:
  const SceneSpec& spec_;
  std::vector<uint64_t> seeds_;
};

// Local projective helpers, deliberately independent of the geometry module.
Vec3 local_ray(const CameraIntrinsics& intr, double u, double v) {
  return Vec3((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
}

Vec2 local_project(const CameraIntrinsics& intr, const Vec3& x) {
  return Vec2(intr.fx * x.x() / x.z() + intr.cx, intr.fy * x.y() / x.z() + intr.cy);
}

// Plane of {n.x + 1 = 0} after its points move by [R|t]; false when the
// transformed plane passes through the camera origin.
bool transformed_plane(const Vec3& n, const Mat3& R, const Vec3& t, Vec3* out) {
  const double denom = 1.0 - n.dot(R.transpose() * t);
  if (std::abs(denom) < 1e-12) return false;
  *out = (R * n) / denom;
  return true;
}

}  // namespace

SyntheticScene generate_synthetic(const SceneSpec& spec, uint64_t seed) {
  SyntheticScene scene;
  scene.spec = spec;
  const int w = spec.width, h = spec.height;
  const int num_planes = static_cast<int>(spec.planes.size());
  const CameraIntrinsics& intr = spec.rig.intrinsics;
  const double fb = intr.fx * spec.rig.baseline();

  scene.full_motions.reserve(num_planes);
  for (const auto& p : spec.planes) {
    scene.full_motions.push_back(spec.camera_motion * p.object_motion);
  }

  // Reference-pixel ownership: nearest plane among the rectangles holding the
  // pixel. Every pixel must be covered.
  scene.gt_labels.assign(size_t(w) * h, -1);
  std::vector<double> ref_inv_depth(size_t(w) * h, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double best_z = 1e300;
      int best_k = -1;
      for (int k = 0; k < num_planes; ++k) {
        const auto& p = spec.planes[k];
        if (x < p.x0 || x >= p.x1 || y < p.y0 || y >= p.y1) continue;
        const double rho = -p.plane.n.dot(local_ray(intr, x, y));
        if (rho <= 1e-9) continue;
        const double z = 1.0 / rho;
        if (z < best_z) {
          best_z = z;
          best_k = k;
        }
      }
      if (best_k < 0) {
        throw SpecError("generate_synthetic: uncovered pixel (" + std::to_string(x) + ", " +
                        std::to_string(y) + ")");
      }
      scene.gt_labels[size_t(y) * w + x] = best_k;
      ref_inv_depth[size_t(y) * w + x] = 1.0 / best_z;
    }
  }

  const PlaneTexture texture(spec, seed);
  const PoseSE3 identity;
  const PoseSE3& stereo = spec.rig.stereo_transform;

  // view_map(k) = transform from reference-frame-t coordinates to the view.
  struct View {
    GrayImage* image;
    std::vector<PoseSE3> maps;   // per plane
    std::vector<double> zbuf;
  };
  auto per_plane = [&](const PoseSE3& pre, bool with_motion) {
    std::vector<PoseSE3> maps(num_planes);
    for (int k = 0; k < num_planes; ++k) {
      maps[k] = with_motion ? pre * scene.full_motions[k] : pre;
    }
    return maps;
  };

  scene.left0 = GrayImage(w, h);
  scene.right0 = GrayImage(w, h);
  scene.left1 = GrayImage(w, h);
  scene.right1 = GrayImage(w, h);
  std::vector<View> views;
  views.push_back({&scene.left0, per_plane(identity, false), {}});
  views.push_back({&scene.right0, per_plane(stereo, false), {}});
  views.push_back({&scene.left1, per_plane(identity, true), {}});
  views.push_back({&scene.right1, per_plane(stereo, true), {}});

  for (auto& view : views) {
    view.zbuf.assign(size_t(w) * h, 1e300);
    // Per-plane normals in view coordinates.
    std::vector<Vec3> view_normals(num_planes);
    std::vector<uint8_t> visible(num_planes, 0);
    for (int k = 0; k < num_planes; ++k) {
      visible[k] =
          transformed_plane(spec.planes[k].plane.n, view.maps[k].R, view.maps[k].t, &view_normals[k]);
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double best_z = 1e300;
        int best_k = -1;
        Vec3 best_material = Vec3::Zero();
        for (int k = 0; k < num_planes; ++k) {
          if (!visible[k]) continue;
          const Vec3 ray = local_ray(intr, x, y);
          const double rho = -view_normals[k].dot(ray);
          if (rho <= 1e-9) continue;
          const double z = 1.0 / rho;
          if (z >= best_z) continue;
          const Vec3 point = ray * z;
          // Material point back in the reference frame at t.
          const PoseSE3 inv = view.maps[k].inverse();
          const Vec3 material = inv * point;
          if (material.z() <= 1e-9) continue;
          const Vec2 ref_px = local_project(intr, material);
          const int rx = static_cast<int>(std::lround(ref_px.x()));
          const int ry = static_cast<int>(std::lround(ref_px.y()));
          if (rx < 0 || rx >= w || ry < 0 || ry >= h) continue;
          if (scene.gt_labels[size_t(ry) * w + rx] != k) continue;
          best_z = z;
          best_k = k;
          best_material = material;
        }
        if (best_k >= 0) {
          view.image->at(x, y) = texture.at(best_k, best_material);
          view.zbuf[size_t(y) * w + x] = best_z;
        }
      }
    }
  }

  scene.view_disparity1 = DisparityMap(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double z = views[2].zbuf[size_t(y) * w + x];
      if (z < 1e299) scene.view_disparity1.at(x, y) = fb / z;
    }
  }

  // Ground truth and visibility from the reference pixels.
  scene.gt_d1 = DisparityMap(w, h);
  scene.gt_d2 = DisparityMap(w, h);
  scene.gt_flow = FlowMap(w, h);
  scene.noc_mask.width = scene.fg_mask.width = w;
  scene.noc_mask.height = scene.fg_mask.height = h;
  scene.noc_mask.on.assign(size_t(w) * h, 0);
  scene.fg_mask.on.assign(size_t(w) * h, 0);

  auto visible_in = [&](const View& view, const PoseSE3& map, const Vec3& x0) {
    const Vec3 y = map * x0;
    if (y.z() <= 1e-9) return false;
    const Vec2 q = local_project(intr, y);
    const int qx = static_cast<int>(std::lround(q.x()));
    const int qy = static_cast<int>(std::lround(q.y()));
    if (q.x() < 1.0 || q.x() >= w - 2.0 || q.y() < 1.0 || q.y() >= h - 2.0) return false;
    const double zbuf = view.zbuf[size_t(qy) * w + qx];
    return std::abs(zbuf - y.z()) <= std::max(1e-3, 0.01 * y.z());
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int k = scene.gt_labels[size_t(y) * w + x];
      const double rho0 = ref_inv_depth[size_t(y) * w + x];
      const Vec3 x0 = local_ray(intr, x, y) / rho0;
      scene.gt_d1.at(x, y) = fb * rho0;
      const Vec3 y1 = scene.full_motions[k] * x0;
      if (y1.z() > 1e-9) {
        const Vec2 q = local_project(intr, y1);
        scene.gt_flow.set(x, y, q - Vec2(x, y));
        scene.gt_d2.at(x, y) = fb / y1.z();
      }
      if (spec.planes[k].is_object) scene.fg_mask.on[size_t(y) * w + x] = 1;

      const bool vis = visible_in(views[1], views[1].maps[k], x0) &&
                       visible_in(views[2], views[2].maps[k], x0) &&
                       visible_in(views[3], views[3].maps[k], x0);
      if (vis) scene.noc_mask.on[size_t(y) * w + x] = 1;
    }
  }
  return scene;
}

}  // namespace sflow
