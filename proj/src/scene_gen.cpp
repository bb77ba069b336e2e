#include <algorithm>
#include <cmath>
#include <cstdio>

#include "posesynth/dataset.hpp"
#include "posesynth/errors.hpp"

namespace posesynth {
namespace {

Vec3 clamp01(Vec3 c) {
  auto cl = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
  return {cl(c.x), cl(c.y), cl(c.z)};
}

// Axis-aligned textured quad. The plane is <axis> = value; in-plane coords are
// the other two axes in cyclic order (a = axis+1, b = axis+2). Checker pattern
// plus color ramps along each in-plane coord give every surface point a
// locally distinctive appearance, which retrieval and regression both need.
struct Quad {
  int axis = 2;
  double value = 0.0;
  double lo_a = 0.0, hi_a = 1.0, lo_b = 0.0, hi_b = 1.0;
  Vec3 c0, c1;
  double checker = 1.0;
  Vec3 ramp_a, ramp_b;

  Vec3 color(double a, double b) const {
    double pa = std::floor(a / checker), pb = std::floor(b / checker);
    Vec3 base = (static_cast<long long>(pa + pb) & 1) == 0 ? c0 : c1;
    double fa = (a - lo_a) / (hi_a - lo_a) - 0.5;
    double fb = (b - lo_b) / (hi_b - lo_b) - 0.5;
    return clamp01(base + ramp_a * fa + ramp_b * fb);
  }
};

struct Hit {
  double t = 0.0;
  const Quad* quad = nullptr;
  double a = 0.0, b = 0.0;
};

constexpr double kNearClip = 0.05;

bool cast_ray(const std::vector<Quad>& quads, const Vec3& org, const Vec3& dir,
              Hit& best) {
  best.quad = nullptr;
  best.t = 1e30;
  const double* o = &org.x;
  const double* d = &dir.x;
  for (const Quad& q : quads) {
    double denom = d[q.axis];
    if (std::abs(denom) < 1e-12) continue;
    double t = (q.value - o[q.axis]) / denom;
    if (t < kNearClip || t >= best.t) continue;
    int ia = (q.axis + 1) % 3, ib = (q.axis + 2) % 3;
    double a = o[ia] + t * d[ia];
    double b = o[ib] + t * d[ib];
    if (a < q.lo_a || a > q.hi_a || b < q.lo_b || b > q.hi_b) continue;
    best = {t, &q, a, b};
  }
  return best.quad != nullptr;
}

// walls of a box [lo,hi]^2 x [0,height] facing into the interior
void add_box_walls(std::vector<Quad>& quads, double lo, double hi, double height,
                   const Vec3 base_colors[4], double checkers[4]) {
  // +x wall: in-plane (y, z); ramp along y codes the horizontal position
  quads.push_back({0, hi, lo, hi, 0, height, base_colors[0],
                   base_colors[0] * 0.6, checkers[0],
                   {0.25, 0.2, -0.15}, {0.0, 0.0, 0.1}});
  quads.push_back({0, lo, lo, hi, 0, height, base_colors[1],
                   base_colors[1] * 0.6, checkers[1],
                   {-0.2, 0.25, 0.15}, {0.0, 0.0, 0.1}});
  // +y wall: in-plane (z, x); horizontal ramp goes on the b coordinate
  quads.push_back({1, hi, 0, height, lo, hi, base_colors[2],
                   base_colors[2] * 0.6, checkers[2],
                   {0.0, 0.0, 0.1}, {0.2, -0.15, 0.25}});
  quads.push_back({1, lo, 0, height, lo, hi, base_colors[3],
                   base_colors[3] * 0.6, checkers[3],
                   {0.0, 0.0, 0.1}, {-0.25, 0.2, 0.2}});
}

std::vector<Quad> street_quads() {
  std::vector<Quad> quads;
  // ground
  quads.push_back({2, 0.0, -24, 24, -24, 24, {0.50, 0.46, 0.40},
                   {0.58, 0.55, 0.50}, 2.0, {0.12, 0.0, -0.08}, {0.0, 0.08, 0.05}});
  // tall perimeter: closes the sky for level cameras on the walk ring
  Vec3 outer[4] = {{0.75, 0.25, 0.20}, {0.25, 0.65, 0.30},
                   {0.20, 0.35, 0.80}, {0.85, 0.75, 0.25}};
  double outer_chk[4] = {2.5, 1.5, 2.0, 3.0};
  add_box_walls(quads, -24, 24, 25.0, outer, outer_chk);
  // central block the walks circle around
  Vec3 block[4] = {{0.60, 0.40, 0.60}, {0.35, 0.55, 0.55},
                   {0.60, 0.50, 0.35}, {0.45, 0.45, 0.50}};
  double block_chk[4] = {1.0, 0.8, 1.2, 0.9};
  add_box_walls(quads, -8, 8, 8.0, block, block_chk);
  quads.push_back({2, 8.0, -8, 8, -8, 8, {0.4, 0.4, 0.42}, {0.3, 0.3, 0.32},
                   2.0, {}, {}});
  return quads;
}

std::vector<Quad> room_quads() {
  std::vector<Quad> quads;
  quads.push_back({2, 0.0, -4, 4, -4, 4, {0.55, 0.42, 0.30}, {0.42, 0.32, 0.22},
                   0.5, {0.1, 0.05, 0.0}, {0.0, 0.1, 0.05}});
  quads.push_back({2, 3.0, -4, 4, -4, 4, {0.90, 0.90, 0.85}, {0.80, 0.80, 0.78},
                   1.0, {0.05, 0.0, 0.05}, {0.0, 0.05, 0.0}});
  Vec3 walls[4] = {{0.70, 0.35, 0.30}, {0.35, 0.60, 0.35},
                   {0.30, 0.40, 0.70}, {0.75, 0.65, 0.30}};
  double chk[4] = {0.6, 0.45, 0.75, 0.55};
  add_box_walls(quads, -4, 4, 3.0, walls, chk);
  return quads;
}

struct TrajectoryPoint {
  Pose pose;
};

std::vector<TrajectoryPoint> street_train(int n, Rng& rng) {
  // four straight walks around the ring, one heading each
  const Vec3 starts[4] = {{-12, -12, 0}, {12, -12, 0}, {12, 12, 0}, {-12, 12, 0}};
  const Vec3 dirs[4] = {{1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}};
  std::vector<TrajectoryPoint> out;
  for (int w = 0; w < 4; ++w) {
    int count = n / 4 + (w < n % 4 ? 1 : 0);
    Vec3 lateral{-dirs[w].y, dirs[w].x, 0};
    for (int j = 0; j < count; ++j) {
      double s = (j + 0.5) / count * 24.0 + rng.normal(0.2);
      Vec3 c = starts[w] + dirs[w] * s + lateral * rng.normal(0.25);
      c.z = 1.6 + rng.normal(0.03);
      double heading = 90.0 * w + rng.normal(2.0);
      out.push_back({level_pose(heading, c)});
    }
  }
  return out;
}

std::vector<TrajectoryPoint> street_test(int n, Rng& rng) {
  // same walk ring, but headings drawn uniformly: the probe for training bias
  const Vec3 starts[4] = {{-12, -12, 0}, {12, -12, 0}, {12, 12, 0}, {-12, 12, 0}};
  const Vec3 dirs[4] = {{1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}};
  std::vector<TrajectoryPoint> out;
  for (int j = 0; j < n; ++j) {
    int w = rng.uniform_int(0, 3);
    Vec3 lateral{-dirs[w].y, dirs[w].x, 0};
    Vec3 c = starts[w] + dirs[w] * rng.uniform(0.0, 24.0) + lateral * rng.normal(0.25);
    c.z = 1.6 + rng.normal(0.03);
    out.push_back({level_pose(rng.uniform(0.0, 360.0), c)});
  }
  return out;
}

std::vector<TrajectoryPoint> ring_poses(int n, Rng& rng, double radius,
                                        double height, bool inward,
                                        bool spaced) {
  std::vector<TrajectoryPoint> out;
  for (int j = 0; j < n; ++j) {
    double angle = spaced ? 360.0 * (j + 0.5) / n + rng.normal(1.0)
                          : rng.uniform(0.0, 360.0);
    double rad = deg_to_rad(angle);
    Vec3 c{radius * std::cos(rad), radius * std::sin(rad), height + rng.normal(0.02)};
    double heading = inward ? angle + 180.0 : angle;
    out.push_back({level_pose(heading + rng.normal(2.0), c)});
  }
  return out;
}

}  // namespace

SceneSpec SceneSpec::biased_street() { return {}; }

SceneSpec SceneSpec::uniform_orbit() {
  SceneSpec s;
  s.preset = Preset::kUniformOrbit;
  return s;
}

SceneSpec SceneSpec::indoor_room() {
  SceneSpec s;
  s.preset = Preset::kIndoorRoom;
  s.train_count = 160;
  s.test_count = 40;
  s.sparse_keep_rate = 0.8;
  s.scene_scale = 2.0;
  s.indoor = true;
  return s;
}

SceneSpec SceneSpec::by_name(const std::string& name) {
  if (name == "biased-street") return biased_street();
  if (name == "uniform-orbit") return uniform_orbit();
  if (name == "indoor-room") return indoor_room();
  throw ConfigError("unknown scene preset: " + name);
}

std::string SceneSpec::name() const {
  switch (preset) {
    case Preset::kBiasedStreet: return "biased-street";
    case Preset::kUniformOrbit: return "uniform-orbit";
    case Preset::kIndoorRoom: return "indoor-room";
  }
  return "unknown";
}

SceneDatabase generate_scene(const SceneSpec& spec, uint64_t seed) {
  if (spec.train_count <= 0) throw EmptyScene("train_count must be positive");

  std::vector<Quad> quads =
      spec.preset == SceneSpec::Preset::kIndoorRoom ? room_quads() : street_quads();
  if (quads.empty()) throw EmptyScene("preset produced no geometry");

  int size = spec.image_size;
  Intrinsics k{static_cast<double>(size), static_cast<double>(size),
               size / 2.0, size / 2.0, size, size};

  Rng traj_rng(Rng::derive(seed, {0}));
  std::vector<TrajectoryPoint> train, test;
  switch (spec.preset) {
    case SceneSpec::Preset::kBiasedStreet:
      train = street_train(spec.train_count, traj_rng);
      test = street_test(spec.test_count, traj_rng);
      break;
    case SceneSpec::Preset::kUniformOrbit:
      train = ring_poses(spec.train_count, traj_rng, 13.0, 1.6, true, true);
      test = ring_poses(spec.test_count, traj_rng, 13.0, 1.6, true, false);
      break;
    case SceneSpec::Preset::kIndoorRoom:
      train = ring_poses(spec.train_count, traj_rng, 1.8, 1.5, false, true);
      test = ring_poses(spec.test_count, traj_rng, 1.8, 1.5, false, false);
      break;
  }

  SceneDatabase db;
  size_t total = train.size() + test.size();
  db.records.reserve(total);
  db.split.reserve(total);

  for (size_t i = 0; i < total; ++i) {
    bool is_train = i < train.size();
    const Pose& pose = is_train ? train[i].pose : test[i - train.size()].pose;

    SceneRecord r;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "img_%04zu", i);
    r.id = idbuf;
    r.pose = pose;
    r.intrinsics = k;
    r.image = ImageBuffer::filled(size, size, 184 / 255.0, 212 / 255.0, 242 / 255.0);
    DepthMap dense = DepthMap::invalid_sized(size, size);

    Hit hit;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        Vec3 dir_cam{(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0};
        Vec3 dir = quat_rotate(pose.rotation, dir_cam);
        if (!cast_ray(quads, pose.center, dir, hit)) continue;
        Vec3 col = hit.quad->color(hit.a, hit.b);
        // quantize to the 8-bit grid now so the png round trip is exact
        r.image.at(x, y, 0) = std::round(col.x * 255.0) / 255.0;
        r.image.at(x, y, 1) = std::round(col.y * 255.0) / 255.0;
        r.image.at(x, y, 2) = std::round(col.z * 255.0) / 255.0;
        dense.depth[dense.idx(x, y)] = hit.t;
        dense.valid[dense.idx(x, y)] = 1;
      }

    Rng mask_rng(Rng::derive(seed, {1, i, 0}));
    r.sparse_depth = DepthMap::invalid_sized(size, size);
    for (size_t p = 0; p < dense.depth.size(); ++p) {
      double draw = mask_rng.uniform();
      if (dense.valid[p] && draw < spec.sparse_keep_rate) {
        r.sparse_depth.depth[p] = dense.depth[p];
        r.sparse_depth.valid[p] = 1;
      }
    }

    Rng affine_rng(Rng::derive(seed, {1, i, 1}));
    r.affine_a = affine_rng.uniform(0.5, 2.0);
    r.affine_b = affine_rng.uniform(-0.2, 0.2) * spec.scene_scale;
    r.dense_depth_affine = DepthMap::invalid_sized(size, size);
    for (size_t p = 0; p < dense.depth.size(); ++p) {
      if (!dense.valid[p]) continue;
      double v = r.affine_a * dense.depth[p] + r.affine_b +
                 affine_rng.normal(spec.noise_sigma_frac * dense.depth[p]);
      if (v > 0.0) {
        r.dense_depth_affine.depth[p] = v;
        r.dense_depth_affine.valid[p] = 1;
      }
    }

    r.descriptor = compute_descriptor(r.image);
    db.records.push_back(std::move(r));
    db.split.push_back(is_train ? Split::kTrain : Split::kTest);
  }
  return db;
}

}  // namespace posesynth
