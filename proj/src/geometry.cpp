#include "posesynth/geometry.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "posesynth/errors.hpp"
#include "posesynth/util.hpp"

namespace posesynth {
namespace {

// q and -q encode the same rotation; pick the representative with w >= 0 so
// losses and error metrics are single-valued. At w == 0 fall through to the
// first nonzero component to keep the choice deterministic.
Quaternion canonical_sign(Quaternion q) {
  double lead = q.w;
  if (lead == 0.0) lead = q.x != 0.0 ? q.x : (q.y != 0.0 ? q.y : q.z);
  if (lead < 0.0) return {-q.w, -q.x, -q.y, -q.z};
  return q;
}

}  // namespace

Quaternion quat_normalize(const Quaternion& q) {
  double n = q.norm();
  if (!(n > 1e-12)) throw ZeroQuaternion("quaternion norm " + std::to_string(n));
  return canonical_sign({q.w / n, q.x / n, q.y / n, q.z / n});
}

Quaternion quat_multiply(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quaternion quat_conjugate(const Quaternion& q) { return {q.w, -q.x, -q.y, -q.z}; }

double quat_dot(const Quaternion& a, const Quaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

Vec3 quat_rotate(const Quaternion& q, const Vec3& v) {
  // v' = v + 2 u x (u x v + w v), u = (x, y, z)
  Vec3 u{q.x, q.y, q.z};
  Vec3 t = u.cross(v) * 2.0;
  return v + t * q.w + u.cross(t);
}

Quaternion quat_from_axis_angle(const Vec3& axis, double radians) {
  double n = axis.norm();
  if (!(n > 1e-12)) throw ZeroQuaternion("axis norm " + std::to_string(n));
  double h = radians * 0.5;
  double s = std::sin(h) / n;
  return quat_normalize({std::cos(h), axis.x * s, axis.y * s, axis.z * s});
}

Mat3 quat_to_matrix(const Quaternion& q) {
  double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r(0, 0) = 1 - 2 * (y * y + z * z);
  r(0, 1) = 2 * (x * y - w * z);
  r(0, 2) = 2 * (x * z + w * y);
  r(1, 0) = 2 * (x * y + w * z);
  r(1, 1) = 1 - 2 * (x * x + z * z);
  r(1, 2) = 2 * (y * z - w * x);
  r(2, 0) = 2 * (x * z - w * y);
  r(2, 1) = 2 * (y * z + w * x);
  r(2, 2) = 1 - 2 * (x * x + y * y);
  return r;
}

Quaternion matrix_to_quat(const Mat3& r) {
  Mat3 gram = r.transpose() * r;
  double dev = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      dev = std::max(dev, std::abs(gram(i, j) - (i == j ? 1.0 : 0.0)));
  if (dev > 1e-6) throw NotARotation("orthonormality deviation " + std::to_string(dev));
  if (r.det() < 0.0) throw NotARotation("negative determinant");

  // branch on the largest of (trace, diagonal entries) for stability
  double t = r(0, 0) + r(1, 1) + r(2, 2);
  Quaternion q;
  if (t > r(0, 0) && t > r(1, 1) && t > r(2, 2)) {
    double s = std::sqrt(t + 1.0) * 2.0;
    q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s,
         (r(1, 0) - r(0, 1)) / s};
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
    q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s,
         (r(0, 2) + r(2, 0)) / s};
  } else if (r(1, 1) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
    q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s,
         (r(1, 2) + r(2, 1)) / s};
  } else {
    double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
    q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s,
         (r(1, 2) + r(2, 1)) / s, 0.25 * s};
  }
  return quat_normalize(q);
}

double yaw_deg(const Quaternion& q) {
  Vec3 f = quat_rotate(q, {0, 0, 1});
  double deg = rad_to_deg(std::atan2(f.y, f.x));
  if (deg < 0.0) deg += 360.0;
  if (deg >= 360.0) deg -= 360.0;
  return deg;
}

Vec3 unproject(PixelCoord p, double depth, const Intrinsics& k, const Pose& c) {
  if (!(depth > 0.0) || !std::isfinite(depth))
    throw InvalidDepth("depth " + std::to_string(depth));
  Vec3 ray{(p.u - k.cx) / k.fx, (p.v - k.cy) / k.fy, 1.0};
  return quat_rotate(c.rotation, ray * depth) + c.center;
}

namespace {

// Dehomogenization floors, but an exact-integer quotient lands on the floor
// discontinuity and FP jitter from the rotate/divide round trip would push it
// down a pixel. Snap values within 1e-9 of an integer before flooring.
int snap_floor(double v) {
  double r = std::round(v);
  if (std::abs(v - r) < 1e-9) return static_cast<int>(r);
  return static_cast<int>(std::floor(v));
}

}  // namespace

Projection project(const Vec3& x, const Intrinsics& k, const Pose& c,
                   PixelRounding rounding) {
  Vec3 cam = quat_rotate(quat_conjugate(c.rotation), x - c.center);
  Projection out;
  out.depth = cam.z;
  out.in_front = cam.z > 0.0;
  if (!out.in_front) return out;
  double u = k.fx * cam.x / cam.z + k.cx;
  double v = k.fy * cam.y / cam.z + k.cy;
  if (rounding == PixelRounding::kNearest) {
    out.pixel = {static_cast<int>(std::lround(u)), static_cast<int>(std::lround(v))};
  } else {
    out.pixel = {snap_floor(u), snap_floor(v)};
  }
  out.in_bounds = k.contains(out.pixel);
  return out;
}

RelativePose relative_pose(const Pose& query, const Pose& nn) {
  Quaternion q = quat_multiply(quat_conjugate(query.rotation), nn.rotation);
  return {quat_normalize(q), query.center - nn.center};
}

Pose compose_absolute(const Pose& nn, const RelativePose& rel) {
  Quaternion q = quat_multiply(nn.rotation, quat_conjugate(rel.q_rel));
  return {quat_normalize(q), nn.center + rel.t_rel};
}

double angular_error_deg(const Quaternion& a, const Quaternion& b) {
  // same value as 2 acos(min(1, |a.b|)) but atan2 keeps precision near zero,
  // where acos of a dot product saturates around 1e-6 degrees
  Quaternion rel = quat_multiply(a, quat_conjugate(b));
  double vec = std::sqrt(rel.x * rel.x + rel.y * rel.y + rel.z * rel.z);
  return rad_to_deg(2.0 * std::atan2(vec, std::abs(rel.w)));
}

std::string pose_to_line(const std::string& image_rel_path, const Pose& pose) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%s %.17g %.17g %.17g %.17g %.17g %.17g %.17g",
                image_rel_path.c_str(), pose.rotation.w, pose.rotation.x,
                pose.rotation.y, pose.rotation.z, pose.center.x, pose.center.y,
                pose.center.z);
  return buf;
}

std::pair<std::string, Pose> pose_from_line(const std::string& line) {
  std::istringstream in(line);
  std::string path;
  Pose p;
  in >> path >> p.rotation.w >> p.rotation.x >> p.rotation.y >> p.rotation.z >>
      p.center.x >> p.center.y >> p.center.z;
  if (!in) throw CorruptFile("bad pose line: " + line);
  return {path, p};
}

std::string intrinsics_to_line(const Intrinsics& k) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %d %d", k.fx, k.fy,
                k.cx, k.cy, k.width, k.height);
  return buf;
}

Intrinsics intrinsics_from_line(const std::string& line) {
  std::istringstream in(line);
  Intrinsics k;
  in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height;
  if (!in) throw CorruptFile("bad intrinsics line: " + line);
  return k;
}

}  // namespace posesynth
