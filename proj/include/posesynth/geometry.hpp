#pragma once

#include <cmath>
#include <string>
#include <utility>

namespace posesynth {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  double l1() const { return std::abs(x) + std::abs(y) + std::abs(z); }
};

// row-major 3x3
struct Mat3 {
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  double& operator()(int r, int c) { return m[r * 3 + c]; }
  double operator()(int r, int c) const { return m[r * 3 + c]; }

  static Mat3 identity() { return {}; }

  Mat3 transpose() const {
    Mat3 t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
    return t;
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 p;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (*this)(r, k) * o(k, c);
        p(r, c) = s;
      }
    return p;
  }
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

// camera-to-world: x_world = R * x_cam + center
struct Pose {
  Quaternion rotation;
  Vec3 center;
};

struct RelativePose {
  Quaternion q_rel;
  Vec3 t_rel;
};

struct PixelCoord {
  int u = 0, v = 0;
  bool operator==(const PixelCoord& o) const { return u == o.u && v == o.v; }
};

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  bool contains(PixelCoord p) const {
    return p.u >= 0 && p.u < width && p.v >= 0 && p.v < height;
  }
};

enum class PixelRounding { kFloor, kNearest };

struct Projection {
  PixelCoord pixel;
  double depth = 0.0;  // z in the camera frame
  bool in_front = false;
  bool in_bounds = false;
};

Quaternion quat_normalize(const Quaternion& q);
Quaternion quat_multiply(const Quaternion& a, const Quaternion& b);
Quaternion quat_conjugate(const Quaternion& q);
double quat_dot(const Quaternion& a, const Quaternion& b);
Vec3 quat_rotate(const Quaternion& q, const Vec3& v);
Quaternion quat_from_axis_angle(const Vec3& axis, double radians);

Mat3 quat_to_matrix(const Quaternion& q);
Quaternion matrix_to_quat(const Mat3& r);

// heading of the camera's forward axis (+z of the camera frame) in the world
// x/y plane, degrees in [0, 360)
double yaw_deg(const Quaternion& q);

Vec3 unproject(PixelCoord p, double depth, const Intrinsics& k, const Pose& c);
Projection project(const Vec3& x, const Intrinsics& k, const Pose& c,
                   PixelRounding rounding = PixelRounding::kFloor);

RelativePose relative_pose(const Pose& query, const Pose& nn);
Pose compose_absolute(const Pose& nn, const RelativePose& rel);
double angular_error_deg(const Quaternion& a, const Quaternion& b);

std::string pose_to_line(const std::string& image_rel_path, const Pose& pose);
std::pair<std::string, Pose> pose_from_line(const std::string& line);
std::string intrinsics_to_line(const Intrinsics& k);
Intrinsics intrinsics_from_line(const std::string& line);

}  // namespace posesynth
