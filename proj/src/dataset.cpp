#include "posesynth/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "posesynth/errors.hpp"
#include "posesynth/kernels.hpp"
#include "posesynth/png_io.hpp"

namespace fs = std::filesystem;

namespace posesynth {

size_t SceneDatabase::index_of(const std::string& id) const {
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].id == id) return i;
  throw Error("no record with id " + id);
}

std::vector<size_t> SceneDatabase::train_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < records.size(); ++i)
    if (split[i] == Split::kTrain) out.push_back(i);
  return out;
}

std::vector<size_t> SceneDatabase::test_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < records.size(); ++i)
    if (split[i] == Split::kTest) out.push_back(i);
  return out;
}

Pose level_pose(double heading_deg, const Vec3& center) {
  double phi = deg_to_rad(heading_deg);
  Vec3 fwd{std::cos(phi), std::sin(phi), 0.0};
  Vec3 down{0.0, 0.0, -1.0};
  Vec3 right = down.cross(fwd);
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    r(i, 0) = (&right.x)[i];
    r(i, 1) = (&down.x)[i];
    r(i, 2) = (&fwd.x)[i];
  }
  return {matrix_to_quat(r), center};
}

std::vector<double> compute_descriptor(const ImageBuffer& img) {
  constexpr int kGrid = 4;
  constexpr int kOriBins = 13;
  constexpr int kCellLen = 3 + kOriBins;
  std::vector<double> d(kGrid * kGrid * kCellLen, 0.0);

  std::vector<double> lum(static_cast<size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      lum[static_cast<size_t>(y) * img.width + x] =
          0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);

  for (int gy = 0; gy < kGrid; ++gy)
    for (int gx = 0; gx < kGrid; ++gx) {
      int x0 = gx * img.width / kGrid, x1 = (gx + 1) * img.width / kGrid;
      int y0 = gy * img.height / kGrid, y1 = (gy + 1) * img.height / kGrid;
      double* cell = d.data() + (gy * kGrid + gx) * kCellLen;
      size_t n = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          for (int c = 0; c < 3; ++c) cell[c] += img.at(x, y, c);
          ++n;
          if (x > 0 && x + 1 < img.width && y > 0 && y + 1 < img.height) {
            size_t i = static_cast<size_t>(y) * img.width + x;
            double gxv = lum[i + 1] - lum[i - 1];
            double gyv = lum[i + img.width] - lum[i - img.width];
            double mag = std::sqrt(gxv * gxv + gyv * gyv);
            if (mag > 1e-12) {
              double ori = std::atan2(gyv, gxv);  // fold to [0, pi)
              if (ori < 0.0) ori += kPi;
              if (ori >= kPi) ori -= kPi;
              int bin = std::min(kOriBins - 1, static_cast<int>(ori / kPi * kOriBins));
              cell[3 + bin] += mag;
            }
          }
        }
      if (n > 0)
        for (int c = 0; c < 3; ++c) cell[c] /= static_cast<double>(n);
    }

  double norm = std::sqrt(kernels::dot(d.data(), d.data(), d.size()));
  if (norm < 1e-12) {
    d[0] = 1.0;
    return d;
  }
  kernels::scale(1.0 / norm, d.data(), d.size());
  return d;
}

std::vector<std::string> top_k_neighbours(const SceneDatabase& db,
                                          const std::string& query_id, size_t k,
                                          std::optional<double> max_l1_dist) {
  size_t qi = db.index_of(query_id);
  const SceneRecord& q = db.records[qi];

  struct Cand {
    double score;
    const std::string* id;
  };
  std::vector<Cand> cands;
  for (size_t i : db.train_indices()) {
    if (i == qi) continue;
    const SceneRecord& r = db.records[i];
    if (max_l1_dist && (r.pose.center - q.pose.center).l1() > *max_l1_dist) continue;
    double score = kernels::dot(q.descriptor.data(), r.descriptor.data(),
                                std::min(q.descriptor.size(), r.descriptor.size()));
    cands.push_back({score, &r.id});
  }
  if (cands.empty())
    throw NoCandidates("no retrieval candidates for query " + query_id);

  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    return *a.id < *b.id;
  });
  if (cands.size() > k) cands.resize(k);

  std::vector<std::string> out;
  out.reserve(cands.size());
  for (const Cand& c : cands) out.push_back(*c.id);
  return out;
}

namespace {

void write_depth(const std::string& path, const DepthMap& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorruptFile("cannot open for write: " + path);
  char header[16] = {'P', 'S', 'D', 'M'};
  uint32_t w = static_cast<uint32_t>(d.width), h = static_cast<uint32_t>(d.height);
  uint32_t reserved = 0;
  std::memcpy(header + 4, &w, 4);
  std::memcpy(header + 8, &h, 4);
  std::memcpy(header + 12, &reserved, 4);
  out.write(header, 16);
  std::vector<float> buf(d.depth.size());
  for (size_t i = 0; i < d.depth.size(); ++i)
    buf[i] = d.valid[i] ? static_cast<float>(d.depth[i]) : 0.0f;
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw CorruptFile("short write: " + path);
}

DepthMap read_depth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptDepth("cannot open: " + path);
  char header[16];
  in.read(header, 16);
  if (!in || std::memcmp(header, "PSDM", 4) != 0)
    throw CorruptDepth("bad header: " + path);
  uint32_t w, h;
  std::memcpy(&w, header + 4, 4);
  std::memcpy(&h, header + 8, 4);
  if (w == 0 || h == 0 || w > 1u << 16 || h > 1u << 16)
    throw CorruptDepth("implausible dimensions: " + path);
  DepthMap d = DepthMap::invalid_sized(static_cast<int>(w), static_cast<int>(h));
  std::vector<float> buf(d.depth.size());
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
    throw CorruptDepth("truncated raster: " + path);
  for (size_t i = 0; i < buf.size(); ++i) {
    double v = buf[i];
    if (v > 0.0 && std::isfinite(v)) {
      d.depth[i] = v;
      d.valid[i] = 1;
    }
  }
  return d;
}

}  // namespace

void save_scene(const SceneDatabase& db, const std::string& dir) {
  if (db.records.empty()) throw EmptyScene("refusing to save empty database");
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "sparse_depth");
  fs::create_directories(fs::path(dir) / "dense_depth");

  std::ofstream poses(fs::path(dir) / "poses.txt");
  std::ofstream split(fs::path(dir) / "split.txt");
  std::ofstream affine(fs::path(dir) / "depth_affine.txt");
  for (size_t i = 0; i < db.records.size(); ++i) {
    const SceneRecord& r = db.records[i];
    write_png((fs::path(dir) / "images" / (r.id + ".png")).string(), r.image);
    write_depth((fs::path(dir) / "sparse_depth" / (r.id + ".psdm")).string(),
                r.sparse_depth);
    write_depth((fs::path(dir) / "dense_depth" / (r.id + ".psdm")).string(),
                r.dense_depth_affine);
    poses << pose_to_line("images/" + r.id + ".png", r.pose) << "\n";
    split << r.id << " " << (db.split[i] == Split::kTrain ? "train" : "test") << "\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s %.17g %.17g", r.id.c_str(), r.affine_a,
                  r.affine_b);
    affine << buf << "\n";
  }
  std::ofstream intr(fs::path(dir) / "intrinsics.txt");
  intr << intrinsics_to_line(db.records.front().intrinsics) << "\n";
  if (!poses || !split || !affine || !intr)
    throw CorruptFile("failed writing scene metadata under " + dir);
}

SceneDatabase load_scene(const std::string& dir) {
  std::ifstream intr(fs::path(dir) / "intrinsics.txt");
  if (!intr) throw CorruptFile("missing intrinsics.txt in " + dir);
  std::string line;
  if (!std::getline(intr, line)) throw CorruptFile("empty intrinsics.txt in " + dir);
  Intrinsics k = intrinsics_from_line(line);

  SceneDatabase db;
  std::ifstream poses(fs::path(dir) / "poses.txt");
  if (!poses) throw CorruptFile("missing poses.txt in " + dir);
  while (std::getline(poses, line)) {
    if (line.empty()) continue;
    auto [img_path, pose] = pose_from_line(line);
    fs::path p(img_path);
    SceneRecord r;
    r.id = p.stem().string();
    r.pose = pose;
    r.intrinsics = k;
    r.image = read_png((fs::path(dir) / img_path).string());
    r.sparse_depth =
        read_depth((fs::path(dir) / "sparse_depth" / (r.id + ".psdm")).string());
    r.dense_depth_affine =
        read_depth((fs::path(dir) / "dense_depth" / (r.id + ".psdm")).string());
    r.descriptor = compute_descriptor(r.image);
    db.records.push_back(std::move(r));
  }
  if (db.records.empty()) throw EmptyScene("no poses in " + dir);

  db.split.assign(db.records.size(), Split::kTrain);
  std::ifstream split(fs::path(dir) / "split.txt");
  if (!split) throw CorruptFile("missing split.txt in " + dir);
  while (std::getline(split, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string id, tag;
    in >> id >> tag;
    if (!in || (tag != "train" && tag != "test"))
      throw CorruptFile("bad split line: " + line);
    db.split[db.index_of(id)] = tag == "train" ? Split::kTrain : Split::kTest;
  }

  std::ifstream affine(fs::path(dir) / "depth_affine.txt");
  if (affine) {
    while (std::getline(affine, line)) {
      if (line.empty()) continue;
      std::istringstream in(line);
      std::string id;
      double a, b;
      in >> id >> a >> b;
      if (!in) throw CorruptFile("bad depth_affine line: " + line);
      SceneRecord& r = db.records[db.index_of(id)];
      r.affine_a = a;
      r.affine_b = b;
    }
  }
  return db;
}

}  // namespace posesynth
