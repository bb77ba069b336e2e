#include "posesynth/view_synthesis.hpp"

#include <algorithm>
#include <cmath>

#include "posesynth/errors.hpp"

namespace posesynth {

void SynthesisConfig::validate() const {
  if (!(min_valid_fraction > 0.0) || !(min_valid_fraction <= fill_threshold) ||
      !(fill_threshold <= 1.0)) {
    throw ConfigError("synthesis fractions must satisfy 0 < min_valid <= fill <= 1");
  }
  if (max_sources < 1) throw ConfigError("max_sources must be at least 1");
  if (!(source_rotation_gate_deg > 0.0)) {
    throw ConfigError("source_rotation_gate_deg must be positive");
  }
}

namespace {

// Kahan accumulator: the recovered scale and shift are checked to 1e-12 on
// noise-free data, plain summation over a few thousand pixels eats that budget
struct Acc {
  double sum = 0.0, carry = 0.0;
  void add(double x) {
    const double y = x - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

}  // namespace

DepthFusion fuse_depth(const DepthMap& sparse, const DepthMap& dense_affine) {
  if (sparse.width != dense_affine.width || sparse.height != dense_affine.height) {
    throw Error("fuse_depth: map sizes differ");
  }
  const size_t n_px = sparse.depth.size();

  Acc sum_d, sum_s, sum_dd;
  size_t joint = 0;
  for (size_t i = 0; i < n_px; ++i) {
    if (!sparse.valid[i] || !dense_affine.valid[i]) continue;
    sum_d.add(dense_affine.depth[i]);
    sum_s.add(sparse.depth[i]);
    sum_dd.add(dense_affine.depth[i] * dense_affine.depth[i]);
    ++joint;
  }
  if (joint < 2) throw DegenerateAlignment("fewer than 2 jointly valid pixels");

  const double n = static_cast<double>(joint);
  // condition of the normal matrix [[sum d^2, sum d], [sum d, n]]
  const double tr = sum_dd.sum + n;
  const double det = sum_dd.sum * n - sum_d.sum * sum_d.sum;
  const double disc = std::sqrt(std::max(0.0, tr * tr - 4.0 * det));
  const double lam_max = 0.5 * (tr + disc);
  const double lam_min = 0.5 * (tr - disc);
  if (!(lam_min > 0.0) || lam_max / lam_min > 1e12) {
    throw DegenerateAlignment("normal matrix condition above 1e12");
  }

  // centered two-pass solve, far better conditioned than the raw normal system
  const double mean_d = sum_d.sum / n;
  const double mean_s = sum_s.sum / n;
  Acc var, cov;
  for (size_t i = 0; i < n_px; ++i) {
    if (!sparse.valid[i] || !dense_affine.valid[i]) continue;
    const double dd = dense_affine.depth[i] - mean_d;
    var.add(dd * dd);
    cov.add(dd * (sparse.depth[i] - mean_s));
  }
  const double scale = cov.sum / var.sum;
  const double shift = mean_s - scale * mean_d;

  DepthFusion out;
  out.scale = scale;
  out.shift = shift;
  out.fused = DepthMap::invalid_sized(sparse.width, sparse.height);
  for (size_t i = 0; i < n_px; ++i) {
    if (sparse.valid[i]) {
      out.fused.depth[i] = sparse.depth[i];
      out.fused.valid[i] = true;
    } else if (dense_affine.valid[i]) {
      const double v = scale * dense_affine.depth[i] + shift;
      if (v > 0.0 && std::isfinite(v)) {
        out.fused.depth[i] = v;
        out.fused.valid[i] = true;
      }
    }
  }
  return out;
}

SynthesisResult make_canvas(const Intrinsics& k, const SynthesisConfig& cfg) {
  SynthesisResult r;
  r.image = ImageBuffer::filled(k.width, k.height, cfg.background.x,
                                cfg.background.y, cfg.background.z);
  r.zbuffer = DepthMap::invalid_sized(k.width, k.height);
  return r;
}

void reproject(const SourceView& src, const Pose& target,
               const Intrinsics& target_k, SynthesisResult& canvas) {
  const DepthMap& d = *src.depth;
  const ImageBuffer& img = *src.image;
  for (int v = 0; v < d.height; ++v) {
    for (int u = 0; u < d.width; ++u) {
      const size_t si = d.idx(u, v);
      if (!d.valid[si]) continue;
      const Vec3 x = unproject({u, v}, d.depth[si], src.intrinsics, src.pose);
      const Projection pr = project(x, target_k, target);
      if (!pr.in_front || !pr.in_bounds) continue;
      const size_t ti = canvas.zbuffer.idx(pr.pixel.u, pr.pixel.v);
      if (canvas.zbuffer.valid[ti] && !(pr.depth < canvas.zbuffer.depth[ti])) continue;
      canvas.zbuffer.depth[ti] = pr.depth;
      canvas.zbuffer.valid[ti] = true;
      for (int c = 0; c < 3; ++c) {
        canvas.image.rgb[3 * ti + c] = img.rgb[3 * si + c];
      }
    }
  }
  canvas.filled_fraction =
      static_cast<double>(canvas.zbuffer.valid_count()) /
      static_cast<double>(canvas.zbuffer.width * canvas.zbuffer.height);
}

SourceCache prepare_sources(const SceneDatabase& db) {
  SourceCache cache;
  cache.fused.resize(db.records.size());
  for (size_t i : db.train_indices()) {
    cache.fused[i] =
        fuse_depth(db.records[i].sparse_depth, db.records[i].dense_depth_affine).fused;
  }
  return cache;
}

SynthesisResult synthesize_view(const SceneDatabase& db, const SourceCache& cache,
                                const Pose& target, const Intrinsics& k,
                                const SynthesisConfig& cfg) {
  cfg.validate();
  struct Cand {
    double dist;
    size_t index;
  };
  std::vector<Cand> cands;
  for (size_t i : db.train_indices()) {
    const SceneRecord& rec = db.records[i];
    if (angular_error_deg(rec.pose.rotation, target.rotation) >
        cfg.source_rotation_gate_deg) {
      continue;
    }
    cands.push_back({(rec.pose.center - target.center).norm(), i});
  }
  if (cands.empty()) {
    throw NoSources("no train view within " +
                    std::to_string(cfg.source_rotation_gate_deg) +
                    " deg of the target rotation");
  }
  std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return db.records[a.index].id < db.records[b.index].id;
  });

  SynthesisResult canvas = make_canvas(k, cfg);
  for (const Cand& c : cands) {
    const SceneRecord& rec = db.records[c.index];
    SourceView sv{&rec.image, &cache.fused[c.index], rec.intrinsics, rec.pose, rec.id};
    reproject(sv, target, k, canvas);
    canvas.sources_used.push_back(rec.id);
    if (canvas.filled_fraction >= cfg.fill_threshold) break;
    if (static_cast<int>(canvas.sources_used.size()) >= cfg.max_sources) break;
  }
  return canvas;
}

SynthesisResult synthesize_view(const SceneDatabase& db, const Pose& target,
                                const Intrinsics& k, const SynthesisConfig& cfg) {
  return synthesize_view(db, prepare_sources(db), target, k, cfg);
}

}  // namespace posesynth
