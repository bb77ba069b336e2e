#pragma once

#include <string>
#include <vector>

#include "posesynth/dataset.hpp"

namespace posesynth {

struct SynthesisConfig {
  double fill_threshold = 0.8;
  int max_sources = 10;
  double min_valid_fraction = 0.3;
  double source_rotation_gate_deg = 30.0;
  Vec3 background{1.0, 1.0, 1.0};

  static SynthesisConfig outdoor() { return {}; }
  static SynthesisConfig indoor() {
    SynthesisConfig c;
    c.source_rotation_gate_deg = 15.0;
    return c;
  }
  void validate() const;
};

struct SynthesisResult {
  ImageBuffer image;
  DepthMap zbuffer;
  double filled_fraction = 0.0;
  std::vector<std::string> sources_used;
};

struct DepthFusion {
  DepthMap fused;
  double scale = 1.0;  // alignment applied to the dense map
  double shift = 0.0;
};

// least-squares (scale, shift) aligning the dense map onto the sparse one;
// sparse values win where present, aligned dense fills the holes
DepthFusion fuse_depth(const DepthMap& sparse, const DepthMap& dense_affine);

struct SourceView {
  const ImageBuffer* image = nullptr;
  const DepthMap* depth = nullptr;  // fused, metric
  Intrinsics intrinsics;
  Pose pose;
  std::string id;
};

SynthesisResult make_canvas(const Intrinsics& k, const SynthesisConfig& cfg);

// forward-splat src into the canvas: write where the new depth is strictly
// smaller than the z-buffer entry (background counts as infinitely far)
void reproject(const SourceView& src, const Pose& target,
               const Intrinsics& target_k, SynthesisResult& canvas);

// fused depth for every train record, indexed like db.records
struct SourceCache {
  std::vector<DepthMap> fused;
};
SourceCache prepare_sources(const SceneDatabase& db);

SynthesisResult synthesize_view(const SceneDatabase& db, const SourceCache& cache,
                                const Pose& target, const Intrinsics& k,
                                const SynthesisConfig& cfg);
SynthesisResult synthesize_view(const SceneDatabase& db, const Pose& target,
                                const Intrinsics& k, const SynthesisConfig& cfg);

}  // namespace posesynth
