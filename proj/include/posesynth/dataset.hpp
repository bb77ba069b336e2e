#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "posesynth/geometry.hpp"
#include "posesynth/raster.hpp"

namespace posesynth {

struct SceneRecord {
  std::string id;
  ImageBuffer image;
  DepthMap sparse_depth;
  DepthMap dense_depth_affine;
  Pose pose;
  Intrinsics intrinsics;
  std::vector<double> descriptor;
  // corruption applied to the scale-agnostic dense depth, kept for test oracles
  double affine_a = 1.0, affine_b = 0.0;
};

enum class Split { kTrain, kTest };

struct SceneDatabase {
  std::vector<SceneRecord> records;
  std::vector<Split> split;

  size_t index_of(const std::string& id) const;
  std::vector<size_t> train_indices() const;
  std::vector<size_t> test_indices() const;
};

struct SceneSpec {
  enum class Preset { kBiasedStreet, kUniformOrbit, kIndoorRoom };

  Preset preset = Preset::kBiasedStreet;
  int train_count = 400;
  int test_count = 100;
  int image_size = 64;
  double sparse_keep_rate = 0.2;
  double noise_sigma_frac = 0.01;  // dense-depth noise, fraction of depth
  double scene_scale = 10.0;       // scales the affine-corruption offset b
  bool indoor = false;

  static SceneSpec biased_street();
  static SceneSpec uniform_orbit();
  static SceneSpec indoor_room();
  static SceneSpec by_name(const std::string& name);
  std::string name() const;
};

SceneDatabase generate_scene(const SceneSpec& spec, uint64_t seed);

std::vector<double> compute_descriptor(const ImageBuffer& img);

// train-split ids ranked by descending descriptor dot product with the query's,
// the query itself excluded, ties broken by id
std::vector<std::string> top_k_neighbours(const SceneDatabase& db,
                                          const std::string& query_id, size_t k,
                                          std::optional<double> max_l1_dist);

void save_scene(const SceneDatabase& db, const std::string& dir);
SceneDatabase load_scene(const std::string& dir);

// level camera at a compass heading: forward (cos, sin, 0) in the world x/y
// plane, +y of the camera pointing down
Pose level_pose(double heading_deg, const Vec3& center);

}  // namespace posesynth
