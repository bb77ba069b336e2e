#pragma once

#include <optional>
#include <string>

#include "posesynth/dataset.hpp"
#include "posesynth/view_synthesis.hpp"

namespace posesynth {

struct PerturbationConfig {
  double alpha_q = 0.02;        // additive per-component rotation sigma
  Vec3 alpha_t{1.0, 1.0, 1.0};  // small additive translation sigma, metres

  // large-rotation sampling, per world/camera axis
  double sigma_yaw_deg = 30.0;
  double sigma_roll_deg = 10.0;
  double sigma_pitch_deg = 2.5;

  // two-stage translation: big jump, snap to the nearest train centre, settle
  Vec3 t_large{10.0, 10.0, 0.1};
  Vec3 t_small{0.5, 0.5, 0.1};

  double perturb_prob = 0.5;  // chance of perturbing each side of a pair
  double real_nn_prob = 0.25; // chance of keeping the real neighbour

  int top_n_neighbours = 20;  // 0: every train view is a candidate
  std::optional<double> nn_max_l1_dist = 20.0;

  static PerturbationConfig outdoor() { return {}; }
  static PerturbationConfig indoor();
  void validate() const;
};

enum class SamplePolicy { kReal, kInDistribution, kOutOfDistribution };

std::string policy_name(SamplePolicy p);
SamplePolicy policy_from_name(const std::string& name);

// additive component noise, renormalized
Quaternion jitter_rotation(const Quaternion& q, double alpha_q, Rng& rng);

// base pose plus small additive rotation and translation noise
Pose sample_in_distribution(const Pose& base, const PerturbationConfig& cfg,
                            Rng& rng);

// large per-axis rotation (yaw about the world vertical, pitch and roll in the
// camera frame) and the two-stage snap translation
Pose sample_out_of_distribution(const Pose& query, const SceneDatabase& db,
                                const PerturbationConfig& cfg, Rng& rng);

struct TrainingPair {
  std::string query_id, nn_id;  // empty id for a synthesized side
  ImageBuffer query_image, nn_image;
  Pose query_pose, nn_pose;
  RelativePose target;
  bool query_is_synthetic = false, nn_is_synthetic = false;
  double query_fill = 1.0, nn_fill = 1.0;
};

// One query/neighbour pair under the given policy, or nullopt when the
// synthesized side fails the fill gate (or has no usable sources).
// allow_swap: the synthetic view may take the query role with probability 1/2,
// used during the first phase of training.
std::optional<TrainingPair> build_training_pair(
    const SceneDatabase& db, const SourceCache& cache, size_t query_index,
    SamplePolicy policy, const PerturbationConfig& pcfg,
    const SynthesisConfig& scfg, bool allow_swap, Rng& rng);

}  // namespace posesynth
