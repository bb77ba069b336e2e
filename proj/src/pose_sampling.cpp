#include "posesynth/pose_sampling.hpp"

#include <cmath>
#include <utility>

#include "posesynth/errors.hpp"

namespace posesynth {

PerturbationConfig PerturbationConfig::indoor() {
  PerturbationConfig c;
  c.alpha_t = {0.1, 0.1, 0.1};
  c.sigma_yaw_deg = 15.0;
  c.sigma_roll_deg = 15.0;
  c.sigma_pitch_deg = 15.0;
  c.t_large = {0.5, 0.5, 0.5};
  c.t_small = {0.25, 0.25, 0.25};
  c.top_n_neighbours = 0;
  c.nn_max_l1_dist.reset();
  return c;
}

void PerturbationConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(perturb_prob) || !prob(real_nn_prob)) {
    throw ConfigError("perturbation probabilities must be in [0, 1]");
  }
  if (alpha_q < 0.0 || sigma_yaw_deg < 0.0 || sigma_roll_deg < 0.0 ||
      sigma_pitch_deg < 0.0) {
    throw ConfigError("perturbation sigmas must be non-negative");
  }
  if (top_n_neighbours < 0) throw ConfigError("top_n_neighbours must be >= 0");
  if (nn_max_l1_dist && !(*nn_max_l1_dist > 0.0)) {
    throw ConfigError("nn_max_l1_dist must be positive when set");
  }
}

std::string policy_name(SamplePolicy p) {
  switch (p) {
    case SamplePolicy::kReal: return "real";
    case SamplePolicy::kInDistribution: return "in-dist";
    case SamplePolicy::kOutOfDistribution: return "out-dist";
  }
  throw ConfigError("unknown policy");
}

SamplePolicy policy_from_name(const std::string& name) {
  if (name == "real") return SamplePolicy::kReal;
  if (name == "in-dist") return SamplePolicy::kInDistribution;
  if (name == "out-dist") return SamplePolicy::kOutOfDistribution;
  throw ConfigError("unknown policy '" + name + "'");
}

Quaternion jitter_rotation(const Quaternion& q, double alpha_q, Rng& rng) {
  return quat_normalize({q.w + rng.normal(alpha_q), q.x + rng.normal(alpha_q),
                         q.y + rng.normal(alpha_q), q.z + rng.normal(alpha_q)});
}

Pose sample_in_distribution(const Pose& base, const PerturbationConfig& cfg,
                            Rng& rng) {
  Pose out;
  out.rotation = jitter_rotation(base.rotation, cfg.alpha_q, rng);
  out.center = base.center + Vec3{rng.normal(cfg.alpha_t.x),
                                  rng.normal(cfg.alpha_t.y),
                                  rng.normal(cfg.alpha_t.z)};
  return out;
}

Pose sample_out_of_distribution(const Pose& query, const SceneDatabase& db,
                                const PerturbationConfig& cfg, Rng& rng) {
  const double yaw = deg_to_rad(rng.normal(cfg.sigma_yaw_deg));
  const double roll = deg_to_rad(rng.normal(cfg.sigma_roll_deg));
  const double pitch = deg_to_rad(rng.normal(cfg.sigma_pitch_deg));

  // yaw spins the camera about the world vertical; pitch and roll act in the
  // camera frame, so a level camera's heading shifts by exactly the yaw draw
  const Quaternion q_yaw = quat_from_axis_angle({0.0, 0.0, 1.0}, yaw);
  const Quaternion q_pitch = quat_from_axis_angle({1.0, 0.0, 0.0}, pitch);
  const Quaternion q_roll = quat_from_axis_angle({0.0, 0.0, 1.0}, roll);
  Quaternion rot = quat_multiply(q_yaw, query.rotation);
  rot = quat_multiply(rot, quat_multiply(q_pitch, q_roll));

  const Vec3 jumped = query.center + Vec3{rng.normal(cfg.t_large.x),
                                          rng.normal(cfg.t_large.y),
                                          rng.normal(cfg.t_large.z)};
  const auto train = db.train_indices();
  if (train.empty()) throw EmptyScene("no train views to snap to");
  Vec3 snapped = db.records[train[0]].pose.center;
  double best = (snapped - jumped).norm();
  for (size_t i : train) {
    const Vec3& c = db.records[i].pose.center;
    const double d = (c - jumped).norm();
    if (d < best) {
      best = d;
      snapped = c;
    }
  }
  const Vec3 center = snapped + Vec3{rng.normal(cfg.t_small.x),
                                     rng.normal(cfg.t_small.y),
                                     rng.normal(cfg.t_small.z)};
  return {quat_normalize(rot), center};
}

namespace {

std::optional<SynthesisResult> try_synthesize(const SceneDatabase& db,
                                              const SourceCache& cache,
                                              const Pose& pose,
                                              const Intrinsics& k,
                                              const SynthesisConfig& cfg) {
  try {
    return synthesize_view(db, cache, pose, k, cfg);
  } catch (const NoSources&) {
    return std::nullopt;
  }
}

// synthesize one side of a pair; false means the pair must be skipped
bool replace_with_synthetic(const SceneDatabase& db, const SourceCache& cache,
                            const Pose& pose, const Intrinsics& k,
                            const SynthesisConfig& scfg, ImageBuffer* image,
                            Pose* stored_pose, std::string* id, bool* synth_flag,
                            double* fill) {
  std::optional<SynthesisResult> view = try_synthesize(db, cache, pose, k, scfg);
  if (!view || view->filled_fraction < scfg.min_valid_fraction) return false;
  *image = std::move(view->image);
  *stored_pose = pose;
  id->clear();
  *synth_flag = true;
  *fill = view->filled_fraction;
  return true;
}

}  // namespace

std::optional<TrainingPair> build_training_pair(
    const SceneDatabase& db, const SourceCache& cache, size_t query_index,
    SamplePolicy policy, const PerturbationConfig& pcfg,
    const SynthesisConfig& scfg, bool allow_swap, Rng& rng) {
  pcfg.validate();
  scfg.validate();
  const SceneRecord& qrec = db.records[query_index];

  size_t top_n = static_cast<size_t>(pcfg.top_n_neighbours);
  if (top_n == 0) top_n = db.train_indices().size();
  const std::vector<std::string> nn_ids =
      top_k_neighbours(db, qrec.id, top_n, pcfg.nn_max_l1_dist);
  const std::string nn_id =
      nn_ids[rng.uniform_int(0, static_cast<uint64_t>(nn_ids.size() - 1))];
  const SceneRecord& nrec = db.records[db.index_of(nn_id)];

  TrainingPair pair;
  pair.query_id = qrec.id;
  pair.nn_id = nn_id;
  pair.query_image = qrec.image;
  pair.query_pose = qrec.pose;
  pair.nn_image = nrec.image;
  pair.nn_pose = nrec.pose;

  switch (policy) {
    case SamplePolicy::kReal:
      break;

    case SamplePolicy::kInDistribution: {
      if (rng.uniform() < pcfg.perturb_prob) {
        const Pose p = sample_in_distribution(nrec.pose, pcfg, rng);
        if (!replace_with_synthetic(db, cache, p, qrec.intrinsics, scfg,
                                    &pair.nn_image, &pair.nn_pose, &pair.nn_id,
                                    &pair.nn_is_synthetic, &pair.nn_fill)) {
          return std::nullopt;
        }
      }
      if (rng.uniform() < pcfg.perturb_prob) {
        const Pose p{jitter_rotation(qrec.pose.rotation, pcfg.alpha_q, rng),
                     qrec.pose.center};
        if (!replace_with_synthetic(db, cache, p, qrec.intrinsics, scfg,
                                    &pair.query_image, &pair.query_pose,
                                    &pair.query_id, &pair.query_is_synthetic,
                                    &pair.query_fill)) {
          return std::nullopt;
        }
      }
      break;
    }

    case SamplePolicy::kOutOfDistribution: {
      const Pose ood = sample_out_of_distribution(qrec.pose, db, pcfg, rng);
      if (!(rng.uniform() < pcfg.real_nn_prob)) {
        if (!replace_with_synthetic(db, cache, ood, qrec.intrinsics, scfg,
                                    &pair.nn_image, &pair.nn_pose, &pair.nn_id,
                                    &pair.nn_is_synthetic, &pair.nn_fill)) {
          return std::nullopt;
        }
      }
      if (rng.uniform() < pcfg.perturb_prob) {
        const Pose p{jitter_rotation(qrec.pose.rotation, pcfg.alpha_q, rng),
                     qrec.pose.center};
        if (!replace_with_synthetic(db, cache, p, qrec.intrinsics, scfg,
                                    &pair.query_image, &pair.query_pose,
                                    &pair.query_id, &pair.query_is_synthetic,
                                    &pair.query_fill)) {
          return std::nullopt;
        }
      }
      if (allow_swap && pair.nn_is_synthetic && rng.uniform() < 0.5) {
        std::swap(pair.query_id, pair.nn_id);
        std::swap(pair.query_image, pair.nn_image);
        std::swap(pair.query_pose, pair.nn_pose);
        std::swap(pair.query_is_synthetic, pair.nn_is_synthetic);
        std::swap(pair.query_fill, pair.nn_fill);
      }
      break;
    }
  }

  pair.target = relative_pose(pair.query_pose, pair.nn_pose);
  return pair;
}

}  // namespace posesynth
