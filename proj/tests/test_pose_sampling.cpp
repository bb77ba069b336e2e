#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "posesynth/dataset.hpp"
#include "posesynth/errors.hpp"
#include "posesynth/pose_sampling.hpp"

using namespace posesynth;

namespace {

SceneDatabase& street_db() {
  static SceneDatabase db = [] {
    SceneSpec spec = SceneSpec::biased_street();
    spec.train_count = 40;
    spec.test_count = 10;
    spec.image_size = 32;
    return generate_scene(spec, 901);
  }();
  return db;
}

double stddev(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

double circular_diff_deg(double a, double b) {
  double d = std::fmod(a - b, 360.0);
  if (d < -180.0) d += 360.0;
  if (d >= 180.0) d -= 360.0;
  return d;
}

}  // namespace

TEST_CASE("presets, validation and policy names") {
  PerturbationConfig out = PerturbationConfig::outdoor();
  CHECK(out.alpha_q == 0.02);
  CHECK(out.alpha_t.x == 1.0);
  CHECK(out.sigma_yaw_deg == 30.0);
  CHECK(out.sigma_roll_deg == 10.0);
  CHECK(out.sigma_pitch_deg == 2.5);
  CHECK(out.t_large.x == 10.0);
  CHECK(out.t_large.z == 0.1);
  CHECK(out.t_small.x == 0.5);
  CHECK(out.perturb_prob == 0.5);
  CHECK(out.real_nn_prob == 0.25);
  CHECK(out.top_n_neighbours == 20);
  CHECK(out.nn_max_l1_dist.value() == 20.0);

  PerturbationConfig in = PerturbationConfig::indoor();
  CHECK(in.alpha_t.x == 0.1);
  CHECK(in.sigma_yaw_deg == 15.0);
  CHECK(in.sigma_roll_deg == 15.0);
  CHECK(in.sigma_pitch_deg == 15.0);
  CHECK(in.t_large.z == 0.5);
  CHECK(in.t_small.x == 0.25);
  CHECK(in.top_n_neighbours == 0);
  CHECK_FALSE(in.nn_max_l1_dist.has_value());

  PerturbationConfig bad = out;
  bad.perturb_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = out;
  bad.sigma_yaw_deg = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = out;
  bad.top_n_neighbours = -2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = out;
  bad.nn_max_l1_dist = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  CHECK(policy_name(SamplePolicy::kReal) == "real");
  CHECK(policy_from_name("in-dist") == SamplePolicy::kInDistribution);
  CHECK(policy_from_name("out-dist") == SamplePolicy::kOutOfDistribution);
  CHECK_THROWS_AS(policy_from_name("bogus"), ConfigError);
}

TEST_CASE("zero sigma draws reproduce the base pose") {
  PerturbationConfig cfg = PerturbationConfig::outdoor();
  cfg.alpha_q = 0.0;
  cfg.alpha_t = {0.0, 0.0, 0.0};
  const Pose base = level_pose(73.0, {1.0, -2.0, 1.6});
  Rng rng(5);
  const Pose got = sample_in_distribution(base, cfg, rng);
  CHECK(angular_error_deg(got.rotation, base.rotation) < 1e-10);
  CHECK(got.center.x == base.center.x);
  CHECK(got.center.y == base.center.y);
  CHECK(got.center.z == base.center.z);
}

TEST_CASE("small-perturbation translation sigma matches the configuration") {
  PerturbationConfig cfg = PerturbationConfig::outdoor();
  const Pose base = level_pose(30.0, {1.0, 2.0, 1.6});
  const int n = 10000;
  std::vector<double> dx, dy, dz;
  Rng rng(41);
  for (int i = 0; i < n; ++i) {
    const Pose p = sample_in_distribution(base, cfg, rng);
    dx.push_back(p.center.x - base.center.x);
    dy.push_back(p.center.y - base.center.y);
    dz.push_back(p.center.z - base.center.z);
    CHECK(angular_error_deg(p.rotation, base.rotation) < 15.0);
  }
  CHECK(stddev(dx) == doctest::Approx(cfg.alpha_t.x).epsilon(0.05));
  CHECK(stddev(dy) == doctest::Approx(cfg.alpha_t.y).epsilon(0.05));
  CHECK(stddev(dz) == doctest::Approx(cfg.alpha_t.z).epsilon(0.05));
}

TEST_CASE("large-rotation yaw sigma matches the configuration") {
  const SceneDatabase& db = street_db();
  PerturbationConfig cfg = PerturbationConfig::outdoor();
  const Pose query = level_pose(135.0, {11.5, 3.0, 1.6});
  const double base_yaw = yaw_deg(query.rotation);
  const int n = 10000;
  std::vector<double> dyaw;
  Rng rng(42);
  for (int i = 0; i < n; ++i) {
    const Pose p = sample_out_of_distribution(query, db, cfg, rng);
    dyaw.push_back(circular_diff_deg(yaw_deg(p.rotation), base_yaw));
  }
  CHECK(stddev(dyaw) == doctest::Approx(cfg.sigma_yaw_deg).epsilon(0.05));
}

TEST_CASE("two-stage translation lands near a train centre") {
  const SceneDatabase& db = street_db();
  PerturbationConfig cfg = PerturbationConfig::outdoor();
  const Pose query = db.records[db.test_indices()[0]].pose;
  const int n = 10000;
  int close = 0;
  Rng rng(43);
  for (int i = 0; i < n; ++i) {
    const Pose p = sample_out_of_distribution(query, db, cfg, rng);
    double best = 1e18;
    for (size_t t : db.train_indices()) {
      best = std::min(best, (db.records[t].pose.center - p.center).norm());
    }
    if (best <= 2.25) ++close;  // three sigmas of the settle draw
  }
  CHECK(close >= static_cast<int>(0.99 * n));
}

TEST_CASE("large-rotation draws cover the yaw circle the train set leaves empty") {
  const SceneDatabase& db = street_db();
  PerturbationConfig cfg = PerturbationConfig::outdoor();

  auto bin_of = [](double yaw) {
    return static_cast<int>(std::floor(yaw / 10.0)) % 36;
  };
  std::set<int> raw_bins;
  for (size_t i : db.train_indices()) {
    raw_bins.insert(bin_of(yaw_deg(db.records[i].pose.rotation)));
  }
  CHECK(raw_bins.size() <= 8);

  std::set<int> ood_bins;
  const auto train = db.train_indices();
  Rng rng(44);
  for (int i = 0; i < 2000; ++i) {
    const Pose& q = db.records[train[i % train.size()]].pose;
    const Pose p = sample_out_of_distribution(q, db, cfg, rng);
    ood_bins.insert(bin_of(yaw_deg(p.rotation)));
  }
  CHECK(ood_bins.size() >= 30);
}

TEST_CASE("real policy pairs use the records verbatim") {
  const SceneDatabase& db = street_db();
  const SourceCache cache = prepare_sources(db);
  const PerturbationConfig pcfg = PerturbationConfig::outdoor();
  const SynthesisConfig scfg = SynthesisConfig::outdoor();

  const auto train = db.train_indices();
  for (uint64_t s = 0; s < 50; ++s) {
    Rng rng(Rng::derive(600, {s}));
    const size_t qi = train[s % train.size()];
    const auto pair = build_training_pair(db, cache, qi, SamplePolicy::kReal,
                                          pcfg, scfg, false, rng);
    REQUIRE(pair.has_value());
    const SceneRecord& qrec = db.records[qi];
    CHECK(pair->query_id == qrec.id);
    CHECK_FALSE(pair->query_is_synthetic);
    CHECK_FALSE(pair->nn_is_synthetic);
    CHECK(pair->nn_id != qrec.id);
    CHECK(pair->query_image.rgb == qrec.image.rgb);

    const SceneRecord& nrec = db.records[db.index_of(pair->nn_id)];
    CHECK(pair->nn_image.rgb == nrec.image.rgb);

    // the neighbour must come from the query's retrieval list
    const auto ids = top_k_neighbours(db, qrec.id, 20, pcfg.nn_max_l1_dist);
    CHECK(std::count(ids.begin(), ids.end(), pair->nn_id) == 1);

    const Pose back = compose_absolute(pair->nn_pose, pair->target);
    CHECK((back.center - pair->query_pose.center).norm() < 1e-9);
    CHECK(angular_error_deg(back.rotation, pair->query_pose.rotation) < 1e-7);
  }
}

TEST_CASE("small-perturbation pairs synthesize both sides when forced") {
  const SceneDatabase& db = street_db();
  const SourceCache cache = prepare_sources(db);
  PerturbationConfig pcfg = PerturbationConfig::outdoor();
  pcfg.perturb_prob = 1.0;
  const SynthesisConfig scfg = SynthesisConfig::outdoor();
  const auto train = db.train_indices();

  int built = 0;
  for (uint64_t s = 0; s < 20 && built < 10; ++s) {
    Rng rng(Rng::derive(601, {s}));
    const size_t qi = train[s % train.size()];
    const auto pair = build_training_pair(db, cache, qi,
                                          SamplePolicy::kInDistribution, pcfg,
                                          scfg, false, rng);
    if (!pair) continue;
    ++built;
    CHECK(pair->nn_is_synthetic);
    CHECK(pair->query_is_synthetic);
    CHECK(pair->nn_id.empty());
    CHECK(pair->nn_fill >= scfg.min_valid_fraction);
    CHECK(pair->query_fill >= scfg.min_valid_fraction);

    // rotation-only jitter: the query keeps its centre
    const SceneRecord& qrec = db.records[qi];
    CHECK(pair->query_pose.center.x == qrec.pose.center.x);
    CHECK(pair->query_pose.center.y == qrec.pose.center.y);
    CHECK(pair->query_pose.center.z == qrec.pose.center.z);
    CHECK(angular_error_deg(pair->query_pose.rotation, qrec.pose.rotation) < 15.0);

    const Pose back = compose_absolute(pair->nn_pose, pair->target);
    CHECK((back.center - pair->query_pose.center).norm() < 1e-9);
    CHECK(angular_error_deg(back.rotation, pair->query_pose.rotation) < 1e-7);
  }
  CHECK(built == 10);

  // with the probability at zero the policy degenerates to the real one
  pcfg.perturb_prob = 0.0;
  Rng ra(Rng::derive(602, {0})), rb(Rng::derive(602, {0}));
  const auto in_pair = build_training_pair(
      db, cache, train[0], SamplePolicy::kInDistribution, pcfg, scfg, false, ra);
  const auto real_pair = build_training_pair(
      db, cache, train[0], SamplePolicy::kReal, pcfg, scfg, false, rb);
  REQUIRE(in_pair.has_value());
  REQUIRE(real_pair.has_value());
  CHECK(in_pair->nn_id == real_pair->nn_id);
  CHECK(in_pair->query_image.rgb == real_pair->query_image.rgb);
  CHECK(in_pair->nn_image.rgb == real_pair->nn_image.rgb);
}

TEST_CASE("pair building is deterministic for a fixed stream") {
  const SceneDatabase& db = street_db();
  const SourceCache cache = prepare_sources(db);
  PerturbationConfig pcfg = PerturbationConfig::outdoor();
  pcfg.perturb_prob = 1.0;
  const SynthesisConfig scfg = SynthesisConfig::outdoor();
  const size_t qi = db.train_indices()[7];

  auto build = [&] {
    Rng rng(Rng::derive(603, {9}));
    return build_training_pair(db, cache, qi, SamplePolicy::kInDistribution,
                               pcfg, scfg, false, rng);
  };
  const auto a = build();
  const auto b = build();
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(a->query_image.rgb == b->query_image.rgb);
  CHECK(a->nn_image.rgb == b->nn_image.rgb);
  CHECK(a->nn_pose.center.x == b->nn_pose.center.x);
  CHECK(a->target.t_rel.x == b->target.t_rel.x);
  CHECK(a->target.q_rel.w == b->target.q_rel.w);
}

TEST_CASE("large-perturbation pairs and the swap phase") {
  const SceneDatabase& db = street_db();
  const SourceCache cache = prepare_sources(db);
  PerturbationConfig pcfg = PerturbationConfig::outdoor();
  pcfg.perturb_prob = 0.0;  // keep the query real so a synthetic query proves a swap
  pcfg.real_nn_prob = 0.0;
  const SynthesisConfig scfg = SynthesisConfig::outdoor();
  const auto train = db.train_indices();

  int built = 0, swapped = 0;
  for (uint64_t s = 0; s < 200; ++s) {
    Rng rng(Rng::derive(604, {s}));
    const size_t qi = train[s % train.size()];
    const auto pair = build_training_pair(db, cache, qi,
                                          SamplePolicy::kOutOfDistribution,
                                          pcfg, scfg, true, rng);
    if (!pair) continue;
    ++built;
    CHECK((pair->nn_is_synthetic || pair->query_is_synthetic));
    if (pair->query_is_synthetic) ++swapped;
    const double fill =
        pair->query_is_synthetic ? pair->query_fill : pair->nn_fill;
    CHECK(fill >= scfg.min_valid_fraction);
    const Pose back = compose_absolute(pair->nn_pose, pair->target);
    CHECK((back.center - pair->query_pose.center).norm() < 1e-9);
    CHECK(angular_error_deg(back.rotation, pair->query_pose.rotation) < 1e-7);
  }
  CHECK(built >= 80);
  const double frac = static_cast<double>(swapped) / built;
  CHECK(frac >= 0.35);
  CHECK(frac <= 0.65);

  // without the swap phase the synthetic view stays on the neighbour side
  for (uint64_t s = 0; s < 40; ++s) {
    Rng rng(Rng::derive(605, {s}));
    const auto pair = build_training_pair(db, cache, train[s % train.size()],
                                          SamplePolicy::kOutOfDistribution,
                                          pcfg, scfg, false, rng);
    if (!pair) continue;
    CHECK_FALSE(pair->query_is_synthetic);
    CHECK(pair->nn_is_synthetic);
  }

  // a real neighbour is kept when the draw says so
  pcfg.real_nn_prob = 1.0;
  for (uint64_t s = 0; s < 20; ++s) {
    Rng rng(Rng::derive(606, {s}));
    const auto pair = build_training_pair(db, cache, train[s % train.size()],
                                          SamplePolicy::kOutOfDistribution,
                                          pcfg, scfg, true, rng);
    REQUIRE(pair.has_value());
    CHECK_FALSE(pair->nn_is_synthetic);
    CHECK_FALSE(pair->nn_id.empty());
    CHECK_FALSE(pair->query_is_synthetic);  // no synthetic view, nothing to swap
  }
}

TEST_CASE("pairs whose synthetic view cannot be built are skipped") {
  const SceneDatabase& db = street_db();
  const SourceCache cache = prepare_sources(db);
  PerturbationConfig pcfg = PerturbationConfig::outdoor();
  pcfg.perturb_prob = 0.0;
  pcfg.real_nn_prob = 0.0;
  SynthesisConfig scfg = SynthesisConfig::outdoor();
  scfg.source_rotation_gate_deg = 2.0;  // almost no rotated pose finds sources
  const auto train = db.train_indices();

  int skipped = 0;
  for (uint64_t s = 0; s < 50; ++s) {
    Rng rng(Rng::derive(607, {s}));
    const auto pair = build_training_pair(db, cache, train[s % train.size()],
                                          SamplePolicy::kOutOfDistribution,
                                          pcfg, scfg, false, rng);
    if (!pair) ++skipped;
  }
  CHECK(skipped >= 40);
}
