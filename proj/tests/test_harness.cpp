#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>

#include "doctest.h"
#include "posesynth/errors.hpp"
#include "posesynth/harness.hpp"

using namespace posesynth;

namespace {

const SceneDatabase& street16() {
  static SceneDatabase db = [] {
    SceneSpec s = SceneSpec::biased_street();
    s.image_size = 16;  // bias analysis only needs the poses
    return generate_scene(s, 401);
  }();
  return db;
}

const SceneDatabase& orbit16() {
  static SceneDatabase db = [] {
    SceneSpec s = SceneSpec::uniform_orbit();
    s.image_size = 16;
    return generate_scene(s, 402);
  }();
  return db;
}

const SceneDatabase& indoor16() {
  static SceneDatabase db = [] {
    SceneSpec s = SceneSpec::indoor_room();
    s.image_size = 16;
    return generate_scene(s, 403);
  }();
  return db;
}

SceneSpec small_spec() {
  SceneSpec s = SceneSpec::biased_street();
  s.train_count = 24;
  s.test_count = 8;
  s.image_size = 32;
  return s;
}

const SceneDatabase& small_db() {
  static SceneDatabase db = generate_scene(small_spec(), 777);
  return db;
}

const SourceCache& small_cache() {
  static SourceCache cache = prepare_sources(small_db());
  return cache;
}

RegressorConfig small_model_config() {
  RegressorConfig cfg;
  cfg.image_size = 32;
  cfg.conv_channels = {4, 8, 16};
  cfg.embed_dim = 24;
  cfg.pos_dim = 8;
  cfg.layers = 1;
  cfg.heads = 4;
  cfg.ff_mult = 2;
  cfg.dropout = 0.05;
  return cfg;
}

TrainConfig tiny_schedule() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 8;
  t.lr = 1e-3;
  t.decay_every = 100;
  t.seed = 31;
  return t;
}

// oracle plus a fixed per-query offset: the composed error is independent of
// which neighbour was retrieved
RelPredictor offset_oracle(double rot_deg, double shift_m) {
  return [=](const SceneRecord& q, const SceneRecord& nn) {
    Rng rng(Rng::derive(0x6f72, {std::hash<std::string>{}(q.id)}));
    Vec3 axis{rng.normal(1.0), rng.normal(1.0), rng.normal(1.0)};
    const double an = axis.norm() > 0 ? axis.norm() : 1.0;
    const double half = rot_deg * M_PI / 180.0 / 2.0;
    const Quaternion eps{std::cos(half), std::sin(half) * axis.x / an,
                         std::sin(half) * axis.y / an,
                         std::sin(half) * axis.z / an};
    Vec3 dir{rng.normal(1.0), rng.normal(1.0), rng.normal(1.0)};
    const double dn = dir.norm() > 0 ? dir.norm() : 1.0;

    RelativePose rel = relative_pose(q.pose, nn.pose);
    rel.q_rel = quat_normalize(quat_multiply(eps, rel.q_rel));
    rel.t_rel = rel.t_rel + dir * (shift_m / dn);
    return rel;
  };
}

}  // namespace

TEST_CASE("median uses the lower central element for even counts") {
  CHECK(lower_median({3.0}) == 3.0);
  CHECK(lower_median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(lower_median({4.0, 1.0, 3.0, 2.0}) == 2.0);
  CHECK(lower_median({1.0, 1.0, 9.0, 9.0}) == 1.0);
  CHECK_THROWS_AS(lower_median({}), Error);
}

TEST_CASE("oracle predictor scores exactly zero medians") {
  EvalConfig ec;
  ec.label = "oracle";
  const LocalizationReport rep = evaluate(street16(), oracle_predictor(), ec);
  CHECK(rep.median_t == 0.0);
  CHECK(rep.median_r == 0.0);
  REQUIRE(rep.t_err_m.size() == street16().test_indices().size());
  for (double e : rep.t_err_m) CHECK(e == 0.0);
  for (double e : rep.r_err_deg) CHECK(e == 0.0);
  CHECK(rep.throughput_ips > 0.0);
  CHECK(rep.label == "oracle");
}

TEST_CASE("identity predictor reproduces the retrieval baseline") {
  const SceneDatabase& db = street16();
  const LocalizationReport rep = evaluate(db, identity_predictor(), {});

  std::vector<double> base_t, base_r;
  for (size_t qi : db.test_indices()) {
    const SceneRecord& rec = db.records[qi];
    const auto ids = top_k_neighbours(db, rec.id, 1, std::nullopt);
    REQUIRE(ids.size() == 1);
    const SceneRecord& nn = db.records[db.index_of(ids[0])];
    base_t.push_back((nn.pose.center - rec.pose.center).norm());
    base_r.push_back(angular_error_deg(nn.pose.rotation, rec.pose.rotation));
  }
  CHECK(rep.median_t == doctest::Approx(lower_median(base_t)).epsilon(1e-12));
  CHECK(rep.median_r == doctest::Approx(lower_median(base_r)).epsilon(1e-12));
  CHECK(rep.median_r > 0.0);  // retrieval alone cannot be perfect here
}

TEST_CASE("neighbour choice does not matter for a neighbour-independent predictor") {
  const SceneDatabase& db = indoor16();
  const RelPredictor pred = offset_oracle(7.0, 0.4);

  EvalConfig top;
  top.retrieval = RetrievalMode::kTopOne;
  EvalConfig rnd;
  rnd.retrieval = RetrievalMode::kRandomNeighbour;
  rnd.seed = 5;

  const LocalizationReport a = evaluate(db, pred, top);
  const LocalizationReport b = evaluate(db, pred, rnd);

  // errors reduce to the injected offset on both paths
  CHECK(a.median_r == doctest::Approx(7.0).epsilon(1e-9));
  CHECK(b.median_r == doctest::Approx(7.0).epsilon(1e-9));
  CHECK(a.median_t == doctest::Approx(0.4).epsilon(1e-9));
  CHECK(b.median_t == doctest::Approx(0.4).epsilon(1e-9));
  CHECK(b.median_r < 2.0 * a.median_r);
  CHECK(a.median_r < 2.0 * b.median_r);
}

TEST_CASE("trained indoor model is robust to the neighbour choice") {
  // small scenes let every view pair with every other; with that coverage the
  // regressor should score similarly whether the neighbour comes from
  // retrieval or is drawn at random
  SceneSpec s = SceneSpec::indoor_room();
  s.train_count = 96;
  s.test_count = 32;
  s.image_size = 32;
  const SceneDatabase db = generate_scene(s, 901);
  const SourceCache cache = prepare_sources(db);
  const auto train = db.train_indices();

  PerturbationConfig pc = PerturbationConfig::indoor();
  pc.perturb_prob = 1.0;
  pc.real_nn_prob = 0.0;
  const SynthesisConfig sc = SynthesisConfig::indoor();
  std::vector<TrainingPair> pool;
  Rng prng(424242);
  for (size_t qi : train) {
    const SceneRecord& q = db.records[qi];
    for (int k = 0; k < 8; ++k) {
      const size_t ni =
          train[static_cast<size_t>(prng.uniform_int(0, static_cast<int>(train.size()) - 1))];
      if (ni == qi) continue;
      const SceneRecord& nn = db.records[ni];
      TrainingPair p;
      p.query_id = q.id;
      p.nn_id = nn.id;
      p.query_image = q.image;
      p.nn_image = nn.image;
      p.query_pose = q.pose;
      p.nn_pose = nn.pose;
      p.target = relative_pose(q.pose, nn.pose);
      pool.push_back(std::move(p));
    }
    for (uint64_t k = 0; k < 4; ++k) {
      Rng rng(Rng::derive(77, {qi, k}));
      auto pair = build_training_pair(db, cache, qi,
                                      SamplePolicy::kOutOfDistribution, pc, sc,
                                      false, rng);
      if (pair) pool.push_back(std::move(*pair));
    }
  }

  RegressorConfig mc = small_model_config();
  TrainConfig tc;
  tc.epochs = 300;
  tc.batch_size = 16;
  tc.lr = 8e-4;
  tc.decay_every = 200;
  tc.seed = 11;
  Model model(mc, 21);
  train_on_pool(model, pool, tc);

  EvalConfig top;
  EvalConfig rnd;
  rnd.retrieval = RetrievalMode::kRandomNeighbour;
  rnd.seed = 5;
  const LocalizationReport a = evaluate(db, model, top);
  const LocalizationReport b = evaluate(db, model, rnd);

  CHECK(b.median_r < 2.0 * a.median_r);
  CHECK(a.median_r < 2.0 * b.median_r);
  CHECK(b.median_t < 2.0 * a.median_t);
  CHECK(a.median_t < 2.0 * b.median_t);
  // both runs must also be meaningfully better than chance indoors
  CHECK(a.median_r < 30.0);
  CHECK(b.median_r < 30.0);
}

TEST_CASE("street scene shows four yaw modes") {
  const SceneDatabase& db = street16();
  std::vector<Pose> poses;
  for (size_t ti : db.train_indices()) poses.push_back(db.records[ti].pose);
  const BiasReport rep = analyze_bias(poses);
  CHECK(rep.mode_count == 4);
  CHECK(rep.total == poses.size());
  size_t sum = 0;
  for (size_t c : rep.bins) sum += c;
  CHECK(sum == poses.size());
  CHECK(rep.nonempty_bins <= 8);
}

TEST_CASE("uniform orbit covers nearly every yaw bin") {
  const SceneDatabase& db = orbit16();
  std::vector<Pose> poses;
  for (size_t ti : db.train_indices()) poses.push_back(db.records[ti].pose);
  const BiasReport rep = analyze_bias(poses);
  CHECK(rep.nonempty_bins >= 34);
  size_t sum = 0;
  for (size_t c : rep.bins) sum += c;
  CHECK(sum == poses.size());
}

TEST_CASE("a single pose fills exactly one bin") {
  const BiasReport rep = analyze_bias({level_pose(123.0, {0, 0, 0})});
  CHECK(rep.total == 1);
  CHECK(rep.nonempty_bins == 1);
  CHECK(rep.mode_count == 1);
  CHECK(rep.bins[12] == 1);  // 123 degrees, 10-degree bins
  CHECK_THROWS_AS(analyze_bias({}), EmptyScene);
}

TEST_CASE("localization report round-trips through json exactly") {
  LocalizationReport rep;
  rep.label = "cell a/b";
  rep.t_err_m = {1.0 / 3.0, std::sqrt(2.0), 0.1, 7e-17};
  rep.r_err_deg = {M_PI, 2.0 / 7.0, 180.0, 1e300};
  rep.finalize();
  rep.pairs_built = 123;
  rep.pairs_dropped = 4;
  rep.mean_fill = 0.875001220703125;
  rep.throughput_ips = 1234.5678901234567;
  rep.note = "quotes \" and newline \n survive";

  const LocalizationReport back = LocalizationReport::from_json(rep.to_json());
  CHECK(back.label == rep.label);
  REQUIRE(back.t_err_m.size() == rep.t_err_m.size());
  for (size_t i = 0; i < rep.t_err_m.size(); ++i) {
    CHECK(back.t_err_m[i] == rep.t_err_m[i]);
    CHECK(back.r_err_deg[i] == rep.r_err_deg[i]);
  }
  CHECK(back.median_t == rep.median_t);
  CHECK(back.median_r == rep.median_r);
  CHECK(back.pairs_built == rep.pairs_built);
  CHECK(back.pairs_dropped == rep.pairs_dropped);
  CHECK(back.mean_fill == rep.mean_fill);
  CHECK(back.throughput_ips == rep.throughput_ips);
  CHECK(back.note == rep.note);

  CHECK_THROWS_AS(LocalizationReport::from_json("not json"), CorruptFile);
  CHECK_THROWS_AS(LocalizationReport::from_json("{\"label\":\"x\"}"), CorruptFile);
}

TEST_CASE("bias report round-trips through json exactly") {
  BiasReport rep;
  rep.bins[0] = 3;
  rep.bins[35] = 9;
  rep.total = 12;
  rep.mode_count = 2;
  rep.nonempty_bins = 2;
  const BiasReport back = BiasReport::from_json(rep.to_json());
  CHECK(back.bins == rep.bins);
  CHECK(back.total == rep.total);
  CHECK(back.mode_count == rep.mode_count);
  CHECK(back.nonempty_bins == rep.nonempty_bins);
}

TEST_CASE("sanity check returns three labeled runs") {
  SanityConfig cfg;
  cfg.schedule = tiny_schedule();
  cfg.model = small_model_config();
  cfg.synth = SynthesisConfig::outdoor();
  cfg.synth.source_rotation_gate_deg = 90.0;  // test headings are uniform
  cfg.seed = 99;

  const SanityResult res = run_sanity_check(small_db(), small_cache(), cfg);
  CHECK(res.upper_bound.label == "upper-bound");
  CHECK(res.synth.label == "synthetic-at-test");
  CHECK(res.retrieval.label == "retrieval-only");

  CHECK(res.upper_bound.pairs_built == small_db().test_indices().size());
  CHECK(res.synth.pairs_built + res.synth.pairs_dropped ==
        small_db().test_indices().size());
  CHECK(res.synth.pairs_built >= 1);
  CHECK(res.synth.mean_fill > 0.0);
  CHECK(res.synth.mean_fill <= 1.0);

  for (const LocalizationReport* r :
       {&res.upper_bound, &res.synth, &res.retrieval}) {
    CHECK(std::isfinite(r->median_t));
    CHECK(std::isfinite(r->median_r));
    CHECK(r->t_err_m.size() == small_db().test_indices().size());
  }

  // the retrieval row is plain neighbour lookup, no params involved
  EvalConfig ec;
  ec.label = "retrieval-only";
  const LocalizationReport plain = evaluate(small_db(), identity_predictor(), ec);
  CHECK(res.retrieval.median_t == plain.median_t);
  CHECK(res.retrieval.median_r == plain.median_r);

  const std::string js = res.to_json();
  CHECK(js.find("upper_bound") != std::string::npos);
  CHECK(js.find("synthetic-at-test") != std::string::npos);
}

TEST_CASE("ablation runs its matrix cell by cell") {
  AblationConfig cfg;
  cfg.schedule = tiny_schedule();
  cfg.model = small_model_config();
  cfg.perturb = PerturbationConfig::outdoor();
  cfg.synth = SynthesisConfig::outdoor();
  cfg.seed = 55;

  CHECK(run_ablation(small_db(), small_cache(), {}, cfg).empty());

  std::vector<AblationCell> matrix;
  matrix.push_back({SamplePolicy::kReal, Arch::kTransformer, 1.0});
  matrix.push_back({SamplePolicy::kOutOfDistribution, Arch::kMlp, 0.25});
  const auto reports = run_ablation(small_db(), small_cache(), matrix, cfg);
  REQUIRE(reports.size() == 2);

  CHECK(reports[0].label == "real/transformer");
  CHECK(reports[0].pairs_built == small_db().train_indices().size());
  CHECK(reports[0].mean_fill == 1.0);

  CHECK(reports[1].label == "out-dist/mlp/25%");
  const size_t kept = static_cast<size_t>(
      std::lround(0.25 * static_cast<double>(small_db().train_indices().size())));
  CHECK(reports[1].pairs_built + reports[1].pairs_dropped == kept);
  CHECK(reports[1].mean_fill < 1.0);  // synthetic neighbours have holes

  for (const LocalizationReport& r : reports) {
    CHECK(std::isfinite(r.median_t));
    CHECK(std::isfinite(r.median_r));
  }
}

TEST_CASE("report table prints one row per run") {
  LocalizationReport a;
  a.label = "real/transformer";
  a.t_err_m = {1.25};
  a.r_err_deg = {30.5};
  a.finalize();
  a.pairs_built = 400;
  LocalizationReport b;
  b.label = "out-dist/mlp/10%";
  b.t_err_m = {2.5};
  b.r_err_deg = {12.25};
  b.finalize();
  b.pairs_built = 40;
  b.mean_fill = 0.5;

  const std::string table = report_table({a, b});
  CHECK(table.find("median_t") != std::string::npos);
  CHECK(table.find("real/transformer") != std::string::npos);
  CHECK(table.find("out-dist/mlp/10%") != std::string::npos);
  CHECK(table.find("30.50") != std::string::npos);
  CHECK(table.find("0.50") != std::string::npos);
}

TEST_CASE("throughput measurement counts forward passes") {
  Model model(small_model_config(), 4);
  CHECK(measure_throughput(model, 4, 3) > 0.0);
  CHECK_THROWS_AS(measure_throughput(model, 0, 3), ConfigError);
}

TEST_CASE("evaluate rejects scenes without the needed splits") {
  SceneDatabase empty;
  CHECK_THROWS_AS(evaluate(empty, oracle_predictor(), {}), EmptyScene);
}
