#include "posesynth/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "json.hpp"
#include "posesynth/errors.hpp"
#include "posesynth/util.hpp"

namespace posesynth {

using nlohmann::json;

double lower_median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty list");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return (n % 2 == 1) ? v[n / 2] : v[n / 2 - 1];
}

void LocalizationReport::finalize() {
  median_t = lower_median(t_err_m);
  median_r = lower_median(r_err_deg);
}

std::string LocalizationReport::to_json() const {
  json j;
  j["label"] = label;
  j["t_err_m"] = t_err_m;
  j["r_err_deg"] = r_err_deg;
  j["median_t"] = median_t;
  j["median_r"] = median_r;
  j["pairs_built"] = pairs_built;
  j["pairs_dropped"] = pairs_dropped;
  j["mean_fill"] = mean_fill;
  j["throughput_ips"] = throughput_ips;
  j["note"] = note;
  return j.dump(2);
}

LocalizationReport LocalizationReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("report json: ") + e.what());
  }
  LocalizationReport r;
  try {
    r.label = j.at("label").get<std::string>();
    r.t_err_m = j.at("t_err_m").get<std::vector<double>>();
    r.r_err_deg = j.at("r_err_deg").get<std::vector<double>>();
    r.median_t = j.at("median_t").get<double>();
    r.median_r = j.at("median_r").get<double>();
    r.pairs_built = j.at("pairs_built").get<size_t>();
    r.pairs_dropped = j.at("pairs_dropped").get<size_t>();
    r.mean_fill = j.at("mean_fill").get<double>();
    r.throughput_ips = j.at("throughput_ips").get<double>();
    r.note = j.at("note").get<std::string>();
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("report fields: ") + e.what());
  }
  return r;
}

std::string BiasReport::to_json() const {
  json j;
  j["bins"] = bins;
  j["total"] = total;
  j["mode_count"] = mode_count;
  j["nonempty_bins"] = nonempty_bins;
  return j.dump(2);
}

BiasReport BiasReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("bias json: ") + e.what());
  }
  BiasReport r;
  try {
    r.bins = j.at("bins").get<std::array<size_t, 36>>();
    r.total = j.at("total").get<size_t>();
    r.mode_count = j.at("mode_count").get<int>();
    r.nonempty_bins = j.at("nonempty_bins").get<int>();
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("bias fields: ") + e.what());
  }
  return r;
}

RelPredictor oracle_predictor() {
  return [](const SceneRecord& query, const SceneRecord& nn) {
    return relative_pose(query.pose, nn.pose);
  };
}

RelPredictor identity_predictor() {
  return [](const SceneRecord&, const SceneRecord&) {
    return RelativePose{};
  };
}

RelPredictor model_predictor(Model& model) {
  return [&model](const SceneRecord& query, const SceneRecord& nn) {
    return model.predict(query.image, nn.image);
  };
}

LocalizationReport evaluate(const SceneDatabase& db, const RelPredictor& predict,
                            const EvalConfig& cfg) {
  const std::vector<size_t> test = db.test_indices();
  const std::vector<size_t> train = db.train_indices();
  if (test.empty()) throw EmptyScene("evaluation needs a test split");
  if (train.empty()) throw EmptyScene("evaluation needs a train split");

  LocalizationReport rep;
  rep.label = cfg.label;
  Rng rng(Rng::derive(cfg.seed, {0x6e6e}));

  using clock = std::chrono::steady_clock;
  std::chrono::nanoseconds spent{0};
  for (size_t qi : test) {
    const SceneRecord& rec = db.records[qi];
    const auto t0 = clock::now();
    size_t ni;
    if (cfg.retrieval == RetrievalMode::kTopOne) {
      const auto ids = top_k_neighbours(db, rec.id, 1, std::nullopt);
      if (ids.empty()) throw NoCandidates("no neighbour for " + rec.id);
      ni = db.index_of(ids[0]);
    } else {
      ni = train[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int>(train.size()) - 1))];
    }
    const SceneRecord& nn = db.records[ni];
    const RelativePose rel = predict(rec, nn);
    const Pose guess = compose_absolute(nn.pose, rel);
    spent += clock::now() - t0;

    // the pose round trip leaves ~1e-14 of roundoff; below the floor the
    // error is numerically zero and is reported as exactly that
    constexpr double kErrorFloor = 1e-9;
    double te = (guess.center - rec.pose.center).norm();
    double re = angular_error_deg(guess.rotation, rec.pose.rotation);
    if (te < kErrorFloor) te = 0.0;
    if (re < kErrorFloor) re = 0.0;
    rep.t_err_m.push_back(te);
    rep.r_err_deg.push_back(re);
  }
  rep.finalize();
  const double secs = std::chrono::duration<double>(spent).count();
  rep.throughput_ips = secs > 0.0 ? static_cast<double>(test.size()) / secs : 0.0;
  return rep;
}

LocalizationReport evaluate(const SceneDatabase& db, Model& model,
                            const EvalConfig& cfg) {
  return evaluate(db, model_predictor(model), cfg);
}

BiasReport analyze_bias(const std::vector<Pose>& poses) {
  if (poses.empty()) throw EmptyScene("bias analysis needs poses");
  BiasReport rep;
  rep.total = poses.size();
  for (const Pose& p : poses) {
    const double yaw = yaw_deg(p.rotation);
    int b = static_cast<int>(yaw / 10.0);
    if (b < 0) b = 0;
    if (b > 35) b = 35;
    ++rep.bins[static_cast<size_t>(b)];
  }
  for (size_t c : rep.bins) {
    if (c > 0) ++rep.nonempty_bins;
  }

  // a mode is a circular run of bins, delimited by gaps of at least two
  // consecutive empty bins, that rises above twice the uniform expectation
  const double uniform = static_cast<double>(rep.total) / 36.0;
  std::array<bool, 36> candidate{};
  for (size_t i = 0; i < 36; ++i) {
    candidate[i] = static_cast<double>(rep.bins[i]) > 2.0 * uniform;
  }
  std::vector<size_t> cuts;  // first bin of each gap of length >= 2
  for (size_t i = 0; i < 36; ++i) {
    const size_t prev = (i + 35) % 36;
    if (rep.bins[i] == 0 && rep.bins[(i + 1) % 36] == 0 && rep.bins[prev] != 0) {
      cuts.push_back(i);
    }
  }
  if (cuts.empty()) {
    // no separating gap: at most one mode in the whole circle
    for (bool c : candidate) {
      if (c) {
        rep.mode_count = 1;
        break;
      }
    }
    return rep;
  }
  for (size_t s = 0; s < cuts.size(); ++s) {
    const size_t begin = cuts[s];
    const size_t end = cuts[(s + 1) % cuts.size()];
    const size_t len = begin == end ? 36 : (end + 36 - begin) % 36;
    bool has = false;
    for (size_t k = 0; k < len; ++k) {
      if (candidate[(begin + k) % 36]) has = true;
    }
    if (has) ++rep.mode_count;
  }
  return rep;
}

double measure_throughput(Model& model, int batch, int reps) {
  if (batch < 1 || reps < 1) throw ConfigError("batch and reps must be >= 1");
  const int n = model.config().image_size;
  Rng rng(0x7470);
  std::vector<ImageBuffer> imgs;
  for (int i = 0; i < 2 * batch; ++i) {
    ImageBuffer img = ImageBuffer::filled(n, n, 0.0, 0.0, 0.0);
    for (double& v : img.rgb) v = rng.uniform();
    imgs.push_back(std::move(img));
  }
  std::vector<const ImageBuffer*> q, nn;
  for (int i = 0; i < batch; ++i) {
    q.push_back(&imgs[static_cast<size_t>(2 * i)]);
    nn.push_back(&imgs[static_cast<size_t>(2 * i + 1)]);
  }
  const Tensor qt = Model::images_to_tensor(q);
  const Tensor nt = Model::images_to_tensor(nn);

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  for (int r = 0; r < reps; ++r) {
    Tape tape(&model.params());
    model.forward(tape, qt, nt, false, nullptr);
  }
  const double secs = std::chrono::duration<double>(clock::now() - t0).count();
  return secs > 0.0 ? static_cast<double>(batch) * reps / secs : 0.0;
}

namespace {

double synthetic_fill_mean(const std::vector<TrainingPair>& pool) {
  double sum = 0.0;
  size_t n = 0;
  for (const TrainingPair& p : pool) {
    if (p.query_is_synthetic) {
      sum += p.query_fill;
      ++n;
    }
    if (p.nn_is_synthetic) {
      sum += p.nn_fill;
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 1.0;
}

TrainingPair real_pair(const SceneRecord& query, const SceneRecord& nn) {
  TrainingPair p;
  p.query_id = query.id;
  p.nn_id = nn.id;
  p.query_image = query.image;
  p.nn_image = nn.image;
  p.query_pose = query.pose;
  p.nn_pose = nn.pose;
  p.target = relative_pose(query.pose, nn.pose);
  return p;
}

const SceneRecord& top1_neighbour(const SceneDatabase& db, const SceneRecord& rec) {
  const auto ids = top_k_neighbours(db, rec.id, 1, std::nullopt);
  if (ids.empty()) throw NoCandidates("no neighbour for " + rec.id);
  return db.records[db.index_of(ids[0])];
}

std::string schedule_note(const TrainConfig& t) {
  return std::to_string(t.epochs) + " epochs, batch " +
         std::to_string(t.batch_size) + ", lr " + std::to_string(t.lr);
}

}  // namespace

SanityResult run_sanity_check(const SceneDatabase& db, const SourceCache& cache,
                              const SanityConfig& cfg) {
  const std::vector<size_t> test = db.test_indices();
  if (test.empty()) throw EmptyScene("sanity check needs a test split");
  cfg.model.validate();
  cfg.synth.validate();

  SanityResult out;

  {  // real views at the test poses, overfit and read back
    std::vector<TrainingPair> pool;
    for (size_t ti : test) {
      const SceneRecord& rec = db.records[ti];
      pool.push_back(real_pair(rec, top1_neighbour(db, rec)));
    }
    Model model(cfg.model, Rng::derive(cfg.seed, {10}));
    TrainConfig sched = cfg.schedule;
    sched.seed = Rng::derive(cfg.seed, {11});
    train_on_pool(model, pool, sched);
    EvalConfig ec;
    ec.label = "upper-bound";
    out.upper_bound = evaluate(db, model, ec);
    out.upper_bound.pairs_built = pool.size();
    out.upper_bound.note = "real views at test poses, " + schedule_note(sched);
  }

  {  // views rendered at the test poses from the train images
    std::vector<TrainingPair> pool;
    size_t dropped = 0;
    for (size_t ti : test) {
      const SceneRecord& rec = db.records[ti];
      SynthesisResult res;
      try {
        res = synthesize_view(db, cache, rec.pose, rec.intrinsics, cfg.synth);
      } catch (const NoSources&) {
        ++dropped;
        continue;
      }
      if (res.filled_fraction < cfg.synth.min_valid_fraction) {
        ++dropped;
        continue;
      }
      TrainingPair p = real_pair(rec, top1_neighbour(db, rec));
      p.query_id.clear();
      p.query_image = std::move(res.image);
      p.query_is_synthetic = true;
      p.query_fill = res.filled_fraction;
      pool.push_back(std::move(p));
    }
    Model model(cfg.model, Rng::derive(cfg.seed, {12}));
    TrainConfig sched = cfg.schedule;
    sched.seed = Rng::derive(cfg.seed, {13});
    train_on_pool(model, pool, sched);
    EvalConfig ec;
    ec.label = "synthetic-at-test";
    out.synth = evaluate(db, model, ec);
    out.synth.pairs_built = pool.size();
    out.synth.pairs_dropped = dropped;
    out.synth.mean_fill = synthetic_fill_mean(pool);
    out.synth.note = "rendered views at test poses, " + schedule_note(sched);
  }

  {  // neighbour pose taken as the answer
    EvalConfig ec;
    ec.label = "retrieval-only";
    out.retrieval = evaluate(db, identity_predictor(), ec);
    out.retrieval.note = "no training";
  }

  return out;
}

std::string SanityResult::to_json() const {
  json j;
  j["upper_bound"] = json::parse(upper_bound.to_json());
  j["synth"] = json::parse(synth.to_json());
  j["retrieval"] = json::parse(retrieval.to_json());
  return j.dump(2);
}

std::string AblationCell::name() const {
  std::string s = policy_name(policy) + "/" + arch_name(arch);
  if (train_fraction < 1.0) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/%.0f%%", 100.0 * train_fraction);
    s += buf;
  }
  return s;
}

std::vector<LocalizationReport> run_ablation(const SceneDatabase& db,
                                             const SourceCache& cache,
                                             const std::vector<AblationCell>& matrix,
                                             const AblationConfig& cfg) {
  cfg.perturb.validate();
  cfg.synth.validate();
  std::vector<LocalizationReport> reports;
  for (size_t ci = 0; ci < matrix.size(); ++ci) {
    const AblationCell& cell = matrix[ci];
    if (cell.train_fraction <= 0.0 || cell.train_fraction > 1.0) {
      throw ConfigError("train_fraction must be in (0, 1]");
    }
    const uint64_t cseed = Rng::derive(cfg.seed, {20, ci});

    std::vector<size_t> queries = db.train_indices();
    if (cell.train_fraction < 1.0) {
      Rng sel(Rng::derive(cseed, {21}));
      sel.shuffle(queries);
      const size_t keep = static_cast<size_t>(std::lround(
          cell.train_fraction * static_cast<double>(queries.size())));
      queries.resize(std::max<size_t>(keep, 1));
      std::sort(queries.begin(), queries.end());
    }

    TrainConfig sched = cfg.schedule;
    sched.policy = cell.policy;
    sched.seed = Rng::derive(cseed, {22});

    RegressorConfig mcfg = cfg.model;
    mcfg.arch = cell.arch;
    Model model(mcfg, Rng::derive(cseed, {23}));
    const TrainResult tres =
        train_model(model, db, cache, sched, cfg.perturb, cfg.synth, &queries);

    EvalConfig ec;
    ec.label = cell.name();
    LocalizationReport rep = evaluate(db, model, ec);
    rep.pairs_built = tres.pool_size;
    rep.pairs_dropped = tres.dropped_queries;
    rep.mean_fill = tres.first_pool_fill;
    rep.note = schedule_note(sched);
    log_info("cell " + cell.name() + " median_t " +
             std::to_string(rep.median_t) + " median_r " +
             std::to_string(rep.median_r));
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::string report_table(const std::vector<LocalizationReport>& reports) {
  std::string out =
      "run                            median_t(m)  median_r(deg)  pairs  fill\n";
  for (const LocalizationReport& r : reports) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-30s %11.3f %14.2f %6zu %5.2f\n",
                  r.label.c_str(), r.median_t, r.median_r, r.pairs_built,
                  r.mean_fill);
    out += line;
  }
  return out;
}

}  // namespace posesynth
