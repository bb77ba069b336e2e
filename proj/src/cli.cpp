#include "posesynth/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "posesynth/config.hpp"
#include "posesynth/errors.hpp"
#include "posesynth/harness.hpp"
#include "posesynth/png_io.hpp"
#include "posesynth/train.hpp"
#include "posesynth/util.hpp"

namespace posesynth {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// everything a subcommand can configure, defaults first, then the config
// file, then flags
struct Settings {
  SceneSpec scene;
  TrainConfig schedule;
  RegressorConfig model;
  PerturbationConfig perturb = PerturbationConfig::outdoor();
  SynthesisConfig synth = SynthesisConfig::outdoor();
};

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(static_cast<int>(config_i64(key, item)));
  }
  if (out.empty()) throw ConfigError("config key " + key + ": empty list");
  return out;
}

void apply_key(Settings* s, const std::string& key, const std::string& value) {
  TrainConfig& t = s->schedule;
  RegressorConfig& m = s->model;
  PerturbationConfig& p = s->perturb;
  SynthesisConfig& y = s->synth;
  SceneSpec& sc = s->scene;

  if (key == "epochs") t.epochs = static_cast<int>(config_i64(key, value));
  else if (key == "batch_size") t.batch_size = static_cast<int>(config_i64(key, value));
  else if (key == "lr") t.lr = config_f64(key, value);
  else if (key == "lr_decay") t.lr_decay = config_f64(key, value);
  else if (key == "decay_every") t.decay_every = static_cast<int>(config_i64(key, value));
  else if (key == "loss_beta") t.loss_beta = config_f64(key, value);
  else if (key == "loss_gamma") t.loss_gamma = config_f64(key, value);
  else if (key == "color_jitter") t.color_jitter = config_f64(key, value);
  else if (key == "swap_fraction") t.swap_fraction = config_f64(key, value);
  else if (key == "pool_retries") t.pool_retries = static_cast<int>(config_i64(key, value));
  else if (key == "regenerate_every") t.regenerate_every = static_cast<int>(config_i64(key, value));
  else if (key == "policy") t.policy = policy_from_name(value);
  else if (key == "arch") m.arch = arch_from_name(value);
  else if (key == "conv_channels") m.conv_channels = parse_int_list(key, value);
  else if (key == "embed_dim") m.embed_dim = static_cast<int>(config_i64(key, value));
  else if (key == "pos_dim") m.pos_dim = static_cast<int>(config_i64(key, value));
  else if (key == "layers") m.layers = static_cast<int>(config_i64(key, value));
  else if (key == "heads") m.heads = static_cast<int>(config_i64(key, value));
  else if (key == "ff_mult") m.ff_mult = static_cast<int>(config_i64(key, value));
  else if (key == "dropout") m.dropout = config_f64(key, value);
  else if (key == "mlp_hidden") m.mlp_hidden = static_cast<int>(config_i64(key, value));
  else if (key == "train_count") sc.train_count = static_cast<int>(config_i64(key, value));
  else if (key == "test_count") sc.test_count = static_cast<int>(config_i64(key, value));
  else if (key == "image_size") sc.image_size = static_cast<int>(config_i64(key, value));
  else if (key == "sparse_keep_rate") sc.sparse_keep_rate = config_f64(key, value);
  else if (key == "noise_sigma_frac") sc.noise_sigma_frac = config_f64(key, value);
  else if (key == "alpha_q") p.alpha_q = config_f64(key, value);
  else if (key == "alpha_t") {
    const double v = config_f64(key, value);
    p.alpha_t = {v, v, v};
  } else if (key == "sigma_yaw_deg") p.sigma_yaw_deg = config_f64(key, value);
  else if (key == "sigma_roll_deg") p.sigma_roll_deg = config_f64(key, value);
  else if (key == "sigma_pitch_deg") p.sigma_pitch_deg = config_f64(key, value);
  else if (key == "perturb_prob") p.perturb_prob = config_f64(key, value);
  else if (key == "real_nn_prob") p.real_nn_prob = config_f64(key, value);
  else if (key == "top_n_neighbours") p.top_n_neighbours = static_cast<int>(config_i64(key, value));
  else if (key == "nn_max_l1_dist") {
    const double v = config_f64(key, value);
    if (v <= 0.0) p.nn_max_l1_dist.reset();
    else p.nn_max_l1_dist = v;
  } else if (key == "fill_threshold") y.fill_threshold = config_f64(key, value);
  else if (key == "max_sources") y.max_sources = static_cast<int>(config_i64(key, value));
  else if (key == "min_valid_fraction") y.min_valid_fraction = config_f64(key, value);
  else if (key == "source_rotation_gate_deg") y.source_rotation_gate_deg = config_f64(key, value);
  else throw ConfigError("unknown config key: " + key);
}

Settings build_settings(const RunConfig& rc) {
  Settings s;
  if (!rc.config_path.empty()) {
    for (const auto& [key, value] : load_config(rc.config_path)) {
      apply_key(&s, key, value);
    }
  }
  // flags win over config-file values
  s.schedule.policy = rc.policy;
  s.model.arch = rc.arch;
  if (rc.epochs) s.schedule.epochs = *rc.epochs;
  if (rc.seed) s.schedule.seed = *rc.seed;
  return s;
}

uint64_t require_seed(const RunConfig& rc, const std::string& sub) {
  if (!rc.seed) {
    throw ConfigError(sub + " is stochastic and needs --seed");
  }
  return *rc.seed;
}

std::string require_path(const std::string& path, const std::string& flag,
                         const std::string& sub) {
  if (path.empty()) throw ConfigError(sub + " needs " + flag);
  return path;
}

SceneDatabase load_scene_checked(const RunConfig& rc) {
  return load_scene(require_path(rc.scene_dir, "--scene", rc.subcommand));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

// scene presets fix the camera model; the image size comes from the files
RegressorConfig model_for_scene(const Settings& s, const SceneDatabase& db) {
  RegressorConfig cfg = s.model;
  cfg.image_size = db.records.at(0).image.width;
  cfg.validate();
  return cfg;
}

json pose_to_json(const std::string& id, const Pose& pose) {
  return json{{"id", id},
              {"center", {pose.center.x, pose.center.y, pose.center.z}},
              {"rotation",
               {pose.rotation.w, pose.rotation.x, pose.rotation.y, pose.rotation.z}},
              {"yaw_deg", yaw_deg(pose.rotation)}};
}

int cmd_generate(const RunConfig& rc) {
  const uint64_t seed = require_seed(rc, "generate");
  const std::string out = require_path(rc.out_path, "--out", "generate");
  Settings s = build_settings(rc);
  SceneSpec spec = SceneSpec::by_name(rc.spec_name);
  // size overrides from the config file land on top of the preset
  if (!rc.config_path.empty()) {
    Settings base;  // defaults, to detect which keys were touched
    if (s.scene.train_count != base.scene.train_count) spec.train_count = s.scene.train_count;
    if (s.scene.test_count != base.scene.test_count) spec.test_count = s.scene.test_count;
    if (s.scene.image_size != base.scene.image_size) spec.image_size = s.scene.image_size;
    if (s.scene.sparse_keep_rate != base.scene.sparse_keep_rate) spec.sparse_keep_rate = s.scene.sparse_keep_rate;
    if (s.scene.noise_sigma_frac != base.scene.noise_sigma_frac) spec.noise_sigma_frac = s.scene.noise_sigma_frac;
  }
  std::cout << "effective seed: " << seed << "\n";
  const SceneDatabase db = generate_scene(spec, seed);
  fs::create_directories(out);
  save_scene(db, out);
  std::cout << "wrote " << db.records.size() << " records (" << spec.name()
            << ") to " << out << "\n";
  return 0;
}

int cmd_synth(const RunConfig& rc) {
  const std::string out = require_path(rc.out_path, "--out", "synth");
  const Settings s = build_settings(rc);
  const SceneDatabase db = load_scene_checked(rc);
  const SourceCache cache = prepare_sources(db);
  fs::create_directories(out);

  json summary = json::array();
  size_t rendered = 0;
  for (size_t ti : db.test_indices()) {
    const SceneRecord& rec = db.records[ti];
    json row{{"id", rec.id}};
    try {
      const SynthesisResult res =
          synthesize_view(db, cache, rec.pose, rec.intrinsics, s.synth);
      write_png(out + "/synth_" + rec.id + ".png", res.image);
      row["filled_fraction"] = res.filled_fraction;
      row["sources"] = res.sources_used.size();
      ++rendered;
    } catch (const NoSources&) {
      row["skipped"] = "no sources within the rotation gate";
    }
    summary.push_back(std::move(row));
  }
  write_text(out + "/synthesis.json", summary.dump(2));
  std::cout << "rendered " << rendered << " of " << db.test_indices().size()
            << " test views to " << out << "\n";
  return 0;
}

int cmd_sample(const RunConfig& rc) {
  const uint64_t seed = require_seed(rc, "sample");
  const Settings s = build_settings(rc);
  const SceneDatabase db = load_scene_checked(rc);
  std::cout << "effective seed: " << seed << "\n";

  std::vector<Pose> sampled;
  json rows = json::array();
  for (size_t qi : db.train_indices()) {
    const SceneRecord& rec = db.records[qi];
    Rng rng(Rng::derive(seed, {qi}));
    Pose pose = rec.pose;
    if (rc.policy == SamplePolicy::kInDistribution) {
      pose = sample_in_distribution(rec.pose, s.perturb, rng);
    } else if (rc.policy == SamplePolicy::kOutOfDistribution) {
      pose = sample_out_of_distribution(rec.pose, db, s.perturb, rng);
    }
    sampled.push_back(pose);
    rows.push_back(pose_to_json(rec.id, pose));
  }
  json doc;
  doc["policy"] = policy_name(rc.policy);
  doc["poses"] = std::move(rows);
  doc["bias"] = json::parse(analyze_bias(sampled).to_json());
  const std::string text = doc.dump(2);
  if (rc.out_path.empty()) std::cout << text << "\n";
  else write_text(rc.out_path, text);
  return 0;
}

int cmd_analyze_bias(const RunConfig& rc) {
  build_settings(rc);  // reject unknown config keys even with nothing to apply
  const SceneDatabase db = load_scene_checked(rc);
  std::vector<Pose> poses;
  for (size_t qi : db.train_indices()) poses.push_back(db.records[qi].pose);
  const BiasReport rep = analyze_bias(poses);
  if (rc.out_path.empty()) std::cout << rep.to_json() << "\n";
  else write_text(rc.out_path, rep.to_json());
  return 0;
}

int cmd_train(const RunConfig& rc) {
  const uint64_t seed = require_seed(rc, "train");
  const std::string out = require_path(rc.out_path, "--out", "train");
  Settings s = build_settings(rc);
  const SceneDatabase db = load_scene_checked(rc);
  const SourceCache cache = prepare_sources(db);
  const RegressorConfig mcfg = model_for_scene(s, db);
  fs::create_directories(out);
  s.schedule.loss_csv = out + "/loss.csv";
  std::cout << "effective seed: " << seed << "\n";

  Model model(mcfg, Rng::derive(seed, {0x6d6f64}));
  const TrainResult res = train_model(model, db, cache, s.schedule, s.perturb, s.synth);
  model.save(out + "/model.ckpt", static_cast<uint64_t>(s.schedule.epochs));
  std::cout << "pool " << res.pool_size << " pairs (" << res.dropped_queries
            << " queries dropped), final loss "
            << (res.history.empty() ? 0.0 : res.history.back().mean_loss)
            << "\nsaved " << out << "/model.ckpt\n";
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  const std::string model_path = require_path(rc.model_path, "--model", "eval");
  const SceneDatabase db = load_scene_checked(rc);
  Model model = Model::load(model_path);
  if (model.config().image_size != db.records.at(0).image.width) {
    throw ConfigError("--model was trained at image size " +
                      std::to_string(model.config().image_size) +
                      " but --scene has " +
                      std::to_string(db.records.at(0).image.width));
  }
  EvalConfig ec;
  ec.label = "eval";
  LocalizationReport rep = evaluate(db, model, ec);
  log_info("throughput " + std::to_string(rep.throughput_ips) + " images/s");
  rep.throughput_ips = 0.0;  // timing is logged, files stay reproducible
  std::cout << report_table({rep});
  if (!rc.out_path.empty()) write_text(rc.out_path, rep.to_json());
  return 0;
}

int cmd_experiment(const RunConfig& rc) {
  if (rc.experiment != "sanity-check" && rc.experiment != "ablation" &&
      rc.experiment != "data-fraction") {
    throw ConfigError("unknown experiment template: " + rc.experiment +
                      " (expected sanity-check, ablation, or data-fraction)");
  }
  const uint64_t seed = require_seed(rc, "experiment");
  Settings s = build_settings(rc);
  const SceneDatabase db = load_scene_checked(rc);
  const SourceCache cache = prepare_sources(db);
  const RegressorConfig mcfg = model_for_scene(s, db);
  std::cout << "effective seed: " << seed << "\n";

  std::vector<LocalizationReport> reports;
  std::string doc;
  std::string out_name;
  if (rc.experiment == "sanity-check") {
    SanityConfig cfg;
    cfg.schedule = s.schedule;
    cfg.model = mcfg;
    cfg.synth = s.synth;
    cfg.seed = seed;
    SanityResult res = run_sanity_check(db, cache, cfg);
    for (LocalizationReport* r : {&res.upper_bound, &res.synth, &res.retrieval}) {
      log_info(r->label + " throughput " + std::to_string(r->throughput_ips) +
               " images/s");
      r->throughput_ips = 0.0;
      reports.push_back(*r);
    }
    doc = res.to_json();
    out_name = "sanity.json";
  } else if (rc.experiment == "ablation") {
    std::vector<AblationCell> matrix;
    for (SamplePolicy p : {SamplePolicy::kReal, SamplePolicy::kInDistribution,
                           SamplePolicy::kOutOfDistribution}) {
      matrix.push_back({p, rc.arch, 1.0});
    }
    AblationConfig cfg{s.schedule, mcfg, s.perturb, s.synth, seed};
    reports = run_ablation(db, cache, matrix, cfg);
    out_name = "ablation.json";
  } else if (rc.experiment == "data-fraction") {
    std::vector<AblationCell> matrix;
    for (double f : {0.1, 0.25, 0.5}) {
      matrix.push_back({SamplePolicy::kOutOfDistribution, rc.arch, f});
    }
    AblationConfig cfg{s.schedule, mcfg, s.perturb, s.synth, seed};
    reports = run_ablation(db, cache, matrix, cfg);
    out_name = "data_fraction.json";
  } else {
    throw ConfigError("unknown experiment template: " + rc.experiment +
                      " (expected sanity-check, ablation, or data-fraction)");
  }

  if (doc.empty()) {
    json arr = json::array();
    for (LocalizationReport& r : reports) {
      log_info(r.label + " throughput " + std::to_string(r.throughput_ips) +
               " images/s");
      r.throughput_ips = 0.0;
      arr.push_back(json::parse(r.to_json()));
    }
    doc = arr.dump(2);
  }
  std::cout << report_table(reports);
  if (!rc.out_path.empty()) {
    fs::create_directories(rc.out_path);
    write_text(rc.out_path + "/" + out_name, doc);
    std::cout << "wrote " << rc.out_path << "/" << out_name << "\n";
  }
  return 0;
}

void add_common(CLI::App* sub, RunConfig* rc, bool with_policy_arch) {
  sub->add_option("--scene", rc->scene_dir, "scene directory");
  sub->add_option("--out", rc->out_path, "output file or directory");
  sub->add_option("--seed", rc->seed, "RNG seed");
  sub->add_option("--config", rc->config_path, "KEY=VALUE config file");
  sub->add_option("--threads", rc->threads, "worker threads; 1 is bitwise deterministic")
      ->check(CLI::PositiveNumber);
  if (with_policy_arch) {
    sub->add_option("--policy", rc->policy, "pair policy")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, SamplePolicy>{
                {"real", SamplePolicy::kReal},
                {"in-dist", SamplePolicy::kInDistribution},
                {"out-dist", SamplePolicy::kOutOfDistribution}},
            CLI::ignore_case));
    sub->add_option("--arch", rc->arch, "regressor architecture")
        ->transform(CLI::CheckedTransformer(
            std::map<std::string, Arch>{{"transformer", Arch::kTransformer},
                                        {"mlp", Arch::kMlp}},
            CLI::ignore_case));
    sub->add_option("--epochs", rc->epochs, "training epochs");
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  RunConfig rc;
  CLI::App app{"desk-scale camera relocalization toolkit"};
  app.require_subcommand(1);

  CLI::App* g = app.add_subcommand("generate", "render a procedural scene");
  g->add_option("--spec", rc.spec_name,
                "biased-street, uniform-orbit, or indoor-room");
  add_common(g, &rc, false);

  CLI::App* sy = app.add_subcommand("synth", "render views at the test poses");
  add_common(sy, &rc, false);

  CLI::App* sa = app.add_subcommand("sample", "sample poses for each train view");
  add_common(sa, &rc, true);

  CLI::App* ab = app.add_subcommand("analyze-bias", "yaw histogram of the train split");
  add_common(ab, &rc, false);

  CLI::App* tr = app.add_subcommand("train", "train a relative pose regressor");
  add_common(tr, &rc, true);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  ev->add_option("--model", rc.model_path, "checkpoint path");
  add_common(ev, &rc, false);

  CLI::App* ex = app.add_subcommand("experiment", "run a named experiment template");
  ex->add_option("template", rc.experiment,
                 "sanity-check, ablation, or data-fraction")
      ->required();
  add_common(ex, &rc, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);  // --help and friends
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    for (const auto* sub : {g, sy, sa, ab, tr, ev, ex}) {
      if (!sub->parsed()) continue;
      rc.subcommand = sub->get_name();
      if (sub == g) return cmd_generate(rc);
      if (sub == sy) return cmd_synth(rc);
      if (sub == sa) return cmd_sample(rc);
      if (sub == ab) return cmd_analyze_bias(rc);
      if (sub == tr) return cmd_train(rc);
      if (sub == ev) return cmd_eval(rc);
      return cmd_experiment(rc);
    }
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CorruptFile& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const EmptyScene& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace posesynth
