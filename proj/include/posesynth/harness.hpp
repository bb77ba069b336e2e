#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "posesynth/dataset.hpp"
#include "posesynth/model.hpp"
#include "posesynth/pose_sampling.hpp"
#include "posesynth/train.hpp"
#include "posesynth/view_synthesis.hpp"

namespace posesynth {

struct LocalizationReport {
  std::string label;
  std::vector<double> t_err_m;    // per test query, metres
  std::vector<double> r_err_deg;  // per test query, degrees
  double median_t = 0.0;
  double median_r = 0.0;
  size_t pairs_built = 0;    // training pairs behind this run
  size_t pairs_dropped = 0;  // queries that never produced a pair
  double mean_fill = 1.0;    // mean filled fraction of the synthetic sides
  double throughput_ips = 0.0;  // localized images per second
  std::string note;

  void finalize();  // recompute the medians from the error lists
  std::string to_json() const;
  static LocalizationReport from_json(const std::string& text);
};

struct BiasReport {
  std::array<size_t, 36> bins{};  // 10-degree yaw bins over [0, 360)
  size_t total = 0;
  int mode_count = 0;
  int nonempty_bins = 0;

  std::string to_json() const;
  static BiasReport from_json(const std::string& text);
};

// lower of the two central elements for even counts
double lower_median(std::vector<double> v);

using RelPredictor =
    std::function<RelativePose(const SceneRecord& query, const SceneRecord& nn)>;

RelPredictor oracle_predictor();    // ground-truth relative pose
RelPredictor identity_predictor();  // degenerates to the neighbour's pose
RelPredictor model_predictor(Model& model);

enum class RetrievalMode { kTopOne, kRandomNeighbour };

struct EvalConfig {
  RetrievalMode retrieval = RetrievalMode::kTopOne;
  uint64_t seed = 0;  // random-neighbour draws only
  std::string label;
};

// top-1 (or random) retrieval, relative prediction, composition, errors
LocalizationReport evaluate(const SceneDatabase& db, const RelPredictor& predict,
                            const EvalConfig& cfg);
LocalizationReport evaluate(const SceneDatabase& db, Model& model,
                            const EvalConfig& cfg);

BiasReport analyze_bias(const std::vector<Pose>& poses);

// batched forward throughput in localized images per second
double measure_throughput(Model& model, int batch, int reps);

struct SanityConfig {
  TrainConfig schedule;    // shared by the two trained rows
  RegressorConfig model;   // arch used for both
  SynthesisConfig synth;   // gate for rendering at test poses
  uint64_t seed = 0;
};

struct SanityResult {
  LocalizationReport upper_bound;  // trained on real views at test poses
  LocalizationReport synth;        // trained on views rendered at test poses
  LocalizationReport retrieval;    // neighbour pose taken as-is

  std::string to_json() const;
};

SanityResult run_sanity_check(const SceneDatabase& db, const SourceCache& cache,
                              const SanityConfig& cfg);

struct AblationCell {
  SamplePolicy policy = SamplePolicy::kReal;
  Arch arch = Arch::kTransformer;
  double train_fraction = 1.0;  // share of train queries kept

  std::string name() const;
};

struct AblationConfig {
  TrainConfig schedule;
  RegressorConfig model;  // arch overridden per cell
  PerturbationConfig perturb;
  SynthesisConfig synth;
  uint64_t seed = 0;
};

// one trained model and report per cell
std::vector<LocalizationReport> run_ablation(const SceneDatabase& db,
                                             const SourceCache& cache,
                                             const std::vector<AblationCell>& matrix,
                                             const AblationConfig& cfg);

// fixed-width table, one report per row
std::string report_table(const std::vector<LocalizationReport>& reports);

}  // namespace posesynth
