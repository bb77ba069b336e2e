#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posesynth/dataset.hpp"
#include "posesynth/model.hpp"
#include "posesynth/pose_sampling.hpp"
#include "posesynth/view_synthesis.hpp"

namespace posesynth {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 16;
  double lr = 1e-4;
  double lr_decay = 0.1;
  int decay_every = 100;  // epochs per decay step; also ends full train mode
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  double loss_beta = 3.0, loss_gamma = 0.0;
  double color_jitter = 0.05;
  // swapping runs for the leading fraction of epochs, rounded
  double swap_fraction = 700.0 / 1200.0;
  SamplePolicy policy = SamplePolicy::kOutOfDistribution;
  int pool_retries = 20;
  // epochs between pair-pool rebuilds; 0 trains on one fixed pool. Fresh
  // pools keep the regressor from memorizing a small pair set.
  int regenerate_every = 0;
  uint64_t seed = 0;
  std::string loss_csv;  // per-epoch lr and mean loss, empty disables

  int swap_end_epoch(int total) const;  // first epoch without swapping
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  size_t pool_size = 0;        // first pool; rebuilds are logged
  size_t dropped_queries = 0;  // likewise from the first build
  double first_pool_fill = 1.0;  // mean filled fraction of synthetic sides
};

// Adam with bias correction; slot layout follows the store's entry order.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(ParamStore& store, double lr);
  uint64_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// One pre-built pair per training query (swap deferred to the epoch loop).
// queries restricts the pool to a subset of train indices; null means all.
// rebuild salts the draws so later builds see fresh pairs; 0 is the first
// build and keeps the historical derivation.
std::vector<TrainingPair> build_pair_pool(const SceneDatabase& db,
                                          const SourceCache& cache,
                                          const TrainConfig& tcfg,
                                          const PerturbationConfig& pcfg,
                                          const SynthesisConfig& scfg,
                                          size_t* dropped = nullptr,
                                          const std::vector<size_t>* queries = nullptr,
                                          uint64_t rebuild = 0);

// The epoch loop alone, for callers that assemble their own pairs. The pool
// is fixed for the whole run; regenerate_every only acts in train_model.
TrainResult train_on_pool(Model& model, const std::vector<TrainingPair>& pool,
                          const TrainConfig& tcfg);

TrainResult train_model(Model& model, const SceneDatabase& db,
                        const SourceCache& cache, const TrainConfig& tcfg,
                        const PerturbationConfig& pcfg,
                        const SynthesisConfig& scfg,
                        const std::vector<size_t>* queries = nullptr);

}  // namespace posesynth
