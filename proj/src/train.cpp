#include "posesynth/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>

#include "posesynth/errors.hpp"
#include "posesynth/geometry.hpp"

namespace posesynth {

int TrainConfig::swap_end_epoch(int total) const {
  return static_cast<int>(std::lround(swap_fraction * total));
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (lr_decay <= 0.0 || lr_decay > 1.0) throw ConfigError("lr_decay must be in (0, 1]");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (swap_fraction < 0.0 || swap_fraction > 1.0) {
    throw ConfigError("swap_fraction must be in [0, 1]");
  }
  if (color_jitter < 0.0 || color_jitter >= 1.0) {
    throw ConfigError("color_jitter must be in [0, 1)");
  }
  if (pool_retries < 1) throw ConfigError("pool_retries must be >= 1");
  if (regenerate_every < 0) throw ConfigError("regenerate_every must be >= 0");
}

void Adam::step(ParamStore& store, double lr) {
  if (m_.empty()) {
    m_.resize(store.entries.size());
    v_.resize(store.entries.size());
    for (size_t i = 0; i < store.entries.size(); ++i) {
      m_[i].assign(store.entries[i].value.data.size(), 0.0);
      v_[i].assign(store.entries[i].value.data.size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t e = 0; e < store.entries.size(); ++e) {
    ParamStore::Entry& p = store.entries[e];
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      const double gr = p.grad.data[i];
      if (!std::isfinite(gr)) throw NonFiniteGradient(p.name);
      m_[e][i] = b1_ * m_[e][i] + (1.0 - b1_) * gr;
      v_[e][i] = b2_ * v_[e][i] + (1.0 - b2_) * gr * gr;
      p.value.data[i] -=
          lr * (m_[e][i] / c1) / (std::sqrt(v_[e][i] / c2) + eps_);
    }
  }
}

std::vector<TrainingPair> build_pair_pool(const SceneDatabase& db,
                                          const SourceCache& cache,
                                          const TrainConfig& tcfg,
                                          const PerturbationConfig& pcfg,
                                          const SynthesisConfig& scfg,
                                          size_t* dropped,
                                          const std::vector<size_t>* queries,
                                          uint64_t rebuild) {
  std::vector<TrainingPair> pool;
  size_t lost = 0;
  const std::vector<size_t> all = queries ? *queries : db.train_indices();
  for (size_t qi : all) {
    bool built = false;
    for (int attempt = 0; attempt < tcfg.pool_retries && !built; ++attempt) {
      // rebuild 0 keeps the pre-salt derivation so existing seeds reproduce
      const uint64_t s =
          rebuild == 0
              ? Rng::derive(tcfg.seed, {1, qi, static_cast<uint64_t>(attempt)})
              : Rng::derive(tcfg.seed,
                            {1, rebuild, qi, static_cast<uint64_t>(attempt)});
      Rng rng(s);
      auto pair = build_training_pair(db, cache, qi, tcfg.policy, pcfg, scfg,
                                      false, rng);
      if (pair) {
        pool.push_back(std::move(*pair));
        built = true;
      }
    }
    if (!built) ++lost;
  }
  if (dropped) *dropped = lost;
  if (pool.empty()) throw EmptyScene("no usable training pairs");
  return pool;
}

namespace {

// loss targets want the same sign convention the rotation head emits
void canonical_target(Quaternion* q) {
  if (q->w < 0.0) {
    q->w = -q->w;
    q->x = -q->x;
    q->y = -q->y;
    q->z = -q->z;
  }
}

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
  return n == 0 ? 1.0 : sum / static_cast<double>(n);
}

// the epoch loop; pool_at may hand back a different pool as epochs advance
TrainResult run_epochs(
    Model& model, const TrainConfig& tcfg,
    const std::function<const std::vector<TrainingPair>&(int epoch)>& pool_at) {
  TrainResult result;

  Adam adam(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
  const int swap_end = tcfg.swap_end_epoch(tcfg.epochs);

  std::ofstream csv;
  if (!tcfg.loss_csv.empty()) {
    csv.open(tcfg.loss_csv);
    if (!csv) throw Error("cannot open " + tcfg.loss_csv + " for writing");
    csv << "epoch,mean_loss,lr\n";
  }

  std::vector<size_t> order;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const std::vector<TrainingPair>& pool = pool_at(epoch);
    if (pool.empty()) throw EmptyScene("no usable training pairs");
    if (order.size() != pool.size()) {
      order.resize(pool.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    }
    const double lr =
        tcfg.lr * std::pow(tcfg.lr_decay, static_cast<double>(epoch / tcfg.decay_every));
    // after the first decay the network runs in eval mode: frozen batch
    // statistics, no dropout, gradients still flowing
    const bool train_mode = epoch < tcfg.decay_every;
    const bool swapping = epoch < swap_end;

    Rng shuffle_rng(Rng::derive(tcfg.seed, {2, static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    size_t batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg.batch_size)) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(tcfg.batch_size));
      const int n = static_cast<int>(end - start);

      std::vector<const ImageBuffer*> q_imgs, n_imgs;
      std::vector<ImageBuffer> owned;
      owned.reserve(2 * static_cast<size_t>(n));
      Tensor tgt_q = Tensor::zeros({n, 4});
      Tensor tgt_t = Tensor::zeros({n, 3});

      for (size_t s = start; s < end; ++s) {
        const TrainingPair& pair = pool[order[s]];
        Rng srng(Rng::derive(tcfg.seed,
                             {3, static_cast<uint64_t>(epoch), order[s]}));
        const ImageBuffer* qi = &pair.query_image;
        const ImageBuffer* ni = &pair.nn_image;
        Pose qp = pair.query_pose, np = pair.nn_pose;
        if (swapping && pair.nn_is_synthetic && srng.uniform() < 0.5) {
          std::swap(qi, ni);
          std::swap(qp, np);
        }
        owned.push_back(color_jitter(*qi, srng, tcfg.color_jitter));
        q_imgs.push_back(&owned.back());
        owned.push_back(color_jitter(*ni, srng, tcfg.color_jitter));
        n_imgs.push_back(&owned.back());

        RelativePose rel = relative_pose(qp, np);
        canonical_target(&rel.q_rel);
        const size_t row = s - start;
        tgt_q.data[row * 4 + 0] = rel.q_rel.w;
        tgt_q.data[row * 4 + 1] = rel.q_rel.x;
        tgt_q.data[row * 4 + 2] = rel.q_rel.y;
        tgt_q.data[row * 4 + 3] = rel.q_rel.z;
        tgt_t.data[row * 3 + 0] = rel.t_rel.x;
        tgt_t.data[row * 3 + 1] = rel.t_rel.y;
        tgt_t.data[row * 3 + 2] = rel.t_rel.z;
      }

      Tape tape(&model.params());
      Rng drop_rng(Rng::derive(tcfg.seed, {4, static_cast<uint64_t>(epoch), batches}));
      const Model::Outputs out =
          model.forward(tape, Model::images_to_tensor(q_imgs),
                        Model::images_to_tensor(n_imgs), train_mode, &drop_rng);
      const int loss = tape.weighted_l1_loss(out.rot, out.trans, tgt_q, tgt_t,
                                             tcfg.loss_beta, tcfg.loss_gamma);
      const double loss_val = tape.value(loss).data[0];
      if (!std::isfinite(loss_val) || loss_val > 1e6) {
        throw DivergedLoss("epoch " + std::to_string(epoch) + " loss " +
                           std::to_string(loss_val));
      }
      model.params().zero_grads();
      tape.backward(loss);
      adam.step(model.params(), lr);

      loss_sum += loss_val * n;
      ++batches;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.mean_loss = loss_sum / static_cast<double>(order.size());
    result.history.push_back(stats);
    if (csv.is_open()) {
      csv << epoch << "," << stats.mean_loss << "," << lr << "\n";
    }
    if (epoch % 25 == 0 || epoch + 1 == tcfg.epochs) {
      log_info("epoch " + std::to_string(epoch) + " lr " + std::to_string(lr) +
               " loss " + std::to_string(stats.mean_loss));
    }
  }
  return result;
}

}  // namespace

TrainResult train_on_pool(Model& model, const std::vector<TrainingPair>& pool,
                          const TrainConfig& tcfg) {
  tcfg.validate();
  if (pool.empty()) throw EmptyScene("no usable training pairs");
  TrainResult result = run_epochs(
      model, tcfg,
      [&pool](int) -> const std::vector<TrainingPair>& { return pool; });
  result.pool_size = pool.size();
  result.first_pool_fill = synthetic_fill_mean(pool);
  return result;
}

TrainResult train_model(Model& model, const SceneDatabase& db,
                        const SourceCache& cache, const TrainConfig& tcfg,
                        const PerturbationConfig& pcfg,
                        const SynthesisConfig& scfg,
                        const std::vector<size_t>* queries) {
  tcfg.validate();
  pcfg.validate();
  scfg.validate();

  size_t dropped = 0;
  std::vector<TrainingPair> current =
      build_pair_pool(db, cache, tcfg, pcfg, scfg, &dropped, queries);
  log_info("train pool " + std::to_string(current.size()) + " pairs, " +
           std::to_string(dropped) + " queries dropped");

  TrainResult result;
  result.pool_size = current.size();
  result.dropped_queries = dropped;
  result.first_pool_fill = synthetic_fill_mean(current);

  const auto provider = [&](int epoch) -> const std::vector<TrainingPair>& {
    if (tcfg.regenerate_every > 0 && epoch > 0 &&
        epoch % tcfg.regenerate_every == 0) {
      const uint64_t rebuild =
          static_cast<uint64_t>(epoch / tcfg.regenerate_every);
      current = build_pair_pool(db, cache, tcfg, pcfg, scfg, nullptr, queries,
                                rebuild);
      log_info("epoch " + std::to_string(epoch) + " rebuilt pair pool, " +
               std::to_string(current.size()) + " pairs");
    }
    return current;
  };

  TrainResult run = run_epochs(model, tcfg, provider);
  result.history = std::move(run.history);
  return result;
}

}  // namespace posesynth
