#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posesynth/geometry.hpp"
#include "posesynth/raster.hpp"
#include "posesynth/tape.hpp"
#include "posesynth/util.hpp"

namespace posesynth {

enum class Arch { kTransformer, kMlp };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);

struct RegressorConfig {
  Arch arch = Arch::kTransformer;
  int image_size = 64;
  std::vector<int> conv_channels = {8, 16, 32, 64};
  int embed_dim = 128;    // per-image embedding width
  int pos_dim = 32;       // learned position code appended to each token
  int layers = 2;
  int heads = 4;
  int ff_mult = 4;
  double dropout = 0.1;
  int mlp_hidden = 0;  // 0 picks the width whose total is closest to the
                       // transformer's

  int token_dim() const { return embed_dim + pos_dim; }
  void validate() const;
};

// Relative pose regressor over (query, retrieved) image pairs. Both
// architectures share the conv embedding; the transformer reads the pair as a
// two-token sequence, the baseline concatenates the embeddings into an mlp.
class Model {
 public:
  Model(const RegressorConfig& cfg, uint64_t seed);

  struct Outputs {
    int rot;    // (N,4) unit rows, first component >= 0
    int trans;  // (N,3)
  };
  // query/nn are (N,3,S,S) image tensors
  Outputs forward(Tape& tape, const Tensor& query, const Tensor& nn,
                  bool training, Rng* rng);

  RelativePose predict(const ImageBuffer& query, const ImageBuffer& nn);

  static Tensor images_to_tensor(const std::vector<const ImageBuffer*>& imgs);

  void save(const std::string& path, uint64_t epoch) const;
  static Model load(const std::string& path, uint64_t* epoch_out = nullptr);

  const RegressorConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  BatchNormState& bn_state() { return bn_; }
  size_t param_count() const { return store_.total_count(); }

 private:
  int embed(Tape& t, const Tensor& imgs) const;
  Outputs forward_transformer(Tape& t, int q_emb, int n_emb, int n, bool training,
                              Rng* rng);
  Outputs forward_mlp(Tape& t, int q_emb, int n_emb) const;

  RegressorConfig cfg_;
  ParamStore store_;
  BatchNormState bn_;
};

// width of the baseline's hidden layers whose parameter total lands closest
// to the transformer's for the same config
int matched_hidden_width(const RegressorConfig& cfg);

size_t count_params(const RegressorConfig& cfg);

}  // namespace posesynth
