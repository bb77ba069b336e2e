#pragma once

#include <functional>
#include <string>
#include <vector>

#include "posesynth/util.hpp"

namespace posesynth {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  static Tensor zeros(std::vector<int> s);
  static Tensor from(std::vector<int> s, std::vector<double> d);
  size_t count() const;
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
};

struct BatchNormState {
  Tensor running_mean, running_var;
  double momentum = 0.1, eps = 1e-5;
};

struct ParamStore {
  struct Entry {
    std::string name;
    Tensor value, grad;
  };
  std::vector<Entry> entries;

  int add(const std::string& name, const std::vector<int>& shape);
  int find(const std::string& name) const;  // -1 when absent
  void zero_grads();
  size_t total_count() const;
};

// Reverse-mode tape. Each op records a closure that pushes this node's grad
// into its parents; backward() runs them newest-first. Parameter leaves flush
// their grad into the store.
class Tape {
 public:
  explicit Tape(ParamStore* store) : store_(store) {}

  int input(Tensor t);
  int param(int entry);

  int add(int a, int b);
  int scale(int a, double s);
  int relu(int a);
  // y = x * w^T + b; x (N,I), w (O,I), b (O) or -1 for none
  int linear(int x, int w, int b);
  // 3x3 stride-2 pad-1; x (N,C,H,W), w (K,C,3,3), b (K)
  int conv2d_s2(int x, int w, int b);
  int gap(int x);  // (N,C,H,W) -> (N,C), spatial mean
  int stack_rows(int a, int b);
  int slice_rows(int x, int begin, int count);
  int interleave_rows(int a, int b);      // row 2i from a, row 2i+1 from b
  int select_stride2(int x, int offset);  // rows offset, offset+2, ...
  int concat_positional(int x, int pe);   // row j gains pe[j % pe_rows]
  int layernorm(int x, int gamma, int beta);
  int batchnorm1d(int x, int gamma, int beta, BatchNormState* state,
                  bool use_batch_stats, bool update_running);
  int dropout(int x, double p, bool training, Rng* rng);
  // x is (N*seq, m) with the tokens of one pair adjacent; dropout acts on the
  // attention weights
  int attention(int x, int seq, int heads, int wq, int bq, int wk, int bk,
                int wv, int bv, int wo, int bo, double attn_dropout,
                bool training, Rng* rng);
  int l2_normalize_rows(int x);
  int canonical_sign_rows(int x);  // rows flipped so the first column is >= 0
  // mean over rows of e^beta * |dq|_1 + e^gamma * |dt|_1
  int weighted_l1_loss(int pred_q, int pred_t, const Tensor& tgt_q,
                       const Tensor& tgt_t, double beta, double gamma);

  const Tensor& value(int id) const { return recs_[static_cast<size_t>(id)].value; }
  const Tensor& grad_of(int id) const { return recs_[static_cast<size_t>(id)].grad; }
  void backward(int loss);

 private:
  struct Rec {
    Tensor value, grad;
    std::function<void()> back;
    bool needs_grad = false;
    int param_entry = -1;
  };

  int push(Tensor v, bool needs, std::function<void()> back = {});
  bool needs(int id) const { return recs_[static_cast<size_t>(id)].needs_grad; }
  Tensor& g(int id) { return recs_[static_cast<size_t>(id)].grad; }
  const Tensor& v(int id) const { return recs_[static_cast<size_t>(id)].value; }

  std::vector<Rec> recs_;
  ParamStore* store_;
};

}  // namespace posesynth
