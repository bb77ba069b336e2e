#include "posesynth/tape.hpp"

#include <cmath>
#include <cstring>
#include <memory>

#include "posesynth/errors.hpp"
#include "posesynth/kernels.hpp"

namespace posesynth {

Tensor Tensor::zeros(std::vector<int> s) {
  Tensor t;
  t.shape = std::move(s);
  t.data.assign(t.count(), 0.0);
  return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> d) {
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  if (t.data.size() != t.count()) throw Error("tensor shape/data mismatch");
  return t;
}

size_t Tensor::count() const {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

int ParamStore::add(const std::string& name, const std::vector<int>& shape) {
  if (find(name) >= 0) throw Error("duplicate parameter name " + name);
  Entry e;
  e.name = name;
  e.value = Tensor::zeros(shape);
  e.grad = Tensor::zeros(shape);
  entries.push_back(std::move(e));
  return static_cast<int>(entries.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

void ParamStore::zero_grads() {
  for (Entry& e : entries) std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
}

size_t ParamStore::total_count() const {
  size_t n = 0;
  for (const Entry& e : entries) n += e.value.count();
  return n;
}

int Tape::push(Tensor v, bool needs_grad, std::function<void()> back) {
  Rec r;
  r.value = std::move(v);
  r.needs_grad = needs_grad;
  r.back = std::move(back);
  recs_.push_back(std::move(r));
  return static_cast<int>(recs_.size()) - 1;
}

int Tape::input(Tensor t) { return push(std::move(t), false); }

int Tape::param(int entry) {
  Tensor copy = store_->entries[static_cast<size_t>(entry)].value;
  const int id = push(std::move(copy), true);
  recs_[static_cast<size_t>(id)].param_entry = entry;
  recs_[static_cast<size_t>(id)].back = [this, id, entry] {
    ParamStore::Entry& e = store_->entries[static_cast<size_t>(entry)];
    const Tensor& gr = g(id);
    for (size_t i = 0; i < gr.data.size(); ++i) e.grad.data[i] += gr.data[i];
  };
  return id;
}

int Tape::add(int a, int b) {
  const Tensor& ta = v(a);
  const Tensor& tb = v(b);
  if (ta.shape != tb.shape) throw Error("add: shape mismatch");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  const bool ng = needs(a) || needs(b);
  const int id = push(std::move(out), ng, {});
  recs_[static_cast<size_t>(id)].back = [this, id, a, b] {
    const Tensor& gr = g(id);
    if (needs(a)) kernels::axpy(1.0, gr.data.data(), g(a).data.data(), gr.data.size());
    if (needs(b)) kernels::axpy(1.0, gr.data.data(), g(b).data.data(), gr.data.size());
  };
  return id;
}

int Tape::scale(int a, double s) {
  Tensor out = v(a);
  kernels::scale(s, out.data.data(), out.data.size());
  const int id = push(std::move(out), needs(a), {});
  recs_[static_cast<size_t>(id)].back = [this, id, a, s] {
    if (!needs(a)) return;
    const Tensor& gr = g(id);
    kernels::axpy(s, gr.data.data(), g(a).data.data(), gr.data.size());
  };
  return id;
}

int Tape::relu(int a) {
  Tensor out = v(a);
  // nan passes through rather than flushing to zero, so poisoned values stay
  // visible to the finiteness checks downstream
  for (double& x : out.data) x = (x > 0.0 || std::isnan(x)) ? x : 0.0;
  const int id = push(std::move(out), needs(a), {});
  recs_[static_cast<size_t>(id)].back = [this, id, a] {
    if (!needs(a)) return;
    const Tensor& gr = g(id);
    const Tensor& in = v(a);
    Tensor& ga = g(a);
    for (size_t i = 0; i < gr.data.size(); ++i) {
      if (in.data[i] > 0.0) ga.data[i] += gr.data[i];
    }
  };
  return id;
}

int Tape::linear(int x, int w, int b) {
  const Tensor& tx = v(x);
  const Tensor& tw = v(w);
  const size_t n = static_cast<size_t>(tx.dim(0));
  const size_t in = static_cast<size_t>(tx.dim(1));
  const size_t out_dim = static_cast<size_t>(tw.dim(0));
  if (static_cast<size_t>(tw.dim(1)) != in) throw Error("linear: shape mismatch");

  Tensor out = Tensor::zeros({tx.dim(0), tw.dim(0)});
  kernels::gemm_nt(tx.data.data(), tw.data.data(), out.data.data(), n, out_dim,
                   in, false);
  if (b >= 0) {
    const Tensor& tb = v(b);
    for (size_t r = 0; r < n; ++r) {
      kernels::axpy(1.0, tb.data.data(), out.data.data() + r * out_dim, out_dim);
    }
  }
  const bool ng = needs(x) || needs(w) || (b >= 0 && needs(b));
  const int id = push(std::move(out), ng, {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, w, b, n, in, out_dim] {
    const Tensor& gr = g(id);
    if (needs(x)) {
      kernels::gemm_nn(gr.data.data(), v(w).data.data(), g(x).data.data(), n,
                       in, out_dim, true);
    }
    if (needs(w)) {
      kernels::gemm_tn(gr.data.data(), v(x).data.data(), g(w).data.data(),
                       out_dim, in, n, true);
    }
    if (b >= 0 && needs(b)) {
      Tensor& gb = g(b);
      for (size_t r = 0; r < n; ++r) {
        kernels::axpy(1.0, gr.data.data() + r * out_dim, gb.data.data(), out_dim);
      }
    }
  };
  return id;
}

namespace {

// 3x3 stride-2 pad-1 patch matrix: row per output pixel, 9*C columns
Tensor im2col_s2(const Tensor& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h / 2, wo = w / 2;
  Tensor col = Tensor::zeros({n * ho * wo, c * 9});
  const size_t row_len = static_cast<size_t>(c) * 9;
  size_t r = 0;
  for (int ni = 0; ni < n; ++ni) {
    const double* xi = x.data.data() + static_cast<size_t>(ni) * c * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++r) {
        double* dst = col.data.data() + r * row_len;
        for (int ci = 0; ci < c; ++ci) {
          const double* plane = xi + static_cast<size_t>(ci) * h * w;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * 2 - 1 + ky;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * 2 - 1 + kx;
              dst[(ci * 3 + ky) * 3 + kx] =
                  (iy >= 0 && iy < h && ix >= 0 && ix < w)
                      ? plane[static_cast<size_t>(iy) * w + ix]
                      : 0.0;
            }
          }
        }
      }
    }
  }
  return col;
}

void col2im_s2(const Tensor& dcol, int n, int c, int h, int w, Tensor* dx) {
  const int ho = h / 2, wo = w / 2;
  const size_t row_len = static_cast<size_t>(c) * 9;
  size_t r = 0;
  for (int ni = 0; ni < n; ++ni) {
    double* xi = dx->data.data() + static_cast<size_t>(ni) * c * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++r) {
        const double* src = dcol.data.data() + r * row_len;
        for (int ci = 0; ci < c; ++ci) {
          double* plane = xi + static_cast<size_t>(ci) * h * w;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * 2 - 1 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * 2 - 1 + kx;
              if (ix < 0 || ix >= w) continue;
              plane[static_cast<size_t>(iy) * w + ix] += src[(ci * 3 + ky) * 3 + kx];
            }
          }
        }
      }
    }
  }
}

}  // namespace

int Tape::conv2d_s2(int x, int w, int b) {
  const Tensor& tx = v(x);
  const Tensor& tw = v(w);
  const int n = tx.dim(0), cin = tx.dim(1), h = tx.dim(2), wd = tx.dim(3);
  const int k = tw.dim(0);
  if (tw.dim(1) != cin || tw.dim(2) != 3 || tw.dim(3) != 3) {
    throw Error("conv2d_s2: weight shape mismatch");
  }
  const int ho = h / 2, wo = wd / 2;
  auto col = std::make_shared<Tensor>(im2col_s2(tx));
  const size_t rows = static_cast<size_t>(n) * ho * wo;
  const size_t patch = static_cast<size_t>(cin) * 9;

  // gemm gives (rows, k) in output-pixel order; transpose into channel planes
  Tensor flat = Tensor::zeros({static_cast<int>(rows), k});
  kernels::gemm_nt(col->data.data(), tw.data.data(), flat.data.data(), rows,
                   static_cast<size_t>(k), patch, false);
  Tensor out = Tensor::zeros({n, k, ho, wo});
  const Tensor* tb = b >= 0 ? &v(b) : nullptr;
  for (int ni = 0; ni < n; ++ni) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const size_t r = (static_cast<size_t>(ni) * ho + oy) * wo + ox;
        for (int ki = 0; ki < k; ++ki) {
          out.data[((static_cast<size_t>(ni) * k + ki) * ho + oy) * wo + ox] =
              flat.data[r * k + ki] + (tb ? tb->data[static_cast<size_t>(ki)] : 0.0);
        }
      }
    }
  }

  const bool ng = needs(x) || needs(w) || (b >= 0 && needs(b));
  const int id = push(std::move(out), ng, {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, w, b, col, n, cin, h, wd,
                                         k, ho, wo, rows, patch] {
    const Tensor& gr = g(id);
    Tensor dflat = Tensor::zeros({static_cast<int>(rows), k});
    for (int ni = 0; ni < n; ++ni) {
      for (int ki = 0; ki < k; ++ki) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            dflat.data[((static_cast<size_t>(ni) * ho + oy) * wo + ox) * k + ki] =
                gr.data[((static_cast<size_t>(ni) * k + ki) * ho + oy) * wo + ox];
          }
        }
      }
    }
    if (b >= 0 && needs(b)) {
      Tensor& gb = g(b);
      for (size_t r = 0; r < rows; ++r) {
        kernels::axpy(1.0, dflat.data.data() + r * k, gb.data.data(),
                      static_cast<size_t>(k));
      }
    }
    if (needs(w)) {
      kernels::gemm_tn(dflat.data.data(), col->data.data(), g(w).data.data(),
                       static_cast<size_t>(k), patch, rows, true);
    }
    if (needs(x)) {
      Tensor dcol = Tensor::zeros({static_cast<int>(rows), static_cast<int>(patch)});
      kernels::gemm_nn(dflat.data.data(), v(w).data.data(), dcol.data.data(),
                       rows, patch, static_cast<size_t>(k), false);
      col2im_s2(dcol, n, cin, h, wd, &g(x));
    }
  };
  return id;
}

int Tape::gap(int x) {
  const Tensor& tx = v(x);
  const int n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  const double inv = 1.0 / (static_cast<double>(h) * w);
  Tensor out = Tensor::zeros({n, c});
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* plane =
          tx.data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
      double s = 0.0;
      for (int p = 0; p < h * w; ++p) s += plane[p];
      out.data[static_cast<size_t>(ni) * c + ci] = s * inv;
    }
  }
  const int id = push(std::move(out), needs(x), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, n, c, h, w, inv] {
    if (!needs(x)) return;
    const Tensor& gr = g(id);
    Tensor& gx = g(x);
    for (int ni = 0; ni < n; ++ni) {
      for (int ci = 0; ci < c; ++ci) {
        const double gv = gr.data[static_cast<size_t>(ni) * c + ci] * inv;
        double* plane =
            gx.data.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
        for (int p = 0; p < h * w; ++p) plane[p] += gv;
      }
    }
  };
  return id;
}

int Tape::stack_rows(int a, int b) {
  const Tensor& ta = v(a);
  const Tensor& tb = v(b);
  if (ta.dim(1) != tb.dim(1)) throw Error("stack_rows: width mismatch");
  const size_t f = static_cast<size_t>(ta.dim(1));
  Tensor out = Tensor::zeros({ta.dim(0) + tb.dim(0), ta.dim(1)});
  std::memcpy(out.data.data(), ta.data.data(), ta.data.size() * sizeof(double));
  std::memcpy(out.data.data() + ta.data.size(), tb.data.data(),
              tb.data.size() * sizeof(double));
  const int id = push(std::move(out), needs(a) || needs(b), {});
  recs_[static_cast<size_t>(id)].back = [this, id, a, b, f] {
    (void)f;
    const Tensor& gr = g(id);
    if (needs(a)) {
      kernels::axpy(1.0, gr.data.data(), g(a).data.data(), v(a).data.size());
    }
    if (needs(b)) {
      kernels::axpy(1.0, gr.data.data() + v(a).data.size(), g(b).data.data(),
                    v(b).data.size());
    }
  };
  return id;
}

int Tape::slice_rows(int x, int begin, int count) {
  const Tensor& tx = v(x);
  const size_t f = static_cast<size_t>(tx.dim(1));
  Tensor out = Tensor::zeros({count, tx.dim(1)});
  std::memcpy(out.data.data(), tx.data.data() + static_cast<size_t>(begin) * f,
              out.data.size() * sizeof(double));
  const int id = push(std::move(out), needs(x), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, begin, f] {
    if (!needs(x)) return;
    const Tensor& gr = g(id);
    kernels::axpy(1.0, gr.data.data(),
                  g(x).data.data() + static_cast<size_t>(begin) * f,
                  gr.data.size());
  };
  return id;
}

int Tape::interleave_rows(int a, int b) {
  const Tensor& ta = v(a);
  const Tensor& tb = v(b);
  if (ta.shape != tb.shape) throw Error("interleave_rows: shape mismatch");
  const int n = ta.dim(0);
  const size_t f = static_cast<size_t>(ta.dim(1));
  Tensor out = Tensor::zeros({2 * n, ta.dim(1)});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data.data() + (2 * static_cast<size_t>(i)) * f,
                ta.data.data() + static_cast<size_t>(i) * f, f * sizeof(double));
    std::memcpy(out.data.data() + (2 * static_cast<size_t>(i) + 1) * f,
                tb.data.data() + static_cast<size_t>(i) * f, f * sizeof(double));
  }
  const int id = push(std::move(out), needs(a) || needs(b), {});
  recs_[static_cast<size_t>(id)].back = [this, id, a, b, n, f] {
    const Tensor& gr = g(id);
    for (int i = 0; i < n; ++i) {
      if (needs(a)) {
        kernels::axpy(1.0, gr.data.data() + (2 * static_cast<size_t>(i)) * f,
                      g(a).data.data() + static_cast<size_t>(i) * f, f);
      }
      if (needs(b)) {
        kernels::axpy(1.0, gr.data.data() + (2 * static_cast<size_t>(i) + 1) * f,
                      g(b).data.data() + static_cast<size_t>(i) * f, f);
      }
    }
  };
  return id;
}

int Tape::select_stride2(int x, int offset) {
  const Tensor& tx = v(x);
  const int n = tx.dim(0) / 2;
  const size_t f = static_cast<size_t>(tx.dim(1));
  Tensor out = Tensor::zeros({n, tx.dim(1)});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data.data() + static_cast<size_t>(i) * f,
                tx.data.data() + (2 * static_cast<size_t>(i) + offset) * f,
                f * sizeof(double));
  }
  const int id = push(std::move(out), needs(x), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, n, offset, f] {
    if (!needs(x)) return;
    const Tensor& gr = g(id);
    Tensor& gx = g(x);
    for (int i = 0; i < n; ++i) {
      kernels::axpy(1.0, gr.data.data() + static_cast<size_t>(i) * f,
                    gx.data.data() + (2 * static_cast<size_t>(i) + offset) * f, f);
    }
  };
  return id;
}

int Tape::concat_positional(int x, int pe) {
  const Tensor& tx = v(x);
  const Tensor& tp = v(pe);
  const int n = tx.dim(0), f = tx.dim(1), d = tp.dim(1), cycle = tp.dim(0);
  Tensor out = Tensor::zeros({n, f + d});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data.data() + static_cast<size_t>(i) * (f + d),
                tx.data.data() + static_cast<size_t>(i) * f, f * sizeof(double));
    std::memcpy(out.data.data() + static_cast<size_t>(i) * (f + d) + f,
                tp.data.data() + static_cast<size_t>(i % cycle) * d,
                d * sizeof(double));
  }
  const int id = push(std::move(out), needs(x) || needs(pe), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, pe, n, f, d, cycle] {
    const Tensor& gr = g(id);
    for (int i = 0; i < n; ++i) {
      if (needs(x)) {
        kernels::axpy(1.0, gr.data.data() + static_cast<size_t>(i) * (f + d),
                      g(x).data.data() + static_cast<size_t>(i) * f,
                      static_cast<size_t>(f));
      }
      if (needs(pe)) {
        kernels::axpy(1.0, gr.data.data() + static_cast<size_t>(i) * (f + d) + f,
                      g(pe).data.data() + static_cast<size_t>(i % cycle) * d,
                      static_cast<size_t>(d));
      }
    }
  };
  return id;
}

int Tape::layernorm(int x, int gamma, int beta) {
  const Tensor& tx = v(x);
  const int n = tx.dim(0), f = tx.dim(1);
  const double eps = 1e-5;
  Tensor out = Tensor::zeros(tx.shape);
  auto xhat = std::make_shared<Tensor>(Tensor::zeros(tx.shape));
  auto inv_std = std::make_shared<Tensor>(Tensor::zeros({n}));
  const Tensor& tg = v(gamma);
  const Tensor& tb = v(beta);
  for (int i = 0; i < n; ++i) {
    const double* row = tx.data.data() + static_cast<size_t>(i) * f;
    double mean = 0.0;
    for (int j = 0; j < f; ++j) mean += row[j];
    mean /= f;
    double var = 0.0;
    for (int j = 0; j < f; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= f;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std->data[static_cast<size_t>(i)] = is;
    for (int j = 0; j < f; ++j) {
      const double xh = (row[j] - mean) * is;
      xhat->data[static_cast<size_t>(i) * f + j] = xh;
      out.data[static_cast<size_t>(i) * f + j] =
          tg.data[static_cast<size_t>(j)] * xh + tb.data[static_cast<size_t>(j)];
    }
  }
  const bool ng = needs(x) || needs(gamma) || needs(beta);
  const int id = push(std::move(out), ng, {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, gamma, beta, n, f, xhat,
                                         inv_std] {
    const Tensor& gr = g(id);
    const Tensor& tg = v(gamma);
    for (int i = 0; i < n; ++i) {
      const double* gro = gr.data.data() + static_cast<size_t>(i) * f;
      const double* xh = xhat->data.data() + static_cast<size_t>(i) * f;
      if (needs(gamma) || needs(beta)) {
        for (int j = 0; j < f; ++j) {
          if (needs(gamma)) g(gamma).data[static_cast<size_t>(j)] += gro[j] * xh[j];
          if (needs(beta)) g(beta).data[static_cast<size_t>(j)] += gro[j];
        }
      }
      if (needs(x)) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (int j = 0; j < f; ++j) {
          const double dxh = gro[j] * tg.data[static_cast<size_t>(j)];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= f;
        mean_dxh_xh /= f;
        const double is = inv_std->data[static_cast<size_t>(i)];
        double* gx = g(x).data.data() + static_cast<size_t>(i) * f;
        for (int j = 0; j < f; ++j) {
          const double dxh = gro[j] * tg.data[static_cast<size_t>(j)];
          gx[j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    }
  };
  return id;
}

int Tape::batchnorm1d(int x, int gamma, int beta, BatchNormState* state,
                      bool use_batch_stats, bool update_running) {
  const Tensor& tx = v(x);
  const int n = tx.dim(0), f = tx.dim(1);
  if (state->running_mean.data.empty()) {
    state->running_mean = Tensor::zeros({f});
    state->running_var = Tensor::from({f}, std::vector<double>(f, 1.0));
  }
  Tensor out = Tensor::zeros(tx.shape);
  auto xhat = std::make_shared<Tensor>(Tensor::zeros(tx.shape));
  auto inv_std = std::make_shared<Tensor>(Tensor::zeros({f}));
  const Tensor& tg = v(gamma);
  const Tensor& tb = v(beta);

  for (int j = 0; j < f; ++j) {
    double mean, var;
    if (use_batch_stats) {
      mean = 0.0;
      for (int i = 0; i < n; ++i) mean += tx.data[static_cast<size_t>(i) * f + j];
      mean /= n;
      var = 0.0;
      for (int i = 0; i < n; ++i) {
        const double d = tx.data[static_cast<size_t>(i) * f + j] - mean;
        var += d * d;
      }
      var /= n;
      if (update_running) {
        const double unbiased = n > 1 ? var * n / (n - 1.0) : var;
        state->running_mean.data[static_cast<size_t>(j)] +=
            state->momentum * (mean - state->running_mean.data[static_cast<size_t>(j)]);
        state->running_var.data[static_cast<size_t>(j)] +=
            state->momentum * (unbiased - state->running_var.data[static_cast<size_t>(j)]);
      }
    } else {
      mean = state->running_mean.data[static_cast<size_t>(j)];
      var = state->running_var.data[static_cast<size_t>(j)];
    }
    const double is = 1.0 / std::sqrt(var + state->eps);
    inv_std->data[static_cast<size_t>(j)] = is;
    for (int i = 0; i < n; ++i) {
      const double xh = (tx.data[static_cast<size_t>(i) * f + j] - mean) * is;
      xhat->data[static_cast<size_t>(i) * f + j] = xh;
      out.data[static_cast<size_t>(i) * f + j] =
          tg.data[static_cast<size_t>(j)] * xh + tb.data[static_cast<size_t>(j)];
    }
  }

  const bool ng = needs(x) || needs(gamma) || needs(beta);
  const int id = push(std::move(out), ng, {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, gamma, beta, n, f, xhat,
                                         inv_std, use_batch_stats] {
    const Tensor& gr = g(id);
    const Tensor& tg = v(gamma);
    for (int j = 0; j < f; ++j) {
      double dg = 0.0, db = 0.0;
      for (int i = 0; i < n; ++i) {
        const double go = gr.data[static_cast<size_t>(i) * f + j];
        dg += go * xhat->data[static_cast<size_t>(i) * f + j];
        db += go;
      }
      if (needs(gamma)) g(gamma).data[static_cast<size_t>(j)] += dg;
      if (needs(beta)) g(beta).data[static_cast<size_t>(j)] += db;
      if (!needs(x)) continue;
      const double is = inv_std->data[static_cast<size_t>(j)];
      const double gam = tg.data[static_cast<size_t>(j)];
      if (use_batch_stats) {
        // batch statistics take part in the gradient
        for (int i = 0; i < n; ++i) {
          const double go = gr.data[static_cast<size_t>(i) * f + j];
          const double xh = xhat->data[static_cast<size_t>(i) * f + j];
          g(x).data[static_cast<size_t>(i) * f + j] +=
              gam * is * (go - db / n - xh * dg / n);
        }
      } else {
        for (int i = 0; i < n; ++i) {
          g(x).data[static_cast<size_t>(i) * f + j] +=
              gam * is * gr.data[static_cast<size_t>(i) * f + j];
        }
      }
    }
  };
  return id;
}

int Tape::dropout(int x, double p, bool training, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const Tensor& tx = v(x);
  auto mask = std::make_shared<std::vector<double>>(tx.data.size());
  const double keep = 1.0 - p;
  Tensor out = tx;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double m = rng->uniform() >= p ? 1.0 / keep : 0.0;
    (*mask)[i] = m;
    out.data[i] *= m;
  }
  const int id = push(std::move(out), needs(x), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, mask] {
    if (!needs(x)) return;
    const Tensor& gr = g(id);
    Tensor& gx = g(x);
    for (size_t i = 0; i < gr.data.size(); ++i) gx.data[i] += gr.data[i] * (*mask)[i];
  };
  return id;
}

int Tape::attention(int x, int seq, int heads, int wq, int bq, int wk, int bk,
                    int wv, int bv, int wo, int bo, double attn_dropout,
                    bool training, Rng* rng) {
  const Tensor& tx = v(x);
  const int rows = tx.dim(0), m = tx.dim(1);
  if (rows % seq != 0 || m % heads != 0) throw Error("attention: bad shapes");
  const int pairs = rows / seq, dh = m / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const size_t rs = static_cast<size_t>(rows), ms = static_cast<size_t>(m);

  auto proj = [&](int w, int b) {
    Tensor y = Tensor::zeros({rows, m});
    kernels::gemm_nt(tx.data.data(), v(w).data.data(), y.data.data(), rs, ms, ms,
                     false);
    const Tensor& tb = v(b);
    for (size_t r = 0; r < rs; ++r) {
      kernels::axpy(1.0, tb.data.data(), y.data.data() + r * ms, ms);
    }
    return y;
  };
  auto q = std::make_shared<Tensor>(proj(wq, bq));
  auto k = std::make_shared<Tensor>(proj(wk, bk));
  auto vv = std::make_shared<Tensor>(proj(wv, bv));

  // attention weights per (pair, head): seq x seq
  auto attn = std::make_shared<Tensor>(Tensor::zeros({pairs, heads, seq, seq}));
  auto mask = training && attn_dropout > 0.0
                  ? std::make_shared<Tensor>(Tensor::zeros({pairs, heads, seq, seq}))
                  : nullptr;
  auto ctx = std::make_shared<Tensor>(Tensor::zeros({rows, m}));
  const double keep = 1.0 - attn_dropout;

  for (int p = 0; p < pairs; ++p) {
    for (int h = 0; h < heads; ++h) {
      double s[8][8];  // seq is tiny, statically bounded
      if (seq > 8) throw Error("attention: seq too large");
      for (int i = 0; i < seq; ++i) {
        const double* qi =
            q->data.data() + static_cast<size_t>(p * seq + i) * ms + h * dh;
        double mx = -1e300;
        for (int j = 0; j < seq; ++j) {
          const double* kj =
              k->data.data() + static_cast<size_t>(p * seq + j) * ms + h * dh;
          s[i][j] = kernels::dot(qi, kj, static_cast<size_t>(dh)) * inv_sqrt;
          mx = std::max(mx, s[i][j]);
        }
        double denom = 0.0;
        for (int j = 0; j < seq; ++j) {
          s[i][j] = std::exp(s[i][j] - mx);
          denom += s[i][j];
        }
        for (int j = 0; j < seq; ++j) {
          const size_t ai =
              ((static_cast<size_t>(p) * heads + h) * seq + i) * seq + j;
          attn->data[ai] = s[i][j] / denom;
          double used = attn->data[ai];
          if (mask) {
            const double mval = rng->uniform() >= attn_dropout ? 1.0 / keep : 0.0;
            mask->data[ai] = mval;
            used *= mval;
          }
          const double* vj =
              vv->data.data() + static_cast<size_t>(p * seq + j) * ms + h * dh;
          double* ci =
              ctx->data.data() + static_cast<size_t>(p * seq + i) * ms + h * dh;
          kernels::axpy(used, vj, ci, static_cast<size_t>(dh));
        }
      }
    }
  }

  Tensor out = Tensor::zeros({rows, m});
  kernels::gemm_nt(ctx->data.data(), v(wo).data.data(), out.data.data(), rs, ms,
                   ms, false);
  {
    const Tensor& tbo = v(bo);
    for (size_t r = 0; r < rs; ++r) {
      kernels::axpy(1.0, tbo.data.data(), out.data.data() + r * ms, ms);
    }
  }

  const int id = push(std::move(out), true, {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, wq, bq, wk, bk, wv, bv, wo,
                                         bo, q, k, vv, attn, mask, ctx, pairs,
                                         heads, seq, dh, inv_sqrt, rs, ms] {
    const Tensor& gr = g(id);
    // output projection
    Tensor dctx = Tensor::zeros({static_cast<int>(rs), static_cast<int>(ms)});
    kernels::gemm_nn(gr.data.data(), v(wo).data.data(), dctx.data.data(), rs, ms,
                     ms, false);
    if (needs(wo)) {
      kernels::gemm_tn(gr.data.data(), ctx->data.data(), g(wo).data.data(), ms,
                       ms, rs, true);
    }
    if (needs(bo)) {
      for (size_t r = 0; r < rs; ++r) {
        kernels::axpy(1.0, gr.data.data() + r * ms, g(bo).data.data(), ms);
      }
    }

    Tensor dq = Tensor::zeros({static_cast<int>(rs), static_cast<int>(ms)});
    Tensor dk = Tensor::zeros({static_cast<int>(rs), static_cast<int>(ms)});
    Tensor dv = Tensor::zeros({static_cast<int>(rs), static_cast<int>(ms)});
    for (int p = 0; p < pairs; ++p) {
      for (int h = 0; h < heads; ++h) {
        double da_used[8][8], da_pre[8][8];
        for (int i = 0; i < seq; ++i) {
          const double* dci =
              dctx.data.data() + static_cast<size_t>(p * seq + i) * ms + h * dh;
          for (int j = 0; j < seq; ++j) {
            const size_t ai =
                ((static_cast<size_t>(p) * heads + h) * seq + i) * seq + j;
            const double* vj =
                vv->data.data() + static_cast<size_t>(p * seq + j) * ms + h * dh;
            da_used[i][j] = kernels::dot(dci, vj, static_cast<size_t>(dh));
            const double used =
                attn->data[ai] * (mask ? mask->data[ai] : 1.0);
            kernels::axpy(used, dci,
                          dv.data.data() + static_cast<size_t>(p * seq + j) * ms +
                              h * dh,
                          static_cast<size_t>(dh));
            da_pre[i][j] = da_used[i][j] * (mask ? mask->data[ai] : 1.0);
          }
        }
        // softmax rows
        for (int i = 0; i < seq; ++i) {
          double dot_sa = 0.0;
          for (int j = 0; j < seq; ++j) {
            const size_t ai =
                ((static_cast<size_t>(p) * heads + h) * seq + i) * seq + j;
            dot_sa += da_pre[i][j] * attn->data[ai];
          }
          for (int j = 0; j < seq; ++j) {
            const size_t ai =
                ((static_cast<size_t>(p) * heads + h) * seq + i) * seq + j;
            const double ds = attn->data[ai] * (da_pre[i][j] - dot_sa) * inv_sqrt;
            kernels::axpy(ds,
                          k->data.data() + static_cast<size_t>(p * seq + j) * ms +
                              h * dh,
                          dq.data.data() + static_cast<size_t>(p * seq + i) * ms +
                              h * dh,
                          static_cast<size_t>(dh));
            kernels::axpy(ds,
                          q->data.data() + static_cast<size_t>(p * seq + i) * ms +
                              h * dh,
                          dk.data.data() + static_cast<size_t>(p * seq + j) * ms +
                              h * dh,
                          static_cast<size_t>(dh));
          }
        }
      }
    }

    auto back_proj = [&](const Tensor& dy, int w, int b) {
      if (needs(x)) {
        kernels::gemm_nn(dy.data.data(), v(w).data.data(), g(x).data.data(), rs,
                         ms, ms, true);
      }
      if (needs(w)) {
        kernels::gemm_tn(dy.data.data(), v(x).data.data(), g(w).data.data(), ms,
                         ms, rs, true);
      }
      if (needs(b)) {
        for (size_t r = 0; r < rs; ++r) {
          kernels::axpy(1.0, dy.data.data() + r * ms, g(b).data.data(), ms);
        }
      }
    };
    back_proj(dq, wq, bq);
    back_proj(dk, wk, bk);
    back_proj(dv, wv, bv);
  };
  return id;
}

int Tape::l2_normalize_rows(int x) {
  const Tensor& tx = v(x);
  const int n = tx.dim(0), f = tx.dim(1);
  Tensor out = tx;
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double* row = out.data.data() + static_cast<size_t>(i) * f;
    const double nn = std::sqrt(kernels::dot(row, row, static_cast<size_t>(f)));
    if (!(nn > 1e-12)) throw NonFiniteActivation("zero-norm row before normalize");
    (*norms)[static_cast<size_t>(i)] = nn;
    kernels::scale(1.0 / nn, row, static_cast<size_t>(f));
  }
  const int id = push(std::move(out), needs(x), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, n, f, norms] {
    if (!needs(x)) return;
    const Tensor& gr = g(id);
    const Tensor& y = v(id);
    for (int i = 0; i < n; ++i) {
      const double* go = gr.data.data() + static_cast<size_t>(i) * f;
      const double* yr = y.data.data() + static_cast<size_t>(i) * f;
      const double proj = kernels::dot(go, yr, static_cast<size_t>(f));
      double* gx = g(x).data.data() + static_cast<size_t>(i) * f;
      const double inv = 1.0 / (*norms)[static_cast<size_t>(i)];
      for (int j = 0; j < f; ++j) gx[j] += (go[j] - yr[j] * proj) * inv;
    }
  };
  return id;
}

int Tape::canonical_sign_rows(int x) {
  const Tensor& tx = v(x);
  const int n = tx.dim(0), f = tx.dim(1);
  Tensor out = tx;
  auto signs = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double s = tx.data[static_cast<size_t>(i) * f] >= 0.0 ? 1.0 : -1.0;
    (*signs)[static_cast<size_t>(i)] = s;
    if (s < 0.0) {
      kernels::scale(-1.0, out.data.data() + static_cast<size_t>(i) * f,
                     static_cast<size_t>(f));
    }
  }
  const int id = push(std::move(out), needs(x), {});
  recs_[static_cast<size_t>(id)].back = [this, id, x, n, f, signs] {
    if (!needs(x)) return;
    const Tensor& gr = g(id);
    for (int i = 0; i < n; ++i) {
      kernels::axpy((*signs)[static_cast<size_t>(i)],
                    gr.data.data() + static_cast<size_t>(i) * f,
                    g(x).data.data() + static_cast<size_t>(i) * f,
                    static_cast<size_t>(f));
    }
  };
  return id;
}

int Tape::weighted_l1_loss(int pred_q, int pred_t, const Tensor& tgt_q,
                           const Tensor& tgt_t, double beta, double gamma) {
  const Tensor& pq = v(pred_q);
  const Tensor& pt = v(pred_t);
  if (pq.shape != tgt_q.shape || pt.shape != tgt_t.shape) {
    throw Error("loss: target shape mismatch");
  }
  const int n = pq.dim(0);
  const double wq = std::exp(beta), wt = std::exp(gamma);
  double total = 0.0;
  for (size_t i = 0; i < pq.data.size(); ++i) {
    total += wq * std::abs(pq.data[i] - tgt_q.data[i]);
  }
  for (size_t i = 0; i < pt.data.size(); ++i) {
    total += wt * std::abs(pt.data[i] - tgt_t.data[i]);
  }
  total /= n;
  auto tq = std::make_shared<Tensor>(tgt_q);
  auto tt = std::make_shared<Tensor>(tgt_t);
  const int id = push(Tensor::from({1}, {total}), needs(pred_q) || needs(pred_t), {});
  recs_[static_cast<size_t>(id)].back = [this, id, pred_q, pred_t, tq, tt, wq, wt,
                                         n] {
    const double go = g(id).data[0];
    if (needs(pred_q)) {
      const Tensor& pv = v(pred_q);
      Tensor& gx = g(pred_q);
      for (size_t i = 0; i < pv.data.size(); ++i) {
        const double d = pv.data[i] - tq->data[i];
        if (d != 0.0) gx.data[i] += go * wq * (d > 0.0 ? 1.0 : -1.0) / n;
      }
    }
    if (needs(pred_t)) {
      const Tensor& pv = v(pred_t);
      Tensor& gx = g(pred_t);
      for (size_t i = 0; i < pv.data.size(); ++i) {
        const double d = pv.data[i] - tt->data[i];
        if (d != 0.0) gx.data[i] += go * wt * (d > 0.0 ? 1.0 : -1.0) / n;
      }
    }
  };
  return id;
}

void Tape::backward(int loss) {
  for (Rec& r : recs_) {
    if (r.needs_grad) r.grad = Tensor::zeros(r.value.shape);
  }
  Rec& top = recs_[static_cast<size_t>(loss)];
  if (!top.needs_grad) throw Error("backward: loss does not depend on parameters");
  std::fill(top.grad.data.begin(), top.grad.data.end(), 1.0);
  for (size_t i = recs_.size(); i-- > 0;) {
    if (recs_[i].back && recs_[i].needs_grad) recs_[i].back();
  }
}

}  // namespace posesynth
