#include "posesynth/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "posesynth/errors.hpp"

namespace posesynth {

const char* arch_name(Arch a) {
  return a == Arch::kTransformer ? "transformer" : "mlp";
}

Arch arch_from_name(const std::string& name) {
  if (name == "transformer") return Arch::kTransformer;
  if (name == "mlp") return Arch::kMlp;
  throw ConfigError("unknown architecture: " + name);
}

void RegressorConfig::validate() const {
  if (image_size < 16 || image_size % 16 != 0) {
    throw ConfigError("image_size must be a positive multiple of 16");
  }
  if (conv_channels.empty()) throw ConfigError("conv_channels must not be empty");
  for (int c : conv_channels) {
    if (c <= 0) throw ConfigError("conv_channels must be positive");
  }
  if (embed_dim <= 0 || pos_dim <= 0 || layers <= 0 || heads <= 0 || ff_mult <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (token_dim() % heads != 0) {
    throw ConfigError("embed_dim + pos_dim must be divisible by heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("dropout must be in [0, 1)");
  }
  if (mlp_hidden < 0) throw ConfigError("mlp_hidden must be >= 0");
}

namespace {

size_t backbone_params(const RegressorConfig& cfg) {
  size_t total = 0;
  int in = 3;
  for (int out : cfg.conv_channels) {
    total += static_cast<size_t>(out) * in * 9 + out;
    in = out;
  }
  total += static_cast<size_t>(cfg.embed_dim) * in + cfg.embed_dim;
  return total;
}

size_t transformer_params(const RegressorConfig& cfg) {
  const size_t c = static_cast<size_t>(cfg.embed_dim);
  const size_t m = static_cast<size_t>(cfg.token_dim());
  size_t total = backbone_params(cfg);
  total += 4 * c * c + 4 * c;  // preproc expand
  total += 2 * 4 * c;          // preproc batchnorm
  total += c * 4 * c + c;      // preproc project
  total += 2 * static_cast<size_t>(cfg.pos_dim);
  const size_t ffw = static_cast<size_t>(cfg.ff_mult) * m;
  const size_t per_layer = 2 * (2 * m)          // both layernorms
                           + 4 * (m * m + m)    // q k v o projections
                           + ffw * m + ffw      // ff expand
                           + m * ffw + m;       // ff project
  total += static_cast<size_t>(cfg.layers) * per_layer;
  total += 2 * m;  // final layernorm
  total += (m * m + m + 4 * m + 4) + (m * m + m + 3 * m + 3);  // output heads
  return total;
}

size_t mlp_params(const RegressorConfig& cfg, int hidden) {
  const size_t c = static_cast<size_t>(cfg.embed_dim);
  const size_t h = static_cast<size_t>(hidden);
  size_t total = backbone_params(cfg);
  total += 2 * h * c + h;  // split first layer over the two embeddings
  total += h * h + h;
  total += 4 * h + 4 + 3 * h + 3;
  return total;
}

}  // namespace

int matched_hidden_width(const RegressorConfig& cfg) {
  const size_t target = transformer_params(cfg);
  int best = 1;
  size_t best_err = std::numeric_limits<size_t>::max();
  for (int h = 1; h <= 8192; ++h) {
    const size_t n = mlp_params(cfg, h);
    const size_t err = n > target ? n - target : target - n;
    if (err < best_err) {
      best_err = err;
      best = h;
    }
    if (n > 2 * target) break;
  }
  return best;
}

size_t count_params(const RegressorConfig& cfg) {
  if (cfg.arch == Arch::kTransformer) return transformer_params(cfg);
  const int h = cfg.mlp_hidden > 0 ? cfg.mlp_hidden : matched_hidden_width(cfg);
  return mlp_params(cfg, h);
}

Model::Model(const RegressorConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.arch == Arch::kMlp && cfg_.mlp_hidden == 0) {
    cfg_.mlp_hidden = matched_hidden_width(cfg_);
  }
  Rng rng(Rng::derive(seed, {0x70617261}));

  auto he_fill = [&](int entry, size_t fan_in) {
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : store_.entries[static_cast<size_t>(entry)].value.data) {
      v = rng.normal(sigma);
    }
  };
  auto add_linear = [&](const std::string& name, int out, int in) {
    he_fill(store_.add(name + ".w", {out, in}), static_cast<size_t>(in));
    store_.add(name + ".b", {out});
  };
  auto add_norm = [&](const std::string& name, int dim) {
    const int g = store_.add(name + ".g", {dim});
    for (double& v : store_.entries[static_cast<size_t>(g)].value.data) v = 1.0;
    store_.add(name + ".b", {dim});
  };

  int in = 3;
  for (size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
    const int out = cfg_.conv_channels[i];
    const std::string name = "conv" + std::to_string(i + 1);
    he_fill(store_.add(name + ".w", {out, in, 3, 3}), static_cast<size_t>(in) * 9);
    store_.add(name + ".b", {out});
    in = out;
  }
  add_linear("embed", cfg_.embed_dim, in);

  if (cfg_.arch == Arch::kTransformer) {
    const int c = cfg_.embed_dim, m = cfg_.token_dim();
    add_linear("pre1", 4 * c, c);
    add_norm("pre_bn", 4 * c);
    add_linear("pre2", c, 4 * c);
    const int pe = store_.add("pe", {2, cfg_.pos_dim});
    for (double& v : store_.entries[static_cast<size_t>(pe)].value.data) {
      v = rng.normal(0.02);
    }
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add_norm(p + "ln1", m);
      add_linear(p + "attn.q", m, m);
      add_linear(p + "attn.k", m, m);
      add_linear(p + "attn.v", m, m);
      add_linear(p + "attn.o", m, m);
      add_norm(p + "ln2", m);
      add_linear(p + "ff1", cfg_.ff_mult * m, m);
      add_linear(p + "ff2", m, cfg_.ff_mult * m);
    }
    add_norm("final_ln", m);
    add_linear("rot1", m, m);
    add_linear("rot2", 4, m);
    add_linear("trans1", m, m);
    add_linear("trans2", 3, m);
  } else {
    const int c = cfg_.embed_dim, h = cfg_.mlp_hidden;
    he_fill(store_.add("mlp1q.w", {h, c}), static_cast<size_t>(2 * c));
    he_fill(store_.add("mlp1n.w", {h, c}), static_cast<size_t>(2 * c));
    store_.add("mlp1.b", {h});
    add_linear("mlp2", h, h);
    add_linear("mlp_rot", 4, h);
    add_linear("mlp_trans", 3, h);
  }
}

Tensor Model::images_to_tensor(const std::vector<const ImageBuffer*>& imgs) {
  if (imgs.empty()) throw Error("empty image batch");
  const int w = imgs[0]->width, h = imgs[0]->height;
  Tensor t = Tensor::zeros({static_cast<int>(imgs.size()), 3, h, w});
  for (size_t n = 0; n < imgs.size(); ++n) {
    const ImageBuffer& img = *imgs[n];
    if (img.width != w || img.height != h) throw Error("mixed image sizes in batch");
    double* base = t.data.data() + n * 3u * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const size_t px = (static_cast<size_t>(y) * w + x) * 3;
        for (int ch = 0; ch < 3; ++ch) {
          base[static_cast<size_t>(ch) * h * w + static_cast<size_t>(y) * w + x] =
              img.rgb[px + static_cast<size_t>(ch)];
        }
      }
    }
  }
  return t;
}

int Model::embed(Tape& t, const Tensor& imgs) const {
  int x = t.input(imgs);
  for (size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    x = t.relu(t.conv2d_s2(x, t.param(store_.find(name + ".w")),
                           t.param(store_.find(name + ".b"))));
  }
  return t.linear(t.gap(x), t.param(store_.find("embed.w")),
                  t.param(store_.find("embed.b")));
}

Model::Outputs Model::forward_transformer(Tape& t, int q_emb, int n_emb, int n,
                                          bool training, Rng* rng) {
  auto lin = [&](const std::string& name, int x) {
    return t.linear(x, t.param(store_.find(name + ".w")),
                    t.param(store_.find(name + ".b")));
  };
  auto ln = [&](const std::string& name, int x) {
    return t.layernorm(x, t.param(store_.find(name + ".g")),
                       t.param(store_.find(name + ".b")));
  };

  // shared preprocessing over all 2n embeddings, batchnorm across the batch
  int stacked = t.stack_rows(q_emb, n_emb);
  stacked = t.relu(lin("pre1", stacked));
  stacked = t.batchnorm1d(stacked, t.param(store_.find("pre_bn.g")),
                          t.param(store_.find("pre_bn.b")), &bn_, training,
                          training);
  stacked = lin("pre2", stacked);

  int tok = t.interleave_rows(t.slice_rows(stacked, 0, n),
                              t.slice_rows(stacked, n, n));
  tok = t.concat_positional(tok, t.param(store_.find("pe")));

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto pw = [&](const std::string& s) { return t.param(store_.find(p + s)); };
    const int attn = t.attention(ln(p + "ln1", tok), 2, cfg_.heads,
                                 pw("attn.q.w"), pw("attn.q.b"), pw("attn.k.w"),
                                 pw("attn.k.b"), pw("attn.v.w"), pw("attn.v.b"),
                                 pw("attn.o.w"), pw("attn.o.b"), cfg_.dropout,
                                 training, rng);
    tok = t.add(tok, t.dropout(attn, cfg_.dropout, training, rng));
    int ff = t.relu(lin(p + "ff1", ln(p + "ln2", tok)));
    ff = lin(p + "ff2", t.dropout(ff, cfg_.dropout, training, rng));
    tok = t.add(tok, t.dropout(ff, cfg_.dropout, training, rng));
  }
  tok = ln("final_ln", tok);

  // the token sitting at the retrieved-image position carries the answer
  const int nn_tok = t.select_stride2(tok, 1);
  const int rot_raw = lin("rot2", t.relu(lin("rot1", nn_tok)));
  const int trans = lin("trans2", t.relu(lin("trans1", nn_tok)));
  const int rot = t.canonical_sign_rows(t.l2_normalize_rows(rot_raw));
  return {rot, trans};
}

Model::Outputs Model::forward_mlp(Tape& t, int q_emb, int n_emb) const {
  // split first layer is the column concat [q n] without a concat op
  int x = t.add(t.linear(q_emb, t.param(store_.find("mlp1q.w")),
                         t.param(store_.find("mlp1.b"))),
                t.linear(n_emb, t.param(store_.find("mlp1n.w")), -1));
  x = t.relu(x);
  x = t.relu(t.linear(x, t.param(store_.find("mlp2.w")),
                      t.param(store_.find("mlp2.b"))));
  const int rot_raw = t.linear(x, t.param(store_.find("mlp_rot.w")),
                               t.param(store_.find("mlp_rot.b")));
  const int trans = t.linear(x, t.param(store_.find("mlp_trans.w")),
                             t.param(store_.find("mlp_trans.b")));
  const int rot = t.canonical_sign_rows(t.l2_normalize_rows(rot_raw));
  return {rot, trans};
}

Model::Outputs Model::forward(Tape& tape, const Tensor& query, const Tensor& nn,
                              bool training, Rng* rng) {
  if (query.shape != nn.shape) throw Error("query/nn batch shape mismatch");
  if (query.dim(2) != cfg_.image_size || query.dim(3) != cfg_.image_size) {
    throw Error("batch does not match configured image size");
  }
  const int n = query.dim(0);
  const int q_emb = embed(tape, query);
  const int n_emb = embed(tape, nn);
  Outputs out = cfg_.arch == Arch::kTransformer
                    ? forward_transformer(tape, q_emb, n_emb, n, training, rng)
                    : forward_mlp(tape, q_emb, n_emb);
  for (double v : tape.value(out.rot).data) {
    if (!std::isfinite(v)) throw NonFiniteActivation("rotation head output");
  }
  for (double v : tape.value(out.trans).data) {
    if (!std::isfinite(v)) throw NonFiniteActivation("translation head output");
  }
  return out;
}

RelativePose Model::predict(const ImageBuffer& query, const ImageBuffer& nn) {
  Tape tape(&store_);
  const Tensor q = images_to_tensor({&query});
  const Tensor n = images_to_tensor({&nn});
  const Outputs out = forward(tape, q, n, false, nullptr);
  const Tensor& rq = tape.value(out.rot);
  const Tensor& rt = tape.value(out.trans);
  RelativePose rel;
  rel.q_rel = Quaternion{rq.data[0], rq.data[1], rq.data[2], rq.data[3]};
  rel.t_rel = Vec3{rt.data[0], rt.data[1], rt.data[2]};
  return rel;
}

namespace {

void write_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ofstream& f, uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_f64s(std::ofstream& f, const std::vector<double>& v) {
  write_u64(f, v.size());
  f.write(reinterpret_cast<const char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(double)));
}
void write_str(std::ofstream& f, const std::string& s) {
  write_u32(f, static_cast<uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw CorruptFile("truncated checkpoint");
  return v;
}
uint64_t read_u64(std::ifstream& f) {
  uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw CorruptFile("truncated checkpoint");
  return v;
}
std::vector<double> read_f64s(std::ifstream& f) {
  const uint64_t n = read_u64(f);
  if (n > (1u << 28)) throw CorruptFile("checkpoint tensor too large");
  std::vector<double> v(n);
  f.read(reinterpret_cast<char*>(v.data()),
         static_cast<std::streamsize>(n * sizeof(double)));
  if (!f) throw CorruptFile("truncated checkpoint");
  return v;
}
std::string read_str(std::ifstream& f) {
  const uint32_t n = read_u32(f);
  if (n > 4096) throw CorruptFile("checkpoint name too long");
  std::string s(n, '\0');
  f.read(s.data(), n);
  if (!f) throw CorruptFile("truncated checkpoint");
  return s;
}

}  // namespace

void Model::save(const std::string& path, uint64_t epoch) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write("PSRP", 4);
  write_u32(f, 1);
  write_u32(f, cfg_.arch == Arch::kTransformer ? 0u : 1u);
  write_u32(f, static_cast<uint32_t>(cfg_.image_size));
  write_u32(f, static_cast<uint32_t>(cfg_.conv_channels.size()));
  for (int c : cfg_.conv_channels) write_u32(f, static_cast<uint32_t>(c));
  write_u32(f, static_cast<uint32_t>(cfg_.embed_dim));
  write_u32(f, static_cast<uint32_t>(cfg_.pos_dim));
  write_u32(f, static_cast<uint32_t>(cfg_.layers));
  write_u32(f, static_cast<uint32_t>(cfg_.heads));
  write_u32(f, static_cast<uint32_t>(cfg_.ff_mult));
  f.write(reinterpret_cast<const char*>(&cfg_.dropout), sizeof(double));
  write_u32(f, static_cast<uint32_t>(cfg_.mlp_hidden));
  write_u64(f, epoch);
  write_u32(f, static_cast<uint32_t>(store_.entries.size()));
  for (const ParamStore::Entry& e : store_.entries) {
    write_str(f, e.name);
    write_f64s(f, e.value.data);
  }
  write_f64s(f, bn_.running_mean.data);
  write_f64s(f, bn_.running_var.data);
  if (!f) throw Error("failed writing " + path);
}

Model Model::load(const std::string& path, uint64_t* epoch_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "PSRP", 4) != 0) {
    throw CorruptFile("not a checkpoint: " + path);
  }
  if (read_u32(f) != 1) throw CorruptFile("unsupported checkpoint version");
  RegressorConfig cfg;
  cfg.arch = read_u32(f) == 0 ? Arch::kTransformer : Arch::kMlp;
  cfg.image_size = static_cast<int>(read_u32(f));
  cfg.conv_channels.resize(read_u32(f));
  for (int& c : cfg.conv_channels) c = static_cast<int>(read_u32(f));
  cfg.embed_dim = static_cast<int>(read_u32(f));
  cfg.pos_dim = static_cast<int>(read_u32(f));
  cfg.layers = static_cast<int>(read_u32(f));
  cfg.heads = static_cast<int>(read_u32(f));
  cfg.ff_mult = static_cast<int>(read_u32(f));
  f.read(reinterpret_cast<char*>(&cfg.dropout), sizeof(double));
  cfg.mlp_hidden = static_cast<int>(read_u32(f));
  const uint64_t epoch = read_u64(f);

  Model model(cfg, 0);
  const uint32_t n = read_u32(f);
  if (n != model.store_.entries.size()) {
    throw CorruptFile("checkpoint parameter list does not match architecture");
  }
  for (ParamStore::Entry& e : model.store_.entries) {
    const std::string name = read_str(f);
    if (name != e.name) throw CorruptFile("unexpected parameter " + name);
    std::vector<double> data = read_f64s(f);
    if (data.size() != e.value.data.size()) {
      throw CorruptFile("parameter " + name + " has the wrong size");
    }
    e.value.data = std::move(data);
  }
  std::vector<double> rm = read_f64s(f);
  std::vector<double> rv = read_f64s(f);
  if (!rm.empty()) {
    model.bn_.running_mean = Tensor::from({static_cast<int>(rm.size())}, rm);
    model.bn_.running_var = Tensor::from({static_cast<int>(rv.size())}, rv);
  }
  if (epoch_out) *epoch_out = epoch;
  return model;
}

}  // namespace posesynth
