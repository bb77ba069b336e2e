#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <vector>

#include "posesynth/errors.hpp"
#include "posesynth/model.hpp"
#include "posesynth/util.hpp"

using namespace posesynth;

namespace {

RegressorConfig desk_config() { return RegressorConfig{}; }

RegressorConfig tiny_config(Arch arch) {
  RegressorConfig cfg;
  cfg.arch = arch;
  cfg.image_size = 16;
  cfg.conv_channels = {4, 8};
  cfg.embed_dim = 12;
  cfg.pos_dim = 4;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ff_mult = 2;
  cfg.dropout = 0.0;
  return cfg;
}

Tensor random_batch(int n, int size, uint64_t seed) {
  Rng rng(Rng::derive(seed, {7}));
  Tensor t = Tensor::zeros({n, 3, size, size});
  for (double& v : t.data) v = rng.uniform();
  return t;
}

ImageBuffer random_image(int size, uint64_t seed) {
  Rng rng(Rng::derive(seed, {8}));
  ImageBuffer img = ImageBuffer::filled(size, size, 0, 0, 0);
  for (double& v : img.rgb) v = rng.uniform();
  return img;
}

// loss of one forward pass against fixed targets, for differencing
double model_loss(Model& model, const Tensor& q, const Tensor& n,
                  const Tensor& tq, const Tensor& tt, bool training) {
  Tape tape(&model.params());
  Rng drop(Rng::derive(99, {1}));
  const Model::Outputs out = model.forward(tape, q, n, training, &drop);
  const int loss = tape.weighted_l1_loss(out.rot, out.trans, tq, tt, 3.0, 0.0);
  return tape.value(loss).data[0];
}

void check_model_fd(Model& model, bool training, uint64_t seed, int samples) {
  const int n = 2;
  const int size = model.config().image_size;
  const Tensor q = random_batch(n, size, seed);
  const Tensor nn = random_batch(n, size, seed + 1);
  Rng trng(Rng::derive(seed, {9}));
  Tensor tq = Tensor::zeros({n, 4});
  Tensor tt = Tensor::zeros({n, 3});
  for (int i = 0; i < n; ++i) {
    Quaternion qq{1.0 + trng.normal(0.2), trng.normal(0.2), trng.normal(0.2),
                  trng.normal(0.2)};
    qq = quat_normalize(qq);
    tq.data[static_cast<size_t>(i) * 4 + 0] = std::abs(qq.w);
    tq.data[static_cast<size_t>(i) * 4 + 1] = qq.x;
    tq.data[static_cast<size_t>(i) * 4 + 2] = qq.y;
    tq.data[static_cast<size_t>(i) * 4 + 3] = qq.z;
    for (int j = 0; j < 3; ++j) {
      tt.data[static_cast<size_t>(i) * 3 + j] = trng.normal(0.5);
    }
  }

  Tape tape(&model.params());
  Rng drop(Rng::derive(99, {1}));
  const Model::Outputs out = model.forward(tape, q, nn, training, &drop);
  const int loss = tape.weighted_l1_loss(out.rot, out.trans, tq, tt, 3.0, 0.0);
  model.params().zero_grads();
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (const ParamStore::Entry& e : model.params().entries) {
    analytic.push_back(e.grad);
  }

  Rng pick(Rng::derive(seed, {10}));
  int checked = 0;
  while (checked < samples) {
    const size_t e = static_cast<size_t>(pick.uniform_int(
        0, static_cast<int>(model.params().entries.size()) - 1));
    ParamStore::Entry& entry = model.params().entries[e];
    const size_t i = static_cast<size_t>(
        pick.uniform_int(0, static_cast<int>(entry.value.data.size()) - 1));
    const double orig = entry.value.data[i];
    const double h = 1e-5 * std::max(1.0, std::abs(orig));
    entry.value.data[i] = orig + h;
    const double fp = model_loss(model, q, nn, tq, tt, training);
    entry.value.data[i] = orig - h;
    const double fm = model_loss(model, q, nn, tq, tt, training);
    entry.value.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double ref = analytic[e].data[i];
    INFO("entry " << entry.name << " elem " << i << " fd " << fd << " analytic "
                  << ref);
    CHECK(std::abs(fd - ref) < 1e-7 + 1e-4 * std::max(std::abs(fd), std::abs(ref)));
    ++checked;
  }
}

}  // namespace

TEST_CASE("desk transformer registers the hand counted parameter total") {
  RegressorConfig cfg = desk_config();
  Model model(cfg, 11);
  // conv stack 32848, pair preprocessor 132736, position codes 64, two
  // attention blocks 309280 each, final norm 320, output heads 52647
  CHECK(model.param_count() == 837175);
  CHECK(count_params(cfg) == 837175);
}

TEST_CASE("baseline width lands within ten percent of the transformer") {
  RegressorConfig cfg = desk_config();
  const size_t target = count_params(cfg);
  cfg.arch = Arch::kMlp;
  Model model(cfg, 12);
  const double ratio =
      static_cast<double>(model.param_count()) / static_cast<double>(target);
  CHECK(ratio > 0.9);
  CHECK(ratio < 1.1);
  CHECK(model.config().mlp_hidden > 0);
  CHECK(count_params(cfg) == model.param_count());
  // explicit width is honored
  cfg.mlp_hidden = 32;
  Model narrow(cfg, 12);
  CHECK(narrow.param_count() < model.param_count());
}

TEST_CASE("config validation rejects bad dimensions") {
  RegressorConfig cfg = desk_config();
  cfg.heads = 7;  // 160 % 7 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = desk_config();
  cfg.image_size = 20;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = desk_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = desk_config();
  cfg.conv_channels.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(arch_from_name("cnn"), ConfigError);
  CHECK(arch_from_name("transformer") == Arch::kTransformer);
  CHECK(arch_from_name("mlp") == Arch::kMlp);
}

TEST_CASE("image tensor conversion is planar and channel major") {
  ImageBuffer img = ImageBuffer::filled(2, 2, 0, 0, 0);
  // pixel (x=1, y=0) gets a distinctive color
  img.rgb[(0 * 2 + 1) * 3 + 0] = 0.25;
  img.rgb[(0 * 2 + 1) * 3 + 1] = 0.5;
  img.rgb[(0 * 2 + 1) * 3 + 2] = 0.75;
  const Tensor t = Model::images_to_tensor({&img});
  REQUIRE(t.shape == std::vector<int>{1, 3, 2, 2});
  CHECK(t.data[1] == doctest::Approx(0.25));   // red plane, row 0 col 1
  CHECK(t.data[5] == doctest::Approx(0.5));    // green plane
  CHECK(t.data[9] == doctest::Approx(0.75));   // blue plane
  CHECK(t.data[0] == doctest::Approx(0.0));
}

TEST_CASE("transformer gradients match finite differences") {
  Model model(tiny_config(Arch::kTransformer), 21);
  check_model_fd(model, true, 301, 120);
  check_model_fd(model, false, 302, 60);
}

TEST_CASE("baseline gradients match finite differences") {
  Model model(tiny_config(Arch::kMlp), 22);
  check_model_fd(model, false, 303, 120);
}

TEST_CASE("rotation output rows are canonical unit quaternions") {
  for (Arch arch : {Arch::kTransformer, Arch::kMlp}) {
    Model model(tiny_config(arch), 23);
    Tape tape(&model.params());
    const Tensor q = random_batch(3, 16, 41);
    const Tensor n = random_batch(3, 16, 42);
    const Model::Outputs out = model.forward(tape, q, n, false, nullptr);
    const Tensor& rot = tape.value(out.rot);
    REQUIRE(rot.shape == std::vector<int>{3, 4});
    for (int i = 0; i < 3; ++i) {
      double norm = 0.0;
      for (int j = 0; j < 4; ++j) {
        norm += rot.data[static_cast<size_t>(i * 4 + j)] *
                rot.data[static_cast<size_t>(i * 4 + j)];
      }
      CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(rot.data[static_cast<size_t>(i * 4)] >= 0.0);
    }
    CHECK(tape.value(out.trans).shape == std::vector<int>{3, 3});
  }
}

TEST_CASE("same seed builds the same model, different seeds do not") {
  Model a(tiny_config(Arch::kTransformer), 31);
  Model b(tiny_config(Arch::kTransformer), 31);
  Model c(tiny_config(Arch::kTransformer), 32);
  REQUIRE(a.param_count() == b.param_count());
  bool all_equal = true, any_diff_c = false;
  for (size_t e = 0; e < a.params().entries.size(); ++e) {
    if (a.params().entries[e].value.data != b.params().entries[e].value.data) {
      all_equal = false;
    }
    if (a.params().entries[e].value.data != c.params().entries[e].value.data) {
      any_diff_c = true;
    }
  }
  CHECK(all_equal);
  CHECK(any_diff_c);

  const ImageBuffer qi = random_image(16, 51);
  const ImageBuffer ni = random_image(16, 52);
  const RelativePose r1 = a.predict(qi, ni);
  const RelativePose r2 = b.predict(qi, ni);
  CHECK(r1.q_rel.w == r2.q_rel.w);
  CHECK(r1.q_rel.x == r2.q_rel.x);
  CHECK(r1.t_rel.x == r2.t_rel.x);
  CHECK(r1.t_rel.z == r2.t_rel.z);
}

TEST_CASE("checkpoint round trip preserves everything") {
  Model model(tiny_config(Arch::kTransformer), 61);
  // push the batch statistics off their defaults first
  Tape tape(&model.params());
  Rng drop(Rng::derive(61, {3}));
  model.forward(tape, random_batch(2, 16, 61), random_batch(2, 16, 62), true,
                &drop);
  REQUIRE(!model.bn_state().running_mean.data.empty());

  const std::string path = "/tmp/posesynth_ckpt_test.bin";
  model.save(path, 42);

  uint64_t epoch = 0;
  Model loaded = Model::load(path, &epoch);
  CHECK(epoch == 42);
  CHECK(loaded.param_count() == model.param_count());
  for (size_t e = 0; e < model.params().entries.size(); ++e) {
    CHECK(loaded.params().entries[e].name == model.params().entries[e].name);
    CHECK(loaded.params().entries[e].value.data ==
          model.params().entries[e].value.data);
  }
  CHECK(loaded.bn_state().running_mean.data == model.bn_state().running_mean.data);
  CHECK(loaded.bn_state().running_var.data == model.bn_state().running_var.data);

  const ImageBuffer qi = random_image(16, 63);
  const ImageBuffer ni = random_image(16, 64);
  const RelativePose ra = model.predict(qi, ni);
  const RelativePose rb = loaded.predict(qi, ni);
  CHECK(ra.q_rel.w == rb.q_rel.w);
  CHECK(ra.q_rel.z == rb.q_rel.z);
  CHECK(ra.t_rel.y == rb.t_rel.y);
  std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string path = "/tmp/posesynth_ckpt_bad.bin";
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(Model::load(path), CorruptFile);

  Model model(tiny_config(Arch::kMlp), 65);
  model.save(path, 1);
  // truncate the tail
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  in.close();
  {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(Model::load(path), CorruptFile);
  CHECK_THROWS_AS(Model::load("/tmp/posesynth_missing_ckpt.bin"), Error);
  std::remove(path.c_str());
}

TEST_CASE("batch statistics move in training mode and freeze in eval") {
  Model model(tiny_config(Arch::kTransformer), 71);
  const Tensor q = random_batch(2, 16, 72);
  const Tensor n = random_batch(2, 16, 73);
  {
    Tape tape(&model.params());
    model.forward(tape, q, n, true, nullptr);
  }
  const std::vector<double> after_one = model.bn_state().running_mean.data;
  {
    Tape tape(&model.params());
    model.forward(tape, q, n, true, nullptr);
  }
  const std::vector<double> after_two = model.bn_state().running_mean.data;
  CHECK(after_one != after_two);
  {
    Tape tape(&model.params());
    model.forward(tape, q, n, false, nullptr);
  }
  CHECK(model.bn_state().running_mean.data == after_two);
}

TEST_CASE("non finite activations are reported") {
  Model model(tiny_config(Arch::kTransformer), 81);
  model.params().entries[0].value.data[0] =
      std::numeric_limits<double>::infinity();
  Tape tape(&model.params());
  CHECK_THROWS_AS(model.forward(tape, random_batch(1, 16, 82),
                                random_batch(1, 16, 83), false, nullptr),
                  Error);
}

TEST_CASE("mismatched batch shapes are rejected") {
  Model model(tiny_config(Arch::kTransformer), 91);
  Tape tape(&model.params());
  CHECK_THROWS_AS(model.forward(tape, random_batch(2, 16, 92),
                                random_batch(1, 16, 93), false, nullptr),
                  Error);
  CHECK_THROWS_AS(model.forward(tape, random_batch(1, 32, 94),
                                random_batch(1, 32, 95), false, nullptr),
                  Error);
}
