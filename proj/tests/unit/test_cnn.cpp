#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "scatterbench/cnn.hpp"
#include "scatterbench/seeds.hpp"
#include "scatterbench/text.hpp"
#include "scatterbench/train.hpp"

using namespace scatterbench;
using namespace scatterbench::models;
using features::Matrix;
using features::MelSpectrogram;

namespace {

CnnConfig tiny_config() {
  CnnConfig c;
  c.in_mels = 8;
  c.in_frames = 12;
  c.stem_channels = 4;
  c.blocks = {{4, 1}, {6, 2}};
  c.n_classes = 3;
  c.init_seed = 3;
  c.residual_init_scale = 1.0;
  return c;
}

CnnConfig toy_config(std::size_t classes = 2) {
  CnnConfig c;
  c.in_mels = 8;
  c.in_frames = 8;
  c.stem_channels = 4;
  c.blocks = {{4, 1}};
  c.n_classes = classes;
  c.init_seed = 1;
  return c;
}

// Class k lights up rows [2k, 2k + 2) on top of noise.
SpecDataset banded_set(std::size_t n, std::size_t classes, std::uint64_t seed, double noise = 0.2) {
  Rng rng(seed);
  SpecDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % classes);
    MelSpectrogram s{Matrix(8, 8)};
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t c = 0; c < 8; ++c) {
        const bool on = r / 2 == static_cast<std::size_t>(y);
        s.values(r, c) = (on ? 1.0 : 0.0) + noise * standard_normal(rng);
      }
    }
    d.specs.push_back(s);
    d.labels.push_back(y);
  }
  return d;
}

bool same_bytes(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("zero head gives uniform log-probabilities") {
  Cnn<double> net(tiny_config());
  for (auto& p : net.params()) {
    if (p.name.starts_with("head.")) std::fill(p.value.begin(), p.value.end(), 0.0);
  }
  Rng rng(1);
  std::vector<double> x(net.input_size());
  for (double& v : x) v = standard_normal(rng);
  for (double lp : net.forward(x)) CHECK(lp == doctest::Approx(-std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("property: log-softmax rows sum to one") {
  Rng rng(2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = tiny_config();
    cfg.init_seed = seed;
    Cnn<float> net(cfg);
    std::vector<float> x(net.input_size());
    for (float& v : x) v = static_cast<float>(3.0 * standard_normal(rng));
    const auto lp = net.forward(x);
    double s = 0;
    for (float v : lp) {
      CHECK(v <= 0.0f);
      s += std::exp(static_cast<double>(v));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("hand-computed forward pass on a one-pixel network") {
  CnnConfig c;
  c.in_mels = 1;
  c.in_frames = 1;
  c.stem_channels = 1;
  c.stem_kernel = 1;
  c.stem_stride = 1;
  c.stem_padding = 0;
  c.stem_pool = false;
  c.blocks = {};
  c.n_classes = 2;
  Cnn<double> net(c);
  REQUIRE(net.params().size() == 4);
  net.param("stem.weight").value = {2.0};
  net.param("stem.bias").value = {-1.0};
  net.param("head.weight").value = {0.5, -1.0};
  net.param("head.bias").value = {0.1, 0.2};
  // relu(2 * 1.5 - 1) = 2; logits (1.1, -1.8);
  // ln(e^1.1 + e^-1.8) = ln(3.0041660 + 0.1652989) = ln 3.1694649 = 1.1535628
  const auto lp = net.forward(std::vector<double>{1.5});
  CHECK(lp[0] == doctest::Approx(-0.0535628).epsilon(1e-5));
  CHECK(lp[1] == doctest::Approx(-2.9535628).epsilon(1e-6));
  // Negative pre-activation: relu gives 0, logits are the biases.
  const auto lp0 = net.forward(std::vector<double>{-4.0});
  CHECK(lp0[0] - lp0[1] == doctest::Approx(-0.1).epsilon(1e-12));
}

TEST_CASE("nll_loss contract") {
  const double l4 = std::log(4.0);
  std::vector<std::vector<double>> uni{{-l4, -l4, -l4, -l4}};
  CHECK(nll_loss(uni, {2}) == doctest::Approx(1.386294).epsilon(1e-6));
  std::vector<std::vector<double>> perfect{{0.0, -INFINITY}};
  CHECK(nll_loss(perfect, {0}) == 0.0);
  std::vector<std::vector<double>> two{{-0.2, -1.7}, {-0.9, -0.5}};
  CHECK(nll_loss(two, {0, 1}) == doctest::Approx((0.2 + 0.5) / 2));
  CHECK_THROWS_AS(nll_loss(two, {0, 2}), LabelError);
  CHECK_THROWS_AS(nll_loss(two, {0, -1}), LabelError);
}

TEST_CASE("gradient check in 64-bit and 32-bit precision") {
  const auto cfg = tiny_config();
  CHECK(cfg.parameter_count() <= 5000);
  const double e64 = grad_check<double>(cfg, 11);
  MESSAGE("64-bit max relative error " << e64);
  CHECK(e64 < 1e-5);
  const double e32 = grad_check<float>(cfg, 11);
  MESSAGE("32-bit max relative error " << e32);
  CHECK(e32 < 1e-3);
}

TEST_CASE("gradient check detects a corrupted gradient") {
  GradCheckOptions opt;
  opt.corrupt = [](Gradients<double>& g) { g[0][3] = g[0][3] * 1.5 + 0.05; };
  CHECK(grad_check<double>(tiny_config(), 11, opt) > 1e-2);
}

TEST_CASE("saturated correct prediction has vanishing head-bias gradient") {
  Cnn<double> net(tiny_config());
  net.param("head.bias").value = {60.0, 0.0, 0.0};
  std::vector<double> x(net.input_size(), 0.1);
  auto g = net.zero_gradients();
  const double loss = net.forward_backward(x, 0, g, 1.0);
  CHECK(loss < 1e-20);
  const auto& names = net.params();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].name == "head.bias") {
      for (double v : g[i]) CHECK(std::abs(v) < 1e-8);
    }
  }
}

TEST_CASE("shape and config errors") {
  Cnn<float> net(tiny_config());
  try {
    net.forward(std::vector<float>(10, 0.0f));
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("8 x 12") != std::string::npos);
  }
  auto bad = tiny_config();
  bad.in_mels = 2;
  bad.stem_padding = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto one = tiny_config();
  one.n_classes = 1;
  CHECK_THROWS_AS(one.validate(), ConfigError);
  auto g = net.zero_gradients();
  CHECK_THROWS_AS(net.forward_backward(std::vector<float>(net.input_size()), 7, g, 1.0f), LabelError);
}

TEST_CASE("config text round trip and default size") {
  const auto c = tiny_config();
  CHECK(CnnConfig::parse(c.serialize()) == c);
  CnnConfig d;
  CHECK(CnnConfig::parse(d.serialize()) == d);
  const auto n = d.parameter_count();
  MESSAGE("default parameters " << n);
  CHECK(n > 100000);
  CHECK(n < 200000);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "scatterbench_ckpt";
  Cnn<float> net(tiny_config());
  net.param("head.bias").value[1] = 0.375f;
  save_checkpoint(net, dir / "model.ckpt");
  const auto back = load_checkpoint(dir / "model.ckpt");
  CHECK(back.config() == net.config());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    CHECK(back.params()[i].name == net.params()[i].name);
    CHECK(same_bytes(back.params()[i].value, net.params()[i].value));
  }
  auto bytes = text::read_file(dir / "model.ckpt");
  bytes[20] ^= 0x01;
  text::write_file(dir / "broken.ckpt", bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "broken.ckpt"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("separable toy set reaches full dev accuracy") {
  const auto tr = banded_set(64, 2, 1);
  const auto dev = banded_set(32, 2, 2);
  TrainConfig t;
  t.max_epochs = 40;
  const auto res = train<float>(t, toy_config(), tr, dev);
  double best = 0;
  for (const auto& e : res.history.epochs) best = std::max(best, e.dev_acc);
  CHECK(best == 1.0);
  CHECK(evaluate(res.model, dev).accuracy == 1.0);
  CHECK(res.history.epochs.size() <= 40);
}

TEST_CASE("early stopping counts one best plus patience evaluations") {
  EarlyStopping es(5);
  int evals = 0;
  for (int epoch = 1; epoch <= 40 && !es.should_stop(); ++epoch) {
    es.update(1.0 + 0.1 * epoch, 0.5);
    ++evals;
  }
  CHECK(evals == 6);

  EarlyStopping tie(2);
  CHECK(tie.update(1.0, 0.5));
  CHECK(tie.update(1.0, 0.6));
  CHECK_FALSE(tie.update(1.0, 0.6));
  CHECK_THROWS_AS(EarlyStopping(0), ConfigError);
}

TEST_CASE("training stops after six evaluations when dev loss only worsens") {
  auto tr = banded_set(64, 2, 1, 0.05);
  auto dev = tr;
  for (int& y : dev.labels) y = 1 - y;
  TrainConfig t;
  t.optimizer = Optimizer::adam;
  t.learning_rate = 0.01;
  const auto res = train<float>(t, toy_config(), tr, dev);
  const auto& h = res.history.epochs;
  bool worsening = true;
  for (std::size_t i = 1; i < h.size(); ++i) worsening = worsening && h[i].dev_loss > h[i - 1].dev_loss;
  REQUIRE(worsening);
  CHECK(h.size() == 6);
  CHECK(res.history.best_epoch == 1);
  CHECK(res.history.stopped_early);
}

TEST_CASE("training is bit-reproducible and independent of worker count") {
  const auto tr = banded_set(40, 2, 4);
  const auto dev = banded_set(16, 2, 5);
  TrainConfig t;
  t.max_epochs = 3;
  t.seed = 9;
  const auto a = train<float>(t, toy_config(), tr, dev);
  const auto b = train<float>(t, toy_config(), tr, dev);
  t.jobs = 3;
  const auto c = train<float>(t, toy_config(), tr, dev);
  CHECK(a.history == b.history);
  CHECK(a.history == c.history);
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    CHECK(same_bytes(a.model.params()[i].value, b.model.params()[i].value));
    CHECK(same_bytes(a.model.params()[i].value, c.model.params()[i].value));
  }
  CHECK(history_csv(a.history).starts_with("epoch,train_loss,dev_loss,dev_acc\n1,"));
}

TEST_CASE("property: full-batch descent with a small step never raises the loss") {
  const auto tr = banded_set(24, 3, 6, 0.5);
  TrainConfig t;
  t.batch_size = tr.size();
  t.momentum = 0.0;
  t.learning_rate = 0.02;
  t.max_epochs = 51;
  t.patience = 1000;
  auto cfg = toy_config(3);
  cfg.blocks = {{4, 1}, {4, 2}};
  const auto res = train<double>(t, cfg, tr, tr);
  // train_loss of epoch k is the loss before step k.
  const auto& h = res.history.epochs;
  REQUIRE(h.size() == 51);
  for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i].train_loss <= h[i - 1].train_loss);
  CHECK(h.back().train_loss < h.front().train_loss);
}

TEST_CASE("empty splits are configuration errors") {
  const auto tr = banded_set(8, 2, 1);
  CHECK_THROWS_AS(train<float>({}, toy_config(), tr, SpecDataset{}), ConfigError);
  CHECK_THROWS_AS(train<float>({}, toy_config(), SpecDataset{}, tr), ConfigError);
}

TEST_CASE("partial fine-tuning freezes the feature extractor byte-for-byte") {
  const auto pre_tr = banded_set(32, 2, 1);
  TrainConfig t;
  t.max_epochs = 3;
  const auto pre = train<float>(t, toy_config(2), pre_tr, pre_tr).model;

  const auto tr = banded_set(48, 3, 7);
  const auto dev = banded_set(24, 3, 8);
  t.max_epochs = 4;
  const auto part = finetune(pre, FinetuneStrategy::partial, t, toy_config(3), tr, dev);
  const auto full = finetune(pre, FinetuneStrategy::complete, t, toy_config(3), tr, dev);
  bool stem_changed = false;
  for (std::size_t i = 0; i < pre.params().size(); ++i) {
    const auto& name = pre.params()[i].name;
    if (!is_feature_extractor(name)) continue;
    CHECK(same_bytes(part.model.params()[i].value, pre.params()[i].value));
    if (name == "stem.weight") stem_changed = !same_bytes(full.model.params()[i].value, pre.params()[i].value);
  }
  CHECK(stem_changed);
  CHECK(part.model.config().n_classes == 3);
  CHECK(part.history.epochs.size() >= 1);
  CHECK(full.history.epochs.back().dev_acc >= 0.0);

  auto wrong = toy_config(3);
  wrong.stem_channels = 5;
  CHECK_THROWS_AS(finetune(pre, FinetuneStrategy::partial, t, wrong, tr, dev), ShapeError);
}

TEST_CASE("a single complete fine-tuning step moves the stem") {
  const auto pre = Cnn<float>(toy_config(2));
  const auto tr = banded_set(16, 2, 3);
  TrainConfig t;
  t.max_epochs = 1;
  t.batch_size = 16;
  const auto res = finetune(pre, FinetuneStrategy::complete, t, toy_config(2), tr, tr);
  CHECK_FALSE(same_bytes(res.model.param("stem.weight").value, pre.params()[0].value));
}
