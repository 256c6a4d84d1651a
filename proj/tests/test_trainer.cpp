#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "grc/checkpoint.hpp"
#include "grc/error.hpp"
#include "grc/optim.hpp"
#include "grc/trainer.hpp"
#include "test_util.hpp"

using namespace grc;
using grc::test::to_vec;
namespace fs = std::filesystem;

namespace {

RunConfig copy_config() {
  RunConfig c;
  c.model.layers = 2;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.cache_len = 4;
  c.model.cache_ratio = 0.5;
  c.task.kind = "copy";
  c.task.seq_len = 8;
  c.task.vocab = 6;
  c.train.lr = 3e-3;
  c.train.steps = 20;
  c.train.batch_size = 8;
  c.train.seed = 3;
  c.train.eval_interval = 5;
  c.train.eval_batches = 2;
  c.resolve();
  return c;
}

std::vector<double> flat(const std::vector<NamedTensor<double>>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("grc_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning rate schedule warms up then decays") {
  CHECK(inverse_sqrt_lr(1.0, 0, 0) == 1.0);
  CHECK(inverse_sqrt_lr(1.0, 0, 1000) == 1.0);
  CHECK(inverse_sqrt_lr(1.0, 4, 0) == doctest::Approx(0.25));
  CHECK(inverse_sqrt_lr(1.0, 4, 3) == doctest::Approx(1.0));
  CHECK(inverse_sqrt_lr(1.0, 4, 15) == doctest::Approx(0.5));
}

TEST_CASE("zero gradients leave parameters unchanged without decay") {
  Tensor<double> w = grc::test::random_tensor({3, 3}, 1);
  const auto before = to_vec(w);
  AdamW<double> opt({{"w", w, true}}, AdamWConfig{});
  for (int i = 0; i < 5; ++i) opt.step(0.1);
  CHECK(to_vec(w) == before);
  CHECK(opt.steps() == 5);
}

TEST_CASE("decoupled weight decay shrinks only flagged parameters") {
  Tensor<double> w = grc::test::random_tensor({2, 2}, 2), b = grc::test::random_tensor({2}, 3);
  const auto w0 = to_vec(w), b0 = to_vec(b);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW<double> opt({{"w", w, true}, {"b", b, false}}, cfg);
  opt.step(0.01);
  for (std::size_t i = 0; i < w0.size(); ++i) CHECK(w[i] == doctest::Approx(w0[i] * (1.0 - 0.001)).epsilon(1e-14));
  CHECK(to_vec(b) == b0);
}

TEST_CASE("adam first step moves each weight by about the learning rate") {
  Tensor<double> w({3}, {1.0, 2.0, 3.0});
  w.set_requires_grad(true);
  w.grad()[0] = 0.5;
  w.grad()[1] = -2.0;
  w.grad()[2] = 0.0;
  AdamW<double> opt({{"w", w, false}}, AdamWConfig{});
  opt.step(0.1);
  CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(w[1] == doctest::Approx(2.1).epsilon(1e-6));
  CHECK(w[2] == 3.0);
}

TEST_CASE("gradient clipping bounds the joint norm") {
  Tensor<double> a({2}), b({1});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  a.grad()[0] = 3.0;
  a.grad()[1] = 0.0;
  b.grad()[0] = 4.0;
  const std::vector<NamedTensor<double>> params{{"a", a}, {"b", b}};
  CHECK(clip_grad_norm(params, 0.0) == doctest::Approx(5.0));
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(std::hypot(a.grad()[0], b.grad()[0]) == doctest::Approx(1.0));
}

TEST_CASE("zero learning rate keeps parameters while caches still update") {
  RunConfig c = copy_config();
  c.train.lr = 0.0;
  c.precision = Precision::Float64;
  Trainer<double> t(c);
  const auto before = flat(t.model().parameters_without_caches());
  std::vector<double> lambdas;
  for (auto& b : t.model().blocks()) lambdas.push_back(b.attention().lambda()[0]);
  const auto cache0 = to_vec(t.model().caches()[0]->state());
  for (int i = 0; i < 5; ++i) t.train_step();
  CHECK(flat(t.model().parameters_without_caches()) == before);
  for (std::size_t l = 0; l < lambdas.size(); ++l) CHECK(t.model().blocks()[l].attention().lambda()[0] == lambdas[l]);
  CHECK(t.model().caches()[0]->step() == 5);
  CHECK(to_vec(t.model().caches()[0]->state()) != cache0);
}

TEST_CASE("evaluation is frozen and repeatable") {
  RunConfig c = copy_config();
  Trainer<float> t(c);
  for (int i = 0; i < 3; ++i) t.train_step();
  auto state = [&] { return std::vector<float>(t.model().caches()[0]->state().data().begin(),
                                               t.model().caches()[0]->state().data().end()); };
  const auto s0 = state();
  const auto step0 = t.model().caches()[0]->step();
  const EvalMetrics a = t.evaluate();
  const EvalMetrics b = t.evaluate();
  CHECK(a.loss == b.loss);
  CHECK(a.accuracy == b.accuracy);
  CHECK(state() == s0);
  CHECK(t.model().caches()[0]->step() == step0);
  CHECK_FALSE(t.model().caches()[0]->frozen());
  t.train_step();
  CHECK(t.evaluate().loss != a.loss);
}

TEST_CASE("frozen-cache guard restores previous flags") {
  Model<double> m(copy_config().model, 1);
  m.caches()[1]->freeze();
  {
    FrozenCaches<double> guard(m);
    CHECK(m.caches()[0]->frozen());
    CHECK(m.caches()[1]->frozen());
  }
  CHECK_FALSE(m.caches()[0]->frozen());
  CHECK(m.caches()[1]->frozen());
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  RunConfig c = copy_config();
  c.precision = Precision::Float64;
  Trainer<double> t(c);
  auto params = t.model().parameters();
  for (double& v : params.front().tensor.data()) v = std::numeric_limits<double>::quiet_NaN();
  try {
    t.train_step();
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).size() > 0);
  }
}

TEST_CASE("copy task loss decreases over 200 steps for cached and baseline models") {
  for (bool cache : {true, false}) {
    RunConfig c = copy_config();
    c.model.use_cache = cache;
    c.train.steps = 200;
    c.train.eval_interval = 0;
    Trainer<float> t(c);
    double first = 0.0, last = 0.0;
    for (std::size_t s = 0; s < 200; ++s) {
      const MetricRecord r = t.train_step();
      if (s < 10) first += r.loss / 10.0;
      if (s >= 190) last += r.loss / 10.0;
    }
    INFO("use_cache = " << cache);
    CHECK(last < first);
  }
}

TEST_CASE("tiny cached model learns the noise-free prototype task") {
  RunConfig c;
  c.model.layers = 1;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.cache_len = 4;
  c.model.cache_ratio = 0.5;
  c.task.kind = "prototype";
  c.task.seq_len = 8;
  c.task.vocab = 6;
  c.task.classes = 4;
  c.task.noise = 0.0;
  c.train.steps = 150;
  c.train.batch_size = 16;
  c.train.lr = 0.01;
  c.train.seed = 1;
  c.train.eval_batches = 8;
  c.resolve();
  Trainer<float> t(c);
  while (!t.done()) t.train_step();
  CHECK(t.evaluate().accuracy >= 0.99);
}

TEST_CASE("checkpoint round-trip reproduces forward outputs") {
  TempDir dir("ckpt");
  RunConfig c = copy_config();
  c.precision = Precision::Float64;
  Trainer<double> a(c);
  for (int i = 0; i < 4; ++i) a.train_step();
  a.save(dir.path / "c.bin");
  CopyTask probe(77, 3, 8, 6);
  const TaskBatch batch = probe.next();
  const auto logits = to_vec(a.model().forward(batch, false).logits);

  Trainer<double> b(c);
  b.load(dir.path / "c.bin");
  CHECK(b.step() == 4);
  CHECK(to_vec(b.model().forward(batch, false).logits) == logits);
  CHECK(b.model().mixing_ratios() == a.model().mixing_ratios());

  const CheckpointInfo info = read_checkpoint_info(dir.path / "c.bin");
  CHECK(info.version == kCheckpointVersion);
  CHECK(info.step == 4);
  CHECK(info.precision == Precision::Float64);

  Trainer<float> wrong_width(copy_config());
  CHECK_THROWS_AS(wrong_width.load(dir.path / "c.bin"), ConfigError);
  RunConfig other = c;
  other.model.d_model = 32;
  other.resolve();
  Trainer<double> wrong_shape(other);
  CHECK_THROWS_AS(wrong_shape.load(dir.path / "c.bin"), ConfigError);

  std::string bytes = slurp(dir.path / "c.bin");
  bytes[0] = 'X';
  std::ofstream(dir.path / "bad.bin", std::ios::binary) << bytes;
  CHECK_THROWS_AS(read_checkpoint_info(dir.path / "bad.bin"), IoError);
  CHECK_THROWS_AS(b.load(dir.path / "bad.bin"), IoError);
  CHECK_THROWS_AS(b.load(dir.path / "missing.bin"), IoError);
  std::ofstream(dir.path / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(b.load(dir.path / "short.bin"), IoError);
}

TEST_CASE("resumed run continues the metric stream bit-identically") {
  TempDir full("full"), part("part");
  const RunConfig c = copy_config();
  {
    Trainer<float> t(c);
    run_training(t, full.path, false, nullptr);
  }
  {
    RunConfig first = c;
    first.train.steps = 10;
    Trainer<float> t(first);
    run_training(t, part.path, false, nullptr);
  }
  {
    Trainer<float> t(c);
    t.load(part.path / "checkpoint.bin");
    CHECK(t.step() == 10);
    run_training(t, part.path, true, nullptr);
  }
  CHECK(slurp(full.path / "metrics.csv") == slurp(part.path / "metrics.csv"));
  CHECK(slurp(full.path / "lambda.csv") == slurp(part.path / "lambda.csv"));
  CHECK(slurp(full.path / "checkpoint.bin") == slurp(part.path / "checkpoint.bin"));
}

TEST_CASE("same seed gives identical runs") {
  TempDir a("seed_a"), b("seed_b");
  RunConfig c = copy_config();
  c.train.steps = 8;
  {
    Trainer<float> t(c);
    run_training(t, a.path, false, nullptr);
  }
  {
    Trainer<float> t(c);
    run_training(t, b.path, false, nullptr);
  }
  CHECK(slurp(a.path / "metrics.csv") == slurp(b.path / "metrics.csv"));
}

TEST_CASE("metrics file has the documented columns") {
  TempDir dir("metrics");
  RunConfig c = copy_config();
  c.train.steps = 5;
  c.train.eval_interval = 2;
  Trainer<float> t(c);
  run_training(t, dir.path, false, nullptr);
  std::istringstream in(slurp(dir.path / "metrics.csv"));
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,split,loss,accuracy,lambda_0,lambda_1");
  std::size_t train = 0, eval = 0;
  for (std::string line; std::getline(in, line);) {
    train += line.find(",train,") != std::string::npos;
    eval += line.find(",eval,") != std::string::npos;
  }
  CHECK(train == 5);
  CHECK(eval == 3);  // steps 2, 4 and the last one
  CHECK(format_metric(0.1) == "0.10000000000000001");
}

}  // TEST_SUITE
