// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "embfuse/errors.hpp"
#include "embfuse/neuralnet.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace embfuse;

namespace {

template <typename T>
DenseMatrix<T> random_inputs(std::mt19937_64& gen, std::size_t rows, std::size_t cols,
                             double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  DenseMatrix<T> x(rows, cols);
  for (auto& v : x.flat()) v = static_cast<T>(dist(gen));
  return x;
}

std::vector<int> random_labels(std::mt19937_64& gen, std::size_t n, std::size_t classes) {
  std::vector<int> y(n);
  for (auto& l : y) l = static_cast<int>(gen() % classes);
  return y;
}

// Two Gaussian blobs per class, centres far apart.
void make_blobs(std::mt19937_64& gen, std::size_t n, double margin, DenseMatrix<float>& x,
                std::vector<int>& y) {
  std::normal_distribution<double> noise(0.0, 0.3);
  x = DenseMatrix<float>(n, 2);
  y.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    y[i] = c;
    x(i, 0) = static_cast<float>((c ? margin : -margin) + noise(gen));
    x(i, 1) = static_cast<float>(noise(gen));
  }
}

MlpConfig small_config(std::uint64_t seed = 3) {
  MlpConfig c;
  c.hidden_sizes = {16};
  c.init_learning_rate = 0.01;
  c.max_epochs = 500;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("init shapes, bounds and determinism") {
  MlpConfig c;
  c.hidden_sizes = {128, 64};
  c.seed = 3;
  const auto m = init_mlp<float>(c, 2304, 3);
  REQUIRE(m.layers.size() == 3);
  CHECK(m.layers[0].weights.rows() == 2304);
  CHECK(m.layers[0].weights.cols() == 128);
  CHECK(m.layers[1].weights.rows() == 128);
  CHECK(m.layers[1].weights.cols() == 64);
  CHECK(m.layers[2].weights.rows() == 64);
  CHECK(m.layers[2].weights.cols() == 3);
  for (const auto& layer : m.layers) {
    const double bound =
        std::sqrt(6.0 / static_cast<double>(layer.weights.rows() + layer.weights.cols()));
    for (float w : layer.weights.flat()) CHECK_LE(std::abs(w), bound);
    for (float b : layer.bias) CHECK(b == 0.0f);
  }
  const auto again = init_mlp<float>(c, 2304, 3);
  CHECK(again.layers == m.layers);
  c.seed = 7;
  CHECK_FALSE(init_mlp<float>(c, 2304, 3).layers == m.layers);

  CHECK_THROWS_AS(init_mlp<float>(c, 0, 3), ShapeError);
  CHECK_THROWS_AS(init_mlp<float>(c, 4, 1), ShapeError);
}

TEST_CASE("config validation") {
  MlpConfig c;
  CHECK_NOTHROW(c.validate());
  c.early_stopping.validation_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.max_epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.init_learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.hidden_sizes = {0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward matches the loop oracle and normalises rows") {
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 20; ++trial) {
    MlpConfig c;
    c.hidden_sizes = {1 + gen() % 9, 1 + gen() % 5};
    c.seed = gen();
    const std::size_t in = 1 + gen() % 7, classes = 2 + gen() % 3;
    auto m = init_mlp<double>(c, in, classes);
    for (auto& layer : m.layers)
      for (auto& b : layer.bias) b = std::normal_distribution<double>(0, 0.5)(gen);
    const auto x = random_inputs<double>(gen, 6, in);
    const auto p = forward(m, x.view());
    const auto o = oracle::forward(m, x);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < classes; ++j) {
        CHECK(p(i, j) == doctest::Approx(o[i][j]).epsilon(1e-12));
        sum += p(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  MlpConfig c;
  c.hidden_sizes = {3};
  const auto m = init_mlp<float>(c, 4, 2);
  DenseMatrix<float> wrong(2, 5);
  CHECK_THROWS_AS(forward(m, wrong.view()), ShapeError);
}

TEST_CASE("softmax is shift invariant and stable") {
  MlpConfig c;
  c.hidden_sizes = {};
  auto m = init_mlp<double>(c, 1, 3);
  m.layers[0].weights(0, 0) = 1;
  m.layers[0].weights(0, 1) = 2;
  m.layers[0].weights(0, 2) = 3;
  DenseMatrix<double> x(1, 1, 1.0);
  const auto base = forward(m, x.view());
  for (auto& b : m.layers[0].bias) b += 1000.0;
  const auto shifted = forward(m, x.view());
  for (std::size_t j = 0; j < 3; ++j) CHECK(shifted(0, j) == doctest::Approx(base(0, j)).epsilon(1e-12));

  auto zero = init_mlp<float>(c, 2, 4);
  for (auto& w : zero.layers[0].weights.flat()) w = 0;
  DenseMatrix<float> any(3, 2, 5.0f);
  const auto u = forward(zero, any.view());
  for (float v : u.flat()) CHECK(v == doctest::Approx(0.25));
  CHECK(predict(zero, any.view()) == std::vector<int>{0, 0, 0});
}

TEST_CASE("cross entropy hand values") {
  DenseMatrix<double> uniform(2, 2, 0.5);
  const std::vector<int> y01{0, 1};
  CHECK(cross_entropy<double>(uniform.view(), y01) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  DenseMatrix<double> onehot(2, 2, std::vector<double>{1, 0, 0, 1});
  CHECK(cross_entropy<double>(onehot.view(), y01) == 0.0);
  DenseMatrix<double> p(2, 2, std::vector<double>{0.7, 0.3, 0.2, 0.8});
  CHECK(cross_entropy<double>(p.view(), y01) ==
        doctest::Approx(-(std::log(0.7) + std::log(0.8)) / 2).epsilon(1e-12));
  CHECK(cross_entropy<double>(p.view(), y01) == doctest::Approx(0.2899).epsilon(1e-3));
  const std::vector<int> wrong{1, 0};
  CHECK(cross_entropy<double>(onehot.view(), wrong) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("gradients match central differences") {
  std::mt19937_64 gen(2718);
  std::size_t checked = 0, skipped = 0;
  for (int trial = 0; trial < 20; ++trial) {
    MlpConfig c;
    c.hidden_sizes = {1 + gen() % 16};
    if (trial % 2) c.hidden_sizes.push_back(1 + gen() % 8);
    c.seed = gen();
    const std::size_t in = 1 + gen() % 32, classes = 2 + gen() % 2;
    const auto m = init_mlp<double>(c, in, classes);
    const auto x = random_inputs<double>(gen, 8, in);
    const auto y = random_labels(gen, 8, classes);

    double loss = 0;
    backward(m, x.view(), y, &loss);
    CHECK(loss == doctest::Approx(oracle::loss(m, x, y)).epsilon(1e-12));

    const auto r = oracle::check_gradients(m, x, y);
    INFO("trial " << trial);
    CHECK(r.worst < 1e-4);
    checked += r.checked;
    skipped += r.skipped;
  }
  CHECK(skipped * 100 < checked);
}

TEST_CASE("output bias gradient at the zero point") {
  MlpConfig c;
  c.hidden_sizes = {3};
  auto m = init_mlp<double>(c, 2, 3);
  for (auto& layer : m.layers) {
    for (auto& w : layer.weights.flat()) w = 0;
  }
  DenseMatrix<double> x(4, 2, 0.0);
  const std::vector<int> y{0, 1, 1, 2};
  const auto g = backward(m, x.view(), y);
  // mean over the batch of (1/3 - onehot)
  CHECK(g[1].bias[0] == doctest::Approx(1.0 / 3 - 0.25));
  CHECK(g[1].bias[1] == doctest::Approx(1.0 / 3 - 0.5));
  CHECK(g[1].bias[2] == doctest::Approx(1.0 / 3 - 0.25));
}

TEST_CASE("duplicating the batch leaves the mean gradient unchanged") {
  std::mt19937_64 gen(5);
  MlpConfig c;
  c.hidden_sizes = {6};
  const auto m = init_mlp<double>(c, 4, 3);
  const auto x = random_inputs<double>(gen, 5, 4);
  const auto y = random_labels(gen, 5, 3);
  DenseMatrix<double> x2(10, 4);
  std::vector<int> y2;
  for (std::size_t i = 0; i < 10; ++i) {
    std::copy(x.row(i % 5).begin(), x.row(i % 5).end(), x2.row(i).begin());
    y2.push_back(y[i % 5]);
  }
  const auto g1 = backward(m, x.view(), y);
  const auto g2 = backward(m, x2.view(), y2);
  for (std::size_t l = 0; l < g1.size(); ++l) {
    for (std::size_t i = 0; i < g1[l].weights.size(); ++i)
      CHECK(g2[l].weights.flat()[i] == doctest::Approx(g1[l].weights.flat()[i]).epsilon(1e-12));
  }
}

TEST_CASE("Adam matches a scalar trace") {
  // Minimise theta^2 / 2 (gradient theta) from theta = 1.
  Parameters<double> params{{DenseMatrix<double>(1, 1, 1.0), {}}};
  auto state = AdamState<double>::zeros_like(params);
  const auto expect = oracle::adam_trace(10, 0.1);
  for (std::size_t t = 0; t < 10; ++t) {
    Parameters<double> grads{{DenseMatrix<double>(1, 1, params[0].weights(0, 0)), {}}};
    adam_step(state, params, grads, 0.1);
    CHECK(std::abs(params[0].weights(0, 0) - expect[t]) < 1e-12);
  }
  CHECK(state.t == 10);
}

TEST_CASE("first Adam step moves by about lr") {
  Parameters<float> params{{DenseMatrix<float>(1, 1, 0.0f), {0.0f}}};
  auto state = AdamState<float>::zeros_like(params);
  Parameters<float> grads{{DenseMatrix<float>(1, 1, 1.0f), {-3.0f}}};
  adam_step(state, params, grads, 0.001);
  CHECK(std::abs(params[0].weights(0, 0) - (-0.001)) < 1e-6);
  CHECK(std::abs(params[0].bias[0] - 0.001) < 1e-6);

  Parameters<float> zero{{DenseMatrix<float>(1, 1, 0.0f), {0.0f}}};
  Parameters<float> still{{DenseMatrix<float>(1, 1, 0.5f), {-2.0f}}};
  auto s2 = AdamState<float>::zeros_like(still);
  for (int i = 0; i < 100; ++i) adam_step(s2, still, zero, 0.1);
  CHECK(still[0].weights(0, 0) == 0.5f);
  CHECK(still[0].bias[0] == -2.0f);
}

TEST_CASE("small learning rate descends steadily") {
  std::mt19937_64 gen(31);
  MlpConfig c;
  c.hidden_sizes = {64};
  c.seed = 1;
  auto m = init_mlp<double>(c, 32, 3);
  const auto x = random_inputs<double>(gen, 64, 32, 10.0);
  const auto y = random_labels(gen, 64, 3);
  auto state = AdamState<double>::zeros_like(m.layers);
  double first = 0, prev = 0, last = 0;
  int rises = 0;
  for (int step = 0; step < 50; ++step) {
    double loss = 0;
    const auto g = backward(m, x.view(), y, &loss);
    if (step == 0) first = loss;
    if (step > 0 && loss > prev) ++rises;
    prev = last = loss;
    adam_step(state, m.layers, g, 1e-4);
  }
  CHECK(rises <= 2);
  CHECK(last < 0.9 * first);
}

TEST_CASE("fit separates blobs and stops early") {
  std::mt19937_64 gen(4);
  DenseMatrix<float> x;
  std::vector<int> y;
  make_blobs(gen, 200, 2.0, x, y);
  const auto m = train_mlp<float>(small_config(), x.view(), y, 2);
  CHECK(predict(m, x.view()) == y);
  CHECK(m.history.epochs_run < 500);
  CHECK(m.history.stop_reason == StopReason::kEarlyStopping);
  CHECK(m.history.train_loss.size() == m.history.epochs_run);
  CHECK(m.history.validation_score.size() == m.history.epochs_run);
  CHECK(m.history.validation_indices.size() == 20);
}

TEST_CASE("restored model scores the best validation accuracy seen") {
  std::mt19937_64 gen(12);
  const auto x = random_inputs<float>(gen, 300, 6);
  std::vector<int> y(300);
  for (std::size_t i = 0; i < 300; ++i) y[i] = (x(i, 0) + 0.8 * std::sin(3 * x(i, 1)) > 0) ? 1 : 0;
  auto cfg = small_config(9);
  cfg.early_stopping.patience_epochs = 5;
  const auto m = train_mlp<float>(cfg, x.view(), y, 2);
  const auto& idx = m.history.validation_indices;
  DenseMatrix<float> xv(idx.size(), 6);
  std::vector<int> yv;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), xv.row(i).begin());
    yv.push_back(y[idx[i]]);
  }
  const auto pred = predict(m, xv.view());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == yv[i];
  const double acc = static_cast<double>(hit) / static_cast<double>(pred.size());
  const double best = *std::max_element(m.history.validation_score.begin(), m.history.validation_score.end());
  CHECK(acc == best);
  CHECK(m.history.validation_score[m.history.best_epoch] == best);
}

TEST_CASE("shuffled labels stay near chance on validation") {
  std::mt19937_64 gen(21);
  const auto x = random_inputs<float>(gen, 1000, 8);
  const auto y = random_labels(gen, 1000, 2);
  auto cfg = small_config(5);
  cfg.early_stopping.validation_fraction = 0.3;
  const auto m = train_mlp<float>(cfg, x.view(), y, 2);
  const double best = *std::max_element(m.history.validation_score.begin(), m.history.validation_score.end());
  CHECK(std::abs(best - 0.5) <= 0.1);
}

TEST_CASE("training is deterministic") {
  std::mt19937_64 gen(8);
  DenseMatrix<float> x;
  std::vector<int> y;
  make_blobs(gen, 120, 1.0, x, y);
  const auto a = train_mlp<float>(small_config(42), x.view(), y, 2);
  const auto b = train_mlp<float>(small_config(42), x.view(), y, 2);
  CHECK(a.layers == b.layers);
  CHECK(a.history == b.history);
  CHECK(encode_model(a) == encode_model(b));
}

TEST_CASE("fit rejects single-class data and bad labels") {
  DenseMatrix<float> x(10, 2, 1.0f);
  const std::vector<int> one(10, 1);
  CHECK_THROWS_AS(train_mlp<float>(small_config(), x.view(), one, 2), DegenerateDataError);
  std::vector<int> out_of_range(10, 0);
  out_of_range[3] = 2;
  CHECK_THROWS_AS(train_mlp<float>(small_config(), x.view(), out_of_range, 2), ShapeError);
}

TEST_CASE("divergence restores the last finite parameters") {
  std::mt19937_64 gen(6);
  const auto x = random_inputs<float>(gen, 100, 2);
  const auto y = random_labels(gen, 100, 2);
  auto cfg = small_config();
  cfg.init_learning_rate = 1e38;
  const auto m = train_mlp<float>(cfg, x.view(), y, 2);
  CHECK(all_finite(m.layers));
  CHECK(m.history.stop_reason == StopReason::kDiverged);
}

TEST_CASE("adaptive schedule divides the rate after stalls") {
  std::mt19937_64 gen(14);
  const auto x = random_inputs<float>(gen, 200, 4);
  const auto y = random_labels(gen, 200, 2);
  auto cfg = small_config();
  cfg.lr_schedule = LrSchedule::kAdaptive;
  cfg.early_stopping.patience_epochs = 1000;
  cfg.max_epochs = 200;
  const auto m = train_mlp<float>(cfg, x.view(), y, 2);
  const auto& lr = m.history.learning_rate;
  REQUIRE(lr.size() >= 2);
  CHECK(lr.front() == doctest::Approx(0.01));
  for (std::size_t i = 1; i < lr.size(); ++i) {
    const bool same = lr[i] == lr[i - 1];
    const bool divided = lr[i] == doctest::Approx(lr[i - 1] / 5);
    CHECK((same || divided));
  }
  CHECK(lr.back() < lr.front());
}

TEST_CASE("model blob round trip and corruption") {
  std::mt19937_64 gen(15);
  DenseMatrix<float> x;
  std::vector<int> y;
  make_blobs(gen, 80, 2.0, x, y);
  const auto m = train_mlp<float>(small_config(), x.view(), y, 2);
  const auto bytes = encode_model(m);
  const auto back = decode_model(bytes);
  CHECK(back.layers == m.layers);
  CHECK(back.input_dim == 2);
  CHECK(back.n_classes == 2);
  CHECK(back.config.hidden_sizes == m.config.hidden_sizes);
  CHECK(predict(back, x.view()) == predict(m, x.view()));

  testing::TempDir dir;
  save_model(dir / "m.mlpf", m);
  CHECK(load_model(dir / "m.mlpf").layers == m.layers);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_model(flipped), ChecksumError);
  auto newer = bytes;
  newer[4] = 9;
  CHECK_THROWS_AS(decode_model(newer), VersionError);
  CHECK_THROWS_AS(decode_model(std::vector<std::uint8_t>{'E', 'M', 'B', 'F', 1, 0}), FormatError);
}
