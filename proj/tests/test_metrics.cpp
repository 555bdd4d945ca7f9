// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>

#include "embfuse/errors.hpp"
#include "embfuse/metrics.hpp"
#include "oracles.hpp"

using namespace embfuse;

TEST_CASE("confusion counts") {
  const std::vector<int> t{0, 1, 2, 1};
  const auto diag = confusion(t, t, 3);
  CHECK(diag(0, 0) == 1);
  CHECK(diag(1, 1) == 2);
  CHECK(diag.trace() == 4);
  CHECK(diag.total() == 4);

  const std::vector<int> truth{0, 1}, pred{1, 0};
  const auto anti = confusion(pred, truth, 2);
  CHECK(anti(0, 1) == 1);
  CHECK(anti(1, 0) == 1);
  CHECK(anti.trace() == 0);

  const std::vector<int> shorter{0};
  CHECK_THROWS_AS(confusion(shorter, truth, 2), ShapeError);
  const std::vector<int> out_of_range{0, 2};
  CHECK_THROWS_AS(confusion(out_of_range, truth, 2), ShapeError);
  const std::vector<int> negative{0, -1};
  CHECK_THROWS_AS(confusion(negative, truth, 2), ShapeError);
}

TEST_CASE("hand examples") {
  ConfusionMatrix cm(2);
  cm(0, 0) = 3;
  cm(0, 1) = 1;
  cm(1, 0) = 2;
  cm(1, 1) = 4;
  CHECK(accuracy(cm) == doctest::Approx(0.7).epsilon(1e-12));

  ConfusionMatrix uniform(2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) uniform(i, j) = 5;
  CHECK(accuracy(uniform) == 0.5);

  const std::vector<int> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
  const auto c = confusion(pred, truth, 2);
  const auto f1 = per_class_f1(c);
  CHECK(f1[0] == doctest::Approx(2.0 / 3));
  CHECK(f1[1] == doctest::Approx(0.8));
  CHECK(std::abs(macro_f1(c) - 0.7333) < 1e-4);
}

TEST_CASE("absent class scores zero and still counts") {
  const std::vector<int> t{0, 1, 0, 1};
  const auto cm = confusion(t, t, 3);
  CHECK(per_class_f1(cm)[2] == 0.0);
  CHECK(macro_f1(cm) == doctest::Approx(2.0 / 3));
  CHECK(accuracy(cm) == 1.0);

  // Never predicted: precision 0/0 -> 0.
  const std::vector<int> truth{0, 1}, pred{0, 0};
  CHECK(per_class_f1(confusion(pred, truth, 2))[1] == 0.0);
}

TEST_CASE("empty evaluation") {
  ConfusionMatrix cm(2);
  CHECK_THROWS_AS(accuracy(cm), EmptyEvalError);
  CHECK_THROWS_AS(macro_f1(cm), EmptyEvalError);
}

TEST_CASE("metrics match per-sample oracles on random instances") {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const int classes = 2 + static_cast<int>(gen() % 4);
    const std::size_t n = 1 + gen() % 500;
    std::vector<int> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(gen() % classes);
      pred[i] = gen() % 3 ? truth[i] : static_cast<int>(gen() % classes);
    }
    const auto cm = confusion(pred, truth, static_cast<std::size_t>(classes));
    CHECK(cm.total() == n);
    const double acc = accuracy(cm), f1 = macro_f1(cm);
    CHECK(std::abs(acc - oracle::accuracy(pred, truth)) < 1e-12);
    CHECK(std::abs(f1 - oracle::macro_f1(pred, truth, classes)) < 1e-12);
    CHECK(acc >= 0);
    CHECK(acc <= 1);
    CHECK(f1 >= 0);
    CHECK(f1 <= 1);

    // Relabeling classes consistently changes nothing.
    std::vector<int> perm(static_cast<std::size_t>(classes));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<int> t2(n), p2(n);
    for (std::size_t i = 0; i < n; ++i) {
      t2[i] = perm[static_cast<std::size_t>(truth[i])];
      p2[i] = perm[static_cast<std::size_t>(pred[i])];
    }
    const auto cm2 = confusion(p2, t2, static_cast<std::size_t>(classes));
    CHECK(accuracy(cm2) == doctest::Approx(acc).epsilon(1e-12));
    CHECK(macro_f1(cm2) == doctest::Approx(f1).epsilon(1e-12));
  }
}

TEST_CASE("balanced symmetric binary matrix has macro F1 equal to accuracy") {
  for (std::uint64_t a = 1; a < 20; ++a) {
    for (std::uint64_t b = 0; b < 20; b += 3) {
      ConfusionMatrix cm(2);
      cm(0, 0) = cm(1, 1) = a;
      cm(0, 1) = cm(1, 0) = b;
      CHECK(macro_f1(cm) == doctest::Approx(accuracy(cm)).epsilon(1e-12));
    }
  }
}
