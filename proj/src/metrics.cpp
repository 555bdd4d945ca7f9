// SPDX-License-Identifier: Apache-2.0

#include "embfuse/metrics.hpp"

#include <numeric>
#include <string>

#include "embfuse/errors.hpp"

namespace embfuse {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t c = 0; c < n_; ++c) t += (*this)(c, c);
  return t;
}

ConfusionMatrix confusion(std::span<const int> pred, std::span<const int> truth,
                          std::size_t n_classes) {
  if (pred.size() != truth.size()) {
    throw ShapeError(std::to_string(pred.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  }
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= n_classes ||
        static_cast<std::size_t>(truth[i]) >= n_classes) {
      throw ShapeError("label outside [0, " + std::to_string(n_classes) + ") at index " +
                       std::to_string(i));
    }
    ++cm(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw EmptyEvalError("accuracy of an empty evaluation");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  const std::size_t n = cm.n_classes();
  std::vector<double> f1(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t predicted = 0, actual = 0;
    for (std::size_t k = 0; k < n; ++k) {
      predicted += cm(k, c);
      actual += cm(c, k);
    }
    const double tp = static_cast<double>(cm(c, c));
    const double precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    const double recall = actual ? tp / static_cast<double>(actual) : 0.0;
    f1[c] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return f1;
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw EmptyEvalError("macro F1 of an empty evaluation");
  const auto f1 = per_class_f1(cm);
  return std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(f1.size());
}

}  // namespace embfuse
