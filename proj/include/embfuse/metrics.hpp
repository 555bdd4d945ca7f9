// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace embfuse {

/// counts(t, p): samples of true class t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes)
      : n_(n_classes), counts_(n_classes * n_classes, 0) {}

  std::size_t n_classes() const noexcept { return n_; }
  std::uint64_t operator()(std::size_t truth, std::size_t pred) const {
    return counts_[truth * n_ + pred];
  }
  std::uint64_t& operator()(std::size_t truth, std::size_t pred) {
    return counts_[truth * n_ + pred];
  }
  std::uint64_t total() const;
  std::uint64_t trace() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

/// Throws ShapeError on length mismatch or a label outside [0, n_classes).
ConfusionMatrix confusion(std::span<const int> pred, std::span<const int> truth,
                          std::size_t n_classes);

/// trace / total. Throws EmptyEvalError on an empty matrix.
double accuracy(const ConfusionMatrix& cm);

/// F1 per class; precision, recall and F1 are 0 when their denominator is 0.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);

/// Unweighted mean of per_class_f1 over all n_classes. Throws EmptyEvalError.
double macro_f1(const ConfusionMatrix& cm);

}  // namespace embfuse
