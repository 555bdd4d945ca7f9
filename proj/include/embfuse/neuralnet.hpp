// SPDX-License-Identifier: Apache-2.0
//
// Multi-layer perceptron classifier: ReLU hidden layers, softmax output,
// mean log-loss, Adam with bias correction, and early stopping on held-out
// accuracy. Every routine is templated on the parameter type; `float` is the
// training type and `double` exists for finite-difference checks.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "embfuse/tensor.hpp"

namespace embfuse {

enum class LrSchedule { kConstant, kAdaptive };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct EarlyStoppingConfig {
  bool enabled = true;
  double validation_fraction = 0.1;
  int patience_epochs = 10;
  double tol = 1e-4;
  bool stratified = true;
};

struct MlpConfig {
  std::vector<std::size_t> hidden_sizes{128};
  double init_learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::kConstant;
  double adaptive_divisor = 5.0;
  int adaptive_patience = 2;
  EarlyStoppingConfig early_stopping;
  int max_epochs = 10000;
  std::size_t batch_size = 200;
  AdamConfig adam;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

template <typename T>
struct DenseLayer {
  DenseMatrix<T> weights;  // fan_in x fan_out
  std::vector<T> bias;     // fan_out

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

template <typename T>
using Parameters = std::vector<DenseLayer<T>>;

enum class StopReason { kNone, kEarlyStopping, kNoImprovement, kMaxEpochs, kLearningRateFloor, kDiverged };

const char* stop_reason_name(StopReason reason);

struct TrainingHistory {
  std::vector<double> train_loss;        // per epoch
  std::vector<double> validation_score;  // per epoch, accuracy; empty without early stopping
  std::vector<double> learning_rate;     // rate in effect during each epoch
  std::size_t best_epoch = 0;            // 0-based
  std::size_t epochs_run = 0;
  StopReason stop_reason = StopReason::kNone;
  std::vector<std::size_t> validation_indices;  // rows of the training input held out

  friend bool operator==(const TrainingHistory&, const TrainingHistory&) = default;
};

template <typename T>
struct MlpModelT {
  std::size_t input_dim = 0;
  std::size_t n_classes = 0;
  Parameters<T> layers;
  MlpConfig config;
  TrainingHistory history;
};

using MlpModel = MlpModelT<float>;

template <typename T>
struct AdamState {
  Parameters<T> m;
  Parameters<T> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const Parameters<T>& params);
};

/// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
template <typename T>
MlpModelT<T> init_mlp(const MlpConfig& config, std::size_t input_dim, std::size_t n_classes);

/// Class probabilities, one row per input row. Throws ShapeError.
template <typename T>
DenseMatrix<T> forward(const MlpModelT<T>& model, MatrixView<T> x);

/// Mean of -log(max(p_true, 1e-12)).
template <typename T>
double cross_entropy(MatrixView<T> probs, std::span<const int> labels);

/// Mean-loss gradients, shaped like model.layers. Optionally reports the loss.
template <typename T>
Parameters<T> backward(const MlpModelT<T>& model, MatrixView<T> x, std::span<const int> labels,
                       double* loss = nullptr);

template <typename T>
void adam_step(AdamState<T>& state, Parameters<T>& params, const Parameters<T>& grads, double lr,
               const AdamConfig& adam = {});

/// Trains `model` in place. Throws DegenerateDataError if fewer than two
/// classes are present and ShapeError on mismatched inputs.
template <typename T>
void fit(MlpModelT<T>& model, MatrixView<T> x, std::span<const int> y);

/// init_mlp followed by fit.
template <typename T>
MlpModelT<T> train_mlp(const MlpConfig& config, MatrixView<T> x, std::span<const int> y,
                       std::size_t n_classes);

template <typename T>
DenseMatrix<T> predict_proba(const MlpModelT<T>& model, MatrixView<T> x);

/// Arg-max of predict_proba; ties go to the lowest class index.
template <typename T>
std::vector<int> predict(const MlpModelT<T>& model, MatrixView<T> x);

template <typename T>
bool all_finite(const Parameters<T>& params);

// ---------------------------------------------------------------------------
// Serialization ("MLPF" v1): magic, u16 version, config echo, input_dim,
// n_classes, per-layer shapes and f32 parameters, CRC-32 over everything
// after the magic. Little-endian.

std::vector<std::uint8_t> encode_model(const MlpModel& model);
MlpModel decode_model(std::span<const std::uint8_t> bytes);
void save_model(const std::filesystem::path& path, const MlpModel& model);
MlpModel load_model(const std::filesystem::path& path);

}  // namespace embfuse
