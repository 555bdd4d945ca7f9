// SPDX-License-Identifier: Apache-2.0

#include "embfuse/neuralnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "byte_io.hpp"
#include "embfuse/embstore.hpp"
#include "embfuse/errors.hpp"
#include "embfuse/rng.hpp"

namespace embfuse {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kMinAdaptiveLr = 1e-6;

template <typename T>
void check_input(const MlpModelT<T>& model, MatrixView<T> x) {
  if (model.layers.empty()) throw ShapeError("model has no layers");
  if (x.cols != model.input_dim) {
    throw ShapeError("input has " + std::to_string(x.cols) + " columns, model expects " +
                     std::to_string(model.input_dim));
  }
}

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t n_classes) {
  if (labels.size() != rows) {
    throw ShapeError(std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                     " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= n_classes) {
      throw ShapeError("label " + std::to_string(l) + " outside [0, " +
                       std::to_string(n_classes) + ")");
    }
  }
}

// out = in * W + b
template <typename T>
void affine(MatrixView<T> in, const DenseLayer<T>& layer, DenseMatrix<T>& out) {
  const std::size_t fan_in = layer.weights.rows();
  const std::size_t fan_out = layer.weights.cols();
  out.resize(in.rows, fan_out);
  for (std::size_t i = 0; i < in.rows; ++i) {
    T* o = out.data() + i * fan_out;
    std::copy(layer.bias.begin(), layer.bias.end(), o);
    const T* a = in.data + i * fan_in;
    for (std::size_t k = 0; k < fan_in; ++k) {
      const T ak = a[k];
      if (ak == T(0)) continue;
      const T* w = layer.weights.data() + k * fan_out;
      for (std::size_t j = 0; j < fan_out; ++j) o[j] += ak * w[j];
    }
  }
}

template <typename T>
void relu_inplace(DenseMatrix<T>& m) {
  for (auto& v : m.flat()) v = v > T(0) ? v : T(0);
}

template <typename T>
void softmax_rows(DenseMatrix<T>& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : row) v /= sum;
  }
}

// acts[l] is the output of layer l (post-ReLU, or softmax for the last).
template <typename T>
void forward_cached(const MlpModelT<T>& model, MatrixView<T> x, std::vector<DenseMatrix<T>>& acts) {
  const std::size_t n_layers = model.layers.size();
  acts.resize(n_layers);
  MatrixView<T> in = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    affine(in, model.layers[l], acts[l]);
    if (l + 1 < n_layers) {
      relu_inplace(acts[l]);
    } else {
      softmax_rows(acts[l]);
    }
    in = acts[l].view();
  }
}

template <typename T>
Parameters<T> zeros_like(const Parameters<T>& params) {
  Parameters<T> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back({DenseMatrix<T>(p.weights.rows(), p.weights.cols()),
                   std::vector<T>(p.bias.size(), T(0))});
  }
  return out;
}

// Gradient kernel reusing caller-owned buffers.
template <typename T>
double backward_into(const MlpModelT<T>& model, MatrixView<T> x, std::span<const int> labels,
                     std::vector<DenseMatrix<T>>& acts, DenseMatrix<T>& delta,
                     DenseMatrix<T>& delta_prev, Parameters<T>& grads) {
  forward_cached(model, x, acts);
  const std::size_t n_layers = model.layers.size();
  const std::size_t batch = x.rows;
  const double loss = cross_entropy<T>(acts.back().view(), labels);

  // dL/dz at the output: (p - onehot) / batch
  delta = acts.back();
  const T inv_batch = T(1) / static_cast<T>(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    auto row = delta.row(i);
    row[static_cast<std::size_t>(labels[i])] -= T(1);
    for (auto& v : row) v *= inv_batch;
  }

  for (std::size_t l = n_layers; l-- > 0;) {
    const MatrixView<T> in = l == 0 ? x : acts[l - 1].view();
    const auto& layer = model.layers[l];
    auto& g = grads[l];
    const std::size_t fan_in = layer.weights.rows();
    const std::size_t fan_out = layer.weights.cols();

    std::fill(g.weights.flat().begin(), g.weights.flat().end(), T(0));
    std::fill(g.bias.begin(), g.bias.end(), T(0));
    for (std::size_t i = 0; i < batch; ++i) {
      const T* d = delta.data() + i * fan_out;
      const T* a = in.data + i * fan_in;
      for (std::size_t j = 0; j < fan_out; ++j) g.bias[j] += d[j];
      for (std::size_t k = 0; k < fan_in; ++k) {
        const T ak = a[k];
        if (ak == T(0)) continue;
        T* gw = g.weights.data() + k * fan_out;
        for (std::size_t j = 0; j < fan_out; ++j) gw[j] += ak * d[j];
      }
    }
    if (l == 0) break;

    // Propagate through W^T and the ReLU of the previous layer.
    delta_prev.resize(batch, fan_in);
    for (std::size_t i = 0; i < batch; ++i) {
      const T* d = delta.data() + i * fan_out;
      const T* a = in.data + i * fan_in;
      T* dp = delta_prev.data() + i * fan_in;
      for (std::size_t k = 0; k < fan_in; ++k) {
        if (a[k] <= T(0)) {
          dp[k] = T(0);
          continue;
        }
        const T* w = layer.weights.data() + k * fan_out;
        T s = 0;
        for (std::size_t j = 0; j < fan_out; ++j) s += d[j] * w[j];
        dp[k] = s;
      }
    }
    std::swap(delta, delta_prev);
  }
  return loss;
}

template <typename T>
double accuracy_on(const MlpModelT<T>& model, MatrixView<T> x, std::span<const int> y) {
  if (x.rows == 0) return 0.0;
  const auto pred = predict(model, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Stratified (or plain) seeded hold-out. Every class with at least two
// samples keeps one on each side.
void split_validation(std::span<const int> y, std::size_t n_classes, double fraction,
                      bool stratified, Rng& rng, std::vector<std::size_t>& train,
                      std::vector<std::size_t>& val) {
  train.clear();
  val.clear();
  if (!stratified) {
    std::vector<std::size_t> all(y.size());
    std::iota(all.begin(), all.end(), 0);
    shuffle(std::span(all), rng);
    auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(y.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, y.size() - 1);
    val.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
  } else {
    for (std::size_t c = 0; c < n_classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (static_cast<std::size_t>(y[i]) == c) members.push_back(i);
      }
      if (members.empty()) continue;
      shuffle(std::span(members), rng);
      auto n_val = static_cast<std::size_t>(
          std::floor(fraction * static_cast<double>(members.size()) + 0.5));
      if (members.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, members.size() - 1);
      else n_val = 0;
      val.insert(val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
      train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

template <typename T>
void gather_rows(MatrixView<T> x, std::span<const int> y, std::span<const std::size_t> rows,
                 DenseMatrix<T>& xb, std::vector<int>& yb) {
  xb.resize(rows.size(), x.cols);
  yb.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = x.row(rows[r]);
    std::copy(src.begin(), src.end(), xb.row(r).begin());
    yb[r] = y[rows[r]];
  }
}

}  // namespace

const char* stop_reason_name(StopReason reason) {
  switch (reason) {
    case StopReason::kNone: return "none";
    case StopReason::kEarlyStopping: return "early_stopping";
    case StopReason::kNoImprovement: return "no_improvement";
    case StopReason::kMaxEpochs: return "max_epochs";
    case StopReason::kLearningRateFloor: return "learning_rate_floor";
    case StopReason::kDiverged: return "diverged";
  }
  return "?";
}

void MlpConfig::validate() const {
  for (auto h : hidden_sizes) {
    if (h == 0) throw ConfigError("hidden layer sizes must be positive");
  }
  if (!(init_learning_rate > 0) || !std::isfinite(init_learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (early_stopping.enabled &&
      !(early_stopping.validation_fraction > 0 && early_stopping.validation_fraction < 1)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
  if (early_stopping.patience_epochs < 1) throw ConfigError("patience must be at least 1");
  if (early_stopping.tol < 0) throw ConfigError("tol must be non-negative");
  if (!(adaptive_divisor > 1)) throw ConfigError("adaptive divisor must exceed 1");
  if (adaptive_patience < 1) throw ConfigError("adaptive patience must be at least 1");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 &&
        adam.epsilon > 0)) {
    throw ConfigError("invalid Adam constants");
  }
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const Parameters<T>& params) {
  AdamState s;
  s.m = embfuse::zeros_like(params);
  s.v = embfuse::zeros_like(params);
  return s;
}

template <typename T>
MlpModelT<T> init_mlp(const MlpConfig& config, std::size_t input_dim, std::size_t n_classes) {
  config.validate();
  if (input_dim < 1) throw ShapeError("input_dim must be at least 1");
  if (n_classes < 2) throw ShapeError("need at least two classes");
  MlpModelT<T> model;
  model.input_dim = input_dim;
  model.n_classes = n_classes;
  model.config = config;

  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), config.hidden_sizes.begin(), config.hidden_sizes.end());
  sizes.push_back(n_classes);

  Rng rng(derive_seed(config.seed, "mlp-init"));
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t fan_in = sizes[l];
    const std::size_t fan_out = sizes[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    DenseLayer<T> layer{DenseMatrix<T>(fan_in, fan_out), std::vector<T>(fan_out, T(0))};
    for (auto& w : layer.weights.flat()) {
      T v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
      // Rounding to float may land a hair outside the bound.
      w = std::clamp(v, static_cast<T>(-bound), static_cast<T>(bound));
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

template <typename T>
DenseMatrix<T> forward(const MlpModelT<T>& model, MatrixView<T> x) {
  check_input(model, x);
  std::vector<DenseMatrix<T>> acts;
  forward_cached(model, x, acts);
  return std::move(acts.back());
}

template <typename T>
double cross_entropy(MatrixView<T> probs, std::span<const int> labels) {
  if (labels.size() != probs.rows) throw ShapeError("label count does not match rows");
  if (probs.rows == 0) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const double p = std::max<double>(probs(i, static_cast<std::size_t>(labels[i])), kProbFloor);
    total -= std::log(p);
  }
  return total / static_cast<double>(probs.rows);
}

template <typename T>
Parameters<T> backward(const MlpModelT<T>& model, MatrixView<T> x, std::span<const int> labels,
                       double* loss) {
  check_input(model, x);
  check_labels(labels, x.rows, model.n_classes);
  if (x.rows == 0) throw ShapeError("empty batch");
  std::vector<DenseMatrix<T>> acts;
  DenseMatrix<T> delta, delta_prev;
  Parameters<T> grads = zeros_like(model.layers);
  const double l = backward_into(model, x, labels, acts, delta, delta_prev, grads);
  if (loss) *loss = l;
  return grads;
}

template <typename T>
void adam_step(AdamState<T>& state, Parameters<T>& params, const Parameters<T>& grads, double lr,
               const AdamConfig& adam) {
  if (state.m.size() != params.size() || grads.size() != params.size()) {
    throw ShapeError("Adam state, parameters and gradients differ in layer count");
  }
  ++state.t;
  const double b1 = adam.beta1;
  const double b2 = adam.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));

  auto update = [&](std::span<T> theta, std::span<const T> g, std::span<T> m, std::span<T> v) {
    if (theta.size() != g.size() || theta.size() != m.size() || theta.size() != v.size()) {
      throw ShapeError("Adam parameter shape mismatch");
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / c1;
      const double v_hat = vi / c2;
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) -
                                lr * m_hat / (std::sqrt(v_hat) + adam.epsilon));
    }
  };
  for (std::size_t l = 0; l < params.size(); ++l) {
    update(params[l].weights.flat(), grads[l].weights.flat(), state.m[l].weights.flat(),
           state.v[l].weights.flat());
    update(params[l].bias, grads[l].bias, state.m[l].bias, state.v[l].bias);
  }
}

template <typename T>
bool all_finite(const Parameters<T>& params) {
  for (const auto& p : params) {
    for (T w : p.weights.flat()) {
      if (!std::isfinite(w)) return false;
    }
    for (T b : p.bias) {
      if (!std::isfinite(b)) return false;
    }
  }
  return true;
}

template <typename T>
void fit(MlpModelT<T>& model, MatrixView<T> x, std::span<const int> y) {
  const MlpConfig& cfg = model.config;
  cfg.validate();
  check_input(model, x);
  check_labels(y, x.rows, model.n_classes);
  {
    std::vector<bool> present(model.n_classes, false);
    for (int l : y) present[static_cast<std::size_t>(l)] = true;
    if (std::count(present.begin(), present.end(), true) < 2) {
      throw DegenerateDataError("training data holds fewer than two classes");
    }
  }

  TrainingHistory history;
  std::vector<std::size_t> train_rows, val_rows;
  const bool early = cfg.early_stopping.enabled;
  if (early) {
    Rng split_rng(derive_seed(cfg.seed, "validation-split"));
    split_validation(y, model.n_classes, cfg.early_stopping.validation_fraction,
                     cfg.early_stopping.stratified, split_rng, train_rows, val_rows);
  } else {
    train_rows.resize(x.rows);
    std::iota(train_rows.begin(), train_rows.end(), 0);
  }
  history.validation_indices = val_rows;

  DenseMatrix<T> x_val;
  std::vector<int> y_val;
  if (early) gather_rows(x, y, val_rows, x_val, y_val);

  const std::size_t n_train = train_rows.size();
  const std::size_t batch = std::min(cfg.batch_size, n_train);
  AdamState<T> state = AdamState<T>::zeros_like(model.layers);
  Parameters<T> grads = zeros_like(model.layers);
  Parameters<T> best = model.layers;
  double best_score = -std::numeric_limits<double>::infinity();
  double best_loss = std::numeric_limits<double>::infinity();
  double lr = cfg.init_learning_rate;
  int no_improve = 0;
  int lr_no_improve = 0;

  Rng shuffle_rng(derive_seed(cfg.seed, "epoch-shuffle"));
  std::vector<std::size_t> order = train_rows;
  DenseMatrix<T> xb;
  std::vector<int> yb;
  std::vector<DenseMatrix<T>> acts;
  DenseMatrix<T> delta, delta_prev;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle(std::span(order), shuffle_rng);
    double loss_sum = 0;
    bool finite = true;
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t end = std::min(n_train, start + batch);
      gather_rows(x, y, std::span(order).subspan(start, end - start), xb, yb);
      const double loss = backward_into(model, xb.view(), yb, acts, delta, delta_prev, grads);
      loss_sum += loss * static_cast<double>(end - start);
      adam_step(state, model.layers, grads, lr, cfg.adam);
      if (!std::isfinite(loss)) {
        finite = false;
        break;
      }
    }
    if (!finite || !all_finite(model.layers)) {
      history.stop_reason = StopReason::kDiverged;
      model.layers = best;
      break;
    }
    const double epoch_loss = loss_sum / static_cast<double>(n_train);
    history.train_loss.push_back(epoch_loss);
    history.learning_rate.push_back(lr);
    history.epochs_run = static_cast<std::size_t>(epoch) + 1;

    bool improved;
    if (early) {
      const double score = accuracy_on(model, x_val.view(), y_val);
      history.validation_score.push_back(score);
      improved = !(score < best_score + cfg.early_stopping.tol);
      if (score > best_score) {
        best_score = score;
        best = model.layers;
        history.best_epoch = static_cast<std::size_t>(epoch);
      }
    } else {
      improved = !(epoch_loss > best_loss - cfg.early_stopping.tol);
      if (epoch_loss < best_loss) {
        best_loss = epoch_loss;
        best = model.layers;
        history.best_epoch = static_cast<std::size_t>(epoch);
      }
    }
    no_improve = improved ? 0 : no_improve + 1;

    if (cfg.lr_schedule == LrSchedule::kAdaptive) {
      lr_no_improve = improved ? 0 : lr_no_improve + 1;
      if (lr_no_improve >= cfg.adaptive_patience) {
        lr /= cfg.adaptive_divisor;
        lr_no_improve = 0;
        if (lr < kMinAdaptiveLr) {
          history.stop_reason = StopReason::kLearningRateFloor;
          break;
        }
      }
    }
    if (no_improve >= cfg.early_stopping.patience_epochs) {
      history.stop_reason = early ? StopReason::kEarlyStopping : StopReason::kNoImprovement;
      break;
    }
  }
  if (history.stop_reason == StopReason::kNone) history.stop_reason = StopReason::kMaxEpochs;
  if (early) model.layers = best;
  model.history = std::move(history);
}

template <typename T>
MlpModelT<T> train_mlp(const MlpConfig& config, MatrixView<T> x, std::span<const int> y,
                       std::size_t n_classes) {
  auto model = init_mlp<T>(config, x.cols, n_classes);
  fit(model, x, y);
  return model;
}

template <typename T>
DenseMatrix<T> predict_proba(const MlpModelT<T>& model, MatrixView<T> x) {
  return forward(model, x);
}

template <typename T>
std::vector<int> predict(const MlpModelT<T>& model, MatrixView<T> x) {
  const auto probs = forward(model, x);
  std::vector<int> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto row = probs.row(i);
    // max_element returns the first maximum.
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

#define EMBFUSE_INSTANTIATE(T)                                                                   \
  template struct AdamState<T>;                                                                  \
  template MlpModelT<T> init_mlp<T>(const MlpConfig&, std::size_t, std::size_t);                 \
  template DenseMatrix<T> forward<T>(const MlpModelT<T>&, MatrixView<T>);                        \
  template double cross_entropy<T>(MatrixView<T>, std::span<const int>);                         \
  template Parameters<T> backward<T>(const MlpModelT<T>&, MatrixView<T>, std::span<const int>,   \
                                     double*);                                                   \
  template void adam_step<T>(AdamState<T>&, Parameters<T>&, const Parameters<T>&, double,        \
                             const AdamConfig&);                                                 \
  template void fit<T>(MlpModelT<T>&, MatrixView<T>, std::span<const int>);                      \
  template MlpModelT<T> train_mlp<T>(const MlpConfig&, MatrixView<T>, std::span<const int>,      \
                                     std::size_t);                                               \
  template DenseMatrix<T> predict_proba<T>(const MlpModelT<T>&, MatrixView<T>);                  \
  template std::vector<int> predict<T>(const MlpModelT<T>&, MatrixView<T>);                      \
  template bool all_finite<T>(const Parameters<T>&);

EMBFUSE_INSTANTIATE(float)
EMBFUSE_INSTANTIATE(double)
#undef EMBFUSE_INSTANTIATE

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr std::uint8_t kModelMagic[4] = {'M', 'L', 'P', 'F'};
constexpr std::uint16_t kModelVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_model(const MlpModel& model) {
  const auto& c = model.config;
  ByteWriter w;
  w.put_raw(kModelMagic);
  w.put_u16(kModelVersion);
  w.put_u32(static_cast<std::uint32_t>(c.hidden_sizes.size()));
  for (auto h : c.hidden_sizes) w.put_u32(static_cast<std::uint32_t>(h));
  w.put_f64(c.init_learning_rate);
  w.put_u8(c.lr_schedule == LrSchedule::kAdaptive ? 1 : 0);
  w.put_f64(c.adaptive_divisor);
  w.put_u32(static_cast<std::uint32_t>(c.adaptive_patience));
  w.put_u8(c.early_stopping.enabled ? 1 : 0);
  w.put_f64(c.early_stopping.validation_fraction);
  w.put_u32(static_cast<std::uint32_t>(c.early_stopping.patience_epochs));
  w.put_f64(c.early_stopping.tol);
  w.put_u8(c.early_stopping.stratified ? 1 : 0);
  w.put_u32(static_cast<std::uint32_t>(c.max_epochs));
  w.put_u32(static_cast<std::uint32_t>(c.batch_size));
  w.put_f64(c.adam.beta1);
  w.put_f64(c.adam.beta2);
  w.put_f64(c.adam.epsilon);
  w.put_u64(c.seed);
  w.put_u32(static_cast<std::uint32_t>(model.input_dim));
  w.put_u32(static_cast<std::uint32_t>(model.n_classes));
  w.put_u32(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    w.put_u32(static_cast<std::uint32_t>(layer.weights.rows()));
    w.put_u32(static_cast<std::uint32_t>(layer.weights.cols()));
    for (float v : layer.weights.flat()) w.put_f32(v);
    for (float v : layer.bias) w.put_f32(v);
  }
  w.put_u32(crc32(w.view().subspan(4)));
  return w.take();
}

MlpModel decode_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10 ||
      !std::equal(std::begin(kModelMagic), std::end(kModelMagic), bytes.begin())) {
    throw FormatError("not an MLPF model file");
  }
  ByteReader r(bytes.first(bytes.size() - 4), 4, "MLPF");
  const auto version = static_cast<std::uint16_t>(r.get_le(2));
  if (version == 0) throw FormatError("MLPF version 0 is invalid");
  if (version > kModelVersion) {
    throw VersionError("MLPF version " + std::to_string(version) + " is not supported");
  }
  if (crc32(bytes.subspan(4, bytes.size() - 8)) != load_u32_le(bytes.last<4>())) {
    throw ChecksumError("MLPF checksum mismatch");
  }
  MlpModel m;
  auto& c = m.config;
  const std::uint32_t n_hidden = r.get_u32();
  if (n_hidden > 1024) throw FormatError("implausible hidden layer count");
  c.hidden_sizes.clear();
  for (std::uint32_t i = 0; i < n_hidden; ++i) c.hidden_sizes.push_back(r.get_u32());
  c.init_learning_rate = r.get_f64();
  c.lr_schedule = r.get_u8() ? LrSchedule::kAdaptive : LrSchedule::kConstant;
  c.adaptive_divisor = r.get_f64();
  c.adaptive_patience = static_cast<int>(r.get_u32());
  c.early_stopping.enabled = r.get_u8() != 0;
  c.early_stopping.validation_fraction = r.get_f64();
  c.early_stopping.patience_epochs = static_cast<int>(r.get_u32());
  c.early_stopping.tol = r.get_f64();
  c.early_stopping.stratified = r.get_u8() != 0;
  c.max_epochs = static_cast<int>(r.get_u32());
  c.batch_size = r.get_u32();
  c.adam.beta1 = r.get_f64();
  c.adam.beta2 = r.get_f64();
  c.adam.epsilon = r.get_f64();
  c.seed = r.get_u64();
  m.input_dim = r.get_u32();
  m.n_classes = r.get_u32();
  const std::uint32_t n_layers = r.get_u32();
  if (n_layers != n_hidden + 1) throw FormatError("MLPF layer count disagrees with config");
  std::size_t expected_in = m.input_dim;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const std::size_t fan_in = r.get_u32();
    const std::size_t fan_out = r.get_u32();
    const std::size_t expected_out = l + 1 < n_layers ? c.hidden_sizes[l] : m.n_classes;
    if (fan_in != expected_in || fan_out != expected_out) {
      throw FormatError("MLPF layer " + std::to_string(l) + " has inconsistent shape");
    }
    if (fan_in * fan_out > r.remaining() / 4) throw FormatError("MLPF file is truncated");
    DenseLayer<float> layer{DenseMatrix<float>(fan_in, fan_out), std::vector<float>(fan_out)};
    for (auto& v : layer.weights.flat()) v = r.get_f32();
    for (auto& v : layer.bias) v = r.get_f32();
    m.layers.push_back(std::move(layer));
    expected_in = fan_out;
  }
  if (r.remaining() != 0) throw FormatError("MLPF file has trailing bytes");
  if (!all_finite(m.layers)) throw FormatError("MLPF parameters are not finite");
  return m;
}

void save_model(const std::filesystem::path& path, const MlpModel& model) {
  write_file_atomic(path, encode_model(model));
}

MlpModel load_model(const std::filesystem::path& path) {
  return decode_model(read_file_bytes(path));
}

}  // namespace embfuse
