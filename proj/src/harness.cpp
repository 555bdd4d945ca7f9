// SPDX-License-Identifier: Apache-2.0

#include "embfuse/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"

#include "byte_io.hpp"
#include "embfuse/errors.hpp"
#include "embfuse/kvconfig.hpp"
#include "embfuse/metrics.hpp"
#include "embfuse/rng.hpp"

namespace embfuse {

namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

constexpr int kJournalSchema = 1;

std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Rows of `x` selected by index, packed.
DenseMatrix<float> gather_rows(MatrixView<float> x, std::span<const std::size_t> rows) {
  DenseMatrix<float> out(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

FoldScore score(std::span<const int> pred, std::span<const int> truth, std::size_t n_classes) {
  const auto cm = confusion(pred, truth, n_classes);
  return {accuracy(cm), macro_f1(cm), per_class_f1(cm), 0};
}

}  // namespace

// ---------------------------------------------------------------------------
// Grid

std::string GridPoint::label() const {
  std::string out = "hidden=";
  for (std::size_t i = 0; i < hidden_sizes.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(hidden_sizes[i]);
  }
  return out + " lr=" + format_number(learning_rate);
}

std::vector<GridPoint> default_grid() {
  std::vector<GridPoint> grid;
  for (const auto& hidden : {std::vector<std::size_t>{128}, std::vector<std::size_t>{128, 64}}) {
    for (double lr : {1e-3, 1e-4}) grid.push_back({hidden, lr});
  }
  return grid;
}

std::vector<std::uint64_t> default_seeds() { return {3, 7, 42}; }

MlpConfig apply_grid_point(const MlpConfig& base, const GridPoint& point, std::uint64_t seed) {
  MlpConfig config = base;
  config.hidden_sizes = point.hidden_sizes;
  config.init_learning_rate = point.learning_rate;
  config.seed = seed;
  return config;
}

std::vector<int> stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2, got " + std::to_string(k));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw ShapeError("negative label at index " + std::to_string(i));
    by_class[labels[i]].push_back(i);
  }
  for (const auto& [label, members] : by_class) {
    if (members.size() < static_cast<std::size_t>(k)) {
      throw StratificationError("class " + std::to_string(label) + " has " +
                                std::to_string(members.size()) + " samples, fewer than k=" +
                                std::to_string(k));
    }
  }

  Rng rng(derive_seed(seed, "kfold"));
  std::vector<int> folds(labels.size(), -1);
  std::size_t offset = 0;
  for (auto& [label, members] : by_class) {
    shuffle(std::span<std::size_t>(members), rng);
    for (std::size_t j = 0; j < members.size(); ++j) {
      folds[members[j]] = static_cast<int>((offset + j) % static_cast<std::size_t>(k));
    }
    // Continue the round robin where this class stopped so fold totals stay balanced.
    offset = (offset + members.size()) % static_cast<std::size_t>(k);
  }
  return folds;
}

GridSearchResult grid_search(MatrixView<float> x, std::span<const int> y, std::size_t n_classes,
                             std::span<const GridPoint> grid, const MlpConfig& base, int k,
                             std::uint64_t seed, const FoldObserver& observer) {
  if (grid.empty()) throw ConfigError("grid search over an empty grid");
  if (x.rows != y.size()) {
    throw ShapeError(std::to_string(x.rows) + " rows for " + std::to_string(y.size()) + " labels");
  }

  GridSearchResult result;
  result.folds = stratified_kfold(y, k, seed);

  std::vector<std::vector<std::size_t>> held_out(static_cast<std::size_t>(k));
  std::vector<std::vector<std::size_t>> kept(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (int f = 0; f < k; ++f) {
      (result.folds[i] == f ? held_out : kept)[static_cast<std::size_t>(f)].push_back(i);
    }
  }

  for (std::size_t p = 0; p < grid.size(); ++p) {
    const MlpConfig config = apply_grid_point(base, grid[p], seed);
    std::vector<FoldScore> scores;
    for (int f = 0; f < k; ++f) {
      const auto& train_rows = kept[static_cast<std::size_t>(f)];
      const auto& test_rows = held_out[static_cast<std::size_t>(f)];
      if (observer) observer(p, f, test_rows);

      std::vector<int> y_train, y_test;
      for (auto r : train_rows) y_train.push_back(y[r]);
      for (auto r : test_rows) y_test.push_back(y[r]);
      const auto x_train = gather_rows(x, train_rows);
      const auto x_test = gather_rows(x, test_rows);
      try {
        const auto model = train_mlp<float>(config, x_train, y_train, n_classes);
        FoldScore s = score(predict(model, x_test.view()), y_test, n_classes);
        s.epochs_run = model.history.epochs_run;
        scores.push_back(std::move(s));
      } catch (const Error& e) {
        throw TrainingError("grid point " + std::to_string(p) + " (" + grid[p].label() +
                            "), fold " + std::to_string(f) + ": " + e.what());
      }
    }
    double acc = 0, f1 = 0;
    for (const auto& s : scores) {
      acc += s.accuracy;
      f1 += s.macro_f1;
    }
    result.mean_accuracy.push_back(acc / k);
    result.mean_macro_f1.push_back(f1 / k);
    result.fold_scores.push_back(std::move(scores));
  }

  for (std::size_t p = 1; p < grid.size(); ++p) {
    if (result.mean_accuracy[p] > result.mean_accuracy[result.best_index]) result.best_index = p;
  }
  result.best_config = apply_grid_point(base, grid[result.best_index], seed);
  return result;
}

// ---------------------------------------------------------------------------
// Experiment spec

std::string_view cv_scope_name(CvScope scope) {
  return scope == CvScope::kTrain ? "train" : "train+dev";
}

CvScope parse_cv_scope(std::string_view text) {
  if (text == "train") return CvScope::kTrain;
  if (text == "train+dev") return CvScope::kTrainDev;
  throw ConfigError("cv scope must be train or train+dev, got '" + std::string(text) + "'");
}

std::vector<FusionSpec> enumerate_fusions(std::span<const std::string> model_ids,
                                          std::span<const FusionMethod> methods,
                                          bool include_standalone) {
  std::vector<FusionSpec> out;
  const std::size_t n = model_ids.size();
  if (include_standalone) {
    for (const auto& id : model_ids) out.push_back({{id}, std::nullopt, 0});
  }
  // Subsets by size, then lexicographically by position.
  for (std::size_t size = 2; size <= n; ++size) {
    std::vector<std::size_t> pick(size);
    for (std::size_t i = 0; i < size; ++i) pick[i] = i;
    while (true) {
      std::vector<std::string> sources;
      for (auto i : pick) sources.push_back(model_ids[i]);
      sources = canonical_source_order(std::move(sources));
      for (auto m : methods) out.push_back({sources, m, 0});

      std::size_t i = size;
      while (i > 0 && pick[i - 1] == n - size + i - 1) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < size; ++j) pick[j] = pick[j - 1] + 1;
    }
  }
  return out;
}

namespace {

void check_embedding_files(const ExperimentSpec& spec) {
  for (const auto& fusion : spec.fusions) {
    for (const auto& source : fusion.sources) {
      const bool known = std::any_of(spec.embeddings.begin(), spec.embeddings.end(),
                                     [&](const auto& e) { return e.first == source; });
      if (!known) throw ConfigError("no embedding file for model '" + source + "'");
    }
  }
}

}  // namespace

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw ConfigError("no seeds");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (k_folds < 2) throw ConfigError("k_folds must be >= 2, got " + std::to_string(k_folds));
  if (grid.empty()) throw ConfigError("empty hyperparameter grid");
  if (fusions.empty()) throw ConfigError("no combinations to run");
  if (threads == 0) throw ConfigError("threads must be >= 1");
  for (const auto& point : grid) {
    apply_grid_point(base_config, point, 0).validate();
  }
  std::set<std::string> names;
  for (const auto& fusion : fusions) {
    fusion.validate();
    if (!names.insert(combination_name(fusion)).second) {
      throw ConfigError("combination listed twice: " + combination_name(fusion));
    }
  }
}

ExperimentSpec ExperimentSpec::load(const std::filesystem::path& path) {
  const auto kv = KeyValueConfig::load(path);
  kv.reject_unknown({"dataset", "manifest", "label_names", "embedding.", "combinations",
                     "methods", "standalone", "seeds", "k_folds", "hidden_sizes",
                     "learning_rates", "cv_scope", "journal", "output_dir", "max_epochs",
                     "batch_size", "adaptive_lr", "early_stopping", "validation_fraction",
                     "patience", "tol", "threads"});
  const auto base = path.parent_path();
  const auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  const auto parse_u64 = [&](const std::string& key, const std::string& text) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(text, &used);
      if (used != text.size() || text.starts_with('-')) throw std::invalid_argument(text);
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw ConfigError(kv.origin() + ": " + key + ": not an unsigned integer: '" + text + "'");
    }
  };

  ExperimentSpec spec;
  spec.dataset = kv.get("dataset", spec.dataset);
  spec.manifest = resolve(kv.require("manifest"));
  if (kv.contains("label_names")) spec.label_names = resolve(kv.require("label_names"));
  for (const auto& [key, entry] : kv.entries()) {
    if (key.starts_with("embedding.")) {
      const auto model = key.substr(std::string_view("embedding.").size());
      if (model.empty()) throw ConfigError(kv.origin() + ": empty model id in '" + key + "'");
      spec.embeddings.emplace_back(model, resolve(entry.value));
    }
  }
  if (spec.embeddings.empty()) throw ConfigError(kv.origin() + ": no embedding.<model> entries");
  // Keep declaration order so enumeration matches the file.
  std::sort(spec.embeddings.begin(), spec.embeddings.end(), [&](const auto& a, const auto& b) {
    return kv.entries().at("embedding." + a.first).line < kv.entries().at("embedding." + b.first).line;
  });

  std::vector<FusionMethod> methods(std::begin(kAllFusionMethods), std::end(kAllFusionMethods));
  if (kv.contains("methods")) {
    methods.clear();
    for (const auto& m : split_list(kv.require("methods"), ',')) methods.push_back(parse_method(m));
  }
  std::vector<std::string> ids;
  for (const auto& e : spec.embeddings) ids.push_back(e.first);
  auto all = enumerate_fusions(ids, methods, kv.get_bool("standalone", true));

  const auto filter = kv.get("combinations", "all");
  if (filter == "all") {
    spec.fusions = std::move(all);
  } else {
    for (const auto& name : split_list(filter, ';')) {
      auto it = std::find_if(all.begin(), all.end(),
                             [&](const FusionSpec& f) { return combination_name(f) == name; });
      if (it == all.end()) throw ConfigError(kv.origin() + ": unknown combination '" + name + "'");
      spec.fusions.push_back(*it);
    }
  }

  if (kv.contains("seeds")) {
    spec.seeds.clear();
    for (const auto& s : split_list(kv.require("seeds"), ',')) spec.seeds.push_back(parse_u64("seeds", s));
  }
  spec.k_folds = static_cast<int>(kv.get_int("k_folds", spec.k_folds));

  std::vector<std::vector<std::size_t>> hidden = {{128}, {128, 64}};
  std::vector<double> rates = {1e-3, 1e-4};
  if (kv.contains("hidden_sizes")) {
    hidden.clear();
    for (const auto& layer_list : split_list(kv.require("hidden_sizes"), ';')) {
      std::vector<std::size_t> layers;
      for (const auto& w : split_list(layer_list, ',')) layers.push_back(parse_u64("hidden_sizes", w));
      hidden.push_back(std::move(layers));
    }
  }
  if (kv.contains("learning_rates")) {
    rates.clear();
    for (const auto& r : split_list(kv.require("learning_rates"), ',')) {
      try {
        std::size_t used = 0;
        rates.push_back(std::stod(r, &used));
        if (used != r.size()) throw std::invalid_argument(r);
      } catch (const std::exception&) {
        throw ConfigError(kv.origin() + ": learning_rates: not a number: '" + r + "'");
      }
    }
  }
  spec.grid.clear();
  for (const auto& h : hidden) {
    for (double r : rates) spec.grid.push_back({h, r});
  }

  spec.cv_scope = parse_cv_scope(kv.get("cv_scope", std::string(cv_scope_name(spec.cv_scope))));
  spec.journal = resolve(kv.get("journal", "runs.jsonl"));
  spec.output_dir = resolve(kv.get("output_dir", "."));
  spec.threads = static_cast<unsigned>(kv.get_int("threads", 1));

  auto& cfg = spec.base_config;
  cfg.max_epochs = static_cast<int>(kv.get_int("max_epochs", cfg.max_epochs));
  cfg.batch_size = static_cast<std::size_t>(kv.get_int("batch_size", static_cast<std::int64_t>(cfg.batch_size)));
  cfg.lr_schedule = kv.get_bool("adaptive_lr", false) ? LrSchedule::kAdaptive : LrSchedule::kConstant;
  cfg.early_stopping.enabled = kv.get_bool("early_stopping", cfg.early_stopping.enabled);
  cfg.early_stopping.validation_fraction =
      kv.get_double("validation_fraction", cfg.early_stopping.validation_fraction);
  cfg.early_stopping.patience_epochs =
      static_cast<int>(kv.get_int("patience", cfg.early_stopping.patience_epochs));
  cfg.early_stopping.tol = kv.get_double("tol", cfg.early_stopping.tol);

  try {
    spec.validate();
    check_embedding_files(spec);
  } catch (const ConfigError& e) {
    throw ConfigError(kv.origin() + ": " + e.what());
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Journal encoding

std::string cell_key(const std::string& combination, std::uint64_t seed) {
  return combination + "#" + std::to_string(seed);
}

std::string CellResult::key() const { return cell_key(combination, seed); }

namespace {

json record_json(const RunRecord& r) {
  json j;
  if (r.fold) j["fold"] = *r.fold;
  j["grid_point"] = r.grid_point;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["per_class_f1"] = r.per_class_f1;
  j["epochs_run"] = r.epochs_run;
  return j;
}

RunRecord record_from_json(const json& j, const std::string& combination, std::uint64_t seed) {
  RunRecord r;
  r.combination = combination;
  r.seed = seed;
  if (j.contains("fold")) r.fold = j.at("fold").get<int>();
  r.grid_point = j.value("grid_point", std::size_t{0});
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.per_class_f1 = j.value("per_class_f1", std::vector<double>{});
  r.epochs_run = j.value("epochs_run", std::size_t{0});
  return r;
}

StopReason parse_stop_reason(const std::string& name) {
  for (auto r : {StopReason::kNone, StopReason::kEarlyStopping, StopReason::kNoImprovement,
                 StopReason::kMaxEpochs, StopReason::kLearningRateFloor, StopReason::kDiverged}) {
    if (name == stop_reason_name(r)) return r;
  }
  throw FormatError("unknown stop reason '" + name + "'");
}

}  // namespace

std::string encode_cell(const CellResult& cell) {
  json j;
  j["schema"] = kJournalSchema;
  j["kind"] = "cell";
  j["combination"] = cell.combination;
  j["seed"] = cell.seed;
  j["status"] = cell.ok ? "ok" : "error";
  if (!cell.ok) {
    j["error"] = cell.error;
    return j.dump();
  }
  json grid = json::array();
  for (std::size_t p = 0; p < cell.grid.size(); ++p) {
    json g;
    g["hidden_sizes"] = cell.grid[p].hidden_sizes;
    g["learning_rate"] = cell.grid[p].learning_rate;
    g["cv_accuracy"] = cell.cv_accuracy.at(p);
    g["cv_macro_f1"] = cell.cv_macro_f1.at(p);
    grid.push_back(std::move(g));
  }
  j["grid"] = std::move(grid);
  j["best_grid_point"] = cell.best_grid_point;
  j["test_size"] = cell.test_size;
  j["test"] = record_json(cell.test);
  json folds = json::array();
  for (const auto& f : cell.folds) folds.push_back(record_json(f));
  j["folds"] = std::move(folds);
  json h;
  h["train_loss"] = cell.history.train_loss;
  h["validation_score"] = cell.history.validation_score;
  h["best_epoch"] = cell.history.best_epoch;
  h["stop_reason"] = stop_reason_name(cell.history.stop_reason);
  j["history"] = std::move(h);
  return j.dump();
}

CellResult decode_cell(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("journal line is not JSON: ") + e.what());
  }
  try {
    const int schema = j.at("schema").get<int>();
    if (schema != kJournalSchema) {
      throw VersionError("journal schema " + std::to_string(schema) + " is not supported");
    }
    CellResult cell;
    cell.combination = j.at("combination").get<std::string>();
    cell.seed = j.at("seed").get<std::uint64_t>();
    cell.ok = j.at("status").get<std::string>() == "ok";
    if (!cell.ok) {
      cell.error = j.value("error", std::string{});
      return cell;
    }
    if (j.contains("grid")) {
      for (const auto& g : j.at("grid")) {
        cell.grid.push_back({g.at("hidden_sizes").get<std::vector<std::size_t>>(),
                             g.at("learning_rate").get<double>()});
        cell.cv_accuracy.push_back(g.at("cv_accuracy").get<double>());
        cell.cv_macro_f1.push_back(g.at("cv_macro_f1").get<double>());
      }
    }
    cell.best_grid_point = j.value("best_grid_point", std::size_t{0});
    cell.test_size = j.value("test_size", std::size_t{0});
    cell.test = record_from_json(j.at("test"), cell.combination, cell.seed);
    if (j.contains("folds")) {
      for (const auto& f : j.at("folds")) {
        cell.folds.push_back(record_from_json(f, cell.combination, cell.seed));
      }
    }
    if (j.contains("history")) {
      const auto& h = j.at("history");
      cell.history.train_loss = h.value("train_loss", std::vector<double>{});
      cell.history.validation_score = h.value("validation_score", std::vector<double>{});
      cell.history.best_epoch = h.value("best_epoch", std::size_t{0});
      cell.history.epochs_run = cell.history.train_loss.size();
      cell.history.stop_reason = parse_stop_reason(h.value("stop_reason", std::string("none")));
    }
    return cell;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed journal record: ") + e.what());
  }
}

namespace {

// Complete lines of the journal plus the byte length they cover.
std::pair<std::vector<std::string>, std::size_t> journal_lines(const std::filesystem::path& path) {
  std::vector<std::string> lines;
  if (!std::filesystem::exists(path)) return {lines, 0};
  const auto bytes = read_file_bytes(path);
  std::size_t start = 0, covered = 0;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] != '\n') continue;
    std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                     bytes.begin() + static_cast<std::ptrdiff_t>(i));
    if (!trim(line).empty()) lines.push_back(std::move(line));
    start = covered = i + 1;
  }
  return {lines, covered};
}

}  // namespace

std::vector<CellResult> read_journal(const std::filesystem::path& path) {
  auto [lines, covered] = journal_lines(path);
  std::vector<CellResult> cells;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      cells.push_back(decode_cell(lines[i]));
    } catch (const Error& e) {
      throw FormatError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Running

std::vector<RunRecord> ExperimentResult::records() const {
  std::vector<RunRecord> out;
  for (const auto& cell : cells) {
    if (!cell.ok) continue;
    out.insert(out.end(), cell.folds.begin(), cell.folds.end());
    out.push_back(cell.test);
  }
  return out;
}

namespace {

struct CellTask {
  const FusionSpec* fusion;
  std::uint64_t seed;
  std::string combination;
};

// Everything a cell reads, prepared once per experiment.
struct ExperimentData {
  std::size_t n_classes = 0;
  std::vector<int> train_labels;
  std::vector<int> test_labels;
  // Per model id: aligned (train, test) matrices or the reason they are missing.
  std::map<std::string, std::pair<EmbeddingMatrix, EmbeddingMatrix>> aligned;
  std::map<std::string, std::string> unavailable;
};

ExperimentData prepare(const ExperimentSpec& spec, const DatasetManifest& manifest,
                       std::span<const EmbeddingMatrix> matrices,
                       const std::map<std::string, std::string>& load_errors) {
  ExperimentData data;
  data.n_classes = manifest.label_names.size();
  std::vector<Split> cv_splits{Split::kTrain};
  if (spec.cv_scope == CvScope::kTrainDev) cv_splits.push_back(Split::kDev);

  for (const auto& r : manifest.records) {
    if (std::find(cv_splits.begin(), cv_splits.end(), r.split) != cv_splits.end()) {
      data.train_labels.push_back(r.label);
    } else if (r.split == Split::kTest) {
      data.test_labels.push_back(r.label);
    }
  }
  data.unavailable = load_errors;
  for (const auto& m : matrices) {
    try {
      std::span<const EmbeddingMatrix> one(&m, 1);
      auto train = align(manifest, one, cv_splits);
      auto test = align(manifest, one, Split::kTest);
      data.aligned.emplace(m.model_id(),
                           std::make_pair(std::move(train.matrices.front()),
                                          std::move(test.matrices.front())));
    } catch (const Error& e) {
      data.unavailable[m.model_id()] = e.what();
    }
  }
  return data;
}

CellResult run_cell(const ExperimentSpec& spec, const ExperimentData& data, const CellTask& task) {
  const auto t0 = Clock::now();
  CellResult cell;
  cell.combination = task.combination;
  cell.seed = task.seed;
  try {
    std::vector<EmbeddingMatrix> train, test;
    for (const auto& source : task.fusion->sources) {
      if (auto it = data.unavailable.find(source); it != data.unavailable.end()) {
        throw AlignmentError(it->second);
      }
      const auto it = data.aligned.find(source);
      if (it == data.aligned.end()) throw IoError("no embeddings loaded for model '" + source + "'");
      train.push_back(it->second.first);
      test.push_back(it->second.second);
    }
    FusionSpec fusion = *task.fusion;
    fusion.seed = task.seed;
    const auto x_train_m = fuse_matrix(train, fusion);
    const auto x_test_m = fuse_matrix(test, fusion);
    const MatrixView<float> x_train{x_train_m.values().data(), x_train_m.rows(), x_train_m.dim()};
    const MatrixView<float> x_test{x_test_m.values().data(), x_test_m.rows(), x_test_m.dim()};

    const auto gs = grid_search(x_train, data.train_labels, data.n_classes, spec.grid,
                                spec.base_config, spec.k_folds, task.seed);
    cell.grid = spec.grid;
    cell.cv_accuracy = gs.mean_accuracy;
    cell.cv_macro_f1 = gs.mean_macro_f1;
    cell.best_grid_point = gs.best_index;
    for (std::size_t p = 0; p < gs.fold_scores.size(); ++p) {
      for (std::size_t f = 0; f < gs.fold_scores[p].size(); ++f) {
        const auto& s = gs.fold_scores[p][f];
        RunRecord r;
        r.combination = cell.combination;
        r.seed = cell.seed;
        r.fold = static_cast<int>(f);
        r.grid_point = p;
        r.accuracy = s.accuracy;
        r.macro_f1 = s.macro_f1;
        r.per_class_f1 = s.per_class_f1;
        r.epochs_run = s.epochs_run;
        cell.folds.push_back(std::move(r));
      }
    }

    const auto model = train_mlp<float>(gs.best_config, x_train, data.train_labels, data.n_classes);
    const auto pred = predict(model, x_test);
    const auto cm = confusion(pred, data.test_labels, data.n_classes);
    cell.test_size = static_cast<std::size_t>(cm.total());
    cell.test.combination = cell.combination;
    cell.test.seed = cell.seed;
    cell.test.grid_point = gs.best_index;
    cell.test.accuracy = accuracy(cm);
    cell.test.macro_f1 = macro_f1(cm);
    cell.test.per_class_f1 = per_class_f1(cm);
    cell.test.epochs_run = model.history.epochs_run;
    cell.history = model.history;
    cell.history.validation_indices.clear();
    cell.ok = true;
  } catch (const std::exception& e) {
    cell = CellResult{};
    cell.combination = task.combination;
    cell.seed = task.seed;
    cell.error = e.what();
  }
  cell.wall_time = seconds_since(t0);
  cell.test.wall_time = cell.wall_time;
  return cell;
}

class JournalWriter {
 public:
  explicit JournalWriter(const std::filesystem::path& path, std::size_t keep_bytes) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // Drop a partial trailing line left by an interrupted write.
    if (std::filesystem::exists(path) && std::filesystem::file_size(path) != keep_bytes) {
      std::filesystem::resize_file(path, keep_bytes);
    }
    out_.open(path, std::ios::binary | std::ios::app);
    if (!out_) throw IoError("cannot open journal " + path.string());
  }

  void append(const CellResult& cell) {
    out_ << encode_cell(cell) << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

ExperimentResult run_cells(const ExperimentSpec& spec, const ExperimentData& data,
                           const RunOptions& options) {
  std::vector<CellTask> tasks;
  for (const auto& fusion : spec.fusions) {
    for (auto seed : spec.seeds) tasks.push_back({&fusion, seed, combination_name(fusion)});
  }

  auto [lines, covered] = journal_lines(spec.journal);
  std::vector<std::string> raw_lines = lines;
  std::unordered_map<std::string, std::size_t> latest;  // key -> index into journal lines
  std::vector<CellResult> journal;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      journal.push_back(decode_cell(lines[i]));
    } catch (const Error& e) {
      throw FormatError(spec.journal.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
    latest[journal.back().key()] = i;
  }

  ExperimentResult result;
  result.total_cells = tasks.size();
  std::vector<std::optional<CellResult>> done(tasks.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto it = latest.find(cell_key(tasks[i].combination, tasks[i].seed));
    if (it != latest.end() && journal[it->second].ok) {
      done[i] = journal[it->second];
    } else {
      pending.push_back(i);
    }
  }

  JournalWriter writer(spec.journal, covered);

  // Workers compute pending cells; this thread journals them in cell order.
  std::mutex mu;
  std::condition_variable ready;
  std::vector<std::optional<CellResult>> computed(pending.size());
  std::size_t next = 0;
  bool stop = false;
  const auto cancelled = [&] {
    return options.cancel && options.cancel->load(std::memory_order_relaxed);
  };
  const unsigned n_workers =
      std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(pending.size())));
  std::size_t running = n_workers;
  {
    std::vector<std::jthread> workers;
    if (!pending.empty()) {
      for (unsigned w = 0; w < n_workers; ++w) {
        workers.emplace_back([&] {
          while (true) {
            std::size_t i;
            {
              std::lock_guard lock(mu);
              if (stop || cancelled() || next >= pending.size()) break;
              i = next++;
            }
            auto cell = run_cell(spec, data, tasks[pending[i]]);
            std::lock_guard lock(mu);
            computed[i] = std::move(cell);
            ready.notify_all();
          }
          std::lock_guard lock(mu);
          --running;
          ready.notify_all();
        });
      }
    }

    std::size_t pending_pos = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const bool is_pending = pending_pos < pending.size() && pending[pending_pos] == i;
      if (!is_pending) {
        result.cells.push_back(*done[i]);
        ++result.cached;
        if (options.on_progress) options.on_progress({i + 1, tasks.size(), &result.cells.back(), true});
        continue;
      }
      if (result.computed >= options.max_new_cells) break;
      std::unique_lock lock(mu);
      // Polled so a cancel flag set from a signal handler is noticed.
      while (!computed[pending_pos] && running != 0 && !cancelled()) {
        ready.wait_for(lock, std::chrono::milliseconds(100));
      }
      if (!computed[pending_pos]) break;
      CellResult cell = std::move(*computed[pending_pos]);
      lock.unlock();
      writer.append(cell);
      ++result.computed;
      if (!cell.ok) ++result.failed;
      result.cells.push_back(std::move(cell));
      if (options.on_progress) options.on_progress({i + 1, tasks.size(), &result.cells.back(), false});
      ++pending_pos;
    }
    {
      std::lock_guard lock(mu);
      stop = true;
    }
  }

  result.complete = result.cells.size() == tasks.size();
  if (result.complete) {
    // Rewrite the journal as exactly one line per cell in cell order, keeping
    // lines of cells that belong to other specs after them.
    std::set<std::string> ours;
    std::string text;
    for (const auto& cell : result.cells) {
      ours.insert(cell.key());
      text += encode_cell(cell);
      text += '\n';
    }
    std::set<std::string> kept;
    for (std::size_t i = 0; i < journal.size(); ++i) {
      const auto key = journal[i].key();
      if (ours.count(key) || latest.at(key) != i || !kept.insert(key).second) continue;
      text += raw_lines[i];
      text += '\n';
    }
    write_file_atomic(spec.journal, std::string_view(text));
  }
  return result;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, const DatasetManifest& manifest,
                                std::span<const EmbeddingMatrix> matrices,
                                const RunOptions& options) {
  spec.validate();
  std::map<std::string, std::string> missing;
  for (const auto& f : spec.fusions) {
    for (const auto& source : f.sources) {
      const bool given = std::any_of(matrices.begin(), matrices.end(),
                                     [&](const auto& m) { return m.model_id() == source; });
      if (!given) missing[source] = "no embeddings for model '" + source + "'";
    }
  }
  const auto data = prepare(spec, manifest, matrices, missing);
  return run_cells(spec, data, options);
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& options) {
  spec.validate();
  check_embedding_files(spec);
  const auto manifest = load_manifest(spec.manifest, spec.label_names);
  std::set<std::string> used;
  for (const auto& f : spec.fusions) used.insert(f.sources.begin(), f.sources.end());
  std::vector<EmbeddingMatrix> matrices;
  std::map<std::string, std::string> errors;
  for (const auto& [model, path] : spec.embeddings) {
    if (!used.count(model)) continue;
    try {
      auto m = read_embeddings(path);
      if (m.model_id() != model) {
        throw FormatError(path.string() + " holds model '" + m.model_id() + "', expected '" +
                          model + "'");
      }
      matrices.push_back(std::move(m));
    } catch (const Error& e) {
      errors[model] = e.what();
    }
  }
  const auto data = prepare(spec, manifest, matrices, errors);
  return run_cells(spec, data, options);
}

// ---------------------------------------------------------------------------
// Aggregation

std::vector<SummaryRow> aggregate(std::span<const RunRecord> records) {
  std::map<std::string, std::vector<const RunRecord*>> by_name;
  for (const auto& r : records) {
    if (!r.fold) by_name[r.combination].push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& [name, group] : by_name) {
    SummaryRow row;
    row.combination = name;
    row.n_seeds = group.size();
    const double n = static_cast<double>(group.size());
    for (const auto* r : group) {
      row.accuracy_mean += r->accuracy;
      row.macro_f1_mean += r->macro_f1;
    }
    row.accuracy_mean /= n;
    row.macro_f1_mean /= n;
    for (const auto* r : group) {
      row.accuracy_std += (r->accuracy - row.accuracy_mean) * (r->accuracy - row.accuracy_mean);
      row.macro_f1_std += (r->macro_f1 - row.macro_f1_mean) * (r->macro_f1 - row.macro_f1_mean);
    }
    row.accuracy_std = std::sqrt(row.accuracy_std / n);
    row.macro_f1_std = std::sqrt(row.macro_f1_std / n);
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
    if (a.accuracy_mean != b.accuracy_mean) return a.accuracy_mean > b.accuracy_mean;
    return a.combination < b.combination;
  });
  return rows;
}

}  // namespace embfuse
