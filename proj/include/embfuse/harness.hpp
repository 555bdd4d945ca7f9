// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocol: for every (combination, seed) cell the fused training
// matrix is grid-searched with stratified k-fold cross-validation, the best
// grid point is retrained on the whole training split and scored once on
// the test split. Cells are journaled as JSON lines so an interrupted sweep
// resumes where it stopped.

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embfuse/embstore.hpp"
#include "embfuse/neuralnet.hpp"
#include "embfuse/vecfuse.hpp"

namespace embfuse {

struct GridPoint {
  std::vector<std::size_t> hidden_sizes;
  double learning_rate = 1e-3;

  std::string label() const;  // "hidden=128,64 lr=0.001"
  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

/// Hidden sizes {128}, {128,64} (outer) x learning rates 1e-3, 1e-4 (inner).
std::vector<GridPoint> default_grid();
std::vector<std::uint64_t> default_seeds();  // {3, 7, 42}

/// Fold index per sample. Per-class fold sizes differ by at most one and the
/// result depends only on (labels, k, seed). Throws StratificationError if a
/// class present in `labels` has fewer than k samples.
std::vector<int> stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed);

struct FoldScore {
  double accuracy = 0;
  double macro_f1 = 0;
  std::vector<double> per_class_f1;
  std::size_t epochs_run = 0;
};

struct GridSearchResult {
  std::size_t best_index = 0;
  MlpConfig best_config;
  std::vector<double> mean_accuracy;                // per grid point
  std::vector<double> mean_macro_f1;                // per grid point
  std::vector<std::vector<FoldScore>> fold_scores;  // [grid point][fold]
  std::vector<int> folds;                           // fold of each sample
};

/// Called once per (grid point, fold) with the held-out row indices.
using FoldObserver =
    std::function<void(std::size_t grid_point, int fold, std::span<const std::size_t> held_out)>;

/// Mean k-fold accuracy for every grid point over shared folds; the best
/// point is the highest mean, earliest in `grid` on ties. Training errors
/// are rethrown with the grid point prepended.
GridSearchResult grid_search(MatrixView<float> x, std::span<const int> y, std::size_t n_classes,
                             std::span<const GridPoint> grid, const MlpConfig& base, int k,
                             std::uint64_t seed, const FoldObserver& observer = {});

MlpConfig apply_grid_point(const MlpConfig& base, const GridPoint& point, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Experiments

enum class CvScope { kTrain, kTrainDev };

std::string_view cv_scope_name(CvScope scope);
CvScope parse_cv_scope(std::string_view text);

/// Standalone sources first, then every subset of two or more sources with
/// each method, sources in report order.
std::vector<FusionSpec> enumerate_fusions(std::span<const std::string> model_ids,
                                          std::span<const FusionMethod> methods,
                                          bool include_standalone = true);

struct ExperimentSpec {
  std::string dataset = "dataset";
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> label_names;
  std::vector<std::pair<std::string, std::filesystem::path>> embeddings;  // model id -> EMBF
  std::vector<FusionSpec> fusions;
  std::vector<GridPoint> grid = default_grid();
  MlpConfig base_config;
  std::vector<std::uint64_t> seeds = default_seeds();
  int k_folds = 5;
  CvScope cv_scope = CvScope::kTrainDev;
  std::filesystem::path journal = "runs.jsonl";
  std::filesystem::path output_dir = ".";
  unsigned threads = 1;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;

  /// Reads a key = value spec; relative paths resolve against its folder.
  static ExperimentSpec load(const std::filesystem::path& path);
};

struct RunRecord {
  std::string combination;
  std::uint64_t seed = 0;
  std::optional<int> fold;  // nullopt: final test-split evaluation
  std::size_t grid_point = 0;
  double accuracy = 0;
  double macro_f1 = 0;
  std::vector<double> per_class_f1;
  std::size_t epochs_run = 0;
  double wall_time = 0;  // seconds; not journaled
};

struct CellResult {
  std::string combination;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<GridPoint> grid;
  std::vector<double> cv_accuracy;  // per grid point
  std::vector<double> cv_macro_f1;  // per grid point
  std::size_t best_grid_point = 0;
  std::size_t test_size = 0;
  RunRecord test;
  std::vector<RunRecord> folds;
  TrainingHistory history;  // final model
  double wall_time = 0;

  std::string key() const;
};

std::string cell_key(const std::string& combination, std::uint64_t seed);

struct CellProgress {
  std::size_t index = 0;  // 1-based position in the cell order
  std::size_t total = 0;
  const CellResult* cell = nullptr;
  bool cached = false;
};

struct RunOptions {
  unsigned threads = 1;
  /// Stop after this many newly computed cells have been journaled.
  std::size_t max_new_cells = SIZE_MAX;
  const std::atomic<bool>* cancel = nullptr;
  std::function<void(const CellProgress&)> on_progress;
};

struct ExperimentResult {
  std::vector<CellResult> cells;  // cell order; only cells that finished
  std::size_t total_cells = 0;
  std::size_t cached = 0;
  std::size_t computed = 0;
  std::size_t failed = 0;
  bool complete = false;

  std::vector<RunRecord> records() const;
};

/// Runs or resumes every (fusion, seed) cell of `spec`.
ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& options = {});

/// Same, on already loaded data (no files besides the journal).
ExperimentResult run_experiment(const ExperimentSpec& spec, const DatasetManifest& manifest,
                                std::span<const EmbeddingMatrix> matrices,
                                const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Journal

std::string encode_cell(const CellResult& cell);
CellResult decode_cell(std::string_view line);

/// Complete journal lines in file order; a trailing partial line is ignored.
std::vector<CellResult> read_journal(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Aggregation

struct SummaryRow {
  std::string combination;
  std::size_t n_seeds = 0;
  double accuracy_mean = 0;
  double accuracy_std = 0;
  double macro_f1_mean = 0;
  double macro_f1_std = 0;
};

/// Mean and population std over seeds of the final test records, sorted by
/// descending mean accuracy, then by name.
std::vector<SummaryRow> aggregate(std::span<const RunRecord> records);

}  // namespace embfuse
