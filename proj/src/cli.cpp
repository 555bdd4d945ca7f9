// SPDX-License-Identifier: Apache-2.0

#include "embfuse/cli.hpp"

#include <cmath>
#include <filesystem>
#include <optional>

#include "CLI11.hpp"

#include "byte_io.hpp"
#include "embfuse/embstore.hpp"
#include "embfuse/errors.hpp"
#include "embfuse/harness.hpp"
#include "embfuse/kvconfig.hpp"
#include "embfuse/metrics.hpp"
#include "embfuse/neuralnet.hpp"
#include "embfuse/report.hpp"
#include "embfuse/textprep.hpp"
#include "embfuse/vecfuse.hpp"

namespace embfuse {

namespace {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<fs::path> config;
};

struct PreprocessArgs {
  fs::path in, out;
  std::optional<std::string> url, html, user;
};

struct FuseArgs {
  std::vector<fs::path> inputs;
  std::string method;
  fs::path out;
};

struct SweepArgs {
  fs::path spec;
  std::size_t max_cells = SIZE_MAX;
};

struct ReportArgs {
  fs::path journal;
  std::string format = "md";
  std::optional<fs::path> out;
  std::string title;
  bool with_std = false;
};

struct CheckArgs {
  fs::path embf;
  std::optional<fs::path> manifest;
  std::optional<std::size_t> expect_dim;
  bool skip_range = false;
};

struct TrainArgs {
  fs::path manifest, out;
  std::vector<fs::path> inputs;
  std::string method;
  std::string split = "train";
  std::vector<std::size_t> hidden{128};
  double lr = 1e-3;
  int max_epochs = 10000;
};

struct PredictArgs {
  fs::path model, manifest;
  std::vector<fs::path> inputs;
  std::string method;
  std::string split = "test";
};

// Reads the inputs and fuses them row-aligned to the first file.
EmbeddingMatrix load_and_fuse(const std::vector<fs::path>& paths, const std::string& method,
                              const GlobalOptions& global) {
  std::vector<EmbeddingMatrix> matrices;
  for (const auto& p : paths) matrices.push_back(read_embeddings(p));
  if (matrices.size() == 1) {
    if (!method.empty()) throw ConfigError("--method needs at least two embedding files");
    return matrices.front();
  }
  if (method.empty()) throw ConfigError("--method is required with several embedding files");
  FusionSpec spec;
  spec.method = parse_method(method);
  if (*spec.method == FusionMethod::kRandomInterleave) {
    if (!global.seed) throw ConfigError("randomlycombined needs --seed");
    spec.seed = *global.seed;
  }
  for (const auto& m : matrices) spec.sources.push_back(m.model_id());
  spec.validate();
  const auto aligned = align_to_first(matrices);
  auto fused = fuse_matrix(aligned, spec, global.threads.value_or(1));
  return EmbeddingMatrix(combination_name(spec), fused.sample_ids(), fused.dim(),
                         {fused.values().begin(), fused.values().end()});
}

// Fused rows and labels of one manifest split.
std::pair<DenseMatrix<float>, std::vector<int>> split_rows(const EmbeddingMatrix& fused,
                                                           const DatasetManifest& manifest,
                                                           const std::string& split_text) {
  const auto split = parse_split(split_text);
  if (!split) throw ConfigError("unknown split '" + split_text + "'");
  const auto aligned = align(manifest, std::span<const EmbeddingMatrix>(&fused, 1), *split);
  const auto& m = aligned.matrices.front();
  return {DenseMatrix<float>(m.rows(), m.dim(), {m.values().begin(), m.values().end()}),
          aligned.labels};
}

int cmd_preprocess(const PreprocessArgs& args, const GlobalOptions& global, std::ostream& out) {
  PreprocessConfig cfg;
  if (global.config) cfg = PreprocessConfig::from_config(KeyValueConfig::load(*global.config));
  if (args.url) cfg.url_placeholder = *args.url;
  if (args.html) cfg.html_placeholder = *args.html;
  if (args.user) cfg.user_placeholder = *args.user;
  cfg.validate();

  auto table = read_csv(args.in);
  if (!table.header.empty()) {
    const auto text_col = table.column("text");
    if (!text_col) throw SchemaError(args.in.string() + ": missing column 'text'");
    auto clean_col = table.column("clean_text");
    if (!clean_col) {
      table.header.push_back("clean_text");
      for (auto& row : table.rows) row.emplace_back();
      clean_col = table.header.size() - 1;
    }
    for (auto& row : table.rows) row[*clean_col] = preprocess(row[*text_col], cfg);
  }
  write_file_atomic(args.out, std::string_view(format_csv(table)));
  out << "preprocessed " << table.rows.size() << " rows -> " << args.out.string() << '\n';
  return exit_code::kOk;
}

int cmd_fuse(const FuseArgs& args, const GlobalOptions& global, std::ostream& out) {
  if (args.inputs.size() < 2) throw ConfigError("fuse needs at least two embedding files");
  const auto fused = load_and_fuse(args.inputs, args.method, global);
  write_embeddings(args.out, fused);
  out << fused.model_id() << ": " << fused.rows() << " x " << fused.dim() << " -> "
      << args.out.string() << '\n';
  return exit_code::kOk;
}

int cmd_sweep(const SweepArgs& args, const GlobalOptions& global, std::ostream& out,
              std::ostream& err, const std::atomic<bool>* cancel) {
  auto spec = ExperimentSpec::load(args.spec);
  if (global.threads) spec.threads = *global.threads;

  RunOptions options;
  options.threads = spec.threads;
  options.max_new_cells = args.max_cells;
  options.cancel = cancel;
  options.on_progress = [&](const CellProgress& p) {
    const auto& c = *p.cell;
    out << '[' << p.index << '/' << p.total << "] " << c.combination << " seed=" << c.seed;
    if (c.ok) {
      out << " accuracy=" << format_score(c.test.accuracy)
          << " macro_f1=" << format_score(c.test.macro_f1);
    } else {
      out << " FAILED";
      err << c.combination << " seed=" << c.seed << ": " << c.error << '\n';
    }
    out << (p.cached ? " (cached)" : "") << std::endl;
  };
  const auto result = run_experiment(spec, options);

  out << result.cached << '/' << result.total_cells << " cached, " << result.computed
      << " computed, " << result.failed << " failed\n";

  const auto rows = summarize(result.cells);
  if (!rows.empty()) {
    fs::create_directories(spec.output_dir);
    const ReportOptions report{spec.dataset, true};
    write_file_atomic(spec.output_dir / "summary.csv", std::string_view(format_csv_report(rows, report)));
    write_file_atomic(spec.output_dir / "summary.md",
                      std::string_view(format_markdown_report(rows, report)));
  }
  if (!result.complete) {
    err << "sweep stopped with " << result.cells.size() << '/' << result.total_cells
        << " cells done; rerun to resume\n";
    return exit_code::kInterrupted;
  }
  if (rows.empty()) return exit_code::kAllFailed;
  return exit_code::kOk;
}

int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err) {
  if (!fs::exists(args.journal)) throw IoError("no such journal: " + args.journal.string());
  const auto cells = read_journal(args.journal);
  const auto rows = summarize(cells);
  if (rows.empty()) {
    err << args.journal.string() << ": no successful cells to report\n";
    return exit_code::kEmptyReport;
  }
  const ReportOptions options{args.title, args.with_std};
  std::string text;
  if (args.format == "csv") {
    text = format_csv_report(rows, options);
  } else if (args.format == "md") {
    text = format_markdown_report(rows, options);
  } else {
    text = format_svg_report(rows, options);
  }
  if (args.out) {
    write_file_atomic(*args.out, std::string_view(text));
  } else {
    out << text;
  }
  return exit_code::kOk;
}

int cmd_extract_check(const CheckArgs& args, std::ostream& out, std::ostream& err) {
  EmbeddingMatrix m;
  try {
    m = read_embeddings(args.embf);
  } catch (const ChecksumError& e) {
    err << args.embf.string() << ": checksum failure: " << e.what() << '\n';
    return exit_code::kUsage;
  } catch (const ValidationError& e) {
    err << args.embf.string() << ": " << e.what() << '\n';
    return exit_code::kUsage;
  }
  if (args.expect_dim && m.dim() != *args.expect_dim) {
    err << args.embf.string() << ": dim " << m.dim() << ", expected " << *args.expect_dim << '\n';
    return exit_code::kUsage;
  }
  if (args.manifest) {
    const auto manifest = load_manifest(*args.manifest);
    if (manifest.records.size() != m.rows()) {
      err << args.embf.string() << ": " << m.rows() << " rows, manifest has "
          << manifest.records.size() << '\n';
    }
    const std::size_t n = std::min(manifest.records.size(), m.rows());
    for (std::size_t i = 0; i < n; ++i) {
      if (manifest.records[i].id != m.sample_ids()[i]) {
        err << "id mismatch at row " << i << ": embedding '" << m.sample_ids()[i]
            << "', manifest '" << manifest.records[i].id << "'\n";
        return exit_code::kAlignment;
      }
    }
    if (manifest.records.size() != m.rows()) {
      const auto& first = manifest.records.size() > n ? manifest.records[n].id : m.sample_ids()[n];
      err << "first unmatched id: " << first << '\n';
      return exit_code::kAlignment;
    }
  }
  if (!args.skip_range) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (float v : m.row(i)) {
        if (!(v > -1.0f && v < 1.0f)) {
          err << "value " << v << " outside (-1, 1) in row '" << m.sample_ids()[i] << "'\n";
          return exit_code::kUsage;
        }
      }
    }
  }
  out << args.embf.string() << ": ok, model=" << m.model_id() << " rows=" << m.rows()
      << " dim=" << m.dim() << '\n';
  return exit_code::kOk;
}

int cmd_train(const TrainArgs& args, const GlobalOptions& global, std::ostream& out) {
  const auto manifest = load_manifest(args.manifest);
  const auto fused = load_and_fuse(args.inputs, args.method, global);
  const auto [x, y] = split_rows(fused, manifest, args.split);
  MlpConfig config;
  config.hidden_sizes = args.hidden;
  config.init_learning_rate = args.lr;
  config.max_epochs = args.max_epochs;
  config.seed = global.seed.value_or(0);
  const auto model = train_mlp<float>(config, x, y, manifest.label_names.size());
  save_model(args.out, model);
  out << "trained " << fused.model_id() << " on " << x.rows() << " rows, "
      << model.history.epochs_run << " epochs (" << stop_reason_name(model.history.stop_reason)
      << ") -> " << args.out.string() << '\n';
  return exit_code::kOk;
}

int cmd_predict(const PredictArgs& args, const GlobalOptions& global, std::ostream& out) {
  const auto manifest = load_manifest(args.manifest);
  const auto model = load_model(args.model);
  const auto fused = load_and_fuse(args.inputs, args.method, global);
  const auto [x, y] = split_rows(fused, manifest, args.split);
  const auto cm = confusion(predict(model, x.view()), y, model.n_classes);
  out << "accuracy=" << format_score(accuracy(cm)) << " macro_f1=" << format_score(macro_f1(cm))
      << " n=" << cm.total() << '\n';
  return exit_code::kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
            const std::atomic<bool>* cancel) {
  CLI::App app{"Embedding fusion benchmark toolkit", "embfuse"};
  app.require_subcommand(1);
  GlobalOptions global;
  app.add_option("--seed", global.seed, "Seed for randomised fusion and training");
  app.add_option("--threads", global.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--config", global.config, "key = value settings file")->check(CLI::ExistingFile);

  PreprocessArgs pre;
  auto* preprocess_cmd = app.add_subcommand("preprocess", "Clean manifest text into a clean_text column");
  preprocess_cmd->add_option("--in", pre.in, "Input manifest CSV")->required();
  preprocess_cmd->add_option("--out", pre.out, "Output manifest CSV")->required();
  preprocess_cmd->add_option("--url-placeholder", pre.url);
  preprocess_cmd->add_option("--html-placeholder", pre.html);
  preprocess_cmd->add_option("--user-placeholder", pre.user);

  FuseArgs fuse;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse two or more EMBF files");
  fuse_cmd->add_option("inputs", fuse.inputs, "EMBF files")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--method", fuse.method, "add, multiply, concat, interleave or randomlycombined")
      ->required();
  fuse_cmd->add_option("--out", fuse.out, "Output EMBF file")->required();

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run or resume an experiment spec");
  sweep_cmd->add_option("spec", sweep.spec, "Experiment spec file")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--max-cells", sweep.max_cells, "Stop after computing this many cells");

  ReportArgs report;
  auto* report_cmd = app.add_subcommand("report", "Summarise a journal");
  report_cmd->add_option("journal", report.journal, "Journal file")->required();
  report_cmd->add_option("--format", report.format)->check(CLI::IsMember({"csv", "md", "svg"}));
  report_cmd->add_option("--out", report.out, "Write here instead of stdout");
  report_cmd->add_option("--title", report.title);
  report_cmd->add_flag("--with-std", report.with_std, "Add std-over-seeds columns");

  CheckArgs check;
  auto* check_cmd = app.add_subcommand("extract-check", "Validate an extracted EMBF file");
  check_cmd->add_option("embf", check.embf)->required();
  check_cmd->add_option("--manifest", check.manifest, "Manifest whose ids the file must match");
  check_cmd->add_option("--expect-dim", check.expect_dim);
  check_cmd->add_flag("--no-range-check", check.skip_range, "Accept values outside (-1, 1)");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train one MLP and save it");
  train_cmd->add_option("inputs", train.inputs, "EMBF files")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--manifest", train.manifest)->required();
  train_cmd->add_option("--method", train.method);
  train_cmd->add_option("--split", train.split);
  train_cmd->add_option("--hidden", train.hidden)->delimiter(',');
  train_cmd->add_option("--lr", train.lr);
  train_cmd->add_option("--max-epochs", train.max_epochs);
  train_cmd->add_option("--out", train.out)->required();

  PredictArgs pred;
  auto* predict_cmd = app.add_subcommand("predict", "Score a saved model on a manifest split");
  predict_cmd->add_option("inputs", pred.inputs, "EMBF files")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--model", pred.model)->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--manifest", pred.manifest)->required();
  predict_cmd->add_option("--method", pred.method);
  predict_cmd->add_option("--split", pred.split);

  std::vector<std::string> argv_storage{"embfuse"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_code::kOk : exit_code::kUsage;
  }

  try {
    if (preprocess_cmd->parsed()) return cmd_preprocess(pre, global, out);
    if (fuse_cmd->parsed()) return cmd_fuse(fuse, global, out);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep, global, out, err, cancel);
    if (report_cmd->parsed()) return cmd_report(report, out, err);
    if (check_cmd->parsed()) return cmd_extract_check(check, out, err);
    if (train_cmd->parsed()) return cmd_train(train, global, out);
    if (predict_cmd->parsed()) return cmd_predict(pred, global, out);
  } catch (const AlignmentError& e) {
    err << "alignment error: " << e.what() << '\n';
    return exit_code::kAlignment;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::kUsage;
  }
  return exit_code::kUsage;
}

}  // namespace embfuse
