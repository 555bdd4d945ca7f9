// SPDX-License-Identifier: Apache-2.0

#include "embfuse/report.hpp"

#include <algorithm>
#include <cstdio>

#include "embfuse/embstore.hpp"

namespace embfuse {

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

std::string format_score(double value) { return fixed(value, 3); }

std::vector<SummaryRow> summarize(std::span<const CellResult> cells) {
  std::vector<RunRecord> finals;
  for (const auto& cell : cells) {
    if (cell.ok) finals.push_back(cell.test);
  }
  return aggregate(finals);
}

std::string format_csv_report(std::span<const SummaryRow> rows, const ReportOptions& options) {
  CsvTable table;
  table.header = {"combination", "accuracy", "macro_f1"};
  if (options.with_std) {
    table.header.insert(table.header.end(), {"accuracy_std", "macro_f1_std", "seeds"});
  }
  for (const auto& r : rows) {
    std::vector<std::string> row{r.combination, format_score(r.accuracy_mean),
                                 format_score(r.macro_f1_mean)};
    if (options.with_std) {
      row.insert(row.end(), {format_score(r.accuracy_std), format_score(r.macro_f1_std),
                             std::to_string(r.n_seeds)});
    }
    table.rows.push_back(std::move(row));
  }
  return format_csv(table);
}

std::string format_markdown_report(std::span<const SummaryRow> rows,
                                   const ReportOptions& options) {
  std::string out;
  if (!options.title.empty()) out += "### " + options.title + "\n\n";
  out += "| Embedding Combination | Accuracy | Macro F1 |";
  out += options.with_std ? " Accuracy Std | Macro F1 Std |\n" : "\n";
  out += "|---|---|---|";
  out += options.with_std ? "---|---|\n" : "\n";
  for (const auto& r : rows) {
    out += "| " + r.combination + " | " + format_score(r.accuracy_mean) + " | " +
           format_score(r.macro_f1_mean) + " |";
    if (options.with_std) {
      out += " " + format_score(r.accuracy_std) + " | " + format_score(r.macro_f1_std) + " |";
    }
    out += '\n';
  }
  return out;
}

std::string format_svg_report(std::span<const SummaryRow> rows, const ReportOptions& options) {
  constexpr double kBar = 14, kGap = 12, kLeft = 50, kTop = 50, kPlot = 300, kLabels = 220;
  const double group = 2 * kBar + kGap;
  const double width = kLeft + static_cast<double>(rows.size()) * group + kGap + 20;
  const double height = kTop + kPlot + kLabels;
  const auto y_of = [&](double v) { return kTop + kPlot * (1.0 - v); };

  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(width, 0) + "\" height=\"" +
         fixed(height, 0) + "\" viewBox=\"0 0 " + fixed(width, 0) + " " + fixed(height, 0) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  if (!options.title.empty()) {
    out += "  <text class=\"title\" x=\"" + fixed(width / 2, 1) +
           "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + xml_escape(options.title) +
           "</text>\n";
  }
  out += "  <g class=\"axis\">\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    const auto y = fixed(y_of(v), 1);
    out += "    <line x1=\"" + fixed(kLeft, 1) + "\" y1=\"" + y + "\" x2=\"" + fixed(width - 10, 1) +
           "\" y2=\"" + y + "\" stroke=\"#dddddd\"/>\n";
    out += "    <text x=\"" + fixed(kLeft - 6, 1) + "\" y=\"" + y +
           "\" text-anchor=\"end\" dominant-baseline=\"middle\">" + fixed(v, 1) + "</text>\n";
  }
  out += "    <line x1=\"" + fixed(kLeft, 1) + "\" y1=\"" + fixed(y_of(0), 1) + "\" x2=\"" +
         fixed(kLeft, 1) + "\" y2=\"" + fixed(y_of(1), 1) + "\" stroke=\"black\"/>\n";
  out += "  </g>\n";

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double x0 = kLeft + kGap + static_cast<double>(i) * group;
    out += "  <g class=\"combination\" data-name=\"" + xml_escape(r.combination) + "\">\n";
    const struct {
      const char* cls;
      double value;
      const char* fill;
    } bars[] = {{"accuracy", r.accuracy_mean, "#4c72b0"}, {"macro-f1", r.macro_f1_mean, "#dd8452"}};
    for (std::size_t b = 0; b < 2; ++b) {
      const double v = std::clamp(bars[b].value, 0.0, 1.0);
      out += "    <rect class=\"bar " + std::string(bars[b].cls) + "\" x=\"" +
             fixed(x0 + static_cast<double>(b) * kBar, 1) + "\" y=\"" + fixed(y_of(v), 1) +
             "\" width=\"" + fixed(kBar, 1) + "\" height=\"" + fixed(kPlot * v, 1) +
             "\" fill=\"" + bars[b].fill + "\"><title>" + xml_escape(r.combination) + " " +
             bars[b].cls + " " + format_score(bars[b].value) + "</title></rect>\n";
    }
    const double lx = x0 + kBar, ly = y_of(0) + 10;
    out += "    <text class=\"label\" x=\"" + fixed(lx, 1) + "\" y=\"" + fixed(ly, 1) +
           "\" text-anchor=\"end\" transform=\"rotate(-60 " + fixed(lx, 1) + " " + fixed(ly, 1) +
           ")\">" + xml_escape(r.combination) + "</text>\n";
    out += "  </g>\n";
  }

  out += "  <g class=\"legend\">\n";
  out += "    <rect x=\"" + fixed(kLeft, 1) + "\" y=\"28\" width=\"10\" height=\"10\" fill=\"#4c72b0\"/>\n";
  out += "    <text x=\"" + fixed(kLeft + 14, 1) + "\" y=\"37\">Accuracy</text>\n";
  out += "    <rect x=\"" + fixed(kLeft + 80, 1) + "\" y=\"28\" width=\"10\" height=\"10\" fill=\"#dd8452\"/>\n";
  out += "    <text x=\"" + fixed(kLeft + 94, 1) + "\" y=\"37\">Macro F1</text>\n";
  out += "  </g>\n";
  out += "</svg>\n";
  return out;
}

}  // namespace embfuse
