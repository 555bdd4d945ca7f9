// SPDX-License-Identifier: Apache-2.0
//
// Result tables and bar charts built from aggregated sweep results.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "embfuse/harness.hpp"

namespace embfuse {

struct ReportOptions {
  std::string title;     // Markdown heading / SVG caption; omitted when empty
  bool with_std = false;  // add std-over-seeds columns
};

/// Summary rows of the successful cells of a journal, in aggregate() order.
std::vector<SummaryRow> summarize(std::span<const CellResult> cells);

std::string format_csv_report(std::span<const SummaryRow> rows, const ReportOptions& options = {});
std::string format_markdown_report(std::span<const SummaryRow> rows,
                                   const ReportOptions& options = {});
/// Grouped bar chart: one group per combination, one bar per metric, y axis 0 to 1.
std::string format_svg_report(std::span<const SummaryRow> rows, const ReportOptions& options = {});

/// Three decimals, as printed in the result tables.
std::string format_score(double value);

}  // namespace embfuse
