#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "nt/experiments.hpp"

namespace nt {

// One CSV line: experiment,method,seed,epoch,metric,value. Per-seed scalars
// sit at epoch 0; fine-tuning accuracies use epochs 1..n.
struct ReportRow {
  std::string experiment;
  std::string method;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string metric;
  double value = 0.0;

  bool operator==(const ReportRow&) const = default;
};

// Value rounded through its 9-significant-digit text form.
double canonical(double v);
std::string format_value(double v);

// Canonicalises every number so that the CSV text round-trips exactly.
RunReport canonical_report(const RunReport& r);

std::vector<ReportRow> report_rows(const std::vector<RunReport>& reports);
std::vector<RunReport> reports_from_rows(const std::vector<ReportRow>& rows);

std::string to_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_csv(const std::string& text);

nlohmann::json aggregate_json(const Aggregate& a);
nlohmann::json to_json(const std::vector<RunReport>& reports);

// Mean fine-tuning accuracy per epoch, one polyline per method.
std::string accuracy_svg(const std::vector<RunReport>& reports, const std::string& title);

enum class ReportFormat { Csv, Json, Svg };
ReportFormat report_format_from_string(std::string_view s);
std::string render(const std::vector<RunReport>& reports, ReportFormat f);

// Writes report.csv, report.json and accuracy.svg under `dir`.
void emit_report(const std::vector<RunReport>& reports, const std::filesystem::path& dir);
std::vector<RunReport> read_report_dir(const std::filesystem::path& dir);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace nt
