#include "nt/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace nt {

using nlohmann::json;

double canonical(double v) { return std::strtod(format_value(v).c_str(), nullptr); }

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

RunReport canonical_report(const RunReport& r) {
  RunReport c = r;
  for (SeedRecord& s : c.records) {
    s.ensemble_acc = canonical(s.ensemble_acc);
    s.best_member_acc = canonical(s.best_member_acc);
    s.immediate_acc = canonical(s.immediate_acc);
    s.wall_seconds = canonical(s.wall_seconds);
    for (double& v : s.finetuned_acc) v = canonical(v);
  }
  return c;
}

std::vector<ReportRow> report_rows(const std::vector<RunReport>& reports) {
  std::vector<ReportRow> rows;
  for (const RunReport& rep : reports) {
    for (const SeedRecord& r : rep.records) {
      auto add = [&](std::size_t epoch, const char* metric, double v) {
        rows.push_back({rep.experiment, rep.method, r.seed, epoch, metric, canonical(v)});
      };
      add(0, "ensemble_acc", r.ensemble_acc);
      add(0, "best_member_acc", r.best_member_acc);
      add(0, "immediate_acc", r.immediate_acc);
      add(0, "best_finetuned_acc", r.best_finetuned());
      add(0, "peak_bytes", static_cast<double>(r.peak_bytes));
      if (r.wall_seconds != 0.0) add(0, "wall_seconds", r.wall_seconds);
      for (std::size_t e = 0; e < r.finetuned_acc.size(); ++e) add(e + 1, "finetuned_acc", r.finetuned_acc[e]);
    }
  }
  return rows;
}

std::vector<RunReport> reports_from_rows(const std::vector<ReportRow>& rows) {
  std::vector<RunReport> reports;
  std::map<std::pair<std::string, std::string>, std::size_t> by_method;
  std::map<std::tuple<std::size_t, std::uint64_t>, std::size_t> by_seed;
  for (const ReportRow& row : rows) {
    const auto key = std::make_pair(row.experiment, row.method);
    auto it = by_method.find(key);
    if (it == by_method.end()) {
      it = by_method.emplace(key, reports.size()).first;
      reports.push_back({row.experiment, row.method, {}});
    }
    RunReport& rep = reports[it->second];
    auto sit = by_seed.find({it->second, row.seed});
    if (sit == by_seed.end()) {
      sit = by_seed.emplace(std::make_tuple(it->second, row.seed), rep.records.size()).first;
      rep.records.push_back({});
      rep.records.back().seed = row.seed;
    }
    SeedRecord& r = rep.records[sit->second];
    if (row.metric == "ensemble_acc") {
      r.ensemble_acc = row.value;
    } else if (row.metric == "best_member_acc") {
      r.best_member_acc = row.value;
    } else if (row.metric == "immediate_acc") {
      r.immediate_acc = row.value;
    } else if (row.metric == "peak_bytes") {
      r.peak_bytes = static_cast<std::size_t>(row.value);
    } else if (row.metric == "wall_seconds") {
      r.wall_seconds = row.value;
    } else if (row.metric == "finetuned_acc") {
      if (row.epoch == 0) throw Error(ErrorKind::InvalidArg, "finetuned_acc at epoch 0");
      if (r.finetuned_acc.size() < row.epoch) r.finetuned_acc.resize(row.epoch, 0.0);
      r.finetuned_acc[row.epoch - 1] = row.value;
    } else if (row.metric != "best_finetuned_acc") {
      throw Error(ErrorKind::InvalidArg, "unknown report metric '" + row.metric + "'");
    }
  }
  return reports;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

constexpr const char* kCsvHeader = "experiment,method,seed,epoch,metric,value";

}  // namespace

std::string to_csv(const std::vector<ReportRow>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const ReportRow& r : rows) {
    out += csv_field(r.experiment) + ',' + csv_field(r.method) + ',' + std::to_string(r.seed) + ',' +
           std::to_string(r.epoch) + ',' + csv_field(r.metric) + ',' + format_value(r.value) + '\n';
  }
  return out;
}

std::vector<ReportRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw Error(ErrorKind::InvalidArg, "report CSV header must be '" + std::string(kCsvHeader) + "'");
  }
  std::vector<ReportRow> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw Error(ErrorKind::InvalidArg, "report CSV line " + std::to_string(n) + " needs 6 fields");
    ReportRow r;
    r.experiment = f[0];
    r.method = f[1];
    r.seed = std::stoull(f[2]);
    r.epoch = std::stoull(f[3]);
    r.metric = f[4];
    r.value = std::strtod(f[5].c_str(), nullptr);
    rows.push_back(std::move(r));
  }
  return rows;
}

json aggregate_json(const Aggregate& a) {
  auto stat = [](const Stat& s) { return json{{"mean", canonical(s.mean)}, {"std", canonical(s.std)}}; };
  json curve = json::array();
  for (const Stat& s : a.finetuned_acc) curve.push_back(stat(s));
  return {{"ensemble_acc", stat(a.ensemble_acc)},
          {"best_member_acc", stat(a.best_member_acc)},
          {"immediate_acc", stat(a.immediate_acc)},
          {"best_finetuned_acc", stat(a.best_finetuned_acc)},
          {"wall_seconds", stat(a.wall_seconds)},
          {"peak_bytes", stat(a.peak_bytes)},
          {"finetuned_acc", curve}};
}

json to_json(const std::vector<RunReport>& reports) {
  json out = json::array();
  for (const RunReport& raw : reports) {
    const RunReport rep = canonical_report(raw);
    json records = json::array();
    for (const SeedRecord& r : rep.records) {
      json rec = {{"seed", r.seed},
                  {"ensemble_acc", r.ensemble_acc},
                  {"best_member_acc", r.best_member_acc},
                  {"immediate_acc", r.immediate_acc},
                  {"best_finetuned_acc", r.best_finetuned()},
                  {"finetuned_acc", r.finetuned_acc},
                  {"peak_bytes", r.peak_bytes}};
      if (r.wall_seconds != 0.0) rec["wall_seconds"] = r.wall_seconds;
      records.push_back(rec);
    }
    out.push_back({{"experiment", rep.experiment},
                   {"method", rep.method},
                   {"records", records},
                   {"aggregate", aggregate_json(rep.aggregate())}});
  }
  return {{"reports", out}};
}

std::string accuracy_svg(const std::vector<RunReport>& reports, const std::string& title) {
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                            "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::vector<std::pair<std::string, std::vector<double>>> series;
  std::size_t epochs = 0;
  double lo = 1.0, hi = 0.0;
  for (const RunReport& rep : reports) {
    std::vector<double> ys;
    for (const Stat& s : rep.aggregate().finetuned_acc) ys.push_back(s.mean);
    if (ys.empty()) continue;
    epochs = std::max(epochs, ys.size());
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    series.emplace_back(rep.method, std::move(ys));
  }
  if (series.empty()) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-6) {
    lo -= 0.005;
    hi += 0.005;
  }
  auto px = [&](std::size_t e) {
    return epochs <= 1 ? L : L + (W - L - R) * static_cast<double>(e - 1) / static_cast<double>(epochs - 1);
  };
  auto py = [&](double y) { return T + (H - T - B) * (hi - y) / (hi - lo); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };
  auto esc = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '<') o += "&lt;";
      else if (c == '>') o += "&gt;";
      else if (c == '&') o += "&amp;";
      else o += c;
    }
    return o;
  };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(W / 2) << "\" y=\"20\" text-anchor=\"middle\">" << esc(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << num((L + W - R) / 2) << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\">fine-tuning epoch</text>\n";
  os << "<text x=\"16\" y=\"" << num((T + H - B) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << num((T + H - B) / 2) << ")\">test accuracy</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = lo + (hi - lo) * i / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << num(py(y) + 4) << "\" text-anchor=\"end\">" << num(100 * y)
       << "</text>\n";
  }
  for (std::size_t e = 1; e <= epochs; ++e) {
    if (epochs > 10 && e % ((epochs + 9) / 10) != 0 && e != 1) continue;
    os << "<text x=\"" << num(px(e)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << e
       << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    os << "<polyline class=\"series\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    const auto& ys = series[i].second;
    for (std::size_t e = 0; e < ys.size(); ++e) {
      os << (e ? " " : "") << num(px(e + 1)) << ',' << num(py(ys[e]));
    }
    os << "\"/>\n";
    const double ly = T + 16.0 * static_cast<double>(i);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << num(ly) << "\" x2=\"" << W - R + 30 << "\" y2=\""
       << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 34 << "\" y=\"" << num(ly + 4) << "\">" << esc(series[i].first)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

ReportFormat report_format_from_string(std::string_view s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "json") return ReportFormat::Json;
  if (s == "svg") return ReportFormat::Svg;
  throw Error(ErrorKind::InvalidArg, "unknown report format '" + std::string(s) + "'");
}

std::string render(const std::vector<RunReport>& raw, ReportFormat f) {
  std::vector<RunReport> reports;
  for (const auto& r : raw) reports.push_back(canonical_report(r));
  switch (f) {
    case ReportFormat::Csv: return to_csv(report_rows(reports));
    case ReportFormat::Json: return to_json(reports).dump(2) + "\n";
    case ReportFormat::Svg:
      return accuracy_svg(reports, reports.empty() ? std::string("report") : reports.front().experiment);
  }
  throw Error(ErrorKind::InvalidArg, "unknown report format");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

void emit_report(const std::vector<RunReport>& reports, const std::filesystem::path& dir) {
  if (reports.empty()) throw Error(ErrorKind::InvalidArg, "no reports to emit");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "report.csv", render(reports, ReportFormat::Csv));
  write_text(dir / "report.json", render(reports, ReportFormat::Json));
  write_text(dir / "accuracy.svg", render(reports, ReportFormat::Svg));
}

std::vector<RunReport> read_report_dir(const std::filesystem::path& dir) {
  return reports_from_rows(parse_csv(read_text(dir / "report.csv")));
}

}  // namespace nt
