#include "metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "error.hpp"

namespace catf {

MetricsWriter::MetricsWriter(const std::string& path, std::uint64_t seed, bool truncate)
    : out_(path, truncate ? std::ios::trunc : std::ios::app),
      path_(path),
      seed_(seed),
      start_(std::chrono::steady_clock::now()) {
  if (!out_) throw Error(ErrorCode::kInternal, "cannot open metrics file '" + path + "'");
}

Record MetricsWriter::make(const std::string& event) const {
  Record r;
  r["event"] = event;
  return r;
}

namespace {

void check_finite(const Record& r, const std::string& where) {
  for (const auto& [k, v] : r.items()) {
    if (v.is_number_float() && !std::isfinite(v.get<double>())) {
      throw MetricsError(where + ": field '" + k + "' is not finite");
    }
  }
}

}  // namespace

void MetricsWriter::write(Record r) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - start_)
                      .count();
  r["wall_ms"] = static_cast<std::int64_t>(ms);
  r["seed"] = seed_;
  check_finite(r, path_);
  out_ << r.dump() << '\n';
  out_.flush();
  if (!out_) throw Error(ErrorCode::kInternal, "write to '" + path_ + "' failed");
}

Record parse_record(const std::string& line, const std::string& where) {
  Record r;
  try {
    r = Record::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw MetricsError(where + ": not a JSON record");
  }
  if (!r.is_object()) throw MetricsError(where + ": record is not an object");
  if (!r.contains("event") || !r["event"].is_string()) {
    throw MetricsError(where + ": record has no event field");
  }
  const std::string ev = r["event"];
  if (ev != "epoch" && ev != "task_done" && ev != "gate_done" && ev != "eval") {
    throw MetricsError(where + ": unknown event '" + ev + "'");
  }
  check_finite(r, where);
  return r;
}

std::vector<Record> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot read metrics file '" + path + "'");
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(parse_record(line, path + ":" + std::to_string(lineno)));
  }
  return out;
}

std::vector<ReportRow> build_report(const std::vector<std::string>& paths) {
  if (paths.empty()) throw MetricsError("report needs at least one metrics file");
  std::map<std::size_t, ReportRow> rows;
  for (const std::string& path : paths) {
    std::ifstream in(path);
    if (!in) throw MetricsError("cannot read metrics file '" + path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const std::string where = path + ":" + std::to_string(lineno);
      const Record r = parse_record(line, where);
      if (r["event"] != "eval" || r.value("kind", "") != "summary") continue;
      try {
        const auto n = r.at("num_tasks").get<std::size_t>();
        ReportRow& row = rows[n];
        row.num_tasks = n;
        row.overall_acc += r.at("acc").get<double>();
        row.routing_acc += r.at("routing_acc").get<double>();
        row.oracle_acc += r.at("oracle_acc").get<double>();
        row.bank_bytes = r.at("bank_bytes").get<std::size_t>();
        row.runs += 1;
      } catch (const nlohmann::json::exception&) {
        throw MetricsError(where + ": eval summary is missing a field");
      }
    }
  }
  std::vector<ReportRow> out;
  for (auto& [_, row] : rows) {
    const double n = static_cast<double>(row.runs);
    row.overall_acc /= n;
    row.routing_acc /= n;
    row.oracle_acc /= n;
    out.push_back(row);
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

std::string write_report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "num_tasks,overall_acc,routing_acc,oracle_acc,bank_bytes,runs\n";
  for (const ReportRow& r : rows) {
    out += std::to_string(r.num_tasks) + "," + fmt(r.overall_acc) + "," + fmt(r.routing_acc) + "," +
           fmt(r.oracle_acc) + "," + std::to_string(r.bank_bytes) + "," + std::to_string(r.runs) + "\n";
  }
  return out;
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<ReportRow> rows;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (++lineno == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw MetricsError("report line " + std::to_string(lineno) + ": expected 6 fields");
    ReportRow r;
    auto num = [&](const std::string& s, auto& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) {
        throw MetricsError("report line " + std::to_string(lineno) + ": bad number '" + s + "'");
      }
    };
    num(f[0], r.num_tasks);
    num(f[1], r.overall_acc);
    num(f[2], r.routing_acc);
    num(f[3], r.oracle_acc);
    num(f[4], r.bank_bytes);
    num(f[5], r.runs);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace catf
