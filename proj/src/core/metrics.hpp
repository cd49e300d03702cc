#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace catf {

using Record = nlohmann::ordered_json;

// Append-only JSON-lines writer; one complete record per line.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, std::uint64_t seed, bool truncate);

  // Adds wall_ms and seed, checks every number is finite, writes one line.
  void write(Record r);
  Record make(const std::string& event) const;

 private:
  std::ofstream out_;
  std::string path_;
  std::uint64_t seed_;
  std::chrono::steady_clock::time_point start_;
};

// Parses one metrics line; throws MetricsError naming `where` on bad input.
Record parse_record(const std::string& line, const std::string& where);
std::vector<Record> read_metrics(const std::string& path);

struct ReportRow {
  std::size_t num_tasks = 0;
  double overall_acc = 0.0;
  double routing_acc = 0.0;
  double oracle_acc = 0.0;
  std::size_t bank_bytes = 0;
  std::size_t runs = 0;

  bool operator==(const ReportRow&) const = default;
};

// One row per num_tasks setting over every eval summary record, averaged
// over runs, sorted ascending.
std::vector<ReportRow> build_report(const std::vector<std::string>& paths);
std::string write_report_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_report_csv(const std::string& text);

}  // namespace catf
