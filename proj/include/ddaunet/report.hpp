#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ddaunet/metrics.hpp"

namespace ddaunet {

struct ScanRecord {
  std::string scan_id;
  std::string split;  // train | val | test
  std::vector<std::string> tags;
  SegmentationMetrics metrics;
};

// CSV schema: scan_id,split,tags,dsc,crd,cad,msd,hd95,flags
// (tags ';'-joined; flags empty, "degenerate" or "degenerate;both_empty").
void save_metrics_csv(const std::vector<ScanRecord>& records,
                      const std::filesystem::path& path);
std::vector<ScanRecord> load_metrics_csv(const std::filesystem::path& path);

struct MetricStats {
  int64_t n = 0;
  double mean = 0;
  double stddev = 0;  // sample (n-1), 0 when n < 2
};

struct ReportRow {
  std::string label;
  int64_t n_scans = 0;
  int64_t n_degenerate = 0;  // excluded from the distance aggregates
  MetricStats dsc, crd, cad, msd, hd95;
};

struct TagGroup {
  std::string tag;
  ReportRow present, absent;
};

struct Report {
  std::vector<ReportRow> per_split;  // one row per input metrics file
  ReportRow pooled;                  // the "Mean" row
  std::vector<TagGroup> per_tag;
};

// Aggregates one record set per split (typically the three repeatability
// runs): mean +/- std per split plus a pooled row, and per-tag grouped
// statistics over the pooled records.
Report run_report(const std::vector<std::vector<ScanRecord>>& split_records);

std::string report_text(const Report& report);
std::string report_json(const Report& report);

}  // namespace ddaunet
