#include "ddaunet/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "ddaunet/errors.hpp"

namespace ddaunet {

namespace {

constexpr const char* kCsvHeader = "scan_id,split,tags,dsc,crd,cad,msd,hd95,flags";

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split_string(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

MetricStats stats_of(const std::vector<double>& values) {
  MetricStats s;
  s.n = static_cast<int64_t>(values.size());
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

ReportRow aggregate(const std::string& label, const std::vector<const ScanRecord*>& records) {
  ReportRow row;
  row.label = label;
  row.n_scans = static_cast<int64_t>(records.size());
  std::vector<double> dsc, crd, cad, msd, hd95;
  for (const ScanRecord* r : records) {
    dsc.push_back(r->metrics.dsc);
    if (r->metrics.distance_degenerate) {
      ++row.n_degenerate;
      continue;
    }
    crd.push_back(r->metrics.crd);
    cad.push_back(r->metrics.cad);
    msd.push_back(r->metrics.msd);
    hd95.push_back(r->metrics.hd95);
  }
  row.dsc = stats_of(dsc);
  row.crd = stats_of(crd);
  row.cad = stats_of(cad);
  row.msd = stats_of(msd);
  row.hd95 = stats_of(hd95);
  return row;
}

nlohmann::json stats_json(const MetricStats& s) {
  return {{"n", s.n}, {"mean", s.mean}, {"std", s.stddev}};
}

nlohmann::json row_json(const ReportRow& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["n_scans"] = r.n_scans;
  j["n_degenerate"] = r.n_degenerate;
  j["dsc"] = stats_json(r.dsc);
  j["crd_mm"] = stats_json(r.crd);
  j["cad_mm"] = stats_json(r.cad);
  j["msd_mm"] = stats_json(r.msd);
  j["hd95_mm"] = stats_json(r.hd95);
  return j;
}

}  // namespace

void save_metrics_csv(const std::vector<ScanRecord>& records,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics csv " + path.string());
  out << kCsvHeader << "\n";
  char buf[256];
  for (const ScanRecord& r : records) {
    std::string flags;
    if (r.metrics.distance_degenerate) flags = "degenerate";
    if (r.metrics.both_empty) flags += ";both_empty";
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g,%.9g", r.metrics.dsc, r.metrics.crd,
                  r.metrics.cad, r.metrics.msd, r.metrics.hd95);
    out << r.scan_id << "," << r.split << "," << join(r.tags, ';') << "," << buf << "," << flags
        << "\n";
  }
}

std::vector<ScanRecord> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics csv " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + ": empty metrics csv");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw SchemaError(path.string() + ": unexpected csv header '" + line + "'");
  std::vector<ScanRecord> records;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols = split_string(line, ',');
    if (cols.size() != 9)
      throw SchemaError(path.string() + ": expected 9 columns, got " +
                        std::to_string(cols.size()));
    ScanRecord r;
    r.scan_id = cols[0];
    r.split = cols[1];
    if (!cols[2].empty()) r.tags = split_string(cols[2], ';');
    try {
      r.metrics.dsc = std::stod(cols[3]);
      r.metrics.crd = std::stod(cols[4]);
      r.metrics.cad = std::stod(cols[5]);
      r.metrics.msd = std::stod(cols[6]);
      r.metrics.hd95 = std::stod(cols[7]);
    } catch (const std::exception&) {
      throw SchemaError(path.string() + ": non-numeric metric value in '" + line + "'");
    }
    for (const std::string& f : split_string(cols[8], ';')) {
      if (f == "degenerate") r.metrics.distance_degenerate = true;
      if (f == "both_empty") r.metrics.both_empty = true;
    }
    records.push_back(std::move(r));
  }
  return records;
}

Report run_report(const std::vector<std::vector<ScanRecord>>& split_records) {
  if (split_records.empty()) throw ParameterError("report needs at least one metrics set");
  Report report;
  std::vector<const ScanRecord*> pooled;
  for (size_t s = 0; s < split_records.size(); ++s) {
    std::vector<const ScanRecord*> rows;
    for (const ScanRecord& r : split_records[s]) {
      rows.push_back(&r);
      pooled.push_back(&r);
    }
    report.per_split.push_back(aggregate(std::to_string(s + 1), rows));
  }
  report.pooled = aggregate("Mean", pooled);

  std::set<std::string> tags;
  for (const ScanRecord* r : pooled) tags.insert(r->tags.begin(), r->tags.end());
  for (const std::string& tag : tags) {
    std::vector<const ScanRecord*> with, without;
    for (const ScanRecord* r : pooled)
      (std::count(r->tags.begin(), r->tags.end(), tag) ? with : without).push_back(r);
    TagGroup g;
    g.tag = tag;
    g.present = aggregate("+(" + std::to_string(with.size()) + ")", with);
    g.absent = aggregate("-(" + std::to_string(without.size()) + ")", without);
    report.per_tag.push_back(std::move(g));
  }
  return report;
}

std::string report_text(const Report& report) {
  std::ostringstream os;
  auto fmt = [](const MetricStats& s) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%6.3f +/- %6.3f", s.mean, s.stddev);
    return std::string(buf);
  };
  auto row = [&](const ReportRow& r) {
    os << "  " << r.label;
    for (size_t i = r.label.size(); i < 8; ++i) os << ' ';
    os << " n=" << r.n_scans;
    if (r.n_degenerate) os << " (degenerate: " << r.n_degenerate << ")";
    os << "\n    DSC  " << fmt(r.dsc) << "\n    CrD  " << fmt(r.crd) << " mm\n    CaD  "
       << fmt(r.cad) << " mm\n    MSD  " << fmt(r.msd) << " mm\n    HD95 " << fmt(r.hd95)
       << " mm\n";
  };
  os << "Per-split results (threshold 0.5, largest component):\n";
  for (const ReportRow& r : report.per_split) row(r);
  os << "Pooled:\n";
  row(report.pooled);
  if (!report.per_tag.empty()) {
    os << "Per-tag breakdown (pooled):\n";
    for (const TagGroup& g : report.per_tag) {
      os << " [" << g.tag << "]\n";
      row(g.present);
      row(g.absent);
    }
  }
  return os.str();
}

std::string report_json(const Report& report) {
  nlohmann::json j;
  j["per_split"] = nlohmann::json::array();
  for (const ReportRow& r : report.per_split) j["per_split"].push_back(row_json(r));
  j["pooled"] = row_json(report.pooled);
  j["per_tag"] = nlohmann::json::array();
  for (const TagGroup& g : report.per_tag) {
    nlohmann::json e;
    e["tag"] = g.tag;
    e["present"] = row_json(g.present);
    e["absent"] = row_json(g.absent);
    j["per_tag"].push_back(e);
  }
  return j.dump(2);
}

}  // namespace ddaunet
