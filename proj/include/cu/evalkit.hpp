#pragma once

// Canonical interval metrics: IoU, R@1 at IoU thresholds (strict inequality),
// mIoU, and report emission in table or machine-readable record form.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cu/dataio.hpp"

namespace cu {

inline double iou(const Interval& a, const Interval& b) {
  double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter < 0.0) inter = 0.0;
  double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct EvalReport {
  std::string tag;
  std::vector<double> thresholds;  // e.g. {0.3, 0.5, 0.7}
  std::vector<double> recall_at;   // percent, parallel to thresholds
  double miou = 0.0;               // percent
  int n = 0;
};

inline EvalReport evaluate(const std::map<std::string, Interval>& preds,
                           const std::map<std::string, Interval>& gts,
                           std::vector<double> thresholds = {0.3, 0.5, 0.7},
                           std::string tag = "run") {
  if (preds.empty()) throw std::invalid_argument("evaluate: empty prediction set");
  for (double m : thresholds)
    if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("evaluate: thresholds must be in (0,1)");
  EvalReport r;
  r.tag = std::move(tag);
  r.thresholds = std::move(thresholds);
  r.recall_at.assign(r.thresholds.size(), 0.0);
  double sum = 0.0;
  for (const auto& [id, p] : preds) {
    auto it = gts.find(id);
    if (it == gts.end()) throw std::invalid_argument("evaluate: no ground truth for id " + id);
    double v = iou(p, it->second);
    sum += v;
    for (size_t k = 0; k < r.thresholds.size(); ++k)
      if (v > r.thresholds[k]) r.recall_at[k] += 1.0;  // strictly greater
  }
  r.n = static_cast<int>(preds.size());
  for (double& x : r.recall_at) x = 100.0 * x / r.n;
  r.miou = 100.0 * sum / r.n;
  return r;
}

inline std::string render_table(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("render_table: no reports");
  std::ostringstream os;
  os << std::left << std::setw(24) << "tag";
  for (double m : reports[0].thresholds) {
    std::ostringstream h;
    h << "R@" << m;
    os << std::right << std::setw(10) << h.str();
  }
  os << std::right << std::setw(10) << "mIoU" << "\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    os << std::left << std::setw(24) << r.tag;
    for (double v : r.recall_at) os << std::right << std::setw(10) << v;
    os << std::right << std::setw(10) << r.miou << "\n";
  }
  return os.str();
}

inline std::string render_records(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("render_records: no reports");
  std::ostringstream os;
  os << "cu-eval/1\n";
  os.precision(17);
  for (const auto& r : reports) {
    for (size_t k = 0; k < r.thresholds.size(); ++k)
      os << r.tag << " " << r.thresholds[k] << " " << r.recall_at[k] << "\n";
    os << r.tag << " miou " << r.miou << "\n";
  }
  return os.str();
}

inline void emit_report(const std::vector<EvalReport>& reports, const std::string& format,
                        const std::filesystem::path& path) {
  std::string body;
  if (format == "table") body = render_table(reports);
  else if (format == "records") body = render_records(reports);
  else throw std::invalid_argument("emit_report: format must be 'table' or 'records'");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report: " + path.string());
  f << body;
}

// Parse the records format back; used by round-trip checks and the resume logic.
inline std::vector<EvalReport> parse_records(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "cu-eval/1")
    throw std::runtime_error("bad eval-records header");
  std::vector<EvalReport> out;
  auto find = [&](const std::string& tag) -> EvalReport& {
    for (auto& r : out)
      if (r.tag == tag) return r;
    out.push_back(EvalReport{tag, {}, {}, 0.0, 0});
    return out.back();
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string tag, key;
    double value;
    if (!(is >> tag >> key >> value)) throw std::runtime_error("malformed eval record: " + line);
    EvalReport& r = find(tag);
    if (key == "miou") {
      r.miou = value;
    } else {
      r.thresholds.push_back(std::stod(key));
      r.recall_at.push_back(value);
    }
  }
  return out;
}

}  // namespace cu
