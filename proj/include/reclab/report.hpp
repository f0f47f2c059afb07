#pragma once

#include <string>
#include <vector>

#include "reclab/experiments.hpp"

namespace reclab {

/// Median of a non-empty list (mean of the two middle values for even sizes).
/// DataError on an empty list.
Real median(std::vector<Real> v);

struct MetricStats {
  std::string kind;
  std::string name;
  std::size_t n = 0;
  Real median = 0;
  Real min = 0;
  Real max = 0;
};

struct PropertyResult {
  std::string kind;
  Property property;
  bool evaluated = false;  // false when a referenced metric is absent
  bool pass = false;
  Real lhs = 0;
  Real rhs = 0;            // factor already applied
  std::string note;
};

PropertyResult evaluate_property(const RunSummary& s, const Property& p);

struct Report {
  std::vector<std::string> missing;     // kinds with no completed summary
  std::vector<std::string> incomplete;  // kinds with a staging directory left behind
  std::vector<MetricStats> metrics;
  std::vector<PropertyResult> properties;

  bool gating_pass() const;
};

/// Aggregates <dir>/<kind>/summary.json for every experiment kind. A missing
/// or unreadable directory yields a report with every kind missing.
Report build_report(const std::string& dir);

std::string report_json(const Report& r);
std::string report_table(const Report& r);

}  // namespace reclab
