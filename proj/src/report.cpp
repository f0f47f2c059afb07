#include "reclab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "reclab/errors.hpp"

namespace reclab {

namespace fs = std::filesystem;
using json = nlohmann::json;

Real median(std::vector<Real> v) {
  if (v.empty()) throw DataError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

PropertyResult evaluate_property(const RunSummary& s, const Property& p) {
  PropertyResult r{s.kind, p, false, false, 0, 0, ""};
  const Metric* lhs = s.find(p.lhs);
  if (lhs == nullptr || lhs->values.empty()) {
    r.note = "metric '" + p.lhs + "' missing";
    return r;
  }
  r.lhs = median(lhs->values);
  if (p.rhs.empty()) {
    r.rhs = p.rhs_value;
  } else {
    const Metric* rhs = s.find(p.rhs);
    if (rhs == nullptr || rhs->values.empty()) {
      r.note = "metric '" + p.rhs + "' missing";
      return r;
    }
    r.rhs = p.factor * median(rhs->values);
  }
  r.evaluated = true;
  if (p.relation == "<") r.pass = r.lhs < r.rhs;
  else if (p.relation == "<=") r.pass = r.lhs <= r.rhs;
  else if (p.relation == ">") r.pass = r.lhs > r.rhs;
  else if (p.relation == ">=") r.pass = r.lhs >= r.rhs;
  else {
    r.evaluated = false;
    r.note = "unknown relation '" + p.relation + "'";
  }
  return r;
}

bool Report::gating_pass() const {
  if (!missing.empty()) return false;
  for (const auto& p : properties) {
    if (p.property.gating && !p.pass) return false;
  }
  return true;
}

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string num(Real v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", static_cast<double>(v));
  return buf;
}

}  // namespace

Report build_report(const std::string& dir) {
  Report r;
  for (ExperimentKind k : all_kinds()) {
    const std::string name = kind_name(k);
    const fs::path base = fs::path(dir) / name;
    std::error_code ec;
    if (fs::exists(fs::path(dir) / (name + ".incomplete"), ec)) r.incomplete.push_back(name);
    if (!fs::exists(base / "summary.json", ec)) {
      r.missing.push_back(name);
      continue;
    }
    RunSummary s;
    try {
      const std::string timing = fs::exists(base / "timing.json", ec) ? slurp(base / "timing.json") : "";
      s = parse_summary(slurp(base / "summary.json"), timing);
    } catch (const Error&) {
      r.missing.push_back(name);
      continue;
    }
    for (const auto* list : {&s.metrics, &s.timings}) {
      for (const auto& m : *list) {
        if (m.values.empty()) continue;
        r.metrics.push_back(MetricStats{name, m.name, m.values.size(), median(m.values),
                                        *std::min_element(m.values.begin(), m.values.end()),
                                        *std::max_element(m.values.begin(), m.values.end())});
      }
    }
    for (const auto& p : s.properties) r.properties.push_back(evaluate_property(s, p));
  }
  return r;
}

std::string report_json(const Report& r) {
  json metrics = json::array();
  for (const auto& m : r.metrics) {
    metrics.push_back({{"kind", m.kind}, {"name", m.name}, {"n", m.n}, {"median", m.median}, {"min", m.min}, {"max", m.max}});
  }
  json props = json::array();
  for (const auto& p : r.properties) {
    props.push_back({{"kind", p.kind},
                     {"name", p.property.name},
                     {"gating", p.property.gating},
                     {"evaluated", p.evaluated},
                     {"pass", p.pass},
                     {"lhs", p.lhs},
                     {"relation", p.property.relation},
                     {"rhs", p.rhs},
                     {"note", p.note}});
  }
  const json j = {{"missing", r.missing}, {"incomplete", r.incomplete}, {"metrics", metrics}, {"properties", props},
                  {"gating_pass", r.gating_pass()}};
  return j.dump(2) + "\n";
}

std::string report_table(const Report& r) {
  std::string out = "properties\n";
  for (const auto& p : r.properties) {
    const char* status = !p.evaluated ? "n/a " : p.pass ? "PASS" : "FAIL";
    out += std::string("  ") + status + (p.property.gating ? "  " : "* ") + p.kind + ": " + p.property.name + "  (" +
           num(p.lhs) + " " + p.property.relation + " " + num(p.rhs) + ")" + (p.note.empty() ? "" : "  " + p.note) + "\n";
  }
  out += "  (* non-gating)\nmetrics: median [min, max] over n\n";
  for (const auto& m : r.metrics) {
    out += "  " + m.kind + ": " + m.name + " = " + num(m.median) + " [" + num(m.min) + ", " + num(m.max) + "] n=" +
           std::to_string(m.n) + "\n";
  }
  for (const auto& k : r.missing) out += "missing: " + k + "\n";
  for (const auto& k : r.incomplete) out += "incomplete: " + k + "\n";
  return out;
}

}  // namespace reclab
