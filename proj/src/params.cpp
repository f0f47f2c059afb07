#include "reclab/params.hpp"

#include <cmath>
#include <cstring>

#include "reclab/errors.hpp"

namespace reclab {

ParamVector::ParamVector(const Schema& schema) {
  for (const auto& [name, shape] : schema) add(name, Tensor(shape));
}

void ParamVector::add(std::string name, Tensor value) {
  if (contains(name)) throw SchemaError("duplicate segment '" + name + "'");
  index_.emplace(name, segments_.size());
  segments_.emplace_back(std::move(name), std::move(value));
}

const Tensor& ParamVector::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw SchemaError("no segment named '" + name + "'");
  return segments_[it->second].second;
}

Tensor& ParamVector::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw SchemaError("no segment named '" + name + "'");
  return segments_[it->second].second;
}

std::size_t ParamVector::numel() const {
  std::size_t n = 0;
  for (const auto& s : segments_) n += s.second.size();
  return n;
}

Schema ParamVector::schema() const {
  Schema out;
  out.reserve(segments_.size());
  for (const auto& [name, t] : segments_) out.emplace_back(name, t.shape());
  return out;
}

std::string ParamVector::first_mismatch(const ParamVector& other) const {
  const std::size_t n = std::min(segments_.size(), other.segments_.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (segments_[i].first != other.segments_[i].first) return segments_[i].first;
    if (segments_[i].second.shape() != other.segments_[i].second.shape()) return segments_[i].first;
  }
  if (segments_.size() > n) return segments_[n].first;
  if (other.segments_.size() > n) return other.segments_[n].first;
  return {};
}

bool ParamVector::same_schema(const ParamVector& other) const {
  return segments_.size() == other.segments_.size() && first_mismatch(other).empty();
}

std::vector<Real> ParamVector::flatten() const {
  std::vector<Real> flat;
  flat.reserve(numel());
  for (const auto& s : segments_) flat.insert(flat.end(), s.second.values().begin(), s.second.values().end());
  return flat;
}

ParamVector ParamVector::unflatten(const Schema& schema, std::span<const Real> flat) {
  ParamVector out;
  std::size_t offset = 0;
  for (const auto& [name, shape] : schema) {
    const std::size_t n = shape_size(shape);
    if (offset + n > flat.size()) throw SchemaError("unflatten: flat vector too short at segment '" + name + "'");
    out.add(name, Tensor(shape, std::vector<Real>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                                  flat.begin() + static_cast<std::ptrdiff_t>(offset + n))));
    offset += n;
  }
  if (offset != flat.size()) throw SchemaError("unflatten: " + std::to_string(flat.size() - offset) + " trailing values");
  return out;
}

bool bitwise_equal(const ParamVector& a, const ParamVector& b) {
  if (!a.same_schema(b)) return false;
  for (std::size_t i = 0; i < a.segment_count(); ++i) {
    if (!bitwise_equal(a.tensor(i), b.tensor(i))) return false;
  }
  return true;
}

namespace {

void require_schema(const ParamVector& a, const ParamVector& b, const char* op) {
  if (!a.same_schema(b)) throw SchemaError(std::string(op) + ": schema mismatch at segment '" + a.first_mismatch(b) + "'");
}

template <typename F>
ParamVector zip(const ParamVector& a, const ParamVector& b, const char* op, F f) {
  require_schema(a, b, op);
  ParamVector out = a;
  for (std::size_t i = 0; i < out.segment_count(); ++i) {
    auto dst = out.tensor(i).values();
    auto src = b.tensor(i).values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = f(dst[j], src[j]);
  }
  return out;
}

}  // namespace

ParamVector operator+(const ParamVector& a, const ParamVector& b) {
  return zip(a, b, "add", [](Real x, Real y) { return x + y; });
}

ParamVector operator-(const ParamVector& a, const ParamVector& b) {
  return zip(a, b, "subtract", [](Real x, Real y) { return x - y; });
}

ParamVector operator*(Real s, const ParamVector& a) {
  ParamVector out = a;
  for (std::size_t i = 0; i < out.segment_count(); ++i) {
    for (auto& v : out.tensor(i).values()) v *= s;
  }
  return out;
}

Real l2_norm(const ParamVector& a) {
  Real s = 0;
  for (const auto& seg : a.segments()) {
    for (Real v : seg.second.values()) s += v * v;
  }
  return std::sqrt(s);
}

Real l2_distance(const ParamVector& a, const ParamVector& b) {
  require_schema(a, b, "distance");
  Real s = 0;
  for (std::size_t i = 0; i < a.segment_count(); ++i) {
    auto x = a.tensor(i).values();
    auto y = b.tensor(i).values();
    for (std::size_t j = 0; j < x.size(); ++j) s += (x[j] - y[j]) * (x[j] - y[j]);
  }
  return std::sqrt(s);
}

}  // namespace reclab
