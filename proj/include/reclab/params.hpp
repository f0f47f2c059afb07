#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reclab/tensor.hpp"

namespace reclab {

/// Ordered (name, shape) list describing a parameter set.
using Schema = std::vector<std::pair<std::string, Shape>>;

/// Named, ordered collection of tensors. Order is insertion order and is part
/// of the schema; flatten concatenates segments in that order.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(const Schema& schema);  // zeros

  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  std::size_t segment_count() const noexcept { return segments_.size(); }
  const std::string& name(std::size_t i) const { return segments_[i].first; }
  const Tensor& tensor(std::size_t i) const { return segments_[i].second; }
  Tensor& tensor(std::size_t i) { return segments_[i].second; }
  const std::vector<std::pair<std::string, Tensor>>& segments() const noexcept { return segments_; }

  std::size_t numel() const;
  Schema schema() const;
  bool same_schema(const ParamVector& other) const;
  /// Name of the first segment whose name or shape differs, empty when equal.
  std::string first_mismatch(const ParamVector& other) const;

  std::vector<Real> flatten() const;
  static ParamVector unflatten(const Schema& schema, std::span<const Real> flat);

  bool operator==(const ParamVector& other) const { return segments_ == other.segments_; }

 private:
  std::vector<std::pair<std::string, Tensor>> segments_;
  std::map<std::string, std::size_t> index_;
};

/// True when every segment matches bit for bit.
bool bitwise_equal(const ParamVector& a, const ParamVector& b);

// Elementwise algebra; schemas must match (SchemaError otherwise).
ParamVector operator+(const ParamVector& a, const ParamVector& b);
ParamVector operator-(const ParamVector& a, const ParamVector& b);
ParamVector operator*(Real s, const ParamVector& a);

Real l2_norm(const ParamVector& a);
Real l2_distance(const ParamVector& a, const ParamVector& b);

}  // namespace reclab
