#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rmaml/tensor.hpp"

namespace rmaml {

class Graph;

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Ordered, uniquely named parameter tensors (the meta-model's weights).
class ParamSet {
 public:
  ParamSet() = default;

  void add(std::string name, Tensor value);

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const NamedTensor& operator[](std::size_t i) const { return entries_.at(i); }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  const Tensor* find(std::string_view name) const;

  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  std::vector<Tensor> values() const;
  /// Same names and order with new values (shapes must match).
  ParamSet with_values(std::span<const Tensor> values) const;
  ParamSet detached() const;
  /// Each value registered as a leaf of `graph`.
  ParamSet tracked(Graph& graph) const;

  std::size_t total_size() const;
  std::vector<double> flatten() const;
  /// Inverse of flatten(); the length must equal total_size().
  ParamSet unflatten(std::span<const double> flat) const;

 private:
  std::vector<NamedTensor> entries_;
};

bool bit_equal(const ParamSet& a, const ParamSet& b);

/**
 * Flat little-endian float64 blob plus a JSON sidecar describing each tensor:
 *
 *   <stem>.bin   concatenated values
 *   <stem>.json  {"format":"f64le","tensors":[{"name":..,"shape":[..],"offset":<byte offset>}],
 *                 "attributes":{...}}
 */
void save_tensors(const std::filesystem::path& stem, std::span<const NamedTensor> tensors,
                  const std::string& attributes_json = "{}");
std::vector<NamedTensor> load_tensors(const std::filesystem::path& stem, std::string* attributes_json = nullptr);

void save_params(const std::filesystem::path& stem, const ParamSet& params);
ParamSet load_params(const std::filesystem::path& stem);

}  // namespace rmaml
