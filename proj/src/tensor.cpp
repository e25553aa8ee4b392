#include "rmaml/tensor.hpp"

#include <bit>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>

namespace rmaml {

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {
std::string shape_message(std::string_view op, const Shape& a, const Shape& b, std::string_view detail) {
  std::ostringstream out;
  out << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  if (!detail.empty()) out << " (" << detail << ')';
  return out.str();
}
}  // namespace

ShapeError::ShapeError(std::string_view op, const Shape& a, const Shape& b, std::string_view detail)
    : std::invalid_argument(shape_message(op, a, b, detail)) {}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto extent : shape_) {
    if (extent == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
  }
  if (numel_of(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", shape_, {}, "expected a single element");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.graph_.reset();
  out.node_ = 0;
  return out;
}

Tensor Tensor::with_node(std::shared_ptr<Graph> graph, std::size_t node) const {
  Tensor out = *this;
  out.graph_ = std::move(graph);
  out.node_ = node;
  return out;
}

Tensor Tensor::view_as(Shape shape) const {
  if (numel_of(shape) != numel()) throw ShapeError("view", shape_, shape, "element count differs");
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(x[i]) != std::bit_cast<std::uint64_t>(y[i])) return false;
  }
  return true;
}

}  // namespace rmaml
