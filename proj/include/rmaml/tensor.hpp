#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rmaml {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform for a primitive.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b, std::string_view detail = {});
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised for misuse of the differentiation API (untracked inputs, mixed graphs, ...).
class GradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Graph;

/**
 * Dense float64 array in row-major order.
 *
 * Storage is shared and immutable, so copies are cheap and untracked tensors
 * can be handed across threads freely. A tracked tensor additionally carries
 * a handle to the node that produced it inside a Graph.
 */
class Tensor {
 public:
  /// Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> data() const noexcept { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t i) const { return data_->at(i); }
  /// Value of a single-element tensor.
  double item() const;

  bool tracked() const noexcept { return graph_ != nullptr; }
  /// Same values, no graph node.
  Tensor detach() const;

  const std::shared_ptr<Graph>& graph() const noexcept { return graph_; }
  std::size_t node() const noexcept { return node_; }

  /// Attaches a node handle to this value; used by Graph.
  Tensor with_node(std::shared_ptr<Graph> graph, std::size_t node) const;
  /// Same storage viewed under a different shape of equal element count.
  Tensor view_as(Shape shape) const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::shared_ptr<Graph> graph_;
  std::size_t node_ = 0;
};

/// True when shapes match and every element has an identical bit pattern.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace rmaml
