#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "rmaml/tensor.hpp"

namespace rmaml {

/// Vector-Jacobian product of one primitive. Receives the upstream gradient and
/// the primitive's inputs (tracked when they were tracked at record time) and
/// returns one gradient per input, expressed with ordinary tensor ops so that
/// the result is itself differentiable when recorded.
using VjpFn = std::function<std::vector<Tensor>(const Tensor& grad_out, std::span<const Tensor> inputs)>;

struct GradNode {
  std::string_view op;
  Shape shape;
  std::vector<std::optional<std::size_t>> parents;
  std::vector<Tensor> inputs;  // untracked values
  VjpFn vjp;                   // empty for leaves
};

/**
 * Append-only tape of primitive applications.
 *
 * Parents always precede children, so node indices are a topological order.
 * A graph and its tracked tensors belong to one thread.
 */
class Graph : public std::enable_shared_from_this<Graph> {
 public:
  static std::shared_ptr<Graph> create();

  /// Registers `value` as a leaf and returns the tracked handle.
  Tensor track(const Tensor& value);

  std::size_t size() const noexcept { return nodes_.size(); }
  const GradNode& node(std::size_t i) const { return nodes_.at(i); }

  std::size_t append(GradNode node);

 private:
  Graph() = default;
  std::vector<GradNode> nodes_;
};

/// Whether newly computed tensors are recorded on the current thread.
bool grad_enabled() noexcept;

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Records `result` as the output of primitive `op` applied to `inputs` when
/// recording is on and at least one input is tracked; otherwise returns it unchanged.
Tensor record(std::string_view op, Tensor result, std::vector<Tensor> inputs, VjpFn vjp);

/**
 * Reverse-mode gradient of a scalar `output` with respect to `inputs`.
 *
 * With `create_graph` the backward pass is itself recorded and the returned
 * gradients are tracked, so they can be differentiated again. Inputs that do
 * not influence the output receive zeros.
 */
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs, bool create_graph = false);

inline Tensor grad(const Tensor& output, const Tensor& input, bool create_graph = false) {
  return grad(output, std::span<const Tensor>(&input, 1), create_graph)[0];
}

}  // namespace rmaml
