#include "rmaml/graph.hpp"

#include <string>

#include "rmaml/ops.hpp"

namespace rmaml {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

std::shared_ptr<Graph> Graph::create() { return std::shared_ptr<Graph>(new Graph()); }

Tensor Graph::track(const Tensor& value) {
  GradNode leaf;
  leaf.op = "leaf";
  leaf.shape = value.shape();
  const auto index = append(std::move(leaf));
  return value.detach().with_node(shared_from_this(), index);
}

std::size_t Graph::append(GradNode node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

Tensor record(std::string_view op, Tensor result, std::vector<Tensor> inputs, VjpFn vjp) {
  if (!g_grad_enabled) return result;
  std::shared_ptr<Graph> graph;
  for (const auto& in : inputs) {
    if (!in.tracked()) continue;
    if (!graph) {
      graph = in.graph();
    } else if (graph != in.graph()) {
      throw GradError(std::string(op) + ": inputs belong to different graphs");
    }
  }
  if (!graph) return result;

  GradNode node;
  node.op = op;
  node.shape = result.shape();
  node.parents.reserve(inputs.size());
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    node.parents.push_back(in.tracked() ? std::optional<std::size_t>(in.node()) : std::nullopt);
    node.inputs.push_back(in.detach());
  }
  node.vjp = std::move(vjp);
  const auto index = graph->append(std::move(node));
  return result.detach().with_node(std::move(graph), index);
}

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs, bool create_graph) {
  if (!output.tracked()) throw GradError("grad: output is not tracked");
  if (output.numel() != 1) throw ShapeError("grad", output.shape(), {}, "output must be scalar");
  const auto graph = output.graph();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].tracked()) throw GradError("grad: input " + std::to_string(i) + " is not tracked");
    if (inputs[i].graph() != graph) {
      throw GradError("grad: input " + std::to_string(i) + " belongs to a different graph");
    }
  }

  const std::size_t root = output.node();
  const std::size_t count = root + 1;

  // Nodes that depend on some requested input; only these need gradients.
  std::vector<char> on_path(count, 0);
  for (const auto& in : inputs) {
    if (in.node() < count) on_path[in.node()] = 1;
  }
  for (std::size_t j = 0; j < count; ++j) {
    if (on_path[j]) continue;
    for (const auto& p : graph->node(j).parents) {
      if (p && on_path[*p]) {
        on_path[j] = 1;
        break;
      }
    }
  }

  std::vector<char> is_input(count, 0);
  for (const auto& in : inputs) {
    if (in.node() < count) is_input[in.node()] = 1;
  }

  std::vector<std::optional<Tensor>> acc(count);
  GradModeGuard mode(create_graph);
  acc[root] = Tensor::ones(output.shape());

  for (std::size_t j = count; j-- > 0;) {
    if (!acc[j] || !on_path[j]) continue;
    // Copy what is needed: recording during the VJP may grow the node vector.
    const GradNode& node_ref = graph->node(j);
    if (!node_ref.vjp) continue;
    const VjpFn vjp = node_ref.vjp;
    const auto parents = node_ref.parents;
    std::vector<Tensor> args;
    args.reserve(parents.size());
    for (std::size_t k = 0; k < parents.size(); ++k) {
      const Tensor& value = node_ref.inputs[k];
      args.push_back(parents[k] ? value.with_node(graph, *parents[k]) : value);
    }
    const Tensor upstream = *acc[j];
    if (!is_input[j]) acc[j].reset();

    auto partials = vjp(upstream, args);
    for (std::size_t k = 0; k < parents.size(); ++k) {
      if (!parents[k] || !on_path[*parents[k]]) continue;
      auto& slot = acc[*parents[k]];
      slot = slot ? add(*slot, partials[k]) : partials[k];
    }
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.node() < count && acc[in.node()]) {
      result.push_back(*acc[in.node()]);
    } else {
      result.push_back(Tensor::zeros(in.shape()));
    }
  }
  return result;
}

}  // namespace rmaml
