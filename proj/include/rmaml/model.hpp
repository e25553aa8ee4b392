#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rmaml/params.hpp"
#include "rmaml/tensor.hpp"

namespace rmaml {

enum class Arch { Mlp, Conv4 };

std::string to_string(Arch arch);
Arch parse_arch(const std::string& text);

/**
 * Classification backbone description.
 *
 * mlp:   input (any shape, flattened) -> hidden[0] -> ... -> hidden.back() -> ways.
 *        Each hidden layer is affine + ReLU; the last hidden activation is the feature layer.
 * conv4: input [C,H,W]; four blocks of 3x3 conv (padding 1) + per-channel affine + ReLU +
 *        2x2 max-pool, hidden[0] channels each; flattened output is the feature layer,
 *        followed by a linear head. H and W must be at least 16.
 */
struct ModelSpec {
  Arch arch = Arch::Mlp;
  Shape input_shape{32};
  std::size_t ways = 5;
  std::vector<std::size_t> hidden{32, 32};

  void validate() const;
  /// Width D of penultimate_features().
  std::size_t feature_dim() const;
};

/// Default conv4 used across the project: 28x28x1 input, 16 channels, D = 16.
ModelSpec conv4_spec(std::size_t ways = 5, std::size_t channels = 16, Shape input_shape = {1, 28, 28});

/// Weights uniform in +-sqrt(6/fan_in) (head: +-1/sqrt(fan_in)); biases and affine shifts zero,
/// affine scales one. Deterministic in `seed`.
ParamSet init_params(const ModelSpec& spec, std::uint64_t seed);

/// batch has shape [B, input_shape...]; returns logits [B, ways].
Tensor forward(const ModelSpec& spec, const ParamSet& params, const Tensor& batch);

/// Layer feeding the classifier head, [B, feature_dim()].
Tensor penultimate_features(const ModelSpec& spec, const ParamSet& params, const Tensor& batch);

/// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);

}  // namespace rmaml
