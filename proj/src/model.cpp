#include "rmaml/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "rmaml/ops.hpp"

namespace rmaml {

namespace {

constexpr std::size_t kConvBlocks = 4;

std::size_t conv_out_extent(std::size_t extent) {
  for (std::size_t i = 0; i < kConvBlocks; ++i) extent /= 2;
  return extent;
}

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::vector<double> values(numel_of(shape));
  for (auto& v : values) v = bound * (2.0 * unit_uniform(rng) - 1.0);
  return Tensor(std::move(shape), std::move(values));
}

void check_batch(const ModelSpec& spec, const Tensor& batch) {
  Shape expected{batch.rank() > 0 ? batch.dim(0) : 0};
  expected.insert(expected.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (batch.shape() != expected) throw ShapeError("forward", batch.shape(), expected, "batch vs model input");
}

// Parameter layout produced by init_params; forward indexes by position.
void check_layout(const ModelSpec& spec, const ParamSet& params) {
  const std::size_t expected = spec.arch == Arch::Mlp ? 2 * spec.hidden.size() + 2 : 4 * kConvBlocks + 2;
  if (params.size() != expected) {
    throw std::invalid_argument("forward: parameter set has " + std::to_string(params.size()) +
                                " tensors, architecture needs " + std::to_string(expected));
  }
}

}  // namespace

std::string to_string(Arch arch) { return arch == Arch::Mlp ? "mlp" : "conv4"; }

Arch parse_arch(const std::string& text) {
  if (text == "mlp") return Arch::Mlp;
  if (text == "conv4") return Arch::Conv4;
  throw std::invalid_argument("unknown architecture '" + text + "'");
}

void ModelSpec::validate() const {
  if (ways < 2) throw std::invalid_argument("model: ways must be at least 2");
  if (input_shape.empty()) throw std::invalid_argument("model: empty input shape");
  for (auto e : input_shape) {
    if (e == 0) throw std::invalid_argument("model: zero input extent");
  }
  if (hidden.empty()) throw std::invalid_argument("model: at least one hidden width is required");
  for (auto h : hidden) {
    if (h == 0) throw std::invalid_argument("model: zero hidden width");
  }
  if (arch == Arch::Conv4) {
    if (input_shape.size() != 3) throw std::invalid_argument("conv4: input shape must be [C,H,W]");
    if (conv_out_extent(input_shape[1]) == 0 || conv_out_extent(input_shape[2]) == 0) {
      throw std::invalid_argument("conv4: input height and width must be at least 16");
    }
  }
}

std::size_t ModelSpec::feature_dim() const {
  if (arch == Arch::Mlp) return hidden.back();
  return hidden.front() * conv_out_extent(input_shape[1]) * conv_out_extent(input_shape[2]);
}

ModelSpec conv4_spec(std::size_t ways, std::size_t channels, Shape input_shape) {
  return ModelSpec{Arch::Conv4, std::move(input_shape), ways, {channels}};
}

ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ParamSet params;
  if (spec.arch == Arch::Mlp) {
    std::size_t fan_in = numel_of(spec.input_shape);
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      const auto width = spec.hidden[i];
      const auto prefix = "layer" + std::to_string(i);
      params.add(prefix + ".weight", uniform_tensor({fan_in, width}, std::sqrt(6.0 / fan_in), rng));
      params.add(prefix + ".bias", Tensor::zeros({width}));
      fan_in = width;
    }
  } else {
    std::size_t in_channels = spec.input_shape[0];
    const std::size_t channels = spec.hidden.front();
    for (std::size_t i = 0; i < kConvBlocks; ++i) {
      const auto prefix = "block" + std::to_string(i);
      const double fan_in = static_cast<double>(in_channels * 9);
      params.add(prefix + ".conv.weight", uniform_tensor({channels, in_channels, 3, 3}, std::sqrt(6.0 / fan_in), rng));
      params.add(prefix + ".conv.bias", Tensor::zeros({channels}));
      params.add(prefix + ".affine.scale", Tensor::ones({channels}));
      params.add(prefix + ".affine.shift", Tensor::zeros({channels}));
      in_channels = channels;
    }
  }
  const auto features = spec.feature_dim();
  params.add("head.weight", uniform_tensor({features, spec.ways}, 1.0 / std::sqrt(static_cast<double>(features)), rng));
  params.add("head.bias", Tensor::zeros({spec.ways}));
  return params;
}

Tensor penultimate_features(const ModelSpec& spec, const ParamSet& params, const Tensor& batch) {
  check_batch(spec, batch);
  check_layout(spec, params);
  if (spec.arch == Arch::Mlp) {
    Tensor h = flatten(batch);
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      h = relu(add_row_bias(matmul(h, params.value(2 * i)), params.value(2 * i + 1)));
    }
    return h;
  }
  Tensor h = batch;
  for (std::size_t i = 0; i < kConvBlocks; ++i) {
    const std::size_t base = 4 * i;
    h = add_channel_bias(conv2d(h, params.value(base), 1), params.value(base + 1));
    h = channel_affine(h, params.value(base + 2), params.value(base + 3));
    h = maxpool2d(relu(h), 2);
  }
  return flatten(h);
}

Tensor forward(const ModelSpec& spec, const ParamSet& params, const Tensor& batch) {
  const Tensor features = penultimate_features(spec, params, batch);
  const std::size_t head = params.size() - 2;
  return add_row_bias(matmul(features, params.value(head)), params.value(head + 1));
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto predicted = argmax_rows(logits);
  if (predicted.size() != labels.size()) throw ShapeError("accuracy", logits.shape(), {labels.size()});
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace rmaml
