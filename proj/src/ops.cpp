#include "rmaml/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <tuple>

#include "rmaml/graph.hpp"

namespace rmaml {

namespace {

enum class Broadcast { None, LeftScalar, RightScalar };

Broadcast check_binary(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (a.rank() == 0) return Broadcast::LeftScalar;
  if (b.rank() == 0) return Broadcast::RightScalar;
  throw ShapeError(op, a.shape(), b.shape(), "only rank-0 operands broadcast");
}

template <typename F>
Tensor binary_values(const Tensor& a, const Tensor& b, Broadcast mode, F f) {
  const auto x = a.data();
  const auto y = b.data();
  switch (mode) {
    case Broadcast::None: {
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
      return Tensor(a.shape(), std::move(out));
    }
    case Broadcast::LeftScalar: {
      std::vector<double> out(y.size());
      const double s = x[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, y[i]);
      return Tensor(b.shape(), std::move(out));
    }
    case Broadcast::RightScalar: {
      std::vector<double> out(x.size());
      const double s = y[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], s);
      return Tensor(a.shape(), std::move(out));
    }
  }
  return {};
}

template <typename F>
Tensor unary_values(const Tensor& a, F f) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor(a.shape(), std::move(out));
}

// Sums a gradient down to a rank-0 operand that was broadcast.
Tensor reduce_like(const Tensor& g, const Tensor& like) {
  if (like.rank() == 0 && g.rank() != 0) return sum(g);
  return g;
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(a.shape()));
  }
}

IndexMap make_index(std::vector<std::ptrdiff_t> v) {
  return std::make_shared<const std::vector<std::ptrdiff_t>>(std::move(v));
}

void check_labels(std::string_view op, const Tensor& logits, std::span<const int> labels) {
  require_rank(op, logits, 2);
  if (labels.size() != logits.dim(0)) {
    throw ShapeError(op, logits.shape(), {labels.size()}, "label count must equal batch size");
  }
  const auto classes = static_cast<int>(logits.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ShapeError(std::string(op) + ": label " + std::to_string(y) + " outside [0," +
                       std::to_string(classes) + ")");
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto mode = check_binary("add", a, b);
  return record("add", binary_values(a, b, mode, [](double x, double y) { return x + y; }), {a, b},
                [](const Tensor& g, std::span<const Tensor> in) {
                  return std::vector<Tensor>{reduce_like(g, in[0]), reduce_like(g, in[1])};
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto mode = check_binary("sub", a, b);
  return record("sub", binary_values(a, b, mode, [](double x, double y) { return x - y; }), {a, b},
                [](const Tensor& g, std::span<const Tensor> in) {
                  return std::vector<Tensor>{reduce_like(g, in[0]), reduce_like(neg(g), in[1])};
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto mode = check_binary("mul", a, b);
  return record("mul", binary_values(a, b, mode, [](double x, double y) { return x * y; }), {a, b},
                [](const Tensor& g, std::span<const Tensor> in) {
                  return std::vector<Tensor>{reduce_like(mul(g, in[1]), in[0]), reduce_like(mul(g, in[0]), in[1])};
                });
}

Tensor neg(const Tensor& a) {
  return record("neg", unary_values(a, [](double x) { return -x; }), {a},
                [](const Tensor& g, std::span<const Tensor>) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, double factor) {
  return record("scale", unary_values(a, [factor](double x) { return factor * x; }), {a},
                [factor](const Tensor& g, std::span<const Tensor>) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor exp(const Tensor& a) {
  return record("exp", unary_values(a, [](double x) { return std::exp(x); }), {a},
                [](const Tensor& g, std::span<const Tensor> in) { return std::vector<Tensor>{mul(g, exp(in[0]))}; });
}

Tensor relu(const Tensor& a) {
  return record("relu", unary_values(a, [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                [](const Tensor& g, std::span<const Tensor> in) {
                  const Tensor mask = unary_values(in[0].detach(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
                  return std::vector<Tensor>{mul(g, mask)};
                });
}

Tensor sign(const Tensor& a) {
  return record("sign", unary_values(a, [](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }), {a},
                [](const Tensor&, std::span<const Tensor> in) {
                  return std::vector<Tensor>{Tensor::zeros(in[0].shape())};
                });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  return record("clamp", unary_values(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }), {a},
                [lo, hi](const Tensor& g, std::span<const Tensor> in) {
                  const Tensor mask =
                      unary_values(in[0].detach(), [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
                  return std::vector<Tensor>{mul(g, mask)};
                });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return record("sum", Tensor::scalar(total), {a}, [](const Tensor& g, std::span<const Tensor> in) {
    return std::vector<Tensor>{mul(Tensor::ones(in[0].shape()), g)};
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul", a.shape(), b.shape(), "expected [m,k] x [k,n]");
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      if (s == 0.0) continue;
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return record("matmul", Tensor({m, n}, std::move(out)), {a, b}, [](const Tensor& g, std::span<const Tensor> in) {
    return std::vector<Tensor>{matmul(g, transpose(in[1])), matmul(transpose(in[0]), g)};
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t rows = a.dim(0);
  const std::size_t cols = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  }
  return record("transpose", Tensor({cols, rows}, std::move(out)), {a},
                [](const Tensor& g, std::span<const Tensor>) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape, "element count differs");
  return record("reshape", a.view_as(std::move(shape)), {a}, [](const Tensor& g, std::span<const Tensor> in) {
    return std::vector<Tensor>{reshape(g, in[0].shape())};
  });
}

Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("flatten", a.shape(), {}, "needs a leading batch axis");
  const std::size_t batch = a.dim(0);
  return reshape(a, {batch, a.numel() / batch});
}

Tensor gather(const Tensor& a, IndexMap index, Shape out_shape) {
  if (numel_of(out_shape) != index->size()) {
    throw ShapeError("gather", a.shape(), out_shape, "index length must match output size");
  }
  const auto x = a.data();
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto src = (*index)[i];
    if (src >= n) throw ShapeError("gather", a.shape(), out_shape, "index out of range");
    out[i] = src < 0 ? 0.0 : x[static_cast<std::size_t>(src)];
  }
  return record("gather", Tensor(std::move(out_shape), std::move(out)), {a},
                [index](const Tensor& g, std::span<const Tensor> in) {
                  return std::vector<Tensor>{scatter_add(g, index, in[0].shape())};
                });
}

Tensor scatter_add(const Tensor& a, IndexMap index, Shape out_shape) {
  if (a.numel() != index->size()) {
    throw ShapeError("scatter_add", a.shape(), out_shape, "index length must match input size");
  }
  const auto x = a.data();
  std::vector<double> out(numel_of(out_shape), 0.0);
  const auto n = static_cast<std::ptrdiff_t>(out.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto dst = (*index)[i];
    if (dst >= n) throw ShapeError("scatter_add", a.shape(), out_shape, "index out of range");
    if (dst >= 0) out[static_cast<std::size_t>(dst)] += x[i];
  }
  return record("scatter_add", Tensor(std::move(out_shape), std::move(out)), {a},
                [index](const Tensor& g, std::span<const Tensor> in) {
                  return std::vector<Tensor>{gather(g, index, in[0].shape())};
                });
}

namespace {

struct ConvMaps {
  IndexMap im2col;
  IndexMap to_nchw;
};

const ConvMaps& conv_maps(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                          std::size_t out_channels, std::size_t kh, std::size_t kw, std::size_t pad) {
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,
                         std::size_t>;
  thread_local std::map<Key, ConvMaps> cache;
  const Key key{batch, channels, height, width, out_channels, kh, kw, pad};
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  const std::size_t out_h = height + 2 * pad - kh + 1;
  const std::size_t out_w = width + 2 * pad - kw + 1;
  const std::size_t cols = batch * out_h * out_w;
  std::vector<std::ptrdiff_t> im2col(channels * kh * kw * cols);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const std::size_t row = (c * kh + i) * kw + j;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto y = static_cast<std::ptrdiff_t>(oy + i) - static_cast<std::ptrdiff_t>(pad);
              const auto x = static_cast<std::ptrdiff_t>(ox + j) - static_cast<std::ptrdiff_t>(pad);
              const std::size_t col = (b * out_h + oy) * out_w + ox;
              std::ptrdiff_t src = -1;
              if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(height) &&
                  x < static_cast<std::ptrdiff_t>(width)) {
                src = static_cast<std::ptrdiff_t>(((b * channels + c) * height) * width) + y * static_cast<std::ptrdiff_t>(width) + x;
              }
              im2col[row * cols + col] = src;
            }
          }
        }
      }
    }
  }
  std::vector<std::ptrdiff_t> to_nchw(batch * out_channels * out_h * out_w);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_channels; ++o) {
      for (std::size_t p = 0; p < out_h * out_w; ++p) {
        to_nchw[(b * out_channels + o) * out_h * out_w + p] =
            static_cast<std::ptrdiff_t>(o * cols + b * out_h * out_w + p);
      }
    }
  }
  return cache.emplace(key, ConvMaps{make_index(std::move(im2col)), make_index(std::move(to_nchw))}).first->second;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d", x.shape(), weight.shape(), "expected x [B,C,H,W] and weight [O,C,kh,kw]");
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t out_channels = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (height + 2 * padding < kh || width + 2 * padding < kw) {
    throw ShapeError("conv2d", x.shape(), weight.shape(), "kernel larger than padded input");
  }
  const std::size_t out_h = height + 2 * padding - kh + 1;
  const std::size_t out_w = width + 2 * padding - kw + 1;
  const auto& maps = conv_maps(batch, channels, height, width, out_channels, kh, kw, padding);
  const std::size_t patch = channels * kh * kw;
  const std::size_t cols = batch * out_h * out_w;
  const Tensor columns = gather(x, maps.im2col, {patch, cols});
  const Tensor filters = reshape(weight, {out_channels, patch});
  const Tensor y = matmul(filters, columns);
  return gather(y, maps.to_nchw, {batch, out_channels, out_h, out_w});
}

Tensor maxpool2d(const Tensor& x, std::size_t window) {
  if (x.rank() != 4) throw ShapeError("maxpool2d", x.shape(), {}, "expected [B,C,H,W]");
  if (window == 0 || x.dim(2) < window || x.dim(3) < window) {
    throw ShapeError("maxpool2d", x.shape(), {window, window}, "window larger than input");
  }
  const std::size_t planes = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t out_h = height / window, out_w = width / window;
  const auto v = x.data();
  std::vector<std::ptrdiff_t> index(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        std::size_t best = p * height * width + (oy * window) * width + ox * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t at = p * height * width + (oy * window + i) * width + ox * window + j;
            if (v[at] > v[best]) best = at;
          }
        }
        index[(p * out_h + oy) * out_w + ox] = static_cast<std::ptrdiff_t>(best);
      }
    }
  }
  return gather(x, make_index(std::move(index)), {x.dim(0), x.dim(1), out_h, out_w});
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_row_bias", x.shape(), bias.shape());
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<std::ptrdiff_t> index(rows * cols);
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<std::ptrdiff_t>(i % cols);
  return add(x, gather(bias, make_index(std::move(index)), x.shape()));
}

namespace {
IndexMap channel_expand(const Shape& shape) {
  const std::size_t channels = shape[1];
  const std::size_t plane = shape[2] * shape[3];
  std::vector<std::ptrdiff_t> index(numel_of(shape));
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = static_cast<std::ptrdiff_t>((i / plane) % channels);
  return make_index(std::move(index));
}

void check_channel_param(std::string_view op, const Tensor& x, const Tensor& p) {
  if (x.rank() != 4 || p.rank() != 1 || p.dim(0) != x.dim(1)) throw ShapeError(op, x.shape(), p.shape());
}
}  // namespace

Tensor channel_affine(const Tensor& x, const Tensor& scale_c, const Tensor& shift_c) {
  check_channel_param("channel_affine", x, scale_c);
  check_channel_param("channel_affine", x, shift_c);
  const auto index = channel_expand(x.shape());
  return add(mul(x, gather(scale_c, index, x.shape())), gather(shift_c, index, x.shape()));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  check_channel_param("add_channel_bias", x, bias);
  return add(x, gather(bias, channel_expand(x.shape()), x.shape()));
}

Tensor log_softmax(const Tensor& logits) {
  require_rank("log_softmax", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto z = logits.data();
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = z.data() + i * cols;
    const double top = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(row[j] - top);
    const double lse = top + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = row[j] - lse;
  }
  return record("log_softmax", Tensor(logits.shape(), std::move(out)), {logits},
                [](const Tensor& g, std::span<const Tensor> in) {
                  const std::size_t n = in[0].dim(1);
                  const Tensor row_sums = matmul(g, Tensor::ones({n, n}));
                  return std::vector<Tensor>{sub(g, mul(softmax(in[0]), row_sums))};
                });
}

Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels("softmax_cross_entropy", logits, labels);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::ptrdiff_t> index(rows);
  for (std::size_t i = 0; i < rows; ++i) index[i] = static_cast<std::ptrdiff_t>(i * cols) + labels[i];
  return neg(mean(gather(log_softmax(logits), make_index(std::move(index)), {rows})));
}

Tensor kl_div(const Tensor& p_logits, const Tensor& q_logits) {
  require_rank("kl_div", p_logits, 2);
  if (p_logits.shape() != q_logits.shape()) throw ShapeError("kl_div", p_logits.shape(), q_logits.shape());
  const Tensor log_p = log_softmax(p_logits);
  const Tensor log_q = log_softmax(q_logits);
  return scale(sum(mul(exp(log_p), sub(log_p, log_q))), 1.0 / static_cast<double>(p_logits.dim(0)));
}

Tensor margin_loss(const Tensor& logits, std::span<const int> labels, double kappa) {
  check_labels("margin_loss", logits, labels);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (cols < 2) throw ShapeError("margin_loss", logits.shape(), {}, "needs at least two classes");
  const auto z = logits.data();
  std::vector<std::ptrdiff_t> own(rows), other(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    own[i] = static_cast<std::ptrdiff_t>(i * cols + y);
    std::size_t best = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (j != y && z[i * cols + j] > z[i * cols + best]) best = j;
    }
    other[i] = static_cast<std::ptrdiff_t>(i * cols + best);
  }
  const Tensor gap = sub(gather(logits, make_index(std::move(own)), {rows}),
                         gather(logits, make_index(std::move(other)), {rows}));
  return mean(clamp(gap, -kappa, std::numeric_limits<double>::infinity()));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank("argmax_rows", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto z = logits.data();
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = z.data() + i * cols;
    out[i] = static_cast<int>(std::max_element(row, row + cols) - row);
  }
  return out;
}

}  // namespace rmaml
