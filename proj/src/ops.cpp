#include "care/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "op_support.hpp"

namespace care {

namespace detail {

void check_finite(std::string_view kind, const TensorImpl& out) {
  for (float v : out.data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(kind) + " " +
                         shape_str(out.shape));
    }
  }
}

}  // namespace detail

using detail::finish;
using detail::grad_of;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)) ||
      (batched && a.dim(0) != b.dim(0)) || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t g = batched ? a.dim(0) : 1;
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  std::vector<float> out(g * m * n);
  for (std::size_t i = 0; i < g; ++i) {
    detail::gemm(false, false, m, n, k, 1.0F, a.data().data() + i * m * k,
                 b.data().data() + i * k * n, 0.0F, out.data() + i * m * n);
  }
  Shape shape = batched ? Shape{g, m, n} : Shape{m, n};
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("matmul", std::move(shape), std::move(out), {&a, &b},
                [ai, bi, g, m, n, k](std::span<const float> gout, const TensorImpl&) {
                  for (std::size_t i = 0; i < g; ++i) {
                    const float* go = gout.data() + i * m * n;
                    if (ai->requires_grad) {
                      // dA = dC * B^T
                      detail::gemm(false, true, m, k, n, 1.0F, go, bi->data.data() + i * k * n,
                                   1.0F, grad_of(*ai).data() + i * m * k);
                    }
                    if (bi->requires_grad) {
                      // dB = A^T * dC
                      detail::gemm(true, false, k, n, m, 1.0F, ai->data.data() + i * m * k, go,
                                   1.0F, grad_of(*bi).data() + i * k * n);
                    }
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("add", a.shape(), std::move(out), {&a, &b},
                [ai, bi](std::span<const float> g, const TensorImpl&) {
                  for (auto* p : {ai.get(), bi.get()}) {
                    if (!p->requires_grad) continue;
                    auto& gp = grad_of(*p);
                    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
                  }
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("sub", a.shape(), std::move(out), {&a, &b},
                [ai, bi](std::span<const float> g, const TensorImpl&) {
                  if (ai->requires_grad) {
                    auto& ga = grad_of(*ai);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (bi->requires_grad) {
                    auto& gb = grad_of(*bi);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  }
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("mul", a.shape(), std::move(out), {&a, &b},
                [ai, bi](std::span<const float> g, const TensorImpl&) {
                  if (ai->requires_grad) {
                    auto& ga = grad_of(*ai);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
                  }
                  if (bi->requires_grad) {
                    auto& gb = grad_of(*bi);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
                  }
                });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto ai = a.impl();
  return finish("scale", a.shape(), std::move(out), {&a},
                [ai, factor](std::span<const float> g, const TensorImpl&) {
                  auto& ga = grad_of(*ai);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                });
}

Tensor add_scalar(const Tensor& a, float value) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + value;
  auto ai = a.impl();
  return finish("add_scalar", a.shape(), std::move(out), {&a},
                [ai](std::span<const float> g, const TensorImpl&) {
                  auto& ga = grad_of(*ai);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  std::vector<float> out(x.numel());
  const std::size_t rows = x.numel() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.data()[r * n + j] + bias.data()[j];
  }
  auto xi = x.impl();
  auto bi = bias.impl();
  return finish("add_bias", x.shape(), std::move(out), {&x, &bias},
                [xi, bi, rows, n](std::span<const float> g, const TensorImpl&) {
                  if (xi->requires_grad) {
                    auto& gx = grad_of(*xi);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  }
                  if (bi->requires_grad) {
                    auto& gb = grad_of(*bi);
                    for (std::size_t j = 0; j < n; ++j) {
                      double acc = 0.0;
                      for (std::size_t r = 0; r < rows; ++r) acc += g[r * n + j];
                      gb[j] += static_cast<float>(acc);
                    }
                  }
                });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.data()[i], 0.0F);
  auto xi = x.impl();
  return finish("relu", x.shape(), std::move(out), {&x},
                [xi](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (xi->data[i] > 0.0F) gx[i] += g[i];
                  }
                });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  auto xi = x.impl();
  return finish("sum", Shape{1}, {static_cast<float>(acc)}, {&x},
                [xi](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (float& v : gx) v += g[0];
                });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  auto xi = x.impl();
  return finish("mean", Shape{1}, {static_cast<float>(acc / n)}, {&x},
                [xi, n](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  const auto step = static_cast<float>(g[0] / n);
                  for (float& v : gx) v += step;
                });
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += x.data()[r * n + j];
    out[r] = static_cast<float>(acc);
  }
  auto xi = x.impl();
  return finish("sum_last", drop_last(x.shape()), std::move(out), {&x},
                [xi, rows, n](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r];
                  }
                });
}

Tensor row_norm(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = x.data()[r * n + j];
      acc += v * v;
    }
    out[r] = static_cast<float>(std::sqrt(acc));
  }
  auto xi = x.impl();
  return finish("row_norm", drop_last(x.shape()), std::move(out), {&x},
                [xi, rows, n](std::span<const float> g, const TensorImpl& o) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (o.data[r] == 0.0F) continue;
                    const float s = g[r] / o.data[r];
                    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += s * xi->data[r * n + j];
                  }
                });
}

Tensor l2_normalize(const Tensor& x, float eps) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  std::vector<float> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = x.data()[r * n + j];
      acc += v * v;
    }
    const double norm = std::sqrt(acc);
    if (norm < eps) {
      throw DegenerateError("l2_normalize: vector " + std::to_string(r) + " has norm " +
                            std::to_string(norm) + " below epsilon");
    }
    norms[r] = static_cast<float>(norm);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = static_cast<float>(x.data()[r * n + j] / norm);
    }
  }
  auto xi = x.impl();
  return finish("l2_normalize", x.shape(), std::move(out), {&x},
                [xi, rows, n, norms = std::move(norms)](std::span<const float> g,
                                                        const TensorImpl& o) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      dot += static_cast<double>(g[r * n + j]) * o.data[r * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const std::size_t i = r * n + j;
                      gx[i] += static_cast<float>((g[i] - dot * o.data[i]) / norms[r]);
                    }
                  }
                });
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * n;
    const float mx = *std::max_element(in, in + n);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = static_cast<float>(std::exp(static_cast<double>(in[j] - mx)) / denom);
    }
  }
  auto xi = x.impl();
  return finish("softmax_rows", x.shape(), std::move(out), {&x},
                [xi, rows, n](std::span<const float> g, const TensorImpl& o) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      dot += static_cast<double>(g[r * n + j]) * o.data[r * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const std::size_t i = r * n + j;
                      gx[i] += static_cast<float>(o.data[i] * (g[i] - dot));
                    }
                  }
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0);
  const std::size_t k = logits.dim(1);
  std::vector<float> probs(b * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw DataError("cross_entropy: label " + std::to_string(labels[r]) +
                      " outside [0, " + std::to_string(k) + ")");
    }
    const float* in = logits.data().data() + r * k;
    const float mx = *std::max_element(in, in + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = static_cast<float>(std::exp(static_cast<double>(in[j] - mx)) / denom);
    }
    loss -= static_cast<double>(in[labels[r]] - mx) - std::log(denom);
  }
  auto li = logits.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  return finish("cross_entropy", Shape{1}, {static_cast<float>(loss / static_cast<double>(b))},
                {&logits},
                [li, b, k, probs = std::move(probs), lab = std::move(lab)](
                    std::span<const float> g, const TensorImpl&) {
                  auto& gl = grad_of(*li);
                  const float s = g[0] / static_cast<float>(b);
                  for (std::size_t r = 0; r < b; ++r) {
                    for (std::size_t j = 0; j < k; ++j) {
                      const float target = static_cast<int>(j) == lab[r] ? 1.0F : 0.0F;
                      gl[r * k + j] += s * (probs[r * k + j] - target);
                    }
                  }
                });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> used(rank, false);
  if (axes.size() != rank) throw DimensionError("permute: axes do not match " + shape_str(x.shape()));
  for (std::size_t a : axes) {
    if (a >= rank || used[a]) throw DimensionError("permute: invalid axis list");
    used[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[axes[i]];
  const auto in_strides = strides_of(x.shape());
  // Source offset of each destination element, walked with an odometer.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      offset += in_strides[axes[d]];
      if (++counter[d] < out_shape[d]) break;
      offset -= in_strides[axes[d]] * out_shape[d];
      counter[d] = 0;
    }
  }
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[src[i]];
  auto xi = x.impl();
  return finish("permute", std::move(out_shape), std::move(out), {&x},
                [xi, src = std::move(src)](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
                });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  auto xi = x.impl();
  return finish("reshape", std::move(shape), std::move(out), {&x},
                [xi](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::vector<std::size_t> chunk(parts.size());
  std::size_t row = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    chunk[i] = parts[i].numel() / outer;
    row += chunk[i];
  }
  std::vector<float> out(outer * row);
  std::size_t col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(parts[i].data().data() + o * chunk[i], chunk[i], out.data() + o * row + col);
    }
    col += chunk[i];
  }
  std::vector<const Tensor*> inputs;
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) {
    inputs.push_back(&p);
    impls.push_back(p.impl());
  }
  return finish("concat", std::move(out_shape), std::move(out),
                std::span<const Tensor* const>(inputs),
                [impls, chunk, outer, row](std::span<const float> g, const TensorImpl&) {
                  std::size_t c = 0;
                  for (std::size_t i = 0; i < impls.size(); ++i) {
                    if (impls[i]->requires_grad) {
                      auto& gp = grad_of(*impls[i]);
                      for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t j = 0; j < chunk[i]; ++j) {
                          gp[o * chunk[i] + j] += g[o * row + c + j];
                        }
                      }
                    }
                    c += chunk[i];
                  }
                });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t r = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<std::size_t> index;
  index.reserve(rows.size() * d);
  for (std::size_t row : rows) {
    if (row >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(row) + " outside table of " +
                           std::to_string(r) + " rows");
    }
    for (std::size_t j = 0; j < d; ++j) index.push_back(row * d + j);
  }
  return gather(table, index, Shape{rows.size(), d});
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices do not fill " +
                         shape_str(out_shape));
  }
  std::vector<float> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.numel()) throw DimensionError("gather: index out of range");
    out[i] = x.data()[index[i]];
  }
  auto xi = x.impl();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return finish("gather", std::move(out_shape), std::move(out), {&x},
                [xi, idx = std::move(idx)](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[idx[i]] += g[i];
                });
}

Tensor mean_pool_2d(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("mean_pool_2d expects [b,c,h,w], got " + shape_str(x.shape()));
  const std::size_t bc = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  std::vector<float> out(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += x.data()[i * hw + j];
    out[i] = static_cast<float>(acc / static_cast<double>(hw));
  }
  auto xi = x.impl();
  return finish("mean_pool_2d", Shape{x.dim(0), x.dim(1)}, std::move(out), {&x},
                [xi, bc, hw](std::span<const float> g, const TensorImpl&) {
                  auto& gx = grad_of(*xi);
                  for (std::size_t i = 0; i < bc; ++i) {
                    const float s = g[i] / static_cast<float>(hw);
                    for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += s;
                  }
                });
}

}  // namespace care
