#include <cmath>
#include <string>

#include "care/ops.hpp"
#include "op_support.hpp"

namespace care {

using detail::finish;
using detail::grad_of;

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return batch * out_h * out_w; }
};

// col[(c, ki, kj), (b, oi, oj)] = x[b, c, oi*s - p + ki, oj*s - p + kj]
void im2col(const ConvGeometry& g, const float* x, float* col) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        float* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const float* src = x + (b * g.channels + c) * g.height * g.width;
          float* dst = row + b * plane;
          for (std::size_t oi = 0; oi < g.out_h; ++oi) {
            const auto ih = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                            static_cast<std::ptrdiff_t>(g.pad);
            float* out = dst + oi * g.out_w;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill_n(out, g.out_w, 0.0F);
              continue;
            }
            const float* line = src + static_cast<std::size_t>(ih) * g.width;
            for (std::size_t oj = 0; oj < g.out_w; ++oj) {
              const auto iw = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                              static_cast<std::ptrdiff_t>(g.pad);
              out[oj] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                            ? 0.0F
                            : line[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const float* col, float* dx) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const float* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          float* dst = dx + (b * g.channels + c) * g.height * g.width;
          const float* src = row + b * plane;
          for (std::size_t oi = 0; oi < g.out_h; ++oi) {
            const auto ih = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
            float* line = dst + static_cast<std::size_t>(ih) * g.width;
            for (std::size_t oj = 0; oj < g.out_w; ++oj) {
              const auto iw = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
              line[static_cast<std::size_t>(iw)] += src[oi * g.out_w + oj];
            }
          }
        }
      }
    }
  }
}

std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                          const char* axis) {
  const std::size_t padded = in + 2 * pad;
  if (k > padded) {
    throw ConfigError(std::string("conv2d: kernel larger than padded ") + axis + " extent");
  }
  if ((padded - k) % stride != 0) {
    throw ConfigError(std::string("conv2d: non-integral output ") + axis + " (" +
                      std::to_string(in) + "+2*" + std::to_string(pad) + "-" + std::to_string(k) +
                      ") not divisible by stride " + std::to_string(stride));
  }
  return (padded - k) / stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opt) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  if (opt.stride == 0) throw ConfigError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                 weight.dim(3), opt.stride, opt.pad, 0, 0};
  g.out_h = conv_out_size(g.height, g.kh, g.stride, g.pad, "height");
  g.out_w = conv_out_size(g.width, g.kw, g.stride, g.pad, "width");

  const std::size_t plane = g.out_h * g.out_w;
  std::vector<float> col(g.col_rows() * g.col_cols());
  im2col(g, x.data().data(), col.data());
  std::vector<float> flat(g.out_channels * g.col_cols());
  detail::gemm(false, false, g.out_channels, g.col_cols(), g.col_rows(), 1.0F,
               weight.data().data(), col.data(), 0.0F, flat.data());
  std::vector<float> out(flat.size());
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t b = 0; b < g.batch; ++b) {
      std::copy_n(flat.data() + o * g.col_cols() + b * plane, plane,
                  out.data() + (b * g.out_channels + o) * plane);
    }
  }
  col = {};
  auto xi = x.impl();
  auto wi = weight.impl();
  return finish(
      "conv2d", Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {&x, &weight},
      [xi, wi, g, plane](std::span<const float> gout, const TensorImpl&) {
        std::vector<float> gflat(g.out_channels * g.col_cols());
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          for (std::size_t b = 0; b < g.batch; ++b) {
            std::copy_n(gout.data() + (b * g.out_channels + o) * plane, plane,
                        gflat.data() + o * g.col_cols() + b * plane);
          }
        }
        std::vector<float> col(g.col_rows() * g.col_cols());
        if (wi->requires_grad) {
          im2col(g, xi->data.data(), col.data());
          detail::gemm(false, true, g.out_channels, g.col_rows(), g.col_cols(), 1.0F,
                       gflat.data(), col.data(), 1.0F, grad_of(*wi).data());
        }
        if (xi->requires_grad) {
          detail::gemm(true, false, g.col_rows(), g.col_cols(), g.out_channels, 1.0F,
                       wi->data.data(), gflat.data(), 0.0F, col.data());
          col2im_add(g, col.data(), grad_of(*xi).data());
        }
      });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, const BatchNormOptions& opt) {
  if ((x.rank() != 2 && x.rank() != 4)) {
    throw DimensionError("batchnorm expects [b,c] or [b,c,h,w], got " + shape_str(x.shape()));
  }
  const std::size_t b = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw DimensionError("batchnorm: channel parameter " + shape_str(t->shape()) +
                           " does not match input " + shape_str(x.shape()));
    }
  }
  const std::size_t count = b * hw;
  const bool train = opt.mode == BnMode::train;
  std::vector<float> inv_std(c);
  std::vector<float> xhat(x.numel());
  std::vector<float> out(x.numel());
  const float* in = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    double var = 0.0;
    if (train) {
      for (std::size_t n = 0; n < b; ++n) {
        const float* p = in + (n * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) mu += p[j];
      }
      mu /= static_cast<double>(count);
      for (std::size_t n = 0; n < b; ++n) {
        const float* p = in + (n * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = p[j] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(count);
      if (opt.update_running) {
        const double unbiased =
            count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        rm[ch] = static_cast<float>(opt.momentum * rm[ch] + (1.0 - opt.momentum) * mu);
        rv[ch] = static_cast<float>(opt.momentum * rv[ch] + (1.0 - opt.momentum) * unbiased);
      }
    } else {
      mu = running_mean.data()[ch];
      var = running_var.data()[ch];
    }
    const double istd = 1.0 / std::sqrt(var + opt.eps);
    inv_std[ch] = static_cast<float>(istd);
    const float gm = gamma.data()[ch];
    const float bt = beta.data()[ch];
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t base = (n * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const auto xh = static_cast<float>((in[base + j] - mu) * istd);
        xhat[base + j] = xh;
        out[base + j] = gm * xh + bt;
      }
    }
  }
  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  return finish(
      "batchnorm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [xi, gi, bi, b, c, hw, count, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          std::span<const float> g, const TensorImpl&) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0;
          double sum_gx = 0.0;
          for (std::size_t n = 0; n < b; ++n) {
            const std::size_t base = (n * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
              sum_g += g[base + j];
              sum_gx += static_cast<double>(g[base + j]) * xhat[base + j];
            }
          }
          if (gi->requires_grad) grad_of(*gi)[ch] += static_cast<float>(sum_gx);
          if (bi->requires_grad) grad_of(*bi)[ch] += static_cast<float>(sum_g);
          if (!xi->requires_grad) continue;
          auto& gx = grad_of(*xi);
          const double k = static_cast<double>(gi->data[ch]) * inv_std[ch];
          const double n_inv = 1.0 / static_cast<double>(count);
          for (std::size_t n = 0; n < b; ++n) {
            const std::size_t base = (n * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t i = base + j;
              if (train) {
                gx[i] += static_cast<float>(k * (g[i] - n_inv * sum_g - n_inv * xhat[i] * sum_gx));
              } else {
                gx[i] += static_cast<float>(k * g[i]);
              }
            }
          }
        }
      });
}

}  // namespace care
