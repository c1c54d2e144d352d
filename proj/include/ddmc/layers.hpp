#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <optional>
#include <span>

#include "ddmc/ops.hpp"

namespace ddmc {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unrolls one [C,H,W] image into a [C*k*k, H*W] patch matrix with zero padding k/2.
template <typename T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* col) {
  const long pad = static_cast<long>(k / 2);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ci * k + ki) * k + kj) * h * w;
        const long dx = static_cast<long>(kj) - pad;
        const long dy = static_cast<long>(ki) - pad;
        const long x_lo = std::max(0L, -dx);
        const long x_hi = std::min(static_cast<long>(w), static_cast<long>(w) - dx);
        for (long y = 0; y < static_cast<long>(h); ++y) {
          T* dst = row + y * w;
          const long sy = y + dy;
          if (sy < 0 || sy >= static_cast<long>(h) || x_hi <= x_lo) {
            std::fill_n(dst, w, T(0));
            continue;
          }
          const T* src = img + (ci * h + sy) * w;
          std::fill_n(dst, x_lo, T(0));
          std::copy(src + x_lo + dx, src + x_hi + dx, dst + x_lo);
          std::fill(dst + x_hi, dst + w, T(0));
        }
      }
}

// Adjoint of im2col: scatters patch gradients back onto the image.
template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* img) {
  const long pad = static_cast<long>(k / 2);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ci * k + ki) * k + kj) * h * w;
        const long dx = static_cast<long>(kj) - pad;
        const long dy = static_cast<long>(ki) - pad;
        const long x_lo = std::max(0L, -dx);
        const long x_hi = std::min(static_cast<long>(w), static_cast<long>(w) - dx);
        for (long y = 0; y < static_cast<long>(h); ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          const T* src = row + y * w;
          T* dst = img + (ci * h + sy) * w;
          for (long x = x_lo; x < x_hi; ++x) dst[x + dx] += src[x];
        }
      }
}

inline void axis_error(const char* op, const char* axis, std::size_t got, std::size_t want) {
  throw ShapeError(std::string(op) + ": " + axis + " extent " + std::to_string(got) +
                   " does not match " + std::to_string(want));
}

}  // namespace detail

/// Same-padded 2D convolution (cross-correlation) with odd square kernels.
/// input [N,Cin,H,W], kernel [Cout,Cin,k,k], bias [Cout] -> [N,Cout,H,W]
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  require_rank(bias.shape(), 1, "conv2d bias");
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ks[0], k = ks[2];
  if (ks[1] != cin) detail::axis_error("conv2d", "kernel input-channel (axis 1)", ks[1], cin);
  if (ks[3] != k) detail::axis_error("conv2d", "kernel width (axis 3)", ks[3], k);
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (bias.shape()[0] != cout) detail::axis_error("conv2d", "bias (axis 0)", bias.shape()[0], cout);

  using Mat = detail::RowMat<T>;
  const std::size_t hw = h * w, patch = cin * k * k;
  Tensor<T> out({n, cout, h, w});
  Storage<T> col(patch * hw);
  Eigen::Map<const Mat> wk(kernel.value().data(), cout, patch);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(input.value().data() + i * cin * hw, cin, h, w, k, col.data());
    Eigen::Map<const Mat> cm(col.data(), patch, hw);
    Eigen::Map<Mat> om(out.data() + i * cout * hw, cout, hw);
    om.noalias() = wk * cm;
    for (std::size_t o = 0; o < cout; ++o) om.row(o).array() += bias.value()[o];
  }

  return make_result<T>(std::move(out), {input, kernel, bias},
                        [n, cin, cout, h, w, k, hw, patch](Node<T>& nd) {
    auto& xin = *nd.inputs[0];
    auto& kn = *nd.inputs[1];
    auto& bn = *nd.inputs[2];
    Storage<T> col(patch * hw);
    Eigen::Map<const Mat> wk(kn.value.data(), cout, patch);
    Mat dw = Mat::Zero(cout, patch);
    std::vector<T> db(cout, T(0));
    Storage<T> dx;
    if (xin.requires_grad) dx.assign(n * cin * hw, T(0));
    Mat dcol(patch, hw);
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Map<const Mat> g(nd.grad.data() + i * cout * hw, cout, hw);
      if (kn.requires_grad) {
        detail::im2col(xin.value.data() + i * cin * hw, cin, h, w, k, col.data());
        Eigen::Map<const Mat> cm(col.data(), patch, hw);
        dw.noalias() += g * cm.transpose();
      }
      if (bn.requires_grad)
        for (std::size_t o = 0; o < cout; ++o) db[o] += g.row(o).sum();
      if (xin.requires_grad) {
        dcol.noalias() = wk.transpose() * g;
        detail::col2im(dcol.data(), cin, h, w, k, dx.data() + i * cin * hw);
      }
    }
    if (kn.requires_grad) accumulate<T>(kn, std::span<const T>(dw.data(), dw.size()));
    if (bn.requires_grad) accumulate<T>(bn, db);
    if (xin.requires_grad) accumulate<T>(xin, dx);
  });
}

/// Running statistics owned by a batch-normalisation layer.
template <typename T>
struct BatchNormStats {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

/// Per-channel batch normalisation over (N,H,W). In training mode batch
/// statistics are used and the running estimates are updated as
/// running = momentum*running + (1-momentum)*batch; otherwise the running
/// estimates are used.
template <typename T>
Var<T> batchnorm2d(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormStats<T> stats, bool training) {
  require_rank(input.shape(), 4, "batchnorm2d");
  const auto& s = input.shape();
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  if (gamma.value().size() != c) detail::axis_error("batchnorm2d", "gamma", gamma.value().size(), c);
  if (beta.value().size() != c) detail::axis_error("batchnorm2d", "beta", beta.value().size(), c);
  const std::size_t m = n * hw;
  std::vector<T> mean(c), inv_std(c);
  const auto& x = input.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) acc += p[q];
      }
      const double mu = acc / static_cast<double>(m);
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * hw;
        for (std::size_t q = 0; q < hw; ++q) var += (p[q] - mu) * (p[q] - mu);
      }
      var /= static_cast<double>(m);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + stats.eps));
      if (stats.running_mean && stats.running_var && grad_enabled()) {
        const double unbiased = m > 1 ? var * m / (m - 1) : var;
        auto& rm = (*stats.running_mean)[ch];
        auto& rv = (*stats.running_var)[ch];
        rm = static_cast<T>(stats.momentum * rm + (1 - stats.momentum) * mu);
        rv = static_cast<T>(stats.momentum * rv + (1 - stats.momentum) * unbiased);
      }
    } else {
      if (!stats.running_mean || !stats.running_var)
        throw ValueError("batchnorm2d: inference mode needs running statistics");
      mean[ch] = (*stats.running_mean)[ch];
      inv_std[ch] = T(1) / std::sqrt((*stats.running_var)[ch] + stats.eps);
    }
  }
  Tensor<T> out(s);
  Tensor<T> xhat(s);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      const T g = gamma.value()[ch], b = beta.value()[ch];
      for (std::size_t q = 0; q < hw; ++q) {
        const T xh = (x[off + q] - mean[ch]) * inv_std[ch];
        xhat[off + q] = xh;
        out[off + q] = g * xh + b;
      }
    }
  return make_result<T>(std::move(out), {input, gamma, beta},
                        [n, c, hw, m, inv_std, training, xhat = std::move(xhat)](Node<T>& nd) {
    auto& xin = *nd.inputs[0];
    auto& gn = *nd.inputs[1];
    auto& bn = *nd.inputs[2];
    std::vector<T> dgamma(c, T(0)), dbeta(c, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (i * c + ch) * hw;
        T sg = 0, sgx = 0;
        for (std::size_t q = 0; q < hw; ++q) {
          sg += nd.grad[off + q];
          sgx += nd.grad[off + q] * xhat[off + q];
        }
        dbeta[ch] += sg;
        dgamma[ch] += sgx;
      }
    if (xin.requires_grad) {
      std::vector<T> dx(n * c * hw);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = gn.value[ch];
        if (training) {
          const T k = g * inv_std[ch] / static_cast<T>(m);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q)
              dx[off + q] = k * (static_cast<T>(m) * nd.grad[off + q] - dbeta[ch] -
                                 xhat[off + q] * dgamma[ch]);
          }
        } else {
          const T k = g * inv_std[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q) dx[off + q] = k * nd.grad[off + q];
          }
        }
      }
      accumulate<T>(xin, dx);
    }
    if (gn.requires_grad) accumulate<T>(gn, dgamma);
    if (bn.requires_grad) accumulate<T>(bn, dbeta);
  });
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first maximum.
template <typename T>
Var<T> maxpool2x2(const Var<T>& input) {
  require_rank(input.shape(), 4, "maxpool2x2");
  const auto& s = input.shape();
  if (s[2] % 2 || s[3] % 2)
    throw ShapeError("maxpool2x2: spatial extents must be even, got " + shape_str(s));
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  Tensor<T> out({s[0], s[1], ho, wo});
  std::vector<std::uint32_t> arg(out.size());
  const T* x = input.value().data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xo = 0; xo < wo; ++xo) {
        const std::size_t base = p * h * w + 2 * y * w + 2 * xo;
        std::size_t best = base;
        for (std::size_t cand : {base + 1, base + w, base + w + 1})
          if (x[cand] > x[best]) best = cand;
        const std::size_t o = (p * ho + y) * wo + xo;
        out[o] = x[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  return make_result<T>(std::move(out), {input}, [arg = std::move(arg)](Node<T>& nd) {
    std::vector<T> g(nd.inputs[0]->value.size(), T(0));
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += nd.grad[o];
    accumulate<T>(*nd.inputs[0], g);
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2x(const Var<T>& input) {
  require_rank(input.shape(), 4, "upsample2x");
  const auto& s = input.shape();
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xo = 0; xo < 2 * w; ++xo)
        out[(p * 2 * h + y) * 2 * w + xo] = x[(p * h + y / 2) * w + xo / 2];
  return make_result<T>(std::move(out), {input}, [nc, h, w](Node<T>& nd) {
    std::vector<T> g(nc * h * w, T(0));
    for (std::size_t p = 0; p < nc; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xo = 0; xo < 2 * w; ++xo)
          g[(p * h + y / 2) * w + xo / 2] += nd.grad[(p * 2 * h + y) * 2 * w + xo];
    accumulate<T>(*nd.inputs[0], g);
  });
}

/// Fully connected layer: [N,in] x weight [out,in] + bias [out] -> [N,out].
template <typename T>
Var<T> fully_connected(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  require_rank(input.shape(), 2, "fully_connected input");
  require_rank(weight.shape(), 2, "fully_connected weight");
  const std::size_t n = input.shape()[0], fin = input.shape()[1];
  const std::size_t fout = weight.shape()[0];
  if (weight.shape()[1] != fin)
    throw ShapeError("fully_connected: flat input size " + std::to_string(fin) +
                     " does not match weight axis 1 (" + std::to_string(weight.shape()[1]) + ")");
  if (bias.value().size() != fout)
    detail::axis_error("fully_connected", "bias (axis 0)", bias.value().size(), fout);
  using Mat = detail::RowMat<T>;
  Tensor<T> out({n, fout});
  Eigen::Map<const Mat> xm(input.value().data(), n, fin);
  Eigen::Map<const Mat> wm(weight.value().data(), fout, fin);
  Eigen::Map<Mat> om(out.data(), n, fout);
  om.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < fout; ++o) om(i, o) += bias.value()[o];
  return make_result<T>(std::move(out), {input, weight, bias}, [n, fin, fout](Node<T>& nd) {
    Eigen::Map<const Mat> g(nd.grad.data(), n, fout);
    auto& xin = *nd.inputs[0];
    auto& wn = *nd.inputs[1];
    auto& bn = *nd.inputs[2];
    Eigen::Map<const Mat> xm(xin.value.data(), n, fin);
    Eigen::Map<const Mat> wm(wn.value.data(), fout, fin);
    if (xin.requires_grad) {
      Mat dx = g * wm;
      accumulate<T>(xin, std::span<const T>(dx.data(), dx.size()));
    }
    if (wn.requires_grad) {
      Mat dw = g.transpose() * xm;
      accumulate<T>(wn, std::span<const T>(dw.data(), dw.size()));
    }
    if (bn.requires_grad) {
      std::vector<T> db(fout, T(0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < fout; ++o) db[o] += g(i, o);
      accumulate<T>(bn, db);
    }
  });
}

enum class LayerKind { relu, batchnorm2d, maxpool2x2, upsample2x, fully_connected, concat_channels };

/// Uniform entry point over the layer primitives. `params` holds, in order:
/// batchnorm2d {gamma, beta}; fully_connected {weight, bias};
/// concat_channels {second input}; nothing for the rest.
template <typename T>
Var<T> layer_forward(LayerKind kind, const Var<T>& input, std::span<const Var<T>> params = {},
                     BatchNormStats<T> stats = {}, bool training = true) {
  auto need = [&](std::size_t k, const char* what) {
    if (params.size() != k)
      throw ValueError(std::string("layer_forward: ") + what + " expects " + std::to_string(k) +
                       " parameter tensors");
  };
  switch (kind) {
    case LayerKind::relu: return relu(input);
    case LayerKind::maxpool2x2: return maxpool2x2(input);
    case LayerKind::upsample2x: return upsample2x(input);
    case LayerKind::batchnorm2d:
      need(2, "batchnorm2d");
      return batchnorm2d(input, params[0], params[1], stats, training);
    case LayerKind::fully_connected:
      need(2, "fully_connected");
      return fully_connected(input, params[0], params[1]);
    case LayerKind::concat_channels:
      need(1, "concat_channels");
      return concat_channels(input, params[0]);
  }
  throw ValueError("layer_forward: unknown kind");
}

}  // namespace ddmc
