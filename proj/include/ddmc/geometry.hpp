#pragma once

#include <cmath>
#include <numbers>

#include "ddmc/fourier.hpp"

namespace ddmc {

/// Rigid in-plane motion: rotation by `theta` (radians) about the image centre
/// ((H-1)/2, (W-1)/2), then translation by (tx, ty) pixels. tx moves content
/// towards larger column indices, ty towards larger row indices.
struct RigidParams {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;

  bool finite() const { return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(theta); }
  bool operator==(const RigidParams&) const = default;
};

inline RigidParams invert(const RigidParams& p) {
  const double c = std::cos(-p.theta), s = std::sin(-p.theta);
  return {-(c * p.tx - s * p.ty), -(s * p.tx + c * p.ty), -p.theta};
}

/// The single rigid motion equal to applying `first` and then `second`.
inline RigidParams compose(const RigidParams& first, const RigidParams& second) {
  const double c = std::cos(second.theta), s = std::sin(second.theta);
  return {c * first.tx - s * first.ty + second.tx, s * first.tx + c * first.ty + second.ty,
          first.theta + second.theta};
}

namespace detail {

// Backward warping of the channel planes of one sample: output pixel o reads
// the input at p^-1(o) with bilinear interpolation and zero fill.
template <typename T>
void warp_sample(const T* in, T* out, std::size_t channels, std::size_t h, std::size_t w, double tx,
                 double ty, double theta) {
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  const double c = std::cos(theta), s = std::sin(theta);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q) {
      const double dx = static_cast<double>(q) - cx - tx;
      const double dy = static_cast<double>(r) - cy - ty;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      const double ax = sx - fx0, ay = sy - fy0;
      const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const T* plane = in + ch * h * w;
        double v = 0;
        for (int k = 0; k < 4; ++k) {
          if (wts[k] == 0.0) continue;
          if (xs[k] < 0 || ys[k] < 0 || xs[k] >= static_cast<long>(w) || ys[k] >= static_cast<long>(h))
            continue;
          v += wts[k] * static_cast<double>(plane[ys[k] * static_cast<long>(w) + xs[k]]);
        }
        out[ch * h * w + r * w + q] = static_cast<T>(v);
      }
    }
}

}  // namespace detail

/// Warps every channel of an [N,C,H,W] tensor by per-sample rigid parameters
/// given as an [N,3] tensor of (tx, ty, theta). Differentiable with respect to
/// both the image and the parameters.
template <typename T>
Var<T> warp_rigid(const Var<T>& img, const Var<T>& params) {
  require_rank(img.shape(), 4, "warp_rigid image");
  require_rank(params.shape(), 2, "warp_rigid params");
  const std::size_t n = img.shape()[0], ch = img.shape()[1], h = img.shape()[2], w = img.shape()[3];
  if (params.shape()[0] != n || params.shape()[1] != 3)
    throw ShapeError("warp_rigid: params must be [" + std::to_string(n) + ",3], got " +
                     shape_str(params.shape()));
  for (T v : params.value().values())
    if (!std::isfinite(static_cast<double>(v))) throw ValueError("warp_rigid: non-finite parameters");
  Tensor<T> out(img.shape());
  const std::size_t plane = ch * h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const T* p = params.value().data() + 3 * i;
    detail::warp_sample(img.value().data() + i * plane, out.data() + i * plane, ch, h, w, p[0], p[1], p[2]);
  }
  return make_result<T>(std::move(out), {img, params}, [n, ch, h, w, plane](Node<T>& nd) {
    auto& in = *nd.inputs[0];
    auto& pn = *nd.inputs[1];
    std::vector<T> dimg;
    if (in.requires_grad) dimg.assign(in.value.size(), T(0));
    std::vector<T> dpar(3 * n, T(0));
    const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
    for (std::size_t i = 0; i < n; ++i) {
      const double tx = pn.value[3 * i], ty = pn.value[3 * i + 1], th = pn.value[3 * i + 2];
      const double c = std::cos(th), s = std::sin(th);
      double gtx = 0, gty = 0, gth = 0;
      const T* src = in.value.data() + i * plane;
      const T* g = nd.grad.data() + i * plane;
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) {
          const double dx = static_cast<double>(q) - cx - tx;
          const double dy = static_cast<double>(r) - cy - ty;
          const double sx = c * dx + s * dy + cx;
          const double sy = -s * dx + c * dy + cy;
          const double fx0 = std::floor(sx), fy0 = std::floor(sy);
          const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
          const double ax = sx - fx0, ay = sy - fy0;
          auto inside = [&](long x, long y) {
            return x >= 0 && y >= 0 && x < static_cast<long>(w) && y < static_cast<long>(h);
          };
          double dsx = 0, dsy = 0;
          for (std::size_t k = 0; k < ch; ++k) {
            const double go = g[k * h * w + r * w + q];
            if (go == 0.0) continue;
            const T* pl = src + k * h * w;
            auto px = [&](long x, long y) {
              return inside(x, y) ? static_cast<double>(pl[y * static_cast<long>(w) + x]) : 0.0;
            };
            const double v00 = px(x0, y0), v10 = px(x0 + 1, y0), v01 = px(x0, y0 + 1), v11 = px(x0 + 1, y0 + 1);
            dsx += go * ((1 - ay) * (v10 - v00) + ay * (v11 - v01));
            dsy += go * ((1 - ax) * (v01 - v00) + ax * (v11 - v10));
            if (!dimg.empty()) {
              T* d = dimg.data() + i * plane + k * h * w;
              const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
              const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
              const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
              for (int t = 0; t < 4; ++t)
                if (wts[t] != 0.0 && inside(xs[t], ys[t]))
                  d[ys[t] * static_cast<long>(w) + xs[t]] += static_cast<T>(wts[t] * go);
            }
          }
          // d(sx,sy)/d(tx,ty,theta)
          gtx += dsx * (-c) + dsy * s;
          gty += dsx * (-s) + dsy * (-c);
          gth += dsx * (-s * dx + c * dy) + dsy * (-c * dx - s * dy);
        }
      dpar[3 * i] = static_cast<T>(gtx);
      dpar[3 * i + 1] = static_cast<T>(gty);
      dpar[3 * i + 2] = static_cast<T>(gth);
    }
    if (in.requires_grad) accumulate<T>(in, dimg);
    if (pn.requires_grad) accumulate<T>(pn, dpar);
  });
}

/// Applies a rigid motion to both planes of a complex image.
template <typename T>
ComplexImage<T> apply_rigid(const ComplexImage<T>& img, const RigidParams& p) {
  if (!p.finite()) throw ValueError("apply_rigid: non-finite parameters");
  const std::size_t h = img.height(), w = img.width();
  ComplexImage<T> out(h, w);
  detail::warp_sample(img.real.data(), out.real.data(), 1, h, w, p.tx, p.ty, p.theta);
  detail::warp_sample(img.imag.data(), out.imag.data(), 1, h, w, p.tx, p.ty, p.theta);
  return out;
}

template <typename T>
Tensor<T> apply_rigid(const Tensor<T>& plane, const RigidParams& p) {
  require_rank(plane.shape(), 2, "apply_rigid");
  if (!p.finite()) throw ValueError("apply_rigid: non-finite parameters");
  Tensor<T> out(plane.shape());
  detail::warp_sample(plane.data(), out.data(), 1, plane.dim(0), plane.dim(1), p.tx, p.ty, p.theta);
  return out;
}

inline double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }
inline double radians(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace ddmc
