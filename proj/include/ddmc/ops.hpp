#pragma once

#include <cmath>

#include "ddmc/autodiff.hpp"

// Elementwise and structural primitives.

namespace ddmc {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (auto& in : n.inputs) accumulate<T>(*in, n.grad.values());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate<T>(*n.inputs[0], n.grad.values());
    if (n.inputs[1]->requires_grad) {
      std::vector<T> neg(n.grad.size());
      for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -n.grad[i];
      accumulate<T>(*n.inputs[1], neg);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& n) {
    std::vector<T> g(n.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * s;
    accumulate<T>(*n.inputs[0], g);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    std::vector<T> g(n.grad.size());
    if (n.inputs[0]->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[i];
      accumulate<T>(*n.inputs[0], g);
    }
    if (n.inputs[1]->requires_grad) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * av[i];
      accumulate<T>(*n.inputs[1], g);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_result<T>(Tensor<T>({1}, s), {a}, [](Node<T>& n) {
    std::vector<T> g(n.inputs[0]->value.size(), n.grad[0]);
    accumulate<T>(*n.inputs[0], g);
  });
}

/// Mean of squared differences over every element.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const std::size_t count = a.value().size();
  T s = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  const T inv = T(1) / static_cast<T>(count);
  return make_result<T>(Tensor<T>({1}, s * inv), {a, b}, [inv](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    const T k = T(2) * inv * n.grad[0];
    std::vector<T> g(av.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = k * (av[i] - bv[i]);
    accumulate<T>(*n.inputs[0], g);
    if (n.inputs[1]->requires_grad) {
      for (auto& v : g) v = -v;
      accumulate<T>(*n.inputs[1], g);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    const auto& x = n.inputs[0]->value;
    std::vector<T> g(x.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > T(0) ? n.grad[i] : T(0);
    accumulate<T>(*n.inputs[0], g);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    accumulate<T>(*n.inputs[0], n.grad.values());
  });
}

/// [N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W]
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  for (std::size_t ax : {0u, 2u, 3u})
    if (sa[ax] != sb[ax])
      throw ShapeError("concat_channels: extent mismatch on axis " + std::to_string(ax) + " (" +
                       std::to_string(sa[ax]) + " vs " + std::to_string(sb[ax]) + ")");
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<T> out({n, ca + cb, sa[2], sa[3]});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw, out.data() + i * (ca + cb) * hw + ca * hw);
  }
  return make_result<T>(std::move(out), {a, b}, [n, ca, cb, hw](Node<T>& nd) {
    if (nd.inputs[0]->requires_grad) {
      std::vector<T> g(n * ca * hw);
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(nd.grad.data() + i * (ca + cb) * hw, ca * hw, g.data() + i * ca * hw);
      accumulate<T>(*nd.inputs[0], g);
    }
    if (nd.inputs[1]->requires_grad) {
      std::vector<T> g(n * cb * hw);
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(nd.grad.data() + i * (ca + cb) * hw + ca * hw, cb * hw, g.data() + i * cb * hw);
      accumulate<T>(*nd.inputs[1], g);
    }
  });
}

/// Channels [begin, begin+count) of an N,C,H,W tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& a, std::size_t begin, std::size_t count) {
  require_rank(a.shape(), 4, "slice_channels");
  const auto& s = a.shape();
  if (begin + count > s[1])
    throw ShapeError("slice_channels: range exceeds channel axis 1 (" + std::to_string(s[1]) + ")");
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor<T> out({n, count, s[2], s[3]});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(a.value().data() + (i * c + begin) * hw, count * hw, out.data() + i * count * hw);
  return make_result<T>(std::move(out), {a}, [n, c, hw, begin, count](Node<T>& nd) {
    std::vector<T> g(n * c * hw, T(0));
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(nd.grad.data() + i * count * hw, count * hw, g.data() + (i * c + begin) * hw);
    accumulate<T>(*nd.inputs[0], g);
  });
}

/// Complex magnitude of a 2-channel (re, im) tensor: [N,2,H,W] -> [N,1,H,W].
/// `floor` keeps the derivative finite at the origin.
template <typename T>
Var<T> magnitude(const Var<T>& a, T floor = T(1e-12)) {
  require_rank(a.shape(), 4, "magnitude");
  const auto& s = a.shape();
  if (s[1] != 2) throw ShapeError("magnitude: channel axis 1 must be 2 (re, im)");
  const std::size_t n = s[0], hw = s[2] * s[3];
  Tensor<T> out({n, 1, s[2], s[3]});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      const T re = a.value()[(2 * i) * hw + p];
      const T im = a.value()[(2 * i + 1) * hw + p];
      out[i * hw + p] = std::sqrt(re * re + im * im + floor);
    }
  return make_result<T>(std::move(out), {a}, [n, hw](Node<T>& nd) {
    const auto& x = nd.inputs[0]->value;
    std::vector<T> g(x.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const T m = nd.value[i * hw + p];
        const T go = nd.grad[i * hw + p] / m;
        g[(2 * i) * hw + p] = go * x[(2 * i) * hw + p];
        g[(2 * i + 1) * hw + p] = go * x[(2 * i + 1) * hw + p];
      }
    accumulate<T>(*nd.inputs[0], g);
  });
}

}  // namespace ddmc
