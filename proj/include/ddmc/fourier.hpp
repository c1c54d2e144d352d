#pragma once

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "ddmc/autodiff.hpp"

namespace ddmc {

/// Complex raster in the image domain, stored as paired [H,W] planes.
template <typename T>
struct ComplexImage {
  Tensor<T> real;
  Tensor<T> imag;

  ComplexImage() = default;
  ComplexImage(std::size_t h, std::size_t w) : real({h, w}), imag({h, w}) {}
  ComplexImage(Tensor<T> re, Tensor<T> im) : real(std::move(re)), imag(std::move(im)) {
    require_rank(real.shape(), 2, "ComplexImage");
    require_same_shape(real.shape(), imag.shape(), "ComplexImage");
  }
  static ComplexImage from_real(Tensor<T> re) {
    Tensor<T> im(re.shape());
    return ComplexImage(std::move(re), std::move(im));
  }

  std::size_t height() const { return real.dim(0); }
  std::size_t width() const { return real.dim(1); }
  bool operator==(const ComplexImage&) const = default;
};

/// Complex raster in k-space. DC sits at (H/2, W/2).
template <typename T>
struct KSpaceGrid {
  Tensor<T> real;
  Tensor<T> imag;
  bool centered = true;

  KSpaceGrid() = default;
  KSpaceGrid(std::size_t h, std::size_t w) : real({h, w}), imag({h, w}) {}
  KSpaceGrid(Tensor<T> re, Tensor<T> im) : real(std::move(re)), imag(std::move(im)) {
    require_rank(real.shape(), 2, "KSpaceGrid");
    require_same_shape(real.shape(), imag.shape(), "KSpaceGrid");
  }

  std::size_t height() const { return real.dim(0); }
  std::size_t width() const { return real.dim(1); }
  bool operator==(const KSpaceGrid&) const = default;
};

namespace detail {

// Mixed-radix Cooley-Tukey plan for one length. Prime factors are handled
// with a direct butterfly, so every length is supported.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n) : n_(n), twiddle_(n) {
    for (std::size_t j = 0; j < n; ++j)
      twiddle_[j] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(j) / n);
    std::size_t m = n;
    for (std::size_t p = 2; m > 1;) {
      if (m % p == 0) {
        factors_.push_back(p);
        m /= p;
      } else {
        p = (p * p > m) ? m : p + 1;
      }
    }
  }

  std::size_t size() const { return n_; }

  // In-place transform of `n_` elements spaced by `stride`.
  void run(std::complex<double>* data, std::size_t stride, bool inverse,
           std::vector<std::complex<double>>& work, std::vector<std::complex<double>>& buf) const {
    if (n_ <= 1) return;
    work.resize(n_);
    buf.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) work[i] = data[i * stride];
    recurse(work.data(), 1, buf.data(), n_, 0, inverse);
    for (std::size_t i = 0; i < n_; ++i) data[i * stride] = buf[i];
  }

 private:
  // out[0..n) = DFT of in[0], in[s], ..., in[(n-1)s]
  void recurse(const std::complex<double>* in, std::size_t s, std::complex<double>* out,
               std::size_t n, std::size_t level, bool inverse) const {
    if (n == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t p = factors_[level];
    const std::size_t m = n / p;
    for (std::size_t q = 0; q < p; ++q) recurse(in + q * s, s * p, out + q * m, m, level + 1, inverse);
    const std::size_t tw_step = n_ / n;
    std::complex<double> small[16];
    std::vector<std::complex<double>> big;
    std::complex<double>* tmp = small;
    if (p > 16) {
      big.resize(p);
      tmp = big.data();
    }
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t r = 0; r < p; ++r) {
        std::complex<double> acc = 0;
        const std::size_t idx = k + m * r;
        for (std::size_t q = 0; q < p; ++q) {
          const std::size_t e = (q * idx % n) * tw_step;
          const auto w = inverse ? std::conj(twiddle_[e]) : twiddle_[e];
          acc += out[q * m + k] * w;
        }
        tmp[r] = acc;
      }
      for (std::size_t r = 0; r < p; ++r) out[k + m * r] = tmp[r];
    }
  }

  std::size_t n_;
  std::vector<std::complex<double>> twiddle_;
  std::vector<std::size_t> factors_;
};

inline std::shared_ptr<const FftPlan> fft_plan(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const FftPlan>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_shared<const FftPlan>(n);
  return slot;
}

// Centered orthonormal 2D transform of one plane pair. The input is
// ifftshift-ed, transformed along both axes, fftshift-ed and scaled 1/sqrt(HW).
template <typename T>
void centered_fft2(const T* re, const T* im, T* ore, T* oim, std::size_t h, std::size_t w,
                   bool inverse) {
  std::vector<std::complex<double>> grid(h * w);
  // ifftshift: position i reads source (i + n/2) % n
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = (y + h / 2) % h, sx = (x + w / 2) % w;
      grid[y * w + x] = {static_cast<double>(re[sy * w + sx]), static_cast<double>(im[sy * w + sx])};
    }
  std::vector<std::complex<double>> work, buf;
  auto rows = fft_plan(w);
  for (std::size_t y = 0; y < h; ++y) rows->run(grid.data() + y * w, 1, inverse, work, buf);
  auto cols = fft_plan(h);
  for (std::size_t x = 0; x < w; ++x) cols->run(grid.data() + x, w, inverse, work, buf);
  const double norm = 1.0 / std::sqrt(static_cast<double>(h * w));
  // fftshift: source i lands at (i + n/2) % n
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t dy = (y + h / 2) % h, dx = (x + w / 2) % w;
      const auto v = grid[y * w + x] * norm;
      ore[dy * w + dx] = static_cast<T>(v.real());
      oim[dy * w + dx] = static_cast<T>(v.imag());
    }
}

// Applies the transform to every (re, im) channel pair of an N,2,H,W tensor.
template <typename T>
Tensor<T> centered_fft2_batch(const Tensor<T>& x, bool inverse) {
  require_rank(x.shape(), 4, inverse ? "ifft2c" : "fft2c");
  if (x.dim(1) != 2)
    throw ShapeError(std::string(inverse ? "ifft2c" : "fft2c") +
                     ": channel axis 1 must be 2 (re, im), got " + std::to_string(x.dim(1)));
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    centered_fft2(x.data() + 2 * i * hw, x.data() + (2 * i + 1) * hw, out.data() + 2 * i * hw,
                  out.data() + (2 * i + 1) * hw, h, w, inverse);
  return out;
}

}  // namespace detail

template <typename T>
KSpaceGrid<T> fft2c(const ComplexImage<T>& img) {
  KSpaceGrid<T> k(img.height(), img.width());
  detail::centered_fft2(img.real.data(), img.imag.data(), k.real.data(), k.imag.data(), img.height(),
                        img.width(), false);
  return k;
}

template <typename T>
ComplexImage<T> ifft2c(const KSpaceGrid<T>& k) {
  ComplexImage<T> img(k.height(), k.width());
  detail::centered_fft2(k.real.data(), k.imag.data(), img.real.data(), img.imag.data(), k.height(),
                        k.width(), true);
  return img;
}

/// Differentiable centered orthonormal forward transform on [N,2,H,W]. The
/// transform is unitary, so its adjoint (the backward pass) is the inverse.
template <typename T>
Var<T> fft2c(const Var<T>& x) {
  return make_result<T>(detail::centered_fft2_batch(x.value(), false), {x}, [](Node<T>& n) {
    auto g = detail::centered_fft2_batch(n.grad, true);
    accumulate<T>(*n.inputs[0], g.values());
  });
}

template <typename T>
Var<T> ifft2c(const Var<T>& x) {
  return make_result<T>(detail::centered_fft2_batch(x.value(), true), {x}, [](Node<T>& n) {
    auto g = detail::centered_fft2_batch(n.grad, false);
    accumulate<T>(*n.inputs[0], g.values());
  });
}

/// Packs complex rasters into a [N,2,H,W] tensor (channel 0 real, 1 imag).
template <typename T, typename Complex>
Tensor<T> pack_complex(const std::vector<const Complex*>& items) {
  if (items.empty()) throw ValueError("pack_complex: empty batch");
  const std::size_t h = items[0]->real.dim(0), w = items[0]->real.dim(1), hw = h * w;
  Tensor<T> out({items.size(), 2, h, w});
  for (std::size_t i = 0; i < items.size(); ++i) {
    require_same_shape(items[i]->real.shape(), items[0]->real.shape(), "pack_complex");
    for (std::size_t p = 0; p < hw; ++p) {
      out[2 * i * hw + p] = static_cast<T>(items[i]->real[p]);
      out[(2 * i + 1) * hw + p] = static_cast<T>(items[i]->imag[p]);
    }
  }
  return out;
}

template <typename T, typename Complex>
Tensor<T> pack_complex(const Complex& item) {
  return pack_complex<T, Complex>(std::vector<const Complex*>{&item});
}

/// Extracts sample `i` of a [N,2,H,W] tensor.
template <typename Complex, typename T>
Complex unpack_complex(const Tensor<T>& t, std::size_t i) {
  require_rank(t.shape(), 4, "unpack_complex");
  const std::size_t h = t.dim(2), w = t.dim(3), hw = h * w;
  using U = typename decltype(Complex{}.real)::value_type;
  Tensor<U> re({h, w}), im({h, w});
  for (std::size_t p = 0; p < hw; ++p) {
    re[p] = static_cast<U>(t[2 * i * hw + p]);
    im[p] = static_cast<U>(t[(2 * i + 1) * hw + p]);
  }
  return Complex(std::move(re), std::move(im));
}

}  // namespace ddmc
