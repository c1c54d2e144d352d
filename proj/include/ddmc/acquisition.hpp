#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "ddmc/fourier.hpp"
#include "ddmc/rng.hpp"

namespace ddmc {

/// Cartesian line mask: whole k-space rows (phase-encode lines) are either
/// acquired or not, broadcast across columns.
struct SamplingMask {
  std::size_t height = 0;
  std::vector<bool> sampled;
  double acceleration = 1.0;
  std::uint64_t seed = 0;

  std::size_t count() const { return static_cast<std::size_t>(std::count(sampled.begin(), sampled.end(), true)); }
  std::vector<std::size_t> rows() const {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < sampled.size(); ++i)
      if (sampled[i]) r.push_back(i);
    return r;
  }
  /// Effective acceleration H / (sampled rows).
  double net_acceleration() const { return count() ? static_cast<double>(height) / count() : 0.0; }

  static SamplingMask full(std::size_t h) { return {h, std::vector<bool>(h, true), 1.0, 0}; }
  static SamplingMask empty(std::size_t h) { return {h, std::vector<bool>(h, false), 0.0, 0}; }

  bool operator==(const SamplingMask&) const = default;
};

struct MaskParams {
  std::size_t height = 64;
  double acceleration = 4.0;
  std::size_t n_center = 6;
  double sigma_frac = 0.25;
  std::uint64_t seed = 0;
};

/// Rows H/2 - n_center/2 ... H/2 + n_center/2 - 1 are always acquired; the
/// remaining floor(H/R) - n_center rows are drawn without replacement with
/// probability proportional to a Gaussian centred at H/2 (std sigma_frac*H).
inline SamplingMask make_mask(const MaskParams& p) {
  if (p.height == 0) throw ValueError("make_mask: height must be positive");
  if (!(p.acceleration >= 1.0)) throw ValueError("make_mask: acceleration must be >= 1");
  if (!(p.sigma_frac > 0.0 && p.sigma_frac <= 1.0))
    throw ValueError("make_mask: sigma_frac must lie in (0, 1]");
  const auto budget = static_cast<std::size_t>(std::floor(p.height / p.acceleration));
  if (budget < p.n_center)
    throw ValueError("make_mask: line budget " + std::to_string(budget) + " is smaller than the " +
                     std::to_string(p.n_center) + " centre lines");
  SamplingMask m{p.height, std::vector<bool>(p.height, false), p.acceleration, p.seed};
  const std::size_t c0 = p.height / 2 - p.n_center / 2;
  for (std::size_t i = 0; i < p.n_center; ++i) m.sampled[c0 + i] = true;

  // Weighted sampling without replacement via exponential keys: the k rows
  // with the smallest E_i / w_i, E_i ~ Exp(1), form a weighted draw.
  Rng rng(p.seed);
  const double centre = static_cast<double>(p.height) / 2.0;
  const double sigma = p.sigma_frac * static_cast<double>(p.height);
  std::vector<std::pair<double, std::size_t>> keys;
  for (std::size_t r = 0; r < p.height; ++r) {
    const double u = rng.uniform();
    if (m.sampled[r]) continue;
    const double d = (static_cast<double>(r) - centre) / sigma;
    const double log_w = -0.5 * d * d;
    const double e = -std::log1p(-u);
    keys.push_back({std::log(e) - log_w, r});
  }
  const std::size_t extra = budget - p.n_center;
  std::partial_sort(keys.begin(), keys.begin() + static_cast<long>(extra), keys.end());
  for (std::size_t i = 0; i < extra; ++i) m.sampled[keys[i].second] = true;
  return m;
}

inline void check_mask_shape(const SamplingMask& m, std::size_t h, const char* op) {
  if (m.height != h || m.sampled.size() != h)
    throw ShapeError(std::string(op) + ": mask height " + std::to_string(m.height) +
                     " does not match axis 0 extent " + std::to_string(h));
}

/// y_u = M (.) y
template <typename T>
KSpaceGrid<T> undersample(const KSpaceGrid<T>& y, const SamplingMask& m) {
  check_mask_shape(m, y.height(), "undersample");
  KSpaceGrid<T> out(y.height(), y.width());
  const std::size_t w = y.width();
  for (std::size_t r = 0; r < y.height(); ++r) {
    if (!m.sampled[r]) continue;
    std::copy_n(y.real.data() + r * w, w, out.real.data() + r * w);
    std::copy_n(y.imag.data() + r * w, w, out.imag.data() + r * w);
  }
  return out;
}

/// Zero-filled reconstruction: the inverse transform of the measured grid.
template <typename T>
ComplexImage<T> zero_filled(const KSpaceGrid<T>& y_u) {
  return ifft2c(y_u);
}

/// Hard data consistency: measured rows are taken from y_u, the rest from k_pred.
template <typename T>
KSpaceGrid<T> data_consistency(const KSpaceGrid<T>& k_pred, const KSpaceGrid<T>& y_u,
                               const SamplingMask& m) {
  require_same_shape(k_pred.real.shape(), y_u.real.shape(), "data_consistency");
  check_mask_shape(m, k_pred.height(), "data_consistency");
  KSpaceGrid<T> out = k_pred;
  const std::size_t w = k_pred.width();
  for (std::size_t r = 0; r < k_pred.height(); ++r) {
    if (!m.sampled[r]) continue;
    std::copy_n(y_u.real.data() + r * w, w, out.real.data() + r * w);
    std::copy_n(y_u.imag.data() + r * w, w, out.imag.data() + r * w);
  }
  return out;
}

/// Differentiable data consistency on [N,2,H,W] k-space tensors. The gradient
/// reaching `k_pred` is zero on sampled rows.
template <typename T>
Var<T> data_consistency(const Var<T>& k_pred, const Tensor<T>& y_u, const SamplingMask& m) {
  require_rank(k_pred.shape(), 4, "data_consistency");
  require_same_shape(k_pred.shape(), y_u.shape(), "data_consistency");
  const std::size_t planes = k_pred.shape()[0] * k_pred.shape()[1];
  const std::size_t h = k_pred.shape()[2], w = k_pred.shape()[3];
  check_mask_shape(m, h, "data_consistency");
  Tensor<T> out = k_pred.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < h; ++r)
      if (m.sampled[r]) std::copy_n(y_u.data() + (p * h + r) * w, w, out.data() + (p * h + r) * w);
  return make_result<T>(std::move(out), {k_pred}, [planes, h, w, rows = m.sampled](Node<T>& n) {
    std::vector<T> g(n.grad.values().begin(), n.grad.values().end());
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t r = 0; r < h; ++r)
        if (rows[r]) std::fill_n(g.data() + (p * h + r) * w, w, T(0));
    accumulate<T>(*n.inputs[0], g);
  });
}

/// Text mask file: line 1 "H R seed", line 2 the sampled row indices ascending.
inline void write_mask(const SamplingMask& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::ostringstream r;
  r << m.acceleration;
  out << m.height << ' ' << r.str() << ' ' << m.seed << '\n';
  const auto rows = m.rows();
  for (std::size_t i = 0; i < rows.size(); ++i) out << (i ? " " : "") << rows[i];
  out << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline SamplingMask read_mask(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  SamplingMask m;
  std::string header, body;
  if (!std::getline(in, header)) throw FormatError(ErrorKind::truncated, "mask file '" + path + "' is empty");
  std::istringstream hs(header);
  if (!(hs >> m.height >> m.acceleration >> m.seed))
    throw FormatError(ErrorKind::bad_magic, "mask file '" + path + "': malformed header");
  m.sampled.assign(m.height, false);
  std::getline(in, body);
  std::istringstream bs(body);
  std::size_t r, prev = 0;
  bool first = true;
  while (bs >> r) {
    if (r >= m.height || (!first && r <= prev))
      throw FormatError(ErrorKind::bad_magic, "mask file '" + path + "': row indices must be ascending and < H");
    m.sampled[r] = true;
    prev = r;
    first = false;
  }
  return m;
}

}  // namespace ddmc
