#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ddmc/fourier.hpp"

namespace ddmc {

inline constexpr double kPsnrCap = 100.0;

struct MetricResult {
  double psnr = 0;
  double ssim = 0;
  std::size_t n_pixels = 0;
};

template <typename T>
std::vector<double> magnitude_of(const ComplexImage<T>& img) {
  std::vector<double> m(img.real.size());
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = std::hypot(static_cast<double>(img.real[i]), static_cast<double>(img.imag[i]));
  return m;
}

inline std::size_t check_mask(const Tensor<std::uint8_t>& mask, std::size_t h, std::size_t w, const char* op) {
  require_same_shape(mask.shape(), Shape{h, w}, op);
  std::size_t n = 0;
  for (auto v : mask.values()) n += v != 0;
  if (n == 0) throw ValueError(std::string(op) + ": mask is empty");
  return n;
}

/// 10 log10(peak^2 / MSE) over magnitudes at masked pixels, capped at 100 dB.
template <typename T>
double psnr(const ComplexImage<T>& a, const ComplexImage<T>& b, const Tensor<std::uint8_t>& mask, double peak = 1.0) {
  require_same_shape(a.real.shape(), b.real.shape(), "psnr");
  const std::size_t n = check_mask(mask, a.height(), a.width(), "psnr");
  const auto ma = magnitude_of(a), mb = magnitude_of(b);
  double se = 0;
  for (std::size_t i = 0; i < ma.size(); ++i)
    if (mask[i]) se += (ma[i] - mb[i]) * (ma[i] - mb[i]);
  const double mse = se / static_cast<double>(n);
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

namespace detail {

inline long reflect_index(long i, long n) {
  // symmetric reflection: -1 -> 0, n -> n-1
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

inline std::vector<double> separable_filter(const std::vector<double>& img, long h, long w,
                                            const std::vector<double>& k) {
  const long r = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(img.size()), out(img.size());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * img[y * w + reflect_index(x + i, w)];
      tmp[y * w + x] = acc;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp[reflect_index(y + i, h) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

inline std::vector<double> gaussian_window(const SsimParams& p) {
  std::vector<double> k(p.window);
  const int r = p.window / 2;
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (p.sigma * p.sigma));
  for (auto& v : k) v /= total;
  return k;
}

}  // namespace detail

/// Local SSIM map on magnitudes with a Gaussian window and symmetric border
/// reflection.
inline std::vector<double> ssim_map(const std::vector<double>& a, const std::vector<double>& b, std::size_t h,
                                    std::size_t w, const SsimParams& p = {}) {
  if (static_cast<long>(h) < p.window || static_cast<long>(w) < p.window)
    throw ShapeError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the " +
                     std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
  const auto k = detail::gaussian_window(p);
  const long hh = static_cast<long>(h), ww = static_cast<long>(w);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu1 = detail::separable_filter(a, hh, ww, k);
  const auto mu2 = detail::separable_filter(b, hh, ww, k);
  const auto e11 = detail::separable_filter(aa, hh, ww, k);
  const auto e22 = detail::separable_filter(bb, hh, ww, k);
  const auto e12 = detail::separable_filter(ab, hh, ww, k);
  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  std::vector<double> map(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double s11 = e11[i] - mu1[i] * mu1[i];
    const double s22 = e22[i] - mu2[i] * mu2[i];
    const double s12 = e12[i] - mu1[i] * mu2[i];
    map[i] = ((2 * mu1[i] * mu2[i] + c1) * (2 * s12 + c2)) /
             ((mu1[i] * mu1[i] + mu2[i] * mu2[i] + c1) * (s11 + s22 + c2));
  }
  return map;
}

/// Mean of the local SSIM map over masked pixels.
template <typename T>
double ssim(const ComplexImage<T>& a, const ComplexImage<T>& b, const Tensor<std::uint8_t>& mask,
            const SsimParams& p = {}) {
  require_same_shape(a.real.shape(), b.real.shape(), "ssim");
  const std::size_t n = check_mask(mask, a.height(), a.width(), "ssim");
  const auto map = ssim_map(magnitude_of(a), magnitude_of(b), a.height(), a.width(), p);
  double acc = 0;
  for (std::size_t i = 0; i < map.size(); ++i)
    if (mask[i]) acc += map[i];
  return acc / static_cast<double>(n);
}

template <typename T>
MetricResult evaluate_pair(const ComplexImage<T>& out, const ComplexImage<T>& truth, const Tensor<std::uint8_t>& mask) {
  MetricResult r;
  r.psnr = psnr(out, truth, mask);
  r.ssim = ssim(out, truth, mask);
  r.n_pixels = check_mask(mask, out.height(), out.width(), "evaluate");
  return r;
}

// ---------------------------------------------------------------------------
// Rendering

/// 8-bit grayscale raster.
struct Gray8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Maps magnitudes in [0, 1] (times `gain`) to 0..255, clipping above.
inline Gray8 to_gray(const std::vector<double>& values, std::size_t h, std::size_t w, double gain = 1.0) {
  Gray8 g{w, h, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp(values[i] * gain, 0.0, 1.0);
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return g;
}

/// |a - b| on magnitudes scaled by `gain`; identical inputs give all zeros.
template <typename T>
Gray8 error_map(const ComplexImage<T>& a, const ComplexImage<T>& b, double gain = 5.0) {
  require_same_shape(a.real.shape(), b.real.shape(), "error_map");
  const auto ma = magnitude_of(a), mb = magnitude_of(b);
  std::vector<double> d(ma.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::abs(ma[i] - mb[i]);
  return to_gray(d, a.height(), a.width(), gain);
}

template <typename T>
Gray8 magnitude_image(const ComplexImage<T>& a) {
  return to_gray(magnitude_of(a), a.height(), a.width());
}

/// Binary PGM: "P5\n<w> <h>\n255\n" followed by w*h bytes.
inline void write_pgm(const Gray8& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Panels of one record for the report: name -> image.
template <typename T>
struct ReportItem {
  std::uint64_t record_id = 0;
  ComplexImage<T> ground_truth;
  Tensor<std::uint8_t> mask;
  std::vector<std::pair<std::string, ComplexImage<T>>> panels;  // e.g. zero_filled, synthesis, ..., final
};

/// Writes <id>_<panel>.pgm and <id>_<panel>_err.pgm per panel, <id>_gt.pgm,
/// and report.csv (record_id, panel, psnr, ssim).
template <typename T>
void render_report(const std::vector<ReportItem<T>>& items, const std::string& out_dir, double error_gain = 5.0) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("render_report: cannot create directory '" + out_dir + "'");
  std::ofstream csv(fs::path(out_dir) / "report.csv", std::ios::trunc);
  if (!csv) throw IoError("render_report: cannot write into '" + out_dir + "'");
  csv << "record_id,panel,psnr,ssim\n";
  csv.precision(10);
  for (const auto& it : items) {
    const std::string base = (fs::path(out_dir) / ("rec" + std::to_string(it.record_id))).string();
    write_pgm(magnitude_image(it.ground_truth), base + "_gt.pgm");
    for (const auto& [name, img] : it.panels) {
      write_pgm(magnitude_image(img), base + "_" + name + ".pgm");
      write_pgm(error_map(img, it.ground_truth, error_gain), base + "_" + name + "_err.pgm");
      csv << it.record_id << ',' << name << ',' << psnr(img, it.ground_truth, it.mask) << ','
          << ssim(img, it.ground_truth, it.mask) << '\n';
    }
  }
  if (!csv) throw IoError("render_report: write failed");
}

}  // namespace ddmc
