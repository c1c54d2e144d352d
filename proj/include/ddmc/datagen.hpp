#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

#include "ddmc/geometry.hpp"
#include "ddmc/params.hpp"
#include "ddmc/rng.hpp"

namespace ddmc {

/// Tissue classes of the synthetic head phantom.
enum class Tissue : std::uint8_t { background = 0, scalp, grey, white, fluid, lesion };
inline constexpr std::size_t kTissueCount = 6;

struct PhantomSpec {
  std::size_t size = 64;
  std::size_t n_structures = 12;
  // Brightness per tissue class. Reference mimics T1w, target mimics T2w:
  // fluid is dark in the reference and the brightest class in the target.
  std::array<double, kTissueCount> ref_intensity{0.0, 1.0, 0.55, 0.78, 0.12, 0.35};
  std::array<double, kTissueCount> tgt_intensity{0.0, 0.72, 0.58, 0.38, 1.0, 0.84};
  std::uint64_t seed = 0;
  double blur_sigma = 0.6;  // pixels
};

struct ContrastPairRecord {
  std::uint64_t record_id = 0;
  std::uint64_t seed = 0;
  ComplexImage<float> ref_aligned;
  ComplexImage<float> tgt;
  ComplexImage<float> ref_moved;
  RigidParams true_motion;
  Tensor<std::uint8_t> brain_mask;
  Tensor<std::uint8_t> tissue;  // class map; not serialised

  std::size_t size() const { return tgt.height(); }
};

namespace detail {

struct Ellipse {
  double cx, cy, a, b, angle;
  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * (x - cx) + s * (y - cy)) / a;
    const double v = (-s * (x - cx) + c * (y - cy)) / b;
    return u * u + v * v <= 1.0;
  }
};

inline Tensor<float> gaussian_blur(const Tensor<float>& img, double sigma) {
  if (sigma <= 0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  const long h = static_cast<long>(img.dim(0)), w = static_cast<long>(img.dim(1));
  Tensor<float> tmp(img.shape()), out(img.shape());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const long xx = x + i;
        if (xx >= 0 && xx < w) acc += k[i + radius] * img[y * w + xx];
      }
      tmp[y * w + x] = static_cast<float>(acc);
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const long yy = y + i;
        if (yy >= 0 && yy < h) acc += k[i + radius] * tmp[yy * w + x];
      }
      out[y * w + x] = static_cast<float>(acc);
    }
  return out;
}

}  // namespace detail

/// Per-slice min-max scaling of the magnitude to [0, 1]. The phase of each
/// pixel is kept. A constant image maps to zeros.
template <typename T>
ComplexImage<T> normalize(const ComplexImage<T>& img) {
  const std::size_t n = img.real.size();
  std::vector<double> mag(n);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    mag[i] = std::hypot(static_cast<double>(img.real[i]), static_cast<double>(img.imag[i]));
    lo = std::min(lo, mag[i]);
    hi = std::max(hi, mag[i]);
  }
  ComplexImage<T> out(img.height(), img.width());
  if (!(hi > lo)) {
    std::clog << "ddmc: normalize: constant image mapped to zeros\n";
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double scaled = (mag[i] - lo) / (hi - lo);
    if (mag[i] > 0) {
      out.real[i] = static_cast<T>(img.real[i] * (scaled / mag[i]));
      out.imag[i] = static_cast<T>(img.imag[i] * (scaled / mag[i]));
    } else {
      out.real[i] = static_cast<T>(scaled);
    }
  }
  return out;
}

/// Draws one head phantom and renders both contrasts from the same geometry.
/// The record carries no motion yet (ref_moved = ref_aligned).
inline ContrastPairRecord gen_phantom_pair(const PhantomSpec& spec, std::uint64_t id) {
  if (spec.size == 0 || spec.size % 2) throw ValueError("gen_phantom_pair: size must be even and positive");
  if (spec.n_structures < 1) throw ValueError("gen_phantom_pair: n_structures must be >= 1");
  if (spec.ref_intensity[0] != 0.0 || spec.tgt_intensity[0] != 0.0)
    throw ValueError("gen_phantom_pair: background must map to 0 in both contrasts");
  const std::uint64_t seed = derive_seed(spec.seed, id);
  Rng rng(seed);
  const double half = spec.size / 2.0;
  const double ctr = (static_cast<double>(spec.size) - 1) / 2;

  const double hx = ctr + rng.uniform(-0.03, 0.03) * half;
  const double hy = ctr + rng.uniform(-0.03, 0.03) * half;
  const double ha = rng.uniform(0.66, 0.74) * half;
  const double hb = rng.uniform(0.78, 0.86) * half;
  const double hang = rng.uniform(-0.15, 0.15);
  const double shrink = rng.uniform(0.84, 0.88);
  const detail::Ellipse head{hx, hy, ha, hb, hang};
  const detail::Ellipse brain{hx, hy, ha * shrink, hb * shrink, hang};
  const detail::Ellipse white{hx + rng.uniform(-0.04, 0.04) * half, hy + rng.uniform(-0.04, 0.04) * half,
                              ha * shrink * rng.uniform(0.55, 0.7), hb * shrink * rng.uniform(0.55, 0.7),
                              hang + rng.uniform(-0.2, 0.2)};
  std::vector<std::pair<detail::Ellipse, Tissue>> shapes;
  shapes.push_back({white, Tissue::white});
  // ventricles
  const double vgap = rng.uniform(0.06, 0.1) * half;
  for (double side : {-1.0, 1.0})
    shapes.push_back({{hx + side * vgap, hy + rng.uniform(-0.05, 0.05) * half, rng.uniform(0.05, 0.08) * half,
                       rng.uniform(0.14, 0.22) * half, side * rng.uniform(0.1, 0.35)},
                      Tissue::fluid});
  constexpr Tissue kinds[] = {Tissue::grey, Tissue::white, Tissue::fluid, Tissue::lesion};
  for (std::size_t i = 0; i < spec.n_structures; ++i) {
    const double r = std::sqrt(rng.uniform()) * 0.8;
    const double phi = rng.uniform(0, 2 * std::numbers::pi);
    const double cx = hx + r * std::cos(phi) * brain.a;
    const double cy = hy + r * std::sin(phi) * brain.b;
    const double a = rng.uniform(0.04, 0.16) * half;
    const double b = a * rng.uniform(0.5, 1.6);
    shapes.push_back({{cx, cy, a, b, rng.uniform(0, std::numbers::pi)}, kinds[rng.below(4)]});
  }

  const std::size_t n = spec.size;
  Tensor<std::uint8_t> tissue({n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      Tissue t = Tissue::background;
      if (head.contains(px, py)) t = Tissue::scalp;
      if (brain.contains(px, py)) {
        t = Tissue::grey;
        for (const auto& [e, kind] : shapes)
          if (e.contains(px, py)) t = kind;
      }
      tissue[y * n + x] = static_cast<std::uint8_t>(t);
    }

  auto render = [&](const std::array<double, kTissueCount>& table) {
    Tensor<float> img({n, n});
    for (std::size_t i = 0; i < n * n; ++i) img[i] = static_cast<float>(table[tissue[i]]);
    Tensor<float> smooth = detail::gaussian_blur(img, spec.blur_sigma);
    for (std::size_t i = 0; i < n * n; ++i)
      if (tissue[i] == 0) smooth[i] = 0.0f;
    return normalize(ComplexImage<float>::from_real(std::move(smooth)));
  };

  ContrastPairRecord rec;
  rec.record_id = id;
  rec.seed = seed;
  rec.ref_aligned = render(spec.ref_intensity);
  rec.tgt = render(spec.tgt_intensity);
  rec.ref_moved = rec.ref_aligned;
  rec.brain_mask = Tensor<std::uint8_t>({n, n});
  for (std::size_t i = 0; i < n * n; ++i) rec.brain_mask[i] = tissue[i] != 0;
  rec.tissue = std::move(tissue);
  return rec;
}

struct MotionRange {
  double rot_deg = 10.0;
  double trans_mm = 15.0;
  double mm_per_px = 1.0;
};

/// Samples theta in +-rot_deg and tx, ty in +-trans_mm/mm_per_px, and moves
/// the reference contrast. The target is left untouched.
inline ContrastPairRecord augment_motion(ContrastPairRecord rec, const MotionRange& range, std::uint64_t seed) {
  if (range.rot_deg < 0 || range.trans_mm < 0 || !(range.mm_per_px > 0))
    throw ValueError("augment_motion: ranges must be non-negative and mm_per_px positive");
  Rng rng(seed);
  const double tmax = range.trans_mm / range.mm_per_px;
  RigidParams p;
  p.theta = radians(rng.uniform(-range.rot_deg, range.rot_deg));
  p.tx = rng.uniform(-tmax, tmax);
  p.ty = rng.uniform(-tmax, tmax);
  rec.true_motion = p;
  rec.ref_moved = apply_rigid(rec.ref_aligned, p);
  return rec;
}

// ---------------------------------------------------------------------------
// Record file: "DDMR" | u16 version | JSON header + '\n' | payload.
// Payload planes in order: ref_aligned re/im, tgt re/im, ref_moved re/im as
// float32 little-endian, then brain_mask as u8.

inline constexpr std::uint16_t kRecordVersion = 1;

inline std::vector<std::uint8_t> encode_record(const ContrastPairRecord& rec) {
  using nlohmann::json;
  const std::size_t n = rec.size();
  const std::size_t plane_bytes = n * n * sizeof(float);
  const char* names[] = {"ref_aligned.re", "ref_aligned.im", "tgt.re", "tgt.im", "ref_moved.re", "ref_moved.im"};
  json fields = json::array();
  std::size_t off = 0;
  for (const char* nm : names) {
    fields.push_back({{"name", nm}, {"offset", off}, {"bytes", plane_bytes}, {"dtype", "f32"}});
    off += plane_bytes;
  }
  fields.push_back({{"name", "brain_mask"}, {"offset", off}, {"bytes", n * n}, {"dtype", "u8"}});
  json header = {{"record_id", rec.record_id},
                 {"size", n},
                 {"seed", rec.seed},
                 {"true_motion", {{"tx", rec.true_motion.tx}, {"ty", rec.true_motion.ty}, {"theta", rec.true_motion.theta}}},
                 {"fields", fields}};
  std::vector<std::uint8_t> out{'D', 'D', 'M', 'R'};
  out.push_back(kRecordVersion & 0xff);
  out.push_back(kRecordVersion >> 8);
  const std::string hs = header.dump() + "\n";
  out.insert(out.end(), hs.begin(), hs.end());
  for (const auto* t : {&rec.ref_aligned.real, &rec.ref_aligned.imag, &rec.tgt.real, &rec.tgt.imag,
                        &rec.ref_moved.real, &rec.ref_moved.imag}) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(t->data());
    out.insert(out.end(), b, b + plane_bytes);
  }
  out.insert(out.end(), rec.brain_mask.data(), rec.brain_mask.data() + n * n);
  return out;
}

inline ContrastPairRecord decode_record(std::span<const std::uint8_t> bytes, const std::string& origin = "record") {
  using nlohmann::json;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DDMR", 4) != 0)
    throw FormatError(ErrorKind::bad_magic, origin + ": bad magic (expected \"DDMR\")");
  if (bytes.size() < 6) throw FormatError(ErrorKind::truncated, origin + ": truncated before version");
  const std::uint16_t ver = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (ver != kRecordVersion)
    throw FormatError(ErrorKind::bad_version, origin + ": record version " + std::to_string(ver) +
                                                  " unsupported (expected " + std::to_string(kRecordVersion) + ")");
  const auto* begin = bytes.data() + 6;
  const auto* end = bytes.data() + bytes.size();
  const auto* nl = std::find(begin, end, static_cast<std::uint8_t>('\n'));
  if (nl == end) throw FormatError(ErrorKind::truncated, origin + ": header not terminated");
  json header;
  try {
    header = json::parse(begin, nl);
  } catch (const json::exception& e) {
    throw FormatError(ErrorKind::bad_magic, origin + ": malformed header: " + e.what());
  }
  ContrastPairRecord rec;
  std::size_t n = 0;
  try {
    rec.record_id = header.at("record_id").get<std::uint64_t>();
    rec.seed = header.at("seed").get<std::uint64_t>();
    n = header.at("size").get<std::size_t>();
    const auto& m = header.at("true_motion");
    rec.true_motion = {m.at("tx").get<double>(), m.at("ty").get<double>(), m.at("theta").get<double>()};
  } catch (const json::exception& e) {
    throw FormatError(ErrorKind::bad_magic, origin + ": header field error: " + e.what());
  }
  const std::size_t payload_start = static_cast<std::size_t>(nl - bytes.data()) + 1;
  const std::size_t expected = 6 * n * n * sizeof(float) + n * n;
  const std::size_t actual = bytes.size() - payload_start;
  if (actual < expected)
    throw FormatError(ErrorKind::truncated, origin + ": truncated payload: expected " + std::to_string(expected) +
                                                " bytes, found " + std::to_string(actual));
  const std::uint8_t* p = bytes.data() + payload_start;
  auto plane = [&]() {
    Tensor<float> t({n, n});
    std::memcpy(t.data(), p, n * n * sizeof(float));
    p += n * n * sizeof(float);
    return t;
  };
  auto ar = plane();
  auto ai = plane();
  rec.ref_aligned = ComplexImage<float>(std::move(ar), std::move(ai));
  auto tr = plane();
  auto ti = plane();
  rec.tgt = ComplexImage<float>(std::move(tr), std::move(ti));
  auto mr = plane();
  auto mi = plane();
  rec.ref_moved = ComplexImage<float>(std::move(mr), std::move(mi));
  rec.brain_mask = Tensor<std::uint8_t>({n, n});
  std::memcpy(rec.brain_mask.data(), p, n * n);
  return rec;
}

inline void write_record(const ContrastPairRecord& rec, const std::string& path) {
  write_file_bytes(path, encode_record(rec));
}

inline ContrastPairRecord read_record(const std::string& path) {
  return decode_record(read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------

struct DatasetConfig {
  PhantomSpec phantom;
  MotionRange motion{10.0, 15.0, 192.0 / 64.0};  // 1 mm pixels at 192, scaled to the 64 default
  std::size_t n_train = 200, n_val = 40, n_test = 60;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::vector<std::uint64_t> train, val, test;
  std::uint64_t seed = 0;
  std::size_t size = 0;
  MotionRange motion;

  std::size_t total() const { return train.size() + val.size() + test.size(); }
};

/// Record-level split of ids 0..total-1, shuffled by the global seed.
inline DatasetManifest make_manifest(const DatasetConfig& cfg) {
  DatasetManifest m;
  m.seed = cfg.seed;
  m.size = cfg.phantom.size;
  m.motion = cfg.motion;
  std::vector<std::uint64_t> ids(cfg.n_train + cfg.n_val + cfg.n_test);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  Rng rng(derive_seed(cfg.seed, 0x5117));
  rng.shuffle(ids.begin(), ids.end());
  m.train.assign(ids.begin(), ids.begin() + static_cast<long>(cfg.n_train));
  m.val.assign(ids.begin() + static_cast<long>(cfg.n_train), ids.begin() + static_cast<long>(cfg.n_train + cfg.n_val));
  m.test.assign(ids.begin() + static_cast<long>(cfg.n_train + cfg.n_val), ids.end());
  return m;
}

/// Generates one fully prepared record. The sub-seed depends only on
/// (global seed, id), so generation order does not matter.
inline ContrastPairRecord generate_record(const DatasetConfig& cfg, std::uint64_t id) {
  PhantomSpec spec = cfg.phantom;
  spec.seed = cfg.seed;
  auto rec = gen_phantom_pair(spec, id);
  const std::uint64_t motion_seed = derive_seed(rec.seed, 0x3071);
  return augment_motion(std::move(rec), cfg.motion, motion_seed);
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return {{"seed", m.seed},
          {"size", m.size},
          {"motion", {{"rot_deg", m.motion.rot_deg}, {"trans_mm", m.motion.trans_mm}, {"mm_per_px", m.motion.mm_per_px}}},
          {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
          {"counts", {{"train", m.train.size()}, {"val", m.val.size()}, {"test", m.test.size()}}}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.size = j.at("size").get<std::size_t>();
    const auto& mo = j.at("motion");
    m.motion = {mo.at("rot_deg").get<double>(), mo.at("trans_mm").get<double>(), mo.at("mm_per_px").get<double>()};
    m.train = j.at("splits").at("train").get<std::vector<std::uint64_t>>();
    m.val = j.at("splits").at("val").get<std::vector<std::uint64_t>>();
    m.test = j.at("splits").at("test").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(ErrorKind::bad_magic, std::string("manifest: ") + e.what());
  }
  return m;
}

}  // namespace ddmc
