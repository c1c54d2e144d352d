#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "ddmc/fourier.hpp"
#include "ddmc/ops.hpp"

namespace ddmc {

enum class Stage { synthesis = 0, registration = 1, reconstruction = 2 };
enum class DomainMode { image, kspace, dual };
/// How image-domain terms compare images: complex (both planes, as the losses
/// are written) or magnitude only.
enum class ImageLoss { complex, magnitude };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::synthesis: return "synthesis";
    case Stage::registration: return "registration";
    case Stage::reconstruction: return "reconstruction";
  }
  return "?";
}

inline const char* short_name(Stage s) {
  switch (s) {
    case Stage::synthesis: return "syn";
    case Stage::registration: return "reg";
    case Stage::reconstruction: return "rec";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "synthesis" || s == "syn") return Stage::synthesis;
  if (s == "registration" || s == "reg") return Stage::registration;
  if (s == "reconstruction" || s == "rec") return Stage::reconstruction;
  throw ConfigError("unknown stage '" + s + "' (expected synthesis|registration|reconstruction)");
}

inline const char* to_string(DomainMode m) {
  switch (m) {
    case DomainMode::image: return "image";
    case DomainMode::kspace: return "kspace";
    case DomainMode::dual: return "dual";
  }
  return "?";
}

inline DomainMode parse_domain_mode(const std::string& s) {
  if (s == "image") return DomainMode::image;
  if (s == "kspace") return DomainMode::kspace;
  if (s == "dual") return DomainMode::dual;
  throw ConfigError("unknown domain mode '" + s + "' (expected image|kspace|dual)");
}

inline const char* to_string(ImageLoss m) { return m == ImageLoss::complex ? "complex" : "magnitude"; }

inline ImageLoss parse_image_loss(const std::string& s) {
  if (s == "complex") return ImageLoss::complex;
  if (s == "magnitude") return ImageLoss::magnitude;
  throw ConfigError("unknown image loss '" + s + "' (expected complex|magnitude)");
}

inline bool uses_image_branch(DomainMode m) { return m != DomainMode::kspace; }
inline bool uses_kspace_branch(DomainMode m) { return m != DomainMode::image; }

struct LossWeights {
  double alpha = 1e-2;  // k-space weight
  double beta = 0.7;    // cross-domain consistency weight

  void validate() const {
    if (!(alpha > 0)) throw ValueError("LossWeights: alpha must be positive");
    if (!(beta >= 0)) throw ValueError("LossWeights: beta must be non-negative");
  }
};

inline constexpr std::array<const char*, 4> kComponentNames{"L_i", "L_k", "L_ik", "L_ki"};

/// Component values of one stage loss. Components a mode does not use are
/// absent (not applicable), never zero.
struct StageLossReport {
  Stage stage = Stage::synthesis;
  DomainMode mode = DomainMode::dual;
  std::map<std::string, std::optional<double>> components;
  double total = 0;

  std::optional<double> component(const std::string& name) const {
    auto it = components.find(name);
    return it == components.end() ? std::nullopt : it->second;
  }
};

/// total = L_i + alpha L_k + beta (L_ik + alpha L_ki), restricted to the
/// terms active in `mode`.
inline double stage_total(const StageLossReport& r, const LossWeights& w) {
  auto v = [&](const char* n) { return r.component(n).value_or(0.0); };
  switch (r.mode) {
    case DomainMode::image: return v("L_i");
    case DomainMode::kspace: return v("L_k");
    case DomainMode::dual: return v("L_i") + w.alpha * v("L_k") + w.beta * (v("L_ik") + w.alpha * v("L_ki"));
  }
  return 0;
}

/// Branch outputs of one stage, as [N,2,H,W] tensors: the image-branch result
/// (image domain) and the k-space-branch result (k-space). Either may be
/// absent in single-domain modes.
template <typename T>
struct StageOutputs {
  Var<T> image;
  Var<T> kspace;
};

template <typename T>
struct GroundTruth {
  Var<T> image;   // x_TC
  Var<T> kspace;  // y_TC
};

template <typename T>
struct StageLoss {
  Var<T> total;
  StageLossReport report;
};

namespace detail {
template <typename T>
Var<T> image_term(const Var<T>& a, const Var<T>& b, ImageLoss mode) {
  if (mode == ImageLoss::magnitude) return mse(magnitude(a), magnitude(b));
  return mse(a, b);
}
}  // namespace detail

/// Builds the differentiable stage loss. Every component is a mean squared
/// error over the real and imaginary planes (or magnitudes for image-side
/// terms in magnitude mode).
template <typename T>
StageLoss<T> stage_loss(Stage stage, const StageOutputs<T>& out, const GroundTruth<T>& gt, const LossWeights& w,
                        DomainMode mode, ImageLoss image_loss = ImageLoss::complex) {
  w.validate();
  const bool need_i = uses_image_branch(mode), need_k = uses_kspace_branch(mode);
  if (need_i && !out.image.valid())
    throw ValueError(std::string("stage_loss(") + to_string(stage) + "): missing image-branch output");
  if (need_k && !out.kspace.valid())
    throw ValueError(std::string("stage_loss(") + to_string(stage) + "): missing k-space-branch output");
  if (need_i && !gt.image.valid()) throw ValueError("stage_loss: missing image ground truth");
  if (need_k && !gt.kspace.valid()) throw ValueError("stage_loss: missing k-space ground truth");

  StageLossReport rep;
  rep.stage = stage;
  rep.mode = mode;
  for (const char* n : kComponentNames) rep.components[n] = std::nullopt;

  Var<T> total;
  if (mode == DomainMode::image) {
    total = detail::image_term(out.image, gt.image, image_loss);
    rep.components["L_i"] = total.item();
  } else if (mode == DomainMode::kspace) {
    total = mse(out.kspace, gt.kspace);
    rep.components["L_k"] = total.item();
  } else {
    Var<T> li = detail::image_term(out.image, gt.image, image_loss);
    Var<T> lk = mse(out.kspace, gt.kspace);
    Var<T> lik = detail::image_term(ifft2c(out.kspace), gt.image, image_loss);
    Var<T> lki = mse(fft2c(out.image), gt.kspace);
    const T a = static_cast<T>(w.alpha), b = static_cast<T>(w.beta);
    total = add(add(li, scale(lk, a)), scale(add(lik, scale(lki, a)), b));
    rep.components["L_i"] = li.item();
    rep.components["L_k"] = lk.item();
    rep.components["L_ik"] = lik.item();
    rep.components["L_ki"] = lki.item();
  }
  rep.total = total.item();
  return {total, rep};
}

/// Gaps (|L_ik - L_k|, |L_ki - L_i|) between each cross-domain term and its
/// same-domain counterpart, evaluated without recording a graph.
template <typename T>
std::pair<double, double> parseval_collapse_check(const StageOutputs<T>& out, const GroundTruth<T>& gt,
                                                  ImageLoss image_loss = ImageLoss::complex) {
  NoGradGuard guard;
  auto r = stage_loss(Stage::reconstruction, out, gt, LossWeights{}, DomainMode::dual, image_loss).report;
  return {std::abs(*r.component("L_ik") - *r.component("L_k")), std::abs(*r.component("L_ki") - *r.component("L_i"))};
}

}  // namespace ddmc
