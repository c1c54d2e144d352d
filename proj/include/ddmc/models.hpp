#pragma once

#include <memory>
#include <numbers>
#include <string>

#include <nlohmann/json.hpp>

#include "ddmc/acquisition.hpp"
#include "ddmc/adam.hpp"
#include "ddmc/geometry.hpp"
#include "ddmc/layers.hpp"
#include "ddmc/params.hpp"

namespace ddmc {

enum class Domain { image, kspace };

// ---------------------------------------------------------------------------
// Parameter helpers. Layers are registered under dotted names, e.g.
// "enc0.conv1.weight", so serialised sets stay readable.

template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              Rng& rng, bool zero = false) {
  Tensor<T> w = zero ? Tensor<T>({cout, cin, k, k}) : kaiming_uniform<T>({cout, cin, k, k}, cin * k * k, rng);
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", Tensor<T>({cout}));
}

template <typename T>
void add_bn(ParamSet<T>& ps, const std::string& name, std::size_t c) {
  ps.add(name + ".gamma", Tensor<T>({c}, T(1)));
  ps.add(name + ".beta", Tensor<T>({c}));
  ps.add(name + ".running_mean", Tensor<T>({c}), false);
  ps.add(name + ".running_var", Tensor<T>({c}, T(1)), false);
}

template <typename T>
void add_fc(ParamSet<T>& ps, const std::string& name, std::size_t fin, std::size_t fout, Rng& rng, bool zero = false) {
  Tensor<T> w = zero ? Tensor<T>({fout, fin}) : kaiming_uniform<T>({fout, fin}, fin, rng);
  ps.add(name + ".weight", std::move(w));
  ps.add(name + ".bias", Tensor<T>({fout}));
}

template <typename T>
Var<T> apply_conv(ParamSet<T>& ps, const std::string& name, const Var<T>& x) {
  return conv2d(x, ps.get(name + ".weight"), ps.get(name + ".bias"));
}

template <typename T>
Var<T> apply_bn(ParamSet<T>& ps, const std::string& name, const Var<T>& x, bool training) {
  BatchNormStats<T> st{&ps.get(name + ".running_mean").mutable_value(),
                       &ps.get(name + ".running_var").mutable_value()};
  return batchnorm2d(x, ps.get(name + ".gamma"), ps.get(name + ".beta"), st, training);
}

template <typename T>
Var<T> conv_bn_relu(ParamSet<T>& ps, const std::string& conv, const std::string& bn, const Var<T>& x, bool training) {
  return relu(apply_bn(ps, bn, apply_conv(ps, conv, x), training));
}

// ---------------------------------------------------------------------------

/// Encoder-decoder with skip concatenation. Each level doubles the channel
/// count; decoding upsamples (nearest 2x) then convolves.
struct UNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  std::size_t in_channels = 2;
  std::size_t out_channels = 2;

  nlohmann::json to_json() const {
    return {{"depth", depth}, {"base_channels", base_channels}, {"in_channels", in_channels}, {"out_channels", out_channels}};
  }
};

template <typename T>
class UNet {
 public:
  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(cfg), params_(std::make_shared<ParamSet<T>>()) {
    if (cfg.depth < 1) throw ValueError("UNet: depth must be >= 1");
    Rng rng(seed);
    auto& ps = *params_;
    std::size_t cin = cfg.in_channels;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::size_t c = width(l);
      const std::string p = "enc" + std::to_string(l);
      add_conv(ps, p + ".conv1", cin, c, 3, rng);
      add_bn(ps, p + ".bn1", c);
      add_conv(ps, p + ".conv2", c, c, 3, rng);
      add_bn(ps, p + ".bn2", c);
      cin = c;
    }
    const std::size_t cm = width(cfg.depth);
    add_conv(ps, "mid.conv1", cin, cm, 3, rng);
    add_bn(ps, "mid.bn1", cm);
    add_conv(ps, "mid.conv2", cm, cm, 3, rng);
    add_bn(ps, "mid.bn2", cm);
    for (std::size_t l = cfg.depth; l-- > 0;) {
      const std::size_t c = width(l);
      const std::string p = "dec" + std::to_string(l);
      add_conv(ps, p + ".up", width(l + 1), c, 3, rng);
      add_conv(ps, p + ".conv1", 2 * c, c, 3, rng);
      add_bn(ps, p + ".bn1", c);
      add_conv(ps, p + ".conv2", c, c, 3, rng);
      add_bn(ps, p + ".bn2", c);
    }
    add_conv(ps, "out", width(0), cfg.out_channels, 1, rng);
  }

  const UNetConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return *params_; }
  const ParamSet<T>& params() const noexcept { return *params_; }

  Var<T> forward(const Var<T>& x, bool training) {
    require_rank(x.shape(), 4, "UNet");
    const auto& s = x.shape();
    if (s[1] != cfg_.in_channels)
      throw ModeError("UNet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                      std::to_string(s[1]));
    const std::size_t div = std::size_t{1} << cfg_.depth;
    if (s[2] % div || s[3] % div)
      throw ShapeError("UNet: spatial extents " + shape_str(s) + " must be divisible by " + std::to_string(div));
    auto& ps = *params_;
    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const std::string p = "enc" + std::to_string(l);
      h = conv_bn_relu(ps, p + ".conv1", p + ".bn1", h, training);
      h = conv_bn_relu(ps, p + ".conv2", p + ".bn2", h, training);
      skips.push_back(h);
      h = maxpool2x2(h);
    }
    h = conv_bn_relu(ps, "mid.conv1", "mid.bn1", h, training);
    h = conv_bn_relu(ps, "mid.conv2", "mid.bn2", h, training);
    for (std::size_t l = cfg_.depth; l-- > 0;) {
      const std::string p = "dec" + std::to_string(l);
      h = relu(apply_conv(ps, p + ".up", upsample2x(h)));
      h = concat_channels(skips[l], h);
      h = conv_bn_relu(ps, p + ".conv1", p + ".bn1", h, training);
      h = conv_bn_relu(ps, p + ".conv2", p + ".bn2", h, training);
    }
    return apply_conv(ps, "out", h);
  }

  /// Zeroes the 1x1 output layer, making the network output identically zero.
  void zero_output_layer() {
    params_->get("out.weight").mutable_value().fill(T(0));
    params_->get("out.bias").mutable_value().fill(T(0));
  }

 private:
  std::size_t width(std::size_t level) const { return cfg_.base_channels << level; }

  UNetConfig cfg_;
  std::shared_ptr<ParamSet<T>> params_;
};

// ---------------------------------------------------------------------------

/// Localisation network: four conv(3x3)-BN-ReLU-maxpool stages with
/// (16, 32, 16, 8) maps, fc 32 + ReLU, fc 3. The last layer starts at zero
/// so the initial transform is the identity. Outputs are scaled so one unit
/// corresponds to `translation_scale` pixels and `rotation_scale` radians.
struct RegNetConfig {
  std::array<std::size_t, 4> features{16, 32, 16, 8};
  std::size_t in_channels = 4;
  std::size_t fc_units = 32;
  std::size_t height = 64;
  std::size_t width = 64;
  double translation_scale = 8.0;
  double rotation_scale = std::numbers::pi / 18.0;

  std::size_t flat_size() const { return features[3] * (height >> 4) * (width >> 4); }

  nlohmann::json to_json() const {
    return {{"features", features}, {"in_channels", in_channels}, {"fc_units", fc_units}, {"height", height},
            {"width", width}, {"translation_scale", translation_scale}, {"rotation_scale", rotation_scale}};
  }
};

template <typename T>
struct RegistrationResult {
  Var<T> params;  // [N,3] (tx, ty, theta)
  Var<T> warped;  // [N,2,H,W]
};

template <typename T>
class RegNet {
 public:
  RegNet(RegNetConfig cfg, std::uint64_t seed) : cfg_(cfg), params_(std::make_shared<ParamSet<T>>()) {
    if (cfg.height < 16 || cfg.width < 16 || cfg.height % 16 || cfg.width % 16)
      throw ShapeError("RegNet: extents " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                       " too small or not divisible for four 2x2 pools (need multiples of 16)");
    Rng rng(seed);
    auto& ps = *params_;
    std::size_t cin = cfg.in_channels;
    for (std::size_t i = 0; i < 4; ++i) {
      add_conv(ps, "loc" + std::to_string(i) + ".conv", cin, cfg.features[i], 3, rng);
      add_bn(ps, "loc" + std::to_string(i) + ".bn", cfg.features[i]);
      cin = cfg.features[i];
    }
    add_fc(ps, "fc1", cfg.flat_size(), cfg.fc_units, rng);
    add_fc(ps, "fc2", cfg.fc_units, 3, rng, /*zero=*/true);
  }

  const RegNetConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return *params_; }
  const ParamSet<T>& params() const noexcept { return *params_; }
  const std::shared_ptr<ParamSet<T>>& params_ptr() const noexcept { return params_; }

  /// Makes this network read and update `shared` instead of its own set.
  void bind(std::shared_ptr<ParamSet<T>> shared) {
    if (shared->size() != params_->size()) throw IntegrityError("RegNet::bind: parameter layout mismatch");
    params_ = std::move(shared);
  }

  /// Estimates the motion of `moving` relative to `fixed` ([N,2,H,W] each)
  /// and resamples `moving` with it.
  RegistrationResult<T> forward(const Var<T>& moving, const Var<T>& fixed, bool training) {
    require_same_shape(moving.shape(), fixed.shape(), "RegNet");
    const auto& s = moving.shape();
    if (s[2] != cfg_.height || s[3] != cfg_.width)
      throw ShapeError("RegNet: configured for " + std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) +
                       ", got " + shape_str(s));
    auto& ps = *params_;
    Var<T> h = concat_channels(moving, fixed);
    if (h.shape()[1] != cfg_.in_channels)
      throw ModeError("RegNet: expected " + std::to_string(cfg_.in_channels) + " input channels");
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string p = "loc" + std::to_string(i);
      h = maxpool2x2(conv_bn_relu(ps, p + ".conv", p + ".bn", h, training));
    }
    h = reshape(h, {s[0], cfg_.flat_size()});
    h = relu(fully_connected(h, ps.get("fc1.weight"), ps.get("fc1.bias")));
    Var<T> raw = fully_connected(h, ps.get("fc2.weight"), ps.get("fc2.bias"));
    Tensor<T> scale_t({s[0], 3});
    for (std::size_t i = 0; i < s[0]; ++i) {
      scale_t[3 * i] = static_cast<T>(cfg_.translation_scale);
      scale_t[3 * i + 1] = static_cast<T>(cfg_.translation_scale);
      scale_t[3 * i + 2] = static_cast<T>(cfg_.rotation_scale);
    }
    Var<T> params = mul(raw, Var<T>::constant(std::move(scale_t)));
    return {params, warp_rigid(moving, params)};
  }

  void zero_output_layer() {
    params_->get("fc2.weight").mutable_value().fill(T(0));
    params_->get("fc2.bias").mutable_value().fill(T(0));
  }

 private:
  RegNetConfig cfg_;
  std::shared_ptr<ParamSet<T>> params_;
};

/// Binds the k-space registration network to the image-domain network's
/// parameters: both read and update one set, and gradients from both branches
/// accumulate into the same buffers. Returns the shared set.
template <typename T>
std::shared_ptr<ParamSet<T>> shared_registration_binding(RegNet<T>& g_image, RegNet<T>& g_kspace) {
  g_kspace.bind(g_image.params_ptr());
  return g_image.params_ptr();
}

/// k-space registration routed through the image domain:
/// y_reg = F(g(F^-1(y_moving), F^-1(y_fixed))).
template <typename T>
RegistrationResult<T> reg_forward_kspace(RegNet<T>& net, const Var<T>& y_moving, const Var<T>& y_fixed, bool training) {
  auto r = net.forward(ifft2c(y_moving), ifft2c(y_fixed), training);
  return {r.params, fft2c(r.warped)};
}

// ---------------------------------------------------------------------------

enum class ContrastMode { single, concat, fused };

inline const char* to_string(ContrastMode m) {
  switch (m) {
    case ContrastMode::single: return "single";
    case ContrastMode::concat: return "concat";
    case ContrastMode::fused: return "fused";
  }
  return "?";
}

inline ContrastMode parse_contrast_mode(const std::string& s) {
  if (s == "single") return ContrastMode::single;
  if (s == "concat") return ContrastMode::concat;
  if (s == "fused") return ContrastMode::fused;
  throw ConfigError("unknown contrast mode '" + s + "' (expected single|concat|fused)");
}

inline const char* to_string(Domain d) { return d == Domain::image ? "image" : "kspace"; }

struct ReconNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  ContrastMode contrast = ContrastMode::fused;
  bool dc_enabled = true;

  std::size_t in_channels() const { return contrast == ContrastMode::single ? 2 : 4; }
  nlohmann::json to_json() const {
    return {{"depth", depth}, {"base_channels", base_channels}, {"contrast", to_string(contrast)},
            {"in_channels", in_channels()}, {"dc_enabled", dc_enabled}};
  }
};

/// Reconstruction network. Input channels are [reference-derived (2), measured
/// target (2)] in multi-contrast modes and [measured target (2)] otherwise.
/// The encoder-decoder predicts a correction added to the measured target,
/// followed by hard data consistency.
template <typename T>
class ReconNet {
 public:
  ReconNet(ReconNetConfig cfg, std::uint64_t seed)
      : cfg_(cfg), unet_(UNetConfig{cfg.depth, cfg.base_channels, cfg.in_channels(), 2}, seed) {}

  const ReconNetConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return unet_.params(); }
  const ParamSet<T>& params() const noexcept { return unet_.params(); }
  UNet<T>& unet() noexcept { return unet_; }

  /// `input` lives in the branch's own domain; `y_u` is the measured k-space
  /// [N,2,H,W]. Image branch: DC is applied in k-space and the result brought
  /// back to the image domain. k-space branch: DC is applied directly.
  Var<T> forward(const Var<T>& input, const Tensor<T>& y_u, const SamplingMask& mask, Domain domain, bool training) {
    require_rank(input.shape(), 4, "ReconNet");
    const std::size_t c = input.shape()[1];
    if (c != cfg_.in_channels())
      throw ModeError(std::string("ReconNet: ") + to_string(cfg_.contrast) + "-contrast mode expects " +
                      std::to_string(cfg_.in_channels()) + " input channels, got " + std::to_string(c));
    Var<T> measured = slice_channels(input, c - 2, 2);
    Var<T> out = add(unet_.forward(input, training), measured);
    if (!cfg_.dc_enabled) return out;
    if (domain == Domain::image) return ifft2c(data_consistency(fft2c(out), y_u, mask));
    return data_consistency(out, y_u, mask);
  }

 private:
  ReconNetConfig cfg_;
  UNet<T> unet_;
};

}  // namespace ddmc
