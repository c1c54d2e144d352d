#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "ddmc/datagen.hpp"
#include "ddmc/evalkit.hpp"
#include "ddmc/models.hpp"
#include "ddmc/objectives.hpp"

namespace ddmc {

using Real = float;

struct StageSettings {
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::size_t batch_size = 8;
  double lr = 2e-4;

  nlohmann::json to_json() const {
    return {{"max_epochs", max_epochs}, {"patience", patience}, {"batch_size", batch_size}, {"lr", lr}};
  }
};

/// Everything that determines a staged training run.
struct StagePlan {
  DomainMode domain_mode = DomainMode::dual;
  ContrastMode contrast_mode = ContrastMode::fused;
  ImageLoss image_loss = ImageLoss::complex;
  LossWeights weights;
  bool share_registration = true;
  std::array<StageSettings, 3> stages;
  UNetConfig synth;
  RegNetConfig reg;
  ReconNetConfig recon;
  std::uint64_t seed = 0;

  /// Single-contrast and plain-concatenation runs use only the
  /// reconstruction networks; synthesis and registration are bypassed.
  bool runs(Stage s) const { return contrast_mode == ContrastMode::fused || s == Stage::reconstruction; }
  bool trains(Domain d) const {
    return d == Domain::image ? uses_image_branch(domain_mode) : uses_kspace_branch(domain_mode);
  }
  const StageSettings& settings(Stage s) const { return stages[static_cast<int>(s)]; }
  StageSettings& settings(Stage s) { return stages[static_cast<int>(s)]; }

  ReconNetConfig recon_config() const {
    ReconNetConfig r = recon;
    r.contrast = contrast_mode;
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::object();
    for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction})
      st[to_string(s)] = settings(s).to_json();
    return {{"domain_mode", to_string(domain_mode)},
            {"contrast_mode", to_string(contrast_mode)},
            {"image_loss", to_string(image_loss)},
            {"alpha", weights.alpha},
            {"beta", weights.beta},
            {"share_registration", share_registration},
            {"stages", st},
            {"synth", synth.to_json()},
            {"reg", reg.to_json()},
            {"recon", recon_config().to_json()},
            {"seed", seed}};
  }
};

// ---------------------------------------------------------------------------
// Dataset

/// One record prepared for training: every raster as a [1,2,H,W] tensor.
struct Sample {
  std::uint64_t id = 0;
  Tensor<Real> ref_x, ref_y;              // aligned reference, image / k-space
  Tensor<Real> moved_x, moved_y;          // motion-corrupted reference
  Tensor<Real> tgt_x, tgt_y;              // fully-sampled target (ground truth)
  Tensor<Real> u_x, u_y;                  // zero-filled image / measured k-space
  Tensor<std::uint8_t> brain;
  RigidParams motion;
};

struct Dataset {
  std::vector<Sample> train, val, test;
  SamplingMask mask;
  std::size_t size = 0;

  const std::vector<Sample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train|val|test)");
  }
};

inline Sample make_sample(const ContrastPairRecord& r, const SamplingMask& mask) {
  Sample s;
  s.id = r.record_id;
  auto pack = [](const auto& c) { return pack_complex<Real>(c); };
  s.ref_x = pack(r.ref_aligned);
  s.ref_y = pack(fft2c(r.ref_aligned));
  s.moved_x = pack(r.ref_moved);
  s.moved_y = pack(fft2c(r.ref_moved));
  const auto y = fft2c(r.tgt);
  const auto yu = undersample(y, mask);
  s.tgt_x = pack(r.tgt);
  s.tgt_y = pack(y);
  s.u_x = pack(zero_filled(yu));
  s.u_y = pack(yu);
  s.brain = r.brain_mask;
  s.motion = r.true_motion;
  return s;
}

struct RecordSplits {
  std::vector<ContrastPairRecord> train, val, test;
};

inline Dataset make_dataset(const RecordSplits& recs, const SamplingMask& mask) {
  Dataset d;
  d.mask = mask;
  auto conv = [&](const std::vector<ContrastPairRecord>& in, std::vector<Sample>& out) {
    for (const auto& r : in) {
      if (d.size == 0) d.size = r.size();
      if (r.size() != d.size) throw ShapeError("dataset: mixed record sizes");
      if (mask.height != r.size())
        throw ShapeError("dataset: mask height " + std::to_string(mask.height) + " does not match records of size " +
                         std::to_string(r.size()));
      out.push_back(make_sample(r, mask));
    }
  };
  conv(recs.train, d.train);
  conv(recs.val, d.val);
  conv(recs.test, d.test);
  return d;
}

/// Mask shared by every record at one acceleration. Acceleration 1 is the
/// fully-sampled case.
inline SamplingMask mask_for(MaskParams p, double acceleration) {
  if (acceleration == 1.0) return SamplingMask::full(p.height);
  p.acceleration = acceleration;
  p.seed = derive_seed(p.seed, static_cast<std::uint64_t>(std::llround(acceleration * 1000)));
  return make_mask(p);
}

/// Stacks [1,...] tensors along the leading axis.
inline Tensor<Real> stack(const std::vector<const Tensor<Real>*>& items) {
  if (items.empty()) throw ValueError("stack: empty batch");
  Shape s = items[0]->shape();
  const std::size_t each = items[0]->size();
  s[0] = 0;
  for (auto* t : items) s[0] += t->dim(0);
  Tensor<Real> out(s);
  std::size_t off = 0;
  for (auto* t : items) {
    if (t->size() % each != 0 || t->rank() != s.size()) throw ShapeError("stack: mismatched items");
    std::copy(t->data(), t->data() + t->size(), out.data() + off);
    off += t->size();
  }
  return out;
}

/// Splits a [N,...] tensor into N tensors of shape [1,...].
inline std::vector<Tensor<Real>> unstack(const Tensor<Real>& t) {
  Shape s = t.shape();
  const std::size_t n = s[0];
  s[0] = 1;
  const std::size_t each = t.size() / n;
  std::vector<Tensor<Real>> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<Real> one(s);
    std::copy(t.data() + i * each, t.data() + (i + 1) * each, one.data());
    out.push_back(std::move(one));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Finalised parameters of one stage. Network parameters are held as
/// serialised ParamSet bytes so a finalised checkpoint cannot drift.
struct Checkpoint {
  Stage stage = Stage::synthesis;
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> networks;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<double> val_history;
  std::size_t best_epoch = 0;
  bool finalised = false;
  std::uint64_t hash = 0;

  std::uint64_t compute_hash() const {
    std::vector<std::uint8_t> all;
    for (const auto& [name, bytes] : networks) {
      all.insert(all.end(), name.begin(), name.end());
      all.push_back(0);
      all.insert(all.end(), bytes.begin(), bytes.end());
    }
    return ParamSet<Real>::fnv1a(all);
  }

  bool has(const std::string& name) const {
    for (const auto& n : networks)
      if (n.first == name) return true;
    return false;
  }

  const std::vector<std::uint8_t>& blob(const std::string& name) const {
    for (const auto& n : networks)
      if (n.first == name) return n.second;
    throw IntegrityError(std::string(to_string(stage)) + " checkpoint has no network '" + name + "'");
  }

  void verify() const {
    if (compute_hash() != hash)
      throw IntegrityError(std::string(to_string(stage)) + " checkpoint hash mismatch (parameters modified)");
  }
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// File layout: one JSON header line, then the ParamSet blobs in header order.
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  nlohmann::json nets = nlohmann::json::array();
  for (const auto& [name, bytes] : c.networks) nets.push_back({{"name", name}, {"bytes", bytes.size()}});
  nlohmann::json h = {{"format", "ddmc-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"stage", to_string(c.stage)},
                      {"seed", c.seed},
                      {"finalised", c.finalised},
                      {"hash", hex64(c.hash)},
                      {"best_epoch", c.best_epoch},
                      {"val_history", c.val_history},
                      {"config", c.config},
                      {"networks", nets}};
  const std::string line = h.dump() + "\n";
  std::vector<std::uint8_t> out(line.begin(), line.end());
  for (const auto& n : c.networks) out.insert(out.end(), n.second.begin(), n.second.end());
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "checkpoint") {
  auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t('\n'));
  if (nl == bytes.end()) throw FormatError(ErrorKind::truncated, origin + ": missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin(), nl);
  } catch (const nlohmann::json::exception&) {
    throw FormatError(ErrorKind::bad_magic, origin + ": header is not a checkpoint");
  }
  if (!h.is_object() || h.value("format", "") != "ddmc-checkpoint")
    throw FormatError(ErrorKind::bad_magic, origin + ": header is not a checkpoint");
  if (h.value("version", 0) != kCheckpointVersion)
    throw FormatError(ErrorKind::bad_version, origin + ": unsupported checkpoint version " + h["version"].dump());
  Checkpoint c;
  try {
    c.stage = parse_stage(h.at("stage").get<std::string>());
    c.seed = h.at("seed").get<std::uint64_t>();
    c.finalised = h.at("finalised").get<bool>();
    c.hash = std::stoull(h.at("hash").get<std::string>(), nullptr, 16);
    c.best_epoch = h.at("best_epoch").get<std::size_t>();
    c.val_history = h.at("val_history").get<std::vector<double>>();
    c.config = h.at("config");
    std::size_t off = static_cast<std::size_t>(nl - bytes.begin()) + 1;
    for (const auto& n : h.at("networks")) {
      const auto len = n.at("bytes").get<std::size_t>();
      if (off + len > bytes.size())
        throw FormatError(ErrorKind::truncated, origin + ": expected " + std::to_string(off + len) +
                                                    " bytes, found " + std::to_string(bytes.size()));
      c.networks.emplace_back(n.at("name").get<std::string>(),
                              std::vector<std::uint8_t>(bytes.begin() + off, bytes.begin() + off + len));
      off += len;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(ErrorKind::bad_magic, origin + ": malformed header: " + e.what());
  }
  c.verify();
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path), path); }

// ---------------------------------------------------------------------------
// Run log

struct EpochRecord {
  Stage stage = Stage::synthesis;
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double seconds = 0;  // wall clock, kept out of the deterministic logs
};

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Append-only record of a run. Loss and validation logs depend only on
/// (config, seed); wall-clock times are written separately.
class RunLog {
 public:
  std::ostream* echo = nullptr;

  void add_step(const StageLossReport& r) {
    std::string line = std::to_string(++step_) + "," + to_string(r.stage) + "," + to_string(r.mode);
    for (const char* n : kComponentNames) {
      auto v = r.component(n);
      line += "," + (v ? fmt_num(*v) : std::string("NA"));
    }
    line += "," + fmt_num(r.total);
    steps_.push_back(std::move(line));
  }

  void add_epoch(const EpochRecord& e) {
    epochs_.push_back(e);
    if (echo)
      *echo << "[" << to_string(e.stage) << "] epoch " << e.epoch << " train " << fmt_num(e.train_loss) << " val "
            << fmt_num(e.val_loss) << " (" << fmt_num(e.seconds) << " s)" << std::endl;
  }

  void note(const std::string& msg) {
    if (echo) *echo << msg << std::endl;
  }

  std::string steps_csv() const {
    std::string s = "step,stage,mode,L_i,L_k,L_ik,L_ki,total\n";
    for (const auto& l : steps_) s += l + "\n";
    return s;
  }

  std::string epochs_csv() const {
    std::string s = "stage,epoch,train_loss,val_loss\n";
    for (const auto& e : epochs_)
      s += std::string(to_string(e.stage)) + "," + std::to_string(e.epoch) + "," + fmt_num(e.train_loss) + "," +
           fmt_num(e.val_loss) + "\n";
    return s;
  }

  std::string timing_csv() const {
    std::string s = "stage,epoch,seconds\n";
    for (const auto& e : epochs_)
      s += std::string(to_string(e.stage)) + "," + std::to_string(e.epoch) + "," + fmt_num(e.seconds) + "\n";
    return s;
  }

  const std::vector<EpochRecord>& epochs() const { return epochs_; }
  std::size_t steps() const { return step_; }

 private:
  std::size_t step_ = 0;
  std::vector<std::string> steps_;
  std::vector<EpochRecord> epochs_;
};

// ---------------------------------------------------------------------------
// Networks

/// The six networks of a run: synthesis f, registration g, reconstruction h,
/// each with an image-domain (_i) and a k-space (_k) instance.
class Networks {
 public:
  explicit Networks(const StagePlan& p)
      : f_i(p.synth, derive_seed(p.seed, 101)),
        f_k(p.synth, derive_seed(p.seed, 102)),
        g_i(p.reg, derive_seed(p.seed, 103)),
        g_k(p.reg, derive_seed(p.seed, 104)),
        h_i(p.recon_config(), derive_seed(p.seed, 105)),
        h_k(p.recon_config(), derive_seed(p.seed, 106)),
        shared_(p.share_registration) {
    if (shared_) shared_registration_binding(g_i, g_k);
  }

  UNet<Real> f_i, f_k;
  RegNet<Real> g_i, g_k;
  ReconNet<Real> h_i, h_k;

  /// Parameter sets owned by a stage under the plan's domain mode, by name.
  std::vector<std::pair<std::string, ParamSet<Real>*>> stage_params(Stage s, const StagePlan& p) {
    std::vector<std::pair<std::string, ParamSet<Real>*>> out;
    const bool im = p.trains(Domain::image), ks = p.trains(Domain::kspace);
    switch (s) {
      case Stage::synthesis:
        if (im) out.emplace_back("f_i", &f_i.params());
        if (ks) out.emplace_back("f_k", &f_k.params());
        break;
      case Stage::registration:
        if (shared_) {
          out.emplace_back("g", &g_i.params());
        } else {
          if (im) out.emplace_back("g_i", &g_i.params());
          if (ks) out.emplace_back("g_k", &g_k.params());
        }
        break;
      case Stage::reconstruction:
        if (im) out.emplace_back("h_i", &h_i.params());
        if (ks) out.emplace_back("h_k", &h_k.params());
        break;
    }
    return out;
  }

  void load(const Checkpoint& c, const StagePlan& p) {
    for (auto& [name, ps] : stage_params(c.stage, p)) ps->assign_from(ParamSet<Real>::deserialize(c.blob(name)));
  }

 private:
  bool shared_;
};

// ---------------------------------------------------------------------------
// Stage wiring

namespace detail {

/// Reference-side inputs of the trainable stage, per record and domain:
/// synthesis reads the aligned reference; registration reads the frozen
/// synthesis output of the moved reference; reconstruction reads the frozen
/// registration output (fused), the moved reference (concat) or nothing.
struct StageCache {
  std::vector<Tensor<Real>> ref_i, ref_k;
};

inline Tensor<Real> batch_of(const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                             Tensor<Real> Sample::*field) {
  std::vector<const Tensor<Real>*> items;
  for (auto i : idx) items.push_back(&(data[i].*field));
  return stack(items);
}

inline Tensor<Real> batch_of(const std::vector<Tensor<Real>>& data, const std::vector<std::size_t>& idx) {
  std::vector<const Tensor<Real>*> items;
  for (auto i : idx) items.push_back(&data[i]);
  return stack(items);
}

inline Var<Real> cst(Tensor<Real> t) { return Var<Real>::constant(std::move(t)); }

/// Frozen upstream chain evaluated in inference mode.
inline Tensor<Real> synth_infer(UNet<Real>& f, const Tensor<Real>& in) {
  NoGradGuard g;
  return f.forward(cst(in), false).value();
}

inline Tensor<Real> reg_infer(RegNet<Real>& g, const Tensor<Real>& moving, const Tensor<Real>& fixed, Domain d) {
  NoGradGuard guard;
  if (d == Domain::image) return g.forward(cst(moving), cst(fixed), false).warped.value();
  return reg_forward_kspace(g, cst(moving), cst(fixed), false).warped.value();
}

inline StageCache build_cache(Stage stage, const StagePlan& p, Networks& nets, const std::vector<Sample>& data) {
  StageCache c;
  const bool im = p.trains(Domain::image), ks = p.trains(Domain::kspace);
  constexpr std::size_t chunk = 16;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(data.size(), b + chunk); ++i) idx.push_back(i);
    auto put = [](std::vector<Tensor<Real>>& dst, const Tensor<Real>& t) {
      for (auto& one : unstack(t)) dst.push_back(std::move(one));
    };
    if (stage == Stage::synthesis) {
      if (im) put(c.ref_i, batch_of(data, idx, &Sample::ref_x));
      if (ks) put(c.ref_k, batch_of(data, idx, &Sample::ref_y));
    } else if (stage == Stage::registration) {
      if (im) put(c.ref_i, synth_infer(nets.f_i, batch_of(data, idx, &Sample::moved_x)));
      if (ks) put(c.ref_k, synth_infer(nets.f_k, batch_of(data, idx, &Sample::moved_y)));
    } else if (p.contrast_mode == ContrastMode::fused) {
      if (im)
        put(c.ref_i, reg_infer(nets.g_i, synth_infer(nets.f_i, batch_of(data, idx, &Sample::moved_x)),
                               batch_of(data, idx, &Sample::u_x), Domain::image));
      if (ks)
        put(c.ref_k, reg_infer(nets.g_k, synth_infer(nets.f_k, batch_of(data, idx, &Sample::moved_y)),
                               batch_of(data, idx, &Sample::u_y), Domain::kspace));
    } else if (p.contrast_mode == ContrastMode::concat) {
      if (im) put(c.ref_i, batch_of(data, idx, &Sample::moved_x));
      if (ks) put(c.ref_k, batch_of(data, idx, &Sample::moved_y));
    }
  }
  return c;
}

/// Outputs of the trainable networks of `stage` on one batch.
inline StageOutputs<Real> stage_forward(Stage stage, const StagePlan& p, Networks& nets, const std::vector<Sample>& data,
                                        const StageCache& cache, const std::vector<std::size_t>& idx, bool training,
                                        const SamplingMask& mask) {
  StageOutputs<Real> out;
  const bool im = p.trains(Domain::image), ks = p.trains(Domain::kspace);
  switch (stage) {
    case Stage::synthesis:
      if (im) out.image = nets.f_i.forward(cst(batch_of(cache.ref_i, idx)), training);
      if (ks) out.kspace = nets.f_k.forward(cst(batch_of(cache.ref_k, idx)), training);
      break;
    case Stage::registration:
      if (im)
        out.image = nets.g_i.forward(cst(batch_of(cache.ref_i, idx)), cst(batch_of(data, idx, &Sample::u_x)), training)
                        .warped;
      if (ks)
        out.kspace = reg_forward_kspace(nets.g_k, cst(batch_of(cache.ref_k, idx)),
                                        cst(batch_of(data, idx, &Sample::u_y)), training)
                         .warped;
      break;
    case Stage::reconstruction: {
      const Tensor<Real> y_u = batch_of(data, idx, &Sample::u_y);
      const bool single = p.contrast_mode == ContrastMode::single;
      if (im) {
        Var<Real> x = cst(batch_of(data, idx, &Sample::u_x));
        if (!single) x = concat_channels(cst(batch_of(cache.ref_i, idx)), x);
        out.image = nets.h_i.forward(x, y_u, mask, Domain::image, training);
      }
      if (ks) {
        Var<Real> y = cst(y_u);
        if (!single) y = concat_channels(cst(batch_of(cache.ref_k, idx)), y);
        out.kspace = nets.h_k.forward(y, y_u, mask, Domain::kspace, training);
      }
      break;
    }
  }
  return out;
}

inline GroundTruth<Real> ground_truth(const std::vector<Sample>& data, const std::vector<std::size_t>& idx) {
  return {cst(batch_of(data, idx, &Sample::tgt_x)), cst(batch_of(data, idx, &Sample::tgt_y))};
}

inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t bs, Rng* shuffle) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) shuffle->shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += bs)
    out.emplace_back(order.begin() + static_cast<long>(b), order.begin() + static_cast<long>(std::min(n, b + bs)));
  return out;
}

}  // namespace detail

/// Checks that every stage before `stage` required by the plan is present
/// and finalised, and returns them in stage order.
inline std::vector<const Checkpoint*> check_prior(Stage stage, const StagePlan& plan,
                                                  const std::vector<Checkpoint>& prior) {
  if (!plan.runs(stage))
    throw ModeError(std::string(to_string(plan.contrast_mode)) + "-contrast runs bypass the " + to_string(stage) +
                    " stage");
  std::vector<const Checkpoint*> out;
  for (Stage s : {Stage::synthesis, Stage::registration}) {
    if (static_cast<int>(s) >= static_cast<int>(stage) || !plan.runs(s)) continue;
    const Checkpoint* found = nullptr;
    for (const auto& c : prior)
      if (c.stage == s) found = &c;
    if (!found)
      throw OrderingError(std::string("stage ") + to_string(stage) + " requires a finalised " + to_string(s) +
                          " checkpoint; none was found");
    if (!found->finalised)
      throw IntegrityError(std::string(to_string(s)) + " checkpoint is not finalised");
    found->verify();
    out.push_back(found);
  }
  return out;
}

/// Trains the networks of one stage with all earlier stages frozen, stopping
/// on validation patience, and returns the finalised checkpoint holding the
/// best-validation parameters.
inline Checkpoint train_stage(Stage stage, const Dataset& data, const StagePlan& plan,
                              const std::vector<Checkpoint>& prior, RunLog* log = nullptr) {
  plan.weights.validate();
  const auto frozen = check_prior(stage, plan, prior);
  if (data.train.empty()) throw ValueError("train_stage: training split is empty");
  if (data.val.empty()) throw ValueError("train_stage: validation split is empty");
  const StageSettings& st = plan.settings(stage);
  if (st.batch_size == 0 || st.max_epochs == 0) throw ConfigError("train_stage: batch_size and max_epochs must be >= 1");

  Networks nets(plan);
  for (const auto* c : frozen) nets.load(*c, plan);
  auto trained = nets.stage_params(stage, plan);
  std::vector<AdamState<Real>> opt;
  for (auto& [name, ps] : trained) opt.emplace_back(*ps, AdamConfig{st.lr});

  const auto cache_train = detail::build_cache(stage, plan, nets, data.train);
  const auto cache_val = detail::build_cache(stage, plan, nets, data.val);
  const auto val_batches = detail::batches(data.val.size(), st.batch_size, nullptr);

  auto snapshot = [&] {
    std::vector<std::vector<std::uint8_t>> s;
    for (auto& [name, ps] : trained) s.push_back(ps->serialize());
    return s;
  };
  auto best = snapshot();
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0, since = 0;
  std::vector<double> history;
  Rng order_rng(derive_seed(plan.seed, 0x5700 + static_cast<std::uint64_t>(stage)));

  for (std::size_t epoch = 1; epoch <= st.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double train_sum = 0;
    std::size_t train_n = 0;
    for (const auto& idx : detail::batches(data.train.size(), st.batch_size, &order_rng)) {
      for (auto& [name, ps] : trained) ps->zero_grad();
      auto out = detail::stage_forward(stage, plan, nets, data.train, cache_train, idx, true, data.mask);
      auto loss = stage_loss(stage, out, detail::ground_truth(data.train, idx), plan.weights, plan.domain_mode,
                             plan.image_loss);
      backward(loss.total);
      for (std::size_t k = 0; k < trained.size(); ++k) opt[k].step(*trained[k].second);
      if (log) log->add_step(loss.report);
      train_sum += loss.report.total * static_cast<double>(idx.size());
      train_n += idx.size();
    }
    double val_sum = 0;
    {
      NoGradGuard g;
      for (const auto& idx : val_batches) {
        auto out = detail::stage_forward(stage, plan, nets, data.val, cache_val, idx, false, data.mask);
        val_sum += stage_loss(stage, out, detail::ground_truth(data.val, idx), plan.weights, plan.domain_mode,
                              plan.image_loss)
                       .report.total *
                   static_cast<double>(idx.size());
      }
    }
    const double val = val_sum / static_cast<double>(data.val.size());
    history.push_back(val);
    if (log)
      log->add_epoch({stage, epoch, train_sum / static_cast<double>(train_n), val,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    if (val < best_val) {
      best_val = val;
      best_epoch = epoch;
      best = snapshot();
      since = 0;
    } else if (++since >= st.patience) {
      break;
    }
  }

  Checkpoint c;
  c.stage = stage;
  for (std::size_t k = 0; k < trained.size(); ++k) c.networks.emplace_back(trained[k].first, std::move(best[k]));
  c.config = plan.to_json();
  c.seed = plan.seed;
  c.val_history = std::move(history);
  c.best_epoch = best_epoch;
  c.finalised = true;
  c.hash = c.compute_hash();
  return c;
}

/// Runs every stage the plan requires, in order.
inline std::vector<Checkpoint> train_all(const Dataset& data, const StagePlan& plan, RunLog* log = nullptr) {
  std::vector<Checkpoint> done;
  for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction})
    if (plan.runs(s)) done.push_back(train_stage(s, data, plan, done, log));
  return done;
}

// ---------------------------------------------------------------------------
// Evaluation

struct RecordMetric {
  std::uint64_t record_id = 0;
  std::string stage;   // zero_filled | synthesis | registration | reconstruction
  std::string branch;  // image | kspace
  double psnr = 0, ssim = 0;
};

struct AggregateRow {
  std::string stage, branch;
  double psnr_mean = 0, psnr_std = 0, ssim_mean = 0, ssim_std = 0;
  std::size_t n = 0;
};

struct EvalReport {
  std::vector<RecordMetric> per_record;
  std::vector<AggregateRow> aggregate;

  const AggregateRow* find(const std::string& stage, const std::string& branch) const {
    for (const auto& r : aggregate)
      if (r.stage == stage && r.branch == branch) return &r;
    return nullptr;
  }
};

/// Sample mean and (n-1) standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0};
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

/// Per-record image-domain outputs of every stage and branch, named
/// "<stage>_<branch>", plus "zero_filled". k-space outputs are brought back
/// to the image domain. The synthesis panel uses the aligned reference; the
/// registration and reconstruction panels follow the inference chain from
/// the moved reference.
using PanelSet = std::vector<std::pair<std::string, ComplexImage<Real>>>;

inline std::vector<PanelSet> run_inference(const StagePlan& plan, const std::vector<Checkpoint>& ckpts,
                                           const std::vector<Sample>& data, const SamplingMask& mask) {
  if (data.empty()) throw ValueError("evaluate: split is empty");
  for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction}) {
    if (!plan.runs(s)) continue;
    const Checkpoint* found = nullptr;
    for (const auto& c : ckpts)
      if (c.stage == s) found = &c;
    if (!found) throw OrderingError(std::string("evaluate: missing finalised ") + to_string(s) + " checkpoint");
    if (!found->finalised) throw IntegrityError(std::string(to_string(s)) + " checkpoint is not finalised");
  }
  Networks nets(plan);
  for (const auto& c : ckpts)
    if (plan.runs(c.stage)) {
      c.verify();
      nets.load(c, plan);
    }
  NoGradGuard guard;
  std::vector<PanelSet> out(data.size());
  const bool im = plan.trains(Domain::image), ks = plan.trains(Domain::kspace);
  const bool fused = plan.contrast_mode == ContrastMode::fused;
  constexpr std::size_t chunk = 8;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(data.size(), b + chunk); ++i) idx.push_back(i);
    auto emit = [&](const std::string& name, const Tensor<Real>& t, bool from_kspace) {
      Tensor<Real> img = from_kspace ? detail::centered_fft2_batch(t, true) : t;
      for (std::size_t j = 0; j < idx.size(); ++j)
        out[idx[j]].emplace_back(name, unpack_complex<ComplexImage<Real>>(img, j));
    };
    emit("zero_filled", detail::batch_of(data, idx, &Sample::u_x), false);
    const Tensor<Real> u_x = detail::batch_of(data, idx, &Sample::u_x);
    const Tensor<Real> u_y = detail::batch_of(data, idx, &Sample::u_y);
    Tensor<Real> ref_i, ref_k;
    if (fused) {
      if (im) emit("synthesis_image", detail::synth_infer(nets.f_i, detail::batch_of(data, idx, &Sample::ref_x)), false);
      if (ks) emit("synthesis_kspace", detail::synth_infer(nets.f_k, detail::batch_of(data, idx, &Sample::ref_y)), true);
      if (im) {
        ref_i = detail::reg_infer(nets.g_i, detail::synth_infer(nets.f_i, detail::batch_of(data, idx, &Sample::moved_x)),
                                  u_x, Domain::image);
        emit("registration_image", ref_i, false);
      }
      if (ks) {
        ref_k = detail::reg_infer(nets.g_k, detail::synth_infer(nets.f_k, detail::batch_of(data, idx, &Sample::moved_y)),
                                  u_y, Domain::kspace);
        emit("registration_kspace", ref_k, true);
      }
    } else if (plan.contrast_mode == ContrastMode::concat) {
      ref_i = detail::batch_of(data, idx, &Sample::moved_x);
      ref_k = detail::batch_of(data, idx, &Sample::moved_y);
    }
    const bool single = plan.contrast_mode == ContrastMode::single;
    if (im) {
      Var<Real> x = detail::cst(u_x);
      if (!single) x = concat_channels(detail::cst(ref_i), x);
      emit("reconstruction_image", nets.h_i.forward(x, u_y, mask, Domain::image, false).value(), false);
    }
    if (ks) {
      Var<Real> y = detail::cst(u_y);
      if (!single) y = concat_channels(detail::cst(ref_k), y);
      emit("reconstruction_kspace", nets.h_k.forward(y, u_y, mask, Domain::kspace, false).value(), true);
    }
  }
  return out;
}

inline EvalReport evaluate(const StagePlan& plan, const std::vector<Checkpoint>& ckpts, const std::vector<Sample>& data,
                           const SamplingMask& mask) {
  const auto panels = run_inference(plan, ckpts, data, mask);
  EvalReport rep;
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> acc;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto gt = unpack_complex<ComplexImage<Real>>(data[i].tgt_x, 0);
    for (const auto& [name, img] : panels[i]) {
      const auto cut = name.rfind('_');
      RecordMetric m;
      m.record_id = data[i].id;
      if (name == "zero_filled") {
        m.stage = name;
        m.branch = "image";
      } else {
        m.stage = name.substr(0, cut);
        m.branch = name.substr(cut + 1);
      }
      m.psnr = psnr(img, gt, data[i].brain);
      m.ssim = ssim(img, gt, data[i].brain);
      const std::string key = m.stage + "/" + m.branch;
      if (!acc.count(key)) order.push_back(key);
      acc[key].first.push_back(m.psnr);
      acc[key].second.push_back(m.ssim);
      rep.per_record.push_back(std::move(m));
    }
  }
  for (const auto& key : order) {
    AggregateRow r;
    const auto cut = key.find('/');
    r.stage = key.substr(0, cut);
    r.branch = key.substr(cut + 1);
    std::tie(r.psnr_mean, r.psnr_std) = mean_std(acc[key].first);
    std::tie(r.ssim_mean, r.ssim_std) = mean_std(acc[key].second);
    r.n = acc[key].first.size();
    rep.aggregate.push_back(r);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationCell {
  DomainMode domain = DomainMode::dual;
  ContrastMode contrast = ContrastMode::fused;
  double acceleration = 4;

  std::string accel_str() const {
    std::ostringstream s;
    s << acceleration << "x";
    return s.str();
  }
  std::string id() const { return std::string(to_string(domain)) + "-" + to_string(contrast) + "-" + accel_str(); }
};

/// Parses "dual,fused,4x" cells; '|' lists alternatives per field and the
/// grid is their cartesian product. Several cells may be separated by ';'.
inline std::vector<AblationCell> parse_grid(const std::string& text) {
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) parts.push_back(cur);
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
  };
  std::vector<AblationCell> cells;
  for (const auto& spec : split(text, ';')) {
    const auto fields = split(spec, ',');
    if (fields.size() != 3)
      throw ConfigError("grid cell '" + spec + "' must have three fields: domain,contrast,accel (e.g. dual,fused,4x)");
    for (const auto& d : split(fields[0], '|'))
      for (const auto& c : split(fields[1], '|'))
        for (auto a : split(fields[2], '|')) {
          if (!a.empty() && (a.back() == 'x' || a.back() == 'X')) a.pop_back();
          double accel = 0;
          try {
            std::size_t used = 0;
            accel = std::stod(a, &used);
            if (used != a.size()) throw std::invalid_argument(a);
          } catch (const std::exception&) {
            throw ConfigError("grid: bad acceleration '" + a + "'");
          }
          if (!(accel >= 1)) throw ConfigError("grid: acceleration must be >= 1");
          cells.push_back({parse_domain_mode(d), parse_contrast_mode(c), accel});
        }
  }
  if (cells.empty()) throw ConfigError("grid is empty");
  return cells;
}

struct AblationResult {
  AblationCell cell;
  EvalReport report;
  std::vector<Checkpoint> checkpoints;
  std::string log_csv;
};

/// Trains and evaluates every cell on the test split. Cells are independent
/// and may run on up to `threads` workers; results keep grid order.
inline std::vector<AblationResult> run_ablation(const std::vector<AblationCell>& grid, const RecordSplits& records,
                                                const StagePlan& base, const MaskParams& mask_base,
                                                std::size_t threads = 1, std::ostream* progress = nullptr) {
  std::vector<AblationResult> results(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());
  std::mutex echo_mu;
  auto run_cell = [&](std::size_t k) {
    try {
      const auto& cell = grid[k];
      StagePlan plan = base;
      plan.domain_mode = cell.domain;
      plan.contrast_mode = cell.contrast;
      const Dataset data = make_dataset(records, mask_for(mask_base, cell.acceleration));
      RunLog log;
      std::ostringstream buf;
      if (progress) log.echo = &buf;
      auto ckpts = train_all(data, plan, &log);
      results[k] = {cell, evaluate(plan, ckpts, data.test, data.mask), std::move(ckpts), log.steps_csv()};
      if (progress) {
        std::lock_guard<std::mutex> lock(echo_mu);
        *progress << "cell " << cell.id() << "\n" << buf.str() << std::flush;
      }
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, grid.size()));
  if (threads == 1) {
    for (std::size_t k = 0; k < grid.size(); ++k) run_cell(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t k; (k = next++) < grid.size();) run_cell(k);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

/// Long-form metrics table, one row per (cell, stage, branch).
inline std::string metrics_csv(const std::vector<AblationResult>& results) {
  std::string s = "cell_id,domain_mode,contrast_mode,accel,stage,branch,psnr_mean,psnr_std,ssim_mean,ssim_std,n\n";
  for (const auto& r : results)
    for (const auto& a : r.report.aggregate)
      s += r.cell.id() + "," + to_string(r.cell.domain) + "," + to_string(r.cell.contrast) + "," +
           r.cell.accel_str() + "," + a.stage + "," + a.branch + "," + fmt_num(a.psnr_mean) + "," +
           fmt_num(a.psnr_std) + "," + fmt_num(a.ssim_mean) + "," + fmt_num(a.ssim_std) + "," +
           std::to_string(a.n) + "\n";
  return s;
}

/// One row per cell with the final reconstruction metrics of both branches;
/// a branch the cell does not train is reported as NA.
inline std::string ablation_table_csv(const std::vector<AblationResult>& results) {
  std::string s = "cell_id,domain_mode,contrast_mode,accel,psnr_image,ssim_image,psnr_kspace,ssim_kspace\n";
  for (const auto& r : results) {
    s += r.cell.id() + "," + to_string(r.cell.domain) + "," + to_string(r.cell.contrast) + "," + r.cell.accel_str();
    for (const char* br : {"image", "kspace"}) {
      const auto* row = r.report.find("reconstruction", br);
      s += row ? "," + fmt_num(row->psnr_mean) + "," + fmt_num(row->ssim_mean) : std::string(",NA,NA");
    }
    s += "\n";
  }
  return s;
}

}  // namespace ddmc
