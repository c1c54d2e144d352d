#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ddmc/pipeline.hpp"

namespace ddmc {

/// Typed key=value configuration with [section] headers. Every key has an
/// embedded default; unknown sections or keys are rejected.
class RunConfig {
 public:
  enum class Type { integer, real, boolean, text };

  struct Key {
    std::string section, name;
    Type type;
    std::string value;
    std::string help;
    std::vector<std::string> choices;  // non-empty for enumerations
  };

  RunConfig() {
    auto add = [&](std::string sec, std::string name, Type t, std::string def, std::string help,
                   std::vector<std::string> choices = {}) {
      keys_.push_back({std::move(sec), std::move(name), t, std::move(def), std::move(help), std::move(choices)});
    };
    add("data", "size", Type::integer, "64", "image side in pixels");
    add("data", "n_structures", Type::integer, "12", "random interior structures per phantom");
    add("data", "blur_sigma", Type::real, "0.6", "phantom smoothing in pixels");
    add("data", "n_train", Type::integer, "200", "training records");
    add("data", "n_val", Type::integer, "40", "validation records");
    add("data", "n_test", Type::integer, "60", "test records");
    add("data", "rot_deg", Type::real, "10", "max rotation of the simulated motion");
    add("data", "trans_mm", Type::real, "15", "max translation of the simulated motion");
    add("data", "mm_per_px", Type::real, "0", "pixel size; 0 means 192/size");
    add("mask", "acceleration", Type::real, "4", "acceleration for train/eval/render");
    add("mask", "n_center", Type::integer, "6", "always-sampled centre rows");
    add("mask", "sigma_frac", Type::real, "0.25", "std of the row density as a fraction of H");
    add("loss", "alpha", Type::real, "0.01", "k-space term weight");
    add("loss", "beta", Type::real, "0.7", "cross-domain term weight");
    add("loss", "image_loss", Type::text, "complex", "image-side comparison", {"complex", "magnitude"});
    add("model", "depth", Type::integer, "3", "encoder-decoder levels");
    add("model", "base_channels", Type::integer, "16", "channels at the first level");
    add("model", "dc_enabled", Type::boolean, "true", "data consistency after reconstruction");
    add("model", "reg_translation_scale", Type::real, "8", "pixels per unit of registration output");
    add("model", "reg_rotation_scale_deg", Type::real, "10", "degrees per unit of registration output");
    add("train", "domain_mode", Type::text, "dual", "branches trained", {"image", "kspace", "dual"});
    add("train", "contrast_mode", Type::text, "fused", "reconstruction input", {"single", "concat", "fused"});
    add("train", "share_registration", Type::boolean, "true", "one registration network for both branches");
    for (const char* st : {"synthesis", "registration", "reconstruction"}) {
      add(st, "max_epochs", Type::integer, "200", "epoch limit");
      add(st, "patience", Type::integer, "10", "epochs without validation gain before stopping");
      add(st, "batch_size", Type::integer, "8", "records per step");
      add(st, "lr", Type::real, "0.0002", "Adam learning rate");
    }
    add("paths", "data_dir", Type::text, "data", "generated records and manifest");
    add("paths", "masks_dir", Type::text, "masks", "sampling masks");
    add("paths", "run_dir", Type::text, "run", "checkpoints and logs");
    add("paths", "report_dir", Type::text, "report", "rendered panels");
    add("run", "seed", Type::integer, "0", "global seed");
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig c;
    c.parse(ss.str(), path);
    return c;
  }

  /// Reads "key = value" lines under [section] headers; '#' and ';' start
  /// comments.
  void parse(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line, section;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const std::string where = origin + ":" + std::to_string(no);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        if (!has_section(section)) throw ConfigError(where + ": unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      if (section.empty()) throw ConfigError(where + ": key outside any section");
      set(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
    }
  }

  /// Sets "section.key" after type checking.
  void set(const std::string& dotted, const std::string& value, const std::string& where = "override") {
    Key& k = key(dotted, where);
    check(k, value, where);
    k.value = value;
  }

  /// Applies "section.key=value" overrides.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  const std::string& text(const std::string& dotted) const { return find(dotted).value; }
  long long integer(const std::string& dotted) const { return std::stoll(find(dotted).value); }
  double real(const std::string& dotted) const { return std::stod(find(dotted).value); }
  bool boolean(const std::string& dotted) const { return find(dotted).value == "true"; }

  std::size_t count(const std::string& dotted) const {
    const long long v = integer(dotted);
    if (v < 0) throw ConfigError(dotted + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  /// Full resolved document, defaults included.
  std::string dump(bool with_help = false) const {
    std::string out, section;
    for (const auto& k : keys_) {
      if (k.section != section) {
        if (!section.empty()) out += "\n";
        section = k.section;
        out += "[" + section + "]\n";
      }
      out += k.name + " = " + k.value;
      if (with_help) {
        out += "  # " + k.help;
        if (!k.choices.empty()) {
          out += " (";
          for (std::size_t i = 0; i < k.choices.size(); ++i) out += (i ? "|" : "") + k.choices[i];
          out += ")";
        }
      }
      out += "\n";
    }
    return out;
  }

  // Typed views -------------------------------------------------------------

  DatasetConfig dataset() const {
    DatasetConfig d;
    d.phantom.size = count("data.size");
    if (d.phantom.size == 0 || d.phantom.size % 2) throw ConfigError("data.size must be positive and even");
    d.phantom.n_structures = count("data.n_structures");
    if (d.phantom.n_structures == 0) throw ConfigError("data.n_structures must be >= 1");
    d.phantom.blur_sigma = real("data.blur_sigma");
    d.n_train = count("data.n_train");
    d.n_val = count("data.n_val");
    d.n_test = count("data.n_test");
    d.motion.rot_deg = real("data.rot_deg");
    d.motion.trans_mm = real("data.trans_mm");
    const double mpp = real("data.mm_per_px");
    d.motion.mm_per_px = mpp > 0 ? mpp : 192.0 / static_cast<double>(d.phantom.size);
    if (d.motion.rot_deg < 0 || d.motion.trans_mm < 0) throw ConfigError("motion ranges must be non-negative");
    d.seed = seed();
    return d;
  }

  MaskParams mask() const {
    MaskParams m;
    m.height = count("data.size");
    m.acceleration = real("mask.acceleration");
    m.n_center = count("mask.n_center");
    m.sigma_frac = real("mask.sigma_frac");
    m.seed = derive_seed(seed(), 0x3a5c);
    if (!(m.acceleration >= 1)) throw ConfigError("mask.acceleration must be >= 1");
    return m;
  }

  StagePlan plan() const {
    StagePlan p;
    p.domain_mode = parse_domain_mode(text("train.domain_mode"));
    p.contrast_mode = parse_contrast_mode(text("train.contrast_mode"));
    p.image_loss = parse_image_loss(text("loss.image_loss"));
    p.weights = {real("loss.alpha"), real("loss.beta")};
    try {
      p.weights.validate();
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
    p.share_registration = boolean("train.share_registration");
    for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction}) {
      const std::string sec = to_string(s);
      auto& st = p.settings(s);
      st.max_epochs = count(sec + ".max_epochs");
      st.patience = count(sec + ".patience");
      st.batch_size = count(sec + ".batch_size");
      st.lr = real(sec + ".lr");
      if (st.max_epochs == 0 || st.batch_size == 0 || st.patience == 0 || !(st.lr > 0))
        throw ConfigError("[" + sec + "] max_epochs, patience, batch_size and lr must be positive");
    }
    const std::size_t size = count("data.size");
    p.synth.depth = count("model.depth");
    p.synth.base_channels = count("model.base_channels");
    if (p.synth.depth == 0 || p.synth.base_channels == 0) throw ConfigError("model depth and width must be positive");
    if (size % (std::size_t{1} << p.synth.depth))
      throw ConfigError("data.size must be divisible by 2^model.depth");
    p.reg.height = p.reg.width = size;
    if (size % 16) throw ConfigError("data.size must be a multiple of 16 for the registration network");
    p.reg.translation_scale = real("model.reg_translation_scale");
    p.reg.rotation_scale = radians(real("model.reg_rotation_scale_deg"));
    p.recon.depth = p.synth.depth;
    p.recon.base_channels = p.synth.base_channels;
    p.recon.dc_enabled = boolean("model.dc_enabled");
    p.seed = derive_seed(seed(), 0x7a11);
    return p;
  }

  std::uint64_t seed() const {
    const long long s = integer("run.seed");
    if (s < 0) throw ConfigError("run.seed must be non-negative");
    return static_cast<std::uint64_t>(s);
  }

  const std::vector<Key>& keys() const { return keys_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  bool has_section(const std::string& s) const {
    for (const auto& k : keys_)
      if (k.section == s) return true;
    return false;
  }

  Key& key(const std::string& dotted, const std::string& where) {
    for (auto& k : keys_)
      if (k.section + "." + k.name == dotted) return k;
    throw ConfigError(where + ": unknown key '" + dotted + "'");
  }

  const Key& find(const std::string& dotted) const { return const_cast<RunConfig*>(this)->key(dotted, "config"); }

  static void check(const Key& k, const std::string& v, const std::string& where) {
    const std::string what = where + ": " + k.section + "." + k.name + " = '" + v + "'";
    try {
      std::size_t used = 0;
      switch (k.type) {
        case Type::integer:
          std::stoll(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
          break;
        case Type::real:
          std::stod(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
          break;
        case Type::boolean:
          if (v != "true" && v != "false") throw std::invalid_argument(v);
          break;
        case Type::text:
          if (!k.choices.empty() && std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end())
            throw std::invalid_argument(v);
          break;
      }
    } catch (const std::logic_error&) {
      const char* names[] = {"an integer", "a number", "true or false", "one of the listed choices"};
      throw ConfigError(what + " is not " + names[static_cast<int>(k.type)]);
    }
  }

  std::vector<Key> keys_;
};

}  // namespace ddmc
