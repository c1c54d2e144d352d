#pragma once

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "ddmc/config.hpp"

namespace ddmc::cli {

namespace fs = std::filesystem;

enum ExitCode { ok = 0, usage = 1, validation = 2, io = 3 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::io:
    case ErrorKind::bad_magic:
    case ErrorKind::bad_version:
    case ErrorKind::truncated:
      return io;
    default:
      return validation;
  }
}

/// One machine-readable line: ddmc: error kind=<kind> exit=<code> msg="<text>"
inline void report_error(std::ostream& err, const std::string& kind, int code, const std::string& msg) {
  std::ostringstream q;
  q << std::quoted(msg);
  err << "ddmc: error kind=" << kind << " exit=" << code << " msg=" << q.str() << std::endl;
}

inline std::string record_path(const std::string& data_dir, std::uint64_t id) {
  std::ostringstream s;
  s << "rec_" << std::setw(5) << std::setfill('0') << id << ".ddmr";
  return (fs::path(data_dir) / "records" / s.str()).string();
}

inline std::string mask_path(const std::string& dir, double accel) {
  return (fs::path(dir) / ("mask_" + AblationCell{DomainMode::dual, ContrastMode::fused, accel}.accel_str() + ".txt"))
      .string();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir + "'");
}

/// Refuses to replace an existing output unless overwriting is allowed.
inline void guard_output(const std::string& path, bool overwrite) {
  if (!overwrite && fs::exists(path))
    throw IoError("'" + path + "' exists; pass --overwrite to replace it");
}

inline RecordSplits load_records(const std::string& data_dir) {
  const auto man = manifest_from_json(nlohmann::json::parse(read_text((fs::path(data_dir) / "manifest.json").string()),
                                                            nullptr, false));
  RecordSplits r;
  for (auto id : man.train) r.train.push_back(read_record(record_path(data_dir, id)));
  for (auto id : man.val) r.val.push_back(read_record(record_path(data_dir, id)));
  for (auto id : man.test) r.test.push_back(read_record(record_path(data_dir, id)));
  return r;
}

/// Mask for `accel`: the file written by make-masks when present, otherwise
/// regenerated from the config (both agree for an unmodified masks_dir).
inline SamplingMask load_mask(const RunConfig& cfg, double accel) {
  const auto path = mask_path(cfg.text("paths.masks_dir"), accel);
  if (fs::exists(path)) return read_mask(path);
  return mask_for(cfg.mask(), accel);
}

inline std::string checkpoint_path(const std::string& run_dir, Stage s) {
  return (fs::path(run_dir) / (std::string(to_string(s)) + ".ckpt")).string();
}

inline std::vector<Checkpoint> load_checkpoints(const std::string& run_dir) {
  std::vector<Checkpoint> out;
  for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction}) {
    const auto p = checkpoint_path(run_dir, s);
    if (fs::exists(p)) out.push_back(read_checkpoint(p));
  }
  return out;
}

inline std::size_t worker_cap(std::size_t cells) {
  if (const char* env = std::getenv("DDMC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end || v < 1) throw ConfigError("DDMC_THREADS must be a positive integer");
    return std::min<std::size_t>(cells, static_cast<std::size_t>(v));
  }
  return cells;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
  bool overwrite = true;

  void attach(CLI::App* app) {
    app->add_option("--config,-c", config_path, "config file (defaults are used for missing keys)");
    app->add_option("--set", overrides, "override a key, e.g. --set train.domain_mode=image")->take_all();
    app->add_option("--seed", seed, "global seed (overrides run.seed)");
    app->add_flag("!--no-overwrite", overwrite, "refuse to replace existing outputs");
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    for (const auto& o : overrides) c.apply_override(o);
    if (seed >= 0) c.set("run.seed", std::to_string(seed));
    return c;
  }
};

inline int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, bool overwrite, std::ostream& out) {
  const auto dc = cfg.dataset();
  const auto man = make_manifest(dc);
  guard_output((fs::path(out_dir) / "manifest.json").string(), overwrite);
  ensure_dir((fs::path(out_dir) / "records").string());
  for (auto* split : {&man.train, &man.val, &man.test})
    for (auto id : *split) write_record(generate_record(dc, id), record_path(out_dir, id));
  write_text((fs::path(out_dir) / "manifest.json").string(), manifest_to_json(man).dump(2) + "\n");
  write_text((fs::path(out_dir) / "config.cfg").string(), cfg.dump());
  out << "wrote " << man.total() << " records (" << man.train.size() << "/" << man.val.size() << "/"
      << man.test.size() << ") to " << out_dir << "\n";
  return ok;
}

inline int cmd_make_masks(const RunConfig& cfg, const std::string& out_dir, const std::vector<double>& accels,
                          bool overwrite, std::ostream& out) {
  ensure_dir(out_dir);
  for (double a : accels) {
    if (!(a >= 1)) throw ConfigError("acceleration must be >= 1");
    const auto path = mask_path(out_dir, a);
    guard_output(path, overwrite);
    const auto m = mask_for(cfg.mask(), a);
    write_mask(m, path);
    out << path << ": " << m.count() << "/" << m.height << " rows, net acceleration " << m.net_acceleration() << "\n";
  }
  return ok;
}

inline int cmd_train(const RunConfig& cfg, const std::string& stage_name, bool overwrite, bool quiet,
                     std::ostream& out, std::ostream& err) {
  const auto plan = cfg.plan();
  const std::string run_dir = cfg.text("paths.run_dir");
  std::vector<Stage> stages;
  if (stage_name == "all") {
    for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction})
      if (plan.runs(s)) stages.push_back(s);
  } else {
    stages.push_back(parse_stage(stage_name));
  }
  // Ordering problems are reported before any data is touched or written.
  auto prior = fs::exists(run_dir) ? load_checkpoints(run_dir) : std::vector<Checkpoint>{};
  {
    std::vector<Checkpoint> check = prior;
    for (Stage s : stages) {
      check_prior(s, plan, check);
      check.push_back(Checkpoint{s, {}, {}, 0, {}, 0, true, Checkpoint{}.compute_hash()});
    }
  }
  for (Stage s : stages) guard_output(checkpoint_path(run_dir, s), overwrite);
  const auto data = make_dataset(load_records(cfg.text("paths.data_dir")), load_mask(cfg, cfg.real("mask.acceleration")));
  ensure_dir(run_dir);
  write_text((fs::path(run_dir) / "config.cfg").string(), cfg.dump());
  for (Stage s : stages) {
    RunLog log;
    if (!quiet) log.echo = &err;
    std::vector<Checkpoint> upstream;
    for (auto& c : prior)
      if (static_cast<int>(c.stage) < static_cast<int>(s)) upstream.push_back(c);
    auto ck = train_stage(s, data, plan, upstream, &log);
    const std::string base = (fs::path(run_dir) / to_string(s)).string();
    write_checkpoint(ck, checkpoint_path(run_dir, s));
    write_text(base + "_steps.csv", log.steps_csv());
    write_text(base + "_epochs.csv", log.epochs_csv());
    write_text(base + "_timing.csv", log.timing_csv());
    out << to_string(s) << ": best epoch " << ck.best_epoch << " of " << ck.val_history.size() << ", val "
        << fmt_num(ck.val_history.empty() ? 0 : ck.val_history[ck.best_epoch - 1]) << ", hash " << hex64(ck.hash)
        << "\n";
    std::erase_if(prior, [&](const Checkpoint& c) { return c.stage == s; });
    prior.push_back(std::move(ck));
  }
  return ok;
}

inline std::string per_record_csv(const EvalReport& rep) {
  std::string s = "record_id,stage,branch,psnr,ssim\n";
  for (const auto& m : rep.per_record)
    s += std::to_string(m.record_id) + "," + m.stage + "," + m.branch + "," + fmt_num(m.psnr) + "," + fmt_num(m.ssim) +
         "\n";
  return s;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& split, bool overwrite, std::ostream& out) {
  const auto plan = cfg.plan();
  const std::string run_dir = cfg.text("paths.run_dir");
  const double accel = cfg.real("mask.acceleration");
  const auto ckpts = load_checkpoints(run_dir);
  for (Stage s : {Stage::synthesis, Stage::registration, Stage::reconstruction})
    if (plan.runs(s) && std::none_of(ckpts.begin(), ckpts.end(), [&](const Checkpoint& c) { return c.stage == s; }))
      throw OrderingError(std::string("eval requires a finalised ") + to_string(s) + " checkpoint in " + run_dir);
  const auto metrics = (fs::path(run_dir) / ("metrics_" + split + ".csv")).string();
  guard_output(metrics, overwrite);
  const auto data = make_dataset(load_records(cfg.text("paths.data_dir")), load_mask(cfg, accel));
  AblationResult r{{plan.domain_mode, plan.contrast_mode, accel}, evaluate(plan, ckpts, data.split(split), data.mask), {}, {}};
  write_text(metrics, metrics_csv({r}));
  write_text((fs::path(run_dir) / ("per_record_" + split + ".csv")).string(), per_record_csv(r.report));
  for (const auto& a : r.report.aggregate)
    out << std::left << std::setw(16) << a.stage << std::setw(8) << a.branch << " PSNR " << fmt_num(a.psnr_mean)
        << " +- " << fmt_num(a.psnr_std) << "  SSIM " << fmt_num(a.ssim_mean) << " +- " << fmt_num(a.ssim_std)
        << "  n=" << a.n << "\n";
  return ok;
}

inline int cmd_ablate(const RunConfig& cfg, const std::string& grid_text, const std::string& out_dir, bool overwrite,
                      bool quiet, std::ostream& out, std::ostream& err) {
  const auto grid = parse_grid(grid_text);
  const auto plan = cfg.plan();
  const auto table = (fs::path(out_dir) / "ablation.csv").string();
  guard_output(table, overwrite);
  const auto records = load_records(cfg.text("paths.data_dir"));
  const auto results = run_ablation(grid, records, plan, cfg.mask(), worker_cap(grid.size()), quiet ? nullptr : &err);
  ensure_dir(out_dir);
  write_text((fs::path(out_dir) / "config.cfg").string(), cfg.dump());
  write_text(table, ablation_table_csv(results));
  write_text((fs::path(out_dir) / "metrics.csv").string(), metrics_csv(results));
  for (const auto& r : results) {
    const auto dir = (fs::path(out_dir) / r.cell.id()).string();
    ensure_dir(dir);
    for (const auto& c : r.checkpoints) write_checkpoint(c, checkpoint_path(dir, c.stage));
    write_text((fs::path(dir) / "steps.csv").string(), r.log_csv);
    write_text((fs::path(dir) / "per_record.csv").string(), per_record_csv(r.report));
  }
  out << ablation_table_csv(results);
  return ok;
}

inline int cmd_render(const RunConfig& cfg, const std::string& split, std::size_t limit, std::ostream& out) {
  const auto plan = cfg.plan();
  const auto ckpts = load_checkpoints(cfg.text("paths.run_dir"));
  auto records = load_records(cfg.text("paths.data_dir"));
  const auto data = make_dataset(records, load_mask(cfg, cfg.real("mask.acceleration")));
  const auto& samples = data.split(split);
  std::vector<Sample> chosen(samples.begin(), samples.begin() + static_cast<long>(std::min(limit, samples.size())));
  const auto panels = run_inference(plan, ckpts, chosen, data.mask);
  std::vector<ReportItem<Real>> items;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    ReportItem<Real> it;
    it.record_id = chosen[i].id;
    it.ground_truth = unpack_complex<ComplexImage<Real>>(chosen[i].tgt_x, 0);
    it.mask = chosen[i].brain;
    it.panels = panels[i];
    items.push_back(std::move(it));
  }
  const auto dir = cfg.text("paths.report_dir");
  render_report(items, dir);
  out << "rendered " << items.size() << " records to " << dir << "\n";
  return ok;
}

/// Runs one invocation. Returns 0 on success, 1 on usage errors, 2 on
/// validation or ordering errors and 3 on I/O errors.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dual-domain multi-contrast MRI reconstruction toolkit", "ddmc"};
  app.require_subcommand(1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print the default configuration and exit");

  Common common;
  std::string data_dir, masks_dir, run_dir, stage = "all", split = "test", grid, out_dir, report_dir;
  std::vector<double> accels{4, 8};
  std::size_t limit = 4;
  bool quiet = false;

  auto* gen = app.add_subcommand("gen-data", "generate phantom records and the split manifest");
  common.attach(gen);
  gen->add_option("--out,-o", data_dir, "dataset directory (default paths.data_dir)");

  auto* masks = app.add_subcommand("make-masks", "write Cartesian sampling masks");
  common.attach(masks);
  masks->add_option("--out,-o", masks_dir, "mask directory (default paths.masks_dir)");
  masks->add_option("--accel", accels, "accelerations")->delimiter(',');

  auto* train = app.add_subcommand("train", "train one stage, or all stages of the configured mode");
  common.attach(train);
  train->add_option("--stage", stage, "synthesis|registration|reconstruction|all");
  train->add_option("--data", data_dir, "dataset directory");
  train->add_option("--run", run_dir, "run directory holding checkpoints");
  train->add_flag("--quiet,-q", quiet, "no per-epoch progress");

  auto* ev = app.add_subcommand("eval", "brain-masked PSNR/SSIM of every stage and branch");
  common.attach(ev);
  ev->add_option("--data", data_dir, "dataset directory");
  ev->add_option("--run", run_dir, "run directory holding checkpoints");
  ev->add_option("--split", split, "train|val|test");

  auto* ab = app.add_subcommand("ablate", "train and evaluate a grid of modes");
  common.attach(ab);
  ab->add_option("--grid", grid, "cells as domain,contrast,accel; '|' separates alternatives, ';' separates cells")
      ->required();
  ab->add_option("--data", data_dir, "dataset directory");
  ab->add_option("--out,-o", out_dir, "output directory (default <paths.run_dir>/ablation)");
  ab->add_flag("--quiet,-q", quiet, "no per-epoch progress");

  auto* rd = app.add_subcommand("render", "write PGM panels and error maps");
  common.attach(rd);
  rd->add_option("--data", data_dir, "dataset directory");
  rd->add_option("--run", run_dir, "run directory holding checkpoints");
  rd->add_option("--out,-o", report_dir, "report directory (default paths.report_dir)");
  rd->add_option("--split", split, "train|val|test");
  rd->add_option("--limit", limit, "number of records");

  if (argc >= 2 && std::string(argv[1]) == "--print-defaults") {
    out << RunConfig{}.dump(true);
    return ok;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", usage, e.what());
    return usage;
  }

  try {
    RunConfig cfg = common.resolve();
    auto override_path = [&](const std::string& key, const std::string& v) {
      if (!v.empty()) cfg.set(key, v);
    };
    override_path("paths.data_dir", data_dir);
    override_path("paths.masks_dir", masks_dir);
    override_path("paths.run_dir", run_dir);
    override_path("paths.report_dir", report_dir);
    if (gen->parsed()) return cmd_gen_data(cfg, cfg.text("paths.data_dir"), common.overwrite, out);
    if (masks->parsed()) return cmd_make_masks(cfg, cfg.text("paths.masks_dir"), accels, common.overwrite, out);
    if (train->parsed()) return cmd_train(cfg, stage, common.overwrite, quiet, out, err);
    if (ev->parsed()) return cmd_eval(cfg, split, common.overwrite, out);
    if (ab->parsed()) {
      if (out_dir.empty()) out_dir = (fs::path(cfg.text("paths.run_dir")) / "ablation").string();
      return cmd_ablate(cfg, grid, out_dir, common.overwrite, quiet, out, err);
    }
    if (rd->parsed()) return cmd_render(cfg, split, limit, out);
  } catch (const Error& e) {
    const int code = exit_code_for(e.kind());
    report_error(err, to_string(e.kind()), code, e.what());
    return code;
  } catch (const nlohmann::json::exception& e) {
    report_error(err, "bad_magic", io, e.what());
    return io;
  } catch (const std::exception& e) {
    report_error(err, "internal", validation, e.what());
    return validation;
  }
  report_error(err, "usage", usage, "no subcommand");
  return usage;
}

}  // namespace ddmc::cli
