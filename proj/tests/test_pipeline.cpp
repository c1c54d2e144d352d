#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ddmc;

namespace {

constexpr std::size_t kSize = 32;

RecordSplits tiny_records(std::size_t n_train = 6, std::size_t n_val = 3, std::size_t n_test = 3) {
  DatasetConfig cfg;
  cfg.phantom.size = kSize;
  cfg.phantom.n_structures = 6;
  cfg.motion = {8.0, 9.0, 3.0};
  cfg.n_train = n_train;
  cfg.n_val = n_val;
  cfg.n_test = n_test;
  cfg.seed = 21;
  const auto m = make_manifest(cfg);
  RecordSplits r;
  for (auto id : m.train) r.train.push_back(generate_record(cfg, id));
  for (auto id : m.val) r.val.push_back(generate_record(cfg, id));
  for (auto id : m.test) r.test.push_back(generate_record(cfg, id));
  return r;
}

StagePlan tiny_plan(ContrastMode c = ContrastMode::fused, DomainMode d = DomainMode::dual) {
  StagePlan p;
  p.contrast_mode = c;
  p.domain_mode = d;
  p.synth = {2, 4, 2, 2};
  p.reg.height = p.reg.width = kSize;
  p.recon.depth = 2;
  p.recon.base_channels = 4;
  for (auto& s : p.stages) {
    s.max_epochs = 2;
    s.batch_size = 4;
    s.lr = 1e-3;
    s.patience = 5;
  }
  p.seed = 5;
  return p;
}

MaskParams tiny_mask() {
  MaskParams m;
  m.height = kSize;
  m.acceleration = 4;
  m.seed = 9;
  return m;
}

const RecordSplits& records() {
  static const RecordSplits r = tiny_records();
  return r;
}

const Dataset& dataset() {
  static const Dataset d = make_dataset(records(), mask_for(tiny_mask(), 4));
  return d;
}

std::string metrics_text(const EvalReport& r) {
  std::string s;
  for (const auto& m : r.per_record)
    s += std::to_string(m.record_id) + m.stage + m.branch + fmt_num(m.psnr) + fmt_num(m.ssim) + "\n";
  return s;
}

}  // namespace

TEST(Stages, OrderingIsEnforced) {
  const auto plan = tiny_plan();
  try {
    train_stage(Stage::registration, dataset(), plan, {});
    FAIL();
  } catch (const OrderingError& e) {
    EXPECT_NE(std::string(e.what()).find("registration requires a finalised synthesis"), std::string::npos);
  }
  auto syn = train_stage(Stage::synthesis, dataset(), plan, {});
  EXPECT_THROW(train_stage(Stage::reconstruction, dataset(), plan, {syn}), OrderingError);
  auto bad = syn;
  bad.finalised = false;
  EXPECT_THROW(train_stage(Stage::registration, dataset(), plan, {bad}), IntegrityError);
  bad = syn;
  bad.networks[0].second[20] ^= 1;
  EXPECT_THROW(train_stage(Stage::registration, dataset(), plan, {bad}), IntegrityError);
}

TEST(Stages, BypassedStagesRaiseModeError) {
  for (auto c : {ContrastMode::single, ContrastMode::concat}) {
    const auto plan = tiny_plan(c);
    EXPECT_THROW(train_stage(Stage::synthesis, dataset(), plan, {}), ModeError);
    EXPECT_THROW(train_stage(Stage::registration, dataset(), plan, {}), ModeError);
    EXPECT_NO_THROW(train_stage(Stage::reconstruction, dataset(), plan, {}));
  }
}

TEST(Stages, FrozenStagesAreUntouched) {
  const auto plan = tiny_plan();
  const auto ck = train_all(dataset(), plan);
  ASSERT_EQ(ck.size(), 3u);
  const auto syn_bytes = encode_checkpoint(ck[0]);
  // Each checkpoint holds only its own stage's networks.
  EXPECT_TRUE(ck[0].has("f_i") && ck[0].has("f_k") && !ck[0].has("g"));
  EXPECT_TRUE(ck[1].has("g") && !ck[1].has("f_i") && !ck[1].has("h_i"));
  EXPECT_TRUE(ck[2].has("h_i") && ck[2].has("h_k") && !ck[2].has("g"));
  // Synthesis outputs seen by evaluation equal those of the synthesis
  // checkpoint alone, bit for bit.
  Networks solo(plan);
  solo.load(ck[0], plan);
  const auto& test = dataset().test;
  auto panels = run_inference(plan, ck, test, dataset().mask);
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto want = unpack_complex<ComplexImage<Real>>(detail::synth_infer(solo.f_i, test[i].ref_x), 0);
    bool found = false;
    for (const auto& [name, img] : panels[i])
      if (name == "synthesis_image") {
        EXPECT_EQ(img, want);
        found = true;
      }
    EXPECT_TRUE(found);
  }
  // Training the later stages again from the same synthesis checkpoint gives
  // identical results, so nothing upstream moved.
  auto reg2 = train_stage(Stage::registration, dataset(), plan, {ck[0]});
  EXPECT_EQ(encode_checkpoint(reg2), encode_checkpoint(ck[1]));
  EXPECT_EQ(encode_checkpoint(ck[0]), syn_bytes);
}

TEST(Stages, FullRunIsDeterministic) {
  const auto plan = tiny_plan();
  RunLog la, lb;
  auto a = train_all(dataset(), plan, &la);
  auto b = train_all(dataset(), plan, &lb);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(encode_checkpoint(a[i]), encode_checkpoint(b[i]));
  EXPECT_EQ(la.steps_csv(), lb.steps_csv());
  EXPECT_EQ(la.epochs_csv(), lb.epochs_csv());
  EXPECT_EQ(metrics_text(evaluate(plan, a, dataset().test, dataset().mask)),
            metrics_text(evaluate(plan, b, dataset().test, dataset().mask)));
  auto other = plan;
  other.seed = 6;
  EXPECT_NE(encode_checkpoint(train_stage(Stage::synthesis, dataset(), other, {})), encode_checkpoint(a[0]));
}

TEST(Stages, ValidationHistoryAndBestEpoch) {
  auto plan = tiny_plan(ContrastMode::single);
  plan.settings(Stage::reconstruction).max_epochs = 6;
  plan.settings(Stage::reconstruction).patience = 2;
  auto c = train_stage(Stage::reconstruction, dataset(), plan, {});
  ASSERT_FALSE(c.val_history.empty());
  EXPECT_LE(c.val_history.size(), 6u);
  const auto best = std::min_element(c.val_history.begin(), c.val_history.end()) - c.val_history.begin() + 1;
  EXPECT_EQ(static_cast<std::size_t>(best), c.best_epoch);
  // Stopped no later than patience epochs after the best one.
  EXPECT_LE(c.val_history.size(), c.best_epoch + 2);
  EXPECT_LT(c.val_history[c.best_epoch - 1], c.val_history[0] + 1e-12);
}

TEST(Stages, StepLogMarksAbsentComponents) {
  auto plan = tiny_plan(ContrastMode::single, DomainMode::image);
  plan.settings(Stage::reconstruction).max_epochs = 1;
  RunLog log;
  train_stage(Stage::reconstruction, dataset(), plan, {}, &log);
  const auto csv = log.steps_csv();
  EXPECT_EQ(csv.rfind("step,stage,mode,L_i,L_k,L_ik,L_ki,total\n1,reconstruction,image,", 0), 0u);
  EXPECT_NE(csv.find(",NA,NA,NA,"), std::string::npos);
  EXPECT_EQ(log.steps(), 2u);  // 6 records in batches of 4
}

TEST(Sharing, CheckpointLayoutFollowsSwitch) {
  auto plan = tiny_plan();
  auto syn = train_stage(Stage::synthesis, dataset(), plan, {});
  auto shared = train_stage(Stage::registration, dataset(), plan, {syn});
  EXPECT_EQ(shared.networks.size(), 1u);
  EXPECT_TRUE(shared.has("g"));
  plan.share_registration = false;
  auto syn2 = train_stage(Stage::synthesis, dataset(), plan, {});
  auto sep = train_stage(Stage::registration, dataset(), plan, {syn2});
  EXPECT_TRUE(sep.has("g_i") && sep.has("g_k"));
  EXPECT_NE(sep.blob("g_i"), sep.blob("g_k"));
}

TEST(Evaluate, FullySampledIsCapped) {
  const auto plan = tiny_plan(ContrastMode::single);
  const Dataset full = make_dataset(records(), mask_for(tiny_mask(), 1));
  EXPECT_EQ(full.mask.count(), kSize);
  auto ck = train_all(full, plan);
  auto rep = evaluate(plan, ck, full.test, full.mask);
  for (const char* br : {"image", "kspace"}) {
    ASSERT_NE(rep.find("reconstruction", br), nullptr);
    EXPECT_GE(rep.find("reconstruction", br)->psnr_mean, 99.999) << br;
  }
  EXPECT_GE(rep.find("zero_filled", "image")->psnr_mean, 99.999);
}

TEST(Evaluate, AggregatesArePerRecordMeans) {
  const auto plan = tiny_plan(ContrastMode::concat);
  auto ck = train_all(dataset(), plan);
  auto rep = evaluate(plan, ck, dataset().test, dataset().mask);
  for (const auto& row : rep.aggregate) {
    std::vector<double> p;
    for (const auto& m : rep.per_record)
      if (m.stage == row.stage && m.branch == row.branch) p.push_back(m.psnr);
    EXPECT_EQ(row.n, p.size());
    double mean = 0;
    for (double v : p) mean += v / p.size();
    EXPECT_NEAR(row.psnr_mean, mean, 1e-9);
  }
  EXPECT_EQ(rep.find("synthesis", "image"), nullptr);
  EXPECT_THROW(evaluate(plan, ck, {}, dataset().mask), ValueError);
  EXPECT_THROW(evaluate(tiny_plan(), ck, dataset().test, dataset().mask), OrderingError);
}

TEST(Evaluate, SingleContrastIgnoresReference) {
  const auto plan = tiny_plan(ContrastMode::single);
  auto ck = train_all(dataset(), plan);
  auto test = dataset().test;
  auto before = metrics_text(evaluate(plan, ck, test, dataset().mask));
  Rng rng(3);
  for (auto& s : test)
    for (auto* t : {&s.ref_x, &s.ref_y, &s.moved_x, &s.moved_y})
      for (auto& v : t->values()) v = static_cast<Real>(rng.uniform());
  EXPECT_EQ(metrics_text(evaluate(plan, ck, test, dataset().mask)), before);
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
  auto c = train_stage(Stage::reconstruction, dataset(), tiny_plan(ContrastMode::single), {});
  auto dir = ddmc::testing::scratch_dir("ckpt");
  write_checkpoint(c, dir + "/rec.ckpt");
  auto back = read_checkpoint(dir + "/rec.ckpt");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(c));
  EXPECT_EQ(back.val_history, c.val_history);
  auto bytes = encode_checkpoint(c);
  auto flip = bytes;
  flip[flip.size() - 3] ^= 0x40;
  EXPECT_THROW(decode_checkpoint(flip), IntegrityError);
  auto cut = bytes;
  cut.resize(cut.size() - 5);
  try {
    decode_checkpoint(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::truncated);
  }
  std::vector<std::uint8_t> junk{'{', '}', '\n'};
  try {
    decode_checkpoint(junk);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::bad_magic);
  }
}

TEST(Ablation, GridParsing) {
  auto g = parse_grid("dual|image,fused|single,4x|8x");
  EXPECT_EQ(g.size(), 8u);
  EXPECT_EQ(g[0].id(), "dual-fused-4x");
  EXPECT_EQ(g.back().id(), "image-single-8x");
  EXPECT_EQ(parse_grid("kspace,concat,4;image,fused,2x").size(), 2u);
  EXPECT_THROW(parse_grid("dual,fused"), ConfigError);
  EXPECT_THROW(parse_grid("dual,fused,fast"), ConfigError);
  EXPECT_THROW(parse_grid("both,fused,4x"), ConfigError);
  EXPECT_THROW(parse_grid("dual,fused,0.5x"), ConfigError);
}

TEST(Ablation, OneCellTables) {
  auto base = tiny_plan();
  base.settings(Stage::reconstruction).max_epochs = 1;
  auto res = run_ablation(parse_grid("image,single,4x"), records(), base, tiny_mask());
  ASSERT_EQ(res.size(), 1u);
  const auto table = ablation_table_csv(res);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 2);
  EXPECT_NE(table.find("image-single-4x,image,single,4x,"), std::string::npos);
  EXPECT_NE(table.find(",NA,NA\n"), std::string::npos);
  const auto metrics = metrics_csv(res);
  EXPECT_EQ(metrics.rfind("cell_id,domain_mode,contrast_mode,accel,stage,branch,", 0), 0u);
  EXPECT_NE(metrics.find("image-single-4x,image,single,4x,reconstruction,image,"), std::string::npos);
  EXPECT_EQ(metrics.find("kspace"), std::string::npos);
}

TEST(Ablation, ThreadedMatchesSerial) {
  auto base = tiny_plan();
  for (auto& s : base.stages) s.max_epochs = 1;
  const auto grid = parse_grid("image|kspace,single,4x");
  auto serial = run_ablation(grid, records(), base, tiny_mask(), 1);
  auto threaded = run_ablation(grid, records(), base, tiny_mask(), 2);
  EXPECT_EQ(metrics_csv(serial), metrics_csv(threaded));
  EXPECT_EQ(serial[1].log_csv, threaded[1].log_csv);
}

TEST(Dataset, MaskHeightMustMatch) {
  MaskParams m = tiny_mask();
  m.height = 64;
  EXPECT_THROW(make_dataset(records(), mask_for(m, 4)), ShapeError);
}
