// Generates a handful of phantom pairs, trains the full staged model for a
// few epochs and prints brain-masked PSNR/SSIM of every stage on the test
// records, next to the zero-filled baseline.
//
//   demo_reconstruct [acceleration] [epochs]

#include <cstdlib>
#include <iostream>

#include "ddmc/ddmc.hpp"

using namespace ddmc;

int main(int argc, char** argv) {
  const double accel = argc > 1 ? std::atof(argv[1]) : 4.0;
  const std::size_t epochs = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 3;

  DatasetConfig dc;
  dc.phantom.size = 64;
  dc.n_train = 24;
  dc.n_val = 6;
  dc.n_test = 6;
  dc.seed = 7;
  const auto man = make_manifest(dc);
  RecordSplits recs;
  for (auto id : man.train) recs.train.push_back(generate_record(dc, id));
  for (auto id : man.val) recs.val.push_back(generate_record(dc, id));
  for (auto id : man.test) recs.test.push_back(generate_record(dc, id));

  MaskParams mp;
  mp.height = dc.phantom.size;
  mp.seed = 11;
  const Dataset data = make_dataset(recs, mask_for(mp, accel));
  std::cout << "mask: " << data.mask.count() << "/" << data.mask.height << " rows\n";

  StagePlan plan;
  plan.reg.height = plan.reg.width = dc.phantom.size;
  for (auto& s : plan.stages) {
    s.max_epochs = epochs;
    s.lr = 1e-3;
  }
  plan.seed = 1;

  RunLog log;
  log.echo = &std::cout;
  const auto ckpts = train_all(data, plan, &log);
  const auto rep = evaluate(plan, ckpts, data.test, data.mask);
  for (const auto& a : rep.aggregate)
    std::cout << a.stage << "/" << a.branch << ": PSNR " << fmt_num(a.psnr_mean) << " dB, SSIM "
              << fmt_num(a.ssim_mean) << "\n";
  return 0;
}
