#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "testutil.hpp"
#include "ugdiff/image_io.hpp"
#include "ugdiff/metrics.hpp"
#include "ugdiff/pipeline.hpp"

using namespace ugdiff;

#ifndef UGDIFF_CLI_PATH
#error "UGDIFF_CLI_PATH must point at the ugdiff binary"
#endif

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

RunResult run_cli(const std::string& args, const std::string& dir) {
  const std::string out_f = dir + "/stdout.txt", err_f = dir + "/stderr.txt";
  const std::string cmd =
      std::string(UGDIFF_CLI_PATH) + " " + args + " > " + out_f + " 2> " + err_f;
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  auto slurp = [](const std::string& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_f);
  r.err = slurp(err_f);
  return r;
}

// Trains one tiny model directory for the CLI round-trip cases.
struct CliWorld {
  std::string data, out, scratch;

  CliWorld() {
    data = testutil::fresh_dir("cli_data");
    out = testutil::fresh_dir("cli_models");
    scratch = testutil::fresh_dir("cli_scratch");
    testutil::write_synthetic_dataset(data, 6, 48, 48, 4242);
    TrainConfig cfg;
    cfg.lambda = 0.1;
    cfg.batch_size = 2;
    cfg.steps = 12;
    cfg.lr = 1e-3;
    cfg.patch = 32;
    cfg.seed = 3;
    cfg.mc_samples = 2;
    cfg.dataset_count = 6;
    cfg.log_interval = 4;
    cfg.codec_n = 6;
    cfg.codec_m = 8;
    cfg.cond_width = 4;
    cfg.denoiser_width = 8;
    cfg.denoiser_mult1 = 2;
    cfg.denoiser_mult2 = 2;
    cfg.t_train = 12;
    cfg.beta_1 = 1e-3;
    cfg.beta_t = 0.05;
    cfg.infer_steps = 2;
    run_stage(Stage::Low, cfg, data, out);
    run_stage(Stage::Condition, cfg, data, out);
    run_stage(Stage::Diffusion, cfg, data, out);
    precompute_uncertainty_cache(cfg, data, out);
    run_stage(Stage::Residual, cfg, data, out);
  }

  static CliWorld& instance() {
    static CliWorld w;
    return w;
  }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  const std::string dir = testutil::fresh_dir("cli_usage");
  CHECK(run_cli("", dir).exit_code == 2);
  CHECK(run_cli("compress", dir).exit_code == 2);  // missing required flags
  CHECK(run_cli("compress --no-such-flag", dir).exit_code == 2);
  CHECK(run_cli("frobnicate", dir).exit_code == 2);
  CHECK(run_cli("--help", dir).exit_code == 0);
}

TEST_CASE("decompress rejects a file with a bad magic, exit 1, names the magic") {
  auto& w = CliWorld::instance();
  const std::string bogus = w.scratch + "/bogus.ugdf";
  {
    std::ofstream f(bogus, std::ios::binary);
    f << "JUNKJUNKJUNKJUNKJUNKJUNK";
  }
  auto r = run_cli("decompress -i " + bogus + " -o " + w.scratch + "/x.ppm --models " + w.out,
                   w.scratch);
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("magic") != std::string::npos);
}

TEST_CASE("compress then decompress recreates an image of the original size") {
  auto& w = CliWorld::instance();
  const std::string img_path = w.scratch + "/in.ppm";
  save_image(img_path, testutil::synthetic_image(99, 44, 36));
  auto c = run_cli("compress -i " + img_path + " -o " + w.scratch +
                       "/out.ugdf --models " + w.out + " --lambda 0.1 --steps 2 --seed 5",
                   w.scratch);
  REQUIRE(c.exit_code == 0);
  CHECK(c.out.find("seed: 5") != std::string::npos);  // defaults/flags are logged
  auto d = run_cli("decompress -i " + w.scratch + "/out.ugdf -o " + w.scratch +
                       "/back.png --models " + w.out,
                   w.scratch);
  REQUIRE(d.exit_code == 0);
  auto back = load_image(w.scratch + "/back.png");
  CHECK(back.shape == std::vector<int>{3, 44, 36});
}

TEST_CASE("ablate --mode steps emits one CSV row per requested step count") {
  auto& w = CliWorld::instance();
  const std::string eval_dir = testutil::fresh_dir("cli_eval_imgs");
  testutil::write_synthetic_dataset(eval_dir, 2, 32, 32, 777);
  const std::string csv = w.scratch + "/steps.csv";
  auto r = run_cli("ablate --mode steps --steps 1,2,3 --data " + eval_dir + " --models " +
                       w.out + " --lambda 0.1 --out " + csv,
                   w.scratch);
  REQUIRE(r.exit_code == 0);
  std::ifstream f(csv);
  std::string line;
  int rows = 0;
  std::getline(f, line);
  CHECK(line == "steps,bpp,psnr,msssim_db");
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("ablate --mode components emits the four-variant ladder") {
  auto& w = CliWorld::instance();
  const std::string eval_dir = testutil::fresh_dir("cli_eval_imgs2");
  testutil::write_synthetic_dataset(eval_dir, 2, 32, 32, 888);
  const std::string csv = w.scratch + "/components.csv";
  auto r = run_cli("ablate --mode components --data " + eval_dir + " --models " + w.out +
                       " --lambda 0.1 --out " + csv,
                   w.scratch);
  REQUIRE(r.exit_code == 0);
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);
  std::vector<std::string> variants;
  while (std::getline(f, line))
    if (!line.empty()) variants.push_back(line.substr(0, line.find(',')));
  CHECK(variants == std::vector<std::string>{"low_only", "low_condition", "low_diffusion",
                                             "full"});
}

TEST_CASE("eval writes rows plus a summary, and plot renders an SVG") {
  auto& w = CliWorld::instance();
  const std::string eval_dir = testutil::fresh_dir("cli_eval_imgs3");
  testutil::write_synthetic_dataset(eval_dir, 3, 32, 32, 999);
  const std::string csv = w.scratch + "/eval.csv";
  auto r = run_cli("eval --data " + eval_dir + " --models " + w.out +
                       " --lambdas 0.1 --steps 2 --out " + csv,
                   w.scratch);
  REQUIRE(r.exit_code == 0);
  auto rows = read_eval_csv(csv);
  CHECK(rows.size() == 3);
  std::ifstream sf(csv + ".summary.csv");
  CHECK(sf.good());

  auto p = run_cli("plot --in " + csv + " --out " + w.scratch + "/rd.svg", w.scratch);
  REQUIRE(p.exit_code == 0);
  std::ifstream svg(w.scratch + "/rd.svg");
  CHECK(svg.good());
}

TEST_CASE("train subcommand runs a stage from a config file") {
  auto& w = CliWorld::instance();
  const std::string out2 = testutil::fresh_dir("cli_train_out");
  const std::string cfg_path = w.scratch + "/train.ini";
  {
    std::ofstream f(cfg_path);
    f << "# tiny smoke config\n";
    f << "lambda = 0.1\nbatch_size = 2\nsteps = 4\nlr = 1e-3\npatch = 32\n";
    f << "dataset_count = 4\nlog_interval = 2\ncodec_n = 6\ncodec_m = 8\nseed = 11\n";
  }
  auto r = run_cli("train --stage low --config " + cfg_path + " --data " + w.data +
                       " --out " + out2,
                   w.scratch);
  REQUIRE(r.exit_code == 0);
  CHECK(std::ifstream(out2 + "/low_2.ckpt").good());

  // Unknown config keys are rejected (exit 1 with a diagnostic).
  {
    std::ofstream f(cfg_path, std::ios::app);
    f << "not_a_key = 1\n";
  }
  auto bad = run_cli("train --stage low --config " + cfg_path + " --data " + w.data +
                         " --out " + out2,
                     w.scratch);
  CHECK(bad.exit_code == 1);
  CHECK(bad.err.find("unknown key") != std::string::npos);
}
