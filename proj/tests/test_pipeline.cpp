#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"
#include "ugdiff/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ugdiff;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.lambda = 0.1;
  c.batch_size = 2;
  c.steps = 40;
  c.lr = 1e-3;
  c.patch = 32;
  c.seed = 77;
  c.mc_samples = 2;
  c.dataset_count = 10;
  c.log_interval = 10;
  c.codec_n = 6;
  c.codec_m = 8;
  c.cond_width = 4;
  c.denoiser_width = 8;
  c.denoiser_mult1 = 2;
  c.denoiser_mult2 = 2;
  c.t_train = 20;
  c.beta_1 = 1e-3;
  c.beta_t = 0.05;
  c.infer_steps = 3;
  return c;
}

// One fully trained tiny model directory, shared across the cases below.
struct TinyWorld {
  std::string data, out;
  TrainConfig cfg = tiny_config();

  TinyWorld() {
    data = testutil::fresh_dir("pipe_data");
    out = testutil::fresh_dir("pipe_out");
    testutil::write_synthetic_dataset(data, 8, 48, 48, 9000);
    run_stage(Stage::Low, cfg, data, out);
    run_stage(Stage::Condition, cfg, data, out);
    run_stage(Stage::Diffusion, cfg, data, out);
    precompute_uncertainty_cache(cfg, data, out);
    run_stage(Stage::Residual, cfg, data, out);
  }

  static TinyWorld& instance() {
    static TinyWorld w;
    return w;
  }
};

int count_lines(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  int n = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++n;
  return n;
}

}  // namespace

TEST_CASE("ingest: deterministic crops, padding, and failure modes") {
  const std::string dir = testutil::fresh_dir("ingest");
  testutil::write_synthetic_dataset(dir, 3, 40, 56, 100);
  // An unreadable image file is skipped with a warning.
  { std::ofstream bad(dir + "/zz_broken.ppm"); bad << "P6 not really"; }

  auto a = ingest_dataset(dir, 32, 7, 5);
  CHECK(a.patches.size() == 7);
  for (const auto& p : a.patches) CHECK(p.shape == std::vector<int>{3, 32, 32});
  auto b = ingest_dataset(dir, 32, 7, 5);
  for (size_t i = 0; i < a.patches.size(); ++i)
    CHECK(a.patches[i].data == b.patches[i].data);
  auto c = ingest_dataset(dir, 32, 7, 6);
  bool differs = false;
  for (size_t i = 0; i < a.patches.size(); ++i)
    differs |= (a.patches[i].data != c.patches[i].data);
  CHECK(differs);

  // Patch larger than the image: reflect-pad then crop.
  auto big = ingest_dataset(dir, 64, 2, 5);
  CHECK(big.patches[0].shape == std::vector<int>{3, 64, 64});

  const std::string empty = testutil::fresh_dir("ingest_empty");
  CHECK_THROWS_AS(ingest_dataset(empty, 32, 4, 5), std::runtime_error);
}

TEST_CASE("stage prerequisites produce errors naming the missing stage") {
  const std::string data = testutil::fresh_dir("stage_data");
  const std::string out = testutil::fresh_dir("stage_out");
  testutil::write_synthetic_dataset(data, 4, 48, 48, 400);
  auto cfg = tiny_config();
  cfg.dataset_count = 4;
  cfg.steps = 4;
  cfg.log_interval = 2;

  CHECK_THROWS_WITH_AS(run_stage(Stage::Condition, cfg, data, out),
                       doctest::Contains("low"), std::runtime_error);
  CHECK_THROWS_WITH_AS(run_stage(Stage::Diffusion, cfg, data, out),
                       doctest::Contains("low"), std::runtime_error);
  run_stage(Stage::Low, cfg, data, out);
  CHECK_THROWS_WITH_AS(run_stage(Stage::Diffusion, cfg, data, out),
                       doctest::Contains("condition"), std::runtime_error);
  run_stage(Stage::Condition, cfg, data, out);
  run_stage(Stage::Diffusion, cfg, data, out);
  // Residual requires the uncertainty cache.
  CHECK_THROWS_WITH_AS(run_stage(Stage::Residual, cfg, data, out),
                       doctest::Contains("uncertainty cache"), std::runtime_error);
  CHECK_FALSE(uncertainty_cache_complete(cfg, data, out));
  precompute_uncertainty_cache(cfg, data, out);
  CHECK(uncertainty_cache_complete(cfg, data, out));
  run_stage(Stage::Residual, cfg, data, out);
  CHECK(fs::exists(out + "/residual_2.ckpt"));
}

TEST_CASE("training logs have one row per interval plus a header") {
  auto& w = TinyWorld::instance();
  const int expect = w.cfg.steps / w.cfg.log_interval;
  CHECK(count_lines(w.out + "/low_2.log.csv") == expect + 1);
  CHECK(count_lines(w.out + "/condition.log.csv") == expect + 1);
  CHECK(count_lines(w.out + "/diffusion.log.csv") == expect + 1);
  CHECK(count_lines(w.out + "/residual_2.log.csv") == expect + 1);
}

TEST_CASE("low-stage training reduces the objective") {
  auto& w = TinyWorld::instance();
  std::ifstream f(w.out + "/low_2.log.csv");
  std::string line;
  std::getline(f, line);  // header
  double first = 0, last = 0;
  bool first_set = false;
  while (std::getline(f, line)) {
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    const double loss = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    if (!first_set) {
      first = loss;
      first_set = true;
    }
    last = loss;
  }
  CHECK(first_set);
  CHECK(last < first);
}

TEST_CASE("compress/decompress: determinism, dims, bitwise agreement") {
  auto& w = TinyWorld::instance();
  ModelSet models = load_models(w.out, 2);
  CHECK(models.lambda == doctest::Approx(0.1));

  // Non-multiple-of-32 extents exercise the pad-and-trim path.
  Tensor<float> img = testutil::synthetic_image(31337, 50, 42);
  auto r1 = compress_image(img, models, 123, 3);
  auto r2 = compress_image(img, models, 123, 3);
  CHECK(r1.bytes == r2.bytes);
  auto r3 = compress_image(img, models, 124, 3);
  CHECK(r1.bytes != r3.bytes);

  // Container header starts with the magic and carries the dimensions.
  REQUIRE(r1.bytes.size() > 4);
  CHECK(r1.bytes[0] == 'U');
  CHECK(r1.bytes[1] == 'G');
  CHECK(r1.bytes[2] == 'D');
  CHECK(r1.bytes[3] == 'F');
  Container c = Container::parse(r1.bytes);
  CHECK(c.orig_w == 42u);
  CHECK(c.orig_h == 50u);
  CHECK(c.seed == 123u);

  Tensor<float> dec = decompress_image(r1.bytes, models);
  CHECK(dec.shape == img.shape);
  CHECK(dec.data == r1.reconstruction.data);  // bitwise match with encoder side
  CHECK(psnr(dec, r1.reconstruction) == 100.0);
}

TEST_CASE("decompress validates model pairing and stream integrity") {
  auto& w = TinyWorld::instance();
  ModelSet models = load_models(w.out, 2);
  Tensor<float> img = testutil::synthetic_image(5150, 32, 32);
  auto r = compress_image(img, models, 9, 2);

  auto wrong_id = r.bytes;
  wrong_id[23] = 4;  // model_id byte of the header
  CHECK_THROWS_WITH_AS(decompress_image(wrong_id, models), doctest::Contains("model"),
                       std::runtime_error);

  auto trunc = r.bytes;
  trunc.resize(trunc.size() / 2);
  CHECK_THROWS_AS(decompress_image(trunc, models), std::runtime_error);

  auto bad = r.bytes;
  bad[0] = 'Z';
  CHECK_THROWS_WITH_AS(decompress_image(bad, models), doctest::Contains("magic"),
                       std::runtime_error);
}

TEST_CASE("component and steps ablations produce coherent numbers") {
  auto& w = TinyWorld::instance();
  ModelSet models = load_models(w.out, 2);
  Tensor<float> img = testutil::synthetic_image(616, 32, 32);

  auto lad = component_ablation(img, models, 5, 2);
  CHECK(lad.bpp_low > 0);
  CHECK(lad.bpp_full >= lad.bpp_low);
  for (double v : {lad.psnr_low_only, lad.psnr_condition, lad.psnr_diffusion, lad.psnr_full})
    CHECK(std::isfinite(v));

  auto pts = steps_ablation({img}, models, 5, {1, 2, 3});
  REQUIRE(pts.size() == 3);
  for (const auto& p : pts) {
    CHECK(p.bpp > 0);
    CHECK(std::isfinite(p.psnr));
  }

  auto low_eval = evaluate_low_codec(*models.low, {img});
  CHECK(low_eval.bpp > 0);
  CHECK(low_eval.psnr > 3);  // barely-trained smoke model
}

TEST_CASE("a Kodak-sized 768x512 input is accepted end to end") {
  auto& w = TinyWorld::instance();
  ModelSet models = load_models(w.out, 2);
  Tensor<float> img = testutil::synthetic_image(24, 512, 768);
  auto r = compress_image(img, models, 3, 1);
  CHECK(r.bytes.size() > Container::kHeaderBytes);
  CHECK(r.reconstruction.shape == img.shape);
  Container c = Container::parse(r.bytes);
  CHECK(c.orig_w == 768u);
  CHECK(c.orig_h == 512u);
  CHECK(r.bpp == doctest::Approx(bits_per_pixel(r.bytes.size(), 768, 512)));
}

TEST_CASE("model loading failure modes") {
  const std::string empty = testutil::fresh_dir("no_models");
  CHECK_THROWS_WITH_AS(load_models(empty, 2), doctest::Contains("low"),
                       std::runtime_error);
  CHECK_THROWS_AS(load_models(empty, 9), std::invalid_argument);
}

TEST_CASE("tensor hash distinguishes contents and is stable") {
  Tensor<float> a({3, 4, 4}, 0.5f), b({3, 4, 4}, 0.5f);
  CHECK(tensor_hash(a) == tensor_hash(b));
  b[7] += 1e-3f;
  CHECK(tensor_hash(a) != tensor_hash(b));
}
