#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "testutil.hpp"
#include "ugdiff/checkpoint.hpp"
#include "ugdiff/container.hpp"
#include "ugdiff/image_io.hpp"

using namespace ugdiff;

TEST_CASE("ppm and png round trip through the 8-bit pipeline") {
  const std::string dir = testutil::fresh_dir("io");
  Tensor<float> img = testutil::synthetic_image(77, 21, 34);
  for (const char* name : {"a.ppm", "a.png"}) {
    const std::string path = dir + "/" + name;
    save_image(path, img);
    Tensor<float> back = load_image(path);
    REQUIRE(back.shape == img.shape);
    for (std::int64_t i = 0; i < img.numel(); ++i)
      CHECK(std::fabs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
  }
  CHECK(has_image_extension("x.PNG"));
  CHECK(has_image_extension("x.ppm"));
  CHECK_FALSE(has_image_extension("x.jpeg"));
  CHECK_THROWS(load_image(dir + "/missing.ppm"));
  CHECK_THROWS(load_image(dir + "/a.jpg"));
}

TEST_CASE("ppm parser handles comments and rejects truncation") {
  const std::string dir = testutil::fresh_dir("ppm");
  {
    std::ofstream f(dir + "/c.ppm", std::ios::binary);
    f << "P6\n# a comment\n2 1\n# another\n255\n";
    const unsigned char px[6] = {255, 0, 0, 0, 255, 0};
    f.write(reinterpret_cast<const char*>(px), 6);
  }
  auto img = load_image(dir + "/c.ppm");
  CHECK(img.shape == std::vector<int>{3, 1, 2});
  CHECK(img.at(0, 0, 0) == doctest::Approx(1.0f));
  CHECK(img.at(1, 0, 1) == doctest::Approx(1.0f));

  {
    std::ofstream f(dir + "/t.ppm", std::ios::binary);
    f << "P6\n4 4\n255\n";
    f << "xx";  // far too short
  }
  CHECK_THROWS_AS(load_image(dir + "/t.ppm"), std::runtime_error);
}

TEST_CASE("checkpoint: module snapshot restores exactly") {
  const std::string dir = testutil::fresh_dir("ckpt");
  RandomEngine rng(3);
  Conv2d<float> conv_a(3, 5, 3, 1, 1, rng);
  Conv2d<float> conv_b(3, 5, 3, 1, 1, rng);  // different init

  Checkpoint ck;
  store_module(ck, "conv", conv_a);
  ck.put_scalar("meta/lambda", 0.2);
  ck.save(dir + "/w.ckpt");

  Checkpoint back = Checkpoint::load(dir + "/w.ckpt");
  CHECK(back.get_scalar("meta/lambda") == doctest::Approx(0.2));
  load_module(back, "conv", conv_b);
  CHECK(conv_a.weight->value().data == conv_b.weight->value().data);
  CHECK(conv_a.bias->value().data == conv_b.bias->value().data);
}

TEST_CASE("checkpoint: bad magic, bad version, truncation, missing entries") {
  const std::string dir = testutil::fresh_dir("ckpt2");
  {
    std::ofstream f(dir + "/bad.ckpt", std::ios::binary);
    f << "NOPE1234";
  }
  CHECK_THROWS_WITH_AS(Checkpoint::load(dir + "/bad.ckpt"), doctest::Contains("magic"),
                       std::runtime_error);

  Checkpoint ck;
  ck.put_scalar("a", 1.0);
  ck.save(dir + "/ok.ckpt");
  // Truncate.
  {
    std::ifstream in(dir + "/ok.ckpt", std::ios::binary);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(dir + "/trunc.ckpt", std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size() - 3));
  }
  CHECK_THROWS_AS(Checkpoint::load(dir + "/trunc.ckpt"), std::runtime_error);

  Checkpoint good = Checkpoint::load(dir + "/ok.ckpt");
  CHECK_THROWS_WITH_AS(good.get("missing"), doctest::Contains("missing"),
                       std::runtime_error);
}

TEST_CASE("container: serialize/parse round trip preserves every field") {
  Container c;
  c.orig_w = 768;
  c.orig_h = 512;
  c.n_infer_steps = 10;
  c.seed = 0x0123456789ABCDEFull;
  c.model_id = 3;
  c.substreams[0] = {1, 2, 3};
  c.substreams[1] = {};
  c.substreams[2] = {9, 9, 9, 9};
  c.substreams[3] = {0};
  auto bytes = c.serialize();
  CHECK(bytes.size() == c.total_bytes());
  CHECK(bytes[0] == 'U');
  CHECK(bytes[1] == 'G');
  CHECK(bytes[2] == 'D');
  CHECK(bytes[3] == 'F');

  Container d = Container::parse(bytes);
  CHECK(d.orig_w == 768u);
  CHECK(d.orig_h == 512u);
  CHECK(d.n_infer_steps == 10);
  CHECK(d.seed == c.seed);
  CHECK(d.model_id == 3);
  for (int i = 0; i < 4; ++i) CHECK(d.substreams[i] == c.substreams[i]);
}

TEST_CASE("container: corrupted magic, version, truncation, trailing bytes") {
  Container c;
  c.orig_w = 8;
  c.orig_h = 8;
  auto bytes = c.serialize();

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(Container::parse(bad_magic), doctest::Contains("magic"),
                       std::runtime_error);

  auto bad_version = bytes;
  bad_version[4] = 99;
  CHECK_THROWS_WITH_AS(Container::parse(bad_version), doctest::Contains("version"),
                       std::runtime_error);

  for (size_t cut : {size_t(3), size_t(10), bytes.size() - 1}) {
    auto trunc = bytes;
    trunc.resize(cut);
    CHECK_THROWS_AS(Container::parse(trunc), std::runtime_error);
  }

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_WITH_AS(Container::parse(trailing), doctest::Contains("trailing"),
                       std::runtime_error);
}
