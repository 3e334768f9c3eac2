#include "ugdiff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ugdiff/adam.hpp"
#include "ugdiff/checkpoint.hpp"
#include "ugdiff/image_io.hpp"
#include "ugdiff/parallel.hpp"
#include "ugdiff/uncertainty.hpp"

namespace fs = std::filesystem;

namespace ugdiff {
namespace {

constexpr int kBands = 9;
constexpr int kDenoiserTDim = 64;

int round_up(int v, int m) { return (v + m - 1) / m * m; }
int ceil2(int v) { return (v + 1) / 2; }

Tensor<float> clamp01(Tensor<float> t) {
  for (auto& v : t.data) v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return t;
}

Tensor<float> scaled(const Tensor<float>& t, float s) {
  Tensor<float> out(t.shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] * s;
  return out;
}

// ---- stage bookkeeping ----

std::string low_ckpt(const std::string& dir, int idx) {
  return dir + "/low_" + std::to_string(idx) + ".ckpt";
}
std::string residual_ckpt(const std::string& dir, int idx) {
  return dir + "/residual_" + std::to_string(idx) + ".ckpt";
}
std::string condition_ckpt(const std::string& dir) { return dir + "/condition.ckpt"; }
std::string denoiser_ckpt(const std::string& dir) { return dir + "/denoiser.ckpt"; }

void require_file(const std::string& path, const std::string& stage_hint) {
  if (!fs::exists(path))
    throw std::runtime_error("missing prerequisite checkpoint " + path + " (run stage " +
                             stage_hint + " first)");
}

// Interval-averaged CSV logger: step,loss,rate_bpp,distortion.
class StageLogger {
 public:
  StageLogger(const std::string& path, int interval) : interval_(interval) {
    f_.open(path, std::ios::trunc);
    if (!f_) throw std::runtime_error("cannot open training log " + path);
    f_ << "step,loss,rate_bpp,distortion\n";
  }

  void add(int step, double loss, double rate_bpp, double distortion) {
    loss_ += loss;
    rate_ += rate_bpp;
    dist_ += distortion;
    ++count_;
    if ((step + 1) % interval_ == 0) {
      f_ << (step + 1) << ',' << loss_ / count_ << ',' << rate_ / count_ << ','
         << dist_ / count_ << '\n';
      f_.flush();
      loss_ = rate_ = dist_ = 0;
      count_ = 0;
    }
  }

 private:
  std::ofstream f_;
  int interval_;
  int count_ = 0;
  double loss_ = 0, rate_ = 0, dist_ = 0;
};

// Three-phase learning rate: full, 0.3x, 0.1x (boundaries at 2/3 and 5/6).
double lr_at(double base, int step, int total) {
  if (step < total * 2 / 3) return base;
  if (step < total * 5 / 6) return 0.3 * base;
  return 0.1 * base;
}

// ---- per-patch derived data ----

struct PatchBands {
  Tensor<float> ll_half;   // [3, p/2, p/2], LL scaled into [0,1]
  Tensor<float> highs;     // [9, p/2, p/2], raw band values
  std::uint64_t hash = 0;
};

std::vector<PatchBands> split_patches(const PatchStore& store) {
  std::vector<PatchBands> out;
  out.reserve(store.patches.size());
  for (const auto& p : store.patches) {
    auto pyr = dwt2(p);
    PatchBands b;
    b.ll_half = scaled(pyr.ll, kLowBandScale);
    b.highs = std::move(pyr.highs);
    b.hash = tensor_hash(p);
    out.push_back(std::move(b));
  }
  return out;
}

Tensor<float> band_scales(const std::vector<PatchBands>& bands) {
  Tensor<float> s({kBands});
  std::vector<double> acc(kBands, 0.0);
  std::int64_t per_band = 0;
  for (const auto& b : bands) {
    const std::int64_t plane = b.highs.numel() / kBands;
    per_band += plane;
    for (int c = 0; c < kBands; ++c)
      for (std::int64_t i = 0; i < plane; ++i) {
        const double v = b.highs[c * plane + i];
        acc[static_cast<size_t>(c)] += v * v;
      }
  }
  for (int c = 0; c < kBands; ++c)
    s[c] = static_cast<float>(
        std::max(std::sqrt(acc[static_cast<size_t>(c)] / std::max<std::int64_t>(per_band, 1)),
                 1e-3));
  return s;
}

Tensor<float> standardize(const Tensor<float>& highs, const Tensor<float>& scale) {
  Tensor<float> out(highs.shape);
  const std::int64_t plane = highs.numel() / kBands;
  for (int c = 0; c < kBands; ++c)
    for (std::int64_t i = 0; i < plane; ++i)
      out[c * plane + i] = highs[c * plane + i] / scale[c];
  return out;
}

Tensor<float> unstandardize(const Tensor<float>& highs_std, const Tensor<float>& scale) {
  Tensor<float> out(highs_std.shape);
  const std::int64_t plane = highs_std.numel() / kBands;
  for (int c = 0; c < kBands; ++c)
    for (std::int64_t i = 0; i < plane; ++i)
      out[c * plane + i] = highs_std[c * plane + i] * scale[c];
  return out;
}

// ---- small binary arrays (uncertainty cache): shape header + f32 LE ----

void save_array(const std::string& path, const Tensor<float>& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::uint32_t nd = static_cast<std::uint32_t>(t.shape.size());
  f.write(reinterpret_cast<const char*>(&nd), 4);
  for (int d : t.shape) {
    std::uint32_t v = static_cast<std::uint32_t>(d);
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * 4));
  if (!f) throw std::runtime_error("write failed for " + path);
}

Tensor<float> load_array(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::uint32_t nd = 0;
  f.read(reinterpret_cast<char*>(&nd), 4);
  if (!f || nd > 8) throw std::runtime_error("corrupt array file " + path);
  std::vector<int> shape(nd);
  for (auto& d : shape) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    d = static_cast<int>(v);
  }
  Tensor<float> t(shape);
  f.read(reinterpret_cast<char*>(t.data.data()),
         static_cast<std::streamsize>(t.data.size() * 4));
  if (!f) throw std::runtime_error("corrupt array file " + path);
  return t;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string cache_base(const std::string& out_dir, std::uint64_t hash, int lambda_index) {
  return out_dir + "/uncertainty/" + hash_hex(hash) + "_" + std::to_string(lambda_index);
}

// ---- checkpoint meta helpers ----

void store_codec(const std::string& path, const CodecModel<float>& codec, double lambda) {
  Checkpoint ck;
  store_module(ck, "codec", codec);
  const auto& cfg = codec.config();
  ck.put_scalar("meta/lambda", lambda);
  ck.put_scalar("meta/in_ch", cfg.in_ch);
  ck.put_scalar("meta/n", cfg.n);
  ck.put_scalar("meta/m", cfg.m);
  ck.put_scalar("meta/two_slice", cfg.two_slice ? 1 : 0);
  ck.save(path);
}

std::unique_ptr<CodecModel<float>> load_codec(const std::string& path, CodecConfig* cfg_out,
                                              double* lambda_out) {
  Checkpoint ck = Checkpoint::load(path);
  CodecConfig cfg;
  cfg.in_ch = static_cast<int>(ck.get_scalar("meta/in_ch"));
  cfg.n = static_cast<int>(ck.get_scalar("meta/n"));
  cfg.m = static_cast<int>(ck.get_scalar("meta/m"));
  cfg.two_slice = ck.get_scalar("meta/two_slice") != 0;
  RandomEngine rng(0);
  auto codec = std::make_unique<CodecModel<float>>(cfg, rng);
  load_module(ck, "codec", *codec);
  codec->invalidate_tables();
  if (cfg_out) *cfg_out = cfg;
  if (lambda_out) *lambda_out = ck.get_scalar("meta/lambda");
  return codec;
}

std::unique_ptr<ConditionNet<float>> load_condition(const std::string& path,
                                                    Tensor<float>* highs_scale) {
  Checkpoint ck = Checkpoint::load(path);
  ConditionNet<float>::Config cfg;
  const int w = static_cast<int>(ck.get_scalar("meta/cond_width"));
  cfg.widths = {w, 2 * w, 4 * w, 8 * w};
  RandomEngine rng(0);
  auto net = std::make_unique<ConditionNet<float>>(cfg, rng);
  load_module(ck, "condition", *net);
  if (highs_scale) *highs_scale = ck.get("meta/highs_scale");
  return net;
}

struct DenoiserMeta {
  DenoiserUNet<float>::Config cfg;
  int t_train = 100;
  double beta_1 = 1e-4, beta_t = 0.02;
  int infer_steps = 10;
  Tensor<float> highs_scale;
};

std::unique_ptr<DenoiserUNet<float>> load_denoiser(const std::string& path,
                                                   DenoiserMeta* meta) {
  Checkpoint ck = Checkpoint::load(path);
  DenoiserMeta m;
  m.cfg.bands = kBands;
  m.cfg.width = static_cast<int>(ck.get_scalar("meta/width"));
  m.cfg.mult1 = static_cast<int>(ck.get_scalar("meta/mult1"));
  m.cfg.mult2 = static_cast<int>(ck.get_scalar("meta/mult2"));
  m.cfg.t_dim = static_cast<int>(ck.get_scalar("meta/t_dim"));
  m.cfg.attention = ck.get_scalar("meta/attention") != 0;
  m.t_train = static_cast<int>(ck.get_scalar("meta/t_train"));
  m.beta_1 = ck.get_scalar("meta/beta_1");
  m.beta_t = ck.get_scalar("meta/beta_t");
  m.infer_steps = static_cast<int>(ck.get_scalar("meta/infer_steps"));
  m.highs_scale = ck.get("meta/highs_scale");
  RandomEngine rng(0);
  auto net = std::make_unique<DenoiserUNet<float>>(m.cfg, rng);
  load_module(ck, "denoiser", *net);
  if (meta) *meta = std::move(m);
  return net;
}

NoiseSchedule restride(const NoiseSchedule& s, int n_infer) {
  return make_schedule(s.t_train, s.beta[1], s.beta[s.t_train], n_infer);
}

// ---- full coding pipeline internals ----

struct EncodeInternals {
  Container container;
  Tensor<float> ll_hat;        // [3, H/2, W/2] in band units
  Tensor<float> condition_raw; // condition-generated highs, band units
  Tensor<float> pred_raw;      // diffusion-predicted highs, band units
  Tensor<float> residual_hat;  // decoded residual
  int padded_h = 0, padded_w = 0;
  double est_bits_low = 0, est_bits_res = 0;
};

Tensor<float> symbols_to_tensor(const std::vector<int>& symbols,
                                const std::vector<int>& shape) {
  Tensor<float> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(symbols[static_cast<size_t>(i)]);
  return t;
}

EncodeInternals encode_pipeline(const Tensor<float>& image, const ModelSet& models,
                                std::uint64_t seed, int n_infer_steps) {
  SingleThreadScope single;
  check_shape(image.ndim() == 3 && image.dim(0) == 3, "compress expects an RGB image");
  if (n_infer_steps < 1 || n_infer_steps > models.schedule.t_train)
    throw std::invalid_argument("compress: inference steps must be in [1, t_train]");

  const int oh = image.dim(1), ow = image.dim(2);
  const int ph = round_up(oh, 32), pw = round_up(ow, 32);
  Tensor<float> padded = pad_reflect_to(image, ph, pw);
  auto pyr = dwt2(padded);
  Tensor<float> ll_half = scaled(pyr.ll, kLowBandScale);

  EncodeInternals out;
  out.padded_h = ph;
  out.padded_w = pw;

  auto low_coded = models.low->encode_eval(ll_half);
  Tensor<float> h_hat_low = symbols_to_tensor(low_coded.h_symbols, low_coded.h_shape);
  out.est_bits_low = low_coded.est_bits_y + low_coded.est_bits_h;
  out.container.substreams[0] = models.low->code_y_stream(low_coded, h_hat_low);
  out.container.substreams[1] = models.low->code_h_stream(low_coded);
  out.ll_hat = scaled(low_coded.x_hat, 1.0f / kLowBandScale);

  Tensor<float> cond_std = models.condition->generate(low_coded.x_hat);
  out.condition_raw = unstandardize(cond_std, models.highs_scale);

  NoiseSchedule isched = restride(models.schedule, n_infer_steps);
  Tensor<float> pred_std =
      sample<float>(models.denoiser->inference_fn(), cond_std, isched, seed);
  out.pred_raw = unstandardize(pred_std, models.highs_scale);

  Tensor<float> residual(pyr.highs.shape);
  for (std::int64_t i = 0; i < residual.numel(); ++i)
    residual[i] = pyr.highs[i] - out.pred_raw[i];

  auto res_coded = models.residual->encode_eval(residual);
  Tensor<float> h_hat_res = symbols_to_tensor(res_coded.h_symbols, res_coded.h_shape);
  out.est_bits_res = res_coded.est_bits_y + res_coded.est_bits_h;
  out.container.substreams[2] = models.residual->code_y_stream(res_coded, h_hat_res);
  out.container.substreams[3] = models.residual->code_h_stream(res_coded);
  out.residual_hat = res_coded.x_hat;

  out.container.orig_w = static_cast<std::uint32_t>(ow);
  out.container.orig_h = static_cast<std::uint32_t>(oh);
  out.container.n_infer_steps = static_cast<std::uint16_t>(n_infer_steps);
  out.container.seed = seed;
  out.container.model_id = static_cast<std::uint8_t>(models.lambda_index);
  return out;
}

Tensor<float> reconstruct(const Tensor<float>& ll_hat, const Tensor<float>& highs,
                          int padded_h, int padded_w, int orig_h, int orig_w) {
  WaveletPyramid<float> pyr;
  pyr.ll = ll_hat;
  pyr.highs = highs;
  pyr.orig_h = padded_h;
  pyr.orig_w = padded_w;
  Tensor<float> img = idwt2(pyr);
  return clamp01(crop_to(img, orig_h, orig_w));
}

Tensor<float> add_tensors(const Tensor<float>& a, const Tensor<float>& b) {
  Tensor<float> out(a.shape);
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

}  // namespace

Stage parse_stage(const std::string& name) {
  if (name == "low") return Stage::Low;
  if (name == "condition") return Stage::Condition;
  if (name == "diffusion") return Stage::Diffusion;
  if (name == "residual") return Stage::Residual;
  throw std::invalid_argument("unknown stage '" + name +
                              "' (expected low|condition|diffusion|residual)");
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Low: return "low";
    case Stage::Condition: return "condition";
    case Stage::Diffusion: return "diffusion";
    case Stage::Residual: return "residual";
  }
  return "?";
}

std::uint64_t tensor_hash(const Tensor<float>& t) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  for (int d : t.shape) mix(static_cast<std::uint64_t>(d));
  for (float v : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    mix(bits);
  }
  return h;
}

PatchStore ingest_dataset(const std::string& dir, int patch_size, int count,
                          std::uint64_t seed) {
  if (patch_size < 2 || count < 1)
    throw std::invalid_argument("ingest_dataset: bad patch size or count");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && has_image_extension(e.path().string()))
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());

  std::vector<Tensor<float>> images;
  for (const auto& f : files) {
    try {
      images.push_back(load_image(f));
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping unreadable image " << f << ": " << e.what() << "\n";
    }
  }
  if (images.empty())
    throw std::runtime_error("ingest_dataset: no usable images in " + dir);

  RandomEngine rng(seed);
  PatchStore store;
  store.patches.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const Tensor<float>& img = images[static_cast<size_t>(i) % images.size()];
    Tensor<float> src = (img.dim(1) < patch_size || img.dim(2) < patch_size)
                            ? pad_reflect_to(img, std::max(img.dim(1), patch_size),
                                             std::max(img.dim(2), patch_size))
                            : img;
    const int y0 = static_cast<int>(rng.uniform_int(0, src.dim(1) - patch_size));
    const int x0 = static_cast<int>(rng.uniform_int(0, src.dim(2) - patch_size));
    Tensor<float> patch({3, patch_size, patch_size});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          patch.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    store.patches.push_back(std::move(patch));
  }
  return store;
}

ModelSet load_models(const std::string& models_dir, int lambda_index) {
  if (lambda_index < 0 || lambda_index >= kLambdaCount)
    throw std::invalid_argument("lambda index out of range");
  ModelSet m;
  m.lambda_index = lambda_index;
  require_file(low_ckpt(models_dir, lambda_index), "low");
  require_file(condition_ckpt(models_dir), "condition");
  require_file(denoiser_ckpt(models_dir), "diffusion");
  require_file(residual_ckpt(models_dir, lambda_index), "residual");

  double lam_low = 0, lam_res = 0;
  m.low = load_codec(low_ckpt(models_dir, lambda_index), &m.low_cfg, &lam_low);
  m.residual = load_codec(residual_ckpt(models_dir, lambda_index), &m.res_cfg, &lam_res);
  if (std::fabs(lam_low - lam_res) > 1e-9)
    throw std::runtime_error("model/lambda mismatch between low and residual checkpoints");
  m.lambda = lam_low;
  if (lambda_index_of(m.lambda) != lambda_index)
    throw std::runtime_error("model/lambda mismatch: checkpoint lambda " +
                             std::to_string(m.lambda) + " is not grid index " +
                             std::to_string(lambda_index));

  Tensor<float> cond_scale;
  m.condition = load_condition(condition_ckpt(models_dir), &cond_scale);
  DenoiserMeta dmeta;
  m.denoiser = load_denoiser(denoiser_ckpt(models_dir), &dmeta);
  m.highs_scale = dmeta.highs_scale;
  m.default_infer_steps = dmeta.infer_steps;
  m.schedule = make_schedule(dmeta.t_train, dmeta.beta_1, dmeta.beta_t, dmeta.infer_steps);
  return m;
}

// ---------------------------------------------------------------------------
// Training stages.
// ---------------------------------------------------------------------------

namespace {

// Shared codec-stage trainer; weight_maps is empty for the plain R-D loss.
void train_codec_stage(CodecModel<float>& codec, const std::vector<Tensor<float>>& inputs,
                       const std::vector<Tensor<float>>& weight_maps, double lambda,
                       const TrainConfig& cfg, int steps, double lr,
                       const std::string& log_path) {
  AdamOptimizer<float> opt(codec.parameters(), lr);
  RandomEngine batch_rng(cfg.seed + 1);
  RandomEngine noise_rng(cfg.seed + 2);
  StageLogger log(log_path, cfg.log_interval);
  const int n = static_cast<int>(inputs.size());
  for (int step = 0; step < steps; ++step) {
    opt.set_lr(lr_at(lr, step, steps));
    opt.zero_grad();
    Var<float> total;
    double rate_acc = 0, dist_acc = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int idx = static_cast<int>(batch_rng.uniform_int(0, n - 1));
      auto fw = codec.train_forward(inputs[static_cast<size_t>(idx)], noise_rng);
      Var<float> loss;
      if (weight_maps.empty()) {
        loss = rd_loss(fw.x, fw.x_hat, fw.bits_y, fw.bits_h, lambda);
      } else {
        loss = urd_loss(fw.x, fw.x_hat, fw.bits_y, fw.bits_h,
                        weight_maps[static_cast<size_t>(idx)]);
      }
      const double px = static_cast<double>(fw.x->value.dim(1)) * fw.x->value.dim(2);
      rate_acc += (static_cast<double>(fw.bits_y->value[0]) + fw.bits_h->value[0]) / px;
      double mse = 0;
      for (std::int64_t i = 0; i < fw.x->value.numel(); ++i) {
        const double d = fw.x->value[i] - fw.x_hat->value[i];
        mse += d * d;
      }
      dist_acc += mse / static_cast<double>(fw.x->value.numel());
      total = total ? ops::add(total, loss) : loss;
    }
    total = ops::scale(total, 1.0 / cfg.batch_size);
    backward(total);
    std::string diag;
    if (!opt.step(&diag))
      std::cerr << "warning: step " << step << " skipped: " << diag << "\n";
    log.add(step, total->value[0], rate_acc / cfg.batch_size, dist_acc / cfg.batch_size);
  }
  codec.invalidate_tables();
}

std::vector<Tensor<float>> reconstruct_low_bands(const CodecModel<float>& low,
                                                 const std::vector<PatchBands>& bands) {
  std::vector<Tensor<float>> out;
  out.reserve(bands.size());
  for (const auto& b : bands) out.push_back(low.encode_eval(b.ll_half).x_hat);
  return out;
}

}  // namespace

void run_stage(Stage stage, const TrainConfig& config, const std::string& data_dir,
               const std::string& out_dir) {
  fs::create_directories(out_dir);
  const int lam_idx = lambda_index_of(config.lambda);
  const int steps = config.stage_steps(stage_name(stage));

  PatchStore store = ingest_dataset(data_dir, config.patch, config.dataset_count, config.seed);
  std::vector<PatchBands> bands = split_patches(store);

  switch (stage) {
    case Stage::Low: {
      CodecConfig cc{3, config.codec_n, config.codec_m, config.codec_two_slice};
      RandomEngine wrng(config.seed);
      CodecModel<float> codec(cc, wrng);
      std::vector<Tensor<float>> inputs;
      inputs.reserve(bands.size());
      for (auto& b : bands) inputs.push_back(b.ll_half);
      train_codec_stage(codec, inputs, {}, config.lambda, config, steps,
                        config.stage_lr("low"),
                        out_dir + "/low_" + std::to_string(lam_idx) + ".log.csv");
      store_codec(low_ckpt(out_dir, lam_idx), codec, config.lambda);
      break;
    }
    case Stage::Condition: {
      require_file(low_ckpt(out_dir, lam_idx), "low");
      auto low = load_codec(low_ckpt(out_dir, lam_idx), nullptr, nullptr);
      auto ll_hats = reconstruct_low_bands(*low, bands);
      Tensor<float> scale = band_scales(bands);
      std::vector<Tensor<float>> targets;
      targets.reserve(bands.size());
      for (auto& b : bands) targets.push_back(standardize(b.highs, scale));

      ConditionNet<float>::Config cc;
      cc.widths = {config.cond_width, 2 * config.cond_width, 4 * config.cond_width,
                   8 * config.cond_width};
      RandomEngine wrng(config.seed + 10);
      ConditionNet<float> net(cc, wrng);
      const double lr = config.stage_lr("condition");
      AdamOptimizer<float> opt(net.parameters(), lr);
      RandomEngine batch_rng(config.seed + 11);
      StageLogger log(out_dir + "/condition.log.csv", config.log_interval);
      const int n = static_cast<int>(bands.size());
      for (int step = 0; step < steps; ++step) {
        opt.set_lr(lr_at(lr, step, steps));
        opt.zero_grad();
        Var<float> total;
        for (int b = 0; b < config.batch_size; ++b) {
          const int idx = static_cast<int>(batch_rng.uniform_int(0, n - 1));
          auto pred = net(make_leaf<float>(ll_hats[static_cast<size_t>(idx)]));
          auto loss = condition_loss(pred, make_leaf<float>(targets[static_cast<size_t>(idx)]));
          total = total ? ops::add(total, loss) : loss;
        }
        total = ops::scale(total, 1.0 / config.batch_size);
        backward(total);
        std::string diag;
        if (!opt.step(&diag))
          std::cerr << "warning: step " << step << " skipped: " << diag << "\n";
        log.add(step, total->value[0], 0.0, total->value[0]);
      }
      Checkpoint ck;
      store_module(ck, "condition", net);
      ck.put_scalar("meta/cond_width", config.cond_width);
      ck.put("meta/highs_scale", scale);
      ck.save(condition_ckpt(out_dir));
      break;
    }
    case Stage::Diffusion: {
      require_file(low_ckpt(out_dir, lam_idx), "low");
      require_file(condition_ckpt(out_dir), "condition");
      auto low = load_codec(low_ckpt(out_dir, lam_idx), nullptr, nullptr);
      Tensor<float> scale;
      auto cond_net = load_condition(condition_ckpt(out_dir), &scale);

      auto ll_hats = reconstruct_low_bands(*low, bands);
      std::vector<Tensor<float>> x0s, conds;
      x0s.reserve(bands.size());
      conds.reserve(bands.size());
      for (size_t i = 0; i < bands.size(); ++i) {
        x0s.push_back(standardize(bands[i].highs, scale));
        conds.push_back(cond_net->generate(ll_hats[i]));
      }

      DenoiserUNet<float>::Config dc;
      dc.bands = kBands;
      dc.width = config.denoiser_width;
      dc.mult1 = config.denoiser_mult1;
      dc.mult2 = config.denoiser_mult2;
      dc.t_dim = kDenoiserTDim;
      dc.attention = config.denoiser_attention;
      RandomEngine wrng(config.seed + 20);
      DenoiserUNet<float> net(dc, wrng);
      NoiseSchedule sched =
          make_schedule(config.t_train, config.beta_1, config.beta_t, config.infer_steps);

      const double lr = config.stage_lr("diffusion");
      AdamOptimizer<float> opt(net.parameters(), lr);
      RandomEngine batch_rng(config.seed + 21);
      RandomEngine noise_rng(config.seed + 22);
      StageLogger log(out_dir + "/diffusion.log.csv", config.log_interval);
      const int n = static_cast<int>(bands.size());
      for (int step = 0; step < steps; ++step) {
        opt.set_lr(lr_at(lr, step, steps));
        opt.zero_grad();
        std::vector<const Tensor<float>*> bx, bc;
        for (int b = 0; b < config.batch_size; ++b) {
          const int idx = static_cast<int>(batch_rng.uniform_int(0, n - 1));
          bx.push_back(&x0s[static_cast<size_t>(idx)]);
          bc.push_back(&conds[static_cast<size_t>(idx)]);
        }
        auto loss = diffusion_loss<float>(net.graph_fn(), bx, bc, sched, noise_rng);
        backward(loss);
        std::string diag;
        if (!opt.step(&diag))
          std::cerr << "warning: step " << step << " skipped: " << diag << "\n";
        log.add(step, loss->value[0], 0.0, loss->value[0]);
      }
      Checkpoint ck;
      store_module(ck, "denoiser", net);
      ck.put_scalar("meta/width", dc.width);
      ck.put_scalar("meta/mult1", dc.mult1);
      ck.put_scalar("meta/mult2", dc.mult2);
      ck.put_scalar("meta/t_dim", dc.t_dim);
      ck.put_scalar("meta/attention", dc.attention ? 1 : 0);
      ck.put_scalar("meta/t_train", config.t_train);
      ck.put_scalar("meta/beta_1", config.beta_1);
      ck.put_scalar("meta/beta_t", config.beta_t);
      ck.put_scalar("meta/infer_steps", config.infer_steps);
      ck.put("meta/highs_scale", scale);
      ck.save(denoiser_ckpt(out_dir));
      break;
    }
    case Stage::Residual: {
      require_file(low_ckpt(out_dir, lam_idx), "low");
      require_file(condition_ckpt(out_dir), "condition");
      require_file(denoiser_ckpt(out_dir), "diffusion");
      // The uncertainty cache is a hard prerequisite.
      std::vector<std::string> missing;
      for (const auto& b : bands) {
        const std::string base = cache_base(out_dir, b.hash, lam_idx);
        if (!fs::exists(base + ".delta.bin") || !fs::exists(base + ".pred.bin"))
          missing.push_back(base);
      }
      if (!missing.empty())
        throw std::runtime_error(
            "residual stage requires the uncertainty cache, but " +
            std::to_string(missing.size()) + " of " + std::to_string(bands.size()) +
            " entries are missing under " + out_dir +
            "/uncertainty (build it first, e.g. train --stage residual --build-cache)");

      std::vector<Tensor<float>> residuals, weights;
      residuals.reserve(bands.size());
      weights.reserve(bands.size());
      for (const auto& b : bands) {
        const std::string base = cache_base(out_dir, b.hash, lam_idx);
        Tensor<float> delta = load_array(base + ".delta.bin");
        Tensor<float> pred = load_array(base + ".pred.bin");
        check_shape(delta.same_shape(b.highs) && pred.same_shape(b.highs),
                    "uncertainty cache entry shape");
        Tensor<float> r(b.highs.shape);
        for (std::int64_t i = 0; i < r.numel(); ++i) r[i] = b.highs[i] - pred[i];
        residuals.push_back(std::move(r));
        weights.push_back(build_weight_map(delta, config.lambda));
      }
      CodecConfig cc{kBands, config.codec_n, config.codec_m, config.codec_two_slice};
      RandomEngine wrng(config.seed + 30);
      CodecModel<float> codec(cc, wrng);
      train_codec_stage(codec, residuals, weights, config.lambda, config, steps,
                        config.stage_lr("residual"),
                        out_dir + "/residual_" + std::to_string(lam_idx) + ".log.csv");
      store_codec(residual_ckpt(out_dir, lam_idx), codec, config.lambda);
      break;
    }
  }
}

bool uncertainty_cache_complete(const TrainConfig& config, const std::string& data_dir,
                                const std::string& out_dir) {
  const int lam_idx = lambda_index_of(config.lambda);
  PatchStore store = ingest_dataset(data_dir, config.patch, config.dataset_count, config.seed);
  for (const auto& p : store.patches) {
    const std::string base = cache_base(out_dir, tensor_hash(p), lam_idx);
    if (!fs::exists(base + ".delta.bin") || !fs::exists(base + ".pred.bin")) return false;
  }
  return true;
}

void precompute_uncertainty_cache(const TrainConfig& config, const std::string& data_dir,
                                  const std::string& out_dir) {
  const int lam_idx = lambda_index_of(config.lambda);
  require_file(low_ckpt(out_dir, lam_idx), "low");
  require_file(condition_ckpt(out_dir), "condition");
  require_file(denoiser_ckpt(out_dir), "diffusion");
  fs::create_directories(out_dir + "/uncertainty");

  auto low = load_codec(low_ckpt(out_dir, lam_idx), nullptr, nullptr);
  Tensor<float> scale;
  auto cond_net = load_condition(condition_ckpt(out_dir), &scale);
  DenoiserMeta dmeta;
  auto denoiser = load_denoiser(denoiser_ckpt(out_dir), &dmeta);
  NoiseSchedule sched =
      make_schedule(dmeta.t_train, dmeta.beta_1, dmeta.beta_t, dmeta.infer_steps);

  PatchStore store = ingest_dataset(data_dir, config.patch, config.dataset_count, config.seed);
  std::vector<PatchBands> bands = split_patches(store);
  auto fn = denoiser->inference_fn();
  for (const auto& b : bands) {
    const std::string base = cache_base(out_dir, b.hash, lam_idx);
    if (fs::exists(base + ".delta.bin") && fs::exists(base + ".pred.bin")) continue;
    auto ll_hat = low->encode_eval(b.ll_half).x_hat;
    Tensor<float> cond = cond_net->generate(ll_hat);
    auto samples_std =
        mc_predict<float>(fn, cond, sched, config.mc_samples, b.hash ^ config.seed);
    std::vector<Tensor<float>> samples_raw;
    samples_raw.reserve(samples_std.size());
    for (auto& s : samples_std) samples_raw.push_back(unstandardize(s, dmeta.highs_scale));
    auto u = estimate_uncertainty(samples_raw);
    save_array(base + ".delta.bin", u.delta);
    save_array(base + ".pred.bin", samples_raw[0]);
  }
}

// ---------------------------------------------------------------------------
// Coding entry points.
// ---------------------------------------------------------------------------

CompressResult compress_image(const Tensor<float>& image, const ModelSet& models,
                              std::uint64_t seed, int n_infer_steps) {
  EncodeInternals enc = encode_pipeline(image, models, seed, n_infer_steps);
  CompressResult r;
  Tensor<float> highs = add_tensors(enc.pred_raw, enc.residual_hat);
  r.reconstruction = reconstruct(enc.ll_hat, highs, enc.padded_h, enc.padded_w,
                                 image.dim(1), image.dim(2));
  r.bytes = enc.container.serialize();
  r.psnr = psnr(image, r.reconstruction);
  r.bpp = bits_per_pixel(r.bytes.size(), image.dim(2), image.dim(1));
  return r;
}

Tensor<float> decompress_image(std::span<const std::uint8_t> bytes, const ModelSet& models) {
  SingleThreadScope single;
  Container c = Container::parse(bytes);
  if (c.model_id != models.lambda_index)
    throw std::runtime_error("container was coded with model id " +
                             std::to_string(static_cast<int>(c.model_id)) +
                             " but models are loaded for index " +
                             std::to_string(models.lambda_index));
  if (c.orig_w == 0 || c.orig_h == 0)
    throw std::runtime_error("container: empty image dimensions");
  const int oh = static_cast<int>(c.orig_h), ow = static_cast<int>(c.orig_w);
  const int ph = round_up(oh, 32), pw = round_up(ow, 32);
  const int llh = ph / 2, llw = pw / 2;
  const int yh = llh / 16, yw = llw / 16;
  const int hh = ceil2(ceil2(yh)), hw = ceil2(ceil2(yw));

  auto low_dec = models.low->decode_streams(c.substreams[0], c.substreams[1],
                                            {models.low_cfg.m, yh, yw},
                                            {models.low_cfg.n, hh, hw});
  Tensor<float> ll_hat = scaled(low_dec.x_hat, 1.0f / kLowBandScale);
  Tensor<float> cond_std = models.condition->generate(low_dec.x_hat);
  NoiseSchedule isched = restride(models.schedule, c.n_infer_steps);
  Tensor<float> pred_std =
      sample<float>(models.denoiser->inference_fn(), cond_std, isched, c.seed);
  Tensor<float> pred_raw = unstandardize(pred_std, models.highs_scale);

  auto res_dec = models.residual->decode_streams(c.substreams[2], c.substreams[3],
                                                 {models.res_cfg.m, yh, yw},
                                                 {models.res_cfg.n, hh, hw});
  Tensor<float> highs = add_tensors(pred_raw, res_dec.x_hat);
  return reconstruct(ll_hat, highs, ph, pw, oh, ow);
}

// ---------------------------------------------------------------------------
// Evaluation harnesses.
// ---------------------------------------------------------------------------

ComponentLadder component_ablation(const Tensor<float>& image, const ModelSet& models,
                                   std::uint64_t seed, int n_infer_steps) {
  EncodeInternals enc = encode_pipeline(image, models, seed, n_infer_steps);
  const int oh = image.dim(1), ow = image.dim(2);
  Tensor<float> zero_highs(enc.pred_raw.shape);

  auto low_only = reconstruct(enc.ll_hat, zero_highs, enc.padded_h, enc.padded_w, oh, ow);
  auto with_cond =
      reconstruct(enc.ll_hat, enc.condition_raw, enc.padded_h, enc.padded_w, oh, ow);
  auto with_diff = reconstruct(enc.ll_hat, enc.pred_raw, enc.padded_h, enc.padded_w, oh, ow);
  auto full = reconstruct(enc.ll_hat, add_tensors(enc.pred_raw, enc.residual_hat),
                          enc.padded_h, enc.padded_w, oh, ow);

  ComponentLadder lad;
  const std::size_t low_bytes = static_cast<std::size_t>(Container::kHeaderBytes) + 4 * 4 +
                                enc.container.substreams[0].size() +
                                enc.container.substreams[1].size();
  lad.bpp_low = bits_per_pixel(low_bytes, ow, oh);
  lad.bpp_full = bits_per_pixel(enc.container.total_bytes(), ow, oh);
  lad.psnr_low_only = psnr(image, low_only);
  lad.psnr_condition = psnr(image, with_cond);
  lad.psnr_diffusion = psnr(image, with_diff);
  lad.psnr_full = psnr(image, full);
  lad.msssim_low_only = ms_ssim(image, low_only).db;
  lad.msssim_condition = ms_ssim(image, with_cond).db;
  lad.msssim_diffusion = ms_ssim(image, with_diff).db;
  lad.msssim_full = ms_ssim(image, full).db;
  return lad;
}

std::vector<StepsPoint> steps_ablation(const std::vector<Tensor<float>>& images,
                                       const ModelSet& models, std::uint64_t seed,
                                       const std::vector<int>& step_grid) {
  std::vector<StepsPoint> out;
  for (int steps : step_grid) {
    StepsPoint p;
    p.steps = steps;
    for (const auto& img : images) {
      auto r = compress_image(img, models, seed, steps);
      p.bpp += r.bpp;
      p.psnr += r.psnr;
      p.msssim_db += ms_ssim(img, r.reconstruction).db;
    }
    const double n = static_cast<double>(images.size());
    p.bpp /= n;
    p.psnr /= n;
    p.msssim_db /= n;
    out.push_back(p);
  }
  return out;
}

LowCodecEval evaluate_low_codec(const CodecModel<float>& low,
                                const std::vector<Tensor<float>>& images) {
  SingleThreadScope single;
  LowCodecEval e;
  for (const auto& img : images) {
    const int ph = round_up(img.dim(1), 32), pw = round_up(img.dim(2), 32);
    auto pyr = dwt2(pad_reflect_to(img, ph, pw));
    Tensor<float> ll_half = scaled(pyr.ll, kLowBandScale);
    auto coded = low.encode_eval(ll_half);
    Tensor<float> h_hat = symbols_to_tensor(coded.h_symbols, coded.h_shape);
    const std::size_t bytes =
        low.code_y_stream(coded, h_hat).size() + low.code_h_stream(coded).size();
    e.bpp += bits_per_pixel(bytes, ll_half.dim(2), ll_half.dim(1));
    e.psnr += psnr(ll_half, coded.x_hat);
  }
  e.bpp /= static_cast<double>(images.size());
  e.psnr /= static_cast<double>(images.size());
  return e;
}

std::vector<EvalRow> evaluate_directory(const std::string& dir, const ModelSet& models,
                                        std::uint64_t seed, int n_infer_steps) {
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && has_image_extension(e.path().string()))
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no images found in " + dir);

  std::vector<EvalRow> rows;
  for (const auto& f : files) {
    Tensor<float> img = load_image(f);
    auto r = compress_image(img, models, seed, n_infer_steps);
    EvalRow row;
    row.image_id = fs::path(f).filename().string();
    row.lambda = models.lambda;
    row.bpp = r.bpp;
    row.psnr = r.psnr;
    row.msssim_db = ms_ssim(img, r.reconstruction).db;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ugdiff
