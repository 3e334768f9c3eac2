#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ugdiff {

// Flat "key = value" configuration ('#' and ';' start comments).
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string str(const std::string& key, const std::string& fallback) const;
  double num(const std::string& key, double fallback) const;
  int integer(const std::string& key, int fallback) const;
  bool flag(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// The lambda grid shared by the low-frequency and residual codecs; a
// container's model_id is an index into it.
inline constexpr double kLambdaGrid[] = {0.01, 0.05, 0.1, 0.2, 0.3};
inline constexpr int kLambdaCount = 5;

int lambda_index_of(double lambda);  // throws if not on the grid

struct TrainConfig {
  double lambda = 0.1;
  int batch_size = 4;
  int steps = 2000;
  double lr = 1e-4;
  int patch = 64;
  std::uint64_t seed = 1234;
  int mc_samples = 8;        // Monte-Carlo runs per image for the uncertainty map
  int dataset_count = 400;   // patches drawn from the training directory
  int log_interval = 50;

  int codec_n = 32;
  int codec_m = 48;
  bool codec_two_slice = false;
  bool codec_gam = false;    // attention blocks in the codec: config stub, must stay off

  int cond_width = 32;       // condition U-Net widths: w, 2w, 4w, 8w

  int denoiser_width = 24;
  int denoiser_mult1 = 2;
  int denoiser_mult2 = 4;
  bool denoiser_attention = true;

  int t_train = 50;
  double beta_1 = 1e-4;
  double beta_t = 0.28;
  int infer_steps = 10;

  // Per-stage overrides (0 = use `steps` / `lr`).
  int steps_low = 0, steps_condition = 0, steps_diffusion = 0, steps_residual = 0;
  double lr_low = 0, lr_condition = 0, lr_diffusion = 0, lr_residual = 0;

  static TrainConfig from_file(const std::string& path);
  static TrainConfig from_config(const ConfigFile& cfg);

  int stage_steps(const std::string& stage) const;
  double stage_lr(const std::string& stage) const;
};

}  // namespace ugdiff
