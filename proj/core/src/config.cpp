#include "ugdiff/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ugdiff {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

const std::set<std::string> kKnownKeys = {
    "lambda", "batch_size", "steps", "lr", "patch", "seed", "mc_samples",
    "dataset_count", "log_interval", "codec_n", "codec_m", "codec_two_slice",
    "codec_gam", "cond_width", "denoiser_width", "denoiser_mult1", "denoiser_mult2",
    "denoiser_attention", "t_train", "beta_1", "beta_t", "infer_steps",
    "steps_low", "steps_condition", "steps_diffusion", "steps_residual",
    "lr_low", "lr_condition", "lr_diffusion", "lr_residual"};

}  // namespace

ConfigFile ConfigFile::parse_string(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(line_no) +
                               " is not 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error("config: empty key on line " + std::to_string(line_no));
    cfg.values_[key] = val;
  }
  return cfg;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_string(ss.str());
}

std::string ConfigFile::str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double ConfigFile::num(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config: bad numeric value for " + key + ": " + it->second);
  }
}

int ConfigFile::integer(const std::string& key, int fallback) const {
  const double v = num(key, fallback);
  if (v != std::floor(v))
    throw std::runtime_error("config: " + key + " must be an integer");
  return static_cast<int>(v);
}

bool ConfigFile::flag(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw std::runtime_error("config: bad boolean for " + key + ": " + it->second);
}

int lambda_index_of(double lambda) {
  // Loose enough to absorb float32 round trips through checkpoint metadata.
  for (int i = 0; i < kLambdaCount; ++i)
    if (std::fabs(kLambdaGrid[i] - lambda) < 1e-6) return i;
  std::string grid;
  for (int i = 0; i < kLambdaCount; ++i)
    grid += (i ? ", " : "") + std::to_string(kLambdaGrid[i]);
  throw std::runtime_error("lambda " + std::to_string(lambda) +
                           " is not on the configured grid {" + grid + "}");
}

TrainConfig TrainConfig::from_config(const ConfigFile& cfg) {
  for (const auto& [k, v] : cfg.values())
    if (!kKnownKeys.count(k)) throw std::runtime_error("config: unknown key " + k);
  TrainConfig c;
  c.lambda = cfg.num("lambda", c.lambda);
  lambda_index_of(c.lambda);  // validate against the grid
  c.batch_size = cfg.integer("batch_size", c.batch_size);
  c.steps = cfg.integer("steps", c.steps);
  c.lr = cfg.num("lr", c.lr);
  c.patch = cfg.integer("patch", c.patch);
  c.seed = static_cast<std::uint64_t>(cfg.num("seed", static_cast<double>(c.seed)));
  c.mc_samples = cfg.integer("mc_samples", c.mc_samples);
  c.dataset_count = cfg.integer("dataset_count", c.dataset_count);
  c.log_interval = cfg.integer("log_interval", c.log_interval);
  c.codec_n = cfg.integer("codec_n", c.codec_n);
  c.codec_m = cfg.integer("codec_m", c.codec_m);
  c.codec_two_slice = cfg.flag("codec_two_slice", c.codec_two_slice);
  c.codec_gam = cfg.flag("codec_gam", c.codec_gam);
  if (c.codec_gam)
    throw std::runtime_error(
        "config: codec_gam attention blocks are a configuration stub and are not "
        "available in this build");
  c.cond_width = cfg.integer("cond_width", c.cond_width);
  c.denoiser_width = cfg.integer("denoiser_width", c.denoiser_width);
  c.denoiser_mult1 = cfg.integer("denoiser_mult1", c.denoiser_mult1);
  c.denoiser_mult2 = cfg.integer("denoiser_mult2", c.denoiser_mult2);
  c.denoiser_attention = cfg.flag("denoiser_attention", c.denoiser_attention);
  c.t_train = cfg.integer("t_train", c.t_train);
  c.beta_1 = cfg.num("beta_1", c.beta_1);
  c.beta_t = cfg.num("beta_t", c.beta_t);
  c.infer_steps = cfg.integer("infer_steps", c.infer_steps);
  c.steps_low = cfg.integer("steps_low", 0);
  c.steps_condition = cfg.integer("steps_condition", 0);
  c.steps_diffusion = cfg.integer("steps_diffusion", 0);
  c.steps_residual = cfg.integer("steps_residual", 0);
  c.lr_low = cfg.num("lr_low", 0);
  c.lr_condition = cfg.num("lr_condition", 0);
  c.lr_diffusion = cfg.num("lr_diffusion", 0);
  c.lr_residual = cfg.num("lr_residual", 0);
  if (c.patch % 32 != 0)
    throw std::runtime_error("config: patch size must be a multiple of 32");
  if (c.batch_size < 1 || c.steps < 1 || c.dataset_count < 1 || c.log_interval < 1)
    throw std::runtime_error("config: counts must be positive");
  return c;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  return from_config(ConfigFile::parse_file(path));
}

int TrainConfig::stage_steps(const std::string& stage) const {
  int v = 0;
  if (stage == "low") v = steps_low;
  else if (stage == "condition") v = steps_condition;
  else if (stage == "diffusion") v = steps_diffusion;
  else if (stage == "residual") v = steps_residual;
  return v > 0 ? v : steps;
}

double TrainConfig::stage_lr(const std::string& stage) const {
  double v = 0;
  if (stage == "low") v = lr_low;
  else if (stage == "condition") v = lr_condition;
  else if (stage == "diffusion") v = lr_diffusion;
  else if (stage == "residual") v = lr_residual;
  return v > 0 ? v : lr;
}

}  // namespace ugdiff
