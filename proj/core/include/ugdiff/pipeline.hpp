#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ugdiff/codec.hpp"
#include "ugdiff/condition.hpp"
#include "ugdiff/config.hpp"
#include "ugdiff/container.hpp"
#include "ugdiff/denoiser.hpp"
#include "ugdiff/diffusion.hpp"
#include "ugdiff/metrics.hpp"
#include "ugdiff/tensor.hpp"
#include "ugdiff/wavelet.hpp"

namespace ugdiff {

// The low band of an orthonormal Haar split of [0,1] data lives in [0,2];
// the codecs see it scaled back to [0,1].
constexpr float kLowBandScale = 0.5f;

enum class Stage { Low, Condition, Diffusion, Residual };

Stage parse_stage(const std::string& name);
std::string stage_name(Stage s);

// ---- dataset ----

struct PatchStore {
  std::vector<Tensor<float>> patches;  // [3, patch, patch] in [0,1]
};

// Deterministic random crops from the images in `dir` (PPM/PNG, sorted by
// name, round-robin). Unreadable files are skipped with a warning; images
// smaller than the patch are reflect-padded first.
PatchStore ingest_dataset(const std::string& dir, int patch_size, int count,
                          std::uint64_t seed);

std::uint64_t tensor_hash(const Tensor<float>& t);

// ---- model bundle ----

struct ModelSet {
  CodecConfig low_cfg, res_cfg;
  std::unique_ptr<CodecModel<float>> low;
  std::unique_ptr<CodecModel<float>> residual;
  std::unique_ptr<ConditionNet<float>> condition;
  std::unique_ptr<DenoiserUNet<float>> denoiser;
  NoiseSchedule schedule;        // training schedule; inference restrides it
  int default_infer_steps = 10;
  Tensor<float> highs_scale;     // [9] per-band standardization factors
  int lambda_index = 0;
  double lambda = 0.1;
};

// Loads the bundle for one lambda index from a directory of checkpoints
// (low_<i>.ckpt, residual_<i>.ckpt, condition.ckpt, denoiser.ckpt).
ModelSet load_models(const std::string& models_dir, int lambda_index);

// ---- training ----

// Runs one stage of the four-stage recipe, reading prerequisites from and
// writing the stage checkpoint plus a CSV training log into `out_dir`.
// Missing prerequisites raise an error naming the stage to run first; the
// residual stage additionally requires the uncertainty cache (see below).
void run_stage(Stage stage, const TrainConfig& config, const std::string& data_dir,
               const std::string& out_dir);

// Builds the per-image uncertainty cache (delta map and one designated
// diffusion prediction per training patch) under out_dir/uncertainty.
// Requires the low, condition and diffusion checkpoints.
void precompute_uncertainty_cache(const TrainConfig& config, const std::string& data_dir,
                                  const std::string& out_dir);

bool uncertainty_cache_complete(const TrainConfig& config, const std::string& data_dir,
                                const std::string& out_dir);

// ---- coding ----

struct CompressResult {
  std::vector<std::uint8_t> bytes;
  Tensor<float> reconstruction;  // encoder-side decode, bitwise equal to the decoder's
  double psnr = 0;
  double bpp = 0;
};

CompressResult compress_image(const Tensor<float>& image, const ModelSet& models,
                              std::uint64_t seed, int n_infer_steps);

Tensor<float> decompress_image(std::span<const std::uint8_t> bytes, const ModelSet& models);

// ---- evaluation harnesses ----

struct ComponentLadder {
  double bpp_low = 0;       // header + low-frequency substreams only
  double bpp_full = 0;      // complete container
  double psnr_low_only = 0;
  double psnr_condition = 0;  // low + condition-generated highs
  double psnr_diffusion = 0;  // low + diffusion-predicted highs
  double psnr_full = 0;       // low + prediction + coded residual
  double msssim_low_only = 0, msssim_condition = 0, msssim_diffusion = 0, msssim_full = 0;
};

ComponentLadder component_ablation(const Tensor<float>& image, const ModelSet& models,
                                   std::uint64_t seed, int n_infer_steps);

struct StepsPoint {
  int steps = 0;
  double bpp = 0;
  double psnr = 0;
  double msssim_db = 0;
};

std::vector<StepsPoint> steps_ablation(const std::vector<Tensor<float>>& images,
                                       const ModelSet& models, std::uint64_t seed,
                                       const std::vector<int>& step_grid);

// Low-frequency codec in isolation (bits per LL pixel and LL-domain PSNR).
struct LowCodecEval {
  double bpp = 0;
  double psnr = 0;
};

LowCodecEval evaluate_low_codec(const CodecModel<float>& low,
                                const std::vector<Tensor<float>>& images);

// Full-pipeline evaluation over a directory of images.
std::vector<EvalRow> evaluate_directory(const std::string& dir, const ModelSet& models,
                                        std::uint64_t seed, int n_infer_steps);

}  // namespace ugdiff
