#pragma once

#include <string>
#include <vector>

#include "ugdiff/tensor.hpp"

namespace ugdiff {

// Peak signal-to-noise ratio for [0,1]-scaled tensors, averaged over all
// channels; capped at 100 dB for (near-)identical inputs.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

struct MsSsimResult {
  double value = 0;   // in (0, 1]
  double db = 0;      // -10 log10(1 - value), capped at 40
  int scales = 0;     // scales actually used (5 when min extent >= 176)
};

// Multi-scale SSIM, standard 5-scale weights, 11x11 Gaussian window
// (sigma 1.5), data range 1. Falls back to fewer scales on small images.
MsSsimResult ms_ssim(const Tensor<float>& a, const Tensor<float>& b);

double bits_per_pixel(std::size_t container_bytes, int w, int h);

struct RDPoint {
  double bpp = 0;
  double psnr = 0;
  double msssim_db = 0;
};

// Rate-distortion curve: >= 4 points, strictly increasing bpp.
using RDCurve = std::vector<RDPoint>;

// Bjontegaard delta rate of `test` against `anchor` in percent: cubic
// least-squares fit of log10(bpp) against PSNR per curve, averaged log-rate
// difference over the common PSNR interval. Throws without PSNR overlap.
double bd_rate(const RDCurve& anchor, const RDCurve& test);

// ---- report emitters ----

struct EvalRow {
  std::string image_id;
  double lambda = 0;
  double bpp = 0;
  double psnr = 0;
  double msssim_db = 0;
};

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows);
std::vector<EvalRow> read_eval_csv(const std::string& path);

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (bpp, psnr)
};

void write_rd_svg(const std::string& path, const std::vector<PlotSeries>& series);

}  // namespace ugdiff
