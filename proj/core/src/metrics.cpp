#include "ugdiff/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ugdiff {
namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr std::array<double, 5> kMsWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double total = 0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - (kWindow - 1) / 2.0;
    w[i] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Separable 'valid' Gaussian filter of one channel plane.
void filter_plane(const std::vector<double>& in, int h, int w, std::vector<double>& tmp,
                  std::vector<double>& out) {
  static const auto win = gaussian_window();
  const int ow = w - kWindow + 1, oh = h - kWindow + 1;
  tmp.assign(static_cast<size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kWindow; ++k) acc += win[k] * in[static_cast<size_t>(y) * w + x + k];
      tmp[static_cast<size_t>(y) * ow + x] = acc;
    }
  out.assign(static_cast<size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kWindow; ++k) acc += win[k] * tmp[static_cast<size_t>(y + k) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = acc;
    }
}

// Mean luminance and contrast-structure terms of SSIM for one scale.
void ssim_scale(const std::vector<std::vector<double>>& a,
                const std::vector<std::vector<double>>& b, int h, int w, double* l_out,
                double* cs_out) {
  std::vector<double> tmp, mu_a, mu_b, aa, bb, ab, m_aa, m_bb, m_ab;
  double l_acc = 0, cs_acc = 0;
  std::int64_t count = 0;
  for (size_t c = 0; c < a.size(); ++c) {
    filter_plane(a[c], h, w, tmp, mu_a);
    filter_plane(b[c], h, w, tmp, mu_b);
    const size_t n = a[c].size();
    aa.resize(n);
    bb.resize(n);
    ab.resize(n);
    for (size_t i = 0; i < n; ++i) {
      aa[i] = a[c][i] * a[c][i];
      bb[i] = b[c][i] * b[c][i];
      ab[i] = a[c][i] * b[c][i];
    }
    filter_plane(aa, h, w, tmp, m_aa);
    filter_plane(bb, h, w, tmp, m_bb);
    filter_plane(ab, h, w, tmp, m_ab);
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = m_aa[i] - ma * ma;
      const double vb = m_bb[i] - mb * mb;
      const double vab = m_ab[i] - ma * mb;
      l_acc += (2 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
      cs_acc += (2 * vab + kC2) / (va + vb + kC2);
      ++count;
    }
  }
  *l_out = l_acc / count;
  *cs_out = cs_acc / count;
}

void downsample2(std::vector<std::vector<double>>& planes, int& h, int& w) {
  const int oh = h / 2, ow = w / 2;
  for (auto& p : planes) {
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        out[static_cast<size_t>(y) * ow + x] =
            0.25 * (p[static_cast<size_t>(2 * y) * w + 2 * x] +
                    p[static_cast<size_t>(2 * y) * w + 2 * x + 1] +
                    p[static_cast<size_t>(2 * y + 1) * w + 2 * x] +
                    p[static_cast<size_t>(2 * y + 1) * w + 2 * x + 1]);
    p = std::move(out);
  }
  h = oh;
  w = ow;
}

}  // namespace

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  check_shape(a.same_shape(b), "psnr operands");
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.numel());
  if (mse < 1e-10) return 100.0;
  return -10.0 * std::log10(mse);
}

MsSsimResult ms_ssim(const Tensor<float>& a, const Tensor<float>& b) {
  check_shape(a.same_shape(b) && a.ndim() == 3, "ms_ssim operands");
  int h = a.dim(1), w = a.dim(2);
  const int c_n = a.dim(0);

  // Number of scales the extents allow: the window must fit at every scale.
  int scales = 0;
  for (int s = 0, mh = h, mw = w; s < 5 && mh >= kWindow && mw >= kWindow; ++s, mh /= 2, mw /= 2)
    ++scales;
  if (scales == 0)
    throw std::invalid_argument("ms_ssim: image smaller than the filter window");

  double weight_sum = 0;
  for (int s = 0; s < scales; ++s) weight_sum += kMsWeights[static_cast<size_t>(s)];

  std::vector<std::vector<double>> pa(static_cast<size_t>(c_n)), pb(static_cast<size_t>(c_n));
  for (int c = 0; c < c_n; ++c) {
    pa[static_cast<size_t>(c)].resize(static_cast<size_t>(h) * w);
    pb[static_cast<size_t>(c)].resize(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        pa[static_cast<size_t>(c)][static_cast<size_t>(y) * w + x] = a.at(c, y, x);
        pb[static_cast<size_t>(c)][static_cast<size_t>(y) * w + x] = b.at(c, y, x);
      }
  }

  double log_value = 0;
  for (int s = 0; s < scales; ++s) {
    double l = 0, cs = 0;
    ssim_scale(pa, pb, h, w, &l, &cs);
    const double wgt = kMsWeights[static_cast<size_t>(s)] / weight_sum;
    double term = (s == scales - 1) ? l * cs : cs;
    term = std::max(term, 1e-12);
    log_value += wgt * std::log(term);
    if (s != scales - 1) {
      int h2 = h, w2 = w;
      downsample2(pa, h2, w2);
      downsample2(pb, h, w);
    }
  }
  MsSsimResult r;
  r.value = std::min(std::exp(log_value), 1.0);
  r.scales = scales;
  r.db = r.value >= 1.0 ? 40.0 : std::min(40.0, -10.0 * std::log10(1.0 - r.value));
  return r;
}

double bits_per_pixel(std::size_t container_bytes, int w, int h) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("bits_per_pixel: empty image");
  return static_cast<double>(container_bytes) * 8.0 / (static_cast<double>(w) * h);
}

namespace {

// Least-squares cubic of log10(bpp) against centered PSNR.
std::array<double, 4> fit_log_rate(const RDCurve& curve, double center, double scale) {
  const int n = static_cast<int>(curve.size());
  double ata[4][4] = {};
  double atb[4] = {};
  for (int i = 0; i < n; ++i) {
    const double u = (curve[static_cast<size_t>(i)].psnr - center) / scale;
    const double y = std::log10(curve[static_cast<size_t>(i)].bpp);
    double pu[4] = {1, u, u * u, u * u * u};
    for (int r = 0; r < 4; ++r) {
      atb[r] += pu[r] * y;
      for (int c = 0; c < 4; ++c) ata[r][c] += pu[r] * pu[c];
    }
  }
  // Gaussian elimination with partial pivoting.
  int idx[4] = {0, 1, 2, 3};
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::fabs(ata[idx[r]][col]) > std::fabs(ata[idx[piv]][col])) piv = r;
    std::swap(idx[col], idx[piv]);
    const double d = ata[idx[col]][col];
    if (std::fabs(d) < 1e-300) throw std::runtime_error("bd_rate: singular fit");
    for (int r = col + 1; r < 4; ++r) {
      const double f = ata[idx[r]][col] / d;
      for (int c = col; c < 4; ++c) ata[idx[r]][c] -= f * ata[idx[col]][c];
      atb[idx[r]] -= f * atb[idx[col]];
    }
  }
  std::array<double, 4> coef{};
  for (int col = 3; col >= 0; --col) {
    double acc = atb[idx[col]];
    for (int c = col + 1; c < 4; ++c) acc -= ata[idx[col]][c] * coef[static_cast<size_t>(c)];
    coef[static_cast<size_t>(col)] = acc / ata[idx[col]][col];
  }
  return coef;
}

double integrate_cubic(const std::array<double, 4>& c, double u0, double u1) {
  auto anti = [&](double u) {
    return c[0] * u + c[1] * u * u / 2 + c[2] * u * u * u / 3 + c[3] * u * u * u * u / 4;
  };
  return anti(u1) - anti(u0);
}

void validate_curve(const RDCurve& c, const char* which) {
  if (c.size() < 4)
    throw std::invalid_argument(std::string("bd_rate: ") + which + " needs >= 4 points");
  for (size_t i = 0; i < c.size(); ++i) {
    if (!(c[i].bpp > 0)) throw std::invalid_argument("bd_rate: bpp must be positive");
    if (i && !(c[i].bpp > c[i - 1].bpp))
      throw std::invalid_argument("bd_rate: curve must be strictly increasing in bpp");
  }
}

}  // namespace

double bd_rate(const RDCurve& anchor, const RDCurve& test) {
  validate_curve(anchor, "anchor");
  validate_curve(test, "test");
  auto psnr_range = [](const RDCurve& c) {
    double lo = c[0].psnr, hi = c[0].psnr;
    for (const auto& p : c) {
      lo = std::min(lo, p.psnr);
      hi = std::max(hi, p.psnr);
    }
    return std::pair<double, double>(lo, hi);
  };
  auto [alo, ahi] = psnr_range(anchor);
  auto [tlo, thi] = psnr_range(test);
  const double lo = std::max(alo, tlo), hi = std::min(ahi, thi);
  if (!(hi > lo)) throw std::invalid_argument("bd_rate: no PSNR overlap between curves");

  const double center = 0.5 * (lo + hi), scale = 0.5 * (hi - lo);
  const auto ca = fit_log_rate(anchor, center, scale);
  const auto ct = fit_log_rate(test, center, scale);
  const double u0 = (lo - center) / scale, u1 = (hi - center) / scale;
  const double avg_diff =
      (integrate_cubic(ct, u0, u1) - integrate_cubic(ca, u0, u1)) / (u1 - u0);
  return (std::pow(10.0, avg_diff) - 1.0) * 100.0;
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "image_id,lambda,bpp,psnr,msssim_db\n";
  for (const auto& r : rows) {
    f << r.image_id << ',' << r.lambda << ',' << r.bpp << ',' << r.psnr << ','
      << r.msssim_db << '\n';
  }
}

std::vector<EvalRow> read_eval_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<EvalRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("image_id", 0) == 0) continue;
    }
    std::stringstream ss(line);
    EvalRow r;
    std::string field;
    std::getline(ss, r.image_id, ',');
    std::getline(ss, field, ',');
    r.lambda = std::stod(field);
    std::getline(ss, field, ',');
    r.bpp = std::stod(field);
    std::getline(ss, field, ',');
    r.psnr = std::stod(field);
    if (std::getline(ss, field, ',')) r.msssim_db = std::stod(field);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_rd_svg(const std::string& path, const std::vector<PlotSeries>& series) {
  if (series.empty()) throw std::invalid_argument("write_rd_svg: nothing to plot");
  double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  if (!(xhi > xlo)) xhi = xlo + 1;
  if (!(yhi > ylo)) yhi = ylo + 1;
  const int w = 640, h = 480, margin = 56;
  auto sx = [&](double x) { return margin + (x - xlo) / (xhi - xlo) * (w - 2 * margin); };
  auto sy = [&](double y) { return h - margin - (y - ylo) / (yhi - ylo) * (h - 2 * margin); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                 "#ff7f0e", "#8c564b"};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - margin
    << "\" y2=\"" << h - margin << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
    << h - margin << "\" stroke=\"black\"/>\n";
  f << "<text x=\"" << w / 2 << "\" y=\"" << h - 12
    << "\" text-anchor=\"middle\" font-size=\"14\">bpp</text>\n";
  f << "<text x=\"16\" y=\"" << h / 2
    << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 " << h / 2
    << ")\">PSNR (dB)</text>\n";
  for (size_t i = 0; i < series.size(); ++i) {
    const char* col = colors[i % 6];
    f << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    auto pts = series[i].points;
    std::sort(pts.begin(), pts.end());
    for (auto [x, y] : pts) f << sx(x) << ',' << sy(y) << ' ';
    f << "\"/>\n";
    for (auto [x, y] : pts)
      f << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3\" fill=\"" << col
        << "\"/>\n";
    f << "<text x=\"" << w - margin + 4 << "\" y=\"" << margin + 16 * static_cast<int>(i)
      << "\" font-size=\"12\" fill=\"" << col << "\">" << series[i].label << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace ugdiff
