// Command line front end: training stages, compress/decompress, evaluation,
// ablation harnesses and R-D plotting.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "ugdiff/image_io.hpp"
#include "ugdiff/metrics.hpp"
#include "ugdiff/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ugdiff;

namespace {

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  if (out.empty()) throw std::runtime_error("empty list: " + s);
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (double v : parse_double_list(s)) out.push_back(static_cast<int>(v));
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

int run(int argc, char** argv) {
  CLI::App app{"ugdiff: uncertainty-guided wavelet-diffusion image codec"};
  app.require_subcommand(1);
  app.footer("Environment: UGDIFF_THREADS caps training worker threads; the coding "
             "path always runs single-threaded for determinism.");

  // ---- train ----
  auto* train = app.add_subcommand("train", "Run one stage of the training recipe");
  std::string stage_s, config_path, data_dir, out_dir;
  bool build_cache = false;
  train->add_option("--stage", stage_s, "low|condition|diffusion|residual")->required();
  train->add_option("--config", config_path, "key=value config file")->required();
  train->add_option("--data", data_dir, "directory of PNG/PPM training images")->required();
  train->add_option("--out", out_dir, "checkpoint/log output directory")->required();
  train->add_flag("--build-cache", build_cache,
                  "build missing uncertainty-cache entries before the residual stage");

  // ---- compress ----
  auto* comp = app.add_subcommand("compress", "Compress an image to a container file");
  std::string in_path, out_path, models_dir;
  double lambda = 0.1;
  int steps = 0;
  std::uint64_t seed = 1234;
  comp->add_option("-i,--input", in_path, "input image (PNG/PPM)")->required();
  comp->add_option("-o,--output", out_path, "output container file")->required();
  comp->add_option("--models", models_dir, "checkpoint directory")->required();
  comp->add_option("--lambda", lambda, "rate point on the lambda grid")->required();
  comp->add_option("--steps", steps, "diffusion sampling steps (default: model setting)");
  comp->add_option("--seed", seed, "sampling seed stored in the container");

  // ---- decompress ----
  auto* dec = app.add_subcommand("decompress", "Decode a container file to an image");
  std::string din_path, dout_path, dmodels_dir;
  dec->add_option("-i,--input", din_path, "input container file")->required();
  dec->add_option("-o,--output", dout_path, "output image (PNG/PPM)")->required();
  dec->add_option("--models", dmodels_dir, "checkpoint directory")->required();

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "Rate-distortion evaluation over a directory");
  std::string edata, emodels, eout, elambdas = "0.1";
  int esteps = 0;
  std::uint64_t eseed = 1234;
  eval->add_option("--data", edata, "directory of test images")->required();
  eval->add_option("--models", emodels, "checkpoint directory")->required();
  eval->add_option("--lambdas", elambdas, "comma-separated lambda list");
  eval->add_option("--out", eout, "output CSV path")->required();
  eval->add_option("--steps", esteps, "diffusion sampling steps");
  eval->add_option("--seed", eseed, "sampling seed");

  // ---- ablate ----
  auto* abl = app.add_subcommand("ablate", "Sampling-step / component ablation harnesses");
  std::string amode, adata, amodels, aout, asteps = "5,10,20,50";
  double alambda = 0.1;
  std::uint64_t aseed = 1234;
  abl->add_option("--mode", amode, "steps|components")->required();
  abl->add_option("--data", adata, "directory of test images")->required();
  abl->add_option("--models", amodels, "checkpoint directory")->required();
  abl->add_option("--lambda", alambda, "rate point on the lambda grid");
  abl->add_option("--steps", asteps, "step grid for --mode steps");
  abl->add_option("--out", aout, "output CSV path")->required();
  abl->add_option("--seed", aseed, "sampling seed");

  // ---- plot ----
  auto* plot = app.add_subcommand("plot", "Render an R-D plot (SVG) from an eval CSV");
  std::string pin, pout;
  plot->add_option("--in", pin, "eval CSV")->required();
  plot->add_option("--out", pout, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
        e.get_name() == "CallForVersion") {
      return app.exit(e);
    }
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 2;
  }

  if (train->parsed()) {
    TrainConfig cfg = TrainConfig::from_file(config_path);
    Stage stage = parse_stage(stage_s);
    if (stage == Stage::Residual && build_cache)
      precompute_uncertainty_cache(cfg, data_dir, out_dir);
    run_stage(stage, cfg, data_dir, out_dir);
    std::cout << "stage " << stage_s << " complete; checkpoints in " << out_dir << "\n";
  } else if (comp->parsed()) {
    ModelSet models = load_models(models_dir, lambda_index_of(lambda));
    if (steps <= 0) steps = models.default_infer_steps;
    std::cout << "seed: " << seed << "  steps: " << steps << "\n";
    Tensor<float> img = load_image(in_path);
    auto r = compress_image(img, models, seed, steps);
    write_file(out_path, r.bytes);
    std::printf("%s: %dx%d -> %zu bytes, %.4f bpp, encoder PSNR %.2f dB\n", in_path.c_str(),
                img.dim(2), img.dim(1), r.bytes.size(), r.bpp, r.psnr);
  } else if (dec->parsed()) {
    auto bytes = read_file(din_path);
    if (bytes.size() < 4 || bytes[0] != 'U' || bytes[1] != 'G' || bytes[2] != 'D' ||
        bytes[3] != 'F')
      throw std::runtime_error(din_path + ": bad magic, not a UGDF container");
    Container c = Container::parse(bytes);
    ModelSet models = load_models(dmodels_dir, c.model_id);
    Tensor<float> img = decompress_image(bytes, models);
    save_image(dout_path, img);
    std::printf("%s: decoded %dx%d image to %s\n", din_path.c_str(), img.dim(2), img.dim(1),
                dout_path.c_str());
  } else if (eval->parsed()) {
    std::vector<EvalRow> all;
    std::map<double, std::pair<double, std::pair<double, double>>> summary;
    for (double lam : parse_double_list(elambdas)) {
      ModelSet models = load_models(emodels, lambda_index_of(lam));
      const int st = esteps > 0 ? esteps : models.default_infer_steps;
      auto rows = evaluate_directory(edata, models, eseed, st);
      for (const auto& r : rows) {
        auto& acc = summary[lam];
        acc.first += 1;
        acc.second.first += r.bpp;
        acc.second.second += r.psnr;
      }
      all.insert(all.end(), rows.begin(), rows.end());
    }
    write_eval_csv(eout, all);
    std::string sum_path = eout + ".summary.csv";
    std::ofstream sf(sum_path, std::ios::trunc);
    sf << "lambda,images,bpp,psnr\n";
    for (auto& [lam, acc] : summary)
      sf << lam << ',' << acc.first << ',' << acc.second.first / acc.first << ','
         << acc.second.second / acc.first << '\n';
    std::cout << "wrote " << all.size() << " rows to " << eout << " and summary to "
              << sum_path << "\n";
  } else if (abl->parsed()) {
    ModelSet models = load_models(amodels, lambda_index_of(alambda));
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(adata))
      if (e.is_regular_file() && has_image_extension(e.path().string()))
        files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no images found in " + adata);
    std::vector<Tensor<float>> images;
    for (const auto& f : files) images.push_back(load_image(f));

    std::ofstream f(aout, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + aout + " for writing");
    if (amode == "steps") {
      auto points = steps_ablation(images, models, aseed, parse_int_list(asteps));
      f << "steps,bpp,psnr,msssim_db\n";
      for (const auto& p : points)
        f << p.steps << ',' << p.bpp << ',' << p.psnr << ',' << p.msssim_db << '\n';
      std::cout << "wrote " << points.size() << " rows to " << aout << "\n";
    } else if (amode == "components") {
      ComponentLadder sum;
      for (const auto& img : images) {
        auto lad = component_ablation(img, models, aseed, models.default_infer_steps);
        sum.bpp_low += lad.bpp_low;
        sum.bpp_full += lad.bpp_full;
        sum.psnr_low_only += lad.psnr_low_only;
        sum.psnr_condition += lad.psnr_condition;
        sum.psnr_diffusion += lad.psnr_diffusion;
        sum.psnr_full += lad.psnr_full;
        sum.msssim_low_only += lad.msssim_low_only;
        sum.msssim_condition += lad.msssim_condition;
        sum.msssim_diffusion += lad.msssim_diffusion;
        sum.msssim_full += lad.msssim_full;
      }
      const double n = static_cast<double>(images.size());
      f << "variant,bpp,psnr,msssim_db\n";
      f << "low_only," << sum.bpp_low / n << ',' << sum.psnr_low_only / n << ','
        << sum.msssim_low_only / n << '\n';
      f << "low_condition," << sum.bpp_low / n << ',' << sum.psnr_condition / n << ','
        << sum.msssim_condition / n << '\n';
      f << "low_diffusion," << sum.bpp_low / n << ',' << sum.psnr_diffusion / n << ','
        << sum.msssim_diffusion / n << '\n';
      f << "full," << sum.bpp_full / n << ',' << sum.psnr_full / n << ','
        << sum.msssim_full / n << '\n';
      std::cout << "wrote component ladder to " << aout << "\n";
    } else {
      throw std::runtime_error("unknown ablation mode '" + amode +
                               "' (expected steps or components)");
    }
  } else if (plot->parsed()) {
    auto rows = read_eval_csv(pin);
    if (rows.empty()) throw std::runtime_error("no rows in " + pin);
    std::map<double, std::vector<std::pair<double, double>>> by_lambda;
    for (const auto& r : rows) by_lambda[r.lambda].push_back({r.bpp, r.psnr});
    std::vector<PlotSeries> series;
    if (by_lambda.size() > 1) {
      PlotSeries s;
      s.label = "mean";
      for (auto& [lam, pts] : by_lambda) {
        double bx = 0, by = 0;
        for (auto [x, y] : pts) {
          bx += x;
          by += y;
        }
        s.points.push_back({bx / pts.size(), by / pts.size()});
      }
      series.push_back(std::move(s));
    } else {
      PlotSeries s;
      s.label = "lambda " + std::to_string(by_lambda.begin()->first);
      s.points = by_lambda.begin()->second;
      series.push_back(std::move(s));
    }
    write_rd_svg(pout, series);
    std::cout << "wrote " << pout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
