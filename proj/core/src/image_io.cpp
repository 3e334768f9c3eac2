#include "ugdiff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

namespace ugdiff {
namespace {

std::string lower_ext(const std::string& path) {
  auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return "";
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext;
}

Tensor<float> from_rgb8(const std::vector<unsigned char>& rgb, int w, int h) {
  Tensor<float> t({3, h, w});
  const float inv = 1.0f / 255.0f;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t p = (static_cast<size_t>(y) * w + x) * 3;
      t.at(0, y, x) = rgb[p] * inv;
      t.at(1, y, x) = rgb[p + 1] * inv;
      t.at(2, y, x) = rgb[p + 2] * inv;
    }
  return t;
}

std::vector<unsigned char> to_rgb8(const Tensor<float>& t) {
  check_shape(t.ndim() == 3 && t.dim(0) == 3, "save_image expects [3,H,W]");
  const int h = t.dim(1), w = t.dim(2);
  std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = t.at(c, y, x);
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        rgb[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  return rgb;
}

// ---- PPM (P6, maxval 255) ----

int ppm_token(std::istream& in) {
  // Skips whitespace and '#' comments, returns next integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF) throw std::runtime_error("ppm: truncated header");
  int v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw std::runtime_error("ppm: malformed header");
  return v;
}

Tensor<float> load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw std::runtime_error("ppm: not a P6 file: " + path);
  const int w = ppm_token(f);
  const int h = ppm_token(f);
  const int maxv = ppm_token(f);
  if (w <= 0 || h <= 0 || maxv != 255)
    throw std::runtime_error("ppm: unsupported geometry or depth in " + path);
  std::vector<unsigned char> rgb(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (static_cast<size_t>(f.gcount()) != rgb.size())
    throw std::runtime_error("ppm: truncated pixel data in " + path);
  return from_rgb8(rgb, w, h);
}

void save_ppm(const std::string& path, const Tensor<float>& t) {
  auto rgb = to_rgb8(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "P6\n" << t.dim(2) << " " << t.dim(1) << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw std::runtime_error("ppm: write failed for " + path);
}

// ---- PNG via libpng ----

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

Tensor<float> load_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open image " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png: allocation failure");
  }
  std::vector<unsigned char> rgb;
  int w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: failed to read " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  rgb.resize(static_cast<size_t>(w) * h * 3);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = rgb.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_rgb8(rgb, w, h);
}

void save_png(const std::string& path, const Tensor<float>& t) {
  auto rgb = to_rgb8(t);
  const int w = t.dim(2), h = t.dim(1);
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png: allocation failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png: failed to write " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = rgb.data() + static_cast<size_t>(y) * w * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

bool has_image_extension(const std::string& path) {
  const std::string ext = lower_ext(path);
  return ext == "ppm" || ext == "png";
}

Tensor<float> load_image(const std::string& path) {
  const std::string ext = lower_ext(path);
  if (ext == "ppm") return load_ppm(path);
  if (ext == "png") return load_png(path);
  throw std::runtime_error("unsupported image format (want .ppm or .png): " + path);
}

void save_image(const std::string& path, const Tensor<float>& image) {
  const std::string ext = lower_ext(path);
  if (ext == "ppm") return save_ppm(path, image);
  if (ext == "png") return save_png(path, image);
  throw std::runtime_error("unsupported image format (want .ppm or .png): " + path);
}

}  // namespace ugdiff
