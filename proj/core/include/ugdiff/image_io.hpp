#pragma once

#include <string>

#include "ugdiff/tensor.hpp"

namespace ugdiff {

// 8-bit RGB image files. PPM (P6) is supported without any dependency; PNG
// goes through libpng (grayscale/palette/alpha inputs are expanded to RGB).
// Pixels map to a [3,H,W] float tensor in [0,1].
Tensor<float> load_image(const std::string& path);
void save_image(const std::string& path, const Tensor<float>& image);

bool has_image_extension(const std::string& path);

}  // namespace ugdiff
