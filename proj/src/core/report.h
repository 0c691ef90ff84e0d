#pragma once

#include <string>
#include <vector>

#include "tensor.h"

namespace m2repa {

// Locale-independent numeric formatting for CSV artifacts ('.' separator,
// %.9g — enough digits to round-trip f32).
std::string csv_num(double v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// Binary PPM (P6). rgb is [3, H, W] with values clamped from [0,1].
void write_ppm(const std::string& path, const Tensor& rgb);

// Top-3 principal components of token features [F, N, D], rendered as an
// image grid: frames side by side, each token painted as a scale x scale
// block. Channels are min-max normalized over the whole tensor.
Tensor pca_feature_image(const Tensor& tokens, int grid_h, int grid_w, int scale);

}  // namespace m2repa
