#pragma once

// Gradient-descent inversion: optimise an image so that its activations at
// a layer match a target, either directly in pre-sigmoid pixel space (plain)
// or in a colour-decorrelated Fourier space with one-pixel jitter (fft_dec).

#include <array>
#include <functional>
#include <random>

#include "stitchviz/core.hpp"
#include "stitchviz/models.hpp"

namespace stitchviz {

enum class GdMethod { plain, fft_dec };
std::string to_string(GdMethod m);
GdMethod gd_method_from_string(std::string_view s);

struct GdConfig {
  GdMethod method = GdMethod::plain;
  int steps = 512;
  double learning_rate = 0.05;
  int64_t height = 64;
  int64_t width = 64;
  uint64_t seed = 0;
  double init_std = 0.01;
  bool frequency_scaling = true;  // fft_dec
  bool jitter = true;             // fft_dec
  // Row-major 3x3; empty means the default ImageNet correlation.
  std::vector<double> color_matrix;
  // Progress callback cadence in steps; the final step always reports.
  int progress_every = 16;

  void validate() const;
};

void to_json(json& j, const GdConfig& c);
void from_json(const json& j, GdConfig& c);

// Cholesky factor of the ImageNet channel covariance, scaled to spectral
// norm 1. Returned as (3, 3) float32.
torch::Tensor default_color_correlation();

// (H, W/2+1) multipliers 1/max(f, 1/max(H, W)), f = |(fy, fx)| in cycles
// per pixel.
torch::Tensor frequency_scale(int64_t height, int64_t width);

// h: spectrum (3, H, W/2+1) complex, or (3, H, W/2+1, 2) real pairs.
// Applies `scale` (undefined = no scaling), an orthonormal inverse real FFT
// and then `color` per pixel. Returns (3, H, W), pre-sigmoid.
torch::Tensor fft_param_to_image(const torch::Tensor& spectrum, int64_t height, int64_t width,
                                 const torch::Tensor& scale, const torch::Tensor& color);

// Reflection-pad by 2, shift by (dx, dy) in {-1, 0, 1}, crop back:
// out[y][x] = in[y - dy][x - dx] away from the border.
torch::Tensor jitter_one_pixel(const torch::Tensor& x, int dx, int dy);
ImageTensor jitter_one_pixel(const ImageTensor& img, int dx, int dy);
ImageTensor jitter_one_pixel(const ImageTensor& img, std::mt19937_64& rng);

struct GdProgress {
  int step = 0;  // 1-based index of the completed step
  int total = 0;
  double loss = 0.0;
  // Current sigma(h(z)) as (3, H, W) unit tensor, set on reporting steps.
  torch::Tensor image;
};

// Return false to cancel.
using GdCallback = std::function<bool(const GdProgress&)>;

// Runs exactly cfg.steps iterations of: loss = mean |F(g(sigma(h(z)))) - target|,
// backward, Adam step on z. loss_trace[i] is the loss evaluated at z_i.
InversionResult gd_invert(const EncoderAdapter& enc, const LayerAddress& layer_x, const ActivationTensor& target,
                          const GdConfig& cfg, const GdCallback& on_progress = {});

}  // namespace stitchviz
