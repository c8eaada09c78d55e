#pragma once

// Input-gradient sparsity analysis for encoders.

#include <optional>
#include <string>

#include "stitchviz/core.hpp"
#include "stitchviz/models.hpp"

namespace stitchviz {

inline constexpr double kZeroGradientThreshold = 1e-12;

struct GradientGridMap {
  std::string model_id;
  std::string layer;
  torch::Tensor magnitude;  // (H, W) float64, |d sum(layer) / d input| summed over channels
  double zero_fraction = 0.0;
  std::optional<int> period;
  double noisiness = 0.0;

  json summary() const;
};

// Smallest p >= 2 for which the zero mask repeats with period p along both
// axes, if the mask is neither empty nor full.
std::optional<int> detect_mask_period(const torch::Tensor& zero_mask);

// Fraction of the spectral energy of the mean-removed map at normalised
// frequency magnitude above 0.25 cycles per pixel.
double high_frequency_fraction(const torch::Tensor& map);

// The input is a seeded uniform random unit-space image.
GradientGridMap gradient_grid_map(const EncoderAdapter& enc, const std::string& layer, int64_t height, int64_t width,
                                  uint64_t input_seed = 0);

struct VariantComparison {
  GradientGridMap strided;
  GradientGridMap bilinear;
};

// Both networks are built untrained from `spec` with the same init seed.
VariantComparison compare_variants(const ArchitectureSpec& spec, const std::string& layer, int64_t height,
                                   int64_t width, uint64_t input_seed = 0);

}  // namespace stitchviz
