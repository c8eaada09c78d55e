#include "stitchviz/diagnostics.hpp"

namespace stitchviz {

json GradientGridMap::summary() const {
  json j{{"model_id", model_id},
         {"layer", layer},
         {"height", magnitude.size(0)},
         {"width", magnitude.size(1)},
         {"zero_fraction", zero_fraction},
         {"noisiness", noisiness},
         {"zero_threshold", kZeroGradientThreshold}};
  j["period"] = period ? json(*period) : json(nullptr);
  return j;
}

std::optional<int> detect_mask_period(const torch::Tensor& zero_mask) {
  const auto m = zero_mask.to(torch::kBool);
  const auto count = m.sum().item<int64_t>();
  if (count == 0 || count == m.numel()) return std::nullopt;
  const int64_t h = m.size(0), w = m.size(1);
  using torch::indexing::Slice;
  for (int64_t p = 2; p <= std::min(h, w) / 2; ++p) {
    const bool rows = torch::equal(m.index({Slice(p, h)}), m.index({Slice(0, h - p)}));
    const bool cols = torch::equal(m.index({Slice(), Slice(p, w)}), m.index({Slice(), Slice(0, w - p)}));
    if (rows && cols) return static_cast<int>(p);
  }
  return std::nullopt;
}

double high_frequency_fraction(const torch::Tensor& map) {
  const auto x = map.to(torch::kFloat64);
  const auto centered = x - x.mean();
  const auto power = torch::fft::fft2(centered).abs().pow(2);
  const int64_t h = x.size(0), w = x.size(1);
  const auto fy = torch::fft::fftfreq(h, torch::kFloat64).view({h, 1});
  const auto fx = torch::fft::fftfreq(w, torch::kFloat64).view({1, w});
  const auto f = torch::sqrt(fy * fy + fx * fx);
  const double total = power.sum().item<double>();
  if (total <= 0.0) return 0.0;
  return (power * (f > 0.25)).sum().item<double>() / total;
}

GradientGridMap gradient_grid_map(const EncoderAdapter& enc, const std::string& layer, int64_t height, int64_t width,
                                  uint64_t input_seed) {
  enc.layer_shape(layer, height, width);
  auto gen = make_generator(input_seed);
  auto x = torch::rand({1, 3, height, width}, gen, torch::kFloat32).set_requires_grad(true);
  enc.forward_unit(x, layer).sum().backward();
  GradientGridMap g;
  g.model_id = enc.model_id();
  g.layer = layer;
  g.magnitude = x.grad().squeeze(0).to(torch::kFloat64).abs().sum(0);
  const auto zeros = g.magnitude < kZeroGradientThreshold;
  g.zero_fraction = zeros.to(torch::kFloat64).mean().item<double>();
  g.period = detect_mask_period(zeros);
  g.noisiness = high_frequency_fraction(g.magnitude);
  return g;
}

VariantComparison compare_variants(const ArchitectureSpec& spec, const std::string& layer, int64_t height,
                                   int64_t width, uint64_t input_seed) {
  auto strided = build_encoder("strided", spec);
  auto bilinear = build_bilinear_variant("bilinear", spec);
  return VariantComparison{gradient_grid_map(*strided, layer, height, width, input_seed),
                           gradient_grid_map(*bilinear, layer, height, width, input_seed)};
}

}  // namespace stitchviz
