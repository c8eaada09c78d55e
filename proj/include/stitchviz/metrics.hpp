#pragma once

// Activation-space comparison metrics. All reductions run in float64.

#include <string>
#include <string_view>
#include <vector>

#include "stitchviz/core.hpp"

namespace stitchviz::metrics {

struct MetricConfig {
  double epsilon = 1e-8;
};

enum class Metric { cosine, l1, gram_cosine };

std::string to_string(Metric m);
Metric metric_from_string(std::string_view s);
// Cosine metrics: higher is better. L1: lower is better.
bool higher_is_better(Metric m);
const std::vector<Metric>& all_metrics();

// Mean over pixels of the channel-vector cosine similarity, with the norm
// product clamped below by epsilon. Inputs are (C, H, W) of equal shape.
double cosine_similarity_pixelwise(const torch::Tensor& a, const torch::Tensor& b, const MetricConfig& cfg = {});
double l1_mean(const torch::Tensor& a, const torch::Tensor& b);
// G[i][j] = <vec(a[i]), vec(a[j])>, returned as (C, C) float64.
torch::Tensor gram_matrix(const torch::Tensor& a);
// Frobenius cosine between the gram matrices of a and b. Spatial sizes may
// differ; channel counts must match.
double gram_cosine(const torch::Tensor& a, const torch::Tensor& b, const MetricConfig& cfg = {});

double cosine_similarity_pixelwise(const ActivationTensor& a, const ActivationTensor& b, const MetricConfig& cfg = {});
double l1_mean(const ActivationTensor& a, const ActivationTensor& b);
torch::Tensor gram_matrix(const ActivationTensor& a);
double gram_cosine(const ActivationTensor& a, const ActivationTensor& b, const MetricConfig& cfg = {});

double compute(Metric m, const torch::Tensor& a, const torch::Tensor& b, const MetricConfig& cfg = {});

}  // namespace stitchviz::metrics
