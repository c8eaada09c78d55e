#include "stitchviz/metrics.hpp"

namespace stitchviz::metrics {

std::string to_string(Metric m) {
  switch (m) {
    case Metric::cosine:
      return "cosine";
    case Metric::l1:
      return "l1";
    case Metric::gram_cosine:
      return "gram_cosine";
  }
  return "unknown";
}

Metric metric_from_string(std::string_view s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "l1") return Metric::l1;
  if (s == "gram_cosine") return Metric::gram_cosine;
  throw NotFoundError("unknown metric: " + std::string(s));
}

bool higher_is_better(Metric m) { return m != Metric::l1; }

const std::vector<Metric>& all_metrics() {
  static const std::vector<Metric> all{Metric::cosine, Metric::gram_cosine, Metric::l1};
  return all;
}

namespace {

torch::Tensor as_f64(const torch::Tensor& t) { return t.detach().to(torch::kFloat64); }

void require_chw(const torch::Tensor& t, const char* what) {
  if (t.dim() != 3) throw ShapeError(std::string(what) + ": expected (C, H, W), got " + c10::str(t.sizes()));
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  require_chw(a, what);
  require_chw(b, what);
  if (a.sizes() != b.sizes()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

}  // namespace

double cosine_similarity_pixelwise(const torch::Tensor& a, const torch::Tensor& b, const MetricConfig& cfg) {
  require_same_shape(a, b, "cosine_similarity_pixelwise");
  const auto x = as_f64(a);
  const auto y = as_f64(b);
  const auto dot = (x * y).sum(0);
  const auto norms = x.pow(2).sum(0).sqrt() * y.pow(2).sum(0).sqrt();
  return (dot / norms.clamp_min(cfg.epsilon)).mean().item<double>();
}

double l1_mean(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "l1_mean");
  return (as_f64(a) - as_f64(b)).abs().mean().item<double>();
}

torch::Tensor gram_matrix(const torch::Tensor& a) {
  require_chw(a, "gram_matrix");
  const auto flat = as_f64(a).reshape({a.size(0), -1});
  return flat.matmul(flat.t());
}

double gram_cosine(const torch::Tensor& a, const torch::Tensor& b, const MetricConfig& cfg) {
  require_chw(a, "gram_cosine");
  require_chw(b, "gram_cosine");
  if (a.size(0) != b.size(0)) {
    throw ShapeError("gram_cosine: channel mismatch " + std::to_string(a.size(0)) + " vs " + std::to_string(b.size(0)));
  }
  const auto ga = gram_matrix(a);
  const auto gb = gram_matrix(b);
  const double inner = (ga * gb).sum().item<double>();
  const double norms = ga.norm().item<double>() * gb.norm().item<double>();
  return inner / std::max(norms, cfg.epsilon);
}

double cosine_similarity_pixelwise(const ActivationTensor& a, const ActivationTensor& b, const MetricConfig& cfg) {
  return cosine_similarity_pixelwise(a.data(), b.data(), cfg);
}

double l1_mean(const ActivationTensor& a, const ActivationTensor& b) { return l1_mean(a.data(), b.data()); }

torch::Tensor gram_matrix(const ActivationTensor& a) { return gram_matrix(a.data()); }

double gram_cosine(const ActivationTensor& a, const ActivationTensor& b, const MetricConfig& cfg) {
  return gram_cosine(a.data(), b.data(), cfg);
}

double compute(Metric m, const torch::Tensor& a, const torch::Tensor& b, const MetricConfig& cfg) {
  switch (m) {
    case Metric::cosine:
      return cosine_similarity_pixelwise(a, b, cfg);
    case Metric::l1:
      return l1_mean(a, b);
    case Metric::gram_cosine:
      return gram_cosine(a, b, cfg);
  }
  throw NotFoundError("unknown metric");
}

}  // namespace stitchviz::metrics
