#pragma once

// Test-network evaluation, timed benchmarks, end-layer sweeps and sample
// selection.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stitchviz/dataset.hpp"
#include "stitchviz/gdinv.hpp"
#include "stitchviz/metrics.hpp"
#include "stitchviz/models.hpp"
#include "stitchviz/stitch.hpp"

namespace stitchviz {

// Reconstructions are scored in a second network so that adversarial
// matches of the interpreted network are not rewarded.
struct EvalProtocol {
  std::shared_ptr<const EncoderAdapter> interpret;
  LayerAddress layer_x;
  std::shared_ptr<const EncoderAdapter> test;
  std::string test_layer;
  std::vector<metrics::Metric> metric_set = metrics::all_metrics();
  std::string dataset_id;

  // Throws ValidationError when the test network is the interpreted one.
  void validate() const;
  json to_json() const;
};

// The test layer defaults to the interpreted layer's name.
EvalProtocol make_protocol(const ModelRegistry& registry, const std::string& interpret_id,
                           const std::string& layer_x, const std::string& test_id,
                           const std::string& test_layer = "");

std::map<std::string, double> evaluate_inversion(const EvalProtocol& proto, const ImageTensor& x,
                                                 const ImageTensor& reconstruction);

struct MetricRecord {
  size_t sample_id = 0;
  std::string method;
  std::string layer;
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRecord&) const = default;
};

struct Aggregate {
  std::string method;
  std::string layer;
  std::string metric;
  size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // population
};

struct TimingRecord {
  std::string method;
  std::string layer;
  size_t samples = 0;
  int passes = 0;
  double wall_time_s = 0.0;  // mean over passes
};

inline constexpr int kReportVersion = 1;

struct MetricReport {
  std::string run_id;
  std::string kind = "benchmark";
  json config = json::object();
  std::vector<MetricRecord> records;
  std::vector<TimingRecord> timings;

  // Recomputed from records, grouped by (method, layer, metric) in first
  // appearance order.
  std::vector<Aggregate> aggregates() const;
  void merge(const MetricReport& other);

  json to_json() const;
  static MetricReport from_json(const json& j);
  std::string to_csv() const;
  // Layer x method rows with "mean +- std" per metric and the time column.
  std::string render_table() const;
};

// One inversion method as used by the benchmark: a reconstruction function
// and how many timed passes to average.
struct MethodRunner {
  std::string name;
  int passes = 1;
  std::function<ImageTensor(const ImageTensor& x, size_t sample_id)> invert;
};

// Per-sample generator seed is derive_seed(seed, sample_id).
MethodRunner gan_method(std::shared_ptr<const EncoderAdapter> enc, LayerAddress layer_x, StitchLayer stitch,
                        std::shared_ptr<const GeneratorAdapter> gen, LayerAddress layer_y, uint64_t seed,
                        int passes = 20);
// Per-sample latent seed is derive_seed(cfg.seed, sample_id).
MethodRunner gd_method(std::shared_ptr<const EncoderAdapter> enc, LayerAddress layer_x, GdConfig cfg);

// GAN-type methods are timed over `passes` full passes; timing covers
// inversion and metric computation.
MetricReport run_benchmark(const EvalProtocol& proto, const ImageDataset& dataset,
                           const std::vector<MethodRunner>& methods);

// Generator layer whose distance from the output equals the encoder layer's
// distance from the input, minus delta (delta > 0 moves towards the output).
LayerAddress layer_correspondence(const LayerAddress& layer_x, std::span<const LayerInfo> generator_layers,
                                  int delta = 0);
LayerAddress layer_correspondence(const LayerAddress& layer_x, const GeneratorAdapter& gen, int delta = 0);

struct SweepRow {
  int delta = 0;
  std::string target_layer;
  int64_t target_resolution = 0;
  std::string metric;
  double absolute = 0.0;
  double std = 0.0;
  double relative = 0.0;  // absolute / absolute at delta 0
};

struct SweepResult {
  std::string layer_x;
  std::vector<SweepRow> rows;

  json to_json() const;
  // {metric: [[delta, relative], ...]}
  json plot_data() const;
};

// Builds rows from per-delta aggregates; requires delta 0.
SweepResult make_sweep_result(const std::string& layer_x,
                              const std::map<int, std::pair<LayerInfo, std::vector<Aggregate>>>& per_delta);

SweepResult end_layer_sweep(const EvalProtocol& proto, const GeneratorAdapter& gen,
                            const std::map<int, StitchLayer>& stitches, const ImageDataset& dataset, uint64_t seed);

enum class SelectMode { best, worst };
SelectMode select_mode_from_string(std::string_view s);

// Ties are broken by ascending sample id.
std::vector<size_t> select_extreme_samples(const MetricReport& report, const std::string& method,
                                           const std::string& layer, const std::string& metric, size_t k,
                                           SelectMode mode);

// Activations are extracted once and reused for every seed.
std::vector<ImageTensor> seed_variations(const EncoderAdapter& enc, const LayerAddress& layer_x,
                                         const StitchLayer& stitch, const GeneratorAdapter& gen,
                                         const LayerAddress& layer_y, const ImageTensor& img,
                                         std::span<const uint64_t> seeds);

// Drops wall-clock and run identity fields recursively, for comparing
// reruns.
json without_timing(const json& j);

}  // namespace stitchviz
