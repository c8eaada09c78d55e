#include "stitchviz/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace stitchviz {

namespace {

using Clock = std::chrono::steady_clock;

torch::Tensor test_activation(const EvalProtocol& proto, const ImageTensor& img) {
  const auto r = proto.test->spec().resolution;
  auto unit = img.data().unsqueeze(0);
  if (img.height() != r || img.width() != r) unit = bilinear_resize(unit, r, r).clamp(0.0, 1.0);
  return proto.test->forward_unit(unit, proto.test_layer).squeeze(0);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

void EvalProtocol::validate() const {
  if (!interpret || !test) throw ValidationError("protocol needs an interpreted and a test network");
  if (interpret == test || interpret->model_id() == test->model_id()) {
    throw ValidationError("the test network must differ from the interpreted network");
  }
  if (layer_x.model_id != interpret->model_id()) throw ValidationError("layer_x does not belong to the interpreted network");
  interpret->layer(layer_x.layer_name);
  test->layer(test_layer);
  if (metric_set.empty()) throw ValidationError("protocol needs at least one metric");
}

json EvalProtocol::to_json() const {
  std::vector<std::string> names;
  for (auto m : metric_set) names.push_back(metrics::to_string(m));
  return json{{"interpret", interpret ? interpret->model_id() : ""},
              {"layer_x", layer_x.layer_name},
              {"test", test ? test->model_id() : ""},
              {"test_layer", test_layer},
              {"metrics", names},
              {"dataset", dataset_id}};
}

EvalProtocol make_protocol(const ModelRegistry& registry, const std::string& interpret_id, const std::string& layer_x,
                           const std::string& test_id, const std::string& test_layer) {
  EvalProtocol p;
  p.interpret = registry.encoder(interpret_id);
  p.layer_x = p.interpret->layer(layer_x).address;
  p.test = registry.encoder(test_id);
  p.test_layer = test_layer.empty() ? layer_x : test_layer;
  p.validate();
  return p;
}

std::map<std::string, double> evaluate_inversion(const EvalProtocol& proto, const ImageTensor& x,
                                                 const ImageTensor& reconstruction) {
  torch::NoGradGuard guard;
  const auto ax = test_activation(proto, x);
  const auto ar = test_activation(proto, reconstruction);
  if (ax.sizes() != ar.sizes()) throw ShapeError("test-layer activations differ in shape");
  std::map<std::string, double> out;
  for (auto m : proto.metric_set) out[metrics::to_string(m)] = metrics::compute(m, ar, ax);
  return out;
}

std::vector<Aggregate> MetricReport::aggregates() const {
  std::vector<Aggregate> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : records) {
    auto key = std::make_tuple(r.method, r.layer, r.metric);
    if (!groups.contains(key)) out.push_back(Aggregate{r.method, r.layer, r.metric});
    groups[key].push_back(r.value);
  }
  for (auto& a : out) {
    const auto& v = groups[{a.method, a.layer, a.metric}];
    a.count = v.size();
    double sum = 0;
    for (double x : v) sum += x;
    a.mean = sum / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(v.size()));
  }
  return out;
}

void MetricReport::merge(const MetricReport& other) {
  records.insert(records.end(), other.records.begin(), other.records.end());
  timings.insert(timings.end(), other.timings.begin(), other.timings.end());
}

json MetricReport::to_json() const {
  json recs = json::array();
  for (const auto& r : records) {
    recs.push_back({{"sample_id", r.sample_id}, {"method", r.method}, {"layer", r.layer}, {"metric", r.metric},
                    {"value", r.value}});
  }
  json aggs = json::array();
  for (const auto& a : aggregates()) {
    aggs.push_back({{"method", a.method}, {"layer", a.layer}, {"metric", a.metric}, {"count", a.count},
                    {"mean", a.mean}, {"std", a.std}});
  }
  json times = json::array();
  for (const auto& t : timings) {
    times.push_back({{"method", t.method}, {"layer", t.layer}, {"samples", t.samples}, {"passes", t.passes},
                     {"wall_time_s", t.wall_time_s}});
  }
  return json{{"schema", "stitchviz-report"}, {"version", kReportVersion}, {"run_id", run_id}, {"kind", kind},
              {"config", config}, {"records", recs}, {"aggregates", aggs}, {"timings", times}};
}

MetricReport MetricReport::from_json(const json& j) {
  if (j.value("schema", "") != "stitchviz-report") throw FormatError("not a report");
  if (j.at("version").get<int>() != kReportVersion) throw FormatError("unsupported report version");
  MetricReport r;
  r.run_id = j.value("run_id", "");
  r.kind = j.value("kind", "benchmark");
  r.config = j.value("config", json::object());
  for (const auto& e : j.at("records")) {
    r.records.push_back(MetricRecord{e.at("sample_id").get<size_t>(), e.at("method").get<std::string>(),
                                     e.at("layer").get<std::string>(), e.at("metric").get<std::string>(),
                                     e.at("value").get<double>()});
  }
  for (const auto& e : j.value("timings", json::array())) {
    r.timings.push_back(TimingRecord{e.at("method").get<std::string>(), e.at("layer").get<std::string>(),
                                     e.at("samples").get<size_t>(), e.at("passes").get<int>(),
                                     e.at("wall_time_s").get<double>()});
  }
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "sample_id,method,layer,metric,value\n";
  for (const auto& r : records) os << r.sample_id << ',' << r.method << ',' << r.layer << ',' << r.metric << ',' << r.value << '\n';
  return os.str();
}

std::string MetricReport::render_table() const {
  const auto aggs = aggregates();
  std::vector<std::pair<std::string, std::string>> rows;
  std::vector<std::string> metric_names;
  for (const auto& a : aggs) {
    if (std::find(rows.begin(), rows.end(), std::make_pair(a.layer, a.method)) == rows.end()) rows.emplace_back(a.layer, a.method);
    if (std::find(metric_names.begin(), metric_names.end(), a.metric) == metric_names.end()) metric_names.push_back(a.metric);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Layer", "Method"};
  for (const auto& m : metric_names) header.push_back(m);
  header.push_back("Time (s)");
  cells.push_back(header);
  for (const auto& [layer, method] : rows) {
    std::vector<std::string> row{layer, method};
    for (const auto& m : metric_names) {
      auto it = std::find_if(aggs.begin(), aggs.end(), [&](const Aggregate& a) {
        return a.layer == layer && a.method == method && a.metric == m;
      });
      row.push_back(it == aggs.end() ? "-" : fmt(it->mean) + " +- " + fmt(it->std));
    }
    auto t = std::find_if(timings.begin(), timings.end(),
                          [&](const TimingRecord& r) { return r.layer == layer && r.method == method; });
    row.push_back(t == timings.end() ? "-" : fmt(t->wall_time_s, 3));
    cells.push_back(row);
  }
  std::vector<size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (size_t r = 0; r < cells.size(); ++r) {
    for (size_t c = 0; c < cells[r].size(); ++c) {
      os << (c ? " | " : "") << std::left << std::setw(static_cast<int>(width[c])) << cells[r][c];
    }
    os << '\n';
    if (r == 0) {
      for (size_t c = 0; c < width.size(); ++c) os << (c ? "-+-" : "") << std::string(width[c], '-');
      os << '\n';
    }
  }
  return os.str();
}

MethodRunner gan_method(std::shared_ptr<const EncoderAdapter> enc, LayerAddress layer_x, StitchLayer stitch,
                        std::shared_ptr<const GeneratorAdapter> gen, LayerAddress layer_y, uint64_t seed,
                        int passes) {
  MethodRunner m;
  m.name = "gan";
  m.passes = passes;
  m.invert = [=](const ImageTensor& x, size_t sample) {
    return invert_via_gan(*enc, layer_x, stitch, *gen, layer_y, x, derive_seed(seed, sample)).image;
  };
  return m;
}

MethodRunner gd_method(std::shared_ptr<const EncoderAdapter> enc, LayerAddress layer_x, GdConfig cfg) {
  MethodRunner m;
  m.name = to_string(cfg.method);
  m.passes = 1;
  m.invert = [=](const ImageTensor& x, size_t sample) {
    auto target = enc->extract_activations(layer_x, x);
    GdConfig c = cfg;
    c.seed = derive_seed(cfg.seed, sample);
    c.height = x.height();
    c.width = x.width();
    return gd_invert(*enc, layer_x, target, c).image;
  };
  return m;
}

MetricReport run_benchmark(const EvalProtocol& proto, const ImageDataset& dataset,
                           const std::vector<MethodRunner>& methods) {
  proto.validate();
  if (dataset.size() == 0) throw ValidationError("empty dataset");
  if (methods.empty()) throw ValidationError("no methods to benchmark");
  std::vector<ImageTensor> images;
  images.reserve(dataset.size());
  const auto r = proto.interpret->spec().resolution;
  for (size_t i = 0; i < dataset.size(); ++i) {
    auto img = dataset.get(i);
    if (img.height() != r || img.width() != r) img = bilinear_resize(img, r, r);
    images.push_back(std::move(img));
  }

  MetricReport report;
  report.config = proto.to_json();
  const std::string layer = proto.layer_x.layer_name;
  for (const auto& m : methods) {
    if (m.passes < 1) throw ValidationError("method " + m.name + " needs at least one pass");
    double total = 0;
    for (int pass = 0; pass < m.passes; ++pass) {
      std::vector<MetricRecord> recs;
      const auto t0 = Clock::now();
      for (size_t i = 0; i < images.size(); ++i) {
        const auto recon = m.invert(images[i], i);
        for (const auto& [name, value] : evaluate_inversion(proto, images[i], recon)) {
          recs.push_back(MetricRecord{i, m.name, layer, name, value});
        }
      }
      total += std::chrono::duration<double>(Clock::now() - t0).count();
      if (pass == 0) report.records.insert(report.records.end(), recs.begin(), recs.end());
    }
    report.timings.push_back(TimingRecord{m.name, layer, images.size(), m.passes, total / m.passes});
  }
  return report;
}

LayerAddress layer_correspondence(const LayerAddress& layer_x, std::span<const LayerInfo> generator_layers, int delta) {
  const int want = layer_x.sampling_distance - delta;
  for (const auto& l : generator_layers) {
    if (l.address.sampling_distance == want) return l.address;
  }
  throw NotFoundError("generator has no layer at sampling distance " + std::to_string(want) + " (from " +
                      layer_x.str() + ", delta " + std::to_string(delta) + ")");
}

LayerAddress layer_correspondence(const LayerAddress& layer_x, const GeneratorAdapter& gen, int delta) {
  return layer_correspondence(layer_x, gen.layers(), delta);
}

json SweepResult::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"delta", r.delta}, {"target_layer", r.target_layer},
                         {"target_resolution", r.target_resolution}, {"metric", r.metric},
                         {"absolute", r.absolute}, {"std", r.std}, {"relative", r.relative}});
  }
  return json{{"schema", "stitchviz-sweep"}, {"version", kReportVersion}, {"layer_x", layer_x}, {"rows", rows_json}};
}

json SweepResult::plot_data() const {
  json out = json::object();
  for (const auto& r : rows) out[r.metric].push_back(json::array({r.delta, r.relative}));
  return out;
}

SweepResult make_sweep_result(const std::string& layer_x,
                              const std::map<int, std::pair<LayerInfo, std::vector<Aggregate>>>& per_delta) {
  auto zero = per_delta.find(0);
  if (zero == per_delta.end()) throw ValidationError("sweep needs delta 0 for normalisation");
  SweepResult out;
  out.layer_x = layer_x;
  for (const auto& [delta, entry] : per_delta) {
    for (const auto& a : entry.second) {
      auto base = std::find_if(zero->second.second.begin(), zero->second.second.end(),
                               [&](const Aggregate& b) { return b.metric == a.metric; });
      if (base == zero->second.second.end()) throw ValidationError("metric " + a.metric + " missing at delta 0");
      SweepRow row;
      row.delta = delta;
      row.target_layer = entry.first.address.layer_name;
      row.target_resolution = entry.first.height;
      row.metric = a.metric;
      row.absolute = a.mean;
      row.std = a.std;
      row.relative = delta == 0 ? 1.0 : a.mean / base->mean;
      out.rows.push_back(row);
    }
  }
  return out;
}

SweepResult end_layer_sweep(const EvalProtocol& proto, const GeneratorAdapter& gen,
                            const std::map<int, StitchLayer>& stitches, const ImageDataset& dataset, uint64_t seed) {
  proto.validate();
  if (dataset.size() == 0) throw ValidationError("empty dataset");
  if (!stitches.contains(0)) throw NotFoundError("sweep needs a stitch for delta 0");
  std::map<int, std::pair<LayerInfo, std::vector<Aggregate>>> per_delta;
  for (const auto& [delta, stitch] : stitches) {
    const auto target = layer_correspondence(proto.layer_x, gen, delta);
    if (stitch.target.layer_name != target.layer_name) {
      throw NotFoundError("stitch for delta " + std::to_string(delta) + " targets " + stitch.target.layer_name +
                          ", expected " + target.layer_name);
    }
    MetricReport rep;
    for (size_t i = 0; i < dataset.size(); ++i) {
      const auto x = dataset.get(i);
      const auto recon =
          invert_via_gan(*proto.interpret, proto.layer_x, stitch, gen, target, x, derive_seed(seed, i)).image;
      for (const auto& [name, value] : evaluate_inversion(proto, x, recon)) {
        rep.records.push_back(MetricRecord{i, "gan", proto.layer_x.layer_name, name, value});
      }
    }
    per_delta[delta] = {gen.layer(target.layer_name), rep.aggregates()};
  }
  return make_sweep_result(proto.layer_x.layer_name, per_delta);
}

SelectMode select_mode_from_string(std::string_view s) {
  if (s == "best") return SelectMode::best;
  if (s == "worst") return SelectMode::worst;
  throw ValidationError("selection mode must be best or worst");
}

std::vector<size_t> select_extreme_samples(const MetricReport& report, const std::string& method,
                                           const std::string& layer, const std::string& metric, size_t k,
                                           SelectMode mode) {
  const auto m = metrics::metric_from_string(metric);
  std::vector<std::pair<double, size_t>> vals;
  bool method_seen = false;
  for (const auto& r : report.records) {
    if (r.method == method) method_seen = true;
    if (r.method == method && r.layer == layer && r.metric == metric) vals.emplace_back(r.value, r.sample_id);
  }
  if (!method_seen) throw NotFoundError("method not in report: " + method);
  if (vals.empty()) throw NotFoundError("no records for " + method + "/" + layer + "/" + metric);
  if (k > vals.size()) throw ValidationError("k exceeds the number of samples");
  // Best means high for cosines and low for L1.
  const bool descending = (mode == SelectMode::best) == metrics::higher_is_better(m);
  std::sort(vals.begin(), vals.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return descending ? a.first > b.first : a.first < b.first;
    return a.second < b.second;
  });
  std::vector<size_t> ids;
  for (size_t i = 0; i < k; ++i) ids.push_back(vals[i].second);
  return ids;
}

std::vector<ImageTensor> seed_variations(const EncoderAdapter& enc, const LayerAddress& layer_x,
                                         const StitchLayer& stitch, const GeneratorAdapter& gen,
                                         const LayerAddress& layer_y, const ImageTensor& img,
                                         std::span<const uint64_t> seeds) {
  if (seeds.empty()) throw ValidationError("at least one seed is required");
  const auto a = enc.extract_activations(layer_x, img);
  std::vector<ImageTensor> out;
  out.reserve(seeds.size());
  for (auto s : seeds) out.push_back(invert_from_activations(stitch, a, gen, layer_y, s));
  return out;
}

json without_timing(const json& j) {
  static const std::set<std::string> drop{"run_id", "started_at", "finished_at", "wall_time_s", "wall_time_ms",
                                          "timings", "output_dir"};
  if (j.is_object()) {
    json out = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!drop.contains(it.key())) out[it.key()] = without_timing(it.value());
    }
    return out;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& e : j) out.push_back(without_timing(e));
    return out;
  }
  return j;
}

}  // namespace stitchviz
