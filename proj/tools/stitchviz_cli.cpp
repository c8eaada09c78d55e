// stitchviz command-line entry point.
//
// Output layout under --out: stitches/, reports/, images/, manifests/.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "config_format.hpp"
#include "stitchviz/dataset.hpp"
#include "stitchviz/diagnostics.hpp"
#include "stitchviz/evalharness.hpp"
#include "stitchviz/gdinv.hpp"
#include "stitchviz/image_io.hpp"
#include "stitchviz/models.hpp"
#include "stitchviz/service.hpp"
#include "stitchviz/stitch.hpp"

namespace fs = std::filesystem;
using namespace stitchviz;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

// Runs `f`, turning lookup and validation failures into usage errors.
template <typename F>
auto resolve(F&& f) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const NotFoundError& e) {
    throw UsageError(e.what());
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  } catch (const ShapeError& e) {
    throw UsageError(e.what());
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

json effective_config(const CLI::App* app) {
  json j = json::object();
  for (const auto* opt : app->get_options()) {
    const auto name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      if (opt->get_expected_max() > 1) {
        j[name] = r;
      } else {
        j[name] = r.empty() ? "" : r.back();
      }
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

struct Context {
  std::string registry;
  std::string out = "out";
  std::string config;

  fs::path registry_path() const {
    if (!registry.empty()) return registry;
    if (const char* env = std::getenv("STITCHVIZ_REGISTRY"); env != nullptr && *env != '\0') return env;
    return fs::path(out) / "registry.json";
  }
  std::shared_ptr<ModelRegistry> load_registry() const {
    const auto p = registry_path();
    if (!fs::exists(p)) throw UsageError("registry not found: " + p.string() + " (run `stitchviz fixtures build`)");
    return resolve([&] { return ModelRegistry::load(p); });
  }
  fs::path dir(const std::string& sub) const { return fs::path(out) / sub; }
};

void add_common(CLI::App* sub, Context& ctx) {
  sub->add_option("--registry", ctx.registry, "Registry manifest (default: $STITCHVIZ_REGISTRY or <out>/registry.json)");
  sub->add_option("--out", ctx.out, "Output directory")->capture_default_str();
  sub->add_option("--config", ctx.config, "JSON or TOML config file; flags override it");
}

void write_manifest(const Context& ctx, RunManifest m) {
  m.finish();
  io::write_file(ctx.dir("manifests") / (m.run_id + ".json"), json(m).dump(2) + "\n");
}

std::string extra(const ModelRegistry& reg, const char* key, const std::string& fallback = "") {
  return reg.extras.contains(key) ? reg.extras.at(key).get<std::string>() : fallback;
}

std::string pick(const std::string& value, const ModelRegistry& reg, const char* key, const char* what) {
  if (!value.empty()) return value;
  const auto v = extra(reg, key);
  if (v.empty()) throw UsageError(std::string("missing --") + what);
  return v;
}

std::vector<int> parse_distances(const std::string& s) {
  std::vector<int> out;
  try {
    if (const auto dots = s.find(".."); dots != std::string::npos) {
      const int a = std::stoi(s.substr(0, dots));
      const int b = std::stoi(s.substr(dots + 2));
      if (a > b) throw UsageError("empty distance range: " + s);
      for (int d = a; d <= b; ++d) out.push_back(d);
    } else {
      std::stringstream ss(s);
      std::string tok;
      while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    }
  } catch (const std::logic_error&) {
    throw UsageError("bad distance list: " + s);
  }
  if (out.empty()) throw UsageError("no distances given");
  return out;
}

std::string default_stitch_name(const LayerAddress& x, const LayerAddress& y) {
  return x.model_id + "." + x.layer_name + "--" + y.model_id + "." + y.layer_name;
}

void print_history(const std::vector<EpochRecord>& h) {
  std::cout << "epoch  train_loss  val_l1_layerx  val_cosine  val_gram_cos\n";
  for (const auto& r : h) {
    std::printf("%5d  %10.5f  %13.5f  %10.5f  %12.5f\n", r.epoch, r.train_loss, r.val_l1_layerx, r.val_cosine,
                r.val_gram_cosine);
  }
}

// ---------------------------------------------------------------- fixtures

struct FixturesOpts {
  uint64_t seed = 0;
  int64_t resolution = 64;
  size_t train_count = 2048;
  size_t val_count = 100;
};

int cmd_fixtures_build(const Context& ctx, const FixturesOpts& o, const json& config) {
  auto manifest = RunManifest::begin("fixtures build", config);
  manifest.seeds = {o.seed};
  if (o.resolution < 16 || (o.resolution & (o.resolution - 1)) != 0) {
    throw UsageError("--resolution must be a power of two >= 16");
  }
  ModelRegistry reg;
  const auto enc_spec = ArchitectureSpec::resnet_small_default(o.resolution, derive_seed(o.seed, 1));
  reg.add(build_encoder("enc", enc_spec));
  reg.add(build_encoder("enc_test", ArchitectureSpec::resnet_small_default(o.resolution, derive_seed(o.seed, 2))));
  reg.add(build_bilinear_variant("enc_bilinear", enc_spec));
  ArchitectureSpec id_spec;
  id_spec.family = ArchitectureFamily::identity;
  id_spec.resolution = o.resolution;
  reg.add(build_encoder("identity", id_spec));
  ArchitectureSpec conv_spec;
  conv_spec.family = ArchitectureFamily::conv1x1_stride2;
  conv_spec.resolution = o.resolution;
  conv_spec.widths = {8};
  conv_spec.init_seed = derive_seed(o.seed, 5);
  reg.add(build_encoder("conv_s2", conv_spec));
  auto gen = build_generator("gen", ArchitectureSpec::gan_upsampler_default(o.resolution, derive_seed(o.seed, 3)));
  auto unet = build_unet_noise_generator("unet", ArchitectureSpec::unet_default(o.resolution, derive_seed(o.seed, 4)));
  reg.add(gen);
  reg.add(unet);

  // Injection passthrough on every injectable layer.
  for (const auto& g : {gen, unet}) {
    for (const auto& l : g->layers()) {
      for (uint64_t s : {0ULL, 1ULL}) {
        const auto captured = g->capture_layer_input(s, l.address);
        if (!torch::equal(g->generate_with_injection(s, l.address, captured).data(), g->generate(s).data())) {
          throw Error("passthrough check failed at " + l.address.str());
        }
      }
    }
  }

  std::ostringstream train, val;
  train << "synthetic:seed=" << derive_seed(o.seed, 10) << ",count=" << o.train_count;
  val << "synthetic:seed=" << derive_seed(o.seed, 11) << ",count=" << o.val_count;
  reg.extras = json{{"train_dataset", train.str()},
                    {"val_dataset", val.str()},
                    {"test_encoder", "enc_test"},
                    {"default_encoder", "enc"},
                    {"default_generator", "gen"},
                    {"seed", o.seed}};
  const auto path = fs::path(ctx.out) / "registry.json";
  reg.save(path);
  manifest.model_ids = reg.model_ids();
  write_manifest(ctx, manifest);
  std::cout << "registry " << path.string() << "\nregistry_hash " << reg.hash() << "\n";
  for (const auto& m : reg.describe()) {
    std::cout << "  " << m.at("kind").get<std::string>() << " " << m.at("model_id").get<std::string>() << " ("
              << m.at("family").get<std::string>() << ")\n";
  }
  return 0;
}

// ---------------------------------------------------------------- train-stitch

struct TrainOpts {
  std::string encoder, layer, generator, target, data, val_data, test_encoder, test_layer, name;
  std::optional<int> distance;
  StitchTrainingConfig cfg;
  bool no_bias = false;
  bool quiet = false;
};

struct ResolvedPair {
  std::shared_ptr<const EncoderAdapter> enc;
  std::shared_ptr<const GeneratorAdapter> gen;
  LayerAddress x, y;
};

ResolvedPair resolve_pair(const ModelRegistry& reg, const std::string& enc_id, const std::string& layer,
                          const std::string& gen_id, const std::string& target, std::optional<int> distance) {
  return resolve([&] {
    ResolvedPair p;
    p.enc = reg.encoder(pick(enc_id, reg, "default_encoder", "encoder"));
    p.gen = reg.generator(pick(gen_id, reg, "default_generator", "generator"));
    p.x = p.enc->layer(layer).address;
    p.y = target.empty() ? layer_correspondence(p.x, *p.gen, distance.value_or(0)) : p.gen->layer(target).address;
    return p;
  });
}

StitchLayer train_one(const Context& ctx, const ModelRegistry& reg, const ResolvedPair& p, const TrainOpts& o,
                      const std::string& name) {
  auto train = resolve([&] { return open_dataset(pick(o.data, reg, "train_dataset", "data"), p.enc->spec().resolution); });
  auto val = resolve([&] { return open_dataset(pick(o.val_data, reg, "val_dataset", "val-data"), p.enc->spec().resolution); });
  std::shared_ptr<const EncoderAdapter> test;
  const auto test_id = o.test_encoder.empty() ? extra(reg, "test_encoder") : o.test_encoder;
  if (!test_id.empty()) test = resolve([&] { return reg.encoder(test_id); });
  StitchValidation v{val.get(), test.get(), o.test_layer};
  if (test) resolve([&] { return test->layer(o.test_layer.empty() ? p.x.layer_name : o.test_layer); });
  StitchTrainingConfig cfg = o.cfg;
  cfg.bias = !o.no_bias;
  resolve([&] {
    cfg.validate();
    return 0;
  });
  if (!o.quiet) {
    std::cout << "training " << p.x.str() << " -> " << p.y.str() << " on " << train->id() << " (" << train->size()
              << " images, " << cfg.epochs << " epochs)\n";
  }
  auto outcome = train_stitch(*p.enc, p.x, *p.gen, p.y, *train, cfg, v);
  outcome.stitch.registry_hash = reg.hash();
  save_stitch(outcome.stitch, ctx.dir("stitches") / name);
  if (!o.quiet) {
    print_history(outcome.history);
    std::cout << "best epoch " << outcome.stitch.best_epoch << ", saved " << (ctx.dir("stitches") / (name + ".json")).string()
              << " (" << outcome.wall_time_s << " s)\n";
  }
  return outcome.stitch;
}

int cmd_train_stitch(const Context& ctx, const TrainOpts& o, const json& config) {
  auto manifest = RunManifest::begin("train-stitch", config);
  manifest.seeds = {o.cfg.seed, o.cfg.validation_seed};
  auto reg = ctx.load_registry();
  const auto p = resolve_pair(*reg, o.encoder, o.layer, o.generator, o.target, o.distance);
  const auto name = o.name.empty() ? default_stitch_name(p.x, p.y) : o.name;
  train_one(ctx, *reg, p, o, name);
  manifest.model_ids = {p.enc->model_id(), p.gen->model_id()};
  write_manifest(ctx, manifest);
  return 0;
}

// ---------------------------------------------------------------- invert

struct InvertOpts {
  std::string method = "gan", encoder, layer, stitch, image, data, test_encoder, name;
  std::optional<size_t> sample;
  uint64_t seed = 0;
  int steps = 512;
  double lr = 0.05;
};

std::shared_ptr<const StitchLayer> load_stitch_id(const Context& ctx, const ModelRegistry& reg, const std::string& id) {
  const auto path = ctx.dir("stitches") / (id + ".json");
  if (!fs::exists(path)) throw UsageError("stitch not found: " + path.string());
  auto loaded = resolve([&] { return load_stitch(path, &reg); });
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
  return std::make_shared<const StitchLayer>(std::move(loaded.stitch));
}

int cmd_invert(const Context& ctx, const InvertOpts& o, const json& config) {
  auto manifest = RunManifest::begin("invert", config);
  manifest.seeds = {o.seed};
  auto reg = ctx.load_registry();
  auto enc = resolve([&] { return reg->encoder(pick(o.encoder, *reg, "default_encoder", "encoder")); });
  const auto layer_x = resolve([&] { return enc->layer(o.layer).address; });
  const auto r = enc->spec().resolution;
  const auto x = resolve([&] {
    if (!o.image.empty() && o.sample) throw UsageError("--image and --sample are exclusive");
    if (!o.image.empty()) return bilinear_resize(io::read_image(o.image), r, r);
    if (!o.sample) throw UsageError("need --image or --sample");
    auto ds = open_dataset(pick(o.data, *reg, "val_dataset", "data"), r);
    return ds->get(*o.sample);
  });
  std::optional<EvalProtocol> proto;
  const auto test_id = o.test_encoder.empty() ? extra(*reg, "test_encoder") : o.test_encoder;
  if (!test_id.empty() && test_id != enc->model_id()) {
    proto = resolve([&] { return make_protocol(*reg, enc->model_id(), o.layer, test_id); });
  }

  std::optional<InversionResult> result;
  json extra_info = json::object();
  if (o.method == "gan") {
    if (o.stitch.empty()) throw UsageError("gan method needs --stitch");
    auto st = load_stitch_id(ctx, *reg, o.stitch);
    auto gen = resolve([&] { return reg->generator(st->target.model_id); });
    const auto layer_y = resolve([&] { return gen->layer(st->target.layer_name).address; });
    resolve([&] {
      if (st->source.model_id != enc->model_id() || st->source.layer_name != o.layer) {
        throw ValidationError("stitch " + o.stitch + " maps " + st->source.str() + ", not " + layer_x.str());
      }
      return 0;
    });
    result = invert_via_gan(*enc, layer_x, *st, *gen, layer_y, x, o.seed);
    extra_info = {{"stitch", o.stitch}, {"generator", gen->model_id()}, {"target_layer", layer_y.layer_name}};
    manifest.model_ids = {enc->model_id(), gen->model_id()};
  } else {
    GdConfig cfg;
    cfg.method = resolve([&] { return gd_method_from_string(o.method); });
    cfg.steps = o.steps;
    cfg.learning_rate = o.lr;
    cfg.seed = o.seed;
    cfg.height = x.height();
    cfg.width = x.width();
    resolve([&] {
      cfg.validate();
      return 0;
    });
    const auto target = enc->extract_activations(layer_x, x);
    result = gd_invert(*enc, layer_x, target, cfg);
    extra_info = {{"gd_config", cfg}};
    manifest.model_ids = {enc->model_id()};
  }
  if (proto) result->metrics = evaluate_inversion(*proto, x, result->image);

  const auto name = o.name.empty() ? "invert-" + o.method + "-" + layer_x.layer_name + "-" + std::to_string(o.seed) : o.name;
  const auto img_path = ctx.dir("images") / (name + ".png");
  io::write_png(img_path, result->image);
  json sidecar = sidecar_json(*result);
  sidecar["encoder"] = enc->model_id();
  sidecar["layer"] = layer_x.layer_name;
  sidecar["test_encoder"] = proto ? test_id : "";
  sidecar["image_file"] = img_path.filename().string();
  sidecar["config"] = config;
  sidecar.update(extra_info);
  io::write_file(ctx.dir("images") / (name + ".json"), sidecar.dump(2) + "\n");
  write_manifest(ctx, manifest);
  std::cout << o.method << " inversion of " << layer_x.str() << ": " << result->wall_time_s * 1000.0 << " ms, status "
            << to_string(result->status) << "\n";
  for (const auto& [k, v] : result->metrics) std::cout << "  " << k << " " << v << "\n";
  std::cout << "wrote " << img_path.string() << "\n";
  return result->status == InversionStatus::aborted_nonfinite ? 1 : 0;
}

// ---------------------------------------------------------------- benchmark

struct BenchOpts {
  std::string encoder, generator, data, test_encoder, name;
  std::vector<std::string> layers, methods{"gan", "fft_dec", "plain"}, stitches;
  int repeats = 20;
  int steps = 512;
  double lr = 0.05;
  uint64_t seed = 0;
  size_t count = 0;
};

class PrefixDataset : public ImageDataset {
 public:
  PrefixDataset(const ImageDataset& base, size_t n) : base_(base), n_(std::min(n, base.size())) {}
  size_t size() const override { return n_; }
  ImageTensor get(size_t i) const override { return base_.get(i); }
  std::string id() const override { return base_.id() + "[:" + std::to_string(n_) + "]"; }
  int64_t resolution() const override { return base_.resolution(); }

 private:
  const ImageDataset& base_;
  size_t n_;
};

int cmd_benchmark(const Context& ctx, const BenchOpts& o, const json& config) {
  auto manifest = RunManifest::begin("benchmark", config);
  manifest.seeds = {o.seed};
  auto reg = ctx.load_registry();
  auto enc = resolve([&] { return reg->encoder(pick(o.encoder, *reg, "default_encoder", "encoder")); });
  const auto test_id = resolve([&] { return pick(o.test_encoder, *reg, "test_encoder", "test-encoder"); });
  auto full = resolve([&] { return open_dataset(pick(o.data, *reg, "val_dataset", "data"), enc->spec().resolution); });
  std::unique_ptr<ImageDataset> limited;
  const ImageDataset* ds = full.get();
  if (o.count > 0) {
    limited = std::make_unique<PrefixDataset>(*full, o.count);
    ds = limited.get();
  }
  std::vector<std::string> layers = o.layers;
  if (layers.empty()) {
    for (const auto& l : enc->layers()) layers.push_back(l.address.layer_name);
  }
  std::map<std::string, std::string> stitch_for;
  for (const auto& s : o.stitches) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--stitch expects LAYER=ID, got " + s);
    stitch_for[s.substr(0, eq)] = s.substr(eq + 1);
  }
  if (o.repeats < 1) throw UsageError("--repeats must be >= 1");

  MetricReport report;
  for (const auto& layer : layers) {
    auto proto = resolve([&] { return make_protocol(*reg, enc->model_id(), layer, test_id); });
    proto.dataset_id = ds->id();
    std::vector<MethodRunner> runners;
    for (const auto& m : o.methods) {
      if (m == "gan") {
        std::string sid;
        if (auto it = stitch_for.find(layer); it != stitch_for.end()) {
          sid = it->second;
        } else {
          auto gen = resolve([&] { return reg->generator(pick(o.generator, *reg, "default_generator", "generator")); });
          sid = default_stitch_name(proto.layer_x, resolve([&] { return layer_correspondence(proto.layer_x, *gen); }));
        }
        auto st = load_stitch_id(ctx, *reg, sid);
        if (st->source.layer_name != layer || st->source.model_id != enc->model_id()) {
          throw UsageError("stitch " + sid + " does not start at " + proto.layer_x.str());
        }
        auto gen = resolve([&] { return reg->generator(st->target.model_id); });
        runners.push_back(gan_method(enc, proto.layer_x, *st, gen, gen->layer(st->target.layer_name).address, o.seed,
                                     o.repeats));
      } else {
        GdConfig cfg;
        cfg.method = resolve([&] { return gd_method_from_string(m); });
        cfg.steps = o.steps;
        cfg.learning_rate = o.lr;
        cfg.seed = o.seed;
        resolve([&] {
          cfg.validate();
          return 0;
        });
        runners.push_back(gd_method(enc, proto.layer_x, cfg));
      }
    }
    std::cout << "benchmarking " << proto.layer_x.str() << " on " << ds->size() << " images\n" << std::flush;
    report.merge(run_benchmark(proto, *ds, runners));
  }
  report.run_id = o.name.empty() ? manifest.run_id : o.name;
  report.kind = "benchmark";
  report.config = config;
  report.config["encoder"] = enc->model_id();
  report.config["test_encoder"] = test_id;
  report.config["dataset"] = ds->id();
  const auto base = ctx.dir("reports") / report.run_id;
  io::write_file(base.string() + ".json", report.to_json().dump(2) + "\n");
  io::write_file(base.string() + ".csv", report.to_csv());
  const auto table = report.render_table();
  io::write_file(base.string() + ".txt", table);
  manifest.model_ids = {enc->model_id(), test_id};
  write_manifest(ctx, manifest);
  std::cout << table << "wrote " << base.string() << ".json\n";
  return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepOpts {
  TrainOpts train;
  std::string distances = "-2..2";
  bool train_missing = false;
  uint64_t seed = 0;
  size_t count = 0;
};

int cmd_sweep(const Context& ctx, const SweepOpts& o, const json& config) {
  auto manifest = RunManifest::begin("sweep", config);
  manifest.seeds = {o.seed};
  auto reg = ctx.load_registry();
  const auto deltas = parse_distances(o.distances);
  if (std::find(deltas.begin(), deltas.end(), 0) == deltas.end()) throw UsageError("distances must include 0");
  const auto& t = o.train;
  const auto test_id = resolve([&] { return pick(t.test_encoder, *reg, "test_encoder", "test-encoder"); });
  std::map<int, StitchLayer> stitches;
  ResolvedPair p0 = resolve_pair(*reg, t.encoder, t.layer, t.generator, "", 0);
  for (int d : deltas) {
    const auto p = resolve_pair(*reg, t.encoder, t.layer, t.generator, "", d);
    const auto name = default_stitch_name(p.x, p.y);
    if (fs::exists(ctx.dir("stitches") / (name + ".json"))) {
      stitches.emplace(d, *load_stitch_id(ctx, *reg, name));
    } else if (o.train_missing) {
      stitches.emplace(d, train_one(ctx, *reg, p, t, name));
    } else {
      throw Error("missing stitch checkpoint for delta " + std::to_string(d) + ": " + name +
                  " (train it or pass --train-missing)");
    }
  }
  auto proto = resolve([&] { return make_protocol(*reg, p0.enc->model_id(), t.layer, test_id); });
  auto full = resolve([&] { return open_dataset(pick(t.val_data, *reg, "val_dataset", "val-data"), p0.enc->spec().resolution); });
  std::unique_ptr<ImageDataset> limited;
  const ImageDataset* ds = full.get();
  if (o.count > 0) {
    limited = std::make_unique<PrefixDataset>(*full, o.count);
    ds = limited.get();
  }
  const auto sweep = end_layer_sweep(proto, *p0.gen, stitches, *ds, o.seed);
  json out = sweep.to_json();
  out["kind"] = "sweep";
  out["run_id"] = t.name.empty() ? manifest.run_id : t.name;
  out["config"] = config;
  out["plot_data"] = sweep.plot_data();
  const auto id = out["run_id"].get<std::string>();
  io::write_file(ctx.dir("reports") / (id + ".json"), out.dump(2) + "\n");
  manifest.model_ids = {p0.enc->model_id(), p0.gen->model_id(), test_id};
  write_manifest(ctx, manifest);
  std::cout << "delta  target         res  metric        absolute    relative\n";
  for (const auto& r : sweep.rows) {
    std::printf("%5d  %-13s %4lld  %-12s %10.5f  %10.5f\n", r.delta, r.target_layer.c_str(),
                static_cast<long long>(r.target_resolution), r.metric.c_str(), r.absolute, r.relative);
  }
  std::cout << "wrote " << (ctx.dir("reports") / (id + ".json")).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- diagnose-grid

struct GridOpts {
  std::string encoder, family, layer, name;
  uint64_t init_seed = 0, input_seed = 0;
  int64_t size = 0;
  int64_t resolution = 64;
  bool compare = false;
};

int cmd_diagnose_grid(const Context& ctx, const GridOpts& o, const json& config) {
  auto manifest = RunManifest::begin("diagnose-grid", config);
  manifest.seeds = {o.init_seed, o.input_seed};
  std::shared_ptr<const EncoderAdapter> enc;
  if (!o.family.empty()) {
    enc = resolve([&] {
      ArchitectureSpec spec;
      const auto fam = architecture_family_from_string(o.family);
      if (fam == ArchitectureFamily::resnet_small || fam == ArchitectureFamily::resnet_small_bilinear) {
        spec = ArchitectureSpec::resnet_small_default(o.resolution, o.init_seed);
        if (fam == ArchitectureFamily::resnet_small_bilinear) return std::shared_ptr<const EncoderAdapter>(build_bilinear_variant(o.family, spec));
      } else {
        spec.family = fam;
        spec.resolution = o.resolution;
        spec.init_seed = o.init_seed;
        if (fam == ArchitectureFamily::conv1x1_stride2) spec.widths = {8};
      }
      return std::shared_ptr<const EncoderAdapter>(build_encoder(o.family, spec));
    });
  } else {
    auto reg = ctx.load_registry();
    enc = resolve([&] { return reg->encoder(pick(o.encoder, *reg, "default_encoder", "encoder")); });
  }
  const int64_t size = o.size > 0 ? o.size : enc->spec().resolution;
  resolve([&] { return enc->layer_shape(o.layer, size, size); });
  const auto name = o.name.empty() ? "grid-" + enc->model_id() + "-" + o.layer : o.name;
  json out{{"kind", "diagnostics"}, {"run_id", name}, {"config", config}};
  std::vector<GradientGridMap> maps;
  if (o.compare) {
    if (enc->spec().family != ArchitectureFamily::resnet_small) throw UsageError("--compare needs a resnet_small encoder");
    auto cmp = compare_variants(enc->spec(), o.layer, size, size, o.input_seed);
    maps = {cmp.strided, cmp.bilinear};
    out["strided"] = cmp.strided.summary();
    out["bilinear"] = cmp.bilinear.summary();
  } else {
    maps = {gradient_grid_map(*enc, o.layer, size, size, o.input_seed)};
    out["map"] = maps[0].summary();
  }
  for (size_t i = 0; i < maps.size(); ++i) {
    const auto suffix = maps.size() == 1 ? "" : (i == 0 ? "-strided" : "-bilinear");
    io::write_file(ctx.dir("images") / (name + suffix + ".png"), io::encode_heatmap_png(maps[i].magnitude));
    std::cout << maps[i].model_id << ":" << maps[i].layer << " zero_fraction " << maps[i].zero_fraction << " period "
              << (maps[i].period ? std::to_string(*maps[i].period) : "none") << " noisiness " << maps[i].noisiness << "\n";
  }
  io::write_file(ctx.dir("reports") / (name + ".json"), out.dump(2) + "\n");
  manifest.model_ids = {enc->model_id()};
  write_manifest(ctx, manifest);
  return 0;
}

// ---------------------------------------------------------------- serve

struct ServeOpts {
  std::string addr, static_dir;
  size_t queue_depth = 8;
};

Service* g_service = nullptr;

int cmd_serve(const Context& ctx, const ServeOpts& o) {
  ServiceConfig cfg = resolve([&] {
    ServiceConfig c;
    c.registry = ctx.load_registry();
    const auto root = ctx.registry_path().parent_path();
    c.stitch_dir = root / "stitches";
    c.report_dir = root / "reports";
    c.dataset = extra(*c.registry, "val_dataset");
    c.test_encoder = extra(*c.registry, "test_encoder");
    c.static_dir = o.static_dir;
    c.queue_depth = o.queue_depth;
    return c;
  });
  auto [host, port] = resolve([&] {
    if (o.addr.empty()) return listen_address_from_env();
    const auto colon = o.addr.rfind(':');
    if (colon == std::string::npos) throw ValidationError("--addr must be host:port");
    return std::pair<std::string, int>{o.addr.substr(0, colon), std::stoi(o.addr.substr(colon + 1))};
  });
  Service svc(std::move(cfg));
  g_service = &svc;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cout << "listening on http://" << host << ":" << port << "\n" << std::flush;
  svc.serve(host, port);
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stitchviz: single-pass activation inversion by stitching encoders into generators"};
  app.require_subcommand(1);
  Context ctx;
  std::function<int()> action;

  // fixtures build
  FixturesOpts fx;
  auto* fixtures = app.add_subcommand("fixtures", "Desk-scale model fixtures");
  fixtures->require_subcommand(1);
  auto* fbuild = fixtures->add_subcommand("build", "Build and register the fixture models");
  add_common(fbuild, ctx);
  fbuild->add_option("--seed", fx.seed, "Fixture seed")->capture_default_str();
  fbuild->add_option("--resolution", fx.resolution, "Reference resolution")->capture_default_str();
  fbuild->add_option("--train-count", fx.train_count, "Synthetic training images")->capture_default_str();
  fbuild->add_option("--val-count", fx.val_count, "Synthetic validation images")->capture_default_str();
  fbuild->callback([&] { action = [&] { return cmd_fixtures_build(ctx, fx, effective_config(fbuild)); }; });

  // train-stitch
  TrainOpts tr;
  auto* train = app.add_subcommand("train-stitch", "Train a stitch layer");
  add_common(train, ctx);
  train->add_option("--encoder", tr.encoder, "Encoder id");
  train->add_option("--layer", tr.layer, "Encoder layer (LayerX)")->required();
  train->add_option("--generator", tr.generator, "Generator id");
  auto* target_opt = train->add_option("--target", tr.target, "Generator layer (LayerY)");
  train->add_option("--distance", tr.distance, "Sampling-distance offset for the target layer")->excludes(target_opt);
  train->add_option("--data", tr.data, "Training dataset (directory or synthetic:seed=S,count=N)");
  train->add_option("--val-data", tr.val_data, "Validation dataset");
  train->add_option("--test-encoder", tr.test_encoder, "Test network id");
  train->add_option("--test-layer", tr.test_layer, "Test network layer (default: same name)");
  train->add_option("--epochs", tr.cfg.epochs, "Epochs")->capture_default_str();
  train->add_option("--lr", tr.cfg.learning_rate, "Adam learning rate")->capture_default_str();
  train->add_option("--batch-size", tr.cfg.batch_size, "Batch size")->capture_default_str();
  train->add_option("--seed", tr.cfg.seed, "Training seed")->capture_default_str();
  train->add_option("--val-seed", tr.cfg.validation_seed, "Validation generator seed")->capture_default_str();
  train->add_flag("--no-bias", tr.no_bias, "Train without a bias term");
  train->add_option("--name", tr.name, "Checkpoint name under stitches/");
  train->callback([&] { action = [&] { return cmd_train_stitch(ctx, tr, effective_config(train)); }; });

  // invert
  InvertOpts inv;
  auto* invert = app.add_subcommand("invert", "Invert one image's activations");
  add_common(invert, ctx);
  invert->add_option("--method", inv.method, "gan, fft_dec or plain")
      ->check(CLI::IsMember({"gan", "fft_dec", "plain"}))
      ->capture_default_str();
  invert->add_option("--encoder", inv.encoder, "Encoder id");
  invert->add_option("--layer", inv.layer, "Encoder layer")->required();
  invert->add_option("--stitch", inv.stitch, "Stitch id (gan)");
  invert->add_option("--image", inv.image, "PNG/JPEG input");
  invert->add_option("--sample", inv.sample, "Dataset sample index");
  invert->add_option("--data", inv.data, "Dataset for --sample");
  invert->add_option("--test-encoder", inv.test_encoder, "Test network for metrics");
  invert->add_option("--seed", inv.seed, "Seed")->capture_default_str();
  invert->add_option("--steps", inv.steps, "Gradient-descent steps")->capture_default_str();
  invert->add_option("--lr", inv.lr, "Gradient-descent learning rate")->capture_default_str();
  invert->add_option("--name", inv.name, "Output name under images/");
  invert->callback([&] { action = [&] { return cmd_invert(ctx, inv, effective_config(invert)); }; });

  // benchmark
  BenchOpts bo;
  auto* bench = app.add_subcommand("benchmark", "Timed method comparison in the test network");
  add_common(bench, ctx);
  bench->add_option("--encoder", bo.encoder, "Encoder id");
  bench->add_option("--generator", bo.generator, "Generator id for default stitch names");
  bench->add_option("--layers", bo.layers, "Encoder layers (default: all)")->delimiter(',');
  bench->add_option("--methods", bo.methods, "Methods")->delimiter(',')->capture_default_str();
  bench->add_option("--stitch", bo.stitches, "LAYER=ID stitch per layer")->delimiter(',');
  bench->add_option("--repeats", bo.repeats, "Timed passes for gan")->capture_default_str();
  bench->add_option("--steps", bo.steps, "Gradient-descent steps")->capture_default_str();
  bench->add_option("--lr", bo.lr, "Gradient-descent learning rate")->capture_default_str();
  bench->add_option("--data", bo.data, "Evaluation dataset");
  bench->add_option("--count", bo.count, "Use only the first N samples");
  bench->add_option("--test-encoder", bo.test_encoder, "Test network id");
  bench->add_option("--seed", bo.seed, "Seed")->capture_default_str();
  bench->add_option("--name", bo.name, "Report id (default: run id)");
  bench->callback([&] { action = [&] { return cmd_benchmark(ctx, bo, effective_config(bench)); }; });

  // sweep
  SweepOpts so;
  auto* sweep = app.add_subcommand("sweep", "End-layer sweep over target distances");
  add_common(sweep, ctx);
  sweep->add_option("--encoder", so.train.encoder, "Encoder id");
  sweep->add_option("--layer", so.train.layer, "Encoder layer")->required();
  sweep->add_option("--generator", so.train.generator, "Generator id");
  sweep->add_option("--distances", so.distances, "Offsets, A..B or comma list")->capture_default_str();
  sweep->add_option("--val-data", so.train.val_data, "Evaluation dataset");
  sweep->add_option("--count", so.count, "Use only the first N samples");
  sweep->add_option("--test-encoder", so.train.test_encoder, "Test network id");
  sweep->add_option("--seed", so.seed, "Seed")->capture_default_str();
  sweep->add_flag("--train-missing", so.train_missing, "Train stitches that are not on disk");
  sweep->add_option("--data", so.train.data, "Training dataset for --train-missing");
  sweep->add_option("--epochs", so.train.cfg.epochs, "Epochs for --train-missing")->capture_default_str();
  sweep->add_option("--train-seed", so.train.cfg.seed, "Training seed for --train-missing")->capture_default_str();
  sweep->add_option("--name", so.train.name, "Report id (default: run id)");
  sweep->callback([&] { action = [&] { return cmd_sweep(ctx, so, effective_config(sweep)); }; });

  // diagnose-grid
  GridOpts go;
  auto* grid = app.add_subcommand("diagnose-grid", "Input-gradient grid analysis");
  add_common(grid, ctx);
  grid->add_option("--encoder", go.encoder, "Registered encoder id");
  grid->add_option("--family", go.family, "Build an untrained encoder of this family instead");
  grid->add_option("--init-seed", go.init_seed, "Init seed with --family")->capture_default_str();
  grid->add_option("--resolution", go.resolution, "Reference resolution with --family")->capture_default_str();
  grid->add_option("--layer", go.layer, "Layer")->required();
  grid->add_option("--size", go.size, "Input size (default: reference resolution)");
  grid->add_option("--input-seed", go.input_seed, "Seed of the random probe image")->capture_default_str();
  grid->add_flag("--compare", go.compare, "Also build the bilinear variant and compare");
  grid->add_option("--name", go.name, "Output name");
  grid->callback([&] { action = [&] { return cmd_diagnose_grid(ctx, go, effective_config(grid)); }; });

  // serve
  ServeOpts sv;
  auto* serve = app.add_subcommand("serve", "HTTP API (address from --addr or $STITCHVIZ_ADDR)");
  add_common(serve, ctx);
  serve->add_option("--addr", sv.addr, "host:port");
  serve->add_option("--static", sv.static_dir, "Viewer assets to serve at /");
  serve->add_option("--queue-depth", sv.queue_depth, "Inference queue depth")->capture_default_str();
  serve->callback([&] { action = [&] { return cmd_serve(ctx, sv); }; });

  try {
    app.parse(argc, argv);
    if (!ctx.config.empty()) {
      CLI::App* leaf = &app;
      while (!leaf->get_subcommands().empty()) leaf = leaf->get_subcommands().front();
      cli::apply_config_file(leaf, ctx.config);
    }
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    return action ? action() : 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
