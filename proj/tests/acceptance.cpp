// Acceptance suite: one PASS/FAIL line per criterion. Tolerances and budgets
// are fixed here. Exit status is non-zero if any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "stitchviz/diagnostics.hpp"
#include "stitchviz/evalharness.hpp"
#include "stitchviz/image_io.hpp"
#include "stitchviz/metrics.hpp"
#include "test_support.hpp"

using namespace stitchviz;
namespace t = stitchviz::testing;
namespace fs = std::filesystem;

namespace {

constexpr double kCosineTol = 1e-6;
constexpr double kL1Tol = 1e-7;
constexpr int kOracleTensors = 250;
constexpr double kGdL1Max = 0.05;
constexpr double kFftTol = 1e-4;
constexpr double kCosineGainMin = 0.05;
constexpr int kTrainEpochs = 5;
constexpr double kSpeedupMin = 20.0;
constexpr int kGanPasses = 20;
constexpr size_t kSpeedImages = 100;

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Check {
  Outcome& o;
  void operator()(bool ok, const std::string& what) {
    if (!ok) {
      o.pass = false;
      o.detail += (o.detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

fs::path work_root() {
  static const fs::path root = t::temp_dir("acceptance");
  return root;
}

int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(STITCHVIZ_CLI_PATH) + " " + args + " >" + (work_root() / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tail_of(const std::string& log) {
  std::ifstream f(work_root() / log);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s.size() > 400 ? s.substr(s.size() - 400) : s;
}

const fs::path& fixtures_dir() {
  static const fs::path dir = [] {
    auto d = work_root() / "fixtures";
    if (run_cli("fixtures build --out " + d.string() + " --seed 0", "fixtures.log") != 0) {
      throw Error("fixtures build failed: " + tail_of("fixtures.log"));
    }
    return d;
  }();
  return dir;
}

std::shared_ptr<ModelRegistry> fixture_registry() {
  static auto reg = ModelRegistry::load(fixtures_dir() / "registry.json");
  return reg;
}

// ------------------------------------------------------------------ 1

Outcome metric_oracles() {
  Outcome o;
  Check check{o};
  std::mt19937_64 rng(20240601);
  double worst_cos = 0, worst_l1 = 0, worst_gram = 0;
  for (int n = 0; n < kOracleTensors; ++n) {
    const int64_t c = 1 + static_cast<int64_t>(rng() % 8), h = 1 + static_cast<int64_t>(rng() % 6),
                  w = 1 + static_cast<int64_t>(rng() % 6);
    auto g = make_generator(rng());
    auto a = torch::randn({c, h, w}, g), b = torch::randn({c, h, w}, g);
    auto b2 = torch::randn({c, 1 + static_cast<int64_t>(rng() % 6), 1 + static_cast<int64_t>(rng() % 6)}, g);
    worst_cos = std::max(worst_cos, std::abs(metrics::cosine_similarity_pixelwise(a, b) - t::loop_cosine(a, b)));
    worst_l1 = std::max(worst_l1, std::abs(metrics::l1_mean(a, b) - t::loop_l1(a, b)));
    worst_gram = std::max(worst_gram, std::abs(metrics::gram_cosine(a, b2) - t::loop_gram_cosine(a, b2)));
    check(std::abs(metrics::cosine_similarity_pixelwise(a, a) - 1.0) <= kCosineTol, "self cosine");
    check(std::abs(metrics::cosine_similarity_pixelwise(a, -a) + 1.0) <= kCosineTol, "antipodal cosine");
    const double shift = static_cast<double>(rng() % 1000) / 250.0 - 2.0;
    const auto a64 = a.to(torch::kFloat64);
    check(std::abs(metrics::l1_mean(a64, a64 + shift) - std::abs(shift)) <= kL1Tol, "constant shift L1");
    check(std::abs(metrics::gram_cosine(a, t::permute_pixels(a, rng())) - 1.0) <= kCosineTol, "spatial permutation");
    check(std::abs(metrics::gram_cosine(a, a) - 1.0) <= kCosineTol, "self gram cosine");
  }
  check(worst_cos <= kCosineTol, "cosine oracle");
  check(worst_l1 <= kL1Tol, "L1 oracle");
  check(worst_gram <= kCosineTol, "gram oracle");
  o.detail = std::to_string(kOracleTensors) + " tensors, max |err| cos " + fmt(worst_cos, 2) + ", l1 " +
             fmt(worst_l1, 2) + ", gram " + fmt(worst_gram, 2) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 2

Outcome injection_passthrough() {
  Outcome o;
  Check check{o};
  auto reg = fixture_registry();
  int cases = 0;
  for (const auto* id : {"gen", "unet"}) {
    auto g = reg->generator(id);
    for (const auto& l : g->layers()) {
      for (uint64_t s = 0; s < 10; ++s) {
        const uint64_t seed = derive_seed(777, s);
        auto captured = g->capture_layer_input(seed, l.address);
        check(torch::equal(g->generate_with_injection(seed, l.address, captured).data(), g->generate(seed).data()),
              l.address.str() + " seed " + std::to_string(s));
        ++cases;
      }
    }
  }
  o.detail = std::to_string(cases) + " (layer, seed) cases bit-exact" + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 3

Outcome checkerboard() {
  Outcome o;
  Check check{o};
  auto reg = fixture_registry();
  auto conv = gradient_grid_map(*reg->encoder("conv_s2"), "conv", 64, 64, 0);
  check(conv.zero_fraction == 0.75, "conv1x1 stride-2 zero fraction " + fmt(conv.zero_fraction));
  check(conv.period == 2, "period-2 lattice");
  for (int64_t i = 0; i < 64; ++i)
    for (int64_t j = 0; j < 64; ++j) {
      const bool zero = conv.magnitude[i][j].item<double>() < kZeroGradientThreshold;
      if (zero != (i % 2 == 1 || j % 2 == 1)) {
        check(false, "lattice position " + std::to_string(i) + "," + std::to_string(j));
        i = j = 64;
      }
    }
  auto strided = gradient_grid_map(*reg->encoder("enc"), "stage2", 64, 64, 0);
  auto bilinear = gradient_grid_map(*reg->encoder("enc_bilinear"), "stage2", 64, 64, 0);
  check(bilinear.zero_fraction == 0.0, "bilinear zero fraction " + fmt(bilinear.zero_fraction));
  check(strided.noisiness > bilinear.noisiness, "noisiness ordering");
  o.detail = "zero fraction " + fmt(conv.zero_fraction) + " period " + (conv.period ? std::to_string(*conv.period) : "-") +
             ", bilinear zero fraction " + fmt(bilinear.zero_fraction) + ", stage2 noisiness strided " +
             fmt(strided.noisiness, 3) + " > bilinear " + fmt(bilinear.noisiness, 3) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 4

int reflect(int i, int n) { return i < 0 ? -i : (i >= n ? 2 * (n - 1) - i : i); }

Outcome gd_convergence() {
  Outcome o;
  Check check{o};
  auto id = fixture_registry()->encoder("identity");
  const auto lx = id->layer("input").address;
  ImageTensor target(t::random_unit_image(64, 64, 99));
  GdConfig cfg;
  cfg.method = GdMethod::plain;
  cfg.steps = 512;
  cfg.learning_rate = 0.05;
  auto r = gd_invert(*id, lx, id->extract_activations(lx, target), cfg);
  const double l1 = metrics::l1_mean(r.image.data(), target.data());
  check(l1 < kGdL1Max, "plain L1 " + fmt(l1));

  double fft_err = 0;
  for (auto [h, w] : {std::pair<int64_t, int64_t>{64, 64}, {32, 48}, {15, 17}}) {
    auto x = torch::randn({3, h, w}, make_generator(static_cast<uint64_t>(h + w)));
    auto spec = torch::fft::rfft2(x, c10::nullopt, {-2, -1}, "ortho");
    fft_err = std::max(fft_err, (fft_param_to_image(spec, h, w, torch::Tensor(), torch::eye(3)) - x)
                                    .abs().max().item<double>());
  }
  check(fft_err <= kFftTol, "fft round trip " + fmt(fft_err, 2));

  int jitter_ok = 0;
  auto x = t::random_unit_image(7, 9, 1);
  const t::Grid3 in(x);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const t::Grid3 out(jitter_one_pixel(x, dx, dy));
      bool ok = out.h == 7 && out.w == 9;
      for (int c = 0; ok && c < 3; ++c)
        for (int i = 0; i < 7; ++i)
          for (int j = 0; j < 9; ++j) ok = ok && out(c, i, j) == in(c, reflect(i - dy, 7), reflect(j - dx, 9));
      jitter_ok += ok;
    }
  check(jitter_ok == 9, "jitter offsets " + std::to_string(jitter_ok) + "/9");
  o.detail = "plain L1 " + fmt(l1) + " after 512 steps, fft round-trip err " + fmt(fft_err, 2) + ", jitter " +
             std::to_string(jitter_ok) + "/9 offsets" + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 5

const fs::path& trained_stitch() {
  static const fs::path p = [] {
    const auto args = "train-stitch --out " + fixtures_dir().string() + " --layer stage2 --epochs " +
                      std::to_string(kTrainEpochs) + " --name accept";
    if (run_cli(args, "train.log") != 0) throw Error("train-stitch failed: " + tail_of("train.log"));
    return fixtures_dir() / "stitches" / "accept";
  }();
  return p;
}

Outcome stitch_training() {
  Outcome o;
  Check check{o};
  auto reg = fixture_registry();
  const auto train_ds = open_dataset(reg->extras.at("train_dataset").get<std::string>(), 64);
  check(train_ds->size() >= 2000, "training set size");
  auto loaded = load_stitch(trained_stitch(), reg.get());
  const auto& h = loaded.stitch.history;
  check(static_cast<int>(h.size()) == kTrainEpochs + 1, "epoch count");
  const auto& init = h.front();
  const auto& fin = h.back();
  const auto& best = h[static_cast<size_t>(loaded.stitch.best_epoch)];
  check(loaded.stitch.target.layer_name == layer_correspondence(loaded.stitch.source, *reg->generator("gen"), 0).layer_name,
        "matched target layer");
  check(fin.val_l1_layerx < init.val_l1_layerx, "final L1 in LayerX not below init");
  check(fin.val_cosine - init.val_cosine >= kCosineGainMin, "final cosine gain " + fmt(fin.val_cosine - init.val_cosine));
  o.detail = std::to_string(train_ds->size()) + " images, " + std::to_string(kTrainEpochs) + " epochs, " +
             loaded.stitch.source.layer_name + "->" + loaded.stitch.target.layer_name + ": L1-in-LayerX " +
             fmt(init.val_l1_layerx) + " -> " + fmt(fin.val_l1_layerx) + ", test cosine " + fmt(init.val_cosine) +
             " -> " + fmt(fin.val_cosine) + " (+" + fmt(fin.val_cosine - init.val_cosine, 3) + "; best epoch " +
             std::to_string(loaded.stitch.best_epoch) + " +" + fmt(best.val_cosine - init.val_cosine, 3) + ")" +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 6

Outcome speed() {
  Outcome o;
  Check check{o};
  auto reg = fixture_registry();
  auto stitch = load_stitch(trained_stitch(), reg.get()).stitch;
  auto proto = make_protocol(*reg, "enc", "stage2", "enc_test");
  const auto val = open_dataset(reg->extras.at("val_dataset").get<std::string>(), 64);
  check(val->size() == kSpeedImages, "validation set size");
  auto gen = reg->generator(stitch.target.model_id);
  GdConfig plain;
  plain.method = GdMethod::plain;
  plain.steps = 512;
  auto report = run_benchmark(proto, *val,
                              {gan_method(reg->encoder("enc"), proto.layer_x, stitch, gen, stitch.target, 0, kGanPasses),
                               gd_method(reg->encoder("enc"), proto.layer_x, plain)});
  const double gan_s = report.timings.at(0).wall_time_s, plain_s = report.timings.at(1).wall_time_s;
  const double ratio = plain_s / gan_s;
  check(ratio >= kSpeedupMin, "speedup " + fmt(ratio));
  o.detail = std::to_string(val->size()) + " images incl. metrics: gan " + fmt(gan_s * 1000, 4) + " ms (mean of " +
             std::to_string(kGanPasses) + " passes), plain n=512 " + fmt(plain_s, 4) + " s, speedup " + fmt(ratio, 4) +
             "x" + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 7

Outcome harness() {
  Outcome o;
  Check check{o};
  auto reg = fixture_registry();
  auto proto = make_protocol(*reg, "enc", "stage2", "enc_test");
  auto enc = reg->encoder("enc");
  auto gen = reg->generator("gen");
  SyntheticTextureDataset ds(31, 6, 64);
  GdConfig plain;
  plain.steps = 4;
  auto s0 = StitchLayer::initialize(enc->layer("stage2"), gen->layer(layer_correspondence(proto.layer_x, *gen, 0).layer_name),
                                    true, 1);
  auto report = run_benchmark(proto, ds, {gan_method(enc, proto.layer_x, s0, gen, s0.target, 0, 2),
                                          gd_method(enc, proto.layer_x, plain)});
  // Independent recomputation from the flat records.
  std::map<std::string, std::vector<double>> groups;
  for (const auto& r : report.records) groups[r.method + "|" + r.layer + "|" + r.metric].push_back(r.value);
  size_t matched = 0;
  for (const auto& a : report.aggregates()) {
    const auto& v = groups.at(a.method + "|" + a.layer + "|" + a.metric);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    check(a.count == v.size() && a.mean == mean && a.std == sd, "aggregate " + a.method + "/" + a.metric);
    ++matched;
  }
  check(matched == groups.size() && matched == 6, "aggregate groups");
  const auto rt = MetricReport::from_json(report.to_json());
  check(rt.records == report.records, "report round trip");

  std::map<int, StitchLayer> stitches;
  for (int d : {-1, 0, 1}) {
    stitches[d] = StitchLayer::initialize(enc->layer("stage2"),
                                          gen->layer(layer_correspondence(proto.layer_x, *gen, d).layer_name), true,
                                          static_cast<uint64_t>(d + 5));
  }
  SyntheticTextureDataset small(32, 3, 64);
  auto sweep = end_layer_sweep(proto, *gen, stitches, small, 0);
  size_t zero_rows = 0;
  for (const auto& r : sweep.rows) {
    if (r.delta == 0) {
      ++zero_rows;
      check(r.relative == 1.0, "relative at delta 0");
    }
  }
  check(zero_rows == 3, "delta-0 rows");

  auto g512 = build_generator("g512", ArchitectureSpec::gan_upsampler_default(512, 0));
  LayerAddress stage3 = enc->layer("stage3").address;
  const std::map<int, std::string> table3{
      {2, "b128.conv0"}, {1, "b64.conv0"}, {0, "b32.conv0"}, {-1, "b16.conv0"}, {-2, "b8.conv0"}};
  int t3 = 0;
  for (const auto& [delta, name] : table3) {
    const bool ok = layer_correspondence(stage3, *g512, delta).layer_name == name;
    check(ok, "delta " + std::to_string(delta) + " -> " + name);
    t3 += ok;
  }
  o.detail = std::to_string(matched) + " aggregates recomputed exactly, sweep delta-0 relative 1.0, table mapping " +
             std::to_string(t3) + "/5" + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// ------------------------------------------------------------------ 8

std::vector<std::pair<std::string, std::string>> snapshot(const std::vector<fs::path>& files) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : files) {
    auto bytes = io::read_file(f);
    if (f.extension() == ".json") bytes = without_timing(json::parse(bytes)).dump();
    out.emplace_back(f.filename().string(), bytes);
  }
  return out;
}

Outcome determinism() {
  Outcome o;
  Check check{o};
  const auto out = work_root() / "determinism";
  const std::string common = " --out " + out.string();
  if (run_cli("fixtures build --seed 3 --train-count 24 --val-count 6" + common, "det-fixtures.log") != 0) {
    check(false, "fixtures build: " + tail_of("det-fixtures.log"));
    return o;
  }
  const std::vector<std::pair<std::string, std::vector<fs::path>>> runs{
      {"train-stitch --layer stage2 --epochs 2 --seed 4 --name det" + common,
       {out / "stitches" / "det.json", out / "stitches" / "det.bin"}},
      {"invert --method gan --layer stage2 --stitch det --sample 2 --seed 9 --name det-gan" + common,
       {out / "images" / "det-gan.json", out / "images" / "det-gan.png"}},
      {"invert --method fft_dec --layer stage2 --sample 1 --steps 12 --seed 9 --name det-fft" + common,
       {out / "images" / "det-fft.json", out / "images" / "det-fft.png"}},
      {"benchmark --layers stage2 --methods gan,plain --stitch stage2=det --repeats 2 --steps 6 --count 3 --name det" +
           common,
       {out / "reports" / "det.json", out / "reports" / "det.csv"}},
  };
  int identical = 0;
  for (const auto& [args, files] : runs) {
    const auto name = args.substr(0, args.find(' '));
    if (run_cli(args, "det-a.log") != 0) {
      check(false, name + " run 1: " + tail_of("det-a.log"));
      continue;
    }
    const auto first = snapshot(files);
    if (run_cli(args, "det-b.log") != 0) {
      check(false, name + " run 2: " + tail_of("det-b.log"));
      continue;
    }
    const bool same = first == snapshot(files);
    check(same, name + " outputs differ");
    identical += same;
  }
  o.detail = std::to_string(identical) + "/" + std::to_string(runs.size()) +
             " reruns (train-stitch, invert gan, invert fft_dec, benchmark) byte-identical modulo timing fields" +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

}  // namespace

int main() {
  torch::set_num_threads(1);
  const std::vector<std::tuple<int, std::string, double, std::function<Outcome()>>> criteria{
      {1, "metric oracle suite", 60, metric_oracles},
      {2, "injection passthrough", 120, injection_passthrough},
      {3, "checkerboard analytics", 120, checkerboard},
      {4, "gradient-descent convergence", 180, gd_convergence},
      {5, "stitch training efficacy", 7200, stitch_training},
      {6, "speed ratio gan vs plain", 1800, speed},
      {7, "harness correctness", 60, harness},
      {8, "determinism", 1800, determinism},
  };
  int failed = 0;
  for (const auto& [n, name, budget, fn] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = Outcome{false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > budget) {
      o.pass = false;
      o.detail += "; runtime " + fmt(secs) + " s over budget " + fmt(budget) + " s";
    }
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", n, name.c_str(), o.detail.c_str(),
                secs);
    std::fflush(stdout);
  }
  std::error_code ec;
  fs::remove_all(work_root(), ec);
  return failed == 0 ? 0 : 1;
}
