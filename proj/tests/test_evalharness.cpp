#include <gtest/gtest.h>

#include "stitchviz/evalharness.hpp"
#include "test_support.hpp"

using namespace stitchviz;
namespace t = stitchviz::testing;

namespace {

struct Fixtures {
  std::shared_ptr<ModelRegistry> reg = std::make_shared<ModelRegistry>();
  Fixtures() {
    reg->add(build_encoder("enc", ArchitectureSpec::resnet_small_default(64, 1)));
    reg->add(build_encoder("enc_test", ArchitectureSpec::resnet_small_default(64, 2)));
    reg->add(build_generator("gen", ArchitectureSpec::gan_upsampler_default(64, 3)));
  }
  EvalProtocol proto(const std::string& layer = "stage2") const {
    return make_protocol(*reg, "enc", layer, "enc_test");
  }
  std::shared_ptr<const GeneratorAdapter> gen() const { return reg->generator("gen"); }
  std::shared_ptr<const EncoderAdapter> enc() const { return reg->encoder("enc"); }
};

const Fixtures& fx() {
  static Fixtures f;
  return f;
}

StitchLayer stitch_for(const std::string& layer_x, const std::string& layer_y, uint64_t seed = 0) {
  return StitchLayer::initialize(fx().enc()->layer(layer_x), fx().gen()->layer(layer_y), true, seed);
}

MetricRecord rec(size_t id, const std::string& method, const std::string& metric, double v) {
  return MetricRecord{id, method, "stage2", metric, v};
}

}  // namespace

TEST(Protocol, RejectsSameNetworkAndUnknownLayers) {
  EXPECT_THROW(make_protocol(*fx().reg, "enc", "stage2", "enc"), ValidationError);
  EXPECT_THROW(make_protocol(*fx().reg, "enc", "stage7", "enc_test"), NotFoundError);
  EXPECT_THROW(make_protocol(*fx().reg, "enc", "stage2", "missing"), NotFoundError);
  auto p = fx().proto();
  EXPECT_EQ(p.test_layer, "stage2");
  EXPECT_EQ(p.to_json().at("test"), "enc_test");
}

TEST(Evaluate, PerfectInversionScoresOneAndZero) {
  auto p = fx().proto();
  ImageTensor x(t::random_unit_image(64, 64, 1));
  auto m = evaluate_inversion(p, x, x);
  EXPECT_NEAR(m.at("cosine"), 1.0, 1e-6);
  EXPECT_NEAR(m.at("gram_cosine"), 1.0, 1e-6);
  EXPECT_EQ(m.at("l1"), 0.0);
  auto other = evaluate_inversion(p, x, ImageTensor(t::random_unit_image(64, 64, 2)));
  EXPECT_LT(other.at("cosine"), 1.0 - 1e-4);
  EXPECT_GT(other.at("l1"), 0.0);
}

TEST(Evaluate, ResizesToTestResolution) {
  auto p = fx().proto();
  ImageTensor x(t::random_unit_image(64, 64, 1));
  ImageTensor big(t::random_unit_image(128, 128, 3));
  EXPECT_NO_THROW(evaluate_inversion(p, x, big));
}

TEST(Report, AggregatesRecomputeFromRecords) {
  MetricReport r;
  const std::vector<double> a{0.1, 0.4, 0.7, 0.2}, b{2.0, 2.0, 5.0, 1.0};
  for (size_t i = 0; i < a.size(); ++i) {
    r.records.push_back(rec(i, "gan", "cosine", a[i]));
    r.records.push_back(rec(i, "gan", "l1", b[i]));
  }
  r.records.push_back(rec(0, "plain", "cosine", 0.9));
  const auto aggs = r.aggregates();
  ASSERT_EQ(aggs.size(), 3u);
  EXPECT_EQ(aggs[0].metric, "cosine");
  EXPECT_EQ(aggs[1].metric, "l1");
  EXPECT_EQ(aggs[2].method, "plain");
  EXPECT_EQ(aggs[0].count, 4u);
  EXPECT_DOUBLE_EQ(aggs[0].mean, (0.1 + 0.4 + 0.7 + 0.2) / 4);
  const double m = aggs[0].mean;
  const double var = ((0.1 - m) * (0.1 - m) + (0.4 - m) * (0.4 - m) + (0.7 - m) * (0.7 - m) + (0.2 - m) * (0.2 - m)) / 4;
  EXPECT_DOUBLE_EQ(aggs[0].std, std::sqrt(var));
  EXPECT_DOUBLE_EQ(aggs[1].mean, 2.5);
  EXPECT_DOUBLE_EQ(aggs[1].std, 1.5);
  EXPECT_EQ(aggs[2].std, 0.0);
}

TEST(Report, JsonRoundTripAndCsv) {
  MetricReport r;
  r.run_id = "x";
  r.records = {rec(0, "gan", "cosine", 0.123456789012345), rec(1, "gan", "cosine", 0.5)};
  r.timings = {TimingRecord{"gan", "stage2", 2, 20, 0.01}};
  const auto j = r.to_json();
  EXPECT_EQ(j.at("aggregates").size(), 1u);
  auto back = MetricReport::from_json(j);
  EXPECT_EQ(back.records, r.records);
  EXPECT_EQ(back.timings.size(), 1u);
  EXPECT_THROW(MetricReport::from_json(json{{"schema", "other"}}), FormatError);
  const auto csv = r.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("0.123456789012345"), std::string::npos);
  const auto table = r.render_table();
  EXPECT_NE(table.find("Layer"), std::string::npos);
  EXPECT_NE(table.find("0.3117 +- 0.1883"), std::string::npos);
}

TEST(Benchmark, RowCountsTimingsAndDeterminism) {
  auto p = fx().proto();
  SyntheticTextureDataset ds(5, 4, 64);
  auto s = stitch_for("stage2", "b8.conv0");
  GdConfig gd;
  gd.steps = 3;
  std::vector<MethodRunner> methods{
      gan_method(fx().enc(), p.layer_x, s, fx().gen(), s.target, 7, 3),
      gd_method(fx().enc(), p.layer_x, gd),
  };
  auto r = run_benchmark(p, ds, methods);
  EXPECT_EQ(r.records.size(), 2u * 4u * 3u);
  ASSERT_EQ(r.timings.size(), 2u);
  EXPECT_EQ(r.timings[0].passes, 3);
  EXPECT_EQ(r.timings[1].passes, 1);
  EXPECT_EQ(r.timings[0].samples, 4u);
  for (const auto& a : r.aggregates()) EXPECT_EQ(a.count, 4u);

  auto again = run_benchmark(p, ds, methods);
  EXPECT_EQ(again.records, r.records);
  EXPECT_EQ(without_timing(again.to_json()), without_timing(r.to_json()));
}

TEST(Correspondence, Table3MappingOn512Generator) {
  auto g = build_generator("g512", ArchitectureSpec::gan_upsampler_default(512, 0));
  LayerAddress stage3{"enc", "stage3", LayerRole::encoder_layer, 4};
  const std::map<int, std::string> expected{
      {2, "b128.conv0"}, {1, "b64.conv0"}, {0, "b32.conv0"}, {-1, "b16.conv0"}, {-2, "b8.conv0"}};
  for (const auto& [delta, name] : expected) {
    auto a = layer_correspondence(stage3, *g, delta);
    EXPECT_EQ(a.layer_name, name) << delta;
    EXPECT_EQ(g->layer(name).height, std::stoi(name.substr(1)));
  }
  EXPECT_THROW(layer_correspondence(stage3, *g, 5), NotFoundError);
}

TEST(Correspondence, MatchesDistanceOnSyntheticTable) {
  std::vector<LayerInfo> table;
  for (int d = 0; d < 6; ++d) table.push_back(LayerInfo{LayerAddress{"g", "l" + std::to_string(d), LayerRole::generator_layer, d}});
  LayerAddress x{"e", "x", LayerRole::encoder_layer, 3};
  for (int delta = -2; delta <= 3; ++delta) {
    EXPECT_EQ(layer_correspondence(x, table, delta).sampling_distance, 3 - delta);
  }
  EXPECT_THROW(layer_correspondence(x, table, -3), NotFoundError);
}

TEST(Sweep, RelativeIsOneAtZeroAndRatioElsewhere) {
  std::map<int, std::pair<LayerInfo, std::vector<Aggregate>>> per;
  auto li = [](const std::string& n, int64_t r) { return LayerInfo{LayerAddress{"g", n, LayerRole::generator_layer, 0}, 8, r, r}; };
  per[0] = {li("b8", 8), {Aggregate{"gan", "stage2", "cosine", 3, 0.4, 0.1}}};
  per[1] = {li("b16", 16), {Aggregate{"gan", "stage2", "cosine", 3, 0.3, 0.1}}};
  per[-1] = {li("b4", 4), {Aggregate{"gan", "stage2", "cosine", 3, 0.5, 0.1}}};
  auto s = make_sweep_result("stage2", per);
  ASSERT_EQ(s.rows.size(), 3u);
  for (const auto& r : s.rows) {
    if (r.delta == 0) EXPECT_EQ(r.relative, 1.0);
    if (r.delta == 1) EXPECT_DOUBLE_EQ(r.relative, 0.3 / 0.4);
    if (r.delta == -1) EXPECT_DOUBLE_EQ(r.relative, 0.5 / 0.4);
  }
  EXPECT_EQ(s.plot_data().at("cosine").size(), 3u);
  per.erase(0);
  EXPECT_THROW(make_sweep_result("stage2", per), ValidationError);
}

TEST(Sweep, EndToEndOnFixtures) {
  auto p = fx().proto();
  SyntheticTextureDataset ds(6, 3, 64);
  std::map<int, StitchLayer> stitches;
  for (int delta : {-1, 0, 1}) {
    auto target = layer_correspondence(p.layer_x, *fx().gen(), delta);
    stitches[delta] = stitch_for("stage2", target.layer_name, static_cast<uint64_t>(delta + 10));
  }
  auto s = end_layer_sweep(p, *fx().gen(), stitches, ds, 0);
  EXPECT_EQ(s.rows.size(), 3u * 3u);
  for (const auto& r : s.rows) {
    if (r.delta == 0) EXPECT_EQ(r.relative, 1.0);
  }
  stitches.erase(0);
  EXPECT_THROW(end_layer_sweep(p, *fx().gen(), stitches, ds, 0), NotFoundError);
}

TEST(SelectExtreme, BestWorstAndTies) {
  MetricReport r;
  const std::vector<double> cos{0.5, 0.9, 0.1, 0.9, 0.3};
  for (size_t i = 0; i < cos.size(); ++i) {
    r.records.push_back(rec(i, "gan", "cosine", cos[i]));
    r.records.push_back(rec(i, "gan", "l1", cos[i]));
  }
  EXPECT_EQ(select_extreme_samples(r, "gan", "stage2", "cosine", 3, SelectMode::best), (std::vector<size_t>{1, 3, 0}));
  EXPECT_EQ(select_extreme_samples(r, "gan", "stage2", "cosine", 2, SelectMode::worst), (std::vector<size_t>{2, 4}));
  EXPECT_EQ(select_extreme_samples(r, "gan", "stage2", "l1", 2, SelectMode::best), (std::vector<size_t>{2, 4}));
  EXPECT_EQ(select_extreme_samples(r, "gan", "stage2", "l1", 2, SelectMode::worst), (std::vector<size_t>{1, 3}));
  EXPECT_THROW(select_extreme_samples(r, "plain", "stage2", "cosine", 1, SelectMode::best), NotFoundError);
  EXPECT_THROW(select_extreme_samples(r, "gan", "stage2", "cosine", 6, SelectMode::best), ValidationError);
  EXPECT_THROW(select_mode_from_string("median"), ValidationError);
}

TEST(Variations, ThirtyOneSeedsDistinctAndDeterministic) {
  auto s = stitch_for("stage2", "b8.conv0");
  ImageTensor img(t::random_unit_image(64, 64, 8));
  std::vector<uint64_t> seeds(31);
  std::iota(seeds.begin(), seeds.end(), 100);
  const auto before = fx().enc()->forward_count();
  auto out = seed_variations(*fx().enc(), s.source, s, *fx().gen(), s.target, img, seeds);
  EXPECT_EQ(fx().enc()->forward_count() - before, 1u);
  ASSERT_EQ(out.size(), 31u);
  for (size_t i = 1; i < out.size(); ++i) EXPECT_FALSE(torch::equal(out[i].data(), out[0].data()));

  std::vector<uint64_t> dup{5, 5, 6};
  auto d = seed_variations(*fx().enc(), s.source, s, *fx().gen(), s.target, img, dup);
  EXPECT_TRUE(torch::equal(d[0].data(), d[1].data()));
  EXPECT_FALSE(torch::equal(d[0].data(), d[2].data()));
  auto single = invert_via_gan(*fx().enc(), s.source, s, *fx().gen(), s.target, img, 5);
  EXPECT_TRUE(torch::equal(d[0].data(), single.image.data()));
  EXPECT_THROW(seed_variations(*fx().enc(), s.source, s, *fx().gen(), s.target, img, {}), ValidationError);
}

TEST(WithoutTiming, DropsNestedTimingFields) {
  json j{{"run_id", "a"}, {"x", 1}, {"nested", {{"wall_time_s", 2.0}, {"y", 3}}}, {"timings", json::array()},
         {"list", json::array({json{{"wall_time_ms", 4}, {"z", 5}}})}};
  EXPECT_EQ(without_timing(j), (json{{"x", 1}, {"nested", {{"y", 3}}}, {"list", json::array({json{{"z", 5}}})}}));
}
