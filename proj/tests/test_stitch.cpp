#include <gtest/gtest.h>

#include <fstream>

#include "stitchviz/image_io.hpp"
#include "stitchviz/stitch.hpp"
#include "test_support.hpp"

using namespace stitchviz;
namespace t = stitchviz::testing;

namespace {

struct Fixtures {
  std::shared_ptr<EncoderAdapter> enc = build_encoder("enc", ArchitectureSpec::resnet_small_default(64, 1));
  std::shared_ptr<EncoderAdapter> test = build_encoder("enc_test", ArchitectureSpec::resnet_small_default(64, 2));
  std::shared_ptr<GeneratorAdapter> gen = build_generator("gen", ArchitectureSpec::gan_upsampler_default(64, 3));
};

const Fixtures& fx() {
  static Fixtures f;
  return f;
}

LayerInfo fake_source(int64_t channels, int64_t hw) {
  return LayerInfo{LayerAddress{"enc", "fake", LayerRole::encoder_layer, 3}, channels, hw, hw};
}

torch::Tensor rnd(std::vector<int64_t> shape, uint64_t seed) {
  auto g = make_generator(seed);
  return torch::randn(shape, g, torch::kFloat32);
}

StitchLayer small_stitch(bool bias, uint64_t seed) {
  const auto& src = fx().enc->layer("stage2");
  const auto& dst = fx().gen->layer("b8.conv0");
  auto s = StitchLayer::initialize(src, dst, bias, seed);
  if (bias) s.bias = rnd({dst.channels}, seed + 1);
  return s;
}

}  // namespace

TEST(ApplyStitch, IdentityAndScaledIdentity) {
  const auto& dst = fx().gen->layer("b8.conv0");
  const auto src = fake_source(dst.channels, 8);
  auto s = StitchLayer::identity(src, dst);
  ActivationTensor a(rnd({dst.channels, 8, 8}, 0), src.address);
  EXPECT_TRUE(torch::equal(apply_stitch(s, a).data(), a.data()));
  s.weight = s.weight * 2.5f;
  EXPECT_TRUE(torch::allclose(apply_stitch(s, a).data(), a.data() * 2.5f, 1e-6, 1e-6));
  EXPECT_EQ(apply_stitch(s, a).source(), dst.address);
}

TEST(ApplyStitch, MatchesLoopOracle) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto s = small_stitch(true, seed);
    const auto& src = fx().enc->layer("stage2");
    ActivationTensor a(rnd({src.channels, 3, 4}, 100 + seed), src.address);
    const auto out = t::Grid3(apply_stitch(s, a).data());
    const t::Grid3 in(a.data());
    const auto w = s.weight.to(torch::kFloat64).contiguous();
    const auto b = s.bias.to(torch::kFloat64).contiguous();
    for (int64_t o = 0; o < s.target_channels(); ++o) {
      for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 4; ++j) {
          double acc = b[o].item<double>();
          for (int64_t c = 0; c < s.source_channels(); ++c) acc += w[o][c].item<double>() * in(c, i, j);
          EXPECT_NEAR(out(o, i, j), acc, 1e-5);
        }
      }
    }
  }
}

TEST(ApplyStitch, LinearWithoutBias) {
  auto s = small_stitch(false, 7);
  const auto& src = fx().enc->layer("stage2");
  auto x = rnd({src.channels, 4, 4}, 1), y = rnd({src.channels, 4, 4}, 2);
  const float alpha = 0.7f, beta = -1.3f;
  auto lhs = apply_stitch(s, ActivationTensor(alpha * x + beta * y, src.address)).data();
  auto rhs = alpha * apply_stitch(s, ActivationTensor(x, src.address)).data() +
             beta * apply_stitch(s, ActivationTensor(y, src.address)).data();
  EXPECT_TRUE(torch::allclose(lhs, rhs, 1e-5, 1e-5));
}

TEST(ApplyStitch, RejectsWrongSourceAndChannels) {
  auto s = small_stitch(true, 0);
  const auto& src = fx().enc->layer("stage2");
  EXPECT_THROW(apply_stitch(s, ActivationTensor(rnd({src.channels + 1, 2, 2}, 0), src.address)), ShapeError);
  EXPECT_THROW(apply_stitch(s, ActivationTensor(rnd({src.channels, 2, 2}, 0), fx().enc->layer("stage3").address)),
               ValidationError);
  EXPECT_THROW(StitchLayer::identity(src, fx().gen->layer("b8.conv0")), ShapeError);
}

TEST(Pipeline, IdentityStitchOnCapturedInputIsPassthrough) {
  for (const auto& dst : fx().gen->layers()) {
    const auto src = fake_source(dst.channels, dst.height);
    auto s = StitchLayer::identity(src, dst);
    for (uint64_t seed : {0ULL, 11ULL}) {
      auto captured = fx().gen->capture_layer_input(seed, dst.address);
      ActivationTensor a(captured.data(), src.address);
      auto out = invert_from_activations(s, a, *fx().gen, dst.address, seed);
      EXPECT_TRUE(torch::equal(out.data(), fx().gen->generate(seed).data())) << dst.address.str();
    }
  }
}

TEST(Pipeline, GanInversionCountsOneForwardEach) {
  auto s = small_stitch(true, 0);
  ImageTensor img(t::random_unit_image(64, 64, 5));
  auto r = invert_via_gan(*fx().enc, s.source, s, *fx().gen, s.target, img, 9);
  EXPECT_EQ(r.encoder_forwards, 1u);
  EXPECT_EQ(r.generator_forwards, 1u);
  EXPECT_EQ(r.backward_passes, 0u);
  EXPECT_EQ(r.method, "gan");
  EXPECT_EQ(r.status, InversionStatus::completed);
  auto again = invert_via_gan(*fx().enc, s.source, s, *fx().gen, s.target, img, 9);
  EXPECT_TRUE(torch::equal(r.image.data(), again.image.data()));
  auto other = invert_via_gan(*fx().enc, s.source, s, *fx().gen, s.target, img, 10);
  EXPECT_FALSE(torch::equal(r.image.data(), other.image.data()));
  EXPECT_THROW(invert_via_gan(*fx().enc, fx().enc->layer("stage3").address, s, *fx().gen, s.target, img, 0),
               ValidationError);
}

TEST(Pipeline, BatchedMatchesSingle) {
  auto s = small_stitch(true, 3);
  auto x = torch::stack({t::random_unit_image(64, 64, 1), t::random_unit_image(64, 64, 2)});
  std::vector<uint64_t> seeds{4, 5};
  torch::Tensor batched;
  {
    torch::NoGradGuard g;
    batched = stitch_pipeline(*fx().enc, "stage2", s.weight, s.bias, *fx().gen, "b8.conv0", x, seeds);
  }
  for (int i = 0; i < 2; ++i) {
    auto single = invert_via_gan(*fx().enc, s.source, s, *fx().gen, s.target, ImageTensor(x[i]), seeds[static_cast<size_t>(i)]);
    EXPECT_TRUE(torch::allclose(batched[i], single.image.data(), 1e-5, 1e-5));
  }
}

TEST(SelectBest, ArgmaxEarliestTie) {
  std::vector<EpochRecord> h(4);
  for (int i = 0; i < 4; ++i) h[static_cast<size_t>(i)].epoch = i;
  h[0].val_cosine = 0.5;
  h[1].val_cosine = 0.7;
  h[2].val_cosine = 0.7;
  h[3].val_cosine = 0.6;
  EXPECT_EQ(select_best_epoch(h), 1u);
  h[0].val_cosine = 0.9;
  EXPECT_EQ(select_best_epoch(h), 0u);
  EXPECT_THROW(select_best_epoch({}), ValidationError);
}

TEST(Config, ValidationAndJson) {
  StitchTrainingConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.epochs = 3;
  c.bias = false;
  json j = c;
  auto back = j.get<StitchTrainingConfig>();
  EXPECT_EQ(back.epochs, 3);
  EXPECT_FALSE(back.bias);
}

class TrainStitch : public ::testing::Test {
 protected:
  SyntheticTextureDataset train{11, 32, 64};
  SyntheticTextureDataset val{12, 8, 64};
  StitchValidation validation{&val, fx().test.get(), "stage2"};
  LayerAddress lx = fx().enc->layer("stage2").address;
  LayerAddress ly = fx().gen->layer("b8.conv0").address;

  StitchTrainingConfig cfg(int epochs) const {
    StitchTrainingConfig c;
    c.epochs = epochs;
    c.seed = 5;
    return c;
  }
};

TEST_F(TrainStitch, ZeroEpochsKeepsInitialisation) {
  auto out = train_stitch(*fx().enc, lx, *fx().gen, ly, train, cfg(0), validation);
  ASSERT_EQ(out.history.size(), 1u);
  EXPECT_EQ(out.stitch.best_epoch, 0);
  EXPECT_EQ(out.stitch.trained_samples, 0);
  auto init = StitchLayer::initialize(fx().enc->layer("stage2"), fx().gen->layer("b8.conv0"), true, 5);
  EXPECT_TRUE(torch::equal(out.stitch.weight, init.weight));
  EXPECT_TRUE(torch::equal(out.stitch.bias, init.bias));
}

TEST_F(TrainStitch, FrozenNetworksDeterministicAndImproving) {
  const auto enc_hash = fx().enc->weights_hash();
  const auto gen_hash = fx().gen->weights_hash();
  const auto test_hash = fx().test->weights_hash();
  int64_t steps = 0;
  auto a = train_stitch(*fx().enc, lx, *fx().gen, ly, train, cfg(2), validation,
                        [&](const TrainingProgress&) { ++steps; });
  EXPECT_EQ(steps, 8);
  EXPECT_EQ(fx().enc->weights_hash(), enc_hash);
  EXPECT_EQ(fx().gen->weights_hash(), gen_hash);
  EXPECT_EQ(fx().test->weights_hash(), test_hash);
  for (const auto& p : fx().gen->module()->parameters()) EXPECT_FALSE(p.grad().defined());
  for (const auto& p : fx().enc->module()->parameters()) EXPECT_FALSE(p.grad().defined());

  ASSERT_EQ(a.history.size(), 3u);
  EXPECT_LT(a.history.back().val_l1_layerx, a.history.front().val_l1_layerx);
  EXPECT_EQ(a.stitch.history, a.history);
  EXPECT_EQ(a.stitch.trained_samples, 32 * a.stitch.best_epoch);
  EXPECT_EQ(static_cast<size_t>(a.stitch.best_epoch), select_best_epoch(a.history));

  auto b = train_stitch(*fx().enc, lx, *fx().gen, ly, train, cfg(2), validation);
  EXPECT_TRUE(torch::equal(a.stitch.weight, b.stitch.weight));
  EXPECT_TRUE(torch::equal(a.stitch.bias, b.stitch.bias));
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.stitch.config_hash, b.stitch.config_hash);

  auto c = cfg(2);
  c.seed = 6;
  auto d = train_stitch(*fx().enc, lx, *fx().gen, ly, train, c, validation);
  EXPECT_NE(d.stitch.config_hash, a.stitch.config_hash);
  EXPECT_FALSE(torch::equal(d.stitch.weight, a.stitch.weight));
}

TEST_F(TrainStitch, ValidationRecordIsPure) {
  auto s = small_stitch(true, 1);
  auto r1 = validate_stitch(*fx().enc, lx, s, *fx().gen, ly, validation, cfg(1));
  auto r2 = validate_stitch(*fx().enc, lx, s, *fx().gen, ly, validation, cfg(1));
  EXPECT_EQ(r1, r2);
  EXPECT_GT(r1.val_l1_layerx, 0.0);
  EXPECT_LE(r1.val_cosine, 1.0);
}

class Checkpoint : public ::testing::Test {
 protected:
  void SetUp() override { dir = t::temp_dir("stitch"); }
  void TearDown() override { std::filesystem::remove_all(dir); }
  std::filesystem::path dir;
};

TEST_F(Checkpoint, RoundTripIsBitExact) {
  for (bool bias : {true, false}) {
    auto s = small_stitch(bias, 2);
    s.best_epoch = 3;
    s.trained_samples = 96;
    s.history = {EpochRecord{0, 0, 1.5, 0.2, 0.3, 0.4}, EpochRecord{1, 0.9, 1.1, 0.5, 0.6, 0.3}};
    s.registry_hash = "abc";
    const auto path = dir / (bias ? "with_bias" : "no_bias");
    save_stitch(s, path);
    EXPECT_TRUE(std::filesystem::exists(stitch_manifest_path(path)));
    EXPECT_EQ(std::filesystem::file_size(stitch_blob_path(path)),
              static_cast<uintmax_t>(4 * (s.weight.numel() + (bias ? s.bias.numel() : 0))));
    auto loaded = load_stitch(path).stitch;
    EXPECT_TRUE(torch::equal(loaded.weight, s.weight));
    EXPECT_EQ(loaded.has_bias(), bias);
    if (bias) EXPECT_TRUE(torch::equal(loaded.bias, s.bias));
    EXPECT_EQ(loaded.source, s.source);
    EXPECT_EQ(loaded.target, s.target);
    EXPECT_EQ(loaded.history, s.history);
    EXPECT_EQ(loaded.best_epoch, 3);
    EXPECT_EQ(loaded.trained_samples, 96);
  }
}

TEST_F(Checkpoint, RegistryChecks) {
  ModelRegistry reg;
  reg.add(fx().enc);
  reg.add(fx().gen);
  auto s = small_stitch(true, 0);
  s.registry_hash = reg.hash();
  save_stitch(s, dir / "ok");
  EXPECT_TRUE(load_stitch(dir / "ok", &reg).warnings.empty());

  s.registry_hash = "0000";
  save_stitch(s, dir / "stale");
  EXPECT_EQ(load_stitch(dir / "stale", &reg).warnings.size(), 1u);

  auto bad = s;
  bad.weight = rnd({s.target_channels(), s.source_channels() + 2}, 0);
  bad.bias = torch::zeros({s.target_channels()});
  save_stitch(bad, dir / "wide");
  EXPECT_NO_THROW(load_stitch(dir / "wide"));
  EXPECT_THROW(load_stitch(dir / "wide", &reg), ShapeError);
}

TEST_F(Checkpoint, CorruptionIsFormatError) {
  auto s = small_stitch(true, 0);
  save_stitch(s, dir / "c");
  const auto blob = stitch_blob_path(dir / "c");
  const auto manifest = stitch_manifest_path(dir / "c");

  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  EXPECT_THROW(load_stitch(dir / "c"), FormatError);

  save_stitch(s, dir / "c");
  std::filesystem::resize_file(blob, std::filesystem::file_size(blob) - 4);
  EXPECT_THROW(load_stitch(dir / "c"), FormatError);

  save_stitch(s, dir / "c");
  json m = json::parse(io::read_file(manifest));
  m["version"] = 2;
  std::ofstream(manifest) << m.dump();
  EXPECT_THROW(load_stitch(dir / "c"), FormatError);

  std::ofstream(manifest) << "{not json";
  EXPECT_THROW(load_stitch(dir / "c"), FormatError);
  EXPECT_THROW(load_stitch(dir / "missing"), NotFoundError);
}
