#include "stitchviz/stitch.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "stitchviz/image_io.hpp"
#include "stitchviz/metrics.hpp"

namespace stitchviz {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool same_layer(const LayerAddress& a, const LayerAddress& b) {
  return a.model_id == b.model_id && a.layer_name == b.layer_name;
}

void check_pair(const StitchLayer& s, const LayerAddress& layer_x, const LayerAddress& layer_y) {
  if (!same_layer(s.source, layer_x)) {
    throw ValidationError("stitch source " + s.source.str() + " does not match " + layer_x.str());
  }
  if (!same_layer(s.target, layer_y)) {
    throw ValidationError("stitch target " + s.target.str() + " does not match " + layer_y.str());
  }
}

uint64_t train_sample_seed(uint64_t run_seed, uint64_t counter) {
  return derive_seed(derive_seed(run_seed, 0x7a11), counter);
}

uint64_t val_sample_seed(uint64_t val_seed, uint64_t index) { return derive_seed(val_seed, index); }

}  // namespace

void StitchTrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
}

void to_json(json& j, const StitchTrainingConfig& c) {
  j = json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
           {"bias", c.bias},  {"seed", c.seed},   {"validation_seed", c.validation_seed},
           {"optimizer", "adam"}, {"loss", "l1_layerx"}};
}

void from_json(const json& j, StitchTrainingConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.bias = j.value("bias", c.bias);
  c.seed = j.value("seed", c.seed);
  c.validation_seed = j.value("validation_seed", c.validation_seed);
}

void to_json(json& j, const EpochRecord& r) {
  j = json{{"epoch", r.epoch},
           {"train_loss", r.train_loss},
           {"val_l1_layerx", r.val_l1_layerx},
           {"val_cosine", r.val_cosine},
           {"val_gram_cosine", r.val_gram_cosine},
           {"val_l1_test", r.val_l1_test}};
}

void from_json(const json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_l1_layerx = j.at("val_l1_layerx").get<double>();
  r.val_cosine = j.at("val_cosine").get<double>();
  r.val_gram_cosine = j.at("val_gram_cosine").get<double>();
  r.val_l1_test = j.at("val_l1_test").get<double>();
}

void StitchLayer::validate() const {
  if (!weight.defined() || weight.dim() != 2) throw ShapeError("stitch weight must be 2-D");
  if (weight.scalar_type() != torch::kFloat32) throw ValidationError("stitch weight must be float32");
  if (!torch::isfinite(weight).all().item<bool>()) throw ValidationError("stitch weight has non-finite entries");
  if (bias.defined()) {
    if (bias.dim() != 1 || bias.size(0) != weight.size(0)) throw ShapeError("stitch bias must be (C_target)");
    if (!torch::isfinite(bias).all().item<bool>()) throw ValidationError("stitch bias has non-finite entries");
  }
  if (source.role != LayerRole::encoder_layer || target.role != LayerRole::generator_layer) {
    throw ValidationError("stitch must map an encoder layer to a generator layer");
  }
}

StitchLayer StitchLayer::initialize(const LayerInfo& source, const LayerInfo& target, bool bias, uint64_t seed) {
  auto gen = make_generator(derive_seed(seed, 0x517c));
  StitchLayer s;
  s.weight = torch::randn({target.channels, source.channels}, gen, torch::kFloat32) /
             std::sqrt(static_cast<double>(source.channels));
  if (bias) s.bias = torch::zeros({target.channels}, torch::kFloat32);
  s.source = source.address;
  s.target = target.address;
  return s;
}

StitchLayer StitchLayer::identity(const LayerInfo& source, const LayerInfo& target, bool bias) {
  if (source.channels != target.channels) throw ShapeError("identity stitch needs equal channel counts");
  StitchLayer s;
  s.weight = torch::eye(source.channels, torch::kFloat32);
  if (bias) s.bias = torch::zeros({target.channels}, torch::kFloat32);
  s.source = source.address;
  s.target = target.address;
  return s;
}

torch::Tensor apply_stitch(const torch::Tensor& weight, const torch::Tensor& bias, const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != weight.size(1)) {
    throw ShapeError("stitch expects (N, " + std::to_string(weight.size(1)) + ", H, W), got " + c10::str(x.sizes()));
  }
  auto w = weight.view({weight.size(0), weight.size(1), 1, 1});
  return bias.defined() ? torch::conv2d(x, w, bias) : torch::conv2d(x, w);
}

ActivationTensor apply_stitch(const StitchLayer& s, const ActivationTensor& a) {
  if (!same_layer(a.source(), s.source)) {
    throw ValidationError("activation from " + a.source().str() + " fed to stitch for " + s.source.str());
  }
  if (a.channels() != s.source_channels()) {
    throw ShapeError("stitch expects " + std::to_string(s.source_channels()) + " channels, got " +
                     std::to_string(a.channels()));
  }
  torch::NoGradGuard guard;
  auto out = apply_stitch(s.weight, s.bias, a.data().unsqueeze(0)).squeeze(0);
  return ActivationTensor(out, s.target);
}

torch::Tensor to_encoder_resolution(const torch::Tensor& unit_batch, const EncoderAdapter& enc) {
  const auto r = enc.spec().resolution;
  return bilinear_resize(unit_batch, r, r);
}

torch::Tensor stitch_pipeline(const EncoderAdapter& enc, std::string_view layer_x, const torch::Tensor& weight,
                              const torch::Tensor& bias, const GeneratorAdapter& gen, std::string_view layer_y,
                              const torch::Tensor& unit_batch, std::span<const uint64_t> seeds) {
  const auto& target = gen.layer(layer_y);
  auto a = enc.forward_unit(unit_batch, layer_x);
  auto s = apply_stitch(weight, bias, a);
  s = nearest_resize(s, target.height, target.width);
  return gen.synthesize_unit(seeds, layer_y, s);
}

ImageTensor invert_from_activations(const StitchLayer& s, const ActivationTensor& a, const GeneratorAdapter& gen,
                                    const LayerAddress& layer_y, uint64_t seed) {
  if (!same_layer(s.target, layer_y)) {
    throw ValidationError("stitch target " + s.target.str() + " does not match " + layer_y.str());
  }
  const auto& info = gen.layer(layer_y.layer_name);
  auto mapped = nearest_resize(apply_stitch(s, a), info.height, info.width);
  return gen.generate_with_injection(seed, info.address, mapped);
}

InversionResult invert_via_gan(const EncoderAdapter& enc, const LayerAddress& layer_x, const StitchLayer& s,
                               const GeneratorAdapter& gen, const LayerAddress& layer_y, const ImageTensor& img,
                               uint64_t seed) {
  check_pair(s, layer_x, layer_y);
  const auto enc0 = enc.forward_count();
  const auto gen0 = gen.forward_count();
  const auto t0 = Clock::now();
  auto a = enc.extract_activations(layer_x, img);
  auto out = invert_from_activations(s, a, gen, layer_y, seed);
  const double wall = seconds_since(t0);
  InversionResult r{.image = std::move(out), .method = "gan", .wall_time_s = wall, .seed = seed};
  r.encoder_forwards = enc.forward_count() - enc0;
  r.generator_forwards = gen.forward_count() - gen0;
  return r;
}

EpochRecord validate_stitch(const EncoderAdapter& enc, const LayerAddress& layer_x, const StitchLayer& s,
                            const GeneratorAdapter& gen, const LayerAddress& layer_y, const StitchValidation& val,
                            const StitchTrainingConfig& cfg) {
  if (val.dataset == nullptr || val.dataset->size() == 0) throw ValidationError("empty validation set");
  const EncoderAdapter& test = val.test_encoder ? *val.test_encoder : enc;
  const std::string test_layer = val.test_layer.empty() ? layer_x.layer_name : val.test_layer;
  torch::NoGradGuard guard;
  const size_t n = val.dataset->size();
  const auto bs = static_cast<size_t>(cfg.batch_size);
  double l1x = 0, cos = 0, gram = 0, l1t = 0;
  for (size_t start = 0; start < n; start += bs) {
    const size_t end = std::min(n, start + bs);
    std::vector<size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    std::vector<uint64_t> seeds;
    for (size_t i : idx) seeds.push_back(val_sample_seed(cfg.validation_seed, i));
    const auto x = load_batch(*val.dataset, idx, enc.spec().resolution);
    const auto recon = stitch_pipeline(enc, layer_x.layer_name, s.weight, s.bias, gen, layer_y.layer_name, x, seeds)
                           .clamp(0.0, 1.0);
    const auto ax = enc.forward_unit(x, layer_x.layer_name);
    const auto rx = enc.forward_unit(to_encoder_resolution(recon, enc), layer_x.layer_name);
    const auto xt = bilinear_resize(x, test.spec().resolution, test.spec().resolution);
    const auto at = test.forward_unit(xt, test_layer);
    const auto rt = test.forward_unit(to_encoder_resolution(recon, test), test_layer);
    for (size_t k = 0; k < idx.size(); ++k) {
      const auto i = static_cast<int64_t>(k);
      l1x += metrics::l1_mean(rx[i], ax[i]);
      cos += metrics::cosine_similarity_pixelwise(rt[i], at[i]);
      gram += metrics::gram_cosine(rt[i], at[i]);
      l1t += metrics::l1_mean(rt[i], at[i]);
    }
  }
  const auto dn = static_cast<double>(n);
  EpochRecord rec;
  rec.val_l1_layerx = l1x / dn;
  rec.val_cosine = cos / dn;
  rec.val_gram_cosine = gram / dn;
  rec.val_l1_test = l1t / dn;
  return rec;
}

size_t select_best_epoch(const std::vector<EpochRecord>& history) {
  if (history.empty()) throw ValidationError("empty training history");
  size_t best = 0;
  for (size_t i = 1; i < history.size(); ++i) {
    if (history[i].val_cosine > history[best].val_cosine) best = i;
  }
  return best;
}

TrainingOutcome train_stitch(const EncoderAdapter& enc, const LayerAddress& layer_x, const GeneratorAdapter& gen,
                             const LayerAddress& layer_y, const ImageDataset& train, const StitchTrainingConfig& cfg,
                             const StitchValidation& val,
                             const std::function<void(const TrainingProgress&)>& on_step) {
  cfg.validate();
  if (train.size() == 0) throw ValidationError("empty training set");
  const auto t0 = Clock::now();
  const auto& src = enc.layer(layer_x.layer_name);
  const auto& dst = gen.layer(layer_y.layer_name);
  if (src.address.model_id != layer_x.model_id || dst.address.model_id != layer_y.model_id) {
    throw NotFoundError("layer does not belong to the given model");
  }

  StitchLayer s = StitchLayer::initialize(src, dst, cfg.bias, cfg.seed);
  s.training_config = cfg;
  s.training_config["train_dataset"] = train.id();
  s.training_config["val_dataset"] = val.dataset ? val.dataset->id() : "";
  s.training_config["test_encoder"] = val.test_encoder ? val.test_encoder->model_id() : enc.model_id();
  s.training_config["test_layer"] = val.test_layer.empty() ? layer_x.layer_name : val.test_layer;
  s.config_hash = hash_json(json{{"config", s.training_config}, {"source", s.source}, {"target", s.target}});

  std::vector<EpochRecord> history;
  history.push_back(validate_stitch(enc, layer_x, s, gen, layer_y, val, cfg));
  std::vector<std::pair<torch::Tensor, torch::Tensor>> snapshots;
  snapshots.emplace_back(s.weight.clone(), s.bias.defined() ? s.bias.clone() : torch::Tensor());

  auto weight = s.weight.clone().set_requires_grad(true);
  torch::Tensor bias;
  std::vector<torch::Tensor> params{weight};
  if (s.has_bias()) {
    bias = s.bias.clone().set_requires_grad(true);
    params.push_back(bias);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.learning_rate));

  const size_t n = train.size();
  const auto bs = static_cast<size_t>(cfg.batch_size);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  uint64_t sample_counter = 0;
  int64_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x5eed0000ULL + static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    size_t loss_count = 0;
    for (size_t start = 0; start < n; start += bs) {
      const size_t end = std::min(n, start + bs);
      std::span<const size_t> idx(order.data() + start, end - start);
      std::vector<uint64_t> seeds;
      for (size_t k = 0; k < idx.size(); ++k) seeds.push_back(train_sample_seed(cfg.seed, sample_counter++));
      const auto x = load_batch(train, idx, enc.spec().resolution);
      torch::Tensor target;
      {
        torch::NoGradGuard guard;
        target = enc.forward_unit(x, layer_x.layer_name);
      }
      auto recon = stitch_pipeline(enc, layer_x.layer_name, weight, bias, gen, layer_y.layer_name, x, seeds);
      auto pred = enc.forward_unit(to_encoder_resolution(recon, enc), layer_x.layer_name);
      auto loss = (pred - target).abs().mean();
      const double lv = loss.item<double>();
      if (!std::isfinite(lv)) {
        throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                    " (weight norm " + std::to_string(weight.norm().item<double>()) + ")");
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += lv * static_cast<double>(idx.size());
      loss_count += idx.size();
      ++step;
      if (on_step) on_step(TrainingProgress{epoch, step, lv});
    }
    StitchLayer current = s;
    current.weight = weight.detach().clone();
    if (bias.defined()) current.bias = bias.detach().clone();
    auto rec = validate_stitch(enc, layer_x, current, gen, layer_y, val, cfg);
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    history.push_back(rec);
    snapshots.emplace_back(current.weight, current.bias);
  }

  const size_t best = select_best_epoch(history);
  s.weight = snapshots[best].first;
  s.bias = snapshots[best].second;
  s.best_epoch = history[best].epoch;
  s.trained_samples = static_cast<int64_t>(n) * s.best_epoch;
  s.history = history;
  s.validate();
  return TrainingOutcome{std::move(s), std::move(history), seconds_since(t0)};
}

std::filesystem::path stitch_manifest_path(const std::filesystem::path& path) {
  auto p = path;
  if (p.extension() == ".bin" || p.extension() == ".json") p.replace_extension();
  return p.string() + ".json";
}

std::filesystem::path stitch_blob_path(const std::filesystem::path& path) {
  auto p = path;
  if (p.extension() == ".bin" || p.extension() == ".json") p.replace_extension();
  return p.string() + ".bin";
}

namespace {

std::string to_le_bytes(const torch::Tensor& t) {
  auto c = t.contiguous().to(torch::kFloat32);
  std::string out(static_cast<size_t>(c.numel()) * 4, '\0');
  const auto* src = c.data_ptr<float>();
  for (int64_t i = 0; i < c.numel(); ++i) {
    auto bits = std::bit_cast<uint32_t>(src[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(out.data() + i * 4, &bits, 4);
  }
  return out;
}

torch::Tensor from_le_bytes(std::string_view bytes, int64_t offset_floats, std::vector<int64_t> shape) {
  const int64_t n = std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
  auto t = torch::empty(shape, torch::kFloat32);
  auto* dst = t.data_ptr<float>();
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits;
    std::memcpy(&bits, bytes.data() + (offset_floats + i) * 4, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    dst[i] = std::bit_cast<float>(bits);
  }
  return t;
}

}  // namespace

void save_stitch(const StitchLayer& s, const std::filesystem::path& path) {
  s.validate();
  std::string blob = to_le_bytes(s.weight);
  if (s.has_bias()) blob += to_le_bytes(s.bias);
  const auto blob_path = stitch_blob_path(path);
  json m{{"format", "stitchviz-stitch"},
         {"version", kStitchFormatVersion},
         {"source", s.source},
         {"target", s.target},
         {"source_channels", s.source_channels()},
         {"target_channels", s.target_channels()},
         {"bias", s.has_bias()},
         {"dtype", "float32-le"},
         {"blob", blob_path.filename().string()},
         {"blob_bytes", blob.size()},
         {"blob_hash", fnv1a_hex(blob)},
         {"training_config", s.training_config},
         {"config_hash", s.config_hash},
         {"trained_samples", s.trained_samples},
         {"best_epoch", s.best_epoch},
         {"history", s.history},
         {"registry_hash", s.registry_hash}};
  io::write_file(blob_path, blob);
  io::write_file(stitch_manifest_path(path), m.dump(2) + "\n");
}

LoadedStitch load_stitch(const std::filesystem::path& path, const ModelRegistry* registry) {
  const auto manifest_path = stitch_manifest_path(path);
  json m;
  try {
    m = json::parse(io::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError("corrupt stitch manifest " + manifest_path.string() + ": " + e.what());
  }
  LoadedStitch out;
  StitchLayer& s = out.stitch;
  try {
    if (m.value("format", "") != "stitchviz-stitch") throw FormatError("not a stitch manifest");
    if (m.at("version").get<int>() != kStitchFormatVersion) {
      throw FormatError("unsupported stitch version " + m.at("version").dump());
    }
    s.source = m.at("source").get<LayerAddress>();
    s.target = m.at("target").get<LayerAddress>();
    const auto cs = m.at("source_channels").get<int64_t>();
    const auto ct = m.at("target_channels").get<int64_t>();
    const bool bias = m.at("bias").get<bool>();
    const auto blob = io::read_file(manifest_path.parent_path() / m.at("blob").get<std::string>());
    const auto expected = static_cast<size_t>((ct * cs + (bias ? ct : 0)) * 4);
    if (blob.size() != expected || blob.size() != m.at("blob_bytes").get<size_t>()) {
      throw FormatError("stitch blob has " + std::to_string(blob.size()) + " bytes, expected " +
                        std::to_string(expected));
    }
    if (fnv1a_hex(blob) != m.at("blob_hash").get<std::string>()) throw FormatError("stitch blob checksum mismatch");
    s.weight = from_le_bytes(blob, 0, {ct, cs});
    if (bias) s.bias = from_le_bytes(blob, ct * cs, {ct});
    s.training_config = m.value("training_config", json::object());
    s.config_hash = m.value("config_hash", "");
    s.trained_samples = m.value("trained_samples", int64_t{0});
    s.best_epoch = m.value("best_epoch", 0);
    s.history = m.value("history", std::vector<EpochRecord>{});
    s.registry_hash = m.value("registry_hash", "");
  } catch (const json::exception& e) {
    throw FormatError("malformed stitch manifest " + manifest_path.string() + ": " + e.what());
  }
  s.validate();
  if (registry != nullptr) {
    const auto src = registry->encoder(s.source.model_id)->layer(s.source.layer_name);
    const auto dst = registry->generator(s.target.model_id)->layer(s.target.layer_name);
    if (src.channels != s.source_channels() || dst.channels != s.target_channels()) {
      throw ShapeError("stitch channels " + std::to_string(s.source_channels()) + "->" +
                       std::to_string(s.target_channels()) + " do not match registry layers " +
                       std::to_string(src.channels) + "->" + std::to_string(dst.channels));
    }
    if (!s.registry_hash.empty() && s.registry_hash != registry->hash()) {
      out.warnings.push_back("stitch was trained against registry " + s.registry_hash + ", current is " +
                             registry->hash());
    }
  }
  return out;
}

}  // namespace stitchviz
