#include "stitchviz/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "stitchviz/image_io.hpp"

namespace stitchviz {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(ArchitectureFamily f) {
  switch (f) {
    case ArchitectureFamily::resnet_small:
      return "resnet_small";
    case ArchitectureFamily::resnet_small_bilinear:
      return "resnet_small_bilinear";
    case ArchitectureFamily::gan_upsampler:
      return "gan_upsampler";
    case ArchitectureFamily::unet_noise_generator:
      return "unet_noise_generator";
    case ArchitectureFamily::identity:
      return "identity";
    case ArchitectureFamily::conv1x1_stride2:
      return "conv1x1_stride2";
  }
  return "unknown";
}

ArchitectureFamily architecture_family_from_string(std::string_view s) {
  for (auto f : {ArchitectureFamily::resnet_small, ArchitectureFamily::resnet_small_bilinear,
                 ArchitectureFamily::gan_upsampler, ArchitectureFamily::unet_noise_generator,
                 ArchitectureFamily::identity, ArchitectureFamily::conv1x1_stride2}) {
    if (to_string(f) == s) return f;
  }
  throw ValidationError("unsupported architecture family: " + std::string(s));
}

namespace {

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_exact(int64_t v) { return std::countr_zero(static_cast<uint64_t>(v)); }

bool is_encoder_family(ArchitectureFamily f) {
  return f == ArchitectureFamily::resnet_small || f == ArchitectureFamily::resnet_small_bilinear ||
         f == ArchitectureFamily::identity || f == ArchitectureFamily::conv1x1_stride2;
}

}  // namespace

ArchitectureSpec ArchitectureSpec::resnet_small_default(int64_t resolution, uint64_t seed) {
  ArchitectureSpec s;
  s.family = ArchitectureFamily::resnet_small;
  s.widths = {16, 32, 64, 128};
  s.depth = 1;
  s.downsampling.assign(5, DownsampleStyle::strided_conv);
  s.resolution = resolution;
  s.init_seed = seed;
  return s;
}

ArchitectureSpec ArchitectureSpec::gan_upsampler_default(int64_t resolution, uint64_t seed) {
  if (!is_power_of_two(resolution) || resolution < 8) {
    throw ValidationError("gan_upsampler resolution must be a power of two >= 8");
  }
  ArchitectureSpec s;
  s.family = ArchitectureFamily::gan_upsampler;
  const int levels = log2_exact(resolution) - 1;
  // 64 channels at 4x4 and 8x8, halving every second level, floor of 16.
  for (int i = 0; i < levels; ++i) s.widths.push_back(std::max<int64_t>(16, int64_t{64} >> (i / 2)));
  s.resolution = resolution;
  s.latent_dim = 32;
  s.init_seed = seed;
  return s;
}

ArchitectureSpec ArchitectureSpec::unet_default(int64_t resolution, uint64_t seed) {
  ArchitectureSpec s;
  s.family = ArchitectureFamily::unet_noise_generator;
  s.depth = 3;
  s.widths = {16, 32, 64, 64};
  s.resolution = resolution;
  s.noise_channels = 4;
  s.init_seed = seed;
  return s;
}

void to_json(json& j, const ArchitectureSpec& s) {
  std::vector<std::string> down;
  for (auto d : s.downsampling) down.push_back(d == DownsampleStyle::bilinear ? "bilinear" : "strided_conv");
  j = json{{"family", to_string(s.family)},
           {"widths", s.widths},
           {"depth", s.depth},
           {"downsampling", down},
           {"resolution", s.resolution},
           {"latent_dim", s.latent_dim},
           {"noise_channels", s.noise_channels},
           {"noise_strength", s.noise_strength},
           {"init_seed", s.init_seed}};
}

void from_json(const json& j, ArchitectureSpec& s) {
  s.family = architecture_family_from_string(j.at("family").get<std::string>());
  s.widths = j.value("widths", std::vector<int64_t>{});
  s.depth = j.value("depth", 1);
  s.downsampling.clear();
  for (const auto& d : j.value("downsampling", std::vector<std::string>{})) {
    if (d == "bilinear") {
      s.downsampling.push_back(DownsampleStyle::bilinear);
    } else if (d == "strided_conv") {
      s.downsampling.push_back(DownsampleStyle::strided_conv);
    } else {
      throw FormatError("unknown downsampling style: " + d);
    }
  }
  s.resolution = j.value("resolution", int64_t{64});
  s.latent_dim = j.value("latent_dim", int64_t{32});
  s.noise_channels = j.value("noise_channels", int64_t{4});
  s.noise_strength = j.value("noise_strength", 0.2);
  s.init_seed = j.value("init_seed", uint64_t{0});
}

namespace {

torch::Tensor bilinear_down2(const torch::Tensor& x) { return bilinear_resize(x, x.size(2) / 2, x.size(3) / 2); }

torch::Tensor lrelu(const torch::Tensor& x) { return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2)); }

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1, bool bias = true) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(bias));
}

// He-normal init for every convolution and linear layer, zero biases.
void he_init(nn::Module& m, double negative_slope) {
  torch::NoGradGuard guard;
  for (auto& item : m.named_parameters()) {
    const auto& name = item.key();
    auto& p = item.value();
    if (name.ends_with("bias")) {
      p.zero_();
    } else if (p.dim() >= 2) {
      const double fan_in = static_cast<double>(p.numel() / p.size(0));
      const double gain = std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
      p.normal_(0.0, gain / std::sqrt(fan_in));
    }
  }
}

void freeze(nn::Module& m) {
  m.eval();
  for (auto& p : m.parameters()) p.set_requires_grad(false);
}

// Construction draws from the global torch RNG; serialize it so concurrent
// builders cannot interleave and break seed determinism.
std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}

// ---------------------------------------------------------------- encoders

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, bool downsample, DownsampleStyle style)
      : downsample_(downsample), style_(style) {
    const bool strided = downsample && style == DownsampleStyle::strided_conv;
    conv1_ = register_module("conv1", conv(in, out, 3, strided ? 2 : 1));
    conv2_ = register_module("conv2", conv(out, out, 3));
    if (strided) {
      skip_ = register_module("skip", conv(in, out, 1, 2, false));
    } else if (!downsample && in != out) {
      skip_ = register_module("skip", conv(in, out, 1, 1, false));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (downsample_ && style_ == DownsampleStyle::bilinear) {
      // No skip connection across bilinear downsampling.
      return torch::relu(conv2_(torch::relu(conv1_(bilinear_down2(x)))));
    }
    auto main = conv2_(torch::relu(conv1_(x)));
    auto shortcut = skip_ ? skip_(x) : x;
    return torch::relu(main + shortcut);
  }

 private:
  bool downsample_;
  DownsampleStyle style_;
  nn::Conv2d conv1_{nullptr};
  nn::Conv2d conv2_{nullptr};
  nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(BasicBlock);

class ResNetSmallNet : public EncoderNet {
 public:
  explicit ResNetSmallNet(const ArchitectureSpec& spec) : down_(spec.downsampling) {
    const auto& w = spec.widths;
    stem_ = register_module("stem", conv(3, w[0], 3, down_[0] == DownsampleStyle::strided_conv ? 2 : 1));
    int64_t in = w[0];
    for (size_t s = 0; s < 4; ++s) {
      nn::Sequential stage;
      for (int b = 0; b < spec.depth; ++b) {
        const bool downsample = s > 0 && b == 0;
        const auto style = downsample ? down_[s + 1] : DownsampleStyle::strided_conv;
        stage->push_back(BasicBlock(b == 0 ? in : w[s], w[s], downsample, style));
      }
      in = w[s];
      stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
    }
  }

  torch::Tensor forward_to(const torch::Tensor& input, size_t layer_index) override {
    auto x = input;
    if (down_[0] == DownsampleStyle::bilinear) x = bilinear_down2(x);
    x = torch::relu(stem_(x));
    if (down_[1] == DownsampleStyle::bilinear) {
      x = bilinear_down2(x);
    } else {
      x = F::max_pool2d(x, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    }
    for (size_t s = 0; s <= layer_index; ++s) x = stages_[s]->forward(x);
    return x;
  }

 private:
  std::vector<DownsampleStyle> down_;
  nn::Conv2d stem_{nullptr};
  std::vector<nn::Sequential> stages_;
};

class IdentityNet : public EncoderNet {
 public:
  torch::Tensor forward_to(const torch::Tensor& x, size_t) override { return x; }
};

class Conv1x1Stride2Net : public EncoderNet {
 public:
  explicit Conv1x1Stride2Net(int64_t channels) { conv_ = register_module("conv", conv(3, channels, 1, 2, false)); }
  torch::Tensor forward_to(const torch::Tensor& x, size_t) override { return conv_(x); }

 private:
  nn::Conv2d conv_{nullptr};
};

struct EncoderBuild {
  std::shared_ptr<EncoderNet> net;
  std::vector<LayerInfo> layers;
  std::vector<int64_t> strides;
};

EncoderBuild make_encoder(const std::string& id, const ArchitectureSpec& spec) {
  EncoderBuild b;
  const int64_t r = spec.resolution;
  auto add = [&](std::string name, int dist, int64_t channels) {
    const int64_t stride = int64_t{1} << dist;
    b.layers.push_back({LayerAddress{id, std::move(name), LayerRole::encoder_layer, dist}, channels, r / stride,
                        r / stride});
    b.strides.push_back(stride);
  };
  switch (spec.family) {
    case ArchitectureFamily::resnet_small:
    case ArchitectureFamily::resnet_small_bilinear: {
      if (spec.widths.size() != 4) throw ValidationError("resnet_small needs 4 stage widths");
      if (spec.downsampling.size() != 5) throw ValidationError("resnet_small needs 5 downsampling entries");
      if (spec.depth < 1) throw ValidationError("resnet_small depth must be >= 1");
      if (spec.family == ArchitectureFamily::resnet_small_bilinear &&
          std::any_of(spec.downsampling.begin(), spec.downsampling.end(),
                      [](auto d) { return d != DownsampleStyle::bilinear; })) {
        throw ValidationError("resnet_small_bilinear must downsample bilinearly everywhere");
      }
      b.net = std::make_shared<ResNetSmallNet>(spec);
      for (int s = 0; s < 4; ++s) add("stage" + std::to_string(s + 1), s + 2, spec.widths[s]);
      break;
    }
    case ArchitectureFamily::identity:
      b.net = std::make_shared<IdentityNet>();
      add("input", 0, 3);
      break;
    case ArchitectureFamily::conv1x1_stride2: {
      const int64_t c = spec.widths.empty() ? 8 : spec.widths[0];
      b.net = std::make_shared<Conv1x1Stride2Net>(c);
      add("conv", 1, c);
      break;
    }
    default:
      throw ValidationError("not an encoder family: " + to_string(spec.family));
  }
  return b;
}

// -------------------------------------------------------------- generators

torch::Tensor seeded_normal(std::span<const uint64_t> seeds, uint64_t stream, std::vector<int64_t> shape) {
  std::vector<torch::Tensor> parts;
  parts.reserve(seeds.size());
  for (auto s : seeds) {
    auto gen = make_generator(derive_seed(s, stream));
    parts.push_back(torch::randn(shape, gen, torch::kFloat32));
  }
  return torch::stack(parts);
}

torch::Tensor upsample2(const torch::Tensor& x) {
  return nearest_resize(x, x.size(2) * 2, x.size(3) * 2);
}

// Style-free progressive upsampler: latent -> 4x4 map, then one block per
// resolution with per-conv seeded noise. Injection index i replaces the input
// of block i's conv0 (after the block's upsampling).
class GanUpsamplerNet : public GeneratorNet {
 public:
  explicit GanUpsamplerNet(const ArchitectureSpec& spec)
      : widths_(spec.widths), latent_dim_(spec.latent_dim), noise_strength_(spec.noise_strength) {
    mapping_ = register_module("mapping", nn::Linear(latent_dim_, widths_[0] * 16));
    for (size_t i = 0; i < widths_.size(); ++i) {
      const int64_t in = i == 0 ? widths_[0] : widths_[i - 1];
      const int64_t res = int64_t{4} << i;
      conv0_.push_back(register_module("b" + std::to_string(res) + "_conv0", conv(in, widths_[i], 3)));
      conv1_.push_back(register_module("b" + std::to_string(res) + "_conv1", conv(widths_[i], widths_[i], 3)));
    }
    to_rgb_ = register_module("to_rgb", conv(widths_.back(), 3, 1));
  }

  torch::Tensor synthesize(std::span<const uint64_t> seeds, const Injection* injection,
                           std::pair<size_t, torch::Tensor>* capture) override {
    const size_t start = injection ? injection->layer_index : 0;
    torch::Tensor x;
    if (!injection) {
      auto z = seeded_normal(seeds, 0, {latent_dim_});
      x = lrelu(mapping_(z)).view({static_cast<int64_t>(seeds.size()), widths_[0], 4, 4});
    }
    for (size_t i = start; i < widths_.size(); ++i) {
      if (injection && i == start) {
        x = injection->features;
      } else if (i > 0) {
        x = upsample2(x);
      }
      if (capture && capture->first == i) capture->second = x;
      const int64_t res = x.size(2);
      auto n0 = seeded_normal(seeds, 1 + 2 * i, {1, res, x.size(3)});
      auto n1 = seeded_normal(seeds, 2 + 2 * i, {1, res, x.size(3)});
      x = lrelu(conv0_[i](x) + noise_strength_ * n0);
      x = lrelu(conv1_[i](x) + noise_strength_ * n1);
    }
    return torch::tanh(to_rgb_(x));
  }

 private:
  std::vector<int64_t> widths_;
  int64_t latent_dim_;
  double noise_strength_;
  nn::Linear mapping_{nullptr};
  std::vector<nn::Conv2d> conv0_;
  std::vector<nn::Conv2d> conv1_;
  nn::Conv2d to_rgb_{nullptr};
};

// UNet-style generator fed with a full-resolution Gaussian noise field.
// Down layers d1..d(L+1) each halve the resolution; up layer k (k = L..1)
// takes skip input d_k and the nearest-upscaled map from below, concatenated
// along channels. The head upscales to full resolution. Injection index m
// corresponds to up layer L - m.
class UNetNoiseNet : public GeneratorNet {
 public:
  explicit UNetNoiseNet(const ArchitectureSpec& spec)
      : levels_(spec.depth), widths_(spec.widths), noise_channels_(spec.noise_channels) {
    for (int k = 0; k <= levels_; ++k) {
      const int64_t in = k == 0 ? noise_channels_ : widths_[k - 1];
      down0_.push_back(register_module("down" + std::to_string(k + 1) + "_conv0", conv(in, widths_[k], 3, 2)));
      down1_.push_back(register_module("down" + std::to_string(k + 1) + "_conv1", conv(widths_[k], widths_[k], 3)));
    }
    for (int m = 0; m < levels_; ++m) {
      const int k = levels_ - m;
      const int64_t below = k == levels_ ? widths_[levels_] : widths_[k];
      const int64_t in = widths_[k - 1] + below;
      up0_.push_back(register_module("up" + std::to_string(k) + "_conv0", conv(in, widths_[k - 1], 3)));
      up1_.push_back(register_module("up" + std::to_string(k) + "_conv1", conv(widths_[k - 1], widths_[k - 1], 3)));
    }
    head0_ = register_module("head_conv0", conv(widths_[0], widths_[0], 3));
    head1_ = register_module("head_conv1", conv(widths_[0], 3, 1));
  }

  int64_t up_input_channels(int k) const {
    const int64_t below = k == levels_ ? widths_[levels_] : widths_[k];
    return widths_[k - 1] + below;
  }

  torch::Tensor synthesize(std::span<const uint64_t> seeds, const Injection* injection,
                           std::pair<size_t, torch::Tensor>* capture) override {
    const int64_t res = resolution_;
    auto x = seeded_normal(seeds, 0, {noise_channels_, res, res});
    const size_t start = injection ? injection->layer_index : 0;
    // Skips needed by up layers at or after the injection point.
    const int deepest_needed = levels_ - static_cast<int>(start);
    const int downs = injection ? deepest_needed : levels_ + 1;
    std::vector<torch::Tensor> skips;
    for (int k = 0; k < downs; ++k) {
      x = lrelu(down1_[k](lrelu(down0_[k](x))));
      skips.push_back(x);
    }
    torch::Tensor y = injection ? torch::Tensor() : skips.back();
    for (size_t m = start; m < static_cast<size_t>(levels_); ++m) {
      const int k = levels_ - static_cast<int>(m);
      if (injection && m == start) {
        y = injection->features;
      } else {
        const auto& skip = skips[k - 1];
        y = torch::cat({skip, nearest_resize(y, skip.size(2), skip.size(3))}, 1);
      }
      if (capture && capture->first == m) capture->second = y;
      y = lrelu(up1_[m](lrelu(up0_[m](y))));
    }
    y = upsample2(y);
    return torch::tanh(head1_(lrelu(head0_(y))));
  }

  void set_resolution(int64_t r) { resolution_ = r; }

 private:
  int levels_;
  std::vector<int64_t> widths_;
  int64_t noise_channels_;
  int64_t resolution_ = 64;
  std::vector<nn::Conv2d> down0_, down1_, up0_, up1_;
  nn::Conv2d head0_{nullptr};
  nn::Conv2d head1_{nullptr};
};

struct GeneratorBuild {
  std::shared_ptr<GeneratorNet> net;
  std::vector<LayerInfo> layers;  // ascending distance
  std::vector<size_t> module_index;
};

GeneratorBuild make_generator_net(const std::string& id, const ArchitectureSpec& spec) {
  GeneratorBuild b;
  const int64_t r = spec.resolution;
  switch (spec.family) {
    case ArchitectureFamily::gan_upsampler: {
      if (!is_power_of_two(r) || r < 8) throw ValidationError("gan_upsampler resolution must be a power of two >= 8");
      const size_t levels = static_cast<size_t>(log2_exact(r) - 1);
      if (spec.widths.size() != levels) {
        throw ValidationError("gan_upsampler needs " + std::to_string(levels) + " widths for resolution " +
                              std::to_string(r));
      }
      b.net = std::make_shared<GanUpsamplerNet>(spec);
      for (size_t i = levels; i-- > 0;) {
        const int64_t res = int64_t{4} << i;
        const int64_t in = i == 0 ? spec.widths[0] : spec.widths[i - 1];
        const int dist = log2_exact(r / res);
        b.layers.push_back(
            {LayerAddress{id, "b" + std::to_string(res) + ".conv0", LayerRole::generator_layer, dist}, in, res, res});
        b.module_index.push_back(i);
      }
      break;
    }
    case ArchitectureFamily::unet_noise_generator: {
      const int levels = spec.depth;
      if (levels < 1) throw ValidationError("unet depth must be >= 1");
      if (spec.widths.size() != static_cast<size_t>(levels + 1)) {
        throw ValidationError("unet needs depth + 1 widths");
      }
      if (r % (int64_t{1} << (levels + 1)) != 0) {
        throw ValidationError("unet resolution must be divisible by 2^(depth + 1)");
      }
      auto net = std::make_shared<UNetNoiseNet>(spec);
      net->set_resolution(r);
      for (int k = 1; k <= levels; ++k) {
        const int64_t res = r >> k;
        b.layers.push_back({LayerAddress{id, "up" + std::to_string(k) + ".conv0", LayerRole::generator_layer, k},
                            net->up_input_channels(k), res, res});
        b.module_index.push_back(static_cast<size_t>(levels - k));
      }
      b.net = net;
      break;
    }
    default:
      throw ValidationError("not a generator family: " + to_string(spec.family));
  }
  return b;
}

std::string module_hash(nn::Module& m) {
  std::string acc;
  for (const auto& item : m.named_parameters()) {
    acc += item.key();
    acc += tensor_digest(item.value());
  }
  for (const auto& item : m.named_buffers()) {
    acc += item.key();
    acc += tensor_digest(item.value());
  }
  return fnv1a_hex(acc);
}

void save_module(nn::Module& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  m.save(archive);
  archive.save_to(path.string());
}

void load_module(nn::Module& m, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFoundError("weights file not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    m.load(archive);
  } catch (const c10::Error& e) {
    throw FormatError("cannot load weights " + path.string() + ": " + e.what_without_backtrace());
  }
  freeze(m);
}

}  // namespace

// ------------------------------------------------------------------ adapters

EncoderAdapter::EncoderAdapter(std::string model_id, ArchitectureSpec spec, NormalizationDescriptor norm)
    : model_id_(std::move(model_id)), spec_(std::move(spec)), norm_(norm) {
  std::lock_guard lock(init_mutex());
  torch::manual_seed(spec_.init_seed);
  auto b = make_encoder(model_id_, spec_);
  net_ = std::move(b.net);
  layers_ = std::move(b.layers);
  strides_ = std::move(b.strides);
  he_init(*net_, 0.0);
  freeze(*net_);
}

const LayerInfo& EncoderAdapter::layer(std::string_view name) const { return layers_[layer_index(name)]; }

size_t EncoderAdapter::layer_index(std::string_view name) const {
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].address.layer_name == name) return i;
  }
  throw NotFoundError("unknown layer '" + std::string(name) + "' in encoder " + model_id_);
}

LayerInfo EncoderAdapter::layer_shape(std::string_view name, int64_t height, int64_t width) const {
  const auto idx = layer_index(name);
  const int64_t stride = strides_[idx];
  if (height % stride != 0 || width % stride != 0 || height < stride || width < stride) {
    throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) + " incompatible with layer " +
                     std::string(name) + " (stride " + std::to_string(stride) + ")");
  }
  LayerInfo info = layers_[idx];
  info.height = height / stride;
  info.width = width / stride;
  return info;
}

torch::Tensor EncoderAdapter::forward_native(const torch::Tensor& native_batch, std::string_view layer) const {
  if (native_batch.dim() != 4 || native_batch.size(1) != 3) {
    throw ShapeError("encoder input must be (N, 3, H, W), got " + c10::str(native_batch.sizes()));
  }
  const auto idx = layer_index(layer);
  layer_shape(layer, native_batch.size(2), native_batch.size(3));
  forwards_.fetch_add(1);
  return net_->forward_to(native_batch, idx);
}

torch::Tensor EncoderAdapter::forward_unit(const torch::Tensor& unit_batch, std::string_view layer) const {
  return forward_native(norm_.unit_to_native(unit_batch), layer);
}

ActivationTensor EncoderAdapter::extract_activations(const LayerAddress& layer, const ImageTensor& img) const {
  if (layer.model_id != model_id_) {
    throw NotFoundError("layer " + layer.str() + " does not belong to encoder " + model_id_);
  }
  const auto& info = this->layer(layer.layer_name);
  torch::NoGradGuard guard;
  auto unit = to_unit_space(img, norm_);
  auto out = forward_unit(unit.batch(), layer.layer_name);
  return ActivationTensor(out.squeeze(0), info.address);
}

std::string EncoderAdapter::weights_hash() const { return module_hash(*net_); }
void EncoderAdapter::save_weights(const std::filesystem::path& path) const { save_module(*net_, path); }
void EncoderAdapter::load_weights(const std::filesystem::path& path) { load_module(*net_, path); }

GeneratorAdapter::GeneratorAdapter(std::string model_id, ArchitectureSpec spec)
    : model_id_(std::move(model_id)), spec_(std::move(spec)), norm_(NormalizationDescriptor::range(-1.0, 1.0)) {
  std::lock_guard lock(init_mutex());
  torch::manual_seed(spec_.init_seed);
  auto b = make_generator_net(model_id_, spec_);
  net_ = std::move(b.net);
  layers_ = std::move(b.layers);
  module_index_ = std::move(b.module_index);
  he_init(*net_, 0.2);
  freeze(*net_);
}

const LayerInfo& GeneratorAdapter::layer(std::string_view name) const {
  for (const auto& l : layers_) {
    if (l.address.layer_name == name) return l;
  }
  throw NotFoundError("unknown layer '" + std::string(name) + "' in generator " + model_id_);
}

size_t GeneratorAdapter::table_to_module_index(std::string_view name) const {
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].address.layer_name == name) return module_index_[i];
  }
  throw NotFoundError("unknown layer '" + std::string(name) + "' in generator " + model_id_);
}

int64_t GeneratorAdapter::seed_dim() const {
  return spec_.family == ArchitectureFamily::gan_upsampler ? spec_.latent_dim
                                                           : spec_.noise_channels * spec_.resolution * spec_.resolution;
}

torch::Tensor GeneratorAdapter::synthesize_unit(std::span<const uint64_t> seeds) const {
  forwards_.fetch_add(1);
  return norm_.native_to_unit(net_->synthesize(seeds, nullptr, nullptr));
}

torch::Tensor GeneratorAdapter::synthesize_unit(std::span<const uint64_t> seeds, std::string_view layer,
                                                const torch::Tensor& features) const {
  const auto& info = this->layer(layer);
  if (features.dim() != 4 || features.size(0) != static_cast<int64_t>(seeds.size())) {
    throw ShapeError("injected features must be (N, C, H, W) with one seed per sample");
  }
  if (features.size(1) != info.channels || features.size(2) != info.height || features.size(3) != info.width) {
    throw ShapeError("injection into " + info.address.str() + " expects (" + std::to_string(info.channels) + ", " +
                     std::to_string(info.height) + ", " + std::to_string(info.width) + "), got " +
                     c10::str(features.sizes().slice(1)));
  }
  GeneratorNet::Injection inj{table_to_module_index(layer), features};
  forwards_.fetch_add(1);
  return norm_.native_to_unit(net_->synthesize(seeds, &inj, nullptr));
}

ImageTensor GeneratorAdapter::generate(uint64_t seed) const {
  torch::NoGradGuard guard;
  const uint64_t seeds[] = {seed};
  return ImageTensor(synthesize_unit(seeds).squeeze(0).clamp(0.0, 1.0), ValueSpace::unit);
}

ImageTensor GeneratorAdapter::generate_with_injection(uint64_t seed, const LayerAddress& layer,
                                                      const ActivationTensor& a) const {
  if (layer.model_id != model_id_) {
    throw NotFoundError("layer " + layer.str() + " does not belong to generator " + model_id_);
  }
  torch::NoGradGuard guard;
  const uint64_t seeds[] = {seed};
  auto img = synthesize_unit(seeds, layer.layer_name, a.data().unsqueeze(0));
  return ImageTensor(img.squeeze(0).clamp(0.0, 1.0), ValueSpace::unit);
}

ActivationTensor GeneratorAdapter::capture_layer_input(uint64_t seed, const LayerAddress& layer) const {
  const auto& info = this->layer(layer.layer_name);
  torch::NoGradGuard guard;
  const uint64_t seeds[] = {seed};
  std::pair<size_t, torch::Tensor> cap{table_to_module_index(layer.layer_name), {}};
  forwards_.fetch_add(1);
  net_->synthesize(seeds, nullptr, &cap);
  return ActivationTensor(cap.second.squeeze(0), info.address);
}

std::string GeneratorAdapter::weights_hash() const { return module_hash(*net_); }
void GeneratorAdapter::save_weights(const std::filesystem::path& path) const { save_module(*net_, path); }
void GeneratorAdapter::load_weights(const std::filesystem::path& path) { load_module(*net_, path); }

std::shared_ptr<EncoderAdapter> build_encoder(const std::string& model_id, const ArchitectureSpec& spec) {
  if (!is_encoder_family(spec.family)) throw ValidationError("not an encoder family: " + to_string(spec.family));
  const bool resnet = spec.family == ArchitectureFamily::resnet_small ||
                      spec.family == ArchitectureFamily::resnet_small_bilinear;
  return std::make_shared<EncoderAdapter>(model_id, spec,
                                          resnet ? NormalizationDescriptor::imagenet() : NormalizationDescriptor::unit());
}

std::shared_ptr<GeneratorAdapter> build_generator(const std::string& model_id, const ArchitectureSpec& spec) {
  return std::make_shared<GeneratorAdapter>(model_id, spec);
}

ArchitectureSpec bilinear_variant_spec(const ArchitectureSpec& spec) {
  if (spec.family != ArchitectureFamily::resnet_small) {
    throw ValidationError("bilinear variant requires family resnet_small, got " + to_string(spec.family));
  }
  auto out = spec;
  out.family = ArchitectureFamily::resnet_small_bilinear;
  out.downsampling.assign(5, DownsampleStyle::bilinear);
  return out;
}

std::shared_ptr<EncoderAdapter> build_bilinear_variant(const std::string& model_id, const ArchitectureSpec& spec) {
  return build_encoder(model_id, bilinear_variant_spec(spec));
}

std::shared_ptr<GeneratorAdapter> build_unet_noise_generator(const std::string& model_id,
                                                             const ArchitectureSpec& spec) {
  if (spec.family != ArchitectureFamily::unet_noise_generator) {
    throw ValidationError("expected family unet_noise_generator, got " + to_string(spec.family));
  }
  return build_generator(model_id, spec);
}

// ------------------------------------------------------------------ registry

void to_json(json& j, const ModelEntry& e) {
  j = json{{"model_id", e.model_id}, {"kind", e.kind},       {"family", to_string(e.spec.family)},
           {"architecture", e.spec}, {"weights", e.weights}, {"weights_hash", e.weights_hash},
           {"normalization", e.normalization}, {"layers", e.layers}};
}

void from_json(const json& j, ModelEntry& e) {
  e.model_id = j.at("model_id").get<std::string>();
  e.kind = j.at("kind").get<std::string>();
  e.spec = j.at("architecture").get<ArchitectureSpec>();
  e.normalization = j.at("normalization").get<NormalizationDescriptor>();
  e.weights = j.value("weights", std::string{});
  e.weights_hash = j.value("weights_hash", std::string{});
  e.layers = j.value("layers", std::vector<LayerInfo>{});
}

void ModelRegistry::add(std::shared_ptr<EncoderAdapter> enc) {
  std::lock_guard lock(mutex_);
  const auto& id = enc->model_id();
  if (encoders_.contains(id) || generators_.contains(id)) throw ValidationError("duplicate model id: " + id);
  encoders_.emplace(id, std::move(enc));
}

void ModelRegistry::add(std::shared_ptr<GeneratorAdapter> gen) {
  std::lock_guard lock(mutex_);
  const auto& id = gen->model_id();
  if (encoders_.contains(id) || generators_.contains(id)) throw ValidationError("duplicate model id: " + id);
  generators_.emplace(id, std::move(gen));
}

std::shared_ptr<const EncoderAdapter> ModelRegistry::encoder(std::string_view id) const {
  std::lock_guard lock(mutex_);
  if (auto it = encoders_.find(id); it != encoders_.end()) return it->second;
  throw NotFoundError("unknown encoder: " + std::string(id));
}

std::shared_ptr<const GeneratorAdapter> ModelRegistry::generator(std::string_view id) const {
  std::lock_guard lock(mutex_);
  if (auto it = generators_.find(id); it != generators_.end()) return it->second;
  throw NotFoundError("unknown generator: " + std::string(id));
}

bool ModelRegistry::has_encoder(std::string_view id) const {
  std::lock_guard lock(mutex_);
  return encoders_.find(id) != encoders_.end();
}

bool ModelRegistry::has_generator(std::string_view id) const {
  std::lock_guard lock(mutex_);
  return generators_.find(id) != generators_.end();
}

std::vector<std::string> ModelRegistry::model_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : encoders_) ids.push_back(id);
  for (const auto& [id, _] : generators_) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<LayerInfo> ModelRegistry::list_layers(std::string_view model_id) const {
  std::lock_guard lock(mutex_);
  if (auto it = encoders_.find(model_id); it != encoders_.end()) return it->second->layers();
  if (auto it = generators_.find(model_id); it != generators_.end()) return it->second->layers();
  throw NotFoundError("unknown model: " + std::string(model_id));
}

json ModelRegistry::describe() const {
  std::lock_guard lock(mutex_);
  json out = json::array();
  for (const auto& [id, e] : encoders_) {
    out.push_back({{"model_id", id},
                   {"kind", "encoder"},
                   {"family", to_string(e->spec().family)},
                   {"resolution", e->spec().resolution},
                   {"normalization", e->normalization()},
                   {"layers", e->layers().size()}});
  }
  for (const auto& [id, g] : generators_) {
    out.push_back({{"model_id", id},
                   {"kind", "generator"},
                   {"family", to_string(g->spec().family)},
                   {"resolution", g->resolution()},
                   {"normalization", g->normalization()},
                   {"layers", g->layers().size()}});
  }
  return out;
}

std::string ModelRegistry::hash() const {
  std::lock_guard lock(mutex_);
  std::string acc;
  for (const auto& [id, e] : encoders_) acc += id + e->weights_hash();
  for (const auto& [id, g] : generators_) acc += id + g->weights_hash();
  return fnv1a_hex(acc);
}

void ModelRegistry::save(const std::filesystem::path& manifest) const {
  const auto dir = manifest.has_parent_path() ? manifest.parent_path() : std::filesystem::path(".");
  json models = json::array();
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, e] : encoders_) {
      const std::string rel = "models/" + id + ".pt";
      e->save_weights(dir / rel);
      models.push_back(ModelEntry{id, "encoder", e->spec(), e->normalization(), rel, e->weights_hash(), e->layers()});
    }
    for (const auto& [id, g] : generators_) {
      const std::string rel = "models/" + id + ".pt";
      g->save_weights(dir / rel);
      models.push_back(ModelEntry{id, "generator", g->spec(), g->normalization(), rel, g->weights_hash(), g->layers()});
    }
  }
  json j{{"version", 1}, {"models", models}, {"registry_hash", hash()}, {"extras", extras}};
  io::write_file(manifest, j.dump(2) + "\n");
}

std::shared_ptr<ModelRegistry> ModelRegistry::load(const std::filesystem::path& manifest) {
  json j;
  try {
    j = json::parse(io::read_file(manifest));
  } catch (const json::exception& e) {
    throw FormatError("malformed registry manifest " + manifest.string() + ": " + e.what());
  }
  if (j.value("version", 0) != 1) throw FormatError("unsupported registry manifest version");
  const auto dir = manifest.has_parent_path() ? manifest.parent_path() : std::filesystem::path(".");
  auto reg = std::make_shared<ModelRegistry>();
  reg->extras = j.value("extras", json::object());
  for (const auto& mj : j.at("models")) {
    auto entry = mj.get<ModelEntry>();
    auto check = [&](const std::vector<LayerInfo>& built, const std::string& hash) {
      if (!entry.layers.empty() && entry.layers != built) {
        throw FormatError("layer table of " + entry.model_id + " does not match its architecture");
      }
      if (!entry.weights_hash.empty() && entry.weights_hash != hash) {
        throw FormatError("weights hash mismatch for " + entry.model_id);
      }
    };
    if (entry.kind == "encoder") {
      auto enc = std::make_shared<EncoderAdapter>(entry.model_id, entry.spec, entry.normalization);
      if (!entry.weights.empty()) enc->load_weights(dir / entry.weights);
      check(enc->layers(), enc->weights_hash());
      reg->add(std::move(enc));
    } else if (entry.kind == "generator") {
      auto gen = build_generator(entry.model_id, entry.spec);
      if (!entry.weights.empty()) gen->load_weights(dir / entry.weights);
      check(gen->layers(), gen->weights_hash());
      reg->add(std::move(gen));
    } else {
      throw FormatError("unknown model kind: " + entry.kind);
    }
  }
  return reg;
}

}  // namespace stitchviz
