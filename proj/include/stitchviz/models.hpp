#pragma once

// Model adapters and the model registry.
//
// Encoders expose named extraction layers ("stage1".."stage4" for the residual
// families); generators expose named injection layers whose sampling distance
// is counted from the generator output. All adapters are frozen: parameters
// never require gradients and modules stay in eval mode, so every forward is
// a pure function of its inputs.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stitchviz/core.hpp"

namespace stitchviz {

enum class ArchitectureFamily {
  resnet_small,
  resnet_small_bilinear,
  gan_upsampler,
  unet_noise_generator,
  // Test fixtures.
  identity,
  conv1x1_stride2,
};

enum class DownsampleStyle { strided_conv, bilinear };

std::string to_string(ArchitectureFamily f);
ArchitectureFamily architecture_family_from_string(std::string_view s);

struct ArchitectureSpec {
  ArchitectureFamily family = ArchitectureFamily::resnet_small;
  // resnet: stage widths (stem uses widths[0]).
  // gan_upsampler: channels per resolution level 4, 8, ..., resolution.
  // unet_noise_generator: widths of down layers 1..levels+1 (last is the
  // bottleneck); up layer k outputs widths[k - 1].
  std::vector<int64_t> widths;
  // resnet: residual blocks per stage. unet: skip-connected levels.
  int depth = 1;
  // resnet: one entry per downsampling point [stem, pool, stage2, stage3, stage4].
  std::vector<DownsampleStyle> downsampling;
  // Reference input resolution (encoders) or output resolution (generators).
  int64_t resolution = 64;
  int64_t latent_dim = 32;      // gan_upsampler
  int64_t noise_channels = 4;   // unet_noise_generator
  double noise_strength = 0.2;  // generators: scale of per-layer noise
  uint64_t init_seed = 0;

  static ArchitectureSpec resnet_small_default(int64_t resolution = 64, uint64_t seed = 0);
  static ArchitectureSpec gan_upsampler_default(int64_t resolution = 64, uint64_t seed = 0);
  static ArchitectureSpec unet_default(int64_t resolution = 64, uint64_t seed = 0);
};

void to_json(json& j, const ArchitectureSpec& s);
void from_json(const json& j, ArchitectureSpec& s);

// Abstract network bodies; concrete modules live in models.cpp.
class EncoderNet : public torch::nn::Module {
 public:
  // Runs the network on a native-space batch up to and including the output
  // of `layer_index` (position in the layer table).
  virtual torch::Tensor forward_to(const torch::Tensor& x, size_t layer_index) = 0;
};

class GeneratorNet : public torch::nn::Module {
 public:
  struct Injection {
    size_t layer_index;
    torch::Tensor features;  // (N, C, H, W), replaces the input of the layer
  };
  // Returns native-space images (N, 3, R, R). When `capture` is set, the
  // tensor entering layer `capture->first` is written to `capture->second`.
  virtual torch::Tensor synthesize(std::span<const uint64_t> seeds, const Injection* injection,
                                   std::pair<size_t, torch::Tensor>* capture) = 0;
};

class EncoderAdapter {
 public:
  EncoderAdapter(std::string model_id, ArchitectureSpec spec, NormalizationDescriptor norm);

  const std::string& model_id() const { return model_id_; }
  const ArchitectureSpec& spec() const { return spec_; }
  const NormalizationDescriptor& normalization() const { return norm_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }
  const LayerInfo& layer(std::string_view name) const;
  size_t layer_index(std::string_view name) const;
  bool frozen() const { return true; }

  // Layer shape for an arbitrary input resolution. Throws ShapeError when the
  // resolution is not divisible by the layer's total stride.
  LayerInfo layer_shape(std::string_view name, int64_t height, int64_t width) const;

  // Differentiable forward on a unit-space batch (N, 3, H, W).
  torch::Tensor forward_unit(const torch::Tensor& unit_batch, std::string_view layer) const;
  // Differentiable forward on a native-space batch.
  torch::Tensor forward_native(const torch::Tensor& native_batch, std::string_view layer) const;

  ActivationTensor extract_activations(const LayerAddress& layer, const ImageTensor& img) const;

  std::shared_ptr<EncoderNet> module() const { return net_; }
  std::string weights_hash() const;
  void save_weights(const std::filesystem::path& path) const;
  void load_weights(const std::filesystem::path& path);

  uint64_t forward_count() const { return forwards_.load(); }

 private:
  std::string model_id_;
  ArchitectureSpec spec_;
  NormalizationDescriptor norm_;
  std::shared_ptr<EncoderNet> net_;
  std::vector<LayerInfo> layers_;
  std::vector<int64_t> strides_;
  mutable std::atomic<uint64_t> forwards_{0};
};

class GeneratorAdapter {
 public:
  GeneratorAdapter(std::string model_id, ArchitectureSpec spec);

  const std::string& model_id() const { return model_id_; }
  const ArchitectureSpec& spec() const { return spec_; }
  // Generators emit [-1, 1] images.
  const NormalizationDescriptor& normalization() const { return norm_; }
  // Sorted by sampling distance from the output, ascending.
  const std::vector<LayerInfo>& layers() const { return layers_; }
  const LayerInfo& layer(std::string_view name) const;
  int64_t resolution() const { return spec_.resolution; }
  int64_t seed_dim() const;

  ImageTensor generate(uint64_t seed) const;
  ImageTensor generate_with_injection(uint64_t seed, const LayerAddress& layer, const ActivationTensor& a) const;
  // The feature map that normally arrives at `layer` for this seed.
  ActivationTensor capture_layer_input(uint64_t seed, const LayerAddress& layer) const;

  // Batched, differentiable through `features`. Returns unit-space images.
  torch::Tensor synthesize_unit(std::span<const uint64_t> seeds, std::string_view layer,
                                const torch::Tensor& features) const;
  torch::Tensor synthesize_unit(std::span<const uint64_t> seeds) const;

  std::shared_ptr<GeneratorNet> module() const { return net_; }
  std::string weights_hash() const;
  void save_weights(const std::filesystem::path& path) const;
  void load_weights(const std::filesystem::path& path);

  uint64_t forward_count() const { return forwards_.load(); }

 private:
  size_t table_to_module_index(std::string_view name) const;

  std::string model_id_;
  ArchitectureSpec spec_;
  NormalizationDescriptor norm_;
  std::shared_ptr<GeneratorNet> net_;
  std::vector<LayerInfo> layers_;
  std::vector<size_t> module_index_;  // layers_[i] -> injection index inside net_
  mutable std::atomic<uint64_t> forwards_{0};
};

std::shared_ptr<EncoderAdapter> build_encoder(const std::string& model_id, const ArchitectureSpec& spec);
std::shared_ptr<GeneratorAdapter> build_generator(const std::string& model_id, const ArchitectureSpec& spec);

// Same widths, layer names and shapes as the strided network, with every
// downsampling replaced by bilinear downsampling + stride-1 3x3 convolution,
// no downsampling skip convolutions and no max pooling.
ArchitectureSpec bilinear_variant_spec(const ArchitectureSpec& spec);
std::shared_ptr<EncoderAdapter> build_bilinear_variant(const std::string& model_id, const ArchitectureSpec& spec);
std::shared_ptr<GeneratorAdapter> build_unet_noise_generator(const std::string& model_id,
                                                             const ArchitectureSpec& spec);

struct ModelEntry {
  std::string model_id;
  std::string kind;  // "encoder" or "generator"
  ArchitectureSpec spec;
  NormalizationDescriptor normalization;
  std::string weights;  // path relative to the manifest directory
  std::string weights_hash;
  std::vector<LayerInfo> layers;
};

void to_json(json& j, const ModelEntry& e);
void from_json(const json& j, ModelEntry& e);

// Thread-safe registry. Registration is serialized; lookups return shared
// immutable adapters.
class ModelRegistry {
 public:
  void add(std::shared_ptr<EncoderAdapter> enc);
  void add(std::shared_ptr<GeneratorAdapter> gen);

  std::shared_ptr<const EncoderAdapter> encoder(std::string_view id) const;
  std::shared_ptr<const GeneratorAdapter> generator(std::string_view id) const;
  bool has_encoder(std::string_view id) const;
  bool has_generator(std::string_view id) const;

  std::vector<std::string> model_ids() const;
  std::vector<LayerInfo> list_layers(std::string_view model_id) const;
  // Summary objects (id, kind, family, resolution, layer count).
  json describe() const;

  // Combined hash over every model id and weight hash.
  std::string hash() const;

  // Optional extras carried by the manifest (dataset and test-network defaults).
  json extras;

  // Writes weights under dir/models and the manifest to `manifest`.
  void save(const std::filesystem::path& manifest) const;
  static std::shared_ptr<ModelRegistry> load(const std::filesystem::path& manifest);

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<EncoderAdapter>, std::less<>> encoders_;
  std::map<std::string, std::shared_ptr<GeneratorAdapter>, std::less<>> generators_;
};

}  // namespace stitchviz
