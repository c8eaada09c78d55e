#pragma once

// Shared domain types for the inversion toolkit: image and activation tensors,
// layer addresses, normalization descriptors and run manifests.
//
// Tensors are stored as contiguous float32 CPU tensors of shape (C, H, W).
// Every wrapper clones its input on construction, so values are immutable and
// safe to share between threads.

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace stitchviz {

using json = nlohmann::json;

// Error hierarchy. The service maps NotFoundError to 404 and
// ShapeError/ValidationError to 422.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class NotFoundError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};

enum class ValueSpace { unit, model_native };
enum class LayerRole { encoder_layer, generator_layer };

std::string to_string(LayerRole role);
LayerRole layer_role_from_string(std::string_view s);

struct LayerAddress {
  std::string model_id;
  std::string layer_name;
  LayerRole role = LayerRole::encoder_layer;
  // Down/upsampling steps from the model's reference end: the input for
  // encoders, the output for generators.
  int sampling_distance = 0;

  bool operator==(const LayerAddress&) const = default;
  std::string str() const { return model_id + ":" + layer_name; }
};

void to_json(json& j, const LayerAddress& a);
void from_json(const json& j, LayerAddress& a);

// Layer table entry: an address plus the feature map shape at the model's
// reference resolution.
struct LayerInfo {
  LayerAddress address;
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;

  bool operator==(const LayerInfo&) const = default;
};

void to_json(json& j, const LayerInfo& l);
void from_json(const json& j, LayerInfo& l);

class ImageTensor {
 public:
  // data must be (3, H, W); unit space values must lie in [0, 1].
  ImageTensor(torch::Tensor data, ValueSpace space = ValueSpace::unit);

  const torch::Tensor& data() const { return data_; }
  ValueSpace space() const { return space_; }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }
  // (1, 3, H, W) view for feeding networks.
  torch::Tensor batch() const { return data_.unsqueeze(0); }

 private:
  torch::Tensor data_;
  ValueSpace space_;
};

class ActivationTensor {
 public:
  // data must be (C, H, W) with finite entries.
  ActivationTensor(torch::Tensor data, LayerAddress source);

  const torch::Tensor& data() const { return data_; }
  const LayerAddress& source() const { return source_; }
  int64_t channels() const { return data_.size(0); }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }

 private:
  torch::Tensor data_;
  LayerAddress source_;
};

// Affine map between a model's native input/output range and unit space.
struct NormalizationDescriptor {
  enum class Kind { unit, range, mean_std };

  Kind kind = Kind::unit;
  double low = 0.0;  // range
  double high = 1.0;
  std::array<double, 3> mean{0.0, 0.0, 0.0};  // mean_std
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  bool operator==(const NormalizationDescriptor&) const = default;

  static NormalizationDescriptor unit();
  static NormalizationDescriptor range(double low, double high);
  // ImageNet channel statistics, as used by torchvision classifiers.
  static NormalizationDescriptor imagenet();
  // Accepts "unit", "tanh" ([-1, 1]) and "imagenet"; throws ValidationError
  // for anything else.
  static NormalizationDescriptor from_name(std::string_view name);
  std::string name() const;

  // Differentiable tensor versions; x is (N, 3, H, W) or (3, H, W).
  torch::Tensor native_to_unit(const torch::Tensor& x) const;
  torch::Tensor unit_to_native(const torch::Tensor& x) const;
};

void to_json(json& j, const NormalizationDescriptor& d);
void from_json(const json& j, NormalizationDescriptor& d);

ImageTensor to_unit_space(const ImageTensor& img, const NormalizationDescriptor& stats);
ImageTensor from_unit_space(const ImageTensor& img, const NormalizationDescriptor& stats);

// Source index per destination index: floor(dst * src_size / dst_size).
std::vector<int64_t> nearest_index_map(int64_t src_size, int64_t dst_size);

ActivationTensor nearest_resize(const ActivationTensor& a, int64_t target_h, int64_t target_w);
// Batched (N, C, H, W) variant; differentiable through index_select.
torch::Tensor nearest_resize(const torch::Tensor& x, int64_t target_h, int64_t target_w);

// Bilinear image resampling (align_corners = false). Used for images only;
// activations always go through nearest_resize.
torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t target_h, int64_t target_w);
ImageTensor bilinear_resize(const ImageTensor& img, int64_t target_h, int64_t target_w);

// Stateless seed mixing for deriving per-layer and per-sample streams.
uint64_t splitmix64(uint64_t x);
uint64_t derive_seed(uint64_t seed, uint64_t stream);
torch::Generator make_generator(uint64_t seed);

// FNV-1a 64, hex encoded. Deterministic across runs and platforms.
std::string fnv1a_hex(std::string_view bytes);
std::string hash_json(const json& j);
std::string tensor_digest(const torch::Tensor& t);

enum class InversionStatus { completed, aborted_nonfinite, cancelled };
std::string to_string(InversionStatus s);

struct InversionResult {
  ImageTensor image;  // unit space
  std::string method;
  double wall_time_s = 0.0;
  uint64_t seed = 0;
  std::vector<double> loss_trace;
  std::map<std::string, double> metrics;
  InversionStatus status = InversionStatus::completed;
  uint64_t encoder_forwards = 0;
  uint64_t generator_forwards = 0;
  uint64_t backward_passes = 0;
};

// Everything except the image itself.
json sidecar_json(const InversionResult& r);

struct RunManifest {
  std::string run_id;
  std::string command;
  std::string config_hash;
  json config;
  std::vector<std::string> model_ids;
  std::vector<uint64_t> seeds;
  std::string started_at;
  std::string finished_at;

  static RunManifest begin(std::string command, json config);
  void finish();
};

void to_json(json& j, const RunManifest& m);

std::string new_run_id();
std::string utc_timestamp();

}  // namespace stitchviz
