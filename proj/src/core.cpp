#include "stitchviz/core.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <random>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

namespace stitchviz {

std::string to_string(LayerRole role) {
  return role == LayerRole::encoder_layer ? "encoder_layer" : "generator_layer";
}

LayerRole layer_role_from_string(std::string_view s) {
  if (s == "encoder_layer") return LayerRole::encoder_layer;
  if (s == "generator_layer") return LayerRole::generator_layer;
  throw FormatError("unknown layer role: " + std::string(s));
}

void to_json(json& j, const LayerAddress& a) {
  j = json{{"model_id", a.model_id},
           {"layer_name", a.layer_name},
           {"role", to_string(a.role)},
           {"sampling_distance", a.sampling_distance}};
}

void from_json(const json& j, LayerAddress& a) {
  a.model_id = j.at("model_id").get<std::string>();
  a.layer_name = j.at("layer_name").get<std::string>();
  a.role = layer_role_from_string(j.at("role").get<std::string>());
  a.sampling_distance = j.at("sampling_distance").get<int>();
  if (a.sampling_distance < 0) throw FormatError("negative sampling distance for " + a.str());
}

void to_json(json& j, const LayerInfo& l) {
  j = json(l.address);
  j["channels"] = l.channels;
  j["height"] = l.height;
  j["width"] = l.width;
}

void from_json(const json& j, LayerInfo& l) {
  l.address = j.get<LayerAddress>();
  l.channels = j.at("channels").get<int64_t>();
  l.height = j.at("height").get<int64_t>();
  l.width = j.at("width").get<int64_t>();
}

namespace {

torch::Tensor as_owned_float(const torch::Tensor& t) {
  return t.detach().to(torch::kCPU, torch::kFloat32).contiguous().clone();
}

}  // namespace

ImageTensor::ImageTensor(torch::Tensor data, ValueSpace space) : space_(space) {
  if (data.dim() != 3 || data.size(0) != 3 || data.size(1) < 1 || data.size(2) < 1) {
    throw ShapeError("image tensor must have shape (3, H, W), got " + c10::str(data.sizes()));
  }
  data_ = as_owned_float(data);
  if (space_ == ValueSpace::unit) {
    // Allow float rounding at the ends of the range, then pin to it.
    const auto lo = data_.min().item<float>();
    const auto hi = data_.max().item<float>();
    if (!(lo >= -1e-5f && hi <= 1.0f + 1e-5f)) {
      throw ValidationError("unit-space image has values outside [0, 1]");
    }
    data_.clamp_(0.0, 1.0);
  }
}

ActivationTensor::ActivationTensor(torch::Tensor data, LayerAddress source)
    : source_(std::move(source)) {
  if (data.dim() != 3) {
    throw ShapeError("activation tensor must have shape (C, H, W), got " + c10::str(data.sizes()));
  }
  data_ = as_owned_float(data);
  if (!torch::isfinite(data_).all().item<bool>()) {
    throw ValidationError("activation tensor from " + source_.str() + " has non-finite entries");
  }
}

NormalizationDescriptor NormalizationDescriptor::unit() { return {}; }

NormalizationDescriptor NormalizationDescriptor::range(double low, double high) {
  if (!(high > low)) throw ValidationError("normalization range must satisfy high > low");
  NormalizationDescriptor d;
  d.kind = Kind::range;
  d.low = low;
  d.high = high;
  return d;
}

NormalizationDescriptor NormalizationDescriptor::imagenet() {
  NormalizationDescriptor d;
  d.kind = Kind::mean_std;
  d.mean = {0.485, 0.456, 0.406};
  d.stddev = {0.229, 0.224, 0.225};
  return d;
}

NormalizationDescriptor NormalizationDescriptor::from_name(std::string_view name) {
  if (name == "unit") return unit();
  if (name == "tanh") return range(-1.0, 1.0);
  if (name == "imagenet") return imagenet();
  throw ValidationError("unknown normalization descriptor: " + std::string(name));
}

std::string NormalizationDescriptor::name() const {
  switch (kind) {
    case Kind::unit:
      return "unit";
    case Kind::range:
      if (low == -1.0 && high == 1.0) return "tanh";
      return "range";
    case Kind::mean_std:
      if (*this == imagenet()) return "imagenet";
      return "mean_std";
  }
  return "unit";
}

namespace {

// Per-channel scale and offset so that native = unit * scale + offset.
std::pair<torch::Tensor, torch::Tensor> affine(const NormalizationDescriptor& d, const torch::Tensor& like) {
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> offset{0.0, 0.0, 0.0};
  switch (d.kind) {
    case NormalizationDescriptor::Kind::unit:
      break;
    case NormalizationDescriptor::Kind::range:
      scale.fill(d.high - d.low);
      offset.fill(d.low);
      break;
    case NormalizationDescriptor::Kind::mean_std:
      for (int c = 0; c < 3; ++c) {
        scale[c] = 1.0 / d.stddev[c];
        offset[c] = -d.mean[c] / d.stddev[c];
      }
      break;
  }
  auto opts = like.options().requires_grad(false);
  std::vector<int64_t> shape = like.dim() == 4 ? std::vector<int64_t>{1, 3, 1, 1} : std::vector<int64_t>{3, 1, 1};
  auto s = torch::tensor(std::vector<double>(scale.begin(), scale.end()), opts.dtype(torch::kFloat64))
               .to(like.scalar_type())
               .view(shape);
  auto o = torch::tensor(std::vector<double>(offset.begin(), offset.end()), opts.dtype(torch::kFloat64))
               .to(like.scalar_type())
               .view(shape);
  return {s, o};
}

}  // namespace

torch::Tensor NormalizationDescriptor::native_to_unit(const torch::Tensor& x) const {
  if (kind == Kind::unit) return x;
  auto [s, o] = affine(*this, x);
  return (x - o) / s;
}

torch::Tensor NormalizationDescriptor::unit_to_native(const torch::Tensor& x) const {
  if (kind == Kind::unit) return x;
  auto [s, o] = affine(*this, x);
  return x * s + o;
}

void to_json(json& j, const NormalizationDescriptor& d) {
  const auto n = d.name();
  if (n == "unit" || n == "tanh" || n == "imagenet") {
    j = n;
    return;
  }
  if (d.kind == NormalizationDescriptor::Kind::range) {
    j = json{{"kind", "range"}, {"low", d.low}, {"high", d.high}};
  } else {
    j = json{{"kind", "mean_std"}, {"mean", d.mean}, {"std", d.stddev}};
  }
}

void from_json(const json& j, NormalizationDescriptor& d) {
  if (j.is_string()) {
    d = NormalizationDescriptor::from_name(j.get<std::string>());
    return;
  }
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "range") {
    d = NormalizationDescriptor::range(j.at("low").get<double>(), j.at("high").get<double>());
  } else if (kind == "mean_std") {
    d = NormalizationDescriptor{};
    d.kind = NormalizationDescriptor::Kind::mean_std;
    d.mean = j.at("mean").get<std::array<double, 3>>();
    d.stddev = j.at("std").get<std::array<double, 3>>();
  } else {
    throw ValidationError("unknown normalization descriptor: " + kind);
  }
}

ImageTensor to_unit_space(const ImageTensor& img, const NormalizationDescriptor& stats) {
  if (img.space() == ValueSpace::unit) return img;
  auto unit = stats.native_to_unit(img.data().to(torch::kFloat64)).clamp(0.0, 1.0);
  return ImageTensor(unit, ValueSpace::unit);
}

ImageTensor from_unit_space(const ImageTensor& img, const NormalizationDescriptor& stats) {
  if (img.space() == ValueSpace::model_native) return img;
  return ImageTensor(stats.unit_to_native(img.data().to(torch::kFloat64)), ValueSpace::model_native);
}

std::vector<int64_t> nearest_index_map(int64_t src_size, int64_t dst_size) {
  if (src_size < 1 || dst_size < 1) throw ShapeError("nearest_index_map: sizes must be >= 1");
  std::vector<int64_t> idx(static_cast<size_t>(dst_size));
  for (int64_t d = 0; d < dst_size; ++d) idx[static_cast<size_t>(d)] = (d * src_size) / dst_size;
  return idx;
}

torch::Tensor nearest_resize(const torch::Tensor& x, int64_t target_h, int64_t target_w) {
  if (target_h < 1 || target_w < 1) throw ShapeError("nearest_resize: target size must be >= 1");
  if (x.dim() < 2) throw ShapeError("nearest_resize: tensor needs spatial dims");
  const int64_t h = x.size(-2);
  const int64_t w = x.size(-1);
  if (h == target_h && w == target_w) return x;
  auto rows = torch::tensor(nearest_index_map(h, target_h), torch::kLong);
  auto cols = torch::tensor(nearest_index_map(w, target_w), torch::kLong);
  return x.index_select(x.dim() - 2, rows).index_select(x.dim() - 1, cols);
}

ActivationTensor nearest_resize(const ActivationTensor& a, int64_t target_h, int64_t target_w) {
  return ActivationTensor(nearest_resize(a.data(), target_h, target_w), a.source());
}

torch::Tensor bilinear_resize(const torch::Tensor& x, int64_t target_h, int64_t target_w) {
  if (target_h < 1 || target_w < 1) throw ShapeError("bilinear_resize: target size must be >= 1");
  if (x.size(-2) == target_h && x.size(-1) == target_w) return x;
  const bool unbatched = x.dim() == 3;
  auto in = unbatched ? x.unsqueeze(0) : x;
  namespace F = torch::nn::functional;
  auto out = F::interpolate(in, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{target_h, target_w})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
  return unbatched ? out.squeeze(0) : out;
}

ImageTensor bilinear_resize(const ImageTensor& img, int64_t target_h, int64_t target_w) {
  auto out = bilinear_resize(img.data(), target_h, target_w);
  if (img.space() == ValueSpace::unit) out = out.clamp(0.0, 1.0);
  return ImageTensor(out, img.space());
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ (stream * 0xd1b54a32d192ed03ULL));
}

torch::Generator make_generator(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

std::string fnv1a_hex(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string hash_json(const json& j) { return fnv1a_hex(j.dump()); }

std::string tensor_digest(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU).contiguous();
  return fnv1a_hex(std::string_view(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size()));
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
  return os.str();
}

std::string new_run_id() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%S") << '-' << std::hex << std::setw(8) << std::setfill('0')
     << (rng() & 0xffffffffULL);
  return os.str();
}

std::string to_string(InversionStatus s) {
  switch (s) {
    case InversionStatus::completed:
      return "completed";
    case InversionStatus::aborted_nonfinite:
      return "aborted_nonfinite";
    case InversionStatus::cancelled:
      return "cancelled";
  }
  return "unknown";
}

json sidecar_json(const InversionResult& r) {
  return json{{"method", r.method},
              {"seed", r.seed},
              {"status", to_string(r.status)},
              {"wall_time_s", r.wall_time_s},
              {"height", r.image.height()},
              {"width", r.image.width()},
              {"loss_trace", r.loss_trace},
              {"metrics", r.metrics},
              {"encoder_forwards", r.encoder_forwards},
              {"generator_forwards", r.generator_forwards},
              {"backward_passes", r.backward_passes}};
}

RunManifest RunManifest::begin(std::string command, json config) {
  RunManifest m;
  m.run_id = new_run_id();
  m.command = std::move(command);
  m.config_hash = hash_json(config);
  m.config = std::move(config);
  m.started_at = utc_timestamp();
  return m;
}

void RunManifest::finish() { finished_at = utc_timestamp(); }

void to_json(json& j, const RunManifest& m) {
  j = json{{"run_id", m.run_id},         {"command", m.command},       {"config_hash", m.config_hash},
           {"config", m.config},         {"model_ids", m.model_ids},   {"seeds", m.seeds},
           {"started_at", m.started_at}, {"finished_at", m.finished_at}};
}

}  // namespace stitchviz
