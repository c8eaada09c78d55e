#pragma once

// The 1x1 convolution connecting an encoder layer to a generator layer, the
// single-pass inversion pipeline built on it, and its trainer.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stitchviz/core.hpp"
#include "stitchviz/dataset.hpp"
#include "stitchviz/models.hpp"

namespace stitchviz {

struct StitchTrainingConfig {
  double learning_rate = 0.01;
  int64_t batch_size = 8;
  int epochs = 30;
  bool bias = true;
  uint64_t seed = 0;             // init, shuffling and per-sample generator seeds
  uint64_t validation_seed = 1;  // generator seeds used for validation samples

  void validate() const;
};

void to_json(json& j, const StitchTrainingConfig& c);
void from_json(const json& j, StitchTrainingConfig& c);

struct EpochRecord {
  int epoch = 0;  // 0 is the untrained initialisation
  double train_loss = 0.0;
  double val_l1_layerx = 0.0;
  double val_cosine = 0.0;  // test network, pixelwise
  double val_gram_cosine = 0.0;
  double val_l1_test = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

void to_json(json& j, const EpochRecord& r);
void from_json(const json& j, EpochRecord& r);

struct StitchLayer {
  torch::Tensor weight;  // (C_target, C_source) float32
  torch::Tensor bias;    // (C_target) or undefined
  LayerAddress source;
  LayerAddress target;
  int64_t trained_samples = 0;
  int best_epoch = 0;
  std::string config_hash;
  json training_config = json::object();
  std::vector<EpochRecord> history;
  std::string registry_hash;

  bool has_bias() const { return bias.defined(); }
  int64_t source_channels() const { return weight.size(1); }
  int64_t target_channels() const { return weight.size(0); }
  // Throws ShapeError/ValidationError when shapes or values are inconsistent.
  void validate() const;

  // Weights ~ N(0, 1/sqrt(C_source)), zero bias.
  static StitchLayer initialize(const LayerInfo& source, const LayerInfo& target, bool bias, uint64_t seed);
  static StitchLayer identity(const LayerInfo& source, const LayerInfo& target, bool bias = false);
};

ActivationTensor apply_stitch(const StitchLayer& s, const ActivationTensor& a);
// Batched (N, C_source, H, W) -> (N, C_target, H, W); differentiable.
torch::Tensor apply_stitch(const torch::Tensor& weight, const torch::Tensor& bias, const torch::Tensor& x);

// Generator output (unit space) to the encoder's reference resolution.
torch::Tensor to_encoder_resolution(const torch::Tensor& unit_batch, const EncoderAdapter& enc);

// Batched differentiable pipeline: unit images -> LayerX -> stitch ->
// nearest resize -> injection at LayerY -> unit-space reconstructions.
torch::Tensor stitch_pipeline(const EncoderAdapter& enc, std::string_view layer_x, const torch::Tensor& weight,
                              const torch::Tensor& bias, const GeneratorAdapter& gen, std::string_view layer_y,
                              const torch::Tensor& unit_batch, std::span<const uint64_t> seeds);

// Steps 1-3 of the pipeline for one image: one encoder forward and one
// generator forward.
InversionResult invert_via_gan(const EncoderAdapter& enc, const LayerAddress& layer_x, const StitchLayer& s,
                               const GeneratorAdapter& gen, const LayerAddress& layer_y, const ImageTensor& img,
                               uint64_t seed);

// Injection step only, for activations already extracted.
ImageTensor invert_from_activations(const StitchLayer& s, const ActivationTensor& a, const GeneratorAdapter& gen,
                                    const LayerAddress& layer_y, uint64_t seed);

struct StitchValidation {
  const ImageDataset* dataset = nullptr;
  // Scores in the test network; falls back to the interpreted encoder.
  const EncoderAdapter* test_encoder = nullptr;
  std::string test_layer;
};

struct TrainingProgress {
  int epoch = 0;
  int64_t step = 0;
  double loss = 0.0;
};

struct TrainingOutcome {
  StitchLayer stitch;  // best epoch
  std::vector<EpochRecord> history;
  double wall_time_s = 0.0;
};

TrainingOutcome train_stitch(const EncoderAdapter& enc, const LayerAddress& layer_x, const GeneratorAdapter& gen,
                             const LayerAddress& layer_y, const ImageDataset& train, const StitchTrainingConfig& cfg,
                             const StitchValidation& val,
                             const std::function<void(const TrainingProgress&)>& on_step = {});

// Validation record for a given set of weights.
EpochRecord validate_stitch(const EncoderAdapter& enc, const LayerAddress& layer_x, const StitchLayer& s,
                            const GeneratorAdapter& gen, const LayerAddress& layer_y, const StitchValidation& val,
                            const StitchTrainingConfig& cfg);

// Index into `history` of the highest val_cosine; the earliest wins ties.
size_t select_best_epoch(const std::vector<EpochRecord>& history);

// Checkpoint: <stem>.json manifest plus <stem>.bin little-endian float32
// blob (weight row-major, then bias).
inline constexpr int kStitchFormatVersion = 1;
void save_stitch(const StitchLayer& s, const std::filesystem::path& path);

struct LoadedStitch {
  StitchLayer stitch;
  std::vector<std::string> warnings;
};

// With a registry, channel counts are checked against its layer tables
// (ShapeError on mismatch) and a differing registry hash adds a warning.
LoadedStitch load_stitch(const std::filesystem::path& path, const ModelRegistry* registry = nullptr);

std::filesystem::path stitch_manifest_path(const std::filesystem::path& path);
std::filesystem::path stitch_blob_path(const std::filesystem::path& path);

}  // namespace stitchviz
