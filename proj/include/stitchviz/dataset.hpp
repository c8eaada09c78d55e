#pragma once

// Image datasets. Samples are produced lazily per index and are a pure
// function of (dataset parameters, index).

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stitchviz/core.hpp"

namespace stitchviz {

class ImageDataset {
 public:
  virtual ~ImageDataset() = default;
  virtual size_t size() const = 0;
  // Unit-space image at the dataset resolution.
  virtual ImageTensor get(size_t index) const = 0;
  virtual std::string id() const = 0;
  virtual int64_t resolution() const = 0;
};

// Procedural textures: stripes, checkers, blobs, rings, smooth noise and dots
// with random colours. Index i of seed s is always the same image.
class SyntheticTextureDataset : public ImageDataset {
 public:
  SyntheticTextureDataset(uint64_t seed, size_t count, int64_t resolution, size_t offset = 0);
  size_t size() const override { return count_; }
  ImageTensor get(size_t index) const override;
  std::string id() const override;
  int64_t resolution() const override { return resolution_; }

 private:
  uint64_t seed_;
  size_t count_;
  int64_t resolution_;
  size_t offset_;
};

// PNG/JPEG files in a directory, sorted by name, resized bilinearly.
class DirectoryDataset : public ImageDataset {
 public:
  DirectoryDataset(const std::filesystem::path& dir, int64_t resolution);
  size_t size() const override { return files_.size(); }
  ImageTensor get(size_t index) const override;
  std::string id() const override;
  int64_t resolution() const override { return resolution_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> files_;
  int64_t resolution_;
};

// "synthetic:seed=S,count=N[,offset=K]" or a directory path. Throws
// NotFoundError for a missing directory and ValidationError for a bad spec.
std::unique_ptr<ImageDataset> open_dataset(const std::string& spec, int64_t resolution);

// Stacks samples into (N, 3, r, r), resizing bilinearly when needed.
torch::Tensor load_batch(const ImageDataset& ds, std::span<const size_t> indices, int64_t resolution);

}  // namespace stitchviz
