#include "stitchviz/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "stitchviz/image_io.hpp"

namespace stitchviz {

namespace {

using torch::indexing::Slice;

torch::Tensor random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  return torch::tensor({u(rng), u(rng), u(rng)}).view({3, 1, 1});
}

torch::Tensor mix(const torch::Tensor& mask, const torch::Tensor& c1, const torch::Tensor& c2) {
  return c1 * mask.unsqueeze(0) + c2 * (1 - mask.unsqueeze(0));
}

torch::Tensor render_texture(uint64_t seed, int64_t r) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto coords = (torch::arange(r, torch::kFloat32) + 0.5f) / static_cast<float>(r);
  const auto yy = coords.view({r, 1}).expand({r, r});
  const auto xx = coords.view({1, r}).expand({r, r});
  const double two_pi = 2.0 * std::numbers::pi;
  const auto c1 = random_color(rng);
  const auto c2 = random_color(rng);
  const int kind = static_cast<int>(rng() % 6);
  torch::Tensor img;
  switch (kind) {
    case 0: {  // stripes
      const double theta = u(rng) * std::numbers::pi;
      const double freq = 2.0 + u(rng) * 8.0;
      const double phase = u(rng) * two_pi;
      const auto t = xx * std::cos(theta) + yy * std::sin(theta);
      img = mix(0.5 + 0.5 * torch::sin(two_pi * freq * t + phase), c1, c2);
      break;
    }
    case 1: {  // checkers
      const double n = 2.0 + std::floor(u(rng) * 7.0);
      const double ox = u(rng);
      const double oy = u(rng);
      const auto cells = torch::floor(xx * n + ox) + torch::floor(yy * n + oy);
      img = mix(torch::remainder(cells, 2.0), c1, c2);
      break;
    }
    case 2: {  // blobs
      img = c2.expand({3, r, r}).clone();
      const int k = 2 + static_cast<int>(rng() % 5);
      for (int i = 0; i < k; ++i) {
        const double cx = u(rng), cy = u(rng), s = 0.05 + 0.2 * u(rng);
        const auto g = torch::exp(-((xx - cx).pow(2) + (yy - cy).pow(2)) / (2 * s * s));
        img = mix(g, random_color(rng), img);
      }
      break;
    }
    case 3: {  // rings
      const double cx = u(rng), cy = u(rng);
      const double freq = 2.0 + u(rng) * 8.0;
      const auto rad = torch::sqrt((xx - cx).pow(2) + (yy - cy).pow(2));
      img = mix(0.5 + 0.5 * torch::sin(two_pi * freq * rad + u(rng) * two_pi), c1, c2);
      break;
    }
    case 4: {  // smooth noise
      const int64_t g = 2 + static_cast<int64_t>(rng() % 7);
      std::vector<float> vals(static_cast<size_t>(3 * g * g));
      for (auto& v : vals) v = static_cast<float>(u(rng));
      const auto coarse = torch::from_blob(vals.data(), {1, 3, g, g}, torch::kFloat32).clone();
      img = bilinear_resize(coarse, r, r).squeeze(0);
      break;
    }
    default: {  // dots
      const double n = 3.0 + std::floor(u(rng) * 6.0);
      const double rad = 0.15 + 0.3 * u(rng);
      const auto fx = torch::frac(xx * n) - 0.5;
      const auto fy = torch::frac(yy * n) - 0.5;
      img = mix((torch::sqrt(fx * fx + fy * fy) < rad).to(torch::kFloat32), c1, c2);
      break;
    }
  }
  // Mild pixel noise from a seeded torch generator.
  auto gen = make_generator(derive_seed(seed, 1));
  img = img + 0.02 * torch::randn({3, r, r}, gen, torch::kFloat32);
  return img.clamp(0.0, 1.0).contiguous();
}

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

SyntheticTextureDataset::SyntheticTextureDataset(uint64_t seed, size_t count, int64_t resolution, size_t offset)
    : seed_(seed), count_(count), resolution_(resolution), offset_(offset) {
  if (resolution < 1) throw ValidationError("dataset resolution must be >= 1");
}

ImageTensor SyntheticTextureDataset::get(size_t index) const {
  if (index >= count_) throw NotFoundError("sample index out of range: " + std::to_string(index));
  return ImageTensor(render_texture(derive_seed(seed_, offset_ + index), resolution_));
}

std::string SyntheticTextureDataset::id() const {
  std::ostringstream os;
  os << "synthetic:seed=" << seed_ << ",count=" << count_;
  if (offset_ != 0) os << ",offset=" << offset_;
  return os.str();
}

DirectoryDataset::DirectoryDataset(const std::filesystem::path& dir, int64_t resolution)
    : dir_(dir), resolution_(resolution) {
  if (!std::filesystem::is_directory(dir)) throw NotFoundError("dataset directory not found: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files_.push_back(e.path());
  }
  std::sort(files_.begin(), files_.end());
  if (files_.empty()) throw NotFoundError("no images in " + dir.string());
}

ImageTensor DirectoryDataset::get(size_t index) const {
  if (index >= files_.size()) throw NotFoundError("sample index out of range: " + std::to_string(index));
  auto img = io::read_image(files_[index]);
  if (img.height() == resolution_ && img.width() == resolution_) return img;
  return bilinear_resize(img, resolution_, resolution_);
}

std::string DirectoryDataset::id() const { return dir_.string(); }

std::unique_ptr<ImageDataset> open_dataset(const std::string& spec, int64_t resolution) {
  constexpr std::string_view prefix = "synthetic:";
  if (spec.starts_with(prefix)) {
    uint64_t seed = 0;
    size_t count = 0, offset = 0;
    bool have_count = false;
    std::stringstream ss(spec.substr(prefix.size()));
    std::string kv;
    while (std::getline(ss, kv, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ValidationError("bad dataset spec: " + spec);
      const auto key = kv.substr(0, eq);
      const auto val = kv.substr(eq + 1);
      try {
        if (key == "seed") {
          seed = std::stoull(val);
        } else if (key == "count") {
          count = std::stoull(val);
          have_count = true;
        } else if (key == "offset") {
          offset = std::stoull(val);
        } else {
          throw ValidationError("unknown dataset key: " + key);
        }
      } catch (const std::logic_error&) {
        throw ValidationError("bad dataset value: " + kv);
      }
    }
    if (!have_count || count == 0) throw ValidationError("synthetic dataset needs count >= 1");
    return std::make_unique<SyntheticTextureDataset>(seed, count, resolution, offset);
  }
  return std::make_unique<DirectoryDataset>(spec, resolution);
}

torch::Tensor load_batch(const ImageDataset& ds, std::span<const size_t> indices, int64_t resolution) {
  std::vector<torch::Tensor> items;
  items.reserve(indices.size());
  for (size_t i : indices) {
    auto t = ds.get(i).data();
    if (t.size(1) != resolution || t.size(2) != resolution) t = bilinear_resize(t.unsqueeze(0), resolution, resolution).squeeze(0);
    items.push_back(t);
  }
  return torch::stack(items);
}

}  // namespace stitchviz
