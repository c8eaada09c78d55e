#include "stitchviz/gdinv.hpp"

#include <chrono>
#include <cmath>

namespace stitchviz {

std::string to_string(GdMethod m) { return m == GdMethod::plain ? "plain" : "fft_dec"; }

GdMethod gd_method_from_string(std::string_view s) {
  if (s == "plain") return GdMethod::plain;
  if (s == "fft_dec") return GdMethod::fft_dec;
  throw ValidationError("unknown gradient-descent method: " + std::string(s));
}

void GdConfig::validate() const {
  if (steps < 0) throw ValidationError("steps must be >= 0");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (height < 1 || width < 1) throw ValidationError("output size must be >= 1");
  if (!(init_std >= 0.0)) throw ValidationError("init_std must be >= 0");
  if (!color_matrix.empty() && color_matrix.size() != 9) throw ValidationError("color_matrix needs 9 entries");
  if (progress_every < 1) throw ValidationError("progress_every must be >= 1");
}

void to_json(json& j, const GdConfig& c) {
  j = json{{"method", to_string(c.method)},
           {"steps", c.steps},
           {"learning_rate", c.learning_rate},
           {"height", c.height},
           {"width", c.width},
           {"seed", c.seed},
           {"init_std", c.init_std},
           {"frequency_scaling", c.frequency_scaling},
           {"jitter", c.jitter},
           {"color_matrix", c.color_matrix},
           {"progress_every", c.progress_every}};
}

void from_json(const json& j, GdConfig& c) {
  if (j.contains("method")) c.method = gd_method_from_string(j.at("method").get<std::string>());
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.seed = j.value("seed", c.seed);
  c.init_std = j.value("init_std", c.init_std);
  c.frequency_scaling = j.value("frequency_scaling", c.frequency_scaling);
  c.jitter = j.value("jitter", c.jitter);
  c.color_matrix = j.value("color_matrix", c.color_matrix);
  c.progress_every = j.value("progress_every", c.progress_every);
}

torch::Tensor default_color_correlation() {
  const auto eigvals = torch::tensor({0.2175, 0.0188, 0.0045}, torch::kFloat64);
  const auto eigvecs = torch::tensor({-0.5675, 0.7192, 0.4009, -0.5808, -0.0045, -0.8140, -0.5836, -0.6948, 0.4203},
                                     torch::kFloat64)
                           .view({3, 3});
  const auto cov = eigvecs.matmul(torch::diag(eigvals)).matmul(eigvecs.t());
  auto chol = torch::linalg_cholesky(cov);
  chol = chol / torch::linalg_svdvals(chol).max();
  return chol.to(torch::kFloat32);
}

torch::Tensor frequency_scale(int64_t height, int64_t width) {
  const auto fy = torch::fft::fftfreq(height, torch::kFloat64).view({height, 1});
  const auto fx = torch::fft::rfftfreq(width, torch::kFloat64).view({1, width / 2 + 1});
  const auto f = torch::sqrt(fy * fy + fx * fx);
  const double floor = 1.0 / static_cast<double>(std::max(height, width));
  return (1.0 / torch::clamp_min(f, floor)).to(torch::kFloat32);
}

torch::Tensor fft_param_to_image(const torch::Tensor& spectrum, int64_t height, int64_t width,
                                 const torch::Tensor& scale, const torch::Tensor& color) {
  auto spec = spectrum.is_complex() ? spectrum : torch::view_as_complex(spectrum);
  if (spec.dim() != 3 || spec.size(0) != 3 || spec.size(1) != height || spec.size(2) != width / 2 + 1) {
    throw ShapeError("spectrum must be (3, H, W/2+1), got " + c10::str(spec.sizes()));
  }
  if (scale.defined()) spec = spec * scale;
  const auto x = torch::fft::irfft2(spec, std::vector<int64_t>{height, width}, {-2, -1}, "ortho");
  const auto c = color.defined() ? color : torch::eye(3, torch::kFloat32);
  return torch::einsum("ij,jhw->ihw", {c.to(x.scalar_type()), x});
}

torch::Tensor jitter_one_pixel(const torch::Tensor& x, int dx, int dy) {
  if (dx < -1 || dx > 1 || dy < -1 || dy > 1) throw ValidationError("jitter offsets must lie in {-1, 0, 1}");
  const bool unbatched = x.dim() == 3;
  auto in = unbatched ? x.unsqueeze(0) : x;
  namespace F = torch::nn::functional;
  auto padded = F::pad(in, F::PadFuncOptions({2, 2, 2, 2}).mode(torch::kReflect));
  using torch::indexing::Slice;
  const int64_t h = in.size(2), w = in.size(3);
  auto out = padded.index({Slice(), Slice(), Slice(2 - dy, 2 - dy + h), Slice(2 - dx, 2 - dx + w)});
  return unbatched ? out.squeeze(0) : out;
}

ImageTensor jitter_one_pixel(const ImageTensor& img, int dx, int dy) {
  return ImageTensor(jitter_one_pixel(img.data(), dx, dy), img.space());
}

ImageTensor jitter_one_pixel(const ImageTensor& img, std::mt19937_64& rng) {
  const int dx = static_cast<int>(rng() % 3) - 1;
  const int dy = static_cast<int>(rng() % 3) - 1;
  return jitter_one_pixel(img, dx, dy);
}

InversionResult gd_invert(const EncoderAdapter& enc, const LayerAddress& layer_x, const ActivationTensor& target,
                          const GdConfig& cfg, const GdCallback& on_progress) {
  cfg.validate();
  if (layer_x.model_id != enc.model_id()) {
    throw NotFoundError("layer " + layer_x.str() + " does not belong to encoder " + enc.model_id());
  }
  const auto shape = enc.layer_shape(layer_x.layer_name, cfg.height, cfg.width);
  if (target.channels() != shape.channels || target.height() != shape.height || target.width() != shape.width) {
    throw ShapeError("target activation " + c10::str(target.data().sizes()) + " does not match " +
                     layer_x.str() + " at " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }

  const int64_t h = cfg.height, w = cfg.width;
  const bool fft = cfg.method == GdMethod::fft_dec;
  auto init_gen = make_generator(derive_seed(cfg.seed, 0));
  torch::Tensor z;
  torch::Tensor scale, color;
  if (fft) {
    z = torch::randn({3, h, w / 2 + 1, 2}, init_gen, torch::kFloat32) * cfg.init_std;
    if (cfg.frequency_scaling) scale = frequency_scale(h, w);
    color = cfg.color_matrix.empty()
                ? default_color_correlation()
                : torch::tensor(std::vector<double>(cfg.color_matrix), torch::kFloat64).view({3, 3}).to(torch::kFloat32);
  } else {
    z = torch::randn({3, h, w}, init_gen, torch::kFloat32) * cfg.init_std;
  }
  z.set_requires_grad(true);
  auto to_image = [&](const torch::Tensor& p) {
    return torch::sigmoid(fft ? fft_param_to_image(p, h, w, scale, color) : p);
  };

  torch::optim::Adam opt({z}, torch::optim::AdamOptions(cfg.learning_rate));
  std::mt19937_64 jitter_rng(derive_seed(cfg.seed, 1));
  const auto tgt = target.data().unsqueeze(0);
  const auto enc0 = enc.forward_count();

  InversionResult r{.image = ImageTensor(torch::full({3, h, w}, 0.5f)), .method = to_string(cfg.method)};
  r.seed = cfg.seed;
  r.loss_trace.reserve(static_cast<size_t>(cfg.steps));
  const auto t0 = std::chrono::steady_clock::now();

  for (int i = 0; i < cfg.steps; ++i) {
    auto img = to_image(z).unsqueeze(0);
    if (fft && cfg.jitter) {
      const int dx = static_cast<int>(jitter_rng() % 3) - 1;
      const int dy = static_cast<int>(jitter_rng() % 3) - 1;
      img = jitter_one_pixel(img, dx, dy);
    }
    auto loss = (enc.forward_unit(img, layer_x.layer_name) - tgt).abs().mean();
    const double lv = loss.item<double>();
    r.loss_trace.push_back(lv);
    if (!std::isfinite(lv)) {
      r.status = InversionStatus::aborted_nonfinite;
      break;
    }
    opt.zero_grad();
    loss.backward();
    ++r.backward_passes;
    opt.step();
    const int done = i + 1;
    if (on_progress && (done % cfg.progress_every == 0 || done == cfg.steps)) {
      GdProgress p{done, cfg.steps, lv, {}};
      {
        torch::NoGradGuard guard;
        p.image = to_image(z).detach();
      }
      if (!on_progress(p)) {
        r.status = InversionStatus::cancelled;
        break;
      }
    }
  }

  {
    torch::NoGradGuard guard;
    auto final_img = torch::nan_to_num(to_image(z).detach(), 0.5);
    r.image = ImageTensor(final_img.clamp(0.0, 1.0), ValueSpace::unit);
  }
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.encoder_forwards = enc.forward_count() - enc0;
  return r;
}

}  // namespace stitchviz
