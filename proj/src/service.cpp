#include "stitchviz/service.hpp"

#include <chrono>
#include <cstdlib>
#include <map>
#include <optional>
#include <regex>

#include "httplib.h"
#include "stitchviz/evalharness.hpp"
#include "stitchviz/gdinv.hpp"
#include "stitchviz/image_io.hpp"

namespace stitchviz {

// ---------------------------------------------------------------- queue

InferenceQueue::InferenceQueue(size_t depth) : depth_(depth), worker_([this] { run(); }) {}

InferenceQueue::~InferenceQueue() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

std::future<void> InferenceQueue::submit(std::function<void()> task) {
  std::packaged_task<void()> pt(std::move(task));
  auto fut = pt.get_future();
  {
    std::lock_guard lock(mutex_);
    if (tasks_.size() >= depth_) throw BusyError("inference queue is full");
    tasks_.push_back(std::move(pt));
  }
  cv_.notify_one();
  return fut;
}

size_t InferenceQueue::pending() const {
  std::lock_guard lock(mutex_);
  return tasks_.size();
}

void InferenceQueue::run() {
  for (;;) {
    std::packaged_task<void()> task;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stopping_ || !tasks_.empty(); });
      if (tasks_.empty()) return;
      task = std::move(tasks_.front());
      tasks_.pop_front();
    }
    task();
  }
}

// ---------------------------------------------------------------- config

ServiceConfig service_config_from_env() {
  const char* reg = std::getenv("STITCHVIZ_REGISTRY");
  if (reg == nullptr || *reg == '\0') throw ValidationError("STITCHVIZ_REGISTRY is not set");
  ServiceConfig cfg;
  const std::filesystem::path manifest(reg);
  cfg.registry = ModelRegistry::load(manifest);
  const auto root = manifest.parent_path();
  cfg.stitch_dir = root / "stitches";
  cfg.report_dir = root / "reports";
  cfg.dataset = cfg.registry->extras.value("val_dataset", "");
  cfg.test_encoder = cfg.registry->extras.value("test_encoder", "");
  return cfg;
}

std::pair<std::string, int> listen_address_from_env() {
  std::string addr = "127.0.0.1:8787";
  if (const char* env = std::getenv("STITCHVIZ_ADDR"); env != nullptr && *env != '\0') addr = env;
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw ValidationError("STITCHVIZ_ADDR must be host:port");
  try {
    return {addr.substr(0, colon), std::stoi(addr.substr(colon + 1))};
  } catch (const std::logic_error&) {
    throw ValidationError("bad port in STITCHVIZ_ADDR: " + addr);
  }
}

// ---------------------------------------------------------------- service

namespace {

using Clock = std::chrono::steady_clock;

struct Job {
  std::mutex mutex;
  std::condition_variable cv;
  std::vector<json> events;
  bool done = false;
  std::atomic<bool> cancel{false};
  Clock::time_point finished_at;
  json request;
};

bool safe_id(const std::string& id) {
  static const std::regex re("[A-Za-z0-9_.\\-]+");
  return std::regex_match(id, re) && id.find("..") == std::string::npos;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, json{{"error", msg}, {"status", status}});
}

template <typename F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.what());
    } catch (const BusyError& e) {
      send_error(res, 503, e.what());
    } catch (const ShapeError& e) {
      send_error(res, 422, e.what());
    } catch (const ValidationError& e) {
      send_error(res, 422, e.what());
    } catch (const FormatError& e) {
      send_error(res, 422, e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("bad request body: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

std::string png_b64(const ImageTensor& img) { return io::base64_encode(io::encode_png(img)); }

json echo_request(const json& body) {
  json e = body;
  if (e.contains("image")) e["image"] = "<" + std::to_string(body["image"].get<std::string>().size()) + " bytes>";
  return e;
}

}  // namespace

struct Service::Impl {
  ServiceConfig cfg;
  httplib::Server svr;
  InferenceQueue queue;
  std::thread thread;

  std::mutex data_mutex;
  std::unique_ptr<ImageDataset> dataset;
  std::map<std::string, std::shared_ptr<const StitchLayer>> stitches;

  std::mutex jobs_mutex;
  std::unordered_map<std::string, std::shared_ptr<Job>> jobs;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), queue(cfg.queue_depth) {
    if (!cfg.registry) throw ValidationError("service needs a registry");
    routes();
  }

  std::shared_ptr<const StitchLayer> stitch(const std::string& id) {
    if (!safe_id(id)) throw NotFoundError("unknown stitch: " + id);
    std::lock_guard lock(data_mutex);
    if (auto it = stitches.find(id); it != stitches.end()) return it->second;
    const auto path = cfg.stitch_dir / (id + ".json");
    if (!std::filesystem::exists(path)) throw NotFoundError("unknown stitch: " + id);
    auto loaded = load_stitch(path, cfg.registry.get());
    auto ptr = std::make_shared<const StitchLayer>(std::move(loaded.stitch));
    stitches[id] = ptr;
    return ptr;
  }

  ImageTensor request_image(const json& body, const EncoderAdapter& enc) {
    const auto r = enc.spec().resolution;
    std::optional<ImageTensor> img;
    if (body.contains("image")) {
      img = io::decode_image(io::base64_decode(body.at("image").get<std::string>()));
    } else if (body.contains("sample_id")) {
      std::lock_guard lock(data_mutex);
      if (!dataset) {
        if (cfg.dataset.empty()) throw ValidationError("no dataset configured for sample_id requests");
        dataset = open_dataset(cfg.dataset, r);
      }
      img = dataset->get(body.at("sample_id").get<size_t>());
    } else {
      throw ValidationError("request needs image or sample_id");
    }
    if (img->height() != r || img->width() != r) img = bilinear_resize(*img, r, r);
    return *img;
  }

  std::optional<EvalProtocol> protocol_for(const std::string& model, const std::string& layer) {
    if (cfg.test_encoder.empty() || cfg.test_encoder == model) return std::nullopt;
    if (!cfg.registry->has_encoder(cfg.test_encoder)) return std::nullopt;
    auto test = cfg.registry->encoder(cfg.test_encoder);
    for (const auto& l : test->layers()) {
      if (l.address.layer_name == layer) return make_protocol(*cfg.registry, model, layer, cfg.test_encoder, layer);
    }
    return std::nullopt;
  }

  json inversion_response(const InversionResult& r, const std::optional<EvalProtocol>& proto, const ImageTensor& x,
                          const json& body) {
    json out{{"image", png_b64(r.image)},
             {"format", "png"},
             {"width", r.image.width()},
             {"height", r.image.height()},
             {"method", r.method},
             {"seed", r.seed},
             {"status", to_string(r.status)},
             {"wall_time_ms", std::max(r.wall_time_s * 1000.0, 1e-6)},
             {"request", echo_request(body)}};
    if (proto) out["metrics"] = evaluate_inversion(*proto, x, r.image);
    if (!r.loss_trace.empty()) out["final_loss"] = r.loss_trace.back();
    return out;
  }

  void purge_jobs() {
    const auto now = Clock::now();
    std::lock_guard lock(jobs_mutex);
    for (auto it = jobs.begin(); it != jobs.end();) {
      bool expired;
      {
        std::lock_guard jl(it->second->mutex);
        expired = it->second->done &&
                  std::chrono::duration<double>(now - it->second->finished_at).count() > cfg.job_ttl_s;
      }
      it = expired ? jobs.erase(it) : std::next(it);
    }
  }

  std::shared_ptr<Job> job(const std::string& id) {
    purge_jobs();
    std::lock_guard lock(jobs_mutex);
    auto it = jobs.find(id);
    if (it == jobs.end()) throw NotFoundError("unknown or expired job: " + id);
    return it->second;
  }

  static void push_event(Job& j, json ev, bool terminal) {
    {
      std::lock_guard lock(j.mutex);
      j.events.push_back(std::move(ev));
      if (terminal) {
        j.done = true;
        j.finished_at = Clock::now();
      }
    }
    j.cv.notify_all();
  }

  void handle_invert(const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    const auto model = body.at("model").get<std::string>();
    const auto layer_name = body.at("layer").get<std::string>();
    const auto method = body.value("method", std::string("gan"));
    const auto seed = body.value("seed", uint64_t{0});
    auto enc = cfg.registry->encoder(model);
    const auto layer_x = enc->layer(layer_name).address;

    if (method == "gan") {
      if (!body.contains("stitch")) throw ValidationError("gan method needs a stitch id");
      auto st = stitch(body.at("stitch").get<std::string>());
      if (st->source.model_id != model || st->source.layer_name != layer_name) {
        throw ValidationError("stitch source " + st->source.str() + " does not match " + layer_x.str());
      }
      auto gen = cfg.registry->generator(st->target.model_id);
      const auto layer_y = gen->layer(st->target.layer_name).address;
      const auto x = request_image(body, *enc);
      const auto proto = protocol_for(model, layer_name);
      json out;
      queue
          .submit([&] {
            auto r = invert_via_gan(*enc, layer_x, *st, *gen, layer_y, x, seed);
            out = inversion_response(r, proto, x, body);
          })
          .get();
      send_json(res, 200, out);
      return;
    }

    GdConfig gd;
    gd.method = gd_method_from_string(method);
    gd.steps = body.value("steps", gd.steps);
    gd.seed = seed;
    gd.progress_every = cfg.progress_every;
    const auto x = request_image(body, *enc);
    gd.height = x.height();
    gd.width = x.width();
    gd.validate();
    const auto proto = protocol_for(model, layer_name);

    auto j = std::make_shared<Job>();
    j->request = echo_request(body);
    const auto id = new_run_id();
    {
      std::lock_guard lock(jobs_mutex);
      jobs[id] = j;
    }
    const int image_every = cfg.image_every;
    try {
      queue.submit([this, j, enc, layer_x, gd, x, proto, body, image_every] {
        if (j->cancel) {
          push_event(*j, json{{"type", "cancelled"}, {"step", 0}}, true);
          return;
        }
        try {
          const auto target = enc->extract_activations(layer_x, x);
          auto r = gd_invert(*enc, layer_x, target, gd, [&](const GdProgress& p) {
            json ev{{"type", "progress"}, {"step", p.step}, {"total", p.total}, {"loss", p.loss}};
            if (p.image.defined() && (p.step % image_every == 0 || p.step == p.total)) {
              ev["image"] = png_b64(ImageTensor(p.image));
            }
            push_event(*j, std::move(ev), false);
            return !j->cancel.load();
          });
          if (r.status == InversionStatus::cancelled) {
            push_event(*j, json{{"type", "cancelled"}, {"step", r.loss_trace.size()}}, true);
          } else {
            push_event(*j, json{{"type", "result"}, {"response", inversion_response(r, proto, x, body)}}, true);
          }
        } catch (const std::exception& e) {
          push_event(*j, json{{"type", "error"}, {"error", e.what()}}, true);
        }
      });
    } catch (const BusyError&) {
      std::lock_guard lock(jobs_mutex);
      jobs.erase(id);
      throw;
    }
    send_json(res, 202, json{{"job_id", id}, {"events", "/api/jobs/" + id + "/events"}});
  }

  void handle_variations(const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    if (!body.contains("stitch")) throw ValidationError("variations need a stitch id");
    auto st = stitch(body.at("stitch").get<std::string>());
    const auto seeds = body.value("seeds", std::vector<uint64_t>{});
    if (seeds.empty()) throw ValidationError("seeds must be a non-empty list");
    if (seeds.size() > 256) throw ValidationError("at most 256 seeds per request");
    auto enc = cfg.registry->encoder(st->source.model_id);
    auto gen = cfg.registry->generator(st->target.model_id);
    const auto layer_x = enc->layer(st->source.layer_name).address;
    const auto layer_y = gen->layer(st->target.layer_name).address;
    const auto x = request_image(body, *enc);
    json images = json::array();
    double wall = 0;
    queue
        .submit([&] {
          const auto t0 = Clock::now();
          auto out = seed_variations(*enc, layer_x, *st, *gen, layer_y, x, seeds);
          wall = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
          for (const auto& img : out) images.push_back(png_b64(img));
        })
        .get();
    send_json(res, 200,
              json{{"images", images}, {"seeds", seeds}, {"original", png_b64(x)}, {"wall_time_ms", wall},
                   {"request", echo_request(body)}});
  }

  void routes() {
    svr.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    svr.Get("/api/health", guarded([](const httplib::Request&, httplib::Response& res) {
              send_json(res, 200, json{{"status", "ok"}});
            }));
    svr.Get("/api/models", guarded([this](const httplib::Request&, httplib::Response& res) {
              send_json(res, 200, cfg.registry->describe());
            }));
    svr.Get(R"(/api/models/([^/]+)/layers)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              send_json(res, 200, json(cfg.registry->list_layers(req.matches[1].str())));
            }));
    svr.Get("/api/stitches", guarded([this](const httplib::Request&, httplib::Response& res) {
              json out = json::array();
              if (std::filesystem::is_directory(cfg.stitch_dir)) {
                std::vector<std::filesystem::path> files;
                for (const auto& e : std::filesystem::directory_iterator(cfg.stitch_dir)) {
                  if (e.path().extension() == ".json") files.push_back(e.path());
                }
                std::sort(files.begin(), files.end());
                for (const auto& f : files) {
                  const auto id = f.stem().string();
                  try {
                    auto st = stitch(id);
                    out.push_back({{"id", id}, {"source", st->source}, {"target", st->target},
                                   {"best_epoch", st->best_epoch}, {"trained_samples", st->trained_samples},
                                   {"bias", st->has_bias()}});
                  } catch (const Error& e) {
                    out.push_back({{"id", id}, {"error", e.what()}});
                  }
                }
              }
              send_json(res, 200, out);
            }));
    svr.Get("/api/reports", guarded([this](const httplib::Request&, httplib::Response& res) {
              json out = json::array();
              if (std::filesystem::is_directory(cfg.report_dir)) {
                std::vector<std::filesystem::path> files;
                for (const auto& e : std::filesystem::directory_iterator(cfg.report_dir)) {
                  if (e.path().extension() == ".json") files.push_back(e.path());
                }
                std::sort(files.begin(), files.end());
                for (const auto& f : files) {
                  json entry{{"id", f.stem().string()}, {"bytes", std::filesystem::file_size(f)}};
                  try {
                    entry["kind"] = json::parse(io::read_file(f)).value("kind", "unknown");
                  } catch (const json::exception&) {
                    entry["kind"] = "unreadable";
                  }
                  out.push_back(entry);
                }
              }
              send_json(res, 200, out);
            }));
    svr.Get(R"(/api/reports/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
              const auto id = req.matches[1].str();
              if (!safe_id(id)) throw NotFoundError("unknown report: " + id);
              const auto path = cfg.report_dir / (id + ".json");
              if (!std::filesystem::exists(path)) throw NotFoundError("unknown report: " + id);
              res.status = 200;
              res.set_content(io::read_file(path), "application/json");
            }));
    svr.Post("/api/invert", guarded([this](const httplib::Request& req, httplib::Response& res) {
               handle_invert(req, res);
             }));
    svr.Post("/api/variations", guarded([this](const httplib::Request& req, httplib::Response& res) {
               handle_variations(req, res);
             }));
    svr.Get(R"(/api/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
              auto j = job(req.matches[1].str());
              std::lock_guard lock(j->mutex);
              json out{{"job_id", req.matches[1].str()}, {"done", j->done}, {"events", j->events.size()},
                       {"request", j->request}};
              if (!j->events.empty()) out["last"] = j->events.back();
              send_json(res, 200, out);
            }));
    auto cancel = guarded([this](const httplib::Request& req, httplib::Response& res) {
      auto j = job(req.matches[1].str());
      j->cancel = true;
      send_json(res, 202, json{{"job_id", req.matches[1].str()}, {"cancel_requested", true}});
    });
    svr.Post(R"(/api/jobs/([^/]+)/cancel)", cancel);
    svr.Delete(R"(/api/jobs/([^/]+))", cancel);
    svr.Get(R"(/api/jobs/([^/]+)/events)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              auto j = job(req.matches[1].str());
              res.set_header("Cache-Control", "no-cache");
              res.set_chunked_content_provider(
                  "text/event-stream", [j, next = size_t{0}](size_t, httplib::DataSink& sink) mutable {
                    std::unique_lock lock(j->mutex);
                    j->cv.wait_for(lock, std::chrono::milliseconds(500), [&] { return next < j->events.size(); });
                    while (next < j->events.size()) {
                      const auto& ev = j->events[next++];
                      const auto text = "event: " + ev.value("type", std::string("message")) + "\ndata: " + ev.dump() + "\n\n";
                      lock.unlock();
                      if (!sink.write(text.data(), text.size())) return false;
                      lock.lock();
                    }
                    if (j->done && next >= j->events.size()) sink.done();
                    return true;
                  });
            }));
    if (!cfg.static_dir.empty()) svr.set_mount_point("/", cfg.static_dir.string());
  }
};

Service::Service(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->svr.bind_to_any_port(host);
  } else if (!impl_->svr.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->svr.listen_after_bind(); });
  impl_->svr.wait_until_ready();
  return bound;
}

void Service::serve(const std::string& host, int port) {
  if (!impl_->svr.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->svr.listen_after_bind();
}

void Service::stop() {
  if (!impl_) return;
  {
    std::lock_guard lock(impl_->jobs_mutex);
    for (auto& [id, j] : impl_->jobs) j->cancel = true;
  }
  impl_->svr.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

httplib::Server& Service::server() { return impl_->svr; }

}  // namespace stitchviz
