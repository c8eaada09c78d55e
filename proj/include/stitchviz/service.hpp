#pragma once

// HTTP API over the registry, the stitch and report stores and the
// inversion methods. Inference runs on one worker thread behind a bounded
// queue; gradient-descent inversions run as jobs with event streams.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>

#include "stitchviz/dataset.hpp"
#include "stitchviz/models.hpp"
#include "stitchviz/stitch.hpp"

namespace httplib {
class Server;
}

namespace stitchviz {

class BusyError : public Error {
 public:
  using Error::Error;
};

class InferenceQueue {
 public:
  explicit InferenceQueue(size_t depth);
  ~InferenceQueue();
  InferenceQueue(const InferenceQueue&) = delete;
  InferenceQueue& operator=(const InferenceQueue&) = delete;

  // Throws BusyError when `depth` tasks are already waiting.
  std::future<void> submit(std::function<void()> task);
  size_t pending() const;

 private:
  void run();

  size_t depth_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::packaged_task<void()>> tasks_;
  bool stopping_ = false;
  std::thread worker_;
};

struct ServiceConfig {
  std::shared_ptr<ModelRegistry> registry;
  std::filesystem::path stitch_dir;  // <id>.json + <id>.bin
  std::filesystem::path report_dir;  // <run_id>.json
  std::string dataset;               // optional, for sample_id requests
  std::string test_encoder;          // optional, enables metrics in responses
  std::filesystem::path static_dir;  // optional viewer assets
  size_t queue_depth = 8;
  int progress_every = 16;
  int image_every = 64;  // intermediate images in job events
  double job_ttl_s = 600.0;
};

// Reads STITCHVIZ_REGISTRY and lays the stores out next to the manifest.
ServiceConfig service_config_from_env();

// Host and port from STITCHVIZ_ADDR, default 127.0.0.1:8787.
std::pair<std::string, int> listen_address_from_env();

class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();

  // Binds and serves on a background thread; port 0 picks a free port.
  // Returns the bound port.
  int start(const std::string& host, int port);
  // Blocks until stop().
  void serve(const std::string& host, int port);
  void stop();

  httplib::Server& server();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stitchviz
