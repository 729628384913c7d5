#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dinp/engine.hpp"
#include "dinp/image.hpp"

namespace dinp {

inline constexpr const char* kVersion = "0.1.0";

/// Validation failure carrying the offending field and the HTTP status it maps to.
class ApiError : public std::invalid_argument {
 public:
  ApiError(int status, std::string field, const std::string& message)
      : std::invalid_argument(message), status_(status), field_(std::move(field)) {}
  int status() const noexcept { return status_; }
  const std::string& field() const noexcept { return field_; }

 private:
  int status_;
  std::string field_;
};

/// Transport-level inputs shared by the CLI and the HTTP API, so both paths
/// build identical requests from identical bytes.
struct RawInpaintInput {
  Gray8 image;
  std::array<std::optional<Gray8>, kRoiChannels> masks;
  /// Unset modes follow the mask: freeform when it has pixels, empty otherwise.
  std::array<std::optional<ChannelMode>, kRoiChannels> modes;
  SamplerConfig sampler;
  std::uint64_t seed = 0;
};

/// Throws ApiError: 400 for dimension or mode inconsistencies (field
/// "masks[k]" / "modes[k]"), 422 for an empty union.
InpaintRequest build_request(const RawInpaintInput& raw);

/// PNG bytes of an inpainting result.
std::vector<std::uint8_t> result_png(const InpaintResult& result);

struct CheckpointInfo {
  std::string id;
  std::filesystem::path path;
  std::int64_t step = 0;
  int image_size = 0;
  int schedule_steps = 0;
};

nlohmann::json to_json(const CheckpointInfo& info);

/// Checkpoints found in one directory, keyed by file stem. Loaded models are
/// published as an immutable snapshot; readers copy the pointer and never
/// block a reload.
class ModelRegistry {
 public:
  explicit ModelRegistry(std::filesystem::path dir);

  const std::filesystem::path& directory() const noexcept { return dir_; }
  /// Rescans the directory (manifests only).
  std::vector<CheckpointInfo> list();
  /// Loads every listed checkpoint not yet loaded, then swaps in a new snapshot.
  void load_all();
  /// nullptr while the checkpoint is known but not yet loaded.
  std::shared_ptr<const InferenceModel> find(const std::string& id) const;
  bool known(const std::string& id);
  /// Id of the highest-step checkpoint, if any.
  std::optional<std::string> default_id();
  bool ready() const;
  std::vector<std::string> load_errors() const;

 private:
  using Snapshot = std::map<std::string, std::shared_ptr<const InferenceModel>>;
  std::shared_ptr<const Snapshot> snapshot() const;

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::shared_ptr<const Snapshot> models_ = std::make_shared<Snapshot>();
  std::vector<std::string> errors_;
  std::mutex load_mu_;
  struct Scanned {
    std::filesystem::file_time_type mtime;
    std::uintmax_t size = 0;
    CheckpointInfo info;
  };
  // Manifest cache keyed by path; entries are reread when mtime or size change.
  std::map<std::filesystem::path, Scanned> scanned_;
};

/// Bounded FIFO of inference jobs drained by a fixed worker pool.
class InferenceQueue {
 public:
  InferenceQueue(std::size_t depth, int workers);
  ~InferenceQueue();
  InferenceQueue(const InferenceQueue&) = delete;
  InferenceQueue& operator=(const InferenceQueue&) = delete;

  /// Empty when the queue already holds `depth` waiting jobs.
  std::optional<std::future<void>> submit(std::function<void()> job);
  std::size_t pending() const;

 private:
  void run();

  std::size_t depth_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::packaged_task<void()>> jobs_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

struct ServiceOptions {
  std::filesystem::path checkpoint_dir;
  std::size_t queue_depth = 8;
  int workers = 1;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// Transport-independent handlers; the HTTP server only routes to these.
class InpaintService {
 public:
  explicit InpaintService(ServiceOptions options);

  /// Loads all checkpoints on a background thread; /health reports ready once done.
  void start_loading();
  void wait_until_loaded();

  ApiResponse inpaint(const std::string& body);
  ApiResponse checkpoints();
  ApiResponse health() const;

  ModelRegistry& registry() noexcept { return registry_; }
  InferenceQueue& queue() noexcept { return queue_; }

 private:
  ServiceOptions options_;
  ModelRegistry registry_;
  InferenceQueue queue_;
  std::shared_future<void> loaded_;
};

struct ParsedPayload {
  RawInpaintInput raw;
  std::optional<std::string> checkpoint;
  /// ddpm requests without "steps" run every step of the model's schedule.
  bool steps_given = false;
};

/// Decodes an inpaint payload; throws ApiError(400) naming the bad field.
ParsedPayload parse_inpaint_payload(const nlohmann::json& body);

/// HTTP front end. start() binds and serves on a background thread.
class HttpServer {
 public:
  explicit HttpServer(InpaintService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// port 0 picks a free port; returns the bound port.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dinp
