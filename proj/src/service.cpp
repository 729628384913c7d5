#include "dinp/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <set>

namespace dinp {

using json = nlohmann::json;

namespace {

std::string dims(int h, int w) { return std::to_string(h) + "x" + std::to_string(w); }

std::string channel_field(const char* name, int k) { return std::string(name) + "[" + std::to_string(k) + "]"; }

Gray8 decode_image_field(const json& v, const std::string& field) {
  if (!v.is_string()) throw ApiError(400, field, field + " must be a base64 PNG string");
  try {
    return decode_png(base64_decode(v.get<std::string>()));
  } catch (const std::exception& e) {
    throw ApiError(400, field, field + " is not a base64 PNG: " + e.what());
  }
}

// Accepts a 5-element array (null for absent) or an object keyed "0".."4".
std::array<const json*, kRoiChannels> per_channel(const json& v, const char* field) {
  std::array<const json*, kRoiChannels> out{};
  if (v.is_array()) {
    if (v.size() > kRoiChannels)
      throw ApiError(400, field, std::string(field) + " has more than " + std::to_string(kRoiChannels) + " entries");
    for (std::size_t k = 0; k < v.size(); ++k)
      if (!v[k].is_null()) out[k] = &v[k];
  } else if (v.is_object()) {
    for (const auto& [key, item] : v.items()) {
      if (key.size() != 1 || key[0] < '0' || key[0] >= '0' + kRoiChannels)
        throw ApiError(400, std::string(field) + "." + key, "channel key '" + key + "' must be 0..4");
      if (!item.is_null()) out[key[0] - '0'] = &item;
    }
  } else if (!v.is_null()) {
    throw ApiError(400, field, std::string(field) + " must be an array or an object keyed by channel");
  }
  return out;
}

template <typename T>
T field_value(const json& body, const char* key) {
  try {
    return body.at(key).get<T>();
  } catch (const json::exception&) {
    throw ApiError(400, key, std::string("field '") + key + "' has the wrong type");
  }
}

ApiResponse error_response(int status, const std::string& field, const std::string& message) {
  json body{{"error", message}};
  if (!field.empty()) body["field"] = field;
  return {status, std::move(body)};
}

}  // namespace

InpaintRequest build_request(const RawInpaintInput& raw) {
  if (raw.image.height <= 0 || raw.image.width <= 0) throw ApiError(400, "image", "image is empty");
  InpaintRequest req;
  req.image = SliceImage::from_gray8(raw.image);
  req.roi = RoiTensor(raw.image.height, raw.image.width);
  for (int k = 0; k < kRoiChannels; ++k) {
    const auto& m = raw.masks[k];
    if (m) {
      if (m->height != raw.image.height || m->width != raw.image.width)
        throw ApiError(400, channel_field("masks", k),
                       "mask for channel " + std::to_string(k) + " is " + dims(m->height, m->width) +
                           " but the image is " + dims(raw.image.height, raw.image.width));
      req.roi.channels[k] = Mask::from_gray8(*m);
    }
    const bool filled = req.roi.channels[k].any();
    const ChannelMode mode = raw.modes[k].value_or(filled ? ChannelMode::freeform : ChannelMode::empty);
    if (mode == ChannelMode::empty && filled)
      throw ApiError(400, channel_field("modes", k),
                     "channel " + std::to_string(k) + " has mask pixels but mode 'empty'");
    if (mode != ChannelMode::empty && !filled)
      throw ApiError(400, channel_field("modes", k),
                     "channel " + std::to_string(k) + " has mode '" + to_string(mode) + "' but no mask pixels");
    req.cv.codes[k] = static_cast<std::uint8_t>(mode);
  }
  try {
    req.roi.validate();
  } catch (const RoiError& e) {
    throw ApiError(400, "masks", e.what());
  }
  if (req.roi.union_mask().none()) throw ApiError(422, "masks", "empty union mask: no ROI pixels to inpaint");
  req.sampler = raw.sampler;
  req.seed = raw.seed;
  return req;
}

std::vector<std::uint8_t> result_png(const InpaintResult& result) { return encode_png(result.image.to_gray8()); }

json to_json(const CheckpointInfo& info) {
  return {{"id", info.id}, {"step", info.step}, {"image_size", info.image_size}, {"schedule_steps", info.schedule_steps}};
}

ParsedPayload parse_inpaint_payload(const json& body) {
  static const std::set<std::string> kKeys{"image", "masks", "modes", "weight", "sampler",
                                           "steps", "eta",   "rule",  "seed",   "checkpoint"};
  if (!body.is_object()) throw ApiError(400, "body", "payload must be a JSON object");
  for (const auto& [key, _] : body.items())
    if (!kKeys.count(key)) throw ApiError(400, key, "unknown field '" + key + "'");
  if (!body.contains("image")) throw ApiError(400, "image", "field 'image' is required");

  ParsedPayload p;
  auto& raw = p.raw;
  raw.image = decode_image_field(body["image"], "image");
  if (body.contains("masks")) {
    const auto masks = per_channel(body["masks"], "masks");
    for (int k = 0; k < kRoiChannels; ++k)
      if (masks[k]) raw.masks[k] = decode_image_field(*masks[k], channel_field("masks", k));
  }
  if (body.contains("modes")) {
    const auto modes = per_channel(body["modes"], "modes");
    for (int k = 0; k < kRoiChannels; ++k) {
      if (!modes[k]) continue;
      const std::string field = channel_field("modes", k);
      if (!modes[k]->is_string()) throw ApiError(400, field, field + " must be a string");
      try {
        raw.modes[k] = parse_channel_mode(modes[k]->get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ApiError(400, field, e.what());
      }
    }
  }
  auto& sc = raw.sampler;
  try {
    if (body.contains("sampler")) sc.kind = parse_sampler_kind(field_value<std::string>(body, "sampler"));
  } catch (const ApiError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ApiError(400, "sampler", e.what());
  }
  try {
    if (body.contains("rule")) sc.rule = parse_guidance_rule(field_value<std::string>(body, "rule"));
  } catch (const ApiError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ApiError(400, "rule", e.what());
  }
  if (body.contains("weight")) {
    sc.weight = field_value<double>(body, "weight");
    if (!(sc.weight >= 0.0) || !std::isfinite(sc.weight)) throw ApiError(400, "weight", "weight must be >= 0");
  }
  if (body.contains("eta")) {
    sc.eta = field_value<double>(body, "eta");
    if (!(sc.eta >= 0.0 && sc.eta <= 1.0)) throw ApiError(400, "eta", "eta must lie in [0,1]");
  }
  if (body.contains("steps")) {
    if (!body["steps"].is_number_integer()) throw ApiError(400, "steps", "steps must be an integer");
    sc.steps = field_value<int>(body, "steps");
    p.steps_given = true;
  }
  if (body.contains("seed")) {
    const json& s = body["seed"];
    if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<std::int64_t>() < 0)) throw ApiError(400, "seed", "seed must be a non-negative integer");
    raw.seed = field_value<std::uint64_t>(body, "seed");
  }
  if (body.contains("checkpoint")) p.checkpoint = field_value<std::string>(body, "checkpoint");
  return p;
}

ModelRegistry::ModelRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::vector<CheckpointInfo> ModelRegistry::list() {
  std::vector<CheckpointInfo> out;
  std::vector<std::string> errors;
  std::map<std::filesystem::path, Scanned> seen;
  {
    std::lock_guard lock(mu_);
    seen = scanned_;
  }
  std::map<std::filesystem::path, Scanned> next;
  std::error_code ec;
  if (std::filesystem::is_directory(dir_, ec)) {
    for (const auto& entry : std::filesystem::directory_iterator(dir_, ec)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".ckpt") continue;
      Scanned s;
      s.mtime = entry.last_write_time(ec);
      s.size = entry.file_size(ec);
      const auto hit = seen.find(entry.path());
      if (hit != seen.end() && hit->second.mtime == s.mtime && hit->second.size == s.size) {
        next.emplace(entry.path(), hit->second);
        out.push_back(hit->second.info);
        continue;
      }
      try {
        const json m = read_checkpoint_manifest(entry.path());
        CheckpointInfo& info = s.info;
        info.id = entry.path().stem().string();
        info.path = entry.path();
        info.step = m.at("step").get<std::int64_t>();
        info.image_size = m.at("config").at("unet").at("image_size").get<int>();
        info.schedule_steps = m.at("config").at("diffusion").at("steps").get<int>();
        out.push_back(info);
        next.emplace(entry.path(), std::move(s));
      } catch (const std::exception& e) {
        errors.push_back(entry.path().filename().string() + ": " + e.what());
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::lock_guard lock(mu_);
  scanned_ = std::move(next);
  errors_ = std::move(errors);
  return out;
}

std::shared_ptr<const ModelRegistry::Snapshot> ModelRegistry::snapshot() const {
  std::lock_guard lock(mu_);
  return models_;
}

void ModelRegistry::load_all() {
  std::lock_guard load_lock(load_mu_);
  const auto current = snapshot();
  auto next = std::make_shared<Snapshot>(*current);
  std::vector<std::string> errors;
  for (const auto& info : list()) {
    if (next->count(info.id)) continue;
    try {
      next->emplace(info.id, InferenceModel::load(info.path));
    } catch (const std::exception& e) {
      errors.push_back(info.id + ": " + e.what());
    }
  }
  std::lock_guard lock(mu_);
  models_ = std::move(next);
  errors_.insert(errors_.end(), errors.begin(), errors.end());
}

std::shared_ptr<const InferenceModel> ModelRegistry::find(const std::string& id) const {
  const auto snap = snapshot();
  const auto it = snap->find(id);
  return it == snap->end() ? nullptr : it->second;
}

bool ModelRegistry::known(const std::string& id) {
  const auto all = list();
  return std::any_of(all.begin(), all.end(), [&](const auto& i) { return i.id == id; });
}

std::optional<std::string> ModelRegistry::default_id() {
  const auto all = list();
  if (all.empty()) return std::nullopt;
  return std::max_element(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.step < b.step; })->id;
}

bool ModelRegistry::ready() const { return !snapshot()->empty(); }

std::vector<std::string> ModelRegistry::load_errors() const {
  std::lock_guard lock(mu_);
  return errors_;
}

InferenceQueue::InferenceQueue(std::size_t depth, int workers) : depth_(depth) {
  if (depth == 0 || workers < 1) throw std::invalid_argument("queue depth and worker count must be positive");
  for (int i = 0; i < workers; ++i) workers_.emplace_back([this] { run(); });
}

InferenceQueue::~InferenceQueue() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& w : workers_) w.join();
}

std::optional<std::future<void>> InferenceQueue::submit(std::function<void()> job) {
  std::packaged_task<void()> task(std::move(job));
  auto fut = task.get_future();
  {
    std::lock_guard lock(mu_);
    if (stopping_ || jobs_.size() >= depth_) return std::nullopt;
    jobs_.push_back(std::move(task));
  }
  cv_.notify_one();
  return fut;
}

std::size_t InferenceQueue::pending() const {
  std::lock_guard lock(mu_);
  return jobs_.size();
}

void InferenceQueue::run() {
  for (;;) {
    std::packaged_task<void()> task;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stopping_ || !jobs_.empty(); });
      if (jobs_.empty()) return;
      task = std::move(jobs_.front());
      jobs_.pop_front();
    }
    task();
  }
}

InpaintService::InpaintService(ServiceOptions options)
    : options_(std::move(options)), registry_(options_.checkpoint_dir), queue_(options_.queue_depth, options_.workers) {}

void InpaintService::start_loading() {
  if (loaded_.valid()) return;
  loaded_ = std::async(std::launch::async, [this] { registry_.load_all(); }).share();
}

void InpaintService::wait_until_loaded() {
  start_loading();
  loaded_.wait();
}

ApiResponse InpaintService::inpaint(const std::string& text) {
  try {
    json body;
    try {
      body = json::parse(text);
    } catch (const json::parse_error& e) {
      return error_response(400, "body", std::string("malformed JSON: ") + e.what());
    }
    ParsedPayload p = parse_inpaint_payload(body);

    const bool loading = loaded_.valid() && loaded_.wait_for(std::chrono::seconds(0)) != std::future_status::ready;
    std::string id;
    if (p.checkpoint) {
      id = *p.checkpoint;
      if (!registry_.known(id)) return error_response(404, "checkpoint", "unknown checkpoint '" + id + "'");
    } else {
      const auto d = registry_.default_id();
      if (!d) return error_response(503, "", "no checkpoint available");
      id = *d;
    }
    auto model = registry_.find(id);
    if (!model && !loading) {
      registry_.load_all();
      model = registry_.find(id);
    }
    if (!model) return error_response(503, "", loading ? "model still loading" : "checkpoint '" + id + "' failed to load");

    auto& sc = p.raw.sampler;
    const int T = model->schedule().steps();
    if (sc.kind == SamplerKind::ddpm && !p.steps_given) sc.steps = T;
    try {
      sc.validate(T);
    } catch (const std::invalid_argument& e) {
      return error_response(400, "steps", e.what());
    }
    InpaintRequest req = build_request(p.raw);
    if (std::max(req.image.height, req.image.width) != model->image_size())
      return error_response(400, "image",
                            "image is " + dims(req.image.height, req.image.width) + " but checkpoint '" + id +
                                "' expects side " + std::to_string(model->image_size()));
    try {
      validate_request(req, *model);
    } catch (const InpaintError& e) {
      return error_response(400, "", e.what());
    }

    InpaintResult result;
    auto fut = queue_.submit([&] { result = dinp::inpaint(*model, req); });
    if (!fut) return error_response(429, "", "inference queue is full");
    try {
      fut->get();
    } catch (const std::exception& e) {
      return error_response(500, "", std::string("inference failed: ") + e.what());
    }
    json codes = json::array();
    for (auto c : result.cv.codes) codes.push_back(c);
    return {200,
            {{"image", base64_encode(result_png(result))},
             {"steps", result.steps_executed},
             {"duration_ms", result.seconds * 1000.0},
             {"checkpoint", id},
             {"seed", result.seed},
             {"weight", result.sampler.weight},
             {"sampler", to_string(result.sampler.kind)},
             {"eta", result.sampler.eta},
             {"rule", to_string(result.sampler.rule)},
             {"conditioning", codes}}};
  } catch (const ApiError& e) {
    return error_response(e.status(), e.field(), e.what());
  } catch (const std::exception& e) {
    return error_response(500, "", e.what());
  }
}

ApiResponse InpaintService::checkpoints() {
  json list = json::array();
  for (const auto& info : registry_.list()) list.push_back(to_json(info));
  return {200, {{"checkpoints", list}}};
}

ApiResponse InpaintService::health() const {
  return {200, {{"ok", true}, {"version", kVersion}, {"ready", registry_.ready()}}};
}

struct HttpServer::Impl {
  InpaintService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(InpaintService& s) : service(s) {
    server.set_payload_max_length(64u << 20);
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    auto send = [](httplib::Response& res, const ApiResponse& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Post("/api/v1/inpaint", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, service.inpaint(req.body));
    });
    server.Get("/api/v1/checkpoints",
               [this, send](const httplib::Request&, httplib::Response& res) { send(res, service.checkpoints()); });
    server.Get("/api/v1/health",
               [this, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
    server.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  }
};

HttpServer::HttpServer(InpaintService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

bool HttpServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace dinp
