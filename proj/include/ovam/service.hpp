#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "ovam/config.hpp"
#include "ovam/dataset.hpp"
#include "ovam/heatmap_io.hpp"
#include "ovam/mask.hpp"
#include "ovam/optimizer.hpp"
#include "ovam/token_io.hpp"
#include "ovam/trace_io.hpp"

namespace ovam {

/// HTTP status for a library error.
inline int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::argument:
    case ErrorKind::dimension:
    case ErrorKind::numeric_input:
    case ErrorKind::configuration:
    case ErrorKind::over_length: return 422;
    case ErrorKind::not_found: return 404;
    case ErrorKind::conflict: return 409;
    case ErrorKind::scorer_unavailable:
    case ErrorKind::load: return 503;
    default: return 500;
  }
}

/// State and routes of the HTTP service. Everything a request produces is
/// also written below `data_dir`:
///
///   sessions/<id>/trace/            trace container
///   sessions/<id>/session.json      {id, backend_id, created_at, prompt, seed, steps}
///   sessions/<id>/annotation.png    0/255 mask
///   sessions/<id>/heatmaps/hN.*     f32 raster, PNG, JSON
///   sessions/<id>/masks/mN.*        mask PNG + sidecar
///   tokens/<id>/                    token files
class Service {
 public:
  Service(std::shared_ptr<const Backend> backend, std::filesystem::path data_dir, Settings settings = {})
      : backend_(std::move(backend)), root_(std::move(data_dir)), settings_(std::move(settings)) {
    std::filesystem::create_directories(root_ / "sessions");
    std::filesystem::create_directories(root_ / "tokens");
    for (const auto& d : std::filesystem::directory_iterator(root_ / "sessions")) bump_counter(d.path().filename().string());
    for (const auto& d : std::filesystem::directory_iterator(root_ / "tokens")) bump_counter(d.path().filename().string());
    refiner_ = make_refiner(settings_.refiner, settings_.crf);
    install();
  }

  ~Service() {
    stop();
    std::vector<std::shared_ptr<Job>> jobs;
    {
      std::lock_guard lock(jobs_mutex_);
      for (auto& [id, j] : jobs_) jobs.push_back(j);
    }
    for (auto& j : jobs) j->cancel = true;
    for (auto& j : jobs)
      if (j->worker.joinable()) j->worker.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  httplib::Server& server() { return server_; }

  /// Binds to an ephemeral port and returns it.
  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  bool run() { return server_.listen_after_bind(); }
  void stop() {
    if (server_.is_running()) server_.stop();
  }

 private:
  struct Session {
    std::string id;
    std::shared_ptr<const DenoisingTrace> trace;
    std::string created_at;
    std::mutex mutex;  // serializes writes under the session directory
    std::optional<MaskGrid> annotation;
    std::string active_job;
    std::size_t heatmaps = 0, masks = 0;
  };

  struct Job {
    std::string id;
    std::vector<std::string> sessions;
    std::string cls;
    std::mutex mutex;
    std::condition_variable cv;
    std::vector<nlohmann::json> events;  // {epoch, loss, lr}
    std::string state = "running";       // running | done | failed | cancelled
    std::atomic<bool> cancel{false};
    nlohmann::json result;
    std::thread worker;
  };

  using Req = httplib::Request;
  using Res = httplib::Response;

  static void send_json(Res& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_error(Res& res, int status, const std::string& code, const std::string& msg) {
    send_json(res, {{"error", code}, {"message", msg}}, status);
  }

  template <typename F>
  auto guarded(F f) {
    return [f = std::move(f)](const Req& req, Res& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_error(res, http_status(e.kind()), std::string(e.code()), e.what());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 422, "invalid_json", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal_error", e.what());
      }
    };
  }

  static nlohmann::json body_json(const Req& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body);
    require(j.is_object(), ErrorKind::argument, "request body must be a JSON object");
    return j;
  }

  void bump_counter(const std::string& name) {
    const auto dash = name.find('-');
    if (dash == std::string::npos) return;
    try {
      counter_ = std::max<std::size_t>(counter_, std::stoul(name.substr(dash + 1)) + 1);
    } catch (const std::exception&) {
    }
  }

  std::string next_id(const std::string& prefix) {
    std::lock_guard lock(counter_mutex_);
    return prefix + "-" + format_id(counter_++);
  }

  static std::string now_iso() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  static bool safe_id(const std::string& id) {
    return !id.empty() && std::all_of(id.begin(), id.end(), [](unsigned char c) { return std::isalnum(c) || c == '-' || c == '_'; });
  }

  std::shared_ptr<Session> session(const std::string& id) {
    {
      std::shared_lock lock(sessions_mutex_);
      if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
    }
    const auto dir = root_ / "sessions" / id;
    if (!safe_id(id) || !std::filesystem::exists(dir / "trace" / "trace.json"))
      throw Error(ErrorKind::not_found, "unknown session '" + id + "'");
    auto s = std::make_shared<Session>();
    s->id = id;
    s->trace = std::make_shared<const DenoisingTrace>(load_trace(dir / "trace"));
    if (std::filesystem::exists(dir / "session.json"))
      s->created_at = nlohmann::json::parse(read_file_text(dir / "session.json")).value("created_at", "");
    if (std::filesystem::exists(dir / "annotation.png")) s->annotation = read_mask(dir / "annotation.png").grid;
    for (const char* sub : {"heatmaps", "masks"})
      if (std::filesystem::exists(dir / sub))
        for (const auto& f : std::filesystem::directory_iterator(dir / sub))
          if (f.path().extension() == ".png") ++(std::string(sub) == "heatmaps" ? s->heatmaps : s->masks);
    std::unique_lock lock(sessions_mutex_);
    return sessions_.try_emplace(id, s).first->second;
  }

  std::shared_ptr<Job> job(const std::string& id) {
    std::lock_guard lock(jobs_mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorKind::not_found, "unknown optimization job '" + id + "'");
    return it->second;
  }

  TokenFile token_file(const std::string& id) {
    if (!safe_id(id) || !std::filesystem::exists(root_ / "tokens" / id / "token.json"))
      throw Error(ErrorKind::not_found, "unknown token '" + id + "'");
    return load_token(root_ / "tokens" / id);
  }

  struct Attribution {
    TokenEmbeddingMatrix x;
    std::size_t index = 1;
    bool optimized = false;
  };

  /// {attribution_prompt | token_id, token_index}; `token` may carry either.
  Attribution attribution(const nlohmann::json& spec) {
    nlohmann::json s = spec;
    if (spec.contains("token")) {
      const auto& t = spec["token"];
      if (t.is_object()) s = t;
      else if (t.is_string()) {
        const auto name = t.get<std::string>();
        if (safe_id(name) && std::filesystem::exists(root_ / "tokens" / name / "token.json")) s["token_id"] = name;
        else s["attribution_prompt"] = name;
      }
      if (spec.contains("token_index") && !s.contains("token_index")) s["token_index"] = spec["token_index"];
    }
    Attribution a;
    if (s.contains("token_id")) {
      a.x = token_file(s["token_id"].get<std::string>()).tokens;
      a.optimized = true;
    } else if (s.contains("attribution_prompt")) {
      a.x = backend_->encode_text(s["attribution_prompt"].get<std::string>());
    } else {
      throw Error(ErrorKind::argument, "give attribution_prompt or token_id");
    }
    if (s.contains("token_index")) {
      const auto& v = s["token_index"];
      require(v.is_number_integer() && v.get<long long>() >= 0, ErrorKind::argument, "token_index must be a non-negative integer");
      a.index = v.get<std::size_t>();
    }
    require(a.index < a.x.n_tokens(), ErrorKind::argument,
            "token_index " + std::to_string(a.index) + " out of range for " + std::to_string(a.x.n_tokens()) + " tokens");
    return a;
  }

  SelectionConfig selection(const nlohmann::json& body) const {
    SelectionConfig sel = settings_.selection;
    if (!body.contains("selection")) return sel;
    const auto& s = body["selection"];
    require(s.is_object(), ErrorKind::argument, "selection must be an object");
    if (s.contains("blocks")) sel.blocks = s["blocks"].get<std::vector<std::string>>();
    if (s.contains("timesteps")) sel.timesteps = parse_timestep_strategy(s["timesteps"].get<std::string>());
    if (s.contains("pivot")) sel.pivot = s["pivot"].get<int>();
    if (s.contains("heads")) sel.heads = s["heads"].get<std::vector<int>>();
    if (s.contains("normalization")) sel.normalization = parse_normalization(s["normalization"].get<std::string>());
    if (s.contains("width")) sel.output_w = s["width"].get<std::size_t>();
    if (s.contains("height")) sel.output_h = s["height"].get<std::size_t>();
    return sel;
  }

  static double unit_param(const nlohmann::json& body, const char* key, double fallback) {
    if (!body.contains(key)) return fallback;
    require(body[key].is_number(), ErrorKind::argument, std::string(key) + " must be a number");
    const double v = body[key].get<double>();
    require(v > 0.0 && v <= 1.0, ErrorKind::argument, std::string(key) + " must be in (0, 1], got " + body[key].dump());
    return v;
  }

  void install() {
    server_.Post("/sessions", guarded([this](const Req& req, Res& res) { create_session(req, res); }));
    server_.Get(R"(/sessions/([A-Za-z0-9_-]+))", guarded([this](const Req& req, Res& res) {
                  auto s = session(req.matches[1]);
                  send_json(res, {{"id", s->id},
                                  {"backend_id", s->trace->backend_id},
                                  {"created_at", s->created_at},
                                  {"prompt", s->trace->prompt},
                                  {"seed", s->trace->seed},
                                  {"width", s->trace->image.width},
                                  {"height", s->trace->image.height},
                                  {"image_url", "/sessions/" + s->id + "/image.png"},
                                  {"has_annotation", s->annotation.has_value()}});
                }));
    server_.Get(R"(/sessions/([A-Za-z0-9_-]+)/image\.png)", guarded([this](const Req& req, Res& res) {
                  auto s = session(req.matches[1]);
                  const auto bytes = read_file_bytes(root_ / "sessions" / s->id / "trace" / "image.png");
                  res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/png");
                }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/heatmap)",
                 guarded([this](const Req& req, Res& res) { heatmap(req, res); }));
    server_.Post(R"(/sessions/([A-Za-z0-9_-]+)/mask)", guarded([this](const Req& req, Res& res) { mask(req, res); }));
    server_.Get(R"(/sessions/([A-Za-z0-9_-]+)/(heatmaps|masks)/([A-Za-z0-9_-]+\.(png|f32|json)))",
                guarded([this](const Req& req, Res& res) { artifact(req, res); }));
    server_.Put(R"(/sessions/([A-Za-z0-9_-]+)/annotation)",
                guarded([this](const Req& req, Res& res) { put_annotation(req, res); }));
    server_.Get(R"(/sessions/([A-Za-z0-9_-]+)/annotation)", guarded([this](const Req& req, Res& res) {
                  auto s = session(req.matches[1]);
                  std::lock_guard lock(s->mutex);
                  if (!s->annotation) throw Error(ErrorKind::not_found, "session has no annotation");
                  const auto bytes = encode_mask_png({*s->annotation, ""});
                  res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/png");
                }));
    server_.Post("/optimizations", guarded([this](const Req& req, Res& res) { start_optimization(req, res); }));
    server_.Get(R"(/optimizations/([A-Za-z0-9_-]+))", guarded([this](const Req& req, Res& res) {
                  auto j = job(req.matches[1]);
                  std::lock_guard lock(j->mutex);
                  send_json(res, {{"job_id", j->id},
                                  {"state", j->state},
                                  {"class", j->cls},
                                  {"session_ids", j->sessions},
                                  {"epochs_done", j->events.size()},
                                  {"result", j->result}});
                }));
    server_.Delete(R"(/optimizations/([A-Za-z0-9_-]+))", guarded([this](const Req& req, Res& res) {
                     auto j = job(req.matches[1]);
                     j->cancel = true;
                     res.status = 202;
                   }));
    server_.Get(R"(/optimizations/([A-Za-z0-9_-]+)/events)",
                guarded([this](const Req& req, Res& res) { events(req, res); }));
    server_.Get("/tokens", guarded([this](const Req&, Res& res) { list_tokens(res); }));
    server_.Post("/tokens", guarded([this](const Req& req, Res& res) { create_token(req, res); }));
    server_.Get(R"(/tokens/([A-Za-z0-9_-]+))", guarded([this](const Req& req, Res& res) {
                  const std::string id = req.matches[1];
                  const auto tf = token_file(id);
                  auto j = token_metadata(tf);
                  j["id"] = id;
                  j["rows"] = nlohmann::json::array();
                  for (std::size_t k = 0; k < tf.tokens.n_tokens(); ++k) {
                    const auto r = tf.tokens.row(k);
                    j["rows"].push_back(std::vector<double>(r.begin(), r.end()));
                  }
                  send_json(res, j);
                }));
    server_.Delete(R"(/tokens/([A-Za-z0-9_-]+))", guarded([this](const Req& req, Res& res) {
                     const std::string id = req.matches[1];
                     token_file(id);
                     std::filesystem::remove_all(root_ / "tokens" / id);
                     res.status = 204;
                   }));
  }

  void create_session(const Req& req, Res& res) {
    const auto body = body_json(req);
    const std::string prompt = body.value("prompt", "");
    const std::int64_t seed = body.value("seed", std::int64_t{0});
    int steps = body.value("steps", settings_.steps > 0 ? settings_.steps : backend_->default_timesteps());
    require(steps >= 1, ErrorKind::argument, "steps must be at least 1");
    auto trace = std::make_shared<const DenoisingTrace>(backend_->generate_with_trace(prompt, seed, steps));
    auto s = std::make_shared<Session>();
    s->id = next_id("s");
    s->trace = trace;
    s->created_at = now_iso();
    const auto dir = root_ / "sessions" / s->id;
    save_trace(*trace, dir / "trace");
    write_file_text(dir / "session.json", nlohmann::json{{"id", s->id},
                                                         {"backend_id", trace->backend_id},
                                                         {"created_at", s->created_at},
                                                         {"prompt", prompt},
                                                         {"seed", seed},
                                                         {"steps", steps}}
                                                  .dump(2));
    {
      std::unique_lock lock(sessions_mutex_);
      sessions_[s->id] = s;
    }
    send_json(res, {{"id", s->id}, {"image_url", "/sessions/" + s->id + "/image.png"}}, 201);
  }

  void heatmap(const Req& req, Res& res) {
    auto s = session(req.matches[1]);
    const auto body = body_json(req);
    const auto a = attribution(body);
    const double tau = unit_param(body, "tau", a.optimized ? settings_.optimized.tau : settings_.natural.tau);
    const auto h = compute_ovam(*s->trace, a.x, selection(body));
    const auto stats = heatmap_stats(h.maps[a.index], tau);
    std::lock_guard lock(s->mutex);
    const std::string name = "h" + std::to_string(s->heatmaps++);
    const std::string base = "/sessions/" + s->id + "/heatmaps/" + name;
    write_heatmap(root_ / "sessions" / s->id / "heatmaps" / name, h, a.index);
    send_json(res, {{"heatmap_url", base + ".png"},
                    {"raster_url", base + ".f32"},
                    {"metadata_url", base + ".json"},
                    {"label", h.labels[a.index]},
                    {"width", h.width()},
                    {"height", h.height()},
                    {"stats", {{"max", stats.max}, {"area_at_tau", stats.area_at_tau}, {"tau", tau}}}});
  }

  void mask(const Req& req, Res& res) {
    auto s = session(req.matches[1]);
    const auto body = body_json(req);
    const auto a = attribution(body);
    BinarizationParams p = a.optimized ? settings_.optimized : settings_.natural;
    p.tau = unit_param(body, "tau", p.tau);
    p.alpha = unit_param(body, "alpha", p.alpha);
    p.use_crf = body.value("crf", false);
    p.use_self_attention = body.value("self_attention", p.use_self_attention && !s->trace->self_attn.empty());
    const auto m = make_pseudo_mask(*s->trace, a.x, a.index, p, refiner_.get(), selection(body));
    std::lock_guard lock(s->mutex);
    const std::string name = "m" + std::to_string(s->masks++);
    std::filesystem::create_directories(root_ / "sessions" / s->id / "masks");
    write_mask(root_ / "sessions" / s->id / "masks" / (name + ".png"), m, p);
    send_json(res, {{"mask_url", "/sessions/" + s->id + "/masks/" + name + ".png"},
                    {"area_fraction", m.area_fraction()},
                    {"label", m.class_label},
                    {"tau", p.tau},
                    {"alpha", p.alpha},
                    {"crf", p.use_crf},
                    {"self_attention", p.use_self_attention}});
  }

  void artifact(const Req& req, Res& res) {
    auto s = session(req.matches[1]);
    const auto path = root_ / "sessions" / s->id / std::string(req.matches[2]) / std::string(req.matches[3]);
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::not_found, "no such file");
    const auto bytes = read_file_bytes(path);
    const std::string ext = req.matches[4];
    const char* type = ext == "png" ? "image/png" : ext == "json" ? "application/json" : "application/octet-stream";
    res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), type);
  }

  void put_annotation(const Req& req, Res& res) {
    auto s = session(req.matches[1]);
    MaskGrid grid;
    try {
      grid = png::decode_gray({req.body.begin(), req.body.end()});
    } catch (const Error&) {
      throw Error(ErrorKind::argument, "annotation body is not a PNG image");
    }
    const auto& img = s->trace->image;
    if (grid.width != img.width || grid.height != img.height)
      throw Error(ErrorKind::conflict, "annotation is " + dims_string(grid.width, grid.height) + " but the image is " +
                                           dims_string(img.width, img.height));
    for (auto& v : grid.data) v = v ? 1 : 0;
    std::lock_guard lock(s->mutex);
    write_file_bytes(root_ / "sessions" / s->id / "annotation.png", encode_mask_png({grid, ""}));
    s->annotation = std::move(grid);
    res.status = 204;
  }

  static OptimizerConfig optimizer_config(const nlohmann::json& c) {
    OptimizerConfig cfg;
    require(c.is_object(), ErrorKind::argument, "config must be an object");
    if (c.contains("learning_rate")) cfg.learning_rate = c["learning_rate"].get<double>();
    if (c.contains("decay_factor")) cfg.decay_factor = c["decay_factor"].get<double>();
    if (c.contains("decay_every")) cfg.decay_every = c["decay_every"].get<int>();
    if (c.contains("epochs")) cfg.epochs = c["epochs"].get<int>();
    cfg.validate();
    return cfg;
  }

  void start_optimization(const Req& req, Res& res) {
    const auto body = body_json(req);
    require(body.contains("session_ids") && body["session_ids"].is_array() && !body["session_ids"].empty(),
            ErrorKind::argument, "session_ids must be a non-empty array");
    const std::string cls = body.value("class", "");
    require(!cls.empty(), ErrorKind::argument, "class is required");
    auto cfg = optimizer_config(body.value("config", nlohmann::json::object()));
    cfg.selection = selection(body);

    std::vector<std::shared_ptr<Session>> ss;
    for (const auto& id : body["session_ids"]) ss.push_back(session(id.get<std::string>()));
    std::vector<TrainingPair> pairs;
    for (auto& s : ss) {
      std::lock_guard lock(s->mutex);
      require(s->annotation.has_value(), ErrorKind::argument, "session '" + s->id + "' has no annotation");
      pairs.push_back({s->trace, GroundTruthMask::from_foreground(*s->annotation)});
    }
    const auto init = init_attribution_tokens(cls, *backend_);

    auto j = std::make_shared<Job>();
    j->id = next_id("job");
    j->cls = cls;
    {
      // Claim every session or none.
      std::vector<std::unique_lock<std::mutex>> locks;
      for (auto& s : ss) locks.emplace_back(s->mutex);
      for (auto& s : ss)
        if (!s->active_job.empty() && job_running(s->active_job))
          throw Error(ErrorKind::conflict, "session '" + s->id + "' already has a running optimization");
      for (auto& s : ss) {
        s->active_job = j->id;
        j->sessions.push_back(s->id);
      }
    }
    {
      std::lock_guard lock(jobs_mutex_);
      jobs_[j->id] = j;
    }
    const std::string token_id = next_id(sanitize_file_name(cls));
    j->worker = std::thread([this, j, pairs = std::move(pairs), init, cfg, token_id] {
      nlohmann::json result;
      std::string state = "done";
      try {
        auto r = optimize_tokens(pairs, init, cfg, [&](int epoch, double loss, double lr) {
          if (j->cancel) throw Error(ErrorKind::conflict, "optimization cancelled");
          std::lock_guard lock(j->mutex);
          j->events.push_back({{"epoch", epoch}, {"loss", loss}, {"lr", lr}});
          j->cv.notify_all();
        });
        TokenFile tf;
        tf.label = j->cls;
        tf.backend_id = backend_->id();
        tf.tokens = r.best_tokens;
        tf.best_loss = r.best_loss;
        tf.has_loss = true;
        tf.training = {{"learning_rate", cfg.learning_rate},
                       {"decay_factor", cfg.decay_factor},
                       {"decay_every", cfg.decay_every},
                       {"epochs", cfg.epochs},
                       {"best_epoch", r.best_epoch + 1},
                       {"session_ids", j->sessions},
                       {"job_id", j->id}};
        save_token(tf, root_ / "tokens" / token_id);
        result = {{"token_id", token_id}, {"best_loss", r.best_loss}, {"best_epoch", r.best_epoch + 1}};
      } catch (const std::exception& e) {
        state = j->cancel ? "cancelled" : "failed";
        result = {{"error", e.what()}};
      }
      std::lock_guard lock(j->mutex);
      j->state = state;
      j->result = result;
      j->cv.notify_all();
    });
    send_json(res, {{"job_id", j->id}, {"token_id", token_id}}, 202);
  }

  bool job_running(const std::string& id) {
    std::lock_guard lock(jobs_mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return false;
    std::lock_guard jl(it->second->mutex);
    return it->second->state == "running";
  }

  /// Server-sent events: one `data:` record per epoch from the first, then an
  /// `event: done` (or `event: failed`) record with the result.
  void events(const Req& req, Res& res) {
    auto j = job(req.matches[1]);
    auto cursor = std::make_shared<std::size_t>(0);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [j, cursor](std::size_t, httplib::DataSink& sink) {
      std::unique_lock lock(j->mutex);
      j->cv.wait_for(lock, std::chrono::milliseconds(200),
                     [&] { return *cursor < j->events.size() || j->state != "running"; });
      std::string chunk;
      for (; *cursor < j->events.size(); ++*cursor) chunk += "data: " + j->events[*cursor].dump() + "\n\n";
      const bool finished = j->state != "running";
      if (finished) chunk += "event: " + j->state + "\ndata: " + j->result.dump() + "\n\n";
      lock.unlock();
      if (!chunk.empty() && !sink.write(chunk.data(), chunk.size())) return false;
      if (finished) sink.done();
      return true;
    });
  }

  void list_tokens(Res& res) {
    nlohmann::json out = nlohmann::json::array();
    std::vector<std::string> ids;
    for (const auto& d : std::filesystem::directory_iterator(root_ / "tokens"))
      if (std::filesystem::exists(d.path() / "token.json")) ids.push_back(d.path().filename().string());
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
      auto meta = nlohmann::json::parse(read_file_text(root_ / "tokens" / id / "token.json"));
      meta["id"] = id;
      out.push_back(meta);
    }
    send_json(res, {{"tokens", out}});
  }

  void create_token(const Req& req, Res& res) {
    const auto body = body_json(req);
    TokenFile tf;
    tf.label = body.at("label").get<std::string>();
    tf.backend_id = body.value("backend_id", backend_->id());
    const auto rows = body.at("rows").get<std::vector<std::vector<double>>>();
    require(!rows.empty(), ErrorKind::argument, "rows must not be empty");
    const std::size_t width = rows.front().size();
    require(width == backend_->embedding_dim(), ErrorKind::dimension,
            "token rows have width " + std::to_string(width) + " but the backend expects " +
                std::to_string(backend_->embedding_dim()));
    std::vector<double> flat;
    for (const auto& r : rows) {
      require(r.size() == width, ErrorKind::dimension, "token rows differ in width");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    std::vector<std::string> labels = body.value("labels", std::vector<std::string>{});
    if (labels.empty()) {
      labels.assign(rows.size(), tf.label);
      if (rows.size() == 2) labels[0] = kStartToken;
    }
    tf.tokens = TokenEmbeddingMatrix(Tensor<double>({rows.size(), width}, std::move(flat)), std::move(labels));
    if (body.contains("best_loss") && body["best_loss"].is_number()) {
      tf.best_loss = body["best_loss"].get<double>();
      tf.has_loss = true;
    }
    if (body.contains("training")) tf.training = body["training"];
    const std::string id = next_id(sanitize_file_name(tf.label));
    save_token(tf, root_ / "tokens" / id);
    send_json(res, {{"id", id}}, 201);
  }

  std::shared_ptr<const Backend> backend_;
  std::filesystem::path root_;
  Settings settings_;
  std::shared_ptr<const MaskRefiner> refiner_;
  httplib::Server server_;

  std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex jobs_mutex_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::mutex counter_mutex_;
  std::size_t counter_ = 0;
};

}  // namespace ovam
