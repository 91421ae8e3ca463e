#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>

#include <json.hpp>

#include "skeleguide/checkpoint.hpp"
#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"
#include "skeleguide/keypoints.hpp"
#include "skeleguide/pipeline.hpp"
#include "skeleguide/synthworld.hpp"

// after Eigen: <resolv.h> defines a `_res` macro that clashes with Eigen parameter names
#include <httplib.h>

namespace skeleguide {

// ---------------------------------------------------------------------------
// Base64 (RFC 4648, padded)

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t n = (std::uint32_t(bytes[i]) << 16) | (i + 1 < bytes.size() ? std::uint32_t(bytes[i + 1]) << 8 : 0) |
                            (i + 2 < bytes.size() ? std::uint32_t(bytes[i + 2]) : 0);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(n >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kAlphabet[n & 63] : '=';
  }
  return out;
}

/// Strict decoder; returns nullopt on any character outside the alphabet or bad padding.
inline std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) return std::nullopt;
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      if (c == '=' && last && k >= 2) {
        v[k] = 0;
        ++pad;
      } else if (pad > 0 || (v[k] = value(c)) < 0) {
        return std::nullopt;
      }
    }
    const std::uint32_t n = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) | (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(n >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n));
  }
  return out;
}

inline std::string png_base64(const Image& img) { return base64_encode(encode_png(img)); }

/// Decodes a base64 PNG field; any failure is a SchemaError naming `path`.
inline Image image_from_base64(const nlohmann::json& v, const std::string& path) {
  if (!v.is_string()) throw SchemaError(path, "expected a base64 PNG string");
  const auto bytes = base64_decode(v.get<std::string>());
  if (!bytes) throw SchemaError(path, "invalid base64");
  try {
    return decode_png(*bytes);
  } catch (const Error& e) {
    throw SchemaError(path, std::string("undecodable PNG: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Sessions

inline constexpr std::int64_t kSessionTtlSeconds = 24 * 3600;

struct Session {
  std::string id;
  Image scene;
  PromptSpec prompt;
  std::optional<std::uint64_t> scene_seed;
  std::uint64_t seed = 0;
  int steps = kDefaultSamplingSteps;
  Image layout;
  KeypointDoc keypoints;
  std::vector<std::string> warnings;
  Image image;
  std::int64_t created = 0;  // unix seconds
  std::int64_t updated = 0;
};

inline nlohmann::ordered_json prompt_json(const PromptSpec& p) {
  return {{"action", to_string(p.action)}, {"location", to_string(p.location)}, {"count", p.count}};
}

inline nlohmann::ordered_json to_json(const Session& s) {
  nlohmann::ordered_json j;
  j["session_id"] = s.id;
  j["prompt"] = prompt_json(s.prompt);
  if (s.scene_seed) j["scene_seed"] = *s.scene_seed;
  j["seed"] = s.seed;
  j["steps"] = s.steps;
  j["created"] = s.created;
  j["updated"] = s.updated;
  j["scene"] = png_base64(s.scene);
  j["layout"] = png_base64(s.layout);
  j["keypoints"] = to_json(s.keypoints);
  j["warnings"] = s.warnings;
  j["image"] = png_base64(s.image);
  return j;
}

inline Session session_from_json(const nlohmann::json& j) {
  Session s;
  s.id = j.at("session_id").get<std::string>();
  const auto& p = j.at("prompt");
  s.prompt = make_prompt(*parse_action(p.at("action").get<std::string>()),
                         *parse_location(p.at("location").get<std::string>()), p.at("count").get<int>());
  if (j.contains("scene_seed")) s.scene_seed = j["scene_seed"].get<std::uint64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.steps = j.at("steps").get<int>();
  s.created = j.at("created").get<std::int64_t>();
  s.updated = j.at("updated").get<std::int64_t>();
  s.scene = image_from_base64(j.at("scene"), "scene");
  s.layout = image_from_base64(j.at("layout"), "layout");
  s.keypoints = keypoint_doc_from_json(j.at("keypoints"));
  s.warnings = j.at("warnings").get<std::vector<std::string>>();
  s.image = image_from_base64(j.at("image"), "image");
  return s;
}

/// One JSON file per session, `<dir>/<session_id>.json`, replaced by atomic rename.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path dir, std::int64_t ttl = kSessionTtlSeconds)
      : dir_(std::move(dir)), ttl_(ttl) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError(dir_.string(), "cannot create session directory: " + ec.message());
  }

  static std::int64_t now() {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  static bool valid_id(std::string_view id) {
    return id.size() == 16 && std::all_of(id.begin(), id.end(), [](char c) {
             return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
           });
  }

  std::optional<Session> load(const std::string& id) const {
    if (!valid_id(id)) return std::nullopt;
    const auto path = file(id);
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    Session s;
    try {
      s = session_from_json(nlohmann::json::parse(in));
    } catch (const std::exception& e) {
      throw IoError(path.string(), std::string("corrupt session file: ") + e.what());
    }
    if (now() - s.updated > ttl_) return std::nullopt;
    return s;
  }

  void save(const Session& s) const {
    const auto path = file(s.id);
    const auto tmp = dir_ / (s.id + ".json.tmp" + std::to_string(counter_++));
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << to_json(s).dump();
      if (!out) throw IoError(tmp.string(), "write failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError(path.string(), "rename failed: " + ec.message());
  }

  /// Deletes sessions idle for longer than the TTL; returns how many were removed.
  std::size_t purge_expired() const {
    std::size_t removed = 0;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir_, ec)) {
      const auto name = entry.path().filename().string();
      if (name.size() != 21 || entry.path().extension() != ".json") continue;
      try {
        if (!load(name.substr(0, 16))) removed += std::filesystem::remove(entry.path(), ec) ? 1 : 0;
      } catch (const IoError&) {
        // left in place for inspection
      }
    }
    return removed;
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path file(const std::string& id) const { return dir_ / (id + ".json"); }

  std::filesystem::path dir_;
  std::int64_t ttl_;
  mutable std::atomic<std::uint64_t> counter_{0};
};

// ---------------------------------------------------------------------------
// Service

struct ServiceConfig {
  std::string checkpoint_path;
  std::string session_dir = "sessions";
  int workers = 2;            // concurrent inference slots
  int max_steps = 1000;
};

struct ApiResponse {
  int status = 200;
  std::string body;
};

/// HTTP API over a read-only two-stage checkpoint.
class Service {
 public:
  explicit Service(const ServiceConfig& config)
      : config_(config),
        checkpoint_(load_checkpoint(config.checkpoint_path)),
        checkpoint_id_(checkpoint_hash(config.checkpoint_path)),
        store_(config.session_dir),
        slots_(std::max(1, config.workers)) {
    if (model_kind(checkpoint_) != ModelKind::two_stage)
      throw UnsupportedError("serving needs a two-stage checkpoint, got phase " + checkpoint_.state.phase);
    store_.purge_expired();
    register_routes();
  }

  const std::string& checkpoint_id() const { return checkpoint_id_; }
  const SessionStore& store() const { return store_; }

  /// Dispatches one request without the network layer.
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body) {
    try {
      if (method == "GET" && path == "/healthz") return ok(healthz());
      if (method == "GET" && path.rfind("/session/", 0) == 0) return get_session(path.substr(9));
      if (method == "POST" && path == "/generate") return ok(generate_endpoint(parse_body(body)));
      if (method == "POST" && path == "/render") return render_endpoint(parse_body(body));
      if (method == "POST" && path == "/pose/decode") return ok(decode_endpoint(parse_body(body)));
      return error(404, "no route for " + method + " " + path);
    } catch (const SchemaError& e) {
      return error(400, e.what(), {{"path", e.path}});
    } catch (const ConfigError& e) {
      return error(400, e.what());
    } catch (const ShapeError& e) {
      return error(422, e.what());
    } catch (const UnsupportedError& e) {
      return error(422, e.what());
    } catch (const NumericalError& e) {
      return error(500, e.what(), {{"step", e.step}});
    } catch (const std::exception& e) {
      return error(500, e.what());
    }
  }

  int bind(const std::string& host, int port) {
    return port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
  }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  bool listen(const std::string& host, int port) { return bind(host, port) >= 0 && listen_after_bind(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  void stop() { server_.stop(); }

 private:
  static ApiResponse ok(const nlohmann::ordered_json& j) { return {200, j.dump()}; }

  static ApiResponse error(int status, const std::string& message, nlohmann::ordered_json extra = nlohmann::ordered_json::object()) {
    nlohmann::ordered_json j;
    j["error"] = message;
    for (auto& [k, v] : extra.items()) j[k] = v;
    return {status, j.dump()};
  }

  static nlohmann::json parse_body(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("$", std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw SchemaError("$", "request body must be a JSON object");
    return j;
  }

  static std::uint64_t u64_field(const nlohmann::json& j, const char* key, std::uint64_t fallback) {
    const auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_number_unsigned()) throw SchemaError(key, "expected a non-negative integer");
    return it->get<std::uint64_t>();
  }

  int steps_field(const nlohmann::json& j) const {
    const auto it = j.find("steps");
    if (it == j.end()) return kDefaultSamplingSteps;
    if (!it->is_number_integer() || it->get<std::int64_t>() < 1 || it->get<std::int64_t>() > config_.max_steps)
      throw SchemaError("steps", "expected an integer in [1, " + std::to_string(config_.max_steps) + "]");
    return static_cast<int>(it->get<std::int64_t>());
  }

  static PromptSpec prompt_field(const nlohmann::json& j) {
    const auto& p = detail::require(j, "", "prompt");
    if (!p.is_object()) throw SchemaError("prompt", "expected an object");
    detail::reject_unknown_keys(p, "prompt", {"action", "location", "count"});
    const auto& a = detail::require(p, "prompt", "action");
    const auto& l = detail::require(p, "prompt", "location");
    std::optional<Action> action;
    std::optional<Location> location;
    if (a.is_string()) action = parse_action(a.get<std::string>());
    if (l.is_string()) location = parse_location(l.get<std::string>());
    if (!action) throw SchemaError("prompt.action", "expected \"standing\" or \"sitting\"");
    if (!location) throw SchemaError("prompt.location", "expected \"left\", \"center\" or \"right\"");
    int count = 1;
    if (const auto it = p.find("count"); it != p.end()) {
      if (!it->is_number_integer() || it->get<std::int64_t>() < 1 || it->get<std::int64_t>() > 2)
        throw SchemaError("prompt.count", "expected 1 or 2");
      count = static_cast<int>(it->get<std::int64_t>());
    }
    return make_prompt(*action, *location, count);
  }

  std::shared_ptr<std::mutex> session_lock(const std::string& id) {
    std::lock_guard<std::mutex> g(locks_mutex_);
    auto& m = locks_[id];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  /// Bounded inference slot; released on scope exit.
  struct Slot {
    explicit Slot(std::counting_semaphore<>& s) : s_(s) { s_.acquire(); }
    ~Slot() { s_.release(); }
    std::counting_semaphore<>& s_;
  };

  nlohmann::ordered_json healthz() const {
    return {{"status", "ok"}, {"checkpoint", checkpoint_id_}, {"phase", checkpoint_.state.phase}};
  }

  ApiResponse get_session(const std::string& id) {
    const auto lock = session_lock(id);
    std::lock_guard<std::mutex> g(*lock);
    const auto s = store_.load(id);
    if (!s) return error(404, "unknown session '" + id + "'");
    return ok(to_json(*s));
  }

  nlohmann::ordered_json generate_endpoint(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, "", {"scene", "scene_seed", "prompt", "seed", "steps"});
    const int size = checkpoint_.model.config().image_size;
    Session s;
    if (j.contains("scene") == j.contains("scene_seed")) throw SchemaError("scene", "give exactly one of scene or scene_seed");
    if (j.contains("scene")) {
      s.scene = image_from_base64(j["scene"], "scene");
    } else {
      s.scene_seed = u64_field(j, "scene_seed", 0);
      WorldConfig wc;
      wc.width = wc.height = size;
      wc.patch_size = checkpoint_.model.config().patch;
      s.scene = sample_scene(*s.scene_seed, wc).image;
    }
    s.prompt = prompt_field(j);
    s.seed = u64_field(j, "seed", 0);
    s.steps = steps_field(j);

    // canonical request identity: same scene, prompt, seed and steps give the same session
    nlohmann::ordered_json canon;
    canon["scene"] = hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(s.scene.data.data()),
                                                  s.scene.data.size() * sizeof(float))));
    canon["prompt"] = prompt_json(s.prompt);
    canon["seed"] = s.seed;
    canon["steps"] = s.steps;
    canon["checkpoint"] = checkpoint_id_;
    s.id = hex64(fnv1a(canon.dump()));

    GenerationOutput out;
    {
      Slot slot(slots_);
      out = generate(checkpoint_, {{s.scene, s.prompt, s.seed}}, s.steps).front();
    }
    s.layout = *out.layout;
    s.keypoints = out.inversion->doc;
    s.warnings = out.inversion->warnings;
    s.image = out.image;
    {
      const auto lock = session_lock(s.id);
      std::lock_guard<std::mutex> g(*lock);
      s.created = s.updated = SessionStore::now();
      if (const auto prev = store_.load(s.id)) s.created = prev->created;
      store_.save(s);
    }
    nlohmann::ordered_json r;
    r["session_id"] = s.id;
    r["prompt"] = prompt_json(s.prompt);
    if (s.scene_seed) r["scene_seed"] = *s.scene_seed;
    r["seed"] = s.seed;
    r["steps"] = s.steps;
    r["layout"] = png_base64(s.layout);
    r["keypoints"] = to_json(s.keypoints);
    r["warnings"] = s.warnings;
    r["image"] = png_base64(s.image);
    return r;
  }

  ApiResponse render_endpoint(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, "", {"session_id", "keypoints", "seed", "steps"});
    const auto& idv = detail::require(j, "", "session_id");
    if (!idv.is_string()) throw SchemaError("session_id", "expected a string");
    const std::string id = idv.get<std::string>();
    KeypointDoc doc;
    try {
      doc = keypoint_doc_from_json(detail::require(j, "", "keypoints"));
    } catch (const SchemaError& e) {
      throw SchemaError("keypoints." + e.path, std::string(e.what()).substr(e.path.size() + 2));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("keypoints", e.what());
    }
    const int steps = steps_field(j);

    const auto lock = session_lock(id);
    std::lock_guard<std::mutex> g(*lock);
    auto s = store_.load(id);
    if (!s) return error(404, "unknown session '" + id + "'");
    if (doc.width != s->scene.width || doc.height != s->scene.height)
      throw SchemaError("keypoints.canvas", "canvas must match the session scene (" + std::to_string(s->scene.width) +
                                                "x" + std::to_string(s->scene.height) + ")");
    const std::uint64_t seed = u64_field(j, "seed", s->seed);
    const Image layout = render_layout(s->scene, doc.persons);
    Image image;
    {
      Slot slot(slots_);
      image = render_from_layout(checkpoint_, layout, s->prompt, seed, steps);
    }
    s->layout = layout;
    s->keypoints = doc;
    s->warnings.clear();
    s->image = image;
    s->seed = seed;
    s->steps = steps;
    s->updated = SessionStore::now();
    store_.save(*s);
    nlohmann::ordered_json r;
    r["session_id"] = id;
    r["seed"] = seed;
    r["steps"] = steps;
    r["layout"] = png_base64(layout);
    r["keypoints"] = to_json(doc);
    r["image"] = png_base64(image);
    return ok(r);
  }

  static nlohmann::ordered_json decode_endpoint(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, "", {"layout"});
    const Image layout = image_from_base64(detail::require(j, "", "layout"), "layout");
    const InversionResult inv = invert_layout(layout);
    return {{"keypoints", to_json(inv.doc)}, {"warnings", inv.warnings}};
  }

  void register_routes() {
    const auto reply = [](httplib::Response& res, const ApiResponse& r) {
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
    server_.Get("/healthz", [this, reply](const httplib::Request&, httplib::Response& res) {
      reply(res, handle("GET", "/healthz", ""));
    });
    server_.Get(R"(/session/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, handle("GET", req.path, ""));
    });
    for (const char* route : {"/generate", "/render", "/pose/decode"})
      server_.Post(route, [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, handle("POST", req.path, req.body));
      });
    server_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      nlohmann::ordered_json j;
      j["error"] = "no route for " + req.method + " " + req.path;
      res.set_content(j.dump(), "application/json");
    });
  }

  ServiceConfig config_;
  const Checkpoint checkpoint_;
  std::string checkpoint_id_;
  SessionStore store_;
  std::counting_semaphore<> slots_;
  std::mutex locks_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
  httplib::Server server_;
};

}  // namespace skeleguide
