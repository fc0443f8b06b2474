#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "oculoscreen/capture.hpp"
#include "oculoscreen/classifier.hpp"

// After Eigen: httplib drags in <resolv.h>, whose macros break Eigen headers.
#include <httplib.h>

namespace oculoscreen {

enum class SessionState { kOpen, kComplete, kScreened, kRejected };
enum class RiskTier { kLow, kElevated, kHigh };

inline std::string_view to_string(SessionState s) {
  switch (s) {
    case SessionState::kOpen: return "OPEN";
    case SessionState::kComplete: return "COMPLETE";
    case SessionState::kScreened: return "SCREENED";
    case SessionState::kRejected: return "REJECTED";
  }
  return "?";
}

inline std::string_view to_string(RiskTier t) {
  switch (t) {
    case RiskTier::kLow: return "LOW";
    case RiskTier::kElevated: return "ELEVATED";
    case RiskTier::kHigh: return "HIGH";
  }
  return "?";
}

inline std::optional<SessionState> parse_session_state(std::string_view s) {
  for (auto v : {SessionState::kOpen, SessionState::kComplete, SessionState::kScreened, SessionState::kRejected})
    if (detail::upper(s) == to_string(v)) return v;
  return std::nullopt;
}

inline std::optional<RiskTier> parse_risk_tier(std::string_view s) {
  for (auto v : {RiskTier::kLow, RiskTier::kElevated, RiskTier::kHigh})
    if (detail::upper(s) == to_string(v)) return v;
  return std::nullopt;
}

// COVID probability below `elevated` is LOW, below `high` ELEVATED, else HIGH.
struct RiskThresholds {
  double elevated = 0.2;
  double high = 0.6;

  void check() const {
    if (!(0.0 <= elevated && elevated <= high && high <= 1.0))
      throw Error(ErrorCode::kInvalidArgument, "risk thresholds need 0 <= elevated <= high <= 1");
  }
};

inline RiskTier risk_tier(double covid_probability, const RiskThresholds& t = {}) {
  if (covid_probability < t.elevated) return RiskTier::kLow;
  if (covid_probability < t.high) return RiskTier::kElevated;
  return RiskTier::kHigh;
}

struct CellScore {
  int cell = 0;
  double score = 0.0;
  bool operator==(const CellScore&) const = default;
};

struct ScreeningResult {
  std::string session_id;
  std::array<double, kNumCohorts> probs{};  // kClassOrder
  CohortLabel predicted_cohort = CohortLabel::kHealthy;
  Taxonomy taxonomy = Taxonomy::kNegative;
  RiskTier risk_tier = RiskTier::kLow;
  CohortLabel attributed_cohort = CohortLabel::kHealthy;
  std::map<GazeAngle, std::vector<CellScore>> top_cells;
  std::string model_version;
  std::string timestamp;

  double prob(CohortLabel c) const { return probs[class_index(c)]; }
  bool operator==(const ScreeningResult&) const = default;
};

struct SessionStatus {
  SessionState state = SessionState::kOpen;
  std::vector<std::string> violations;
  std::optional<ScreeningResult> result;
  bool operator==(const SessionStatus&) const = default;
};

struct StoredSession {
  CaptureSession session;
  SessionStatus status;
};

// Highest-scoring k cells per view; ties keep the lower cell index first.
inline std::map<GazeAngle, std::vector<CellScore>> top_cells(const GridAttribution& a, int k = 3) {
  std::map<GazeAngle, std::vector<CellScore>> out;
  for (GazeAngle angle : kAllAngles) {
    std::vector<CellScore> v;
    for (int c = 0; c < a.cells; ++c) v.push_back({c, a.score(angle, c)});
    std::stable_sort(v.begin(), v.end(), [](const auto& x, const auto& y) { return x.score > y.score; });
    if (static_cast<int>(v.size()) > k) v.resize(k);
    out[angle] = std::move(v);
  }
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---- JSON ----

inline json to_json_value(const ScreeningResult& r) {
  json probs = json::object();
  for (CohortLabel c : kClassOrder) probs[std::string(to_string(c))] = r.prob(c);
  json cells = json::object();
  for (const auto& [angle, v] : r.top_cells) {
    json arr = json::array();
    for (const auto& cs : v) arr.push_back({{"cell", cs.cell}, {"score", cs.score}});
    cells[std::string(to_string(angle))] = arr;
  }
  return {{"session_id", r.session_id},
          {"probs", probs},
          {"predicted_cohort", to_string(r.predicted_cohort)},
          {"taxonomy", to_string(r.taxonomy)},
          {"risk_tier", to_string(r.risk_tier)},
          {"attribution", {{"cohort", to_string(r.attributed_cohort)}, {"top_cells", cells}}},
          {"model_version", r.model_version},
          {"timestamp", r.timestamp}};
}

inline json to_json_value(const SessionStatus& s) {
  json j = {{"state", to_string(s.state)}, {"violations", s.violations}};
  j["result"] = s.result ? to_json_value(*s.result) : json(nullptr);
  return j;
}

namespace detail {

inline CohortLabel read_cohort(const FieldReader& r, const std::string& key) {
  const auto c = parse_cohort(r.string(key));
  if (!c) r.fail(key, "unknown cohort");
  return *c;
}

inline ScreeningResult read_result(const FieldReader& r) {
  ScreeningResult out;
  out.session_id = r.string("session_id");
  const auto probs = r.child("probs");
  for (CohortLabel c : kClassOrder) out.probs[class_index(c)] = probs.number(std::string(to_string(c)));
  out.predicted_cohort = read_cohort(r, "predicted_cohort");
  const auto tax = parse_taxonomy(r.string("taxonomy"));
  if (!tax) r.fail("taxonomy", "unknown taxonomy");
  out.taxonomy = *tax;
  const auto tier = parse_risk_tier(r.string("risk_tier"));
  if (!tier) r.fail("risk_tier", "unknown tier");
  out.risk_tier = *tier;
  const auto attr = r.child("attribution");
  out.attributed_cohort = read_cohort(attr, "cohort");
  const auto cells = attr.child("top_cells");
  for (const auto& [key, arr] : cells.node().items()) {
    const auto angle = parse_gaze_angle(key);
    if (!angle) cells.fail(key, "unknown gaze angle");
    auto& v = out.top_cells[*angle];
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto e = cells.element(arr[i], key, i);
      v.push_back({static_cast<int>(e.integer("cell")), e.number("score")});
    }
  }
  out.model_version = r.string("model_version");
  out.timestamp = r.string("timestamp");
  return out;
}

inline SessionStatus read_status(const FieldReader& r) {
  SessionStatus s;
  const auto state = parse_session_state(r.string("state"));
  if (!state) r.fail("state", "unknown session state");
  s.state = *state;
  const auto& v = r.array("violations");
  for (const auto& e : v) s.violations.push_back(e.get<std::string>());
  if (r.has("result")) s.result = read_result(r.child("result"));
  return s;
}

// tmp file + fsync + rename + directory fsync.
inline void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const auto tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error(ErrorCode::kIoError, "cannot write " + tmp);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      throw Error(ErrorCode::kIoError, "short write to " + tmp);
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) throw Error(ErrorCode::kIoError, "cannot flush " + tmp);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot rename " + tmp + ": " + ec.message());
  const int dfd = ::open(path.parent_path().c_str(), O_RDONLY | O_DIRECTORY);
  if (dfd >= 0) {
    ::fsync(dfd);
    ::close(dfd);
  }
}

inline void atomic_write(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace detail

// Directory-per-session store:
//   <data_dir>/sessions/<id>/session.json   {"session": ..., "status": ...}
//   <data_dir>/sessions/<id>/images/<ANGLE>.<ext>
// Every mutation of one session runs under that session's mutex and ends
// with an atomic rewrite of session.json.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path data_dir) : root_(std::move(data_dir)) {
    std::error_code ec;
    std::filesystem::create_directories(root_ / "sessions", ec);
    if (ec) throw Error(ErrorCode::kIoError, "cannot create data directory " + root_.string() + ": " + ec.message());
  }

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path session_dir(const std::string& id) const { return root_ / "sessions" / id; }

  StoredSession create(const json& body) {
    if (!body.is_object() || !body.contains("consent") || body.at("consent") != true)
      throw Error(ErrorCode::kConsentMissing, "informed consent (consent=true) is required");
    StoredSession s;
    s.session.consent = true;
    s.session.created_at = utc_timestamp();
    if (body.contains("metadata")) {
      if (!body.at("metadata").is_object()) throw Error(ErrorCode::kParseError, "metadata must be an object");
      s.session.metadata = body.at("metadata");
    }
    std::lock_guard lock(create_mutex_);
    std::string id;
    do id = fresh_id();
    while (std::filesystem::exists(session_dir(id)));
    s.session.session_id = id;
    s.session.identity_id = body.contains("identity_id") && body.at("identity_id").is_string()
                                ? body.at("identity_id").get<std::string>()
                                : id;
    std::filesystem::create_directories(session_dir(id) / "images");
    write(s);
    return s;
  }

  bool exists(const std::string& id) const {
    return valid_id(id) && std::filesystem::exists(session_dir(id) / "session.json");
  }

  StoredSession get(const std::string& id) {
    auto m = mutex_for(id);
    std::lock_guard lock(*m);
    return read(id);
  }

  // Runs f(StoredSession&) under the session lock and persists the result.
  template <typename F>
  auto update(const std::string& id, F&& f) {
    auto m = mutex_for(id);
    std::lock_guard lock(*m);
    StoredSession s = read(id);
    if constexpr (std::is_void_v<decltype(f(s))>) {
      f(s);
      write(s);
    } else {
      auto r = f(s);
      write(s);
      return r;
    }
  }

  void reject(const std::string& id, std::vector<std::string> violations) {
    if (violations.empty()) throw Error(ErrorCode::kInvalidArgument, "a rejection needs at least one violation");
    update(id, [&](StoredSession& s) {
      if (s.status.state != SessionState::kOpen)
        throw Error(ErrorCode::kConflict, "only OPEN sessions can be rejected");
      s.status.state = SessionState::kRejected;
      s.status.violations = std::move(violations);
    });
  }

  std::vector<std::string> list() const {
    std::vector<std::string> ids;
    for (const auto& e : std::filesystem::directory_iterator(root_ / "sessions"))
      if (std::filesystem::exists(e.path() / "session.json")) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
    return ids;
  }

 private:
  static bool valid_id(const std::string& id) {
    return !id.empty() && id.size() <= 64 && std::all_of(id.begin(), id.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
    });
  }

  std::string fresh_id() {
    std::uniform_int_distribution<std::uint64_t> dist;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s-%016llx", static_cast<unsigned long long>(dist(entropy_)));
    return buf;
  }

  std::shared_ptr<std::mutex> mutex_for(const std::string& id) {
    if (!exists(id)) throw Error(ErrorCode::kNotFound, "unknown session '" + id + "'");
    std::lock_guard lock(map_mutex_);
    auto& m = locks_[id];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  StoredSession read(const std::string& id) const {
    const json j = detail::read_json_file(session_dir(id) / "session.json");
    detail::FieldReader r(j, "");
    return {detail::read_session(r.child("session")), detail::read_status(r.child("status"))};
  }

  void write(const StoredSession& s) const {
    const json j = {{"session", to_json_value(s.session)}, {"status", to_json_value(s.status)}};
    detail::atomic_write(session_dir(s.session.session_id) / "session.json", j.dump(2) + "\n");
  }

  std::filesystem::path root_;
  std::mutex map_mutex_;
  std::mutex create_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
  std::random_device entropy_;
};

struct UploadOutcome {
  QualityReport report;
  SessionState state = SessionState::kOpen;
};

struct ServiceConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path model_dir;
  QualityPolicy quality_policy;
  RiskThresholds risk;
  std::string host = "127.0.0.1";
  int port = 8080;
};

// Transport-independent service logic; the HTTP layer only maps errors to
// status codes.
class ScreeningService {
 public:
  explicit ScreeningService(ServiceConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.data_dir) {
    cfg_.quality_policy.check();
    cfg_.risk.check();
    if (!cfg_.model_dir.empty()) set_model(std::make_shared<const ModelBundle>(load_bundle(cfg_.model_dir)));
  }

  SessionStore& store() { return store_; }
  const ServiceConfig& config() const { return cfg_; }

  void set_model(std::shared_ptr<const ModelBundle> m) {
    std::lock_guard lock(model_mutex_);
    model_ = std::move(m);
    version_ = model_ ? model_version(*model_) : std::string{};
  }

  StoredSession create(const json& body) { return store_.create(body); }
  StoredSession get(const std::string& id) { return store_.get(id); }

  // A passing image locks its angle; a failing one may be retaken.
  UploadOutcome upload(const std::string& id, GazeAngle angle, std::span<const std::uint8_t> bytes,
                       const std::vector<EyeHint>& hints = {}, const std::string& device_id = {}) {
    const ImageU8 img = decode_image(bytes);
    const auto enc = sniff_encoding(bytes);
    return store_.update(id, [&](StoredSession& s) {
      if (s.status.state != SessionState::kOpen)
        throw Error(ErrorCode::kConflict, "session is " + std::string(to_string(s.status.state)) + ", not OPEN");
      const auto it = s.session.images.find(angle);
      if (it != s.session.images.end() && it->second.quality && it->second.quality->passes)
        throw Error(ErrorCode::kConflict, std::string(to_string(angle)) + " was already uploaded");
      UploadOutcome out;
      out.report = validate_image(img, cfg_.quality_policy);
      const std::string name =
          "images/" + std::string(to_string(angle)) + (enc == ImageEncoding::kJpeg ? ".jpg" : ".png");
      const auto dir = store_.session_dir(id);
      if (it != s.session.images.end() && it->second.path != name) std::filesystem::remove(dir / it->second.path);
      detail::atomic_write(dir / name, bytes);
      ImageRecord rec;
      rec.path = name;
      rec.angle = angle;
      rec.width = img.width;
      rec.height = img.height;
      rec.device_id = device_id;
      rec.quality = out.report;
      rec.boxes = hints;
      s.session.images[angle] = std::move(rec);
      bool complete = s.session.images.size() == kNumAngles;
      for (const auto& [a, r] : s.session.images) complete = complete && r.quality && r.quality->passes;
      if (complete) s.status.state = SessionState::kComplete;
      out.state = s.status.state;
      return out;
    });
  }

  ScreeningResult screen(const std::string& id, bool force = false) {
    std::shared_ptr<const ModelBundle> model;
    std::string version;
    {
      std::lock_guard lock(model_mutex_);
      model = model_;
      version = version_;
    }
    return store_.update(id, [&](StoredSession& s) {
      if (s.status.state == SessionState::kScreened && s.status.result && !force) return *s.status.result;
      if (s.status.state != SessionState::kComplete && s.status.state != SessionState::kScreened)
        throw Error(ErrorCode::kConflict,
                    "session is " + std::string(to_string(s.status.state)) + "; all five angles must pass first");
      if (!model) throw Error(ErrorCode::kNoModel, "no model bundle is loaded");
      const PersonCells cells = prepare_person(s.session, store_.session_dir(id), model->config);
      const Prediction p = predict(*model, cells);
      const GridAttribution a = grid_attribution(*model, cells);
      ScreeningResult r;
      r.session_id = id;
      r.probs = p.probs;
      r.predicted_cohort = p.predicted_cohort;
      r.taxonomy = p.taxonomy;
      r.risk_tier = risk_tier(p.prob(CohortLabel::kCovid), cfg_.risk);
      r.attributed_cohort = a.cohort;
      r.top_cells = top_cells(a);
      r.model_version = version;
      r.timestamp = utc_timestamp();
      s.status.state = SessionState::kScreened;
      s.status.result = r;
      return r;
    });
  }

  json models() const {
    std::lock_guard lock(model_mutex_);
    json j = {{"loaded", static_cast<bool>(model_)},
              {"risk_thresholds", {{"elevated", cfg_.risk.elevated}, {"high", cfg_.risk.high}}},
              {"quality_policy", to_json_value(cfg_.quality_policy)}};
    if (model_) {
      j["model_version"] = version_;
      j["config"] = bundle_config_json(*model_);
    }
    return j;
  }

 private:
  ServiceConfig cfg_;
  SessionStore store_;
  mutable std::mutex model_mutex_;
  std::shared_ptr<const ModelBundle> model_;
  std::string version_;
};

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kConflict: return 409;
    case ErrorCode::kNoModel: return 503;
    case ErrorCode::kNoEyeFound:
    case ErrorCode::kDegenerateBox:
    case ErrorCode::kValidationFailed: return 422;
    case ErrorCode::kIoError: return 500;
    default: return 400;
  }
}

// Parses "x,y,w,h[,LEFT_EYE|RIGHT_EYE]"; several hints separated by ';'.
inline std::vector<EyeHint> parse_box_hints(const std::string& text) {
  std::vector<EyeHint> out;
  std::stringstream all(text);
  std::string one;
  while (std::getline(all, one, ';')) {
    std::stringstream ss(one);
    std::string tok;
    std::vector<std::string> parts;
    while (std::getline(ss, tok, ',')) parts.push_back(tok);
    if (parts.size() != 4 && parts.size() != 5) throw Error(ErrorCode::kInvalidArgument, "box hint must be x,y,w,h[,side]");
    EyeHint h;
    try {
      h.box = {std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2]), std::stoi(parts[3])};
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, "box hint coordinates must be integers");
    }
    if (parts.size() == 5) {
      h.side = parse_eye_side(parts[4]);
      if (!h.side) throw Error(ErrorCode::kInvalidArgument, "unknown eye side '" + parts[4] + "'");
    }
    out.push_back(h);
  }
  return out;
}

class HttpServer {
 public:
  explicit HttpServer(ScreeningService& svc) : svc_(svc) { routes(); }
  ~HttpServer() { stop(); }

  httplib::Server& raw() { return server_; }

  // Binds and serves on a background thread; returns the bound port.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorCode::kIoError, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  // Blocks until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw Error(ErrorCode::kIoError, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(2) + "\n", "application/json");
  }

  static void send_error(httplib::Response& res, const Error& e, json extra = json::object()) {
    extra["error"] = std::string(to_string(e.code()));
    extra["message"] = e.detail();
    send(res, http_status(e.code()), extra);
  }

  template <typename F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send(res, 500, {{"error", "INTERNAL"}, {"message", e.what()}});
    }
  }

  static json session_body(const StoredSession& s) {
    return {{"session_id", s.session.session_id}, {"session", to_json_value(s.session)}, {"status", to_json_value(s.status)}};
  }

  void routes() {
    server_.set_payload_max_length(64u << 20);
    server_.Post("/v1/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        json body;
        try {
          body = req.body.empty() ? json::object() : json::parse(req.body);
        } catch (const json::parse_error& e) {
          throw Error(ErrorCode::kParseError, e.what());
        }
        send(res, 201, session_body(svc_.create(body)));
      });
    });

    server_.Put(R"(/v1/sessions/([^/]+)/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.matches[1];
        const auto angle = parse_gaze_angle(std::string(req.matches[2]));
        if (!svc_.store().exists(id)) throw Error(ErrorCode::kNotFound, "unknown session '" + id + "'");
        if (!angle) throw Error(ErrorCode::kInvalidArgument, "unknown gaze angle '" + std::string(req.matches[2]) + "'");
        std::vector<EyeHint> hints;
        if (req.has_param("box")) hints = parse_box_hints(req.get_param_value("box"));
        const std::string device = req.has_param("device_id") ? req.get_param_value("device_id") : "";
        const auto& b = req.body;
        const auto out = svc_.upload(
            id, *angle, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(b.data()), b.size()), hints,
            device);
        json body = to_json_value(out.report);
        body["angle"] = to_string(*angle);
        body["state"] = to_string(out.state);
        if (!out.report.passes) body["error"] = "QUALITY_FAILED";
        send(res, out.report.passes ? 200 : 422, body);
      });
    });

    server_.Post(R"(/v1/sessions/([^/]+)/screen)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const bool force = req.has_param("force") && detail::upper(req.get_param_value("force")) == "TRUE";
        send(res, 200, to_json_value(svc_.screen(req.matches[1], force)));
      });
    });

    server_.Get(R"(/v1/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { send(res, 200, session_body(svc_.get(req.matches[1]))); });
    });

    server_.Get("/v1/models", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send(res, 200, svc_.models()); });
    });
  }

  ScreeningService& svc_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace oculoscreen
