#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oculoscreen/error.hpp"
#include "oculoscreen/image.hpp"
#include "oculoscreen/types.hpp"

namespace oculoscreen {

using json = nlohmann::json;

inline constexpr int kProtocolMinWidth = 1900;
inline constexpr int kProtocolMinHeight = 500;
inline constexpr const char* kManifestVersion = "1";

struct QualityPolicy {
  int min_width = kProtocolMinWidth;
  int min_height = kProtocolMinHeight;
  double min_mean_luma = 60.0;
  // Floors below the capture protocol are only accepted with this set.
  bool allow_override = false;

  bool operator==(const QualityPolicy&) const = default;

  void check() const {
    if (min_width <= 0 || min_height <= 0)
      throw Error(ErrorCode::kInvalidPolicy, "min_width and min_height must be positive");
    if (min_mean_luma < 0.0 || min_mean_luma > 255.0)
      throw Error(ErrorCode::kInvalidPolicy, "min_mean_luma must lie in [0, 255]");
    if (!allow_override && (min_width < kProtocolMinWidth || min_height < kProtocolMinHeight))
      throw Error(ErrorCode::kInvalidPolicy,
                  "resolution floor below 1900x500 requires allow_override=true");
  }

  static QualityPolicy relaxed(int width, int height, double luma = 60.0) {
    return {width, height, luma, true};
  }
};

struct QualityReport {
  bool resolution_ok = false;
  bool brightness_ok = false;
  bool passes = false;
  std::vector<std::string> messages;

  bool operator==(const QualityReport&) const = default;
};

struct EyeHint {
  BoundingBox box;
  std::optional<EyeSide> side;

  bool operator==(const EyeHint&) const = default;
};

struct ImageRecord {
  std::string path;
  GazeAngle angle = GazeAngle::kHorizontal;
  int width = 1;
  int height = 1;
  std::string device_id;
  std::optional<QualityReport> quality;
  std::vector<EyeHint> boxes;

  bool operator==(const ImageRecord&) const = default;
};

struct CaptureSession {
  std::string session_id;
  std::string identity_id;
  std::optional<CohortLabel> cohort;
  bool consent = false;
  std::map<GazeAngle, ImageRecord> images;
  std::string created_at;
  json metadata = json::object();

  bool operator==(const CaptureSession&) const = default;
};

struct DatasetManifest {
  std::string version = kManifestVersion;
  std::vector<CaptureSession> sessions;
  QualityPolicy quality_policy;

  bool operator==(const DatasetManifest&) const = default;
};

// ---- quality gates ----

inline QualityReport validate_image(const ImageU8& image, const QualityPolicy& policy) {
  QualityReport r;
  r.resolution_ok = image.width >= policy.min_width && image.height >= policy.min_height;
  const double luma = mean_luma(image);
  r.brightness_ok = luma >= policy.min_mean_luma;
  r.passes = r.resolution_ok && r.brightness_ok;
  if (!r.resolution_ok) {
    std::ostringstream os;
    os << "resolution " << image.width << "x" << image.height << " is below the minimum "
       << policy.min_width << "x" << policy.min_height;
    r.messages.push_back(os.str());
  }
  if (!r.brightness_ok) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(1);
    os << "mean luminance " << luma << " is below the minimum " << policy.min_mean_luma
       << "; retake in a well-lit place";
    r.messages.push_back(os.str());
  }
  return r;
}

// Reads the record's file (relative paths resolve against base_dir).
inline QualityReport validate_image(const ImageRecord& record, const QualityPolicy& policy,
                                    const std::filesystem::path& base_dir = {}) {
  return validate_image(load_image(base_dir / record.path), policy);
}

struct Violation {
  enum class Kind { kMissingAngle, kQualityFailed, kUnreadableImage, kConsentMissing };

  Kind kind;
  std::optional<GazeAngle> angle;
  std::string message;

  bool operator==(const Violation&) const = default;
};

inline std::string_view to_string(Violation::Kind k) {
  switch (k) {
    case Violation::Kind::kMissingAngle: return "MISSING_ANGLE";
    case Violation::Kind::kQualityFailed: return "QUALITY_FAILED";
    case Violation::Kind::kUnreadableImage: return "UNREADABLE_IMAGE";
    case Violation::Kind::kConsentMissing: return "CONSENT_MISSING";
  }
  return "?";
}

inline std::string describe(const Violation& v) {
  std::string s(to_string(v.kind));
  if (v.angle) s += "(" + std::string(to_string(*v.angle)) + ")";
  if (!v.message.empty()) s += ": " + v.message;
  return s;
}

// Records without a stored QualityReport are checked by reading the file.
inline std::vector<Violation> validate_session(const CaptureSession& session, const QualityPolicy& policy,
                                               const std::filesystem::path& base_dir = {}) {
  std::vector<Violation> out;
  if (!session.consent)
    out.push_back({Violation::Kind::kConsentMissing, std::nullopt, "informed consent not recorded"});
  for (GazeAngle angle : kAllAngles) {
    const auto it = session.images.find(angle);
    if (it == session.images.end()) {
      out.push_back({Violation::Kind::kMissingAngle, angle, "no image for this gaze angle"});
      continue;
    }
    std::optional<QualityReport> report = it->second.quality;
    if (!report) {
      try {
        report = validate_image(it->second, policy, base_dir);
      } catch (const Error& e) {
        out.push_back({Violation::Kind::kUnreadableImage, angle, e.detail()});
        continue;
      }
    }
    if (!report->passes) {
      std::string msg;
      for (const auto& m : report->messages) msg += (msg.empty() ? "" : "; ") + m;
      out.push_back({Violation::Kind::kQualityFailed, angle, msg});
    }
  }
  return out;
}

// ---- JSON schema ----

inline json to_json_value(const QualityPolicy& p) {
  return {{"min_width", p.min_width},
          {"min_height", p.min_height},
          {"min_mean_luma", p.min_mean_luma},
          {"allow_override", p.allow_override}};
}

inline json to_json_value(const QualityReport& r) {
  return {{"resolution_ok", r.resolution_ok},
          {"brightness_ok", r.brightness_ok},
          {"passes", r.passes},
          {"messages", r.messages}};
}

inline json to_json_value(const ImageRecord& r) {
  json j = {{"path", r.path},
            {"angle", to_string(r.angle)},
            {"width", r.width},
            {"height", r.height},
            {"device_id", r.device_id}};
  if (r.quality) j["quality"] = to_json_value(*r.quality);
  if (!r.boxes.empty()) {
    json boxes = json::array();
    for (const auto& b : r.boxes) {
      json e = {b.box.x, b.box.y, b.box.w, b.box.h};
      if (b.side) e.push_back(to_string(*b.side));
      boxes.push_back(e);
    }
    j["boxes"] = boxes;
  }
  return j;
}

inline json to_json_value(const CaptureSession& s) {
  json images = json::array();
  for (const auto& [angle, rec] : s.images) images.push_back(to_json_value(rec));
  return {{"session_id", s.session_id},
          {"identity_id", s.identity_id},
          {"cohort", s.cohort ? json(to_string(*s.cohort)) : json(nullptr)},
          {"consent", s.consent},
          {"created_at", s.created_at},
          {"metadata", s.metadata},
          {"images", images}};
}

inline json to_json_value(const DatasetManifest& m) {
  json sessions = json::array();
  for (const auto& s : m.sessions) sessions.push_back(to_json_value(s));
  return {{"version", m.version}, {"quality_policy", to_json_value(m.quality_policy)}, {"sessions", sessions}};
}

namespace detail {

// Typed field access with a dotted path in every diagnostic.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  const json& node() const { return j_; }
  const std::string& path() const { return path_; }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw Error(ErrorCode::kParseError, "field " + join(field) + ": " + what);
  }

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key) && !j_.at(key).is_null(); }

  const json& require(const std::string& key) const {
    if (!j_.is_object()) fail("", "expected an object");
    if (!j_.contains(key)) fail(key, "missing");
    return j_.at(key);
  }

  std::string string(const std::string& key) const {
    const auto& v = require(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  long integer(const std::string& key) const {
    const auto& v = require(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    return v.get<long>();
  }

  double number(const std::string& key) const {
    const auto& v = require(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }

  bool boolean(const std::string& key) const {
    const auto& v = require(key);
    if (!v.is_boolean()) fail(key, "expected a boolean");
    return v.get<bool>();
  }

  const json& array(const std::string& key) const {
    const auto& v = require(key);
    if (!v.is_array()) fail(key, "expected an array");
    return v;
  }

  FieldReader child(const std::string& key) const { return {require(key), join(key)}; }
  FieldReader element(const json& v, const std::string& key, std::size_t i) const {
    return {v, join(key) + "[" + std::to_string(i) + "]"};
  }

  std::string join(const std::string& field) const {
    if (field.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? field : path_ + "." + field;
  }

 private:
  const json& j_;
  std::string path_;
};

inline QualityPolicy read_policy(const FieldReader& r) {
  QualityPolicy p;
  p.min_width = static_cast<int>(r.integer("min_width"));
  p.min_height = static_cast<int>(r.integer("min_height"));
  p.min_mean_luma = r.number("min_mean_luma");
  p.allow_override = r.boolean("allow_override");
  return p;
}

inline QualityReport read_report(const FieldReader& r) {
  QualityReport q;
  q.resolution_ok = r.boolean("resolution_ok");
  q.brightness_ok = r.boolean("brightness_ok");
  q.passes = r.boolean("passes");
  const auto& msgs = r.array("messages");
  for (std::size_t i = 0; i < msgs.size(); ++i) {
    if (!msgs[i].is_string()) r.fail("messages[" + std::to_string(i) + "]", "expected a string");
    q.messages.push_back(msgs[i].get<std::string>());
  }
  if (q.passes != (q.resolution_ok && q.brightness_ok))
    r.fail("passes", "must equal resolution_ok AND brightness_ok");
  return q;
}

inline ImageRecord read_image_record(const FieldReader& r) {
  ImageRecord rec;
  rec.path = r.string("path");
  const auto angle = parse_gaze_angle(r.string("angle"));
  if (!angle) r.fail("angle", "unknown gaze angle '" + r.string("angle") + "'");
  rec.angle = *angle;
  rec.width = static_cast<int>(r.integer("width"));
  rec.height = static_cast<int>(r.integer("height"));
  if (rec.width < 1 || rec.height < 1) r.fail("width", "width and height must be >= 1");
  rec.device_id = r.has("device_id") ? r.string("device_id") : std::string{};
  if (r.has("quality")) rec.quality = read_report(r.child("quality"));
  if (r.has("boxes")) {
    const auto& boxes = r.array("boxes");
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const auto& b = boxes[i];
      const std::string field = "boxes[" + std::to_string(i) + "]";
      if (!b.is_array() || b.size() < 4 || b.size() > 5) r.fail(field, "expected [x, y, w, h(, side)]");
      for (std::size_t k = 0; k < 4; ++k)
        if (!b[k].is_number_integer()) r.fail(field, "coordinates must be integers");
      EyeHint hint{{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()}, std::nullopt};
      if (b.size() == 5) {
        if (!b[4].is_string()) r.fail(field, "side must be a string");
        hint.side = parse_eye_side(b[4].get<std::string>());
        if (!hint.side) r.fail(field, "unknown eye side");
      }
      rec.boxes.push_back(hint);
    }
  }
  return rec;
}

inline CaptureSession read_session(const FieldReader& r) {
  CaptureSession s;
  s.session_id = r.string("session_id");
  s.identity_id = r.string("identity_id");
  if (s.session_id.empty()) r.fail("session_id", "must not be empty");
  if (s.identity_id.empty()) r.fail("identity_id", "must not be empty");
  if (r.has("cohort")) {
    const auto c = parse_cohort(r.string("cohort"));
    if (!c) r.fail("cohort", "unknown cohort '" + r.string("cohort") + "'");
    s.cohort = c;
  }
  s.consent = r.boolean("consent");
  s.created_at = r.has("created_at") ? r.string("created_at") : std::string{};
  if (r.has("metadata")) {
    if (!r.require("metadata").is_object()) r.fail("metadata", "expected an object");
    s.metadata = r.require("metadata");
  }
  const auto& images = r.array("images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto rec = read_image_record(r.element(images[i], "images", i));
    if (s.images.count(rec.angle))
      r.fail("images[" + std::to_string(i) + "]",
             "duplicate gaze angle " + std::string(to_string(rec.angle)) + " (one photo per angle)");
    s.images.emplace(rec.angle, std::move(rec));
  }
  return s;
}

inline std::pair<int, int> line_column(const std::string& text, std::size_t byte) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

// Identity ids must map to a single cohort and session ids must be unique.
inline void check_manifest_invariants(const DatasetManifest& m) {
  std::map<std::string, std::optional<CohortLabel>> cohort_of;
  std::set<std::string> session_ids;
  for (const auto& s : m.sessions) {
    if (!session_ids.insert(s.session_id).second)
      throw Error(ErrorCode::kDuplicateIdentity, "session_id '" + s.session_id + "' appears twice");
    auto [it, inserted] = cohort_of.emplace(s.identity_id, s.cohort);
    if (!inserted && it->second != s.cohort)
      throw Error(ErrorCode::kDuplicateIdentity,
                  "identity '" + s.identity_id + "' carries two different cohort labels");
  }
}

inline DatasetManifest manifest_from_json(const json& j) {
  detail::FieldReader root(j, "");
  DatasetManifest m;
  m.version = root.string("version");
  m.quality_policy = detail::read_policy(root.child("quality_policy"));
  const auto& sessions = root.array("sessions");
  for (std::size_t i = 0; i < sessions.size(); ++i)
    m.sessions.push_back(detail::read_session(root.element(sessions[i], "sessions", i)));
  check_manifest_invariants(m);
  return m;
}

inline DatasetManifest parse_manifest(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = detail::line_column(text, e.byte == 0 ? 0 : e.byte - 1);
    throw Error(ErrorCode::kParseError,
                "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + e.what());
  }
  return manifest_from_json(j);
}

// Canonical text: sorted keys, two-space indent, trailing newline.
inline std::string serialize_manifest(const DatasetManifest& m) {
  check_manifest_invariants(m);
  return to_json_value(m).dump(2) + "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_manifest(buf.str());
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.detail());
  }
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  const auto text = serialize_manifest(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write manifest " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIoError, "short write to " + path.string());
}

}  // namespace oculoscreen
