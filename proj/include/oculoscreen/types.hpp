#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

#include "oculoscreen/error.hpp"

namespace oculoscreen {

// The five capture poses, in protocol order. The numeric order is also the
// block order of the person feature vector and must not change.
enum class GazeAngle { kDown = 0, kHorizontal = 1, kLeft = 2, kRight = 3, kUp = 4 };

inline constexpr std::size_t kNumAngles = 5;
inline constexpr std::array<GazeAngle, kNumAngles> kAllAngles = {
    GazeAngle::kDown, GazeAngle::kHorizontal, GazeAngle::kLeft, GazeAngle::kRight,
    GazeAngle::kUp};

enum class CohortLabel { kCovid = 0, kPulmonary = 1, kOcular = 2, kHealthy = 3 };

inline constexpr std::size_t kNumCohorts = 4;
inline constexpr std::array<CohortLabel, kNumCohorts> kAllCohorts = {
    CohortLabel::kCovid, CohortLabel::kPulmonary, CohortLabel::kOcular, CohortLabel::kHealthy};

// Classifier output order. Serialized into every model bundle.
inline constexpr std::array<CohortLabel, kNumCohorts> kClassOrder = {
    CohortLabel::kHealthy, CohortLabel::kCovid, CohortLabel::kPulmonary, CohortLabel::kOcular};

inline constexpr std::size_t class_index(CohortLabel c) {
  switch (c) {
    case CohortLabel::kHealthy: return 0;
    case CohortLabel::kCovid: return 1;
    case CohortLabel::kPulmonary: return 2;
    case CohortLabel::kOcular: return 3;
  }
  return 0;
}

enum class EyeSide { kLeftEye = 0, kRightEye = 1 };

// Screening taxonomy derived from cohorts.
enum class Taxonomy { kNegative = 0, kCovid = 1, kOther = 2 };

inline constexpr Taxonomy default_taxonomy(CohortLabel c) {
  switch (c) {
    case CohortLabel::kHealthy: return Taxonomy::kNegative;
    case CohortLabel::kCovid: return Taxonomy::kCovid;
    case CohortLabel::kPulmonary:
    case CohortLabel::kOcular: return Taxonomy::kOther;
  }
  return Taxonomy::kNegative;
}

struct BoundingBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool operator==(const BoundingBox&) const = default;
  int right() const { return x + w; }
  int bottom() const { return y + h; }
  long area() const { return static_cast<long>(w) * h; }
};

// Intersection of the box with [0,width)x[0,height); w or h become 0 when
// they do not overlap.
inline BoundingBox clip_box(const BoundingBox& b, int width, int height) {
  const int x0 = std::clamp(b.x, 0, width);
  const int y0 = std::clamp(b.y, 0, height);
  const int x1 = std::clamp(b.x + b.w, 0, width);
  const int y1 = std::clamp(b.y + b.h, 0, height);
  return {x0, y0, std::max(0, x1 - x0), std::max(0, y1 - y0)};
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const int x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const int x1 = std::min(a.right(), b.right()), y1 = std::min(a.bottom(), b.bottom());
  if (x1 <= x0 || y1 <= y0) return 0.0;
  const double inter = static_cast<double>(x1 - x0) * (y1 - y0);
  return inter / (static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter);
}

// ---- names ----

inline constexpr std::string_view to_string(GazeAngle a) {
  switch (a) {
    case GazeAngle::kDown: return "DOWN";
    case GazeAngle::kHorizontal: return "HORIZONTAL";
    case GazeAngle::kLeft: return "LEFT";
    case GazeAngle::kRight: return "RIGHT";
    case GazeAngle::kUp: return "UP";
  }
  return "?";
}

inline constexpr std::string_view to_string(CohortLabel c) {
  switch (c) {
    case CohortLabel::kCovid: return "COVID";
    case CohortLabel::kPulmonary: return "PULMONARY";
    case CohortLabel::kOcular: return "OCULAR";
    case CohortLabel::kHealthy: return "HEALTHY";
  }
  return "?";
}

inline constexpr std::string_view to_string(EyeSide s) {
  return s == EyeSide::kLeftEye ? "LEFT_EYE" : "RIGHT_EYE";
}

inline constexpr std::string_view to_string(Taxonomy t) {
  switch (t) {
    case Taxonomy::kNegative: return "NEGATIVE";
    case Taxonomy::kCovid: return "COVID";
    case Taxonomy::kOther: return "OTHER";
  }
  return "?";
}

namespace detail {
inline std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}
}  // namespace detail

// Parsers accept any letter case.
inline std::optional<GazeAngle> parse_gaze_angle(std::string_view s) {
  const auto u = detail::upper(s);
  for (auto a : kAllAngles)
    if (u == to_string(a)) return a;
  return std::nullopt;
}

inline std::optional<CohortLabel> parse_cohort(std::string_view s) {
  const auto u = detail::upper(s);
  for (auto c : kAllCohorts)
    if (u == to_string(c)) return c;
  return std::nullopt;
}

inline std::optional<EyeSide> parse_eye_side(std::string_view s) {
  const auto u = detail::upper(s);
  if (u == "LEFT_EYE") return EyeSide::kLeftEye;
  if (u == "RIGHT_EYE") return EyeSide::kRightEye;
  return std::nullopt;
}

inline std::optional<Taxonomy> parse_taxonomy(std::string_view s) {
  const auto u = detail::upper(s);
  for (auto t : {Taxonomy::kNegative, Taxonomy::kCovid, Taxonomy::kOther})
    if (u == to_string(t)) return t;
  return std::nullopt;
}

}  // namespace oculoscreen
