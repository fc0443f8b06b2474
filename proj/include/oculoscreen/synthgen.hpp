#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oculoscreen/capture.hpp"
#include "oculoscreen/classifier.hpp"
#include "oculoscreen/image.hpp"
#include "oculoscreen/preprocess.hpp"
#include "oculoscreen/random.hpp"

namespace oculoscreen {

// Synthetic periocular corpus with class-conditional cues whose strength is
// scaled by `signal`:
//   COVID      redness in the medial and lateral conjunctiva + secretion specks
//   OCULAR     diffuse redness over the whole sclera + upper-lid droop
//   PULMONARY  slight global pallor, no conjunctival cue
//   HEALTHY    baseline
struct SynthConfig {
  std::map<CohortLabel, int> n_per_cohort = collected_counts();
  double signal = 1.0;
  double noise_sigma = 0.05;
  int image_width = 192;
  int image_height = 96;
  int eye_width = 128;
  int eye_height = 64;
  std::uint64_t seed = 0;
  int devices = 1;
  // Per-device channel gain spread.
  double device_shift = 0.0;

  static std::map<CohortLabel, int> collected_counts() {
    return {{CohortLabel::kCovid, 104}, {CohortLabel::kPulmonary, 131}, {CohortLabel::kOcular, 68},
            {CohortLabel::kHealthy, 136}};
  }
  // 300 COVID and 300 negatives split 1:1:1.
  static std::map<CohortLabel, int> protocol_counts() {
    return {{CohortLabel::kCovid, 300}, {CohortLabel::kPulmonary, 100}, {CohortLabel::kOcular, 100},
            {CohortLabel::kHealthy, 100}};
  }

  int total() const {
    int n = 0;
    for (auto c : kAllCohorts) n += count(c);
    return n;
  }
  int count(CohortLabel c) const {
    const auto it = n_per_cohort.find(c);
    return it == n_per_cohort.end() ? 0 : it->second;
  }

  void check() const {
    if (signal < 0.0 || signal > 1.0) throw Error(ErrorCode::kInvalidArgument, "signal strength must lie in [0, 1]");
    for (const auto& [c, n] : n_per_cohort)
      if (n < 0) throw Error(ErrorCode::kInvalidArgument, "cohort counts must be >= 0");
    if (noise_sigma < 0.0) throw Error(ErrorCode::kInvalidArgument, "noise_sigma must be >= 0");
    if (eye_width < 8 || eye_height < 4 || eye_width > image_width || eye_height > image_height)
      throw Error(ErrorCode::kInvalidArgument, "eye box must fit inside the image");
    if (devices < 1) throw Error(ErrorCode::kInvalidArgument, "devices must be >= 1");
  }
};

enum class RednessZone { kNone, kMedialLateral, kDiffuse };

inline std::string_view to_string(RednessZone z) {
  switch (z) {
    case RednessZone::kNone: return "NONE";
    case RednessZone::kMedialLateral: return "MEDIAL_LATERAL";
    case RednessZone::kDiffuse: return "DIFFUSE";
  }
  return "?";
}

struct Speck {
  double u, v;  // position relative to the eye box, [0,1)
};

// Per-identity draws. The latent cue bases are drawn for every identity in
// the same order so an index always gets the same numbers whatever its
// cohort or the signal strength.
struct SynthIdentity {
  std::string identity_id;
  int index = 0;
  CohortLabel cohort = CohortLabel::kHealthy;
  int age = 0;
  bool female = false;
  int device = 0;

  std::array<double, 3> skin{};
  std::array<double, 3> iris{};
  double sclera_tint = 0.0;
  double scale = 1.0;
  BoundingBox eye_box;
  double lid_base = 0.0;
  double vessel_base = 0.0;

  double redness_base = 0.0;
  int speck_base = 0;
  std::vector<Speck> specks;
  double droop_base = 0.0;
  double pallor_base = 0.0;
};

struct CueTruth {
  std::string identity_id;
  CohortLabel cohort = CohortLabel::kHealthy;
  double redness_amplitude = 0.0;
  RednessZone redness_zone = RednessZone::kNone;
  int speck_count = 0;
  double lid_droop = 0.0;
  double pallor = 0.0;
  // Grid cells (of the requested GridSpec) overlapped by conjunctival cues.
  std::vector<int> cells;
};

inline std::string synth_identity_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%05d", index);
  return buf;
}

inline CohortLabel synth_cohort_of(const SynthConfig& cfg, int index) {
  int start = 0;
  for (auto c : kAllCohorts) {
    if (index < start + cfg.count(c)) return c;
    start += cfg.count(c);
  }
  throw Error(ErrorCode::kUnknownIdentity, "identity index " + std::to_string(index) + " is outside the corpus");
}

inline SynthIdentity make_identity(const SynthConfig& cfg, int index) {
  if (index < 0 || index >= cfg.total())
    throw Error(ErrorCode::kUnknownIdentity, "identity index " + std::to_string(index) + " is outside the corpus");
  Rng rng = Rng::derive(cfg.seed, 0x1D, static_cast<std::uint64_t>(index));
  SynthIdentity id;
  id.index = index;
  id.identity_id = synth_identity_id(index);
  id.cohort = synth_cohort_of(cfg, index);
  id.age = static_cast<int>(std::lround(std::clamp(rng.normal(34.0, 14.0), 5.0, 66.0)));
  id.female = rng.bernoulli(0.3269);
  id.device = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.devices)));

  const double bright = rng.normal(0.0, 0.02);
  const std::array<double, 3> skin_mean = {0.86, 0.69, 0.59};
  for (int c = 0; c < 3; ++c) id.skin[c] = std::clamp(skin_mean[c] + bright + rng.normal(0.0, 0.015), 0.0, 1.0);
  const double iris_dark = rng.uniform(0.6, 1.2);
  const std::array<double, 3> iris_mean = {0.42, 0.27, 0.16};
  for (int c = 0; c < 3; ++c) id.iris[c] = std::clamp(iris_mean[c] * iris_dark, 0.0, 1.0);
  id.sclera_tint = rng.uniform(-0.02, 0.02);
  id.scale = rng.uniform(0.92, 1.04);
  const int max_dx = std::min(4, (cfg.image_width - cfg.eye_width) / 2);
  const int max_dy = std::min(4, (cfg.image_height - cfg.eye_height) / 2);
  const int dx = static_cast<int>(rng.below(2 * max_dx + 1)) - max_dx;
  const int dy = static_cast<int>(rng.below(2 * max_dy + 1)) - max_dy;
  id.eye_box = {(cfg.image_width - cfg.eye_width) / 2 + dx, (cfg.image_height - cfg.eye_height) / 2 + dy,
                cfg.eye_width, cfg.eye_height};
  id.lid_base = rng.uniform(0.04, 0.12);
  id.vessel_base = rng.uniform(0.0, 0.12);

  id.redness_base = rng.uniform(0.6, 1.0);
  id.speck_base = 2 + static_cast<int>(rng.below(4));
  for (int k = 0; k < 5; ++k) {
    // Specks sit in the outer quarters of the eye box, near the canthi.
    const bool medial = rng.bernoulli(0.5);
    const double u = medial ? rng.uniform(0.08, 0.22) : rng.uniform(0.78, 0.92);
    id.specks.push_back({u, rng.uniform(0.42, 0.62)});
  }
  id.droop_base = rng.uniform(0.2, 0.32);
  id.pallor_base = rng.uniform(0.6, 1.0);
  return id;
}

namespace detail {

enum class Tissue { kSkin, kLid, kSclera, kIris, kPupil };

struct EyeGeometry {
  double cx, cy, rx, ry;
  double iris_x, iris_y, iris_r, pupil_r;
  double lid_line;
};

inline EyeGeometry eye_geometry(const SynthIdentity& id, GazeAngle angle, double droop) {
  EyeGeometry g{};
  const auto& b = id.eye_box;
  g.cx = b.x + b.w / 2.0;
  g.cy = b.y + b.h / 2.0;
  g.rx = 0.46 * b.w * id.scale;
  g.ry = 0.42 * b.h * id.scale;
  double gx = 0.0, gy = 0.0;
  switch (angle) {
    case GazeAngle::kLeft: gx = -1.0; break;
    case GazeAngle::kRight: gx = 1.0; break;
    case GazeAngle::kUp: gy = -1.0; break;
    case GazeAngle::kDown: gy = 1.0; break;
    case GazeAngle::kHorizontal: break;
  }
  g.iris_x = g.cx + gx * 0.42 * g.rx;
  g.iris_y = g.cy + gy * 0.28 * g.ry;
  g.iris_r = 0.62 * g.ry;
  g.pupil_r = 0.38 * g.iris_r;
  g.lid_line = g.cy - g.ry + (id.lid_base + droop) * 2.0 * g.ry;
  return g;
}

inline Tissue tissue_at(const EyeGeometry& g, double px, double py) {
  const double ex = (px - g.cx) / g.rx, ey = (py - g.cy) / g.ry;
  if (ex * ex + ey * ey > 1.0) return Tissue::kSkin;
  if (py < g.lid_line) return Tissue::kLid;
  const double ix = px - g.iris_x, iy = py - g.iris_y;
  const double r2 = ix * ix + iy * iy;
  if (r2 <= g.pupil_r * g.pupil_r) return Tissue::kPupil;
  if (r2 <= g.iris_r * g.iris_r) return Tissue::kIris;
  return Tissue::kSclera;
}

inline bool in_medial_lateral_zone(const BoundingBox& box, double px) {
  const double u = (px - box.x) / box.w;
  return u < 0.25 || u >= 0.75;
}

}  // namespace detail

// Signal-scaled cue parameters, without cell resolution.
inline CueTruth cue_parameters(const SynthIdentity& id, const SynthConfig& cfg) {
  const double s = cfg.signal;
  CueTruth t;
  t.identity_id = id.identity_id;
  t.cohort = id.cohort;
  switch (id.cohort) {
    case CohortLabel::kCovid:
      t.redness_amplitude = s * id.redness_base;
      t.redness_zone = RednessZone::kMedialLateral;
      t.speck_count = static_cast<int>(std::lround(s * id.speck_base));
      break;
    case CohortLabel::kOcular:
      t.redness_amplitude = s * id.redness_base;
      t.redness_zone = RednessZone::kDiffuse;
      t.lid_droop = s * id.droop_base;
      break;
    case CohortLabel::kPulmonary: t.pallor = s * id.pallor_base; break;
    case CohortLabel::kHealthy: break;
  }
  return t;
}

// Cue ground truth with cells resolved against a grid. The cue mask is
// evaluated at crop resolution over all five views.
inline CueTruth describe_cues(const SynthIdentity& id, const SynthConfig& cfg, const GridSpec& grid = {},
                              const CropConfig& crop = {}) {
  CueTruth t = cue_parameters(id, cfg);
  if (t.redness_amplitude <= 0.0 && t.speck_count == 0) return t;

  const auto masks = cell_masks(crop.height, crop.width, grid);
  std::set<int> cells;
  const auto& box = id.eye_box;
  for (GazeAngle a : kAllAngles) {
    const auto geo = detail::eye_geometry(id, a, t.lid_droop);
    for (int y = 0; y < crop.height; ++y) {
      for (int x = 0; x < crop.width; ++x) {
        const double px = box.x + (x + 0.5) * box.w / crop.width;
        const double py = box.y + (y + 0.5) * box.h / crop.height;
        if (detail::tissue_at(geo, px, py) != detail::Tissue::kSclera) continue;
        if (t.redness_zone == RednessZone::kMedialLateral && !detail::in_medial_lateral_zone(box, px)) continue;
        for (std::size_t c = 0; c < masks.size(); ++c)
          if (masks[c][static_cast<std::size_t>(y) * crop.width + x]) cells.insert(static_cast<int>(c));
      }
    }
  }
  t.cells.assign(cells.begin(), cells.end());
  return t;
}

inline CueTruth describe_cues(const SynthConfig& cfg, const std::string& identity_id, const GridSpec& grid = {},
                              const CropConfig& crop = {}) {
  int index = -1;
  if (identity_id.size() == 6 && identity_id[0] == 'S' &&
      std::all_of(identity_id.begin() + 1, identity_id.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
    index = std::stoi(identity_id.substr(1));
  if (index < 0 || index >= cfg.total()) throw Error(ErrorCode::kUnknownIdentity, "no synthetic identity '" + identity_id + "'");
  return describe_cues(make_identity(cfg, index), cfg, grid, crop);
}

inline ImageU8 render_view(const SynthIdentity& id, GazeAngle angle, const SynthConfig& cfg) {
  const CueTruth cue = cue_parameters(id, cfg);
  const auto geo = detail::eye_geometry(id, angle, cue.lid_droop);
  Rng noise = Rng::derive(cfg.seed, 0x1A, static_cast<std::uint64_t>(id.index), static_cast<std::uint64_t>(angle));
  Rng dev = Rng::derive(cfg.seed, 0xDE, static_cast<std::uint64_t>(id.device));
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  for (auto& gch : gain) gch = 1.0 + cfg.device_shift * dev.normal();

  const auto& box = id.eye_box;
  const double speck_r = 0.0125 * box.w + 0.4;
  ImageU8 img(cfg.image_width, cfg.image_height);
  for (int y = 0; y < cfg.image_height; ++y) {
    for (int x = 0; x < cfg.image_width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      std::array<double, 3> col{};
      switch (detail::tissue_at(geo, px, py)) {
        case detail::Tissue::kSkin: col = id.skin; break;
        case detail::Tissue::kLid:
          for (int c = 0; c < 3; ++c) col[c] = id.skin[c] * 0.9;
          break;
        case detail::Tissue::kPupil: col = {0.05, 0.05, 0.06}; break;
        case detail::Tissue::kIris: col = id.iris; break;
        case detail::Tissue::kSclera: {
          col = {0.95 + id.sclera_tint, 0.94 + id.sclera_tint, 0.91 + id.sclera_tint};
          col[1] -= 0.10 * id.vessel_base;
          col[2] -= 0.10 * id.vessel_base;
          const double a = cue.redness_amplitude;
          if (cue.redness_zone == RednessZone::kMedialLateral && detail::in_medial_lateral_zone(box, px)) {
            col[0] -= 0.02 * a;
            col[1] -= 0.32 * a;
            col[2] -= 0.30 * a;
          } else if (cue.redness_zone == RednessZone::kDiffuse) {
            col[1] -= 0.22 * a;
            col[2] -= 0.20 * a;
          }
          for (int k = 0; k < cue.speck_count && k < static_cast<int>(id.specks.size()); ++k) {
            const double sx = box.x + id.specks[k].u * box.w, sy = box.y + id.specks[k].v * box.h;
            if ((px - sx) * (px - sx) + (py - sy) * (py - sy) <= speck_r * speck_r) col = {0.93, 0.90, 0.70};
          }
          break;
        }
      }
      if (cue.pallor > 0.0) {
        const std::array<double, 3> pale = {0.90, 0.88, 0.88};
        for (int c = 0; c < 3; ++c) col[c] = col[c] * (1.0 - 0.3 * cue.pallor) + 0.3 * cue.pallor * pale[c];
      }
      for (int c = 0; c < 3; ++c) {
        const double v = col[c] * gain[c] + cfg.noise_sigma * noise.normal();
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return img;
}

inline json to_json_value(const CueTruth& t) {
  return {{"identity_id", t.identity_id},
          {"cohort", to_string(t.cohort)},
          {"redness_amplitude", t.redness_amplitude},
          {"redness_zone", to_string(t.redness_zone)},
          {"speck_count", t.speck_count},
          {"lid_droop", t.lid_droop},
          {"pallor", t.pallor},
          {"cells", t.cells}};
}

inline QualityPolicy synth_quality_policy(const SynthConfig& cfg) {
  return QualityPolicy::relaxed(cfg.eye_width, cfg.eye_height);
}

// Writes <out_dir>/images/*.png, <out_dir>/manifest.json and the cue sidecar
// <out_dir>/cues.json; returns the manifest.
inline DatasetManifest generate_corpus(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                       const GridSpec& grid = {}, const CropConfig& crop = {}) {
  cfg.check();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + (out_dir / "images").string() + ": " + ec.message());

  DatasetManifest m;
  m.quality_policy = synth_quality_policy(cfg);
  json cues = json::object();
  for (int i = 0; i < cfg.total(); ++i) {
    const SynthIdentity id = make_identity(cfg, i);
    CaptureSession s;
    s.session_id = "sess-" + id.identity_id;
    s.identity_id = id.identity_id;
    s.cohort = id.cohort;
    s.consent = true;
    s.created_at = "2020-05-30T00:00:00Z";
    s.metadata = {{"age", id.age}, {"sex", id.female ? "F" : "M"}, {"synthetic", true}};
    const std::string device = "synthetic-device-" + std::to_string(id.device);
    for (GazeAngle a : kAllAngles) {
      const ImageU8 img = render_view(id, a, cfg);
      const std::string rel = "images/" + id.identity_id + "_" + std::string(to_string(a)) + ".png";
      try {
        save_png(img, out_dir / rel);
      } catch (const Error& e) {
        throw Error(ErrorCode::kIoError, e.detail());
      }
      ImageRecord rec;
      rec.path = rel;
      rec.angle = a;
      rec.width = img.width;
      rec.height = img.height;
      rec.device_id = device;
      rec.quality = validate_image(img, m.quality_policy);
      rec.boxes.push_back({id.eye_box, EyeSide::kRightEye});
      s.images.emplace(a, std::move(rec));
    }
    m.sessions.push_back(std::move(s));
    cues[id.identity_id] = to_json_value(describe_cues(id, cfg, grid, crop));
  }
  try {
    save_manifest(m, out_dir / "manifest.json");
    detail::write_text(out_dir / "cues.json", cues.dump(2) + "\n");
  } catch (const Error& e) {
    throw Error(ErrorCode::kIoError, e.detail());
  }
  return m;
}

}  // namespace oculoscreen
