#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "oculoscreen/features.hpp"
#include "oculoscreen/synthgen.hpp"

namespace testing_support {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "oculoscreen-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline oculoscreen::ImageU8 solid(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  oculoscreen::ImageU8 img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  return img;
}

inline oculoscreen::SynthConfig small_corpus(int per_cohort, std::uint64_t seed, double signal = 1.0) {
  oculoscreen::SynthConfig c;
  for (auto& [k, n] : c.n_per_cohort) n = per_cohort;
  c.seed = seed;
  c.signal = signal;
  return c;
}

// Renders a synthetic identity and runs crop + grid in memory, using the
// known eye box as the hint.
inline oculoscreen::PersonCells synth_person(const oculoscreen::SynthConfig& cfg, int index,
                                             const oculoscreen::PipelineConfig& pipeline = {}) {
  using namespace oculoscreen;
  const SynthIdentity id = make_identity(cfg, index);
  std::map<GridKey, SectorGrid> grids;
  for (GazeAngle a : kAllAngles) {
    const ImageF unit = to_unit_float(render_view(id, a, cfg));
    const EyeCrop crop = crop_normalize(unit, id.eye_box, pipeline.crop, EyeSide::kRightEye, a);
    grids[{a, EyeSide::kRightEye}] = partition_grid(crop, pipeline.grid, pipeline.encoder.cell_size);
  }
  PersonCells p = collect_cells(grids);
  p.identity_id = id.identity_id;
  p.session_id = "sess-" + id.identity_id;
  p.cohort = id.cohort;
  return p;
}

inline std::vector<oculoscreen::PersonCells> synth_people(const oculoscreen::SynthConfig& cfg,
                                                          const oculoscreen::PipelineConfig& pipeline = {}) {
  std::vector<oculoscreen::PersonCells> out;
  for (int i = 0; i < cfg.total(); ++i) out.push_back(synth_person(cfg, i, pipeline));
  return out;
}

}  // namespace testing_support
