#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oculoscreen/capture.hpp"
#include "oculoscreen/encoder.hpp"
#include "oculoscreen/preprocess.hpp"

namespace oculoscreen {

// Everything needed to turn a capture session into encoder inputs. Saved
// with every model so inference reproduces the training geometry.
struct PipelineConfig {
  CropConfig crop;
  GridSpec grid;
  EncoderConfig encoder;
  DetectorConfig detector;

  int cell_count() const { return grid.cell_count(); }
  int feature_dim() const { return static_cast<int>(kNumAngles) * cell_count() * encoder.embed_dim; }
};

using CellMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using GridKey = std::pair<GazeAngle, EyeSide>;

struct FeatureVector {
  std::vector<double> values;
  int views = static_cast<int>(kNumAngles);
  int cells = 0;
  int dim = 0;
  std::string identity_id;

  // Offset of the (angle, cell) block.
  std::size_t block_offset(GazeAngle a, int cell) const {
    return (static_cast<std::size_t>(a) * cells + cell) * dim;
  }
};

// Encoder inputs for one person: rows ordered by angle, then eye, then cell.
struct PersonCells {
  std::string identity_id;
  std::string session_id;
  std::optional<CohortLabel> cohort;
  int cells = 0;
  std::array<int, kNumAngles> eyes{};
  CellMatrix rows;
};

inline void append_cell_row(const ImageF& cell, CellMatrix& rows, Eigen::Index r) {
  for (std::size_t i = 0; i < cell.data.size(); ++i) rows(r, static_cast<Eigen::Index>(i)) = cell.data[i];
}

inline PersonCells collect_cells(const std::map<GridKey, SectorGrid>& grids) {
  PersonCells p;
  int g = -1, cell_size = -1;
  for (const auto& [key, grid] : grids) {
    if (g < 0) {
      g = grid.spec.cell_count();
      cell_size = grid.cell_size;
    } else if (grid.spec.cell_count() != g || grid.cell_size != cell_size) {
      throw Error(ErrorCode::kShapeMismatch, "all grids of a person must share one GridSpec");
    }
    if (static_cast<int>(grid.cells.size()) != g) throw Error(ErrorCode::kShapeMismatch, "grid cell count mismatch");
    p.eyes[static_cast<std::size_t>(key.first)] += 1;
  }
  for (GazeAngle a : kAllAngles)
    if (p.eyes[static_cast<std::size_t>(a)] == 0)
      throw Error(ErrorCode::kMissingAngle, std::string(to_string(a)) + " has no eye grid");
  p.cells = g;
  int total = 0;
  for (int e : p.eyes) total += e * g;
  p.rows.resize(total, cell_size * cell_size * 3);
  Eigen::Index r = 0;
  for (GazeAngle a : kAllAngles)
    for (EyeSide side : {EyeSide::kLeftEye, EyeSide::kRightEye}) {
      const auto it = grids.find({a, side});
      if (it == grids.end()) continue;
      for (const auto& cell : it->second.cells) append_cell_row(cell, p.rows, r++);
    }
  return p;
}

// Batch of persons flattened to one encoder input, with the pooling map
// from encoder rows back to person feature blocks.
struct FeatureBatch {
  CellMatrix input;
  std::vector<int> row_person;
  std::vector<int> row_block;
  std::vector<double> row_weight;
  int persons = 0;
  int blocks = 0;
};

inline FeatureBatch make_batch(std::span<const PersonCells* const> people) {
  FeatureBatch b;
  b.persons = static_cast<int>(people.size());
  if (people.empty()) return b;
  b.blocks = static_cast<int>(kNumAngles) * people.front()->cells;
  Eigen::Index total = 0;
  for (const auto* p : people) {
    if (p->cells * static_cast<int>(kNumAngles) != b.blocks)
      throw Error(ErrorCode::kShapeMismatch, "persons in a batch must share one grid size");
    total += p->rows.rows();
  }
  b.input.resize(total, people.front()->rows.cols());
  b.row_person.reserve(total);
  b.row_block.reserve(total);
  b.row_weight.reserve(total);
  Eigen::Index r = 0;
  for (int pi = 0; pi < b.persons; ++pi) {
    const auto& p = *people[pi];
    b.input.middleRows(r, p.rows.rows()) = p.rows;
    r += p.rows.rows();
    for (std::size_t a = 0; a < kNumAngles; ++a)
      for (int e = 0; e < p.eyes[a]; ++e)
        for (int c = 0; c < p.cells; ++c) {
          b.row_person.push_back(pi);
          b.row_block.push_back(static_cast<int>(a) * p.cells + c);
          b.row_weight.push_back(1.0 / p.eyes[a]);
        }
  }
  return b;
}

// Mean-pools eyes per (angle, cell) and concatenates blocks:
// persons x (5 * G * d).
inline CellMatrix pool_features(const FeatureBatch& b, const CellMatrix& embeddings) {
  const Eigen::Index d = embeddings.cols();
  CellMatrix f = CellMatrix::Zero(b.persons, b.blocks * d);
  for (std::size_t r = 0; r < b.row_person.size(); ++r)
    f.row(b.row_person[r]).segment(b.row_block[r] * d, d) += b.row_weight[r] * embeddings.row(static_cast<Eigen::Index>(r));
  return f;
}

// Inverse of pool_features for gradients.
inline CellMatrix unpool_gradient(const FeatureBatch& b, const CellMatrix& d_features, Eigen::Index d) {
  CellMatrix g(static_cast<Eigen::Index>(b.row_person.size()), d);
  for (std::size_t r = 0; r < b.row_person.size(); ++r)
    g.row(static_cast<Eigen::Index>(r)) = b.row_weight[r] * d_features.row(b.row_person[r]).segment(b.row_block[r] * d, d);
  return g;
}

inline FeatureVector assemble_person_vector(const std::map<GridKey, SectorGrid>& grids,
                                            const ConvEncoder<double>& encoder, std::string identity_id = {}) {
  const PersonCells p = collect_cells(grids);
  const PersonCells* one[] = {&p};
  const FeatureBatch b = make_batch(one);
  const CellMatrix f = pool_features(b, encoder.forward(b.input));
  FeatureVector fv;
  fv.values.assign(f.data(), f.data() + f.size());
  fv.cells = p.cells;
  fv.dim = encoder.embed_dim();
  fv.identity_id = std::move(identity_id);
  return fv;
}

// Detect -> crop -> grid for every image of a session. Hint boxes from the
// record are used when present.
inline std::map<GridKey, SectorGrid> session_grids(const CaptureSession& session, const std::filesystem::path& base_dir,
                                                   const PipelineConfig& cfg) {
  std::map<GridKey, SectorGrid> grids;
  for (GazeAngle a : kAllAngles) {
    const auto it = session.images.find(a);
    if (it == session.images.end())
      throw Error(ErrorCode::kMissingAngle, std::string(to_string(a)) + " missing from session " + session.session_id);
    const auto& rec = it->second;
    const ImageU8 img = load_image(base_dir / rec.path);
    std::optional<std::span<const EyeHint>> hint;
    if (!rec.boxes.empty()) hint = std::span<const EyeHint>(rec.boxes);
    const auto eyes = detect_eyes(img, hint, cfg.detector);
    const ImageF unit = to_unit_float(img);
    for (const auto& eye : eyes) {
      const EyeCrop crop = crop_normalize(unit, eye.box, cfg.crop, eye.side, a);
      grids[{a, eye.side}] = partition_grid(crop, cfg.grid, cfg.encoder.cell_size);
    }
  }
  return grids;
}

inline PersonCells prepare_person(const CaptureSession& session, const std::filesystem::path& base_dir,
                                  const PipelineConfig& cfg) {
  PersonCells p = collect_cells(session_grids(session, base_dir, cfg));
  p.identity_id = session.identity_id;
  p.session_id = session.session_id;
  p.cohort = session.cohort;
  return p;
}

}  // namespace oculoscreen
