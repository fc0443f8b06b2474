#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <type_traits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oculoscreen/features.hpp"
#include "oculoscreen/random.hpp"

namespace oculoscreen {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 3e-3;
  // Multiplicative per-epoch decay of the learning rate.
  double lr_decay = 0.97;
  double l1_lambda = 1e-4;
  std::uint64_t seed = 0;
  // Epochs without validation improvement before stopping.
  int patience = 6;

  void check() const {
    if (l1_lambda < 0.0) throw Error(ErrorCode::kInvalidArgument, "l1_lambda must be >= 0");
    if (epochs < 1 || batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "epochs and batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning_rate must be > 0");
  }
};

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double l1_lambda = 0.0;
  double best_val_loss = 0.0;
};

using HeadMatrix = Eigen::Matrix<double, Eigen::Dynamic, static_cast<int>(kNumCohorts), Eigen::RowMajor>;
using ClassVector = Eigen::Matrix<double, 1, static_cast<int>(kNumCohorts)>;

struct ModelBundle {
  PipelineConfig config;
  ConvEncoder<double> encoder;
  HeadMatrix head_weights;
  ClassVector head_bias = ClassVector::Zero();
  TrainingMeta meta;

  explicit ModelBundle(PipelineConfig cfg = {})
      : config(std::move(cfg)), encoder(config.encoder), head_weights(HeadMatrix::Zero(config.feature_dim(), kNumCohorts)) {}

  double sparsity() const {
    const auto zeros = (head_weights.array() == 0.0).count();
    return static_cast<double>(zeros) / static_cast<double>(head_weights.size());
  }
};

struct Prediction {
  std::array<double, kNumCohorts> probs{};   // kClassOrder
  std::array<double, kNumCohorts> logits{};  // kClassOrder
  CohortLabel predicted_cohort = CohortLabel::kHealthy;
  Taxonomy taxonomy = Taxonomy::kNegative;

  double prob(CohortLabel c) const { return probs[class_index(c)]; }
};

// Softmax with the lowest class index winning ties.
inline Prediction make_prediction(std::span<const double> logits) {
  Prediction p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t k = 0; k < kNumCohorts; ++k) {
    p.logits[k] = logits[k];
    p.probs[k] = std::exp(logits[k] - mx);
    z += p.probs[k];
  }
  for (auto& v : p.probs) v /= z;
  std::size_t best = 0;
  for (std::size_t k = 1; k < kNumCohorts; ++k)
    if (logits[k] > logits[best]) best = k;
  p.predicted_cohort = kClassOrder[best];
  p.taxonomy = default_taxonomy(p.predicted_cohort);
  return p;
}

namespace detail {

inline CellMatrix person_features(const ConvEncoder<double>& enc, std::span<const PersonCells* const> people) {
  const FeatureBatch b = make_batch(people);
  return pool_features(b, enc.forward(b.input));
}

inline CellMatrix softmax_rows(const CellMatrix& logits) {
  CellMatrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline double mean_cross_entropy(const ModelBundle& m, std::span<const PersonCells* const> people,
                                 std::size_t chunk = 64) {
  double total = 0.0;
  for (std::size_t start = 0; start < people.size(); start += chunk) {
    const auto ptrs = people.subspan(start, std::min(chunk, people.size() - start));
    CellMatrix logits = person_features(m.encoder, ptrs) * m.head_weights;
    logits.rowwise() += m.head_bias;
    const CellMatrix p = softmax_rows(logits);
    for (std::size_t i = 0; i < ptrs.size(); ++i)
      total -= std::log(std::max(p(static_cast<Eigen::Index>(i), class_index(*ptrs[i]->cohort)), 1e-300));
  }
  return total / static_cast<double>(people.size());
}

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  long step = 0;

  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  // Updates params in place; entries in [prox_begin, prox_end) also get the
  // L1 proximal map in Adam's diagonal metric.
  void update(std::span<double> params, std::span<const double> grad, double lr, double l1,
              std::size_t prox_begin, std::size_t prox_end) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double denom = std::sqrt(v[i] / c2) + eps;
      double p = params[i] - lr * (m[i] / c1) / denom;
      if (i >= prox_begin && i < prox_end && l1 > 0.0) {
        const double tau = lr * l1 / denom;
        p = p > tau ? p - tau : (p < -tau ? p + tau : 0.0);
      }
      params[i] = p;
    }
  }
};

inline void check_split(std::span<const PersonCells* const> set, const char* name) {
  if (set.empty()) throw Error(ErrorCode::kEmptySplit, std::string(name) + " split is empty");
  for (const auto* p : set)
    if (!p->cohort) throw Error(ErrorCode::kInvalidArgument, "session " + p->session_id + " has no cohort label");
}

inline std::vector<const PersonCells*> pointers(std::span<const PersonCells> people) {
  std::vector<const PersonCells*> out;
  out.reserve(people.size());
  for (const auto& p : people) out.push_back(&p);
  return out;
}

}  // namespace detail

struct TrainResult {
  ModelBundle bundle;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

// Minimises mean cross-entropy + lambda * |head weights|_1 with Adam and a
// proximal L1 step; returns the snapshot with the best validation loss.
inline TrainResult train(std::span<const PersonCells* const> train_set, std::span<const PersonCells* const> val_set,
                         const TrainConfig& cfg, PipelineConfig pipeline = {}) {
  cfg.check();
  detail::check_split(train_set, "training");
  detail::check_split(val_set, "validation");
  {
    std::set<std::string> ids;
    for (const auto* p : train_set) ids.insert(p->identity_id);
    for (const auto* p : val_set)
      if (ids.count(p->identity_id))
        throw Error(ErrorCode::kInvalidArgument, "identity " + p->identity_id + " is in both training and validation");
  }
  const auto first = *train_set.front()->cohort;
  if (std::all_of(train_set.begin(), train_set.end(), [&](const auto* p) { return *p->cohort == first; }))
    throw Error(ErrorCode::kSingleClassSplit, "all training labels are " + std::string(to_string(first)));
  if (train_set.front()->cells != pipeline.cell_count())
    throw Error(ErrorCode::kShapeMismatch, "person grids do not match the pipeline GridSpec");

  pipeline.encoder.seed = cfg.seed;
  TrainResult result{ModelBundle(pipeline), {}, {}};
  ModelBundle& model = result.bundle;
  const std::size_t n_enc = model.encoder.parameters().size();
  const std::size_t n_head_w = static_cast<std::size_t>(model.head_weights.size());
  std::vector<double> params(n_enc + n_head_w + kNumCohorts);
  std::vector<double> grad(params.size());

  auto pack = [&] {
    std::copy(model.encoder.parameters().begin(), model.encoder.parameters().end(), params.begin());
    std::copy(model.head_weights.data(), model.head_weights.data() + n_head_w, params.begin() + n_enc);
    std::copy(model.head_bias.data(), model.head_bias.data() + kNumCohorts, params.begin() + n_enc + n_head_w);
  };
  auto unpack = [&] {
    std::copy(params.begin(), params.begin() + n_enc, model.encoder.parameters().begin());
    std::copy(params.begin() + n_enc, params.begin() + n_enc + n_head_w, model.head_weights.data());
    std::copy(params.begin() + n_enc + n_head_w, params.end(), model.head_bias.data());
  };
  pack();

  detail::Adam adam(params.size());
  Rng rng = Rng::derive(cfg.seed, 0x5EED);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<double> best_params = params;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0, since_best = 0, epochs_run = 0;
  const Eigen::Index d = model.encoder.embed_dim();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate * std::pow(cfg.lr_decay, epoch);
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const PersonCells*> ptrs;
      for (std::size_t i = start; i < end; ++i) ptrs.push_back(train_set[order[i]]);
      const auto bsz = static_cast<double>(ptrs.size());

      const FeatureBatch batch = make_batch(ptrs);
      ConvEncoder<double>::Cache cache;
      const CellMatrix emb = model.encoder.forward(batch.input, &cache);
      const CellMatrix feats = pool_features(batch, emb);
      CellMatrix logits = feats * model.head_weights;
      logits.rowwise() += model.head_bias;
      CellMatrix dlogits = detail::softmax_rows(logits);
      for (std::size_t i = 0; i < ptrs.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(class_index(*ptrs[i]->cohort));
        epoch_loss -= std::log(std::max(dlogits(static_cast<Eigen::Index>(i), k), 1e-300));
        dlogits(static_cast<Eigen::Index>(i), k) -= 1.0;
      }
      dlogits /= bsz;

      std::fill(grad.begin(), grad.end(), 0.0);
      Eigen::Map<HeadMatrix> g_head(grad.data() + n_enc, model.head_weights.rows(), kNumCohorts);
      g_head.noalias() = feats.transpose() * dlogits;
      Eigen::Map<ClassVector> g_bias(grad.data() + n_enc + n_head_w);
      g_bias = dlogits.colwise().sum();
      const CellMatrix d_feats = dlogits * model.head_weights.transpose();
      model.encoder.backward(cache, unpool_gradient(batch, d_feats, d), std::span<double>(grad.data(), n_enc));

      adam.update(params, grad, lr, cfg.l1_lambda, n_enc, n_enc + n_head_w);
      unpack();
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    const double val = detail::mean_cross_entropy(model, val_set);
    result.val_loss.push_back(val);
    epochs_run = epoch + 1;
    if (val < best_val) {
      best_val = val;
      best_params = params;
      best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  params = best_params;
  unpack();
  model.encoder.round_to_float32();
  for (Eigen::Index i = 0; i < model.head_weights.size(); ++i)
    model.head_weights.data()[i] = static_cast<double>(static_cast<float>(model.head_weights.data()[i]));
  for (Eigen::Index i = 0; i < model.head_bias.size(); ++i)
    model.head_bias[i] = static_cast<double>(static_cast<float>(model.head_bias[i]));
  model.meta = {cfg.seed, cfg.epochs, epochs_run, best_epoch, cfg.l1_lambda, best_val};
  return result;
}

inline TrainResult train(std::span<const PersonCells> train_set, std::span<const PersonCells> val_set,
                         const TrainConfig& cfg, PipelineConfig pipeline = {}) {
  const auto tr = detail::pointers(train_set);
  const auto va = detail::pointers(val_set);
  return train(tr, va, cfg, std::move(pipeline));
}

inline std::vector<Prediction> predict_batch(const ModelBundle& m, std::span<const PersonCells* const> people) {
  std::vector<Prediction> out;
  out.reserve(people.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < people.size(); start += kChunk) {
    const auto ptrs = people.subspan(start, std::min(kChunk, people.size() - start));
    CellMatrix logits = detail::person_features(m.encoder, ptrs) * m.head_weights;
    logits.rowwise() += m.head_bias;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const std::array<double, kNumCohorts> l = {logits(i, 0), logits(i, 1), logits(i, 2), logits(i, 3)};
      out.push_back(make_prediction(l));
    }
  }
  return out;
}

inline std::vector<Prediction> predict_batch(const ModelBundle& m, std::span<const PersonCells> people) {
  return predict_batch(m, detail::pointers(people));
}

inline Prediction predict(const ModelBundle& m, const PersonCells& person) {
  const PersonCells* one[] = {&person};
  return predict_batch(m, one).front();
}

// Full pipeline from a capture session. Propagates MISSING_ANGLE and
// NO_EYE_FOUND.
inline Prediction predict(const ModelBundle& m, const CaptureSession& session, const std::filesystem::path& base_dir) {
  return predict(m, prepare_person(session, base_dir, m.config));
}

struct GridAttribution {
  CohortLabel cohort = CohortLabel::kHealthy;
  double logit = 0.0;
  double bias = 0.0;
  int cells = 0;
  std::vector<double> scores;  // angle-major, 5 * cells

  double score(GazeAngle a, int cell) const { return scores[static_cast<std::size_t>(a) * cells + cell]; }
};

// Splits the predicted-class logit into per-(angle, cell) contributions.
inline GridAttribution grid_attribution(const ModelBundle& m, const PersonCells& person) {
  const PersonCells* one[] = {&person};
  const CellMatrix f = detail::person_features(m.encoder, one);
  CellMatrix logits = f * m.head_weights;
  logits.rowwise() += m.head_bias;
  const std::array<double, kNumCohorts> l = {logits(0, 0), logits(0, 1), logits(0, 2), logits(0, 3)};
  const Prediction pred = make_prediction(l);
  const auto k = static_cast<Eigen::Index>(class_index(pred.predicted_cohort));
  GridAttribution a;
  a.cohort = pred.predicted_cohort;
  a.logit = logits(0, k);
  a.bias = m.head_bias[k];
  a.cells = person.cells;
  const Eigen::Index d = m.encoder.embed_dim();
  const int blocks = static_cast<int>(kNumAngles) * person.cells;
  a.scores.resize(blocks);
  for (int blk = 0; blk < blocks; ++blk)
    a.scores[blk] = f.row(0).segment(blk * d, d).dot(m.head_weights.col(k).segment(blk * d, d));
  return a;
}

inline GridAttribution grid_attribution(const ModelBundle& m, const CaptureSession& session,
                                        const std::filesystem::path& base_dir) {
  return grid_attribution(m, prepare_person(session, base_dir, m.config));
}

// ---- configuration JSON ----

inline json to_json_value(const GridSpec& g) {
  if (g.mode == GridSpec::Mode::kRect) return {{"mode", "RECT"}, {"rows", g.rows}, {"cols", g.cols}};
  return {{"mode", "SECTOR"}, {"n_sectors", g.n_sectors}};
}

inline GridSpec grid_from_json(const json& j, GridSpec base = {}) {
  if (j.contains("mode")) {
    const auto mode = detail::upper(j.at("mode").get<std::string>());
    if (mode == "RECT") base.mode = GridSpec::Mode::kRect;
    else if (mode == "SECTOR") base.mode = GridSpec::Mode::kSector;
    else throw Error(ErrorCode::kParseError, "grid.mode must be RECT or SECTOR");
  }
  if (j.contains("rows")) base.rows = j.at("rows").get<int>();
  if (j.contains("cols")) base.cols = j.at("cols").get<int>();
  if (j.contains("n_sectors")) base.n_sectors = j.at("n_sectors").get<int>();
  base.check();
  return base;
}

inline json to_json_value(const PipelineConfig& c) {
  return {{"crop", {{"height", c.crop.height}, {"width", c.crop.width}}},
          {"grid", to_json_value(c.grid)},
          {"encoder",
           {{"embed_dim", c.encoder.embed_dim},
            {"conv_channels", c.encoder.conv_channels},
            {"kernel", c.encoder.kernel},
            {"cell_size", c.encoder.cell_size},
            {"seed", c.encoder.seed}}},
          {"detector",
           {{"min_contrast", c.detector.min_contrast},
            {"second_eye_ratio", c.detector.second_eye_ratio},
            {"stride", c.detector.stride}}}};
}

// Fields absent from j keep the values in base.
inline PipelineConfig pipeline_from_json(const json& j, PipelineConfig base = {}) {
  try {
    if (j.contains("crop")) {
      const auto& c = j.at("crop");
      if (c.contains("height")) base.crop.height = c.at("height").get<int>();
      if (c.contains("width")) base.crop.width = c.at("width").get<int>();
    }
    if (j.contains("grid")) base.grid = grid_from_json(j.at("grid"), base.grid);
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      if (e.contains("embed_dim")) base.encoder.embed_dim = e.at("embed_dim").get<int>();
      if (e.contains("conv_channels")) base.encoder.conv_channels = e.at("conv_channels").get<std::vector<int>>();
      if (e.contains("kernel")) base.encoder.kernel = e.at("kernel").get<int>();
      if (e.contains("cell_size")) base.encoder.cell_size = e.at("cell_size").get<int>();
      if (e.contains("seed")) base.encoder.seed = e.at("seed").get<std::uint64_t>();
    }
    if (j.contains("detector")) {
      const auto& d = j.at("detector");
      if (d.contains("min_contrast")) base.detector.min_contrast = d.at("min_contrast").get<double>();
      if (d.contains("second_eye_ratio")) base.detector.second_eye_ratio = d.at("second_eye_ratio").get<double>();
      if (d.contains("stride")) base.detector.stride = d.at("stride").get<int>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("pipeline config: ") + e.what());
  }
  if (base.crop.height < 2 || base.crop.width < 2) throw Error(ErrorCode::kInvalidArgument, "crop must be >= 2x2");
  base.encoder.check();
  return base;
}

inline json to_json_value(const TrainConfig& t) {
  return {{"epochs", t.epochs},       {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
          {"lr_decay", t.lr_decay},   {"l1_lambda", t.l1_lambda},   {"seed", t.seed},
          {"patience", t.patience}};
}

inline TrainConfig train_from_json(const json& j, TrainConfig base = {}) {
  try {
    if (j.contains("epochs")) base.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<int>();
    if (j.contains("learning_rate")) base.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("lr_decay")) base.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("l1_lambda")) base.l1_lambda = j.at("l1_lambda").get<double>();
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("patience")) base.patience = j.at("patience").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, std::string("train config: ") + e.what());
  }
  base.check();
  return base;
}

// ---- bundle persistence ----
//
// <dir>/config.json   pipeline snapshot, class order, training metadata
// <dir>/tensors.json  name, dtype, shape, byte offset of every tensor
// <dir>/tensors.bin   concatenated little-endian float32 data

namespace detail {

inline void put_f32_le(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline double get_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

template <typename Value>
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::span<Value> values;
};

template <typename Bundle>
auto bundle_tensors(Bundle& m) {
  using Value = std::conditional_t<std::is_const_v<Bundle>, const double, double>;
  std::vector<NamedTensor<Value>> out;
  auto params = m.encoder.parameters();
  for (const auto& t : m.encoder.tensors()) out.push_back({t.name, t.shape, params.subspan(t.offset, t.size())});
  out.push_back({"head.weight",
                 {static_cast<int>(m.head_weights.rows()), static_cast<int>(kNumCohorts)},
                 std::span<Value>(m.head_weights.data(), static_cast<std::size_t>(m.head_weights.size()))});
  out.push_back({"head.bias", {static_cast<int>(kNumCohorts)}, std::span<Value>(m.head_bias.data(), kNumCohorts)});
  return out;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + p.string());
  out << text;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParseError, p.string() + ": " + e.what());
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> tensor_bytes(const ModelBundle& m) {
  std::vector<std::uint8_t> out;
  for (const auto& t : detail::bundle_tensors(m))
    for (double v : t.values) detail::put_f32_le(out, v);
  return out;
}

// FNV-1a over the float32 tensor bytes.
inline std::string model_version(const ModelBundle& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : tensor_bytes(m)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return detail::hex64(h);
}

inline json bundle_config_json(const ModelBundle& m) {
  json classes = json::array();
  for (auto c : kClassOrder) classes.push_back(to_string(c));
  return {{"format", "oculoscreen-model"},
          {"format_version", 1},
          {"class_order", classes},
          {"pipeline", to_json_value(m.config)},
          {"training",
           {{"seed", m.meta.seed},
            {"epochs", m.meta.epochs},
            {"epochs_run", m.meta.epochs_run},
            {"best_epoch", m.meta.best_epoch},
            {"l1_lambda", m.meta.l1_lambda},
            {"best_val_loss", m.meta.best_val_loss}}}};
}

inline void save_bundle(const ModelBundle& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& t : detail::bundle_tensors(m)) {
    const std::size_t nbytes = t.values.size() * 4;
    tensors.push_back({{"name", t.name}, {"dtype", "float32"}, {"shape", t.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const json index = {{"byte_order", "little"}, {"tensors", tensors}, {"total_bytes", offset}};
  write_file_bytes(dir / "tensors.bin", tensor_bytes(m));
  detail::write_text(dir / "tensors.json", index.dump(2) + "\n");
  detail::write_text(dir / "config.json", bundle_config_json(m).dump(2) + "\n");
}

inline ModelBundle load_bundle(const std::filesystem::path& dir) {
  const json cfg = detail::read_json_file(dir / "config.json");
  const json index = detail::read_json_file(dir / "tensors.json");
  try {
    if (cfg.at("format").get<std::string>() != "oculoscreen-model")
      throw Error(ErrorCode::kParseError, "config.json is not a model bundle");
    const auto& classes = cfg.at("class_order");
    for (std::size_t k = 0; k < kNumCohorts; ++k)
      if (classes.at(k).get<std::string>() != to_string(kClassOrder[k]))
        throw Error(ErrorCode::kParseError, "unexpected class order in bundle");
    ModelBundle m(pipeline_from_json(cfg.at("pipeline")));
    const auto& tr = cfg.at("training");
    m.meta = {tr.at("seed").get<std::uint64_t>(), tr.at("epochs").get<int>(),    tr.at("epochs_run").get<int>(),
              tr.at("best_epoch").get<int>(),      tr.at("l1_lambda").get<double>(), tr.at("best_val_loss").get<double>()};
    if (index.at("byte_order").get<std::string>() != "little")
      throw Error(ErrorCode::kParseError, "only little-endian tensor files are supported");
    const auto bytes = read_file_bytes(dir / "tensors.bin");
    auto expected = detail::bundle_tensors(m);
    const auto& listed = index.at("tensors");
    if (listed.size() != expected.size()) throw Error(ErrorCode::kParseError, "tensor count mismatch");
    for (std::size_t t = 0; t < expected.size(); ++t) {
      const auto& e = listed.at(t);
      if (e.at("name").get<std::string>() != expected[t].name || e.at("dtype").get<std::string>() != "float32" ||
          e.at("shape").get<std::vector<int>>() != expected[t].shape)
        throw Error(ErrorCode::kParseError, "tensor " + expected[t].name + " does not match the configured shape");
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != expected[t].values.size() * 4 || offset + nbytes > bytes.size())
        throw Error(ErrorCode::kParseError, "tensor " + expected[t].name + " is truncated");
      for (std::size_t i = 0; i < expected[t].values.size(); ++i)
        expected[t].values[i] = detail::get_f32_le(bytes.data() + offset + 4 * i);
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, dir.string() + ": " + e.what());
  }
}

}  // namespace oculoscreen
