#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oculoscreen/error.hpp"
#include "oculoscreen/image.hpp"
#include "oculoscreen/random.hpp"

namespace oculoscreen {

struct EncoderConfig {
  int embed_dim = 16;
  std::vector<int> conv_channels = {8, 16};
  int kernel = 3;
  int cell_size = 16;
  std::uint64_t seed = 0;

  bool operator==(const EncoderConfig&) const = default;

  void check() const {
    if (embed_dim < 1) throw Error(ErrorCode::kInvalidArgument, "embed_dim must be >= 1");
    if (conv_channels.empty()) throw Error(ErrorCode::kInvalidArgument, "need at least one conv layer");
    for (int c : conv_channels)
      if (c < 1) throw Error(ErrorCode::kInvalidArgument, "conv channel counts must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw Error(ErrorCode::kInvalidArgument, "kernel must be odd");
    if (cell_size < 2) throw Error(ErrorCode::kInvalidArgument, "cell_size must be >= 2");
  }
};

// Shared per-cell encoder: conv(stride 2) -> ReLU -> [conv -> ReLU]* ->
// global average pool -> linear. Convolutions run as im2col + GEMM over a
// whole batch of cells. All parameters live in one flat buffer so the
// optimiser and the gradient check can treat them as a single vector.
template <typename Scalar = double>
class ConvEncoder {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size() const {
      std::size_t n = 1;
      for (int s : shape) n *= static_cast<std::size_t>(s);
      return n;
    }
  };

  struct LayerShape {
    int in_h, in_w, in_c;
    int out_h, out_w, out_c;
    int stride, pad;
  };

  struct Cache {
    std::vector<Matrix> cols;
    std::vector<Matrix> pre;
    Matrix pooled;
  };

  explicit ConvEncoder(EncoderConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.check();
    int h = cfg_.cell_size, w = cfg_.cell_size, c = 3;
    const int k = cfg_.kernel;
    for (std::size_t l = 0; l < cfg_.conv_channels.size(); ++l) {
      const int stride = l == 0 ? 2 : 1;
      const int pad = k / 2;
      const int oh = (h + 2 * pad - k) / stride + 1;
      const int ow = (w + 2 * pad - k) / stride + 1;
      const int oc = cfg_.conv_channels[l];
      layers_.push_back({h, w, c, oh, ow, oc, stride, pad});
      add_tensor("encoder.conv" + std::to_string(l) + ".weight", {k * k * c, oc});
      add_tensor("encoder.conv" + std::to_string(l) + ".bias", {oc});
      h = oh, w = ow, c = oc;
    }
    add_tensor("encoder.linear.weight", {c, cfg_.embed_dim});
    add_tensor("encoder.linear.bias", {cfg_.embed_dim});
    params_.assign(total_, Scalar(0));
    initialize();
  }

  const EncoderConfig& config() const { return cfg_; }
  int input_size() const { return cfg_.cell_size * cfg_.cell_size * 3; }
  int embed_dim() const { return cfg_.embed_dim; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::vector<LayerShape>& layers() const { return layers_; }

  std::span<Scalar> parameters() { return params_; }
  std::span<const Scalar> parameters() const { return params_; }

  // input: N x (cell_size * cell_size * 3), one HWC cell per row.
  Matrix forward(const Matrix& input, Cache* cache = nullptr) const {
    if (input.cols() != input_size())
      throw Error(ErrorCode::kShapeMismatch, "encoder expects " + std::to_string(input_size()) +
                                                 " values per cell, got " + std::to_string(input.cols()));
    const Eigen::Index n = input.rows();
    if (cache) {
      cache->cols.resize(layers_.size());
      cache->pre.resize(layers_.size());
    }
    Matrix act = ConstMatrixMap(input.data(), n * cfg_.cell_size * cfg_.cell_size, 3);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      Matrix cols = im2col(act, n, L);
      Matrix z = cols * weight(2 * l);
      z.rowwise() += bias(2 * l);
      act = z.cwiseMax(Scalar(0));
      if (cache) {
        cache->cols[l] = std::move(cols);
        cache->pre[l] = std::move(z);
      }
    }
    const auto& last = layers_.back();
    const int positions = last.out_h * last.out_w;
    Matrix pooled(n, last.out_c);
    for (Eigen::Index i = 0; i < n; ++i)
      pooled.row(i) = act.middleRows(i * positions, positions).colwise().sum() / Scalar(positions);
    Matrix out = pooled * weight(2 * layers_.size());
    out.rowwise() += bias(2 * layers_.size());
    if (cache) cache->pooled = std::move(pooled);
    return out;
  }

  // Accumulates dLoss/dParams into grad given dLoss/dOutput.
  void backward(const Cache& cache, const Matrix& grad_out, std::span<Scalar> grad) const {
    const Eigen::Index n = grad_out.rows();
    const std::size_t nl = layers_.size();
    grad_weight(grad, 2 * nl).noalias() += cache.pooled.transpose() * grad_out;
    grad_bias(grad, 2 * nl) += grad_out.colwise().sum();
    const Matrix d_pooled = grad_out * weight(2 * nl).transpose();

    const auto& last = layers_.back();
    const int positions = last.out_h * last.out_w;
    Matrix d_act(n * positions, last.out_c);
    for (Eigen::Index i = 0; i < n; ++i)
      d_act.middleRows(i * positions, positions).rowwise() = d_pooled.row(i) / Scalar(positions);

    for (std::size_t l = nl; l-- > 0;) {
      const auto& L = layers_[l];
      Matrix dz = d_act.cwiseProduct((cache.pre[l].array() > Scalar(0)).matrix().template cast<Scalar>());
      grad_weight(grad, 2 * l).noalias() += cache.cols[l].transpose() * dz;
      grad_bias(grad, 2 * l) += dz.colwise().sum();
      if (l == 0) break;
      const Matrix d_cols = dz * weight(2 * l).transpose();
      d_act = col2im(d_cols, n, L);
    }
  }

  // Single-cell convenience path.
  std::vector<Scalar> encode(const ImageF& cell) const {
    if (cell.width != cfg_.cell_size || cell.height != cfg_.cell_size)
      throw Error(ErrorCode::kShapeMismatch, "cell must be " + std::to_string(cfg_.cell_size) + "x" +
                                                 std::to_string(cfg_.cell_size));
    Matrix in(1, input_size());
    for (int i = 0; i < input_size(); ++i) in(0, i) = static_cast<Scalar>(cell.data[i]);
    const Matrix out = forward(in);
    return std::vector<Scalar>(out.data(), out.data() + out.size());
  }

  // Rounds every parameter to the nearest float32 value.
  void round_to_float32() {
    for (auto& p : params_) p = static_cast<Scalar>(static_cast<float>(p));
  }

 private:
  void add_tensor(std::string name, std::vector<int> shape) {
    Tensor t{std::move(name), std::move(shape), total_};
    total_ += t.size();
    tensors_.push_back(std::move(t));
  }

  void initialize() {
    Rng rng = Rng::derive(cfg_.seed, 0xE1C0DE);
    for (std::size_t t = 0; t < tensors_.size(); t += 2) {
      auto w = weight(t);
      const bool is_linear = t + 2 == tensors_.size();
      const double fan_in = static_cast<double>(tensors_[t].shape[0]);
      const double stddev = std::sqrt((is_linear ? 1.0 : 2.0) / fan_in);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
    }
  }

  MatrixMap weight(std::size_t t) {
    const auto& T = tensors_[t];
    return MatrixMap(params_.data() + T.offset, T.shape[0], T.shape[1]);
  }
  ConstMatrixMap weight(std::size_t t) const {
    const auto& T = tensors_[t];
    return ConstMatrixMap(params_.data() + T.offset, T.shape[0], T.shape[1]);
  }
  Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bias(std::size_t t) const {
    const auto& T = tensors_[t + 1];
    return {params_.data() + T.offset, T.shape[0]};
  }
  MatrixMap grad_weight(std::span<Scalar> g, std::size_t t) const {
    const auto& T = tensors_[t];
    return MatrixMap(g.data() + T.offset, T.shape[0], T.shape[1]);
  }
  Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> grad_bias(std::span<Scalar> g, std::size_t t) const {
    const auto& T = tensors_[t + 1];
    return {g.data() + T.offset, T.shape[0]};
  }

  Matrix im2col(const Matrix& act, Eigen::Index n, const LayerShape& L) const {
    const int k = cfg_.kernel;
    Matrix cols = Matrix::Zero(n * L.out_h * L.out_w, k * k * L.in_c);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar* src = act.data() + i * L.in_h * L.in_w * L.in_c;
      for (int oy = 0; oy < L.out_h; ++oy) {
        for (int ox = 0; ox < L.out_w; ++ox) {
          Scalar* row = cols.data() + ((i * L.out_h + oy) * L.out_w + ox) * cols.cols();
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * L.stride - L.pad + ky;
            if (iy < 0 || iy >= L.in_h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * L.stride - L.pad + kx;
              if (ix < 0 || ix >= L.in_w) continue;
              const Scalar* px = src + (iy * L.in_w + ix) * L.in_c;
              Scalar* dst = row + (ky * k + kx) * L.in_c;
              for (int c = 0; c < L.in_c; ++c) dst[c] = px[c];
            }
          }
        }
      }
    }
    return cols;
  }

  Matrix col2im(const Matrix& cols, Eigen::Index n, const LayerShape& L) const {
    const int k = cfg_.kernel;
    Matrix act = Matrix::Zero(n * L.in_h * L.in_w, L.in_c);
    for (Eigen::Index i = 0; i < n; ++i) {
      Scalar* dst_base = act.data() + i * L.in_h * L.in_w * L.in_c;
      for (int oy = 0; oy < L.out_h; ++oy) {
        for (int ox = 0; ox < L.out_w; ++ox) {
          const Scalar* row = cols.data() + ((i * L.out_h + oy) * L.out_w + ox) * cols.cols();
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * L.stride - L.pad + ky;
            if (iy < 0 || iy >= L.in_h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * L.stride - L.pad + kx;
              if (ix < 0 || ix >= L.in_w) continue;
              Scalar* px = dst_base + (iy * L.in_w + ix) * L.in_c;
              const Scalar* src = row + (ky * k + kx) * L.in_c;
              for (int c = 0; c < L.in_c; ++c) px[c] += src[c];
            }
          }
        }
      }
    }
    return act;
  }

  EncoderConfig cfg_;
  std::vector<LayerShape> layers_;
  std::vector<Tensor> tensors_;
  std::size_t total_ = 0;
  std::vector<Scalar> params_;
};

}  // namespace oculoscreen
