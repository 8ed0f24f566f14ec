#pragma once

// One tower of the two-tower encoder:
//
//   image -> mean-pool into a rows x cols patch grid per channel
//         -> per-patch scalar gate
//         -> dense + tanh, ..., dense (linear output)
//         -> L2 normalization
//
// All parameters live in one flat vector so that optimizers, checkpoints and
// finite-difference checks can treat a tower as a single array.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cvgl/core.hpp"
#include "cvgl/encoder/embedding.hpp"
#include "cvgl/geometry/image.hpp"

namespace cvgl {

enum class TowerId : std::uint32_t { ground = 0, overhead = 1 };

inline const char* tower_name(TowerId t) { return t == TowerId::ground ? "ground" : "overhead"; }

struct TowerSpec {
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  std::size_t channels = 3;
  // Output width of each dense layer; the last entry is the embedding size.
  std::vector<std::size_t> widths{256, 128};

  std::size_t patches() const { return grid_rows * grid_cols; }
  std::size_t input_dim() const { return patches() * channels; }
  std::size_t output_dim() const { return widths.back(); }

  friend bool operator==(const TowerSpec&, const TowerSpec&) = default;
};

// Mean of each patch-grid cell per channel, laid out as (patch, channel).
inline void pool_features(const ImageBuffer& img, std::size_t rows, std::size_t cols, std::span<double> out) {
  require(img.height() >= rows && img.width() >= cols && rows > 0 && cols > 0,
          "pool_features: image smaller than patch grid");
  const std::size_t ch = img.channels();
  require(out.size() == rows * cols * ch, "pool_features: output size mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t y0 = r * img.height() / rows, y1 = (r + 1) * img.height() / rows;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t x0 = c * img.width() / cols, x1 = (c + 1) * img.width() / cols;
      double* cell = &out[(r * cols + c) * ch];
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          for (std::size_t k = 0; k < ch; ++k) cell[k] += img.at(x, y, k);
      const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t k = 0; k < ch; ++k) cell[k] *= inv;
    }
  }
}

class EncoderModel {
 public:
  using RowMap = Eigen::Map<Matrix>;
  using ConstRowMap = Eigen::Map<const Matrix>;

  struct Cache {
    Matrix input;                     // pooled features, B x in
    std::vector<Matrix> activations;  // [0] gated input, [l+1] output of layer l
    Eigen::VectorXd norms;            // pre-normalization row norms
    Matrix embeddings;                // B x D, unit rows
  };

  EncoderModel() = default;

  EncoderModel(TowerId id, TowerSpec spec) : id_(id), spec_(std::move(spec)) {
    require(!spec_.widths.empty(), "EncoderModel: need at least one layer");
    require(spec_.channels == 1 || spec_.channels == 3, "EncoderModel: channels must be 1 or 3");
    require(spec_.patches() > 0, "EncoderModel: empty patch grid");
    std::size_t offset = spec_.patches();
    std::size_t in = spec_.input_dim();
    for (std::size_t w : spec_.widths) {
      require(w > 0, "EncoderModel: zero layer width");
      weight_offsets_.push_back(offset);
      offset += w * in;
      bias_offsets_.push_back(offset);
      offset += w;
      in = w;
    }
    params_.assign(offset, 0.0);
  }

  // Gates at 1, weights ~ N(0, 1/fan_in), zero biases except the first layer,
  // whose bias cancels a mid-gray (0.5) input.
  static EncoderModel initialized(TowerId id, TowerSpec spec, std::uint64_t seed) {
    EncoderModel m(id, std::move(spec));
    Rng rng(seed);
    auto gates = m.gates();
    std::fill(gates.begin(), gates.end(), 1.0);
    for (std::size_t l = 0; l < m.layers(); ++l) {
      auto w = m.weight(l);
      const double scale = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal(0.0, scale);
    }
    m.bias(0) = -0.5 * m.weight(0).rowwise().sum();
    m.round_to_float();
    return m;
  }

  // Data-dependent first layer: columns rescaled by 1 / std of each input
  // feature and the bias set so that the mean input maps to zero. Features
  // with std below floor are treated as having std floor.
  void standardize_inputs(const Matrix& x, double floor = 1e-2) {
    require(static_cast<std::size_t>(x.cols()) == spec_.input_dim() && x.rows() > 0,
            "standardize_inputs: feature matrix shape mismatch");
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Eigen::RowVectorXd sd =
        ((x.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt();
    auto w = weight(0);
    for (Eigen::Index j = 0; j < w.cols(); ++j) w.col(j) /= std::max(sd(j), floor);
    bias(0) = -(w * mean.transpose());
    round_to_float();
  }

  TowerId id() const { return id_; }
  const TowerSpec& spec() const { return spec_; }
  std::size_t layers() const { return spec_.widths.size(); }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<double> gates() { return {params_.data(), spec_.patches()}; }
  std::span<const double> gates() const { return {params_.data(), spec_.patches()}; }

  RowMap weight(std::size_t l) { return {params_.data() + weight_offsets_[l], rows_of(l), cols_of(l)}; }
  ConstRowMap weight(std::size_t l) const {
    return {params_.data() + weight_offsets_[l], rows_of(l), cols_of(l)};
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) { return {params_.data() + bias_offsets_[l], rows_of(l)}; }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {params_.data() + bias_offsets_[l], rows_of(l)};
  }

  // True for entries of dense weight matrices (the ones subject to decay).
  std::vector<bool> weight_mask() const {
    std::vector<bool> mask(params_.size(), false);
    for (std::size_t l = 0; l < layers(); ++l)
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(weight_offsets_[l]),
                mask.begin() + static_cast<std::ptrdiff_t>(bias_offsets_[l]), true);
    return mask;
  }

  // Human-readable name of one flat parameter index.
  std::string parameter_name(std::size_t index) const {
    const std::string tower = tower_name(id_);
    if (index < spec_.patches()) return tower + ".gate[" + std::to_string(index) + "]";
    for (std::size_t l = 0; l < layers(); ++l) {
      if (index < bias_offsets_[l])
        return tower + ".layer" + std::to_string(l) + ".weight[" + std::to_string(index - weight_offsets_[l]) + "]";
      if (index < bias_offsets_[l] + spec_.widths[l])
        return tower + ".layer" + std::to_string(l) + ".bias[" + std::to_string(index - bias_offsets_[l]) + "]";
    }
    return tower + ".param[" + std::to_string(index) + "]";
  }

  // Holds parameters on the f32 grid used by checkpoints.
  void round_to_float() {
    for (double& v : params_) v = static_cast<double>(static_cast<float>(v));
  }

  Matrix pool(std::span<const ImageBuffer* const> images) const {
    Matrix x(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(spec_.input_dim()));
    parallel_for(0, images.size(), [&](std::size_t i) {
      require(images[i]->channels() == spec_.channels, "EncoderModel: image channel count mismatch");
      pool_features(*images[i], spec_.grid_rows, spec_.grid_cols,
                    {x.data() + i * spec_.input_dim(), spec_.input_dim()});
    });
    return x;
  }

  Matrix pool(const ImageBuffer& img) const {
    const ImageBuffer* p = &img;
    return pool(std::span<const ImageBuffer* const>(&p, 1));
  }

  Cache forward(const Matrix& x) const {
    require(static_cast<std::size_t>(x.cols()) == spec_.input_dim(), "EncoderModel: feature width mismatch");
    Cache cache;
    cache.input = x;
    Matrix h = x;
    const std::size_t ch = spec_.channels;
    for (std::size_t p = 0; p < spec_.patches(); ++p)
      h.middleCols(static_cast<Eigen::Index>(p * ch), static_cast<Eigen::Index>(ch)) *= params_[p];
    cache.activations.push_back(h);
    for (std::size_t l = 0; l < layers(); ++l) {
      Matrix a = h * weight(l).transpose();
      a.rowwise() += bias(l).transpose();
      if (l + 1 < layers()) a = a.array().tanh();
      cache.activations.push_back(a);
      h = std::move(a);
    }
    cache.norms = h.rowwise().norm();
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      if (!(cache.norms(i) > 0) || !std::isfinite(cache.norms(i)))
        throw NumericError(std::string("embed: zero or non-finite embedding in ") + tower_name(id_) + " tower");
      h.row(i) /= cache.norms(i);
    }
    cache.embeddings = std::move(h);
    return cache;
  }

  // Accumulates d(loss)/d(params) into grad given d(loss)/d(embeddings).
  void backward(const Cache& cache, const Matrix& d_embed, std::span<double> grad) const {
    require(grad.size() == params_.size(), "EncoderModel::backward: gradient size mismatch");
    const Matrix& e = cache.embeddings;
    Matrix d = d_embed;
    const Eigen::VectorXd radial = (e.array() * d_embed.array()).rowwise().sum();
    for (Eigen::Index i = 0; i < d.rows(); ++i) d.row(i) = (d.row(i) - radial(i) * e.row(i)) / cache.norms(i);
    for (std::size_t l = layers(); l-- > 0;) {
      if (l + 1 < layers()) {
        const Matrix& out = cache.activations[l + 1];
        d = (d.array() * (1.0 - out.array().square())).matrix();
      }
      const Matrix& in = cache.activations[l];
      Eigen::Map<Matrix> gw(grad.data() + weight_offsets_[l], rows_of(l), cols_of(l));
      gw.noalias() += d.transpose() * in;
      Eigen::Map<Eigen::VectorXd> gb(grad.data() + bias_offsets_[l], rows_of(l));
      gb += d.colwise().sum().transpose();
      d = d * weight(l);
    }
    const std::size_t ch = spec_.channels;
    for (std::size_t p = 0; p < spec_.patches(); ++p) {
      const auto cols = static_cast<Eigen::Index>(p * ch);
      grad[p] += (d.middleCols(cols, static_cast<Eigen::Index>(ch)).array() *
                  cache.input.middleCols(cols, static_cast<Eigen::Index>(ch)).array())
                     .sum();
    }
  }

  Matrix embed_features(const Matrix& x) const { return forward(x).embeddings; }

 private:
  Eigen::Index rows_of(std::size_t l) const { return static_cast<Eigen::Index>(spec_.widths[l]); }
  Eigen::Index cols_of(std::size_t l) const {
    return static_cast<Eigen::Index>(l == 0 ? spec_.input_dim() : spec_.widths[l - 1]);
  }

  TowerId id_ = TowerId::ground;
  TowerSpec spec_;
  std::vector<double> params_;
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
};

// Unit embedding of one image.
inline Eigen::VectorXd embed(const ImageBuffer& img, const EncoderModel& model) {
  return model.embed_features(model.pool(img)).row(0).transpose();
}

// Embeds a list of images in fixed-size chunks; ids default to row indices.
inline EmbeddingMatrix embed_all(std::span<const ImageBuffer* const> images, const EncoderModel& model,
                                 std::vector<std::uint64_t> ids = {}) {
  if (ids.empty())
    for (std::size_t i = 0; i < images.size(); ++i) ids.push_back(i);
  Matrix out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(model.spec().output_dim()));
  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (images.size() + kChunk - 1) / kChunk;
  parallel_for(0, chunks, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(images.size(), begin + kChunk);
    Matrix x(static_cast<Eigen::Index>(end - begin), static_cast<Eigen::Index>(model.spec().input_dim()));
    for (std::size_t i = begin; i < end; ++i) {
      require(images[i]->channels() == model.spec().channels, "embed_all: image channel count mismatch");
      pool_features(*images[i], model.spec().grid_rows, model.spec().grid_cols,
                    {x.data() + (i - begin) * model.spec().input_dim(), model.spec().input_dim()});
    }
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        model.embed_features(x);
  });
  return EmbeddingMatrix(std::move(out), std::move(ids));
}

}  // namespace cvgl
