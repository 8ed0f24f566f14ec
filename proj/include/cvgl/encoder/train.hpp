#pragma once

// Two-tower model state, the composite contrastive objective with its exact
// gradient, AdamW, and the CVMD checkpoint container.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/encoder/loss.hpp"
#include "cvgl/encoder/model.hpp"
#include "cvgl/io.hpp"

namespace cvgl {

struct TwoTower {
  EncoderModel ground;
  EncoderModel overhead;
  LossConfig loss;

  const EncoderModel& tower(TowerId t) const { return t == TowerId::ground ? ground : overhead; }
  EncoderModel& tower(TowerId t) { return t == TowerId::ground ? ground : overhead; }

  static TwoTower initialized(const TowerSpec& ground_spec, const TowerSpec& overhead_spec,
                              const LossConfig& loss, std::uint64_t seed) {
    require(ground_spec.output_dim() == overhead_spec.output_dim(),
            "TwoTower: towers must share the embedding dimension");
    return {EncoderModel::initialized(TowerId::ground, ground_spec, derive_seed(seed, 1)),
            EncoderModel::initialized(TowerId::overhead, overhead_spec, derive_seed(seed, 2)), loss};
  }
};

inline bool same_parameters(const TwoTower& a, const TwoTower& b) {
  const auto eq = [](std::span<const double> x, std::span<const double> y) {
    return std::equal(x.begin(), x.end(), y.begin(), y.end());
  };
  return eq(a.ground.params(), b.ground.params()) && eq(a.overhead.params(), b.overhead.params()) &&
         a.loss.log_inv_temperature == b.loss.log_inv_temperature;
}

struct Gradients {
  std::vector<double> ground;
  std::vector<double> overhead;
  double log_inv_temperature = 0.0;

  static Gradients zeros_like(const TwoTower& m) {
    return {std::vector<double>(m.ground.parameter_count(), 0.0),
            std::vector<double>(m.overhead.parameter_count(), 0.0), 0.0};
  }

  std::vector<double>& tower(TowerId t) { return t == TowerId::ground ? ground : overhead; }

  double norm() const {
    double s = log_inv_temperature * log_inv_temperature;
    for (double v : ground) s += v * v;
    for (double v : overhead) s += v * v;
    return std::sqrt(s);
  }
};

// One contrastive term of the objective: queries embedded by query_tower,
// references by ref_tower, positives given by pairs. Both sides may be the
// same tower (intra-view) or different towers (cross-view).
struct LossTerm {
  TowerId query_tower = TowerId::ground;
  Matrix query_features;
  TowerId ref_tower = TowerId::overhead;
  Matrix ref_features;
  std::vector<Pair> pairs;
  double weight = 1.0;
};

struct ObjectiveValue {
  double loss = 0.0;
  std::vector<double> term_losses;
  Gradients grad;
};

inline void check_finite(const TwoTower& m, const Gradients& g) {
  if (!std::isfinite(g.log_inv_temperature)) throw NumericError("non-finite gradient in log_inv_temperature");
  for (TowerId t : {TowerId::ground, TowerId::overhead}) {
    const auto& v = t == TowerId::ground ? g.ground : g.overhead;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i])) throw NumericError("non-finite gradient in " + m.tower(t).parameter_name(i));
  }
}

// Weighted sum of the terms and its exact gradient with respect to both
// towers and the log inverse temperature.
inline ObjectiveValue loss_gradient(const TwoTower& models, std::span<const LossTerm> terms, bool want_grad = true) {
  ObjectiveValue out;
  out.grad = Gradients::zeros_like(models);
  for (const LossTerm& term : terms) {
    require(term.query_features.rows() >= 2 && term.ref_features.rows() >= 2,
            "loss_gradient: batch size must be at least 2");
    const EncoderModel& qt = models.tower(term.query_tower);
    const EncoderModel& rt = models.tower(term.ref_tower);
    const auto q_cache = qt.forward(term.query_features);
    const auto r_cache = rt.forward(term.ref_features);
    const LossValue lv = paired_infonce(q_cache.embeddings, r_cache.embeddings, term.pairs, models.loss, want_grad);
    out.term_losses.push_back(lv.loss);
    out.loss += term.weight * lv.loss;
    if (!want_grad) continue;
    qt.backward(q_cache, term.weight * lv.d_queries, out.grad.tower(term.query_tower));
    rt.backward(r_cache, term.weight * lv.d_refs, out.grad.tower(term.ref_tower));
    out.grad.log_inv_temperature += term.weight * lv.d_log_inv_temperature;
  }
  if (want_grad) check_finite(models, out.grad);
  return out;
}

// ---------------------------------------------------------------------------
// AdamW: moments on the raw gradient, weight decay applied directly to the
// weights (lr * weight_decay * w), not folded into the gradient.

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

inline void adamw_update(std::span<double> params, std::span<const double> grad, AdamMoments& mom,
                         std::size_t step, double lr, double weight_decay, const std::vector<bool>& decay_mask,
                         const AdamWConfig& cfg = {}) {
  require(grad.size() == params.size(), "adamw_update: gradient size mismatch");
  if (mom.m.empty()) {
    mom.m.assign(params.size(), 0.0);
    mom.v.assign(params.size(), 0.0);
  }
  require(mom.m.size() == params.size() && mom.v.size() == params.size(), "adamw_update: state shape mismatch");
  require(decay_mask.empty() || decay_mask.size() == params.size(), "adamw_update: decay mask size mismatch");
  require(step >= 1, "adamw_update: step counts from 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    mom.m[i] = cfg.beta1 * mom.m[i] + (1 - cfg.beta1) * grad[i];
    mom.v[i] = cfg.beta2 * mom.v[i] + (1 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = mom.m[i] / bc1;
    const double v_hat = mom.v[i] / bc2;
    double w = params[i];
    if (decay_mask.empty() || decay_mask[i]) w -= lr * weight_decay * w;
    w -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    if (!std::isfinite(w)) throw NumericError("adamw_update: non-finite parameter after update");
    params[i] = w;
  }
}

struct OptimizerState {
  AdamMoments ground;
  AdamMoments overhead;
  AdamMoments temperature;
  std::size_t step = 0;
  AdamWConfig cfg;
};

// Decay touches dense weight matrices only; gates, biases and the
// temperature are not decayed. Parameters are held on the f32 grid.
inline void optimizer_step(TwoTower& models, const Gradients& grad, OptimizerState& state, double lr,
                           double weight_decay) {
  ++state.step;
  adamw_update(models.ground.params(), grad.ground, state.ground, state.step, lr, weight_decay,
               models.ground.weight_mask(), state.cfg);
  adamw_update(models.overhead.params(), grad.overhead, state.overhead, state.step, lr, weight_decay,
               models.overhead.weight_mask(), state.cfg);
  double theta = models.loss.log_inv_temperature;
  const double g = grad.log_inv_temperature;
  adamw_update(std::span<double>(&theta, 1), std::span<const double>(&g, 1), state.temperature, state.step, lr,
               0.0, {}, state.cfg);
  models.ground.round_to_float();
  models.overhead.round_to_float();
  models.loss.log_inv_temperature = static_cast<double>(static_cast<float>(theta));
}

// ---------------------------------------------------------------------------
// CVMD checkpoint: "CVMD", u32 version=1, u32 tower count, then per tower
//   u32 tower id, u32 grid rows, u32 grid cols, u32 channels, u32 layer count,
//   layer count x (u32 out, u32 in), f32 parameters (gates, then W row-major
//   and b for every layer),
// then f32 log_inv_temperature, f32 label_smoothing, u32 symmetric.

inline constexpr std::uint32_t kCvmdVersion = 1;

inline std::vector<char> encode_cvmd(const TwoTower& m) {
  io::ByteWriter w;
  w.magic("CVMD");
  w.put<std::uint32_t>(kCvmdVersion);
  w.put<std::uint32_t>(2);
  for (const EncoderModel* t : {&m.ground, &m.overhead}) {
    const TowerSpec& s = t->spec();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t->id()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.grid_rows));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.grid_cols));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.channels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.widths.size()));
    std::size_t in = s.input_dim();
    for (std::size_t width : s.widths) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(width));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(in));
      in = width;
    }
    for (double v : t->params()) w.put<float>(static_cast<float>(v));
  }
  w.put<float>(static_cast<float>(m.loss.log_inv_temperature));
  w.put<float>(static_cast<float>(m.loss.label_smoothing));
  w.put<std::uint32_t>(m.loss.symmetric ? 1 : 0);
  return w.bytes();
}

inline TwoTower decode_cvmd(io::ByteReader& r) {
  r.expect_magic("CVMD");
  if (r.get<std::uint32_t>() != kCvmdVersion) throw ContractError(r.name() + ": unsupported CVMD version");
  if (r.get<std::uint32_t>() != 2) throw ContractError(r.name() + ": expected two towers");
  TwoTower m;
  for (int k = 0; k < 2; ++k) {
    const auto id = r.get<std::uint32_t>();
    if (id != static_cast<std::uint32_t>(k)) throw ContractError(r.name() + ": unexpected tower order");
    TowerSpec s;
    s.grid_rows = r.get<std::uint32_t>();
    s.grid_cols = r.get<std::uint32_t>();
    s.channels = r.get<std::uint32_t>();
    const auto layers = r.get<std::uint32_t>();
    if (layers == 0 || layers > 64) throw ContractError(r.name() + ": bad layer count");
    s.widths.clear();
    std::size_t in = s.grid_rows * s.grid_cols * s.channels;
    for (std::uint32_t l = 0; l < layers; ++l) {
      const auto out = r.get<std::uint32_t>();
      const auto layer_in = r.get<std::uint32_t>();
      if (layer_in != in) throw ContractError(r.name() + ": inconsistent layer shapes");
      s.widths.push_back(out);
      in = out;
    }
    EncoderModel t(static_cast<TowerId>(id), s);
    for (double& v : t.params()) v = r.get<float>();
    (k == 0 ? m.ground : m.overhead) = std::move(t);
  }
  m.loss.log_inv_temperature = r.get<float>();
  m.loss.label_smoothing = r.get<float>();
  m.loss.symmetric = r.get<std::uint32_t>() != 0;
  if (!r.at_end()) throw ContractError(r.name() + ": trailing bytes after CVMD payload");
  if (m.ground.spec().output_dim() != m.overhead.spec().output_dim())
    throw ContractError(r.name() + ": towers disagree on embedding dimension");
  return m;
}

inline void write_cvmd(const std::filesystem::path& path, const TwoTower& m) { io::write_bytes(path, encode_cvmd(m)); }

inline TwoTower read_cvmd(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  return decode_cvmd(r);
}

}  // namespace cvgl
