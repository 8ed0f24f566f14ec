#pragma once

// InfoNCE with label smoothing and a learnable temperature.
//
// For a query q against references r_0..r_{n-1} with positive r_+:
//   logits  l_k = (q . r_k) / tau,          tau = exp(-log_inv_temperature)
//   target  t_+ = 1 - eps, t_k = eps / (n - 1) otherwise
//   loss    = -sum_k t_k log softmax(l)_k
// eps = 0 gives the plain InfoNCE -log(exp(l_+) / sum_k exp(l_k)).

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "cvgl/core.hpp"
#include "cvgl/encoder/embedding.hpp"

namespace cvgl {

struct LossConfig {
  // 1/tau = exp(log_inv_temperature); 14.285 is the usual contrastive init.
  double log_inv_temperature = std::log(14.285);
  double label_smoothing = 0.1;
  bool symmetric = true;

  double inv_temperature() const { return std::exp(log_inv_temperature); }
  double temperature() const { return std::exp(-log_inv_temperature); }

  void validate() const {
    if (!(label_smoothing >= 0.0 && label_smoothing < 0.5))
      throw ConfigError("label_smoothing must lie in [0, 0.5)");
    if (!std::isfinite(log_inv_temperature)) throw ConfigError("log_inv_temperature must be finite");
  }
};

// One positive correspondence: row g of the query-side matrix and row s of
// the reference-side matrix.
struct Pair {
  std::size_t g = 0;
  std::size_t s = 0;
  friend bool operator==(const Pair&, const Pair&) = default;
};

namespace detail {

// Loss of one softmax row and, optionally, d(loss)/d(logits) scaled by weight.
inline double smoothed_cross_entropy(std::span<const double> logits, std::size_t pos, double eps,
                                     double weight, std::span<double> d_logits) {
  const std::size_t n = logits.size();
  double max = logits[0];
  for (double l : logits) max = std::max(max, l);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - max);
  const double lse = max + std::log(sum);
  const double off = n > 1 ? eps / static_cast<double>(n - 1) : 0.0;
  double loss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = k == pos ? 1.0 - eps : off;
    loss += t * (lse - logits[k]);
    if (!d_logits.empty()) d_logits[k] += weight * (std::exp(logits[k] - lse) - t);
  }
  return loss;
}

}  // namespace detail

inline double infonce(std::span<const double> q, const EmbeddingMatrix& refs, std::size_t pos_index,
                      const LossConfig& cfg) {
  require(refs.n() >= 2, "infonce: need at least two references");
  require(pos_index < refs.n(), "infonce: positive index out of range");
  require(q.size() == refs.d(), "infonce: dimension mismatch");
  cfg.validate();
  const double scale = cfg.inv_temperature();
  std::vector<double> logits(refs.n());
  for (std::size_t k = 0; k < refs.n(); ++k) {
    double dot = 0;
    for (std::size_t j = 0; j < q.size(); ++j) dot += q[j] * refs.row(k)[j];
    logits[k] = scale * dot;
  }
  return detail::smoothed_cross_entropy(logits, pos_index, cfg.label_smoothing, 0.0, {});
}

struct LossValue {
  double loss = 0.0;
  Matrix d_queries;  // d(loss)/d(G)
  Matrix d_refs;     // d(loss)/d(S)
  double d_log_inv_temperature = 0.0;
};

// Contrastive loss over matrices G (n_g x D) and S (n_s x D) with explicit
// positive pairs. Rows not named in any pair only act as negatives. In the
// symmetric form the loss is half the mean over pairs of the G->S row loss
// plus half the mean of the S->G column loss.
inline LossValue paired_infonce(const Matrix& g, const Matrix& s, std::span<const Pair> pairs,
                                const LossConfig& cfg, bool want_grad = true) {
  require(g.cols() == s.cols(), "paired_infonce: dimension mismatch");
  require(!pairs.empty(), "paired_infonce: no positive pairs");
  require(g.rows() >= 2 && s.rows() >= 2, "paired_infonce: need at least two rows per side");
  cfg.validate();
  const double scale = cfg.inv_temperature();
  const Matrix logits = scale * (g * s.transpose());
  Matrix d_logits = Matrix::Zero(logits.rows(), logits.cols());
  const auto np = static_cast<double>(pairs.size());
  const double row_weight = cfg.symmetric ? 0.5 / np : 1.0 / np;
  LossValue out;
  std::vector<double> row(static_cast<std::size_t>(logits.cols()));
  std::vector<double> d_row(row.size());
  for (const Pair& p : pairs) {
    require(p.g < static_cast<std::size_t>(g.rows()) && p.s < static_cast<std::size_t>(s.rows()),
            "paired_infonce: pair index out of range");
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = logits(static_cast<Eigen::Index>(p.g), static_cast<Eigen::Index>(k));
    std::fill(d_row.begin(), d_row.end(), 0.0);
    out.loss += row_weight * detail::smoothed_cross_entropy(row, p.s, cfg.label_smoothing, row_weight,
                                                            want_grad ? std::span<double>(d_row) : std::span<double>());
    if (want_grad)
      for (std::size_t k = 0; k < row.size(); ++k)
        d_logits(static_cast<Eigen::Index>(p.g), static_cast<Eigen::Index>(k)) += d_row[k];
  }
  if (cfg.symmetric) {
    std::vector<double> col(static_cast<std::size_t>(logits.rows()));
    std::vector<double> d_col(col.size());
    for (const Pair& p : pairs) {
      for (std::size_t k = 0; k < col.size(); ++k) col[k] = logits(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p.s));
      std::fill(d_col.begin(), d_col.end(), 0.0);
      out.loss += row_weight * detail::smoothed_cross_entropy(col, p.g, cfg.label_smoothing, row_weight,
                                                              want_grad ? std::span<double>(d_col) : std::span<double>());
      if (want_grad)
        for (std::size_t k = 0; k < col.size(); ++k)
          d_logits(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p.s)) += d_col[k];
    }
  }
  if (want_grad) {
    out.d_queries = scale * (d_logits * s);
    out.d_refs = scale * (d_logits.transpose() * g);
    out.d_log_inv_temperature = (d_logits.array() * logits.array()).sum();
  }
  return out;
}

inline std::vector<Pair> pairs_from_bijection(std::span<const std::size_t> pairing) {
  std::vector<Pair> pairs;
  pairs.reserve(pairing.size());
  for (std::size_t i = 0; i < pairing.size(); ++i) pairs.push_back({i, pairing[i]});
  return pairs;
}

// Mean over i of infonce(g_i, S, pairing(i)) and over j of
// infonce(s_j, G, pairing^-1(j)), halved.
inline double symmetric_infonce(const EmbeddingMatrix& g, const EmbeddingMatrix& s,
                                std::span<const std::size_t> pairing, const LossConfig& cfg) {
  require(g.n() == s.n() && g.n() >= 2, "symmetric_infonce: need equal sizes >= 2");
  require(pairing.size() == g.n(), "symmetric_infonce: pairing size mismatch");
  std::vector<bool> seen(g.n(), false);
  for (std::size_t j : pairing) {
    require(j < g.n() && !seen[j], "symmetric_infonce: pairing is not a bijection");
    seen[j] = true;
  }
  LossConfig c = cfg;
  c.symmetric = true;
  const auto pairs = pairs_from_bijection(pairing);
  return paired_infonce(g.rows(), s.rows(), pairs, c, false).loss;
}

inline std::vector<std::size_t> identity_pairing(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

}  // namespace cvgl
