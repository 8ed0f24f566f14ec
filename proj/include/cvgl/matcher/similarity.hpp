#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "cvgl/core.hpp"
#include "cvgl/encoder/embedding.hpp"

namespace cvgl {

// n_ground x n_sat cosine similarities (rows of both inputs are unit norm).
struct SimilarityMatrix {
  Matrix values;

  std::size_t n_ground() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t n_sat() const { return static_cast<std::size_t>(values.cols()); }
  double operator()(std::size_t i, std::size_t j) const {
    return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  SimilarityMatrix transposed() const { return {values.transpose()}; }
};

inline constexpr std::size_t kSimilarityBlock = 64;

// Each block of kSimilarityBlock ground rows is one product, so the result
// does not depend on how blocks are spread across workers.
inline SimilarityMatrix similarity_matrix(const Matrix& g, const Matrix& s) {
  require(g.cols() == s.cols(), "similarity_matrix: embedding dimensions differ");
  SimilarityMatrix out{Matrix(g.rows(), s.rows())};
  const auto n = static_cast<std::size_t>(g.rows());
  const Matrix st = s.transpose();
  parallel_for(0, (n + kSimilarityBlock - 1) / kSimilarityBlock, [&](std::size_t b) {
    const auto begin = static_cast<Eigen::Index>(b * kSimilarityBlock);
    const auto rows = static_cast<Eigen::Index>(std::min(kSimilarityBlock, n - b * kSimilarityBlock));
    out.values.middleRows(begin, rows).noalias() = g.middleRows(begin, rows) * st;
  });
  return out;
}

inline SimilarityMatrix similarity_matrix(const EmbeddingMatrix& g, const EmbeddingMatrix& s) {
  return similarity_matrix(g.rows(), s.rows());
}

struct Scored {
  std::size_t index = 0;
  double score = 0.0;
  friend bool operator==(const Scored&, const Scored&) = default;
};

// Higher score first; equal scores go to the smaller index.
inline bool ranks_before(const Scored& a, const Scored& b) {
  return a.score > b.score || (a.score == b.score && a.index < b.index);
}

inline std::vector<std::vector<Scored>> topk_rows(const SimilarityMatrix& m, std::size_t k) {
  require(k >= 1 && k <= m.n_sat(), "topk_rows: k out of range");
  std::vector<std::vector<Scored>> out(m.n_ground());
  parallel_for(0, m.n_ground(), [&](std::size_t i) {
    std::vector<Scored> row(m.n_sat());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = {j, m(i, j)};
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end(), ranks_before);
    row.resize(k);
    out[i] = std::move(row);
  });
  return out;
}

}  // namespace cvgl
