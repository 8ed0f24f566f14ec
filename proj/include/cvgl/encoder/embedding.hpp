#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "cvgl/core.hpp"
#include "cvgl/io.hpp"

namespace cvgl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kUnitNormTolerance = 1e-6;

// N x D matrix of unit-norm embeddings, one row per image, with the image id
// of every row.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(Matrix rows, std::vector<std::uint64_t> ids) : rows_(std::move(rows)), ids_(std::move(ids)) {
    require(static_cast<std::size_t>(rows_.rows()) == ids_.size(), "EmbeddingMatrix: id count mismatch");
    for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
      const double norm = rows_.row(i).norm();
      if (std::abs(norm - 1.0) > kUnitNormTolerance)
        throw ContractError("EmbeddingMatrix: row " + std::to_string(i) + " is not unit norm");
    }
    std::vector<std::uint64_t> sorted = ids_;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
            "EmbeddingMatrix: duplicate image id");
  }

  // Rows 0..n-1 get ids 0..n-1.
  explicit EmbeddingMatrix(Matrix rows) : EmbeddingMatrix(rows, sequential_ids(rows.rows())) {}

  std::size_t n() const { return static_cast<std::size_t>(rows_.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(rows_.cols()); }
  const Matrix& rows() const { return rows_; }
  const std::vector<std::uint64_t>& ids() const { return ids_; }
  std::span<const double> row(std::size_t i) const {
    return {rows_.data() + i * d(), d()};
  }

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.ids_ == b.ids_ && a.rows_.rows() == b.rows_.rows() && a.rows_.cols() == b.rows_.cols() &&
           a.rows_ == b.rows_;
  }

 private:
  static std::vector<std::uint64_t> sequential_ids(Eigen::Index n) {
    std::vector<std::uint64_t> ids(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
  }

  Matrix rows_;
  std::vector<std::uint64_t> ids_;
};

// Normalizes every row; throws NumericError on a zero row.
inline Matrix normalize_rows(Matrix m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (!(norm > 0) || !std::isfinite(norm)) throw NumericError("normalize_rows: zero or non-finite row");
    m.row(i) /= norm;
  }
  return m;
}

// ---------------------------------------------------------------------------
// CVEB: "CVEB", u32 version=1, u64 n, u64 d, n*d f32 row-major, n u64 ids.

inline constexpr std::uint32_t kCvebVersion = 1;

inline std::vector<char> encode_cveb(const EmbeddingMatrix& e) {
  io::ByteWriter w;
  w.magic("CVEB");
  w.put<std::uint32_t>(kCvebVersion);
  w.put<std::uint64_t>(e.n());
  w.put<std::uint64_t>(e.d());
  for (std::size_t i = 0; i < e.n(); ++i)
    for (double v : e.row(i)) w.put<float>(static_cast<float>(v));
  for (auto id : e.ids()) w.put<std::uint64_t>(id);
  return w.bytes();
}

inline EmbeddingMatrix decode_cveb(io::ByteReader& r) {
  r.expect_magic("CVEB");
  if (r.get<std::uint32_t>() != kCvebVersion) throw ContractError(r.name() + ": unsupported CVEB version");
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint64_t>();
  Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::uint64_t i = 0; i < n; ++i)
    for (std::uint64_t j = 0; j < d; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r.get<float>();
  std::vector<std::uint64_t> ids(n);
  for (auto& id : ids) id = r.get<std::uint64_t>();
  if (!r.at_end()) throw ContractError(r.name() + ": trailing bytes after CVEB payload");
  return EmbeddingMatrix(std::move(m), std::move(ids));
}

inline void write_cveb(const std::filesystem::path& path, const EmbeddingMatrix& e) {
  io::write_bytes(path, encode_cveb(e));
}

inline EmbeddingMatrix read_cveb(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  return decode_cveb(r);
}

}  // namespace cvgl
