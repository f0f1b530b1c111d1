#pragma once

// Linear pre-transforms applied before quantization: PCA dimensionality
// reduction and the OPQ rotation.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "knnseq/corevec.hpp"
#include "knnseq/pq.hpp"

namespace knnseq {

namespace detail {
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMatF> as_eigen(const VectorMatrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.dim())};
}
}  // namespace detail

/// y = W (x - mu), W is d_out x d_in with orthonormal rows.
struct PCATransform {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::vector<float> W;  // row-major d_out x d_in
  Vector mu;             // d_in

  friend bool operator==(const PCATransform&, const PCATransform&) = default;
};

/// x' = R x, R is a d x d rotation; `codebook` is the PQ trained in the
/// rotated space alongside R.
struct OPQTransform {
  std::size_t d = 0;
  std::vector<float> R;  // row-major d x d
  PQCodebook codebook;

  friend bool operator==(const OPQTransform&, const OPQTransform&) = default;
};

// ---------------------------------------------------------------------------
// PCA

/// Top-d_out eigenvectors of the data covariance, rows ordered by descending
/// eigenvalue, each row's first nonzero entry made positive.
inline PCATransform train_pca(const VectorMatrix& data, std::size_t d_out) {
  const std::size_t n = data.rows();
  const std::size_t d = data.dim();
  if (d_out < 1 || d_out > d) {
    throw InvalidArgument("train_pca: d_out=" + std::to_string(d_out) + " outside [1, d_in=" + std::to_string(d) + "]");
  }
  if (n < d_out) throw InvalidArgument("train_pca: need at least d_out rows");
  if (!data.all_finite()) throw InvalidArgument("train_pca: non-finite input");

  const auto di = static_cast<Eigen::Index>(d);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(di);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = data.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[static_cast<Eigen::Index>(j)] += r[j];
  }
  mean /= static_cast<double>(n);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(di, di);
  Eigen::VectorXd centered(di);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = data.row(i);
    for (std::size_t j = 0; j < d; ++j) centered[static_cast<Eigen::Index>(j)] = r[j] - mean[static_cast<Eigen::Index>(j)];
    cov.selfadjointView<Eigen::Lower>().rankUpdate(centered);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw InvalidState("train_pca: eigendecomposition failed");

  PCATransform t;
  t.d_in = d;
  t.d_out = d_out;
  t.mu.resize(d);
  for (std::size_t j = 0; j < d; ++j) t.mu[j] = static_cast<float>(mean[static_cast<Eigen::Index>(j)]);
  t.W.resize(d_out * d);
  // Eigen returns eigenvalues in ascending order.
  for (std::size_t r = 0; r < d_out; ++r) {
    Eigen::VectorXd v = eig.eigenvectors().col(di - 1 - static_cast<Eigen::Index>(r));
    for (Eigen::Index j = 0; j < di; ++j) {
      if (v[j] != 0.0) {
        if (v[j] < 0.0) v = -v;
        break;
      }
    }
    for (std::size_t j = 0; j < d; ++j) t.W[r * d + j] = static_cast<float>(v[static_cast<Eigen::Index>(j)]);
  }
  return t;
}

inline Vector apply_pca(const PCATransform& t, std::span<const float> v) {
  if (v.size() != t.d_in) {
    throw InvalidArgument("apply_pca: vector length " + std::to_string(v.size()) + " != d_in " + std::to_string(t.d_in));
  }
  Vector out(t.d_out);
  for (std::size_t r = 0; r < t.d_out; ++r) {
    double acc = 0.0;
    const float* w = t.W.data() + r * t.d_in;
    for (std::size_t j = 0; j < t.d_in; ++j) acc += static_cast<double>(w[j]) * (v[j] - t.mu[j]);
    out[r] = static_cast<float>(acc);
  }
  return out;
}

/// W^T y + mu.
inline Vector unapply_pca(const PCATransform& t, std::span<const float> y) {
  if (y.size() != t.d_out) throw InvalidArgument("unapply_pca: dimension mismatch");
  Vector out(t.mu.begin(), t.mu.end());
  for (std::size_t r = 0; r < t.d_out; ++r) {
    const float* w = t.W.data() + r * t.d_in;
    for (std::size_t j = 0; j < t.d_in; ++j) out[j] += w[j] * y[r];
  }
  return out;
}

inline VectorMatrix apply_pca(const PCATransform& t, const VectorMatrix& data) {
  VectorMatrix out(data.rows(), t.d_out);
  parallel_for(data.rows(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto y = apply_pca(t, data.row(i));
      std::copy(y.begin(), y.end(), out.row(i).begin());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// OPQ

inline Vector apply_opq(const OPQTransform& t, std::span<const float> v) {
  if (v.size() != t.d) {
    throw InvalidArgument("apply_opq: vector length " + std::to_string(v.size()) + " != d " + std::to_string(t.d));
  }
  Vector out(t.d);
  for (std::size_t r = 0; r < t.d; ++r) {
    double acc = 0.0;
    const float* row = t.R.data() + r * t.d;
    for (std::size_t j = 0; j < t.d; ++j) acc += static_cast<double>(row[j]) * v[j];
    out[r] = static_cast<float>(acc);
  }
  return out;
}

/// Every row x replaced by R x (i.e. X R^T).
inline VectorMatrix rotate_rows(std::span<const float> R, const VectorMatrix& data) {
  const auto d = static_cast<Eigen::Index>(data.dim());
  if (R.size() != data.dim() * data.dim()) throw InvalidArgument("rotate_rows: rotation shape mismatch");
  Eigen::Map<const detail::RowMatF> rot(R.data(), d, d);
  VectorMatrix out(data.rows(), data.dim());
  Eigen::Map<detail::RowMatF> dst(out.data().data(), static_cast<Eigen::Index>(data.rows()), d);
  dst.noalias() = detail::as_eigen(data) * rot.transpose();
  return out;
}

inline VectorMatrix apply_opq(const OPQTransform& t, const VectorMatrix& data) { return rotate_rows(t.R, data); }

/// ||R^T R - I||_F
inline double orthogonality_error(std::span<const float> R, std::size_t d) {
  Eigen::Map<const detail::RowMatF> rot(R.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  const Eigen::MatrixXd r = rot.cast<double>();
  return (r.transpose() * r - Eigen::MatrixXd::Identity(r.rows(), r.cols())).norm();
}

/// Orthogonal R' minimizing ||X R'^T - Y||_F: with X^T Y = U S V^T, R'^T = U V^T.
inline std::vector<float> procrustes_rotation(const VectorMatrix& X, const VectorMatrix& Y) {
  if (X.rows() != Y.rows() || X.dim() != Y.dim()) throw InvalidArgument("procrustes_rotation: shape mismatch");
  const Eigen::MatrixXd xty = (detail::as_eigen(X).cast<double>().transpose() * detail::as_eigen(Y).cast<double>());
  Eigen::BDCSVD<Eigen::MatrixXd> svd(xty, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::MatrixXd rt = svd.matrixU() * svd.matrixV().transpose();
  const auto d = X.dim();
  std::vector<float> R(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      R[i * d + j] = static_cast<float>(rt(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)));
    }
  }
  return R;
}

/// Per-outer-iteration training measurements. Index 0 is the plain-PQ start.
struct OPQTrace {
  std::vector<double> mse;
  std::vector<double> orthogonality;
};

/// Alternates (1) PQ codebook training in the rotated space, (2) measuring the
/// reconstruction of X R^T, (3) a Procrustes update of R towards the
/// reconstruction. Starts from R = I and train_pq(data, M, L, pq_iters, seed);
/// later codebook refreshes warm-start from the previous codebook.
inline OPQTransform train_opq(const VectorMatrix& data, std::size_t M, std::size_t L, std::size_t outer_iters,
                              std::size_t pq_iters = 10, std::uint64_t seed = 0, OPQTrace* trace = nullptr) {
  detail::check_pq_args(data, M, L);
  if (!data.all_finite()) throw InvalidArgument("train_opq: non-finite input");
  const std::size_t d = data.dim();
  OPQTransform t;
  t.d = d;
  t.R.assign(d * d, 0.0F);
  for (std::size_t i = 0; i < d; ++i) t.R[i * d + i] = 1.0F;
  t.codebook = train_pq(data, M, L, pq_iters, seed);

  if (trace) {
    trace->mse = {reconstruction_mse(t.codebook, data)};
    trace->orthogonality = {0.0};
  }
  VectorMatrix rotated = data;
  for (std::size_t it = 0; it < outer_iters; ++it) {
    const VectorMatrix target = reconstruct_all(t.codebook, rotated);
    t.R = procrustes_rotation(data, target);
    rotated = rotate_rows(t.R, data);
    t.codebook = refine_pq(t.codebook, rotated, pq_iters);
    if (trace) {
      trace->mse.push_back(reconstruction_mse(t.codebook, rotated));
      trace->orthogonality.push_back(orthogonality_error(t.R, d));
    }
  }
  return t;
}

}  // namespace knnseq
