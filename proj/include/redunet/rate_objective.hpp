#pragma once

// Coding-rate quantities of a labeled feature matrix and the per-layer
// expansion / compression operators derived from them.
//
// Features are stored column-wise: a SampleMatrix is d x m with one sample per
// column. Membership is hard (each sample belongs to exactly one class).

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

namespace redunet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using ClassId = int;

/// d x m feature matrix, one sample per column.
using SampleMatrix = Eigen::MatrixXd;

/// Hard class labels for the columns of a SampleMatrix together with the
/// ordered class registry. Registry position j is the class index used by
/// every per-class container in the library (C_list, gamma, covariances).
class LabelAssignment {
 public:
  LabelAssignment() = default;

  /// Registry is the sorted set of distinct labels.
  explicit LabelAssignment(std::vector<ClassId> labels);

  /// Registry given explicitly; every label must appear in it and every
  /// registered class must own at least one sample.
  LabelAssignment(std::vector<ClassId> labels, std::vector<ClassId> registry);

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t num_classes() const noexcept { return registry_.size(); }

  const std::vector<ClassId>& labels() const noexcept { return labels_; }
  const std::vector<ClassId>& registry() const noexcept { return registry_; }
  const std::vector<Index>& counts() const noexcept { return counts_; }

  /// Column indices of registry class j, in increasing order.
  const std::vector<Index>& members(std::size_t j) const { return members_.at(j); }

  /// Registry position of a class identifier; throws InvalidInput if absent.
  std::size_t index_of(ClassId id) const;
  bool contains(ClassId id) const noexcept;

 private:
  void index_members();

  std::vector<ClassId> labels_;
  std::vector<ClassId> registry_;
  std::vector<Index> counts_;
  std::vector<std::vector<Index>> members_;
};

/// Quantization precision and the scalars derived from it for a fixed
/// class-count profile: alpha = d/(m eps^2), alpha_j = d/(m_j eps^2),
/// gamma_j = m_j/m.
struct CodingParams {
  double epsilon = 0.5;
  double alpha = 0.0;
  std::vector<double> alpha_j;
  std::vector<double> gamma;

  static CodingParams make(Index dim, std::span<const Index> counts, double epsilon);
};

/// Columns of class j.
Matrix class_submatrix(const SampleMatrix& Z, const LabelAssignment& pi, std::size_t j);

/// Z^j Z^j^T for every registry class, symmetrized.
std::vector<Matrix> class_covariances(const SampleMatrix& Z, const LabelAssignment& pi);

/// R(Z) = 1/2 logdet(I + alpha Z Z^T), alpha = d/(m eps^2).
double coding_rate(const SampleMatrix& Z, double epsilon);

/// R_c(Z, Pi) = sum_j gamma_j/2 logdet(I + alpha_j Z Pi^j Z^T).
double compression_rate(const SampleMatrix& Z, const LabelAssignment& pi, double epsilon);

/// Delta R = R - R_c.
double rate_reduction(const SampleMatrix& Z, const LabelAssignment& pi, double epsilon);

/// Rate reduction evaluated from second moments instead of features.
double rate_reduction_from_covariances(std::span<const Matrix> class_covariances,
                                       const CodingParams& params);

/// Rescales every class block so that ||Z^j||_F^2 = m_j.
SampleMatrix normalize_classwise(const SampleMatrix& Z, const LabelAssignment& pi);

/// E = alpha (I + alpha Sigma)^-1.
Matrix expansion_matrix(const Matrix& sigma_total, double alpha);

/// C^j = alpha_j (I + alpha_j Sigma^j)^-1.
Matrix compression_matrix(const Matrix& sigma_j, double alpha_j);

/// Inverse of compression_matrix: Sigma = ((C/alpha_j)^-1 - I)/alpha_j.
/// Small negative eigenvalues produced by rounding are clamped to zero.
Matrix recover_covariance(const Matrix& C, double alpha_j);

namespace detail {

/// alpha (I + alpha S)^-1 together with logdet(I + alpha S), both from one
/// Cholesky factorization.
struct ShiftedInverse {
  Matrix scaled_inverse;
  double logdet = 0.0;
};

ShiftedInverse shifted_inverse(const Matrix& S, double alpha);

/// logdet(I + alpha S) through a Cholesky factorization.
double shifted_logdet(const Matrix& S, double alpha);

void symmetrize(Matrix& A);
void require_finite(const Matrix& A, const char* what);
void require_symmetric(const Matrix& A, double tol, const char* what);
double max_abs_diff(const Matrix& A, const Matrix& B);

}  // namespace detail

}  // namespace redunet
