#include "redunet/rate_objective.hpp"

#include "redunet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace redunet {

LabelAssignment::LabelAssignment(std::vector<ClassId> labels) : labels_(std::move(labels)) {
  registry_ = labels_;
  std::sort(registry_.begin(), registry_.end());
  registry_.erase(std::unique(registry_.begin(), registry_.end()), registry_.end());
  index_members();
}

LabelAssignment::LabelAssignment(std::vector<ClassId> labels, std::vector<ClassId> registry)
    : labels_(std::move(labels)), registry_(std::move(registry)) {
  auto sorted = registry_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidInput("class registry contains duplicate identifiers");
  }
  index_members();
}

void LabelAssignment::index_members() {
  if (labels_.empty()) throw InvalidInput("label assignment needs at least one sample");
  members_.assign(registry_.size(), {});
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    members_[index_of(labels_[i])].push_back(static_cast<Index>(i));
  }
  counts_.resize(registry_.size());
  for (std::size_t j = 0; j < registry_.size(); ++j) {
    if (members_[j].empty()) {
      throw InvalidInput("class " + std::to_string(registry_[j]) + " has no samples");
    }
    counts_[j] = static_cast<Index>(members_[j].size());
  }
}

std::size_t LabelAssignment::index_of(ClassId id) const {
  auto it = std::find(registry_.begin(), registry_.end(), id);
  if (it == registry_.end()) {
    throw InvalidInput("class " + std::to_string(id) + " is not in the registry");
  }
  return static_cast<std::size_t>(it - registry_.begin());
}

bool LabelAssignment::contains(ClassId id) const noexcept {
  return std::find(registry_.begin(), registry_.end(), id) != registry_.end();
}

CodingParams CodingParams::make(Index dim, std::span<const Index> counts, double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InvalidInput("epsilon must be positive");
  if (dim < 1) throw InvalidInput("feature dimension must be positive");
  Index total = 0;
  for (Index c : counts) {
    if (c < 1) throw InvalidInput("every class needs at least one sample");
    total += c;
  }
  if (total == 0) throw InvalidInput("no samples");

  const double eps2 = epsilon * epsilon;
  const double d = static_cast<double>(dim);
  CodingParams p;
  p.epsilon = epsilon;
  p.alpha = d / (static_cast<double>(total) * eps2);
  p.alpha_j.reserve(counts.size());
  p.gamma.reserve(counts.size());
  for (Index c : counts) {
    p.alpha_j.push_back(d / (static_cast<double>(c) * eps2));
    p.gamma.push_back(static_cast<double>(c) / static_cast<double>(total));
  }
  return p;
}

namespace detail {

void symmetrize(Matrix& A) {
  A = (0.5 * (A + A.transpose())).eval();
}

void require_finite(const Matrix& A, const char* what) {
  if (!A.allFinite()) throw InvalidInput(std::string(what) + " contains non-finite entries");
}

void require_symmetric(const Matrix& A, double tol, const char* what) {
  if (A.rows() != A.cols()) throw InvalidInput(std::string(what) + " must be square");
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > tol * scale) {
    throw InvalidInput(std::string(what) + " is not symmetric");
  }
}

double max_abs_diff(const Matrix& A, const Matrix& B) {
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw InvalidInput("max_abs_diff: shape mismatch");
  }
  if (A.size() == 0) return 0.0;
  return (A - B).cwiseAbs().maxCoeff();
}

namespace {

Eigen::LLT<Matrix> factor_shifted(const Matrix& S, double alpha) {
  Matrix shifted = alpha * S;
  shifted.diagonal().array() += 1.0;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("I + alpha*Sigma is not positive definite");
  }
  return llt;
}

double llt_logdet(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

ShiftedInverse shifted_inverse(const Matrix& S, double alpha) {
  auto llt = factor_shifted(S, alpha);
  ShiftedInverse out;
  out.logdet = llt_logdet(llt);
  out.scaled_inverse = llt.solve(Matrix::Identity(S.rows(), S.cols()));
  out.scaled_inverse *= alpha;
  symmetrize(out.scaled_inverse);
  return out;
}

double shifted_logdet(const Matrix& S, double alpha) {
  return llt_logdet(factor_shifted(S, alpha));
}

}  // namespace detail

namespace {

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw InvalidInput(std::string(what) + " must be positive");
}

Matrix gram(const Matrix& Z) {
  Matrix S = Z * Z.transpose();
  detail::symmetrize(S);
  return S;
}

}  // namespace

Matrix class_submatrix(const SampleMatrix& Z, const LabelAssignment& pi, std::size_t j) {
  return Z(Eigen::all, pi.members(j));
}

std::vector<Matrix> class_covariances(const SampleMatrix& Z, const LabelAssignment& pi) {
  if (static_cast<std::size_t>(Z.cols()) != pi.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  std::vector<Matrix> covs;
  covs.reserve(pi.num_classes());
  for (std::size_t j = 0; j < pi.num_classes(); ++j) covs.push_back(gram(class_submatrix(Z, pi, j)));
  return covs;
}

double coding_rate(const SampleMatrix& Z, double epsilon) {
  require_positive(epsilon, "epsilon");
  detail::require_finite(Z, "feature matrix");
  if (Z.rows() < 1 || Z.cols() < 1) throw InvalidInput("feature matrix is empty");
  const double alpha =
      static_cast<double>(Z.rows()) / (static_cast<double>(Z.cols()) * epsilon * epsilon);
  return 0.5 * detail::shifted_logdet(gram(Z), alpha);
}

double compression_rate(const SampleMatrix& Z, const LabelAssignment& pi, double epsilon) {
  require_positive(epsilon, "epsilon");
  detail::require_finite(Z, "feature matrix");
  const auto covs = class_covariances(Z, pi);
  const auto params = CodingParams::make(Z.rows(), pi.counts(), epsilon);
  double rc = 0.0;
  for (std::size_t j = 0; j < covs.size(); ++j) {
    rc += 0.5 * params.gamma[j] * detail::shifted_logdet(covs[j], params.alpha_j[j]);
  }
  return rc;
}

double rate_reduction(const SampleMatrix& Z, const LabelAssignment& pi, double epsilon) {
  return coding_rate(Z, epsilon) - compression_rate(Z, pi, epsilon);
}

double rate_reduction_from_covariances(std::span<const Matrix> class_covariances,
                                       const CodingParams& params) {
  if (class_covariances.empty() || class_covariances.size() != params.gamma.size()) {
    throw InvalidInput("covariance list does not match the coding parameters");
  }
  Matrix total = Matrix::Zero(class_covariances[0].rows(), class_covariances[0].cols());
  double rc = 0.0;
  for (std::size_t j = 0; j < class_covariances.size(); ++j) {
    total += class_covariances[j];
    rc += 0.5 * params.gamma[j] * detail::shifted_logdet(class_covariances[j], params.alpha_j[j]);
  }
  return 0.5 * detail::shifted_logdet(total, params.alpha) - rc;
}

SampleMatrix normalize_classwise(const SampleMatrix& Z, const LabelAssignment& pi) {
  if (static_cast<std::size_t>(Z.cols()) != pi.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  detail::require_finite(Z, "feature matrix");
  SampleMatrix out = Z;
  for (std::size_t j = 0; j < pi.num_classes(); ++j) {
    const auto& cols = pi.members(j);
    double norm2 = 0.0;
    for (Index c : cols) norm2 += Z.col(c).squaredNorm();
    if (!(norm2 > 0.0)) {
      throw DegenerateInput("class " + std::to_string(pi.registry()[j]) + " has zero features");
    }
    const double scale = std::sqrt(static_cast<double>(pi.counts()[j]) / norm2);
    for (Index c : cols) out.col(c) *= scale;
  }
  return out;
}

Matrix expansion_matrix(const Matrix& sigma_total, double alpha) {
  require_positive(alpha, "alpha");
  detail::require_finite(sigma_total, "covariance");
  detail::require_symmetric(sigma_total, 1e-8, "covariance");
  return detail::shifted_inverse(sigma_total, alpha).scaled_inverse;
}

Matrix compression_matrix(const Matrix& sigma_j, double alpha_j) {
  return expansion_matrix(sigma_j, alpha_j);
}

Matrix recover_covariance(const Matrix& C, double alpha_j) {
  require_positive(alpha_j, "alpha_j");
  detail::require_finite(C, "compression matrix");
  detail::require_symmetric(C, 1e-8, "compression matrix");

  Eigen::SelfAdjointEigenSolver<Matrix> spectrum(C / alpha_j, Eigen::EigenvaluesOnly);
  if (spectrum.info() != Eigen::Success) throw NumericalError("eigenvalue solver failed");
  const double lo = spectrum.eigenvalues().minCoeff();
  const double hi = spectrum.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi > 1.0 + 1e-8) {
    throw InconsistentParameter("compression matrix spectrum outside (0, alpha_j]");
  }

  Eigen::LLT<Matrix> llt(C);
  if (llt.info() != Eigen::Success) throw NumericalError("compression matrix is not SPD");
  // ((C/a)^-1 - I)/a == C^-1 - I/a
  Matrix sigma = llt.solve(Matrix::Identity(C.rows(), C.cols()));
  sigma.diagonal().array() -= 1.0 / alpha_j;
  detail::symmetrize(sigma);

  if (hi > 1.0) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(sigma);
    if (es.info() != Eigen::Success) throw NumericalError("eigen solver failed");
    const Vector clamped = es.eigenvalues().cwiseMax(0.0);
    sigma = es.eigenvectors() * clamped.asDiagonal() * es.eigenvectors().transpose();
    detail::symmetrize(sigma);
  }
  return sigma;
}

}  // namespace redunet
