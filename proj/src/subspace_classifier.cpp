#include "redunet/subspace_classifier.hpp"

#include "redunet/errors.hpp"
#include "redunet/forward_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace redunet {

namespace {

// Residuals this small relative to ||z||^2 are rounding noise of a vector that
// lies in the subspace.
constexpr double kZeroResidual = 1e-12;

double residual_from_parts(double total, double captured) {
  const double r = total - captured;
  return r <= kZeroResidual * total ? 0.0 : r;
}

void check_sample(const Vector& z, const ClassSubspaces& subspaces) {
  if (subspaces.bases.empty()) throw InvalidInput("no class subspaces fitted");
  if (z.size() != subspaces.bases.front().rows()) {
    throw InvalidInput("sample dimension does not match the subspaces");
  }
  if (!z.allFinite()) throw InvalidInput("sample contains non-finite entries");
}

}  // namespace

ClassSubspaces fit_subspaces(std::span<const Matrix> covariances, std::span<const ClassId> classes,
                             Index rank) {
  if (covariances.empty() || covariances.size() != classes.size()) {
    throw InvalidInput("need one covariance per class");
  }
  const Index d = covariances.front().rows();
  if (rank < 1 || rank > d) {
    throw InvalidInput("subspace rank " + std::to_string(rank) + " outside [1, " +
                       std::to_string(d) + "]");
  }
  ClassSubspaces out;
  out.classes.assign(classes.begin(), classes.end());
  out.rank = rank;
  for (const Matrix& sigma : covariances) {
    detail::require_finite(sigma, "covariance");
    Eigen::SelfAdjointEigenSolver<Matrix> es(sigma);
    if (es.info() != Eigen::Success) throw NumericalError("eigen solver failed");
    // Eigenvalues come out ascending; take the last `rank` columns reversed.
    Matrix basis(d, rank);
    for (Index c = 0; c < rank; ++c) {
      Vector v = es.eigenvectors().col(d - 1 - c);
      for (Index i = 0; i < d; ++i) {
        if (std::abs(v(i)) > 1e-12) {
          if (v(i) < 0.0) v = -v;
          break;
        }
      }
      basis.col(c) = v;
    }
    out.bases.push_back(std::move(basis));
  }
  return out;
}

ClassSubspaces fit_subspaces(const ReduNetModel& model, Index rank) {
  return fit_subspaces(model.final_covariances, model.registry, rank);
}

double subspace_residual(const Vector& z, const Matrix& basis) {
  return residual_from_parts(z.squaredNorm(), (basis.transpose() * z).squaredNorm());
}

ClassId classify(const Vector& z, const ClassSubspaces& subspaces) {
  check_sample(z, subspaces);
  std::size_t best = 0;
  double best_residual = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < subspaces.bases.size(); ++j) {
    const double r = subspace_residual(z, subspaces.bases[j]);
    if (r < best_residual) {
      best_residual = r;
      best = j;
    }
  }
  return subspaces.classes[best];
}

std::vector<ClassId> classify_batch(const SampleMatrix& Z, const ClassSubspaces& subspaces) {
  if (subspaces.bases.empty()) throw InvalidInput("no class subspaces fitted");
  if (Z.rows() != subspaces.bases.front().rows()) {
    throw InvalidInput("sample dimension does not match the subspaces");
  }
  if (!Z.allFinite()) throw InvalidInput("samples contain non-finite entries");
  const Eigen::RowVectorXd totals = Z.colwise().squaredNorm();
  std::vector<ClassId> predicted(static_cast<std::size_t>(Z.cols()));
  std::vector<double> best(predicted.size(), std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < subspaces.bases.size(); ++j) {
    const Eigen::RowVectorXd captured = (subspaces.bases[j].transpose() * Z).colwise().squaredNorm();
    for (Index c = 0; c < Z.cols(); ++c) {
      const double r = residual_from_parts(totals(c), captured(c));
      auto i = static_cast<std::size_t>(c);
      if (r < best[i]) {
        best[i] = r;
        predicted[i] = subspaces.classes[j];
      }
    }
  }
  return predicted;
}

double accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  if (predicted.size() != truth.size()) throw InvalidInput("prediction and label counts differ");
  if (truth.empty()) throw InvalidInput("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double evaluate(const ReduNetModel& model, const ClassSubspaces& subspaces,
                const SampleMatrix& X_test, const LabelAssignment& labels) {
  if (static_cast<std::size_t>(X_test.cols()) != labels.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  for (ClassId id : labels.registry()) {
    if (std::find(subspaces.classes.begin(), subspaces.classes.end(), id) == subspaces.classes.end()) {
      throw InvalidInput("test label " + std::to_string(id) + " is unknown to the model");
    }
  }
  const SampleMatrix features = forward_batch(model, X_test);
  return accuracy(classify_batch(features, subspaces), labels.labels());
}

}  // namespace redunet
