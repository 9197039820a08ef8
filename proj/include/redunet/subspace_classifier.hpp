#pragma once

#include "redunet/net_builder.hpp"

#include <span>
#include <vector>

namespace redunet {

/// Orthonormal d x r basis per class, ordered like the model registry.
struct ClassSubspaces {
  std::vector<ClassId> classes;
  std::vector<Matrix> bases;
  Index rank = 0;
};

/// Top-r eigenvectors of each covariance, descending eigenvalue order. Each
/// eigenvector is signed so that its first nonzero coordinate is positive.
ClassSubspaces fit_subspaces(std::span<const Matrix> covariances, std::span<const ClassId> classes,
                             Index rank);

/// Fits on the model's final-layer covariances.
ClassSubspaces fit_subspaces(const ReduNetModel& model, Index rank);

/// ||z||^2 - ||U^T z||^2, clamped at zero.
double subspace_residual(const Vector& z, const Matrix& basis);

/// Class with the smallest residual; ties go to the earliest registered class.
ClassId classify(const Vector& z, const ClassSubspaces& subspaces);

std::vector<ClassId> classify_batch(const SampleMatrix& Z, const ClassSubspaces& subspaces);

/// Fraction of positions where prediction equals truth.
double accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth);

/// Pushes X_test through the model and scores nearest-subspace predictions.
double evaluate(const ReduNetModel& model, const ClassSubspaces& subspaces,
                const SampleMatrix& X_test, const LabelAssignment& labels);

}  // namespace redunet
