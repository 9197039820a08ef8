#include "redunet/incremental_merge.hpp"

#include "redunet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace redunet {

namespace {

constexpr double kClampThreshold = 1e-10;
constexpr double kDegradationThreshold = 1e-8;

bool positive_definite_after_shift(const Matrix& S, double shift) {
  Matrix shifted = S;
  shifted.diagonal().array() += shift;
  Eigen::LLT<Matrix> llt(shifted);
  return llt.info() == Eigen::Success;
}

// Keeps a propagated covariance PSD. Eigenvalues below -1e-10 are clamped to
// zero; anything below -1e-8 means the ledger has degraded.
void enforce_psd(Matrix& S, ClassId cls) {
  if (positive_definite_after_shift(S, kClampThreshold)) return;
  Eigen::SelfAdjointEigenSolver<Matrix> es(S);
  if (es.info() != Eigen::Success) throw NumericalError("eigen solver failed on ledger covariance");
  if (es.eigenvalues().minCoeff() < -kDegradationThreshold) {
    throw NumericalError("ledger covariance of class " + std::to_string(cls) +
                         " has eigenvalue " + std::to_string(es.eigenvalues().minCoeff()));
  }
  S = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).asDiagonal() *
      es.eigenvectors().transpose();
  detail::symmetrize(S);
}

void check_counts(const ReduNetModel& model, std::span<const Index> counts_old) {
  if (counts_old.size() != model.num_classes()) {
    throw InconsistentParameter("class count list does not match the model registry");
  }
  const double eps2 = model.params.epsilon * model.params.epsilon;
  for (std::size_t j = 0; j < counts_old.size(); ++j) {
    if (counts_old[j] < 1) throw InvalidInput("class counts must be positive");
    const double expected = static_cast<double>(model.dim) / (static_cast<double>(counts_old[j]) * eps2);
    const double stored = model.params.alpha_j[j];
    if (counts_old[j] != model.counts[j] ||
        std::abs(expected - stored) > 1e-12 * std::max(1.0, std::abs(stored))) {
      throw InconsistentParameter("sample count of class " + std::to_string(model.registry[j]) +
                                  " does not match its stored alpha_j");
    }
  }
}

}  // namespace

CovarianceLedger recover_initial_covariances(const ReduNetModel& model,
                                             std::span<const Index> counts_old) {
  validate_model(model);
  check_counts(model, counts_old);
  CovarianceLedger ledger;
  ledger.classes = model.registry;
  ledger.counts.assign(counts_old.begin(), counts_old.end());
  if (model.depth() == 0) {
    ledger.covariances = model.final_covariances;
    return ledger;
  }
  const Layer& first = model.layers.front();
  ledger.covariances.reserve(model.num_classes());
  for (std::size_t j = 0; j < model.num_classes(); ++j) {
    ledger.covariances.push_back(recover_covariance(first.C[j], first.alpha_j[j]));
  }
  return ledger;
}

void propagate_ledger(CovarianceLedger& ledger, const Layer& layer, std::size_t first_class) {
  for (std::size_t j = 0; j < ledger.covariances.size(); ++j) {
    const Matrix L = transfer_matrix(layer, first_class + j);
    Matrix T = L * ledger.covariances[j] * L.transpose();
    detail::symmetrize(T);
    const double tr = T.trace();
    if (!(tr > 0.0) || !std::isfinite(tr)) {
      throw NumericalError("ledger covariance of class " + std::to_string(ledger.classes[j]) +
                           " collapsed");
    }
    T *= static_cast<double>(ledger.counts[j]) / tr;
    enforce_psd(T, ledger.classes[j]);
    ledger.covariances[j] = std::move(T);
  }
}

ReduNetModel merge_skeleton(const ReduNetModel& model, const LabelAssignment& new_labels) {
  ReduNetModel merged;
  merged.dim = model.dim;
  merged.lambda = model.lambda;
  merged.step_sizes = model.step_sizes;
  merged.metadata = model.metadata;
  merged.aux = model.aux;
  merged.registry = model.registry;
  merged.registry.insert(merged.registry.end(), new_labels.registry().begin(),
                         new_labels.registry().end());
  merged.counts = model.counts;
  merged.counts.insert(merged.counts.end(), new_labels.counts().begin(), new_labels.counts().end());
  merged.params = CodingParams::make(merged.dim, merged.counts, model.params.epsilon);
  return merged;
}

MergeResult merge_new_task(const ReduNetModel& model, const TaskBatch& task,
                           std::span<const Index> counts_old, const BuildOptions& options) {
  CovarianceLedger ledger = recover_initial_covariances(model, counts_old);
  if (task.features.rows() != model.dim) {
    throw InvalidInput("task feature dimension does not match the model");
  }
  if (static_cast<std::size_t>(task.features.cols()) != task.labels.size()) {
    throw InvalidInput("task label count does not match its sample count");
  }
  for (ClassId id : task.labels.registry()) {
    if (std::find(model.registry.begin(), model.registry.end(), id) != model.registry.end()) {
      throw InvalidInput("class " + std::to_string(id) + " is already registered in the model");
    }
  }
  if (model.depth() > 0 && model.layers.empty()) {
    throw InvalidInput("model does not store its first layer");
  }

  const std::size_t k_old = model.num_classes();
  const std::size_t k_new = task.labels.num_classes();

  MergeResult result;
  result.model = merge_skeleton(model, task.labels);
  ReduNetModel& merged = result.model;

  std::vector<std::size_t> new_index(k_new);
  for (std::size_t j = 0; j < k_new; ++j) new_index[j] = k_old + j;

  SampleMatrix Z = normalize_classwise(task.features, task.labels);
  std::vector<Matrix> covs(k_old + k_new);
  auto gather = [&] {
    auto fresh = class_covariances(Z, task.labels);
    for (std::size_t j = 0; j < k_old; ++j) covs[j] = ledger.covariances[j];
    for (std::size_t j = 0; j < k_new; ++j) covs[k_old + j] = std::move(fresh[j]);
  };

  result.delta_r_trace.reserve(merged.depth() + 1);
  for (std::size_t l = 0; l < merged.depth(); ++l) {
    gather();
    ConstructedLayer built = make_layer(merged.step_sizes[l], covs, merged.params);
    result.delta_r_trace.push_back(built.delta_r);
    if (options.on_layer) options.on_layer(l, built.layer);
    try {
      propagate_ledger(ledger, built.layer, 0);
      Z = detail::forward_train_subset(Z, task.labels, built.layer, new_index);
    } catch (const NumericalError& e) {
      throw NumericalDivergence(l, e.what());
    }
    if (options.retention == LayerRetention::kAll || l == 0) {
      merged.layers.push_back(std::move(built.layer));
    }
  }
  gather();
  merged.final_covariances = std::move(covs);
  result.delta_r_trace.push_back(
      rate_reduction_from_covariances(merged.final_covariances, merged.params));
  return result;
}

MergeResult merge_new_task(const ReduNetModel& model, const TaskBatch& task,
                           const BuildOptions& options) {
  return merge_new_task(model, task, model.counts, options);
}

MergeResult chain_merge(const ReduNetModel& model, std::span<const TaskBatch> tasks,
                        const BuildOptions& options) {
  if (tasks.empty()) throw InvalidInput("chain_merge needs at least one task");
  BuildOptions intermediate;
  intermediate.retention = LayerRetention::kFirstOnly;
  MergeResult current;
  const ReduNetModel* base = &model;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const bool last = t + 1 == tasks.size();
    current = merge_new_task(*base, tasks[t], last ? options : intermediate);
    base = &current.model;
  }
  return current;
}

}  // namespace redunet
