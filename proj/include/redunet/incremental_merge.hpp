#pragma once

// Class-incremental update of a built network. A new task's data is merged
// into an existing model so that the result matches a joint construction on
// old and new data, while the old classes are represented only by their
// second moments (recovered from the first layer, then propagated).

#include "redunet/net_builder.hpp"

#include <span>
#include <vector>

namespace redunet {

struct TaskBatch {
  SampleMatrix features;
  LabelAssignment labels;
};

/// Per-class second moments Sigma_l^j of the old classes at the current layer.
struct CovarianceLedger {
  std::vector<ClassId> classes;
  std::vector<Index> counts;
  std::vector<Matrix> covariances;
};

/// Sigma_0^j for every class of the model, recovered from the stored layer-0
/// compression matrices (or from the final covariances of a zero-depth model).
CovarianceLedger recover_initial_covariances(const ReduNetModel& model,
                                             std::span<const Index> counts_old);

/// One propagation step of the ledger through a merged layer:
/// T = L^j Sigma L^j^T, rescaled to trace m_j. `first_class` is the layer
/// position of ledger entry 0.
void propagate_ledger(CovarianceLedger& ledger, const Layer& layer, std::size_t first_class = 0);

struct MergeResult {
  ReduNetModel model;
  std::vector<double> delta_r_trace;
};

/// The merged model before any layer is built: old registry followed by the
/// new classes, concatenated counts, parameters recomputed from them.
ReduNetModel merge_skeleton(const ReduNetModel& model, const LabelAssignment& new_labels);

MergeResult merge_new_task(const ReduNetModel& model, const TaskBatch& task,
                           std::span<const Index> counts_old, const BuildOptions& options = {});

/// Uses the class counts stored in the model.
MergeResult merge_new_task(const ReduNetModel& model, const TaskBatch& task,
                           const BuildOptions& options = {});

/// Folds merge_new_task over `tasks`. Intermediate merges keep only the first
/// layer; `options` applies to the final merge.
MergeResult chain_merge(const ReduNetModel& model, std::span<const TaskBatch> tasks,
                        const BuildOptions& options = {});

}  // namespace redunet
