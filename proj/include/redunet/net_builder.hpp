#pragma once

// Layer-by-layer construction of a rate-reduction network: every layer is one
// projected gradient-ascent step on Delta R, with the expansion matrix E and
// the per-class compression matrices C^j as its parameters.

#include "redunet/rate_objective.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace redunet {

struct Layer {
  double eta = 0.0;
  double alpha = 0.0;
  Matrix E;
  std::vector<Matrix> C;
  std::vector<double> gamma;
  std::vector<double> alpha_j;

  std::size_t num_classes() const noexcept { return C.size(); }
  Index dim() const noexcept { return E.rows(); }
};

/// I + eta E - eta gamma_j C^j: maps the class-j block of a layer's input to
/// its output before normalization.
Matrix transfer_matrix(const Layer& layer, std::size_t j);

struct BuildConfig {
  double epsilon = 0.5;
  std::size_t depth = 200;
  double eta0 = 0.5;
  double eta_decay = 0.933;
  double lambda = 1.0;

  void validate() const;
  /// eta0 * eta_decay^layer
  double step_size(std::size_t layer) const;
};

enum class LayerRetention {
  kAll,        ///< keep every layer in the returned model
  kFirstOnly,  ///< keep layer 0 only (enough for merging and subspace fitting)
};

/// Called once per constructed layer, in order, before retention applies.
using LayerSink = std::function<void(std::size_t layer_index, const Layer& layer)>;

struct BuildOptions {
  LayerRetention retention = LayerRetention::kAll;
  LayerSink on_layer;
};

struct ReduNetModel {
  Index dim = 0;
  CodingParams params;
  double lambda = 1.0;
  std::vector<ClassId> registry;
  std::vector<Index> counts;
  std::vector<double> step_sizes;  // eta_l for every layer, stored even when layers are not
  std::vector<Layer> layers;
  std::vector<Matrix> final_covariances;
  // Preprocessing provenance (dataset, kernel seed, ...) and auxiliary
  // vectors such as the training mean image.
  std::map<std::string, std::string> metadata;
  std::map<std::string, Vector> aux;

  std::size_t depth() const noexcept { return step_sizes.size(); }
  std::size_t num_classes() const noexcept { return registry.size(); }
  bool has_all_layers() const noexcept { return layers.size() == depth(); }
  std::size_t class_index(ClassId id) const;
};

/// Structural checks: shapes, per-class containers, gamma sum, counts vs alpha_j.
void validate_model(const ReduNetModel& model);

struct ConstructedLayer {
  Layer layer;
  double delta_r = 0.0;  // Delta R of the layer input
};

/// Builds one layer from the per-class second moments of its input.
ConstructedLayer make_layer(double eta, std::span<const Matrix> class_covariances,
                            const CodingParams& params);

struct BuildResult {
  ReduNetModel model;
  /// Delta R(Z_l) for l = 0..L (the last entry is the output of the network).
  std::vector<double> delta_r_trace;
};

/// Everything build_redunet fixes before the first layer: dimension,
/// parameters, registry, counts and step sizes.
ReduNetModel build_skeleton(Index dim, const LabelAssignment& labels, const BuildConfig& cfg);

BuildResult build_redunet(const SampleMatrix& X, const LabelAssignment& labels,
                          const BuildConfig& cfg, const BuildOptions& options = {});

/// Known-label update Z^j <- L^j Z^j followed by class-wise normalization.
/// `labels.registry()` must list the layer's classes in layer order.
SampleMatrix layer_forward_train(const SampleMatrix& Z, const LabelAssignment& labels,
                                 const Layer& layer);

namespace detail {

/// Same update for a label assignment covering a subset of the layer's
/// classes; `layer_index[j]` is the layer position of labels.registry()[j].
SampleMatrix forward_train_subset(const SampleMatrix& Z, const LabelAssignment& labels,
                                  const Layer& layer, std::span<const std::size_t> layer_index);

}  // namespace detail

}  // namespace redunet
