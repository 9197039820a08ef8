#include "redunet/net_builder.hpp"

#include "redunet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace redunet {

Matrix transfer_matrix(const Layer& layer, std::size_t j) {
  Matrix L = layer.eta * layer.E - (layer.eta * layer.gamma.at(j)) * layer.C.at(j);
  L.diagonal().array() += 1.0;
  return L;
}

void BuildConfig::validate() const {
  auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
  if (!positive(epsilon)) throw InvalidInput("epsilon must be positive");
  if (depth < 1) throw InvalidInput("depth must be at least 1");
  if (!positive(eta0)) throw InvalidInput("eta0 must be positive");
  if (!positive(eta_decay) || eta_decay > 1.0) throw InvalidInput("eta_decay must lie in (0, 1]");
  if (!positive(lambda)) throw InvalidInput("lambda must be positive");
}

double BuildConfig::step_size(std::size_t layer) const {
  return eta0 * std::pow(eta_decay, static_cast<double>(layer));
}

std::size_t ReduNetModel::class_index(ClassId id) const {
  auto it = std::find(registry.begin(), registry.end(), id);
  if (it == registry.end()) {
    throw InvalidInput("class " + std::to_string(id) + " is not registered in the model");
  }
  return static_cast<std::size_t>(it - registry.begin());
}

void validate_model(const ReduNetModel& model) {
  const std::size_t k = model.num_classes();
  const Index d = model.dim;
  if (d < 1) throw InvalidInput("model dimension must be positive");
  if (k < 1) throw InvalidInput("model has no classes");
  if (model.counts.size() != k || model.params.alpha_j.size() != k || model.params.gamma.size() != k) {
    throw InvalidInput("model per-class containers disagree with the registry");
  }
  const auto expected = CodingParams::make(d, model.counts, model.params.epsilon);
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); };
  if (!close(model.params.alpha, expected.alpha)) {
    throw InconsistentParameter("stored alpha does not match class counts");
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (!close(model.params.alpha_j[j], expected.alpha_j[j])) {
      throw InconsistentParameter("stored alpha_j of class " + std::to_string(model.registry[j]) +
                                  " does not match its sample count");
    }
  }
  const double gsum = std::accumulate(model.params.gamma.begin(), model.params.gamma.end(), 0.0);
  if (std::abs(gsum - 1.0) > 1e-12) throw InconsistentParameter("gamma does not sum to one");

  const std::size_t L = model.depth();
  if (model.layers.size() != L && model.layers.size() != std::min<std::size_t>(1, L)) {
    throw InvalidInput("model must store every layer or only the first one");
  }
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Layer& layer = model.layers[l];
    if (layer.E.rows() != d || layer.E.cols() != d || layer.C.size() != k ||
        layer.gamma.size() != k || layer.alpha_j.size() != k) {
      throw InvalidInput("layer " + std::to_string(l) + " has inconsistent shape");
    }
    for (const Matrix& c : layer.C) {
      if (c.rows() != d || c.cols() != d) {
        throw InvalidInput("layer " + std::to_string(l) + " has a mis-sized compression matrix");
      }
    }
  }
  if (model.final_covariances.size() != k) {
    throw InvalidInput("model needs one final covariance per class");
  }
  for (const Matrix& s : model.final_covariances) {
    if (s.rows() != d || s.cols() != d) throw InvalidInput("final covariance has wrong shape");
  }
}

ConstructedLayer make_layer(double eta, std::span<const Matrix> class_covariances,
                            const CodingParams& params) {
  const std::size_t k = class_covariances.size();
  if (k == 0 || params.alpha_j.size() != k || params.gamma.size() != k) {
    throw InvalidInput("covariance list does not match the coding parameters");
  }
  const Index d = class_covariances[0].rows();

  // Fixed summation order over classes.
  Matrix total = Matrix::Zero(d, d);
  for (const Matrix& s : class_covariances) total += s;

  ConstructedLayer out;
  Layer& layer = out.layer;
  layer.eta = eta;
  layer.alpha = params.alpha;
  layer.gamma = params.gamma;
  layer.alpha_j = params.alpha_j;

  auto expansion = detail::shifted_inverse(total, params.alpha);
  layer.E = std::move(expansion.scaled_inverse);
  double rc = 0.0;
  layer.C.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    auto compression = detail::shifted_inverse(class_covariances[j], params.alpha_j[j]);
    layer.C.push_back(std::move(compression.scaled_inverse));
    rc += 0.5 * params.gamma[j] * compression.logdet;
  }
  out.delta_r = 0.5 * expansion.logdet - rc;
  return out;
}

namespace detail {

SampleMatrix forward_train_subset(const SampleMatrix& Z, const LabelAssignment& labels,
                                  const Layer& layer, std::span<const std::size_t> layer_index) {
  if (Z.rows() != layer.dim()) throw InvalidInput("feature dimension does not match the layer");
  if (static_cast<std::size_t>(Z.cols()) != labels.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  if (layer_index.size() != labels.num_classes()) {
    throw InvalidInput("class mapping does not cover the label registry");
  }
  SampleMatrix out(Z.rows(), Z.cols());
  for (std::size_t j = 0; j < labels.num_classes(); ++j) {
    const auto& cols = labels.members(j);
    const Matrix block = transfer_matrix(layer, layer_index[j]) * Z(Eigen::all, cols);
    const double norm2 = block.squaredNorm();
    if (!(norm2 > 0.0) || !std::isfinite(norm2)) {
      throw NumericalError("class " + std::to_string(labels.registry()[j]) +
                           " collapsed or diverged in the layer update");
    }
    out(Eigen::all, cols) = block * std::sqrt(static_cast<double>(labels.counts()[j]) / norm2);
  }
  return out;
}

}  // namespace detail

SampleMatrix layer_forward_train(const SampleMatrix& Z, const LabelAssignment& labels,
                                 const Layer& layer) {
  if (labels.num_classes() != layer.num_classes()) {
    throw InvalidInput("label registry does not match the layer's classes");
  }
  std::vector<std::size_t> identity(labels.num_classes());
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  return detail::forward_train_subset(Z, labels, layer, identity);
}

ReduNetModel build_skeleton(Index dim, const LabelAssignment& labels, const BuildConfig& cfg) {
  cfg.validate();
  if (dim < 1) throw InvalidInput("feature dimension must be positive");
  ReduNetModel model;
  model.dim = dim;
  model.params = CodingParams::make(dim, labels.counts(), cfg.epsilon);
  model.lambda = cfg.lambda;
  model.registry = labels.registry();
  model.counts = labels.counts();
  model.step_sizes.reserve(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) model.step_sizes.push_back(cfg.step_size(l));
  return model;
}

BuildResult build_redunet(const SampleMatrix& X, const LabelAssignment& labels,
                          const BuildConfig& cfg, const BuildOptions& options) {
  if (static_cast<std::size_t>(X.cols()) != labels.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  detail::require_finite(X, "training data");

  BuildResult result;
  result.model = build_skeleton(X.rows(), labels, cfg);
  ReduNetModel& model = result.model;

  SampleMatrix Z = normalize_classwise(X, labels);
  result.delta_r_trace.reserve(cfg.depth + 1);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const auto covs = class_covariances(Z, labels);
    ConstructedLayer built = make_layer(model.step_sizes[l], covs, model.params);
    result.delta_r_trace.push_back(built.delta_r);
    if (options.on_layer) options.on_layer(l, built.layer);
    try {
      Z = layer_forward_train(Z, labels, built.layer);
    } catch (const NumericalError& e) {
      throw NumericalDivergence(l, e.what());
    }
    if (!Z.allFinite()) throw NumericalDivergence(l, "non-finite features");
    if (options.retention == LayerRetention::kAll || l == 0) {
      model.layers.push_back(std::move(built.layer));
    }
  }
  model.final_covariances = class_covariances(Z, labels);
  result.delta_r_trace.push_back(
      rate_reduction_from_covariances(model.final_covariances, model.params));
  return result;
}

}  // namespace redunet
