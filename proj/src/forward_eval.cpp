#include "redunet/forward_eval.hpp"

#include "redunet/errors.hpp"

#include <cmath>
#include <vector>

namespace redunet {

namespace {

// Columns are processed in fixed-width blocks so every matrix product sees the
// same shape no matter how many samples are passed. The per-column result is
// then independent of batch size and position, which makes forward_batch
// bit-identical to repeated forward_sample calls.
constexpr Index kBlock = 32;

Vector softmax_of_norms(const Vector& norms, double scale) {
  Vector logits = -scale * norms;
  const double top = logits.maxCoeff();
  Vector p = (logits.array() - top).exp().matrix();
  return p / p.sum();
}

void require_layer_fits(const Layer& layer, Index rows) {
  if (layer.dim() != rows) throw InvalidInput("sample dimension does not match the layer");
  if (layer.num_classes() == 0) throw InvalidInput("layer has no classes");
}

void advance_block(Eigen::Ref<Matrix> Zb, const Layer& layer, double lambda) {
  const std::size_t k = layer.num_classes();
  const double scale = lambda * static_cast<double>(k);
  const Matrix EZ = layer.E * Zb;
  std::vector<Matrix> CZ;
  CZ.reserve(k);
  Matrix norms(static_cast<Index>(k), Zb.cols());
  for (std::size_t j = 0; j < k; ++j) {
    CZ.push_back(layer.C[j] * Zb);
    norms.row(static_cast<Index>(j)) = CZ.back().colwise().norm();
  }
  for (Index c = 0; c < Zb.cols(); ++c) {
    const Vector pi = softmax_of_norms(norms.col(c), scale);
    Vector step = EZ.col(c);
    for (std::size_t j = 0; j < k; ++j) {
      step -= (layer.gamma[j] * pi(static_cast<Index>(j))) * CZ[j].col(c);
    }
    Vector z = Zb.col(c) + layer.eta * step;
    const double n = z.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericalError("test feature collapsed or diverged");
    Zb.col(c) = z / n;
  }
}

}  // namespace

MembershipEstimate estimate_membership(const Vector& z, const Layer& layer, double lambda) {
  require_layer_fits(layer, z.size());
  if (!z.allFinite()) throw InvalidInput("sample contains non-finite entries");
  if (!(lambda > 0.0)) throw InvalidInput("lambda must be positive");
  Vector norms(static_cast<Index>(layer.num_classes()));
  for (std::size_t j = 0; j < layer.num_classes(); ++j) {
    norms(static_cast<Index>(j)) = (layer.C[j] * z).norm();
  }
  return {softmax_of_norms(norms, lambda * static_cast<double>(layer.num_classes()))};
}

Matrix estimate_membership_batch(const SampleMatrix& Z, const Layer& layer, double lambda) {
  require_layer_fits(layer, Z.rows());
  const std::size_t k = layer.num_classes();
  Matrix norms(static_cast<Index>(k), Z.cols());
  for (std::size_t j = 0; j < k; ++j) {
    norms.row(static_cast<Index>(j)) = (layer.C[j] * Z).colwise().norm();
  }
  Matrix probs(norms.rows(), norms.cols());
  for (Index c = 0; c < Z.cols(); ++c) {
    probs.col(c) = softmax_of_norms(norms.col(c), lambda * static_cast<double>(k));
  }
  return probs;
}

SampleMatrix normalize_columns(const SampleMatrix& X) {
  if (!X.allFinite()) throw InvalidInput("samples contain non-finite entries");
  SampleMatrix out = X;
  for (Index c = 0; c < X.cols(); ++c) {
    const double n = X.col(c).norm();
    if (!(n > 0.0)) throw DegenerateInput("sample " + std::to_string(c) + " is the zero vector");
    out.col(c) /= n;
  }
  return out;
}

void advance_layer(SampleMatrix& Z, const Layer& layer, double lambda) {
  require_layer_fits(layer, Z.rows());
  Matrix block(Z.rows(), kBlock);
  for (Index start = 0; start < Z.cols(); start += kBlock) {
    const Index width = std::min(kBlock, Z.cols() - start);
    block.leftCols(width) = Z.middleCols(start, width);
    for (Index c = width; c < kBlock; ++c) block.col(c) = Z.col(start);
    advance_block(block, layer, lambda);
    Z.middleCols(start, width) = block.leftCols(width);
  }
}

SampleMatrix forward_batch(const ReduNetModel& model, const SampleMatrix& X) {
  if (X.rows() != model.dim) throw InvalidInput("sample dimension does not match the model");
  if (!model.has_all_layers()) {
    throw InvalidInput("model holds only its first layer; stream the layers from the container");
  }
  SampleMatrix Z = normalize_columns(X);
  for (const Layer& layer : model.layers) advance_layer(Z, layer, model.lambda);
  return Z;
}

Vector forward_sample(const ReduNetModel& model, const Vector& x) {
  return forward_batch(model, x).col(0);
}

}  // namespace redunet
