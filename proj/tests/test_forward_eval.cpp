#include "redunet/errors.hpp"
#include "redunet/forward_eval.hpp"
#include "redunet/subspace_classifier.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace redunet;
using namespace redunet::testing;

namespace {

BuildResult fixture_model(std::size_t depth = 10) {
  const auto data = equivalence_fixture();
  BuildConfig cfg;
  cfg.depth = depth;
  return build_redunet(data.features, data.labels, cfg);
}

Layer diagonal_layer(std::span<const double> scales) {
  Layer layer;
  layer.eta = 0.5;
  layer.alpha = 1.0;
  layer.E = Matrix::Identity(2, 2);
  for (double s : scales) {
    layer.C.push_back(s * Matrix::Identity(2, 2));
    layer.gamma.push_back(1.0 / static_cast<double>(scales.size()));
    layer.alpha_j.push_back(1.0);
  }
  return layer;
}

}  // namespace

TEST_CASE("membership estimate") {
  const Vector z = Vector::Unit(2, 0);
  SUBCASE("equal norms give the uniform distribution") {
    const double s[] = {0.3, 0.3, 0.3};
    const auto p = estimate_membership(z, diagonal_layer(s), 1.0).probs;
    for (Index j = 0; j < 3; ++j) CHECK(p(j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("single class") {
    const double s[] = {0.7};
    CHECK(estimate_membership(z, diagonal_layer(s), 1.0).probs(0) == 1.0);
  }
  SUBCASE("two classes with norms 0.1 and 0.6") {
    const double s[] = {0.1, 0.6};
    const auto p = estimate_membership(z, diagonal_layer(s), 1.0).probs;
    // exponents -lambda k ||C z|| = -0.2 and -1.2
    const double oracle = std::exp(-0.2) / (std::exp(-0.2) + std::exp(-1.2));
    CHECK(p(0) == doctest::Approx(oracle).epsilon(1e-15));
    CHECK(p(0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-14));
    CHECK(p(0) == doctest::Approx(0.73106).epsilon(1e-5));
  }
  SUBCASE("large exponents stay finite") {
    const double s[] = {1e4, 2e4};
    const auto p = estimate_membership(z, diagonal_layer(s), 50.0).probs;
    CHECK(p(0) == 1.0);
    CHECK(p(1) == 0.0);
  }
  SUBCASE("non-finite sample") {
    const double s[] = {0.1, 0.6};
    Vector bad = z;
    bad(1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(estimate_membership(bad, diagonal_layer(s), 1.0), InvalidInput);
  }
}

TEST_CASE("probabilities sum to one at every layer") {
  const auto model = fixture_model(6).model;
  const Matrix X = random_matrix(20, 50, 77);
  Matrix Z = normalize_columns(X);
  for (const Layer& layer : model.layers) {
    const Matrix P = estimate_membership_batch(Z, layer, model.lambda);
    for (Index c = 0; c < P.cols(); ++c) {
      CHECK(std::abs(P.col(c).sum() - 1.0) <= 1e-12);
      CHECK(P.col(c).minCoeff() >= 0.0);
      const auto single = estimate_membership(Z.col(c), layer, model.lambda).probs;
      CHECK((single - P.col(c)).cwiseAbs().maxCoeff() <= 1e-14);
    }
    advance_layer(Z, layer, model.lambda);
  }
}

TEST_CASE("forward pass") {
  const auto model = fixture_model().model;
  const Matrix X = random_matrix(20, 100, 5);

  SUBCASE("zero layers only normalize") {
    ReduNetModel empty = model;
    empty.layers.clear();
    empty.step_sizes.clear();
    const Vector x = X.col(0);
    CHECK((forward_sample(empty, x) - x / x.norm()).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("unit norm output and scale invariance") {
    for (Index c = 0; c < 10; ++c) {
      const Vector x = X.col(c);
      const Vector z = forward_sample(model, x);
      CHECK(std::abs(z.norm() - 1.0) <= 1e-12);
      const Vector z3 = forward_sample(model, 3.0 * x);
      CHECK((z3 - z).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  SUBCASE("batch equals per-sample calls bit-exactly") {
    const Matrix B = forward_batch(model, X);
    for (Index c = 0; c < X.cols(); ++c) {
      const Vector z = forward_sample(model, X.col(c));
      CHECK((B.col(c) - z).cwiseAbs().maxCoeff() == 0.0);
    }
    const Matrix one = forward_batch(model, X.leftCols(1));
    CHECK((one.col(0) - B.col(0)).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("column permutation commutes") {
    std::vector<Index> perm(100);
    for (Index i = 0; i < 100; ++i) perm[static_cast<std::size_t>(i)] = (i * 37) % 100;
    const Matrix B = forward_batch(model, X);
    const Matrix Bp = forward_batch(model, X(Eigen::all, perm));
    CHECK((Bp - B(Eigen::all, perm)).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("streamed layers equal the batch transform") {
    Matrix Z = normalize_columns(X);
    for (const Layer& layer : model.layers) advance_layer(Z, layer, model.lambda);
    CHECK((Z - forward_batch(model, X)).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(forward_sample(model, Vector::Zero(20)), DegenerateInput);
    CHECK_THROWS_AS(forward_sample(model, Vector::Ones(7)), InvalidInput);
    ReduNetModel compact = model;
    compact.layers.resize(1);
    CHECK_THROWS_AS(forward_batch(compact, X), InvalidInput);
  }
}

TEST_CASE("training samples land near their class subspace") {
  // Low-noise mixture: every training sample is within a few degrees of its
  // class subspace to begin with.
  const std::vector<Index> counts(4, 50);
  const auto data = synth_subspace_mixture(20, 4, 3, counts, 0.01, 7);
  BuildConfig cfg;
  cfg.depth = 10;
  const auto model = build_redunet(data.features, data.labels, cfg).model;
  const auto subspaces = fit_subspaces(model, 3);
  const Matrix Z = forward_batch(model, data.features);

  Matrix known = normalize_classwise(data.features, data.labels);
  for (const Layer& layer : model.layers) known = layer_forward_train(known, data.labels, layer);

  const double limit = std::cos(10.0 * std::numbers::pi / 180.0);
  for (Index c = 0; c < Z.cols(); ++c) {
    const std::size_t j = data.labels.index_of(data.labels.labels()[static_cast<std::size_t>(c)]);
    // cos of the principal angle between z and span(U) is ||U^T z|| for unit z.
    CHECK((subspaces.bases[j].transpose() * Z.col(c)).norm() >= limit);
    const Vector t = known.col(c).normalized();
    CHECK(std::abs(t.dot(Z.col(c))) >= limit);
  }
}

TEST_CASE("true-class confidence grows on separable data (reported)") {
  const auto data = equivalence_fixture();
  const std::vector<Index> counts(4, 50);
  const auto held_out = SubspaceMixture::random(20, 4, 3, 7).sample(counts, 0.05, 99);
  BuildConfig cfg;
  cfg.depth = 10;
  const auto model = build_redunet(data.features, data.labels, cfg).model;
  Matrix Z = normalize_columns(held_out.features);
  const Matrix P0 = estimate_membership_batch(Z, model.layers.front(), model.lambda);
  for (const Layer& layer : model.layers) advance_layer(Z, layer, model.lambda);
  const Matrix PL = estimate_membership_batch(Z, model.layers.back(), model.lambda);
  std::size_t grew = 0;
  for (Index c = 0; c < Z.cols(); ++c) {
    const auto j = static_cast<Index>(model.class_index(held_out.labels.labels()[static_cast<std::size_t>(c)]));
    grew += PL(j, c) > P0(j, c) ? 1 : 0;
  }
  const double frac = static_cast<double>(grew) / static_cast<double>(Z.cols());
  MESSAGE("true-class confidence increased for " << frac * 100 << "% of held-out samples");
  CHECK(frac >= 0.0);
}
