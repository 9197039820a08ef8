#pragma once

// Test-time transform: samples are pushed through the layers with the class
// membership replaced by a softmax estimate.

#include "redunet/net_builder.hpp"

namespace redunet {

struct MembershipEstimate {
  Vector probs;  // one entry per class, sums to 1
};

/// pi_j(z) = softmax_j(-lambda k ||C^j z||), evaluated with max-subtraction.
MembershipEstimate estimate_membership(const Vector& z, const Layer& layer, double lambda);

/// z_0 = x/||x||; z <- z + eta (E z - sum_j gamma_j pi_j(z) C^j z), then back to unit norm.
Vector forward_sample(const ReduNetModel& model, const Vector& x);

/// Column-wise forward_sample; bit-identical to per-sample calls.
SampleMatrix forward_batch(const ReduNetModel& model, const SampleMatrix& X);

/// Unit-norm columns; throws DegenerateInput on a zero column.
SampleMatrix normalize_columns(const SampleMatrix& X);

/// Applies one test-time layer to unit-norm columns in place. Used to stream
/// samples through layers as they are built or read from disk. The softmax
/// scale k is the layer's class count.
void advance_layer(SampleMatrix& Z, const Layer& layer, double lambda);

/// Membership estimates for every column (k x n).
Matrix estimate_membership_batch(const SampleMatrix& Z, const Layer& layer, double lambda);

}  // namespace redunet
