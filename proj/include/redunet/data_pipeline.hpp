#pragma once

// Dataset ingestion (MNIST IDX, CIFAR-10 binary batches), preprocessing into
// feature matrices, class-incremental task splits, and seeded synthetic
// subspace mixtures.

#include "redunet/incremental_merge.hpp"
#include "redunet/rate_objective.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace redunet {

/// n images of height x width x channels bytes, stored channel-planar per image.
struct RawDataset {
  std::string name;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<ClassId> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_bytes() const noexcept { return height * width * channels; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
};

struct LabeledData {
  SampleMatrix features;
  LabelAssignment labels;
};

/// Deterministic generator: std::mt19937_64 plus fixed conversions to uniform
/// and normal variates, so seeded streams are identical on every platform
/// (the std distributions are implementation-defined).
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/box-muller";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();                    // [0, 1)
  double normal();                     // N(0, 1)
  std::uint64_t below(std::uint64_t n);  // [0, n)

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

/// MNIST IDX pair: unsigned-byte image tensor (magic 0x00000803) and label
/// vector (magic 0x00000801), big-endian dimension fields.
RawDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// CIFAR-10 binary batches: 3073-byte records (label byte, then 32x32 planar
/// R, G, B). Files are concatenated in the given order.
RawDataset load_cifar_binary(std::span<const std::filesystem::path> paths);

/// 28x28x1 images to 784-dimensional columns scaled to [0, 1].
LabeledData preprocess_mnist(const RawDataset& raw);

/// Block-averages each factor x factor patch (rounded to the nearest byte).
RawDataset downscale(const RawDataset& raw, std::size_t factor);

/// Random 3x3 Gaussian filters, one weight block per (kernel, input channel).
struct KernelBank {
  std::uint64_t seed = 0;
  std::size_t num_kernels = 5;
  std::size_t in_channels = 3;
  static constexpr std::size_t kSize = 3;
  std::vector<double> weights;  // [kernel][channel][dy][dx]

  static KernelBank generate(std::uint64_t seed, std::size_t num_kernels = 5,
                             std::size_t in_channels = 3);
  double at(std::size_t kernel, std::size_t channel, std::size_t dy, std::size_t dx) const {
    return weights[((kernel * in_channels + channel) * kSize + dy) * kSize + dx];
  }
};

enum class Split { kTrain, kTest };

struct CifarFeatures {
  SampleMatrix features;
  LabelAssignment labels;
  Vector mean;  // per-pixel training mean (channel-planar), in [0, 1] units
};

/// Scales to [0, 1], subtracts the training mean image, convolves with the
/// bank (stride 1, zero padding, per-channel responses summed per kernel) and
/// flattens kernel-major to H*W*num_kernels. Training data computes its own
/// mean unless one is supplied; test data requires the training mean.
CifarFeatures preprocess_cifar(const RawDataset& raw, const KernelBank& bank,
                               const std::optional<Vector>& train_mean, Split split);

/// Same-size correlation of one channel-planar image with the bank.
Vector lift_image(std::span<const double> image, std::size_t height, std::size_t width,
                  const KernelBank& bank);

struct TaskSplit {
  std::vector<TaskBatch> tasks;
  std::size_t classes_per_task = 0;
};

/// Groups classes (in `class_order`) into consecutive tasks. Each task keeps
/// its samples in their original relative order and registers its classes in
/// `class_order` order.
TaskSplit split_tasks(const SampleMatrix& data, const LabelAssignment& labels,
                      std::size_t classes_per_task, std::span<const ClassId> class_order);

/// Columns whose labels are in `classes`, in original order, registered in
/// `classes` order.
LabeledData select_classes(const SampleMatrix& data, const LabelAssignment& labels,
                           std::span<const ClassId> classes);

/// Indices of at most `cap` seeded-random samples per class (classes visited
/// in ascending identifier order), sorted ascending. cap == 0 keeps all.
std::vector<std::size_t> subsample_indices(std::span<const ClassId> labels, std::size_t cap,
                                           std::uint64_t seed);

/// Records at the given indices, in that order.
RawDataset select_records(const RawDataset& raw, std::span<const std::size_t> indices);

/// Keeps at most `cap` seeded-random samples per class, preserving order.
LabeledData subsample_per_class(const SampleMatrix& data, const LabelAssignment& labels,
                                std::size_t cap, std::uint64_t seed);

/// Concatenates labeled blocks column-wise; the registry is the concatenation
/// of the block registries.
LabeledData concatenate(std::span<const LabeledData> parts);

/// k random mutually orthogonal r-dimensional subspaces of R^d.
class SubspaceMixture {
 public:
  static SubspaceMixture random(Index dim, std::size_t classes, Index rank, std::uint64_t seed);

  /// Class j gets counts[j] samples U_j c + noise * g with c, g standard normal.
  /// Class identifiers are 0..k-1.
  LabeledData sample(std::span<const Index> counts, double noise, std::uint64_t seed) const;

  const std::vector<Matrix>& bases() const noexcept { return bases_; }

 private:
  std::vector<Matrix> bases_;
};

/// Single-call convenience over SubspaceMixture (subspaces from `seed`,
/// samples from `seed + 1`).
LabeledData synth_subspace_mixture(Index dim, std::size_t classes, Index rank,
                                   std::span<const Index> counts, double noise, std::uint64_t seed);

}  // namespace redunet
