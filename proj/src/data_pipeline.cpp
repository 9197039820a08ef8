#include "redunet/data_pipeline.hpp"

#include "redunet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <string>

namespace redunet {

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw InvalidInput("Rng::below(0)");
  const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t limit = max - max % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw InvalidInput("cannot stat " + path.string() + ": " + ec.message());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (static_cast<std::uintmax_t>(in.gcount()) != size) {
    throw FormatError(path.string() + ": short read", static_cast<std::uint64_t>(in.gcount()));
  }
  return bytes;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset) {
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarImageBytes = kCifarSide * kCifarSide * 3;
constexpr std::size_t kCifarRecord = 1 + kCifarImageBytes;
constexpr ClassId kMaxLabel = 9;

}  // namespace

RawDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const std::string iname = images.string();
  if (img.size() < 16) throw FormatError(iname + ": truncated IDX header", img.size());
  if (read_be32(img, 0) != kIdxImageMagic) {
    throw FormatError(iname + ": not an IDX unsigned-byte 3-D tensor", 0);
  }
  const std::uint64_t n = read_be32(img, 4);
  const std::uint64_t rows = read_be32(img, 8);
  const std::uint64_t cols = read_be32(img, 12);
  const std::uint64_t expected = 16 + n * rows * cols;
  if (img.size() < expected) throw FormatError(iname + ": truncated image payload", img.size());
  if (img.size() > expected) throw FormatError(iname + ": trailing bytes after payload", expected);

  const auto lab = read_file(labels);
  const std::string lname = labels.string();
  if (lab.size() < 8) throw FormatError(lname + ": truncated IDX header", lab.size());
  if (read_be32(lab, 0) != kIdxLabelMagic) {
    throw FormatError(lname + ": not an IDX unsigned-byte label vector", 0);
  }
  if (read_be32(lab, 4) != n) throw FormatError(lname + ": label count differs from image count", 4);
  if (lab.size() < 8 + n) throw FormatError(lname + ": truncated label payload", lab.size());
  if (lab.size() > 8 + n) throw FormatError(lname + ": trailing bytes after payload", 8 + n);

  RawDataset out;
  out.name = "mnist";
  out.height = rows;
  out.width = cols;
  out.channels = 1;
  out.labels.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const ClassId label = lab[8 + i];
    if (label > kMaxLabel) throw FormatError(lname + ": label outside 0-9", 8 + i);
    out.labels.push_back(label);
  }
  out.pixels.assign(img.begin() + 16, img.end());
  return out;
}

RawDataset load_cifar_binary(std::span<const std::filesystem::path> paths) {
  if (paths.empty()) throw InvalidInput("no CIFAR batch files given");
  RawDataset out;
  out.name = "cifar10";
  out.height = kCifarSide;
  out.width = kCifarSide;
  out.channels = 3;
  for (const auto& path : paths) {
    const auto bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
      throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                            " is not a multiple of the 3073-byte record",
                        bytes.size() - bytes.size() % kCifarRecord);
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    for (std::size_t i = 0; i < n; ++i) {
      const ClassId label = bytes[i * kCifarRecord];
      if (label > kMaxLabel) throw FormatError(path.string() + ": label outside 0-9", i * kCifarRecord);
    }
    out.pixels.reserve(out.pixels.size() + n * kCifarImageBytes);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* rec = bytes.data() + i * kCifarRecord;
      out.labels.push_back(rec[0]);
      out.pixels.insert(out.pixels.end(), rec + 1, rec + kCifarRecord);
    }
  }
  return out;
}

LabeledData preprocess_mnist(const RawDataset& raw) {
  if (raw.height != 28 || raw.width != 28 || raw.channels != 1) {
    throw InvalidInput("MNIST preprocessing expects 28x28x1 images");
  }
  if (raw.size() == 0) throw InvalidInput("empty dataset");
  const Index d = 784;
  SampleMatrix X(d, static_cast<Index>(raw.size()));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto img = raw.image(i);
    for (Index p = 0; p < d; ++p) X(p, static_cast<Index>(i)) = img[static_cast<std::size_t>(p)] / 255.0;
  }
  return {std::move(X), LabelAssignment(raw.labels)};
}

RawDataset downscale(const RawDataset& raw, std::size_t factor) {
  if (factor == 0 || raw.height % factor != 0 || raw.width % factor != 0) {
    throw InvalidInput("downscale factor must divide the image size");
  }
  if (factor == 1) return raw;
  RawDataset out;
  out.name = raw.name;
  out.height = raw.height / factor;
  out.width = raw.width / factor;
  out.channels = raw.channels;
  out.labels = raw.labels;
  out.pixels.reserve(raw.size() * out.image_bytes());
  const std::size_t cells = factor * factor;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto img = raw.image(i);
    for (std::size_t c = 0; c < raw.channels; ++c) {
      for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
          std::size_t sum = 0;
          for (std::size_t dy = 0; dy < factor; ++dy) {
            for (std::size_t dx = 0; dx < factor; ++dx) {
              sum += img[(c * raw.height + y * factor + dy) * raw.width + x * factor + dx];
            }
          }
          out.pixels.push_back(static_cast<std::uint8_t>((sum + cells / 2) / cells));
        }
      }
    }
  }
  return out;
}

KernelBank KernelBank::generate(std::uint64_t seed, std::size_t num_kernels, std::size_t in_channels) {
  if (num_kernels == 0 || in_channels == 0) throw InvalidInput("kernel bank needs kernels and channels");
  KernelBank bank;
  bank.seed = seed;
  bank.num_kernels = num_kernels;
  bank.in_channels = in_channels;
  Rng rng(seed);
  bank.weights.resize(num_kernels * in_channels * kSize * kSize);
  for (double& w : bank.weights) w = rng.normal();
  return bank;
}

Vector lift_image(std::span<const double> image, std::size_t height, std::size_t width,
                  const KernelBank& bank) {
  if (image.size() != height * width * bank.in_channels) {
    throw InvalidInput("image size does not match the kernel bank's channel count");
  }
  const std::size_t plane = height * width;
  Vector out = Vector::Zero(static_cast<Index>(plane * bank.num_kernels));
  const auto h = static_cast<std::ptrdiff_t>(height);
  const auto w = static_cast<std::ptrdiff_t>(width);
  for (std::size_t k = 0; k < bank.num_kernels; ++k) {
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t c = 0; c < bank.in_channels; ++c) {
          for (std::size_t dy = 0; dy < KernelBank::kSize; ++dy) {
            const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(dy) - 1;
            if (sy < 0 || sy >= h) continue;
            for (std::size_t dx = 0; dx < KernelBank::kSize; ++dx) {
              const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(dx) - 1;
              if (sx < 0 || sx >= w) continue;
              acc += bank.at(k, c, dy, dx) *
                     image[c * plane + static_cast<std::size_t>(sy * w + sx)];
            }
          }
        }
        out(static_cast<Index>(k * plane + static_cast<std::size_t>(y * w + x))) = acc;
      }
    }
  }
  return out;
}

CifarFeatures preprocess_cifar(const RawDataset& raw, const KernelBank& bank,
                               const std::optional<Vector>& train_mean, Split split) {
  if (raw.channels != bank.in_channels) {
    throw InvalidInput("image channel count does not match the kernel bank");
  }
  if (raw.size() == 0) throw InvalidInput("empty dataset");
  const std::size_t bytes = raw.image_bytes();

  CifarFeatures out;
  if (train_mean) {
    if (train_mean->size() != static_cast<Index>(bytes)) {
      throw InvalidInput("mean image size does not match the images");
    }
    out.mean = *train_mean;
  } else if (split == Split::kTest) {
    throw InvalidInput("test preprocessing needs the training mean image");
  } else {
    out.mean = Vector::Zero(static_cast<Index>(bytes));
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const auto img = raw.image(i);
      for (std::size_t p = 0; p < bytes; ++p) out.mean(static_cast<Index>(p)) += img[p] / 255.0;
    }
    out.mean /= static_cast<double>(raw.size());
  }

  const Index d = static_cast<Index>(raw.height * raw.width * bank.num_kernels);
  out.features.resize(d, static_cast<Index>(raw.size()));
  std::vector<double> centered(bytes);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto img = raw.image(i);
    for (std::size_t p = 0; p < bytes; ++p) centered[p] = img[p] / 255.0 - out.mean(static_cast<Index>(p));
    out.features.col(static_cast<Index>(i)) = lift_image(centered, raw.height, raw.width, bank);
  }
  out.labels = LabelAssignment(raw.labels);
  return out;
}

LabeledData select_classes(const SampleMatrix& data, const LabelAssignment& labels,
                           std::span<const ClassId> classes) {
  if (static_cast<std::size_t>(data.cols()) != labels.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  std::vector<Index> cols;
  std::vector<ClassId> kept;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const ClassId id = labels.labels()[i];
    if (std::find(classes.begin(), classes.end(), id) != classes.end()) {
      cols.push_back(static_cast<Index>(i));
      kept.push_back(id);
    }
  }
  if (cols.empty()) throw InvalidInput("none of the requested classes are present");
  return {data(Eigen::all, cols),
          LabelAssignment(std::move(kept), std::vector<ClassId>(classes.begin(), classes.end()))};
}

TaskSplit split_tasks(const SampleMatrix& data, const LabelAssignment& labels,
                      std::size_t classes_per_task, std::span<const ClassId> class_order) {
  if (classes_per_task == 0) throw InvalidInput("classes_per_task must be positive");
  if (class_order.size() % classes_per_task != 0) {
    throw InvalidInput("class order does not divide into tasks of " +
                       std::to_string(classes_per_task) + " classes");
  }
  auto sorted_order = std::vector<ClassId>(class_order.begin(), class_order.end());
  std::sort(sorted_order.begin(), sorted_order.end());
  auto present = labels.registry();
  std::sort(present.begin(), present.end());
  if (sorted_order != present) {
    throw InvalidInput("class order must be a permutation of the classes present");
  }
  TaskSplit split;
  split.classes_per_task = classes_per_task;
  for (std::size_t start = 0; start < class_order.size(); start += classes_per_task) {
    auto part = select_classes(data, labels, class_order.subspan(start, classes_per_task));
    split.tasks.push_back({std::move(part.features), std::move(part.labels)});
  }
  return split;
}

std::vector<std::size_t> subsample_indices(std::span<const ClassId> labels, std::size_t cap,
                                           std::uint64_t seed) {
  std::vector<std::size_t> keep;
  if (cap == 0) {
    keep.resize(labels.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
    return keep;
  }
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed);
  for (auto& [cls, idx] : by_class) {
    const std::size_t take = std::min(cap, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      const auto pick = i + static_cast<std::size_t>(rng.below(idx.size() - i));
      std::swap(idx[i], idx[pick]);
    }
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

RawDataset select_records(const RawDataset& raw, std::span<const std::size_t> indices) {
  RawDataset out;
  out.name = raw.name;
  out.height = raw.height;
  out.width = raw.width;
  out.channels = raw.channels;
  out.labels.reserve(indices.size());
  out.pixels.reserve(indices.size() * raw.image_bytes());
  for (std::size_t i : indices) {
    if (i >= raw.size()) throw InvalidInput("record index out of range");
    out.labels.push_back(raw.labels[i]);
    const auto img = raw.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

LabeledData subsample_per_class(const SampleMatrix& data, const LabelAssignment& labels,
                                std::size_t cap, std::uint64_t seed) {
  if (static_cast<std::size_t>(data.cols()) != labels.size()) {
    throw InvalidInput("label count does not match sample count");
  }
  const auto keep = subsample_indices(labels.labels(), cap, seed);
  std::vector<Index> cols(keep.begin(), keep.end());
  std::vector<ClassId> kept_labels;
  kept_labels.reserve(keep.size());
  for (std::size_t c : keep) kept_labels.push_back(labels.labels()[c]);
  return {data(Eigen::all, cols), LabelAssignment(std::move(kept_labels), labels.registry())};
}

LabeledData concatenate(std::span<const LabeledData> parts) {
  if (parts.empty()) throw InvalidInput("nothing to concatenate");
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.features.rows() != parts.front().features.rows()) {
      throw InvalidInput("blocks have different feature dimensions");
    }
    cols += p.features.cols();
  }
  SampleMatrix X(parts.front().features.rows(), cols);
  std::vector<ClassId> labels;
  std::vector<ClassId> registry;
  Index at = 0;
  for (const auto& p : parts) {
    X.middleCols(at, p.features.cols()) = p.features;
    at += p.features.cols();
    labels.insert(labels.end(), p.labels.labels().begin(), p.labels.labels().end());
    registry.insert(registry.end(), p.labels.registry().begin(), p.labels.registry().end());
  }
  return {std::move(X), LabelAssignment(std::move(labels), std::move(registry))};
}

SubspaceMixture SubspaceMixture::random(Index dim, std::size_t classes, Index rank,
                                        std::uint64_t seed) {
  if (dim < 1 || classes < 1 || rank < 1) throw InvalidInput("mixture dimensions must be positive");
  const Index total = static_cast<Index>(classes) * rank;
  if (total > dim) throw InvalidInput("k * r exceeds the ambient dimension");
  Rng rng(seed);
  Matrix G(dim, total);
  for (Index c = 0; c < total; ++c) {
    for (Index r = 0; r < dim; ++r) G(r, c) = rng.normal();
  }
  const Matrix Q = Eigen::HouseholderQR<Matrix>(G).householderQ() * Matrix::Identity(dim, total);
  SubspaceMixture mix;
  for (std::size_t j = 0; j < classes; ++j) {
    mix.bases_.push_back(Q.middleCols(static_cast<Index>(j) * rank, rank));
  }
  return mix;
}

LabeledData SubspaceMixture::sample(std::span<const Index> counts, double noise,
                                    std::uint64_t seed) const {
  if (counts.size() != bases_.size()) throw InvalidInput("need one sample count per class");
  if (!(noise >= 0.0)) throw InvalidInput("noise must be non-negative");
  const Index d = bases_.front().rows();
  const Index r = bases_.front().cols();
  Index total = 0;
  for (Index c : counts) {
    if (c < 1) throw InvalidInput("every class needs at least one sample");
    total += c;
  }
  Rng rng(seed);
  SampleMatrix X(d, total);
  std::vector<ClassId> labels;
  labels.reserve(static_cast<std::size_t>(total));
  Index col = 0;
  Vector coeff(r);
  Vector jitter(d);
  for (std::size_t j = 0; j < bases_.size(); ++j) {
    for (Index i = 0; i < counts[j]; ++i, ++col) {
      for (Index a = 0; a < r; ++a) coeff(a) = rng.normal();
      X.col(col) = bases_[j] * coeff;
      if (noise > 0.0) {
        for (Index a = 0; a < d; ++a) jitter(a) = rng.normal();
        X.col(col) += noise * jitter;
      }
      labels.push_back(static_cast<ClassId>(j));
    }
  }
  return {std::move(X), LabelAssignment(std::move(labels))};
}

LabeledData synth_subspace_mixture(Index dim, std::size_t classes, Index rank,
                                   std::span<const Index> counts, double noise, std::uint64_t seed) {
  return SubspaceMixture::random(dim, classes, rank, seed).sample(counts, noise, seed + 1);
}

}  // namespace redunet
