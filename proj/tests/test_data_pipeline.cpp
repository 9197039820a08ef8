#include "redunet/data_pipeline.hpp"
#include "redunet/errors.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <numeric>

using namespace redunet;
using namespace redunet::testing;

namespace {

using Bytes = std::vector<std::uint8_t>;

void put_be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const std::filesystem::path& p, const Bytes& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Bytes idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  Bytes b;
  put_be32(b, 0x00000803);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back(static_cast<std::uint8_t>(i % 256));
  return b;
}

Bytes idx_labels(std::uint32_t n) {
  Bytes b;
  put_be32(b, 0x00000801);
  put_be32(b, n);
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(i % 10));
  return b;
}

Bytes cifar_record(std::uint8_t label, std::uint8_t fill) {
  Bytes b{label};
  for (std::size_t i = 0; i < 3072; ++i) b.push_back(static_cast<std::uint8_t>((fill + i) % 256));
  return b;
}

RawDataset blank(std::size_t h, std::size_t w, std::size_t c, std::size_t n) {
  RawDataset raw;
  raw.height = h;
  raw.width = w;
  raw.channels = c;
  raw.pixels.assign(h * w * c * n, 0);
  for (std::size_t i = 0; i < n; ++i) raw.labels.push_back(static_cast<ClassId>(i % 10));
  return raw;
}

KernelBank single_kernel(std::span<const double> w9) {
  KernelBank bank;
  bank.num_kernels = 1;
  bank.in_channels = 1;
  bank.weights.assign(w9.begin(), w9.end());
  return bank;
}

}  // namespace

TEST_CASE("IDX loading") {
  const auto dir = scratch_dir("idx");
  const auto img = dir / "images";
  const auto lab = dir / "labels";
  write_bytes(img, idx_images(10, 28, 28));
  write_bytes(lab, idx_labels(10));

  const RawDataset raw = load_idx(img, lab);
  CHECK(raw.size() == 10);
  CHECK(raw.height == 28);
  CHECK(raw.width == 28);
  CHECK(raw.channels == 1);
  CHECK(raw.labels[7] == 7);
  CHECK(raw.image(1)[0] == 784 % 256);

  SUBCASE("preprocessing") {
    const auto data = preprocess_mnist(raw);
    CHECK(data.features.rows() == 784);
    CHECK(data.features.cols() == 10);
    CHECK(data.features(0, 1) == (784 % 256) / 255.0);
    RawDataset bright = raw;
    std::fill(bright.pixels.begin(), bright.pixels.end(), 255);
    CHECK(preprocess_mnist(bright).features.minCoeff() == 1.0);
    RawDataset dark = raw;
    std::fill(dark.pixels.begin(), dark.pixels.end(), 0);
    CHECK(preprocess_mnist(dark).features.col(0).norm() == 0.0);
  }

  SUBCASE("truncated image file") {
    auto b = idx_images(10, 28, 28);
    b.resize(b.size() - 5);
    write_bytes(img, b);
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
  }
  SUBCASE("truncated header") {
    write_bytes(img, Bytes{0, 0, 8, 3, 0, 0});
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
  }
  SUBCASE("bad magic") {
    auto b = idx_images(10, 28, 28);
    b[3] = 0x01;
    write_bytes(img, b);
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto b = idx_images(10, 28, 28);
    b.push_back(0);
    write_bytes(img, b);
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
  }
  SUBCASE("label out of range") {
    auto b = idx_labels(10);
    b[8 + 4] = 10;
    write_bytes(lab, b);
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
  }
  SUBCASE("label count mismatch") {
    write_bytes(lab, idx_labels(9));
    CHECK_THROWS_AS(load_idx(img, lab), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx(dir / "nope", lab), InvalidInput);
  }
}

TEST_CASE("CIFAR binary loading") {
  const auto dir = scratch_dir("cifar");
  const auto one = dir / "one.bin";
  write_bytes(one, cifar_record(6, 0));
  const std::vector<std::filesystem::path> paths{one};
  const RawDataset raw = load_cifar_binary(paths);
  CHECK(raw.size() == 1);
  CHECK(raw.labels[0] == 6);
  CHECK(raw.image_bytes() == 3072);
  CHECK(raw.image(0)[1024] == 1024 % 256);  // first green byte

  SUBCASE("several records over several files") {
    Bytes b;
    for (std::uint8_t i = 0; i < 4; ++i) {
      const auto r = cifar_record(i, i);
      b.insert(b.end(), r.begin(), r.end());
    }
    const auto four = dir / "four.bin";
    write_bytes(four, b);
    CHECK(std::filesystem::file_size(four) / 3073 == 4);
    const std::vector<std::filesystem::path> both{four, one};
    const RawDataset all = load_cifar_binary(both);
    CHECK(all.size() == 5);
    CHECK(all.labels == std::vector<ClassId>{0, 1, 2, 3, 6});
    const RawDataset again = load_cifar_binary(both);
    CHECK(again.pixels == all.pixels);
    CHECK(again.labels == all.labels);
  }
  SUBCASE("size not a multiple of the record") {
    auto b = cifar_record(1, 0);
    b.push_back(0);
    write_bytes(one, b);
    CHECK_THROWS_AS(load_cifar_binary(paths), FormatError);
  }
  SUBCASE("bad label") {
    write_bytes(one, cifar_record(12, 0));
    CHECK_THROWS_AS(load_cifar_binary(paths), FormatError);
  }
}

TEST_CASE("downscaling") {
  RawDataset raw = blank(4, 4, 1, 1);
  std::iota(raw.pixels.begin(), raw.pixels.end(), 0);
  const RawDataset half = downscale(raw, 2);
  CHECK(half.height == 2);
  CHECK(half.width == 2);
  // top-left block {0, 1, 4, 5} averages to 2.5, rounded to 3
  CHECK(half.pixels == std::vector<std::uint8_t>{3, 5, 11, 13});
  CHECK(downscale(raw, 1).pixels == raw.pixels);
  CHECK_THROWS_AS(downscale(raw, 3), InvalidInput);
  CHECK_THROWS_AS(downscale(raw, 0), InvalidInput);
}

TEST_CASE("convolutional lifting") {
  std::vector<double> image(16);
  std::iota(image.begin(), image.end(), 1.0);  // 1..16 row-major

  SUBCASE("center tap is the identity") {
    const double w[9] = {0, 0, 0, 0, 1, 0, 0, 0, 0};
    const Vector out = lift_image(image, 4, 4, single_kernel(w));
    for (Index i = 0; i < 16; ++i) CHECK(out(i) == image[static_cast<std::size_t>(i)]);
  }
  SUBCASE("box filter with zero padding") {
    const double w[9] = {1, 1, 1, 1, 1, 1, 1, 1, 1};
    const Vector out = lift_image(image, 4, 4, single_kernel(w));
    CHECK(out(0) == 1 + 2 + 5 + 6);
    CHECK(out(5) == 1 + 2 + 3 + 5 + 6 + 7 + 9 + 10 + 11);
    CHECK(out(15) == 11 + 12 + 15 + 16);
  }
  SUBCASE("correlation orientation") {
    const double w[9] = {0, 0, 0, 0, 0, 1, 0, 0, 0};  // right neighbour
    const Vector out = lift_image(image, 4, 4, single_kernel(w));
    CHECK(out(0) == 2);
    CHECK(out(3) == 0);
  }
  SUBCASE("wrong image size") {
    const double w[9] = {};
    CHECK_THROWS_AS(lift_image(image, 3, 4, single_kernel(w)), InvalidInput);
  }
}

TEST_CASE("CIFAR preprocessing") {
  const KernelBank bank = KernelBank::generate(3);
  CHECK(bank.weights.size() == 5 * 3 * 9);
  const KernelBank same = KernelBank::generate(3);
  CHECK(same.weights == bank.weights);
  CHECK(KernelBank::generate(4).weights != bank.weights);

  const RawDataset zero = blank(32, 32, 3, 2);
  const Vector zero_mean = Vector::Zero(3072);
  const auto lifted = preprocess_cifar(zero, bank, zero_mean, Split::kTrain);
  CHECK(lifted.features.rows() == 5120);
  CHECK(lifted.features.cols() == 2);
  CHECK(lifted.features.cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("training mean is subtracted") {
    RawDataset raw = blank(8, 8, 3, 3);
    Rng rng(5);
    for (auto& p : raw.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    const auto train = preprocess_cifar(raw, bank, std::nullopt, Split::kTrain);
    CHECK(train.features.rows() == 8 * 8 * 5);
    CHECK(std::abs(train.features.rowwise().sum().cwiseAbs().maxCoeff()) <= 1e-10);
    const auto test = preprocess_cifar(raw, bank, train.mean, Split::kTest);
    CHECK(max_abs(test.features, train.features) == 0.0);
    CHECK_THROWS_AS(preprocess_cifar(raw, bank, std::nullopt, Split::kTest), InvalidInput);
    CHECK_THROWS_AS(preprocess_cifar(raw, bank, Vector::Zero(5), Split::kTest), InvalidInput);
  }
}

TEST_CASE("task splits") {
  const std::vector<Index> counts(10, 3);
  const auto data = synth_subspace_mixture(40, 10, 2, counts, 0.1, 1);
  std::vector<ClassId> natural(10);
  std::iota(natural.begin(), natural.end(), 0);

  SUBCASE("natural order in pairs") {
    const auto split = split_tasks(data.features, data.labels, 2, natural);
    REQUIRE(split.tasks.size() == 5);
    for (std::size_t t = 0; t < 5; ++t) {
      const auto c = static_cast<ClassId>(2 * t);
      CHECK(split.tasks[t].labels.registry() == std::vector<ClassId>{c, c + 1});
      CHECK(split.tasks[t].features.cols() == 6);
    }
  }
  SUBCASE("singletons") {
    const auto split = split_tasks(data.features, data.labels, 1, natural);
    CHECK(split.tasks.size() == 10);
    CHECK(split.tasks[9].labels.registry() == std::vector<ClassId>{9});
  }
  SUBCASE("permuted order") {
    const std::vector<ClassId> order{3, 7, 0, 9, 1, 2, 4, 5, 6, 8};
    const auto split = split_tasks(data.features, data.labels, 2, order);
    CHECK(split.tasks[0].labels.registry() == std::vector<ClassId>{3, 7});
    CHECK(split.tasks[1].labels.registry() == std::vector<ClassId>{0, 9});
    // samples keep their original relative order
    const auto& t0 = split.tasks[0];
    Index k = 0;
    for (Index c = 0; c < data.features.cols(); ++c) {
      const ClassId id = data.labels.labels()[static_cast<std::size_t>(c)];
      if (id == 3 || id == 7) {
        CHECK(max_abs(t0.features.col(k), data.features.col(c)) == 0.0);
        CHECK(t0.labels.labels()[static_cast<std::size_t>(k)] == id);
        ++k;
      }
    }
  }
  SUBCASE("invalid splits") {
    CHECK_THROWS_AS(split_tasks(data.features, data.labels, 3, natural), InvalidInput);
    CHECK_THROWS_AS(split_tasks(data.features, data.labels, 0, natural), InvalidInput);
    const std::vector<ClassId> missing{0, 1, 2, 3, 4, 5, 6, 7, 8, 11};
    CHECK_THROWS_AS(split_tasks(data.features, data.labels, 2, missing), InvalidInput);
  }
  SUBCASE("concatenation restores the data") {
    const auto split = split_tasks(data.features, data.labels, 5, natural);
    std::vector<LabeledData> parts;
    for (const auto& t : split.tasks) parts.push_back({t.features, t.labels});
    const auto joined = concatenate(parts);
    CHECK(joined.features.cols() == 30);
    CHECK(joined.labels.registry() == natural);
  }
}

TEST_CASE("subsampling") {
  std::vector<ClassId> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(static_cast<ClassId>(i % 4));
  const auto a = subsample_indices(labels, 7, 42);
  const auto b = subsample_indices(labels, 7, 42);
  CHECK(a == b);
  CHECK(a.size() == 28);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(subsample_indices(labels, 7, 43) != a);
  CHECK(subsample_indices(labels, 0, 1).size() == 100);
  CHECK(subsample_indices(labels, 500, 1).size() == 100);

  const Matrix X = random_matrix(3, 100, 1);
  const auto sub = subsample_per_class(X, LabelAssignment(labels), 7, 42);
  CHECK(sub.features.cols() == 28);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(max_abs(sub.features.col(static_cast<Index>(i)), X.col(static_cast<Index>(a[i]))) == 0.0);
  }
  for (Index n : sub.labels.counts()) CHECK(n == 7);
}

TEST_CASE("synthetic subspace mixture") {
  const std::vector<Index> counts{10, 12, 8};
  const auto a = synth_subspace_mixture(12, 3, 2, counts, 0.05, 9);
  const auto b = synth_subspace_mixture(12, 3, 2, counts, 0.05, 9);
  CHECK(max_abs(a.features, b.features) == 0.0);
  CHECK(a.labels.labels() == b.labels.labels());
  CHECK(a.labels.counts() == std::vector<Index>{10, 12, 8});
  CHECK(max_abs(synth_subspace_mixture(12, 3, 2, counts, 0.05, 10).features, a.features) > 0.0);

  const auto mix = SubspaceMixture::random(12, 3, 2, 9);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const Matrix G = mix.bases()[i].transpose() * mix.bases()[j];
      const Matrix expected = Matrix::Identity(2, 2) * (i == j ? 1.0 : 0.0);
      CHECK(max_abs(G, expected) <= 1e-12);
    }
  }

  SUBCASE("noiseless lines have positive rate reduction") {
    const std::vector<Index> two{20, 20};
    const auto lines = synth_subspace_mixture(5, 2, 1, two, 0.0, 3);
    const Matrix Z = normalize_classwise(lines.features, lines.labels);
    CHECK(rate_reduction(Z, lines.labels, 0.5) > 0.0);
  }
  SUBCASE("too many subspaces") {
    CHECK_THROWS_AS(SubspaceMixture::random(5, 3, 2, 1), InvalidInput);
  }
}
