#include "scn/dataset.hpp"
#include "scn/imageops.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace scn;
namespace fs = std::filesystem;

namespace {

const fs::path kMnist = fs::path(SCN_TEST_DATA_ROOT) / "mnist";

const LabeledSet& mnist_train() {
  static const LabeledSet set =
      load_idx(kMnist / "train-images-idx3-ubyte.gz", kMnist / "train-labels-idx1-ubyte.gz");
  return set;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "scn_test_dataset" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

std::vector<unsigned char> idx_images(std::uint32_t n) {
  std::vector<unsigned char> b;
  for (auto v : {0x803u, n, 2u, 2u}) {
    auto w = be32(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  for (std::uint32_t i = 0; i < 4 * n; ++i) b.push_back(static_cast<unsigned char>(i));
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n) {
  std::vector<unsigned char> b;
  for (auto v : {0x801u, n}) {
    auto w = be32(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  for (std::uint32_t i = 0; i < n; ++i) b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

const double kBackground = 2.0 / std::numbers::pi * std::atan(0.02 * (0.0 - 128.0));

}  // namespace

TEST_CASE("load_idx reads the bundled MNIST files") {
  const LabeledSet& set = mnist_train();
  CHECK(set.size() == 8000);
  CHECK(set.labels[0] == 5);
  CHECK(set.labels[3] == 8);
  CHECK(set.images[0].width() == 28);
  CHECK(set.images[0].samples().maxCoeff() <= 255.0f);
  const LabeledSet test = load_idx(kMnist / "t10k-images-idx3-ubyte.gz", kMnist / "t10k-labels-idx1-ubyte.gz");
  CHECK(test.size() == 2000);
}

TEST_CASE("load_idx rejects malformed files") {
  const fs::path dir = scratch("idx");
  write_bytes(dir / "img", idx_images(3));
  write_bytes(dir / "lab", idx_labels(3));
  const LabeledSet ok = load_idx(dir / "img", dir / "lab");
  CHECK(ok.size() == 3);
  CHECK(ok.images[1](1, 0) == 5.0f);
  CHECK(ok.labels[2] == 2);

  write_bytes(dir / "lab4", idx_labels(4));
  CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab4"), std::runtime_error);

  write_bytes(dir / "empty", {});
  CHECK_THROWS_WITH_AS(load_idx(dir / "empty", dir / "lab"), doctest::Contains("truncated"), std::runtime_error);

  auto cut = idx_images(3);
  cut.resize(cut.size() - 2);
  write_bytes(dir / "cut", cut);
  CHECK_THROWS_WITH_AS(load_idx(dir / "cut", dir / "lab"), doctest::Contains("truncated"), std::runtime_error);

  CHECK_THROWS_WITH_AS(load_idx(dir / "lab", dir / "lab"), doctest::Contains("magic"), std::runtime_error);
}

TEST_CASE("sample_scales") {
  const auto fixed = sample_scales(ScaleSampling::fixed(2.0), 3);
  CHECK(fixed == std::vector<double>{2.0, 2.0, 2.0});

  const auto sampling = ScaleSampling::log_uniform(1.0, 4.0, 99);
  const auto draws = sample_scales(sampling, 100000);
  double mean_log2 = 0.0;
  for (double s : draws) {
    CHECK(s >= 1.0);
    CHECK(s < 4.0);
    mean_log2 += std::log2(s);
  }
  mean_log2 /= double(draws.size());
  CHECK(std::abs(mean_log2 - 1.0) <= 0.02);
  CHECK(sample_scales(sampling, 1000) == sample_scales(sampling, 1000));
  CHECK(sample_scales(sampling, 10) != sample_scales(ScaleSampling::log_uniform(1.0, 4.0, 100), 10));

  CHECK_THROWS_AS(sample_scales(ScaleSampling::log_uniform(2.0, 1.0, 0), 3), std::invalid_argument);
  CHECK_THROWS_AS(sample_scales(ScaleSampling::fixed(0.0), 3), std::invalid_argument);
  CHECK_THROWS_AS(sample_scales(ScaleSampling::fixed(1.0), 0), std::invalid_argument);
}

TEST_CASE("MNIST Large Scale rendering matches the independent NumPy oracle") {
  // tests/oracles/large_scale_golden.py on the first three training digits.
  struct Golden {
    int digit;
    double scale;
    double v[5];
  };
  const int points[5][2] = {{55, 55}, {50, 60}, {40, 70}, {20, 30}, {0, 0}};
  const Golden golden[] = {
      {0, 0.5, {0.694975120614, -0.762923785647, -0.762923785647, -0.762923785647, -0.762923785647}},
      {0, 1.0, {0.676538002215, -0.756268762326, -0.762923785647, -0.762923785647, -0.762923785647}},
      {0, 2.8284271247461903, {0.660852301304, -0.626530031071, -0.740440673395, -0.762923785641, -0.762923785647}},
      {0, 8.0, {0.658857237646, 0.611023855211, -0.669009429604, 0.718191074072, -0.573206956983}},
      {1, 0.5, {-0.707072617289, -0.762922660036, -0.762923785647, -0.762923785647, -0.762923785647}},
      {1, 1.0, {-0.741211293428, -0.697563710303, -0.762923785647, -0.762923785647, -0.762923785647}},
      {1, 2.8284271247461903, {-0.751797800870, 0.060535739883, -0.572195300340, -0.762923785647, -0.762923785647}},
      {1, 8.0, {-0.753968744365, -0.726348940790, 0.243508694370, -0.684731972433, -0.762923636529}},
      {2, 0.5, {-0.248758299027, -0.760104543707, -0.762923785647, -0.762923785647, -0.762923785647}},
      {2, 1.0, {0.146497877192, -0.757016529411, -0.762923785647, -0.762923785647, -0.762923785647}},
      {2, 2.8284271247461903, {0.267751439326, -0.611140521825, -0.729514858196, -0.762923785647, -0.762923785647}},
      {2, 8.0, {0.294304783487, 0.252379277305, -0.668980468117, -0.182552210347, -0.762915538328}},
  };
  for (const auto& g : golden) {
    const Image img = render_large_scale(mnist_train().images[std::size_t(g.digit)].cast<double>(), g.scale);
    CHECK(img.width() == 112);
    for (int p = 0; p < 5; ++p) CHECK(img(points[p][0], points[p][1]) == doctest::Approx(g.v[p]).epsilon(1e-9).scale(1e-9));
  }
}

TEST_CASE("render_large_scale geometry") {
  const Image digit = mnist_train().images[0].cast<double>();
  const Image one = render_large_scale(digit, 1.0);
  // Digit footprint stays inside the central 28x28 block widened by the smoothing radius.
  for (int y = 0; y < 112; ++y)
    for (int x = 0; x < 112; ++x) {
      const bool near = x >= 42 - 4 && x < 70 + 4 && y >= 42 - 4 && y < 70 + 4;
      if (!near) CHECK(one(x, y) == doctest::Approx(kBackground).epsilon(1e-12));
    }
  const Image big = render_large_scale(digit, 8.0);
  CHECK(big.width() == 112);
  CHECK(big.all_finite());
  CHECK_THROWS_AS(render_large_scale(digit, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(render_large_scale(Image(32, 32), 1.0), std::invalid_argument);
}

TEST_CASE("digit extent grows linearly with the scale factor") {
  auto mean_extent = [](double s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
      const Image img = render_large_scale(mnist_train().images[i].cast<double>(), s);
      int lo = 112, hi = -1;
      for (int y = 0; y < 112; ++y)
        for (int x = 0; x < 112; ++x)
          if (img(x, y) > 0.0) lo = std::min(lo, y), hi = std::max(hi, y);
      acc += hi - lo + 1;
    }
    return acc / 100.0;
  };
  const double e1 = mean_extent(1.0);
  double sxy = 0, sxx = 0;
  for (double s : {1.0, 2.0, 3.0, 4.0}) {
    const double rel = mean_extent(s) / e1;
    sxy += (s - 2.5) * rel;
    sxx += (s - 2.5) * (s - 2.5);
  }
  const double slope = sxy / sxx;
  CHECK(slope == doctest::Approx(1.0).epsilon(0.10));
}

TEST_CASE("generated splits are deterministic, label preserving and squashed") {
  const LabeledSet source = mnist_train().subset(0, 40);
  const auto sampling = ScaleSampling::log_uniform(1.0, 4.0, 7);
  const LabeledSet a = make_mnist_large_scale(source, sampling, Split::train);
  const LabeledSet b = make_mnist_large_scale(source, sampling, Split::train);
  CHECK(a.labels == source.labels);
  CHECK(a.scales == b.scales);
  for (const auto& img : a.images) {
    CHECK(img.samples().maxCoeff() < 1.0f);
    CHECK(img.samples().minCoeff() > -1.0f);
  }
  const LabeledSet v = make_mnist_large_scale(source, sampling, Split::val);
  CHECK(v.scales != a.scales);

  const fs::path d1 = scratch("det1"), d2 = scratch("det2");
  write_labeled_set(d1, "train", a);
  write_labeled_set(d2, "train", b);
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  CHECK(slurp(d1 / "train.scnt") == slurp(d2 / "train.scnt"));
  CHECK(slurp(d1 / "train.json") == slurp(d2 / "train.json"));

  const LabeledSet back = read_labeled_set(d1, "train");
  CHECK(back.labels == a.labels);
  CHECK(back.scales == a.scales);
  CHECK(back.images[5] == a.images[5]);
  CHECK(back.meta.sampling == "log_uniform(1,4)");
}

TEST_CASE("select_split follows the train/val/test assignment") {
  const LabeledSet& train = mnist_train();
  const LabeledSet test = train.subset(0, 10);
  CHECK(select_split(train, test, Split::train, 500).size() == 7500);
  const LabeledSet val = select_split(train, test, Split::val, 500);
  CHECK(val.size() == 500);
  CHECK(val.labels.front() == train.labels[7500]);
  CHECK(select_split(train, test, Split::test, 500).size() == 10);
  CHECK_THROWS_AS(select_split(test, test, Split::train, 10), std::invalid_argument);
}

TEST_CASE("CIFAR batches and the rescaled test protocol") {
  const fs::path dir = scratch("cifar");
  std::vector<unsigned char> batch;
  for (int r = 0; r < 4; ++r) {
    batch.push_back(static_cast<unsigned char>(r * 3));
    for (int p = 0; p < 3072; ++p) batch.push_back(static_cast<unsigned char>((p * 7 + r * 13) % 251));
  }
  write_bytes(dir / "data_batch_1.bin", batch);
  const LabeledSet set = load_cifar_batches({dir / "data_batch_1.bin"});
  REQUIRE(set.size() == 4);
  CHECK(set.labels[2] == 6);
  CHECK(set.images[1].channels() == 3);
  CHECK(set.images[1](3, 0, 1) == float((1024 + 3) * 7 % 251 + 13) - (((1024 + 3) * 7 % 251 + 13) >= 251 ? 251.f : 0.f));

  const LabeledSet same = make_rescaled_cifar_test(set, 1.0);
  CHECK(same.images[0] == set.images[0]);

  const LabeledSet half = make_rescaled_cifar_test(set, 0.5);
  for (int y = 8; y < 24; ++y)
    for (int x = 0; x < 8; ++x) CHECK(half.images[3](x, y, 2) == doctest::Approx(half.images[3](15 - x, y, 2)).epsilon(1e-6));

  const LabeledSet twice = make_rescaled_cifar_test(set, 2.0);
  // Centre of the magnified copy samples the source centre.
  const ImageF& src = set.images[0];
  const float centre = 0.25f * (src(15, 15) + src(16, 15) + src(15, 16) + src(16, 16));
  const float got = 0.25f * (twice.images[0](15, 15) + twice.images[0](16, 15) + twice.images[0](15, 16) + twice.images[0](16, 16));
  CHECK(got == doctest::Approx(centre).epsilon(1e-5));

  CHECK_THROWS_AS(make_rescaled_cifar_test(set, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(make_rescaled_cifar_test(set, 2.5), std::invalid_argument);

  batch.pop_back();
  write_bytes(dir / "bad.bin", batch);
  CHECK_THROWS_AS(load_cifar_batches({dir / "bad.bin"}), std::runtime_error);
}
