#include "scn/scalespace.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace scn;

namespace {

// Smooth synthetic scene: a handful of anisotropic Gaussian blobs.
Image blob_scene(int size, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.3, 0.7), width(3.0, 6.0), amp(-1.0, 1.0);
  Image img(size, size);
  for (int b = 0; b < 6; ++b) {
    const double cx = pos(rng) * size, cy = pos(rng) * size;
    const double sx = width(rng) * scale, sy = width(rng) * scale, a = amp(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img(x, y) += a * std::exp(-0.5 * ((x - cx) * (x - cx) / (sx * sx) + (y - cy) * (y - cy) / (sy * sy)));
  }
  return img;
}

Image ramp(int w, int h, double ax, double ay) {
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img(x, y) = ax * x + ay * y;
  return img;
}

double max_abs_interior(const Image& img, int border, double offset = 0.0) {
  double m = 0.0;
  for (int y = border; y < img.height() - border; ++y)
    for (int x = border; x < img.width() - border; ++x) m = std::max(m, std::abs(img(x, y) - offset));
  return m;
}

}  // namespace

TEST_CASE("gaussian_kernel_1d is normalised and symmetric") {
  for (double sigma : {0.3, 1.0, 2.5, 7.0}) {
    const Kernel1d k = gaussian_kernel_1d(sigma);
    CHECK(k.sum() == doctest::Approx(1.0).epsilon(1e-12));
    const int r = kernel_radius(k);
    for (int i = 1; i <= r; ++i) CHECK(k[r + i] == k[r - i]);
  }
  const Kernel1d k = gaussian_kernel_1d(1.0, 4);
  CHECK(k[4] / k[5] == doctest::Approx(std::exp(0.5)).epsilon(1e-9));

  const Kernel1d wide = gaussian_kernel_1d(1e4, 3);
  CHECK((wide - 1.0 / 7.0).abs().maxCoeff() < 1e-8);
  CHECK_THROWS_AS(gaussian_kernel_1d(0.0, 3), std::invalid_argument);
}

TEST_CASE("scale_space planes are Gaussian smoothings") {
  Image impulse(41, 41);
  impulse(20, 20) = 1.0;
  const ScaleStack stack = scale_space(impulse, {1.0, 2.0, 3.5});
  REQUIRE(stack.planes.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const double s = stack.sigmas[i];
    const int r = int(std::ceil(4 * s));
    double norm = 0.0;
    for (int u = -r; u <= r; ++u) norm += std::exp(-0.5 * u * u / (s * s));
    for (int y = 0; y < 41; ++y)
      for (int x = 0; x < 41; ++x) {
        const int dx = x - 20, dy = y - 20;
        const double want = (std::abs(dx) <= r && std::abs(dy) <= r)
                                ? std::exp(-0.5 * (dx * dx + dy * dy) / (s * s)) / (norm * norm)
                                : 0.0;
        CHECK(stack.planes[i](x, y) == doctest::Approx(want).epsilon(1e-10).scale(1e-12));
      }
  }

  const Image flat(16, 16, 1, -0.5);
  for (const auto& p : scale_space(flat, {0.5, 1.5, 4.0}).planes) CHECK((p.samples() + 0.5).abs().maxCoeff() < 1e-12);

  const Image img = blob_scene(32, 3);
  const auto fine = scale_space(img, {1e-3});
  CHECK((fine.planes[0].samples() - img.samples()).abs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(scale_space(img, {2.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(scale_space(img, {0.0}), std::invalid_argument);
}

TEST_CASE("scale stack export round-trips") {
  const auto dir = std::filesystem::temp_directory_path() / "scn_test_stack";
  std::filesystem::remove_all(dir);
  const ScaleStack stack = scale_space(blob_scene(24, 1), {1.0, 2.0});
  write_scale_stack(dir, stack);
  const ScaleStack back = read_scale_stack(dir);
  CHECK(back.sigmas == stack.sigmas);
  REQUIRE(back.planes.size() == 2);
  CHECK((back.planes[1].samples() - stack.planes[1].samples()).abs().maxCoeff() < 1e-6);
}

TEST_CASE("Gaussian derivatives of simple signals") {
  const Image img = blob_scene(48, 5);
  const ScaleStack stack = scale_space(img, {2.0});
  CHECK(gaussian_derivative(img, {0, 0}, 2.0) == stack.planes[0]);

  for (double sigma : {0.7, 1.0, 2.0, 3.5}) {
    const Image d = gaussian_derivative(ramp(64, 40, 1.0, 0.0), {1, 0}, sigma);
    const int border = gaussian_radius(sigma, 1);
    CHECK(max_abs_interior(d, border, 1.0) <= 1e-6);
    const Image dy = gaussian_derivative(ramp(64, 40, 1.0, 0.0), {0, 1}, sigma);
    CHECK(max_abs_interior(dy, border) <= 1e-9);
  }

  Image blob(33, 33);
  for (int y = 0; y < 33; ++y)
    for (int x = 0; x < 33; ++x) blob(x, y) = std::exp(-((x - 16) * (x - 16) + (y - 16) * (y - 16)) / 18.0);
  CHECK(std::abs(gaussian_derivative(blob, {1, 0}, 1.5)(16, 16)) <= 1e-9);
  CHECK(std::abs(gaussian_derivative(blob, {0, 3}, 1.5)(16, 16)) <= 1e-9);

  CHECK_THROWS_AS(gaussian_derivative(img, {3, 2}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_derivative(img, {1, 0}, 0.0), std::invalid_argument);
}

TEST_CASE("normalised derivatives") {
  const Image img = blob_scene(40, 8);
  CHECK(normalised_derivative(img, {1, 1, 0.0}, 2.0) == gaussian_derivative(img, {1, 1}, 2.0));
  const Image raw = gaussian_derivative(img, {2, 0}, 3.0);
  const Image norm = normalised_derivative(img, {2, 0, 1.0}, 3.0);
  CHECK((norm.samples() - 9.0 * raw.samples()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("gamma-normalised first derivative of a sine peaks at sigma = 1/omega") {
  // Response amplitude is sigma*omega*exp(-sigma^2 omega^2 / 2), maximal at sigma*omega = 1.
  const double step = std::pow(2.0, 0.125);
  std::vector<double> sigmas;
  for (double s = 1.0; s < 24.0; s *= step) sigmas.push_back(s);

  auto selected = [&](double omega) {
    Image img(320, 8);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 320; ++x) img(x, y) = std::sin(omega * x);
    double best = -1.0;
    double arg = 0.0;
    for (double s : sigmas) {
      const Image d = normalised_derivative(img, {1, 0, 1.0}, s);
      double amp = 0.0;
      for (int x = 100; x < 220; ++x) amp = std::max(amp, std::abs(d(x, 4)));
      if (amp > best) best = amp, arg = s;
    }
    return arg;
  };
  for (double omega : {2 * std::numbers::pi / 20, 2 * std::numbers::pi / 40}) {
    const double picked = selected(omega);
    CHECK(std::abs(std::log(picked * omega)) <= std::log(step) + 1e-12);
  }
  const double a = selected(2 * std::numbers::pi / 16), b = selected(2 * std::numbers::pi / 32);
  CHECK(std::abs(std::log(b / a) - std::log(2.0)) <= std::log(step) + 1e-12);
}

TEST_CASE("Hermite closed form of Gaussian derivatives") {
  // Reference values from symbolic differentiation of the Gaussian.
  const double points[3][2] = {{1.0, 1.0}, {0.7, 1.5}, {-2.3, 2.0}};
  const double exact[5][3] = {{0.24197072451914335, 0.23852228611197930, 0.10296813435998737},
                              {-0.24197072451914335, -0.074206933457060226, 0.059206677256992739},
                              {0.0, -0.082923303418683173, 0.0083018058327739819},
                              {0.48394144903828670, 0.091760079692088299, -0.024829800274651330},
                              {-0.48394144903828670, 0.082016824209594537, -0.020503489532505001}};
  for (int n = 0; n <= 4; ++n)
    for (int p = 0; p < 3; ++p)
      CHECK(hermite_gauss_derivative(n, points[p][1], points[p][0]) ==
            doctest::Approx(exact[n][p]).epsilon(1e-12).scale(1e-15));

  CHECK(hermite_gauss_derivative(0, 1.3, 0.4) == gaussian(0.4, 1.3));
  CHECK(hermite_gauss_derivative(1, 2.0, 0.0) == 0.0);

  const double h = 1e-4;
  const double fd2 = (gaussian(1.0 + h, 1.0) - 2 * gaussian(1.0, 1.0) + gaussian(1.0 - h, 1.0)) / (h * h);
  CHECK(std::abs(hermite_gauss_derivative(2, 1.0, 1.0) - fd2) <= 1e-6 * std::abs(fd2) + 1e-9);

  // Each order is the central-difference derivative of the previous one.
  for (int n = 1; n <= 4; ++n) {
    for (double x : {-1.7, 0.35, 2.2}) {
      const double fd = (hermite_gauss_derivative(n - 1, 1.2, x + h) - hermite_gauss_derivative(n - 1, 1.2, x - h)) / (2 * h);
      const double v = hermite_gauss_derivative(n, 1.2, x);
      CHECK(std::abs(v - fd) <= 1e-6 * std::max(std::abs(v), 1e-2));
    }
  }
}

TEST_CASE("directional derivatives") {
  const Image img = blob_scene(40, 12);
  const Image ex = directional_derivative(img, {1.0, 0.0}, 1, 1.5);
  CHECK((ex.samples() - gaussian_derivative(img, {1, 0}, 1.5).samples()).abs().maxCoeff() < 1e-14);
  const Image ey = directional_derivative(img, {0.0, 1.0}, 2, 1.5);
  CHECK((ey.samples() - gaussian_derivative(img, {0, 2}, 1.5).samples()).abs().maxCoeff() < 1e-14);

  const Eigen::Vector2d diag(std::sqrt(0.5), std::sqrt(0.5));
  const Image d = directional_derivative(ramp(48, 48, 1.0, 1.0), diag, 1, 2.0);
  CHECK(max_abs_interior(d, gaussian_radius(2.0, 1), std::sqrt(2.0)) <= 1e-6);

  CHECK_THROWS_AS(directional_derivative(img, {1.0, 1.0}, 1, 1.0), std::invalid_argument);
}

TEST_CASE("filter rescaling duality") {
  const Image img = blob_scene(96, 17);
  const auto same = duality_residual(img, GaussianDerivativeFilter{0, 0, 2.0}, 1.0);
  CHECK(same.mean_abs == 0.0);
  CHECK(same.max_abs == 0.0);

  for (double s : {2.0, 4.0}) {
    for (auto f : {GaussianDerivativeFilter{0, 0, 2.0}, GaussianDerivativeFilter{1, 0, 2.0}, GaussianDerivativeFilter{0, 2, 2.0}}) {
      const auto r = duality_residual(img, f, s);
      CHECK(r.normalised_mean() <= 0.02);
    }
  }

  // Sampled (non-analytic) filter goes through kernel interpolation.
  SampledFilter sampled{GaussianDerivativeFilter{0, 0, 2.0}.kernel()};
  CHECK(duality_residual(img, sampled, 2.0).normalised_mean() <= 0.02);
  CHECK(duality_residual(img, sampled, 1.0).mean_abs == 0.0);

  CHECK_THROWS_AS(duality_residual(Image(8, 8), GaussianDerivativeFilter{0, 0, 2.0}, 2.0), std::invalid_argument);
}

TEST_CASE("duality residual shrinks with grid resolution") {
  for (double s : {2.0, 4.0}) {
    const Image coarse = blob_scene(64, 23, 0.5);
    const Image fine = blob_scene(128, 23, 1.0);
    // Same continuous scene; blob centres scale with the canvas, widths with 0.5 -> 1.
    const auto r1 = duality_residual(coarse, GaussianDerivativeFilter{1, 0, 1.0}, s);
    const auto r2 = duality_residual(fine, GaussianDerivativeFilter{1, 0, 2.0}, s);
    CHECK(r2.normalised_mean() <= 0.6 * r1.normalised_mean());
  }
}

TEST_CASE("channel-applied normalised derivative matches the normalised derivative at the rescaled scale") {
  const Image img = blob_scene(128, 31);
  for (double s : {2.0, 4.0}) {
    for (DerivativeOrder ord : {DerivativeOrder{1, 0}, DerivativeOrder{0, 1}, DerivativeOrder{2, 0}, DerivativeOrder{1, 1}}) {
      const auto r = normalised_derivative_equivalence(img, ord, 1.5, s);
      CHECK(r.normalised_mean() <= 0.02);
    }
  }
}

TEST_CASE("scale-space covariance under image rescaling") {
  const Image f = blob_scene(64, 41);
  for (double sigma : {2.0, 4.0}) {
    const double s = 2.0;
    const Image up = resample(f, ResampleSpec::about_center(s, 128, 128, Interpolation::bicubic, Boundary::reflect));
    const Image lhs = scale_space(up, {sigma}).planes[0];
    const Image rhs = resample(scale_space(f, {sigma / s}).planes[0],
                               ResampleSpec::about_center(s, 128, 128, Interpolation::bicubic, Boundary::reflect));
    const auto r = interior_residual(lhs, rhs, int(std::ceil(4 * sigma * s)));
    CHECK(r.normalised_mean() <= 0.02);
  }
}
