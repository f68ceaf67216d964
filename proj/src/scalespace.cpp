#include "scn/scalespace.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace scn {

namespace fs = std::filesystem;

ScaleStack scale_space(const Image& img, const std::vector<double>& sigmas) {
  require_valid(img, "scale_space");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw std::invalid_argument("scale_space: sigmas must be positive");
    if (i > 0 && !(sigmas[i] > sigmas[i - 1])) throw std::invalid_argument("scale_space: sigmas must increase");
  }
  ScaleStack stack{img, sigmas, {}};
  stack.planes.reserve(sigmas.size());
  for (double s : sigmas) stack.planes.push_back(gaussian_smooth(img, s));
  return stack;
}

void write_scale_stack(const fs::path& dir, const ScaleStack& stack) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["sigmas"] = stack.sigmas;
  manifest["planes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < stack.planes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "plane_%03zu.scni", i);
    write_image(dir / name, stack.planes[i]);
    manifest["planes"].push_back(name);
  }
  write_image(dir / "base.scni", stack.base);
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

ScaleStack read_scale_stack(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("read_scale_stack: missing manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  ScaleStack stack;
  stack.base = read_image(dir / "base.scni");
  stack.sigmas = manifest.at("sigmas").get<std::vector<double>>();
  for (const auto& name : manifest.at("planes")) stack.planes.push_back(read_image(dir / name.get<std::string>()));
  if (stack.planes.size() != stack.sigmas.size()) throw std::runtime_error("read_scale_stack: plane count mismatch");
  return stack;
}

namespace {

void check_order(const DerivativeOrder& order) {
  if (order.dx < 0 || order.dy < 0) throw std::invalid_argument("derivative order must be non-negative");
  if (order.total() > kMaxDerivativeOrder) throw std::invalid_argument("derivative order above 4 is not supported");
  if (order.gamma < 0.0 || order.gamma > 1.0) throw std::invalid_argument("gamma must lie in [0, 1]");
}

}  // namespace

Image gaussian_derivative(const Image& img, const DerivativeOrder& order, double sigma) {
  check_order(order);
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_derivative: sigma must be positive");
  require_valid(img, "gaussian_derivative");
  const Kernel1d kx = gaussian_derivative_kernel_1d(order.dx, sigma);
  const Kernel1d ky = gaussian_derivative_kernel_1d(order.dy, sigma);
  return convolve_separable(img, kx, ky, Boundary::reflect);
}

Image normalised_derivative(const Image& img, const DerivativeOrder& order, double sigma) {
  Image out = gaussian_derivative(img, order, sigma);
  out.samples() *= std::pow(sigma, order.total() * order.gamma);
  return out;
}

Image directional_derivative(const Image& img, const Eigen::Vector2d& direction, int order, double sigma) {
  if (std::abs(direction.norm() - 1.0) > 1e-9) throw std::invalid_argument("directional_derivative: direction must be a unit vector");
  if (order < 0 || order > kMaxDerivativeOrder) throw std::invalid_argument("directional_derivative: order out of range");
  Image out(img.width(), img.height(), img.channels(), 0.0, img.value_range());
  double binom = 1.0;
  for (int k = 0; k <= order; ++k) {
    const double weight = binom * std::pow(direction[0], k) * std::pow(direction[1], order - k);
    if (weight != 0.0) out.samples() += weight * gaussian_derivative(img, {k, order - k, 0.0}, sigma).samples();
    binom = binom * (order - k) / (k + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------

int GaussianDerivativeFilter::radius(double s) const {
  return gaussian_radius(sigma * s, std::max(dx, dy));
}

Image GaussianDerivativeFilter::kernel(double s) const {
  const int r = radius(s);
  const Kernel1d kx = gaussian_derivative_kernel_1d(dx, sigma * s, r);
  const Kernel1d ky = gaussian_derivative_kernel_1d(dy, sigma * s, r);
  Image k(2 * r + 1, 2 * r + 1);
  k.plane(0) = (ky.matrix() * kx.matrix().transpose()).array() * std::pow(s, dx + dy);
  return k;
}

int SampledFilter::radius(double s) const {
  return int(std::ceil((taps.width() / 2) * s));
}

Image SampledFilter::kernel(double s) const {
  if (taps.width() % 2 == 0 || taps.height() % 2 == 0) throw std::invalid_argument("SampledFilter: kernel must be odd-sized");
  if (!(s > 0.0)) throw std::invalid_argument("SampledFilter: scale must be positive");
  if (s == 1.0) return taps;
  const int rx = int(std::ceil((taps.width() / 2) * s));
  const int ry = int(std::ceil((taps.height() / 2) * s));
  Image k = resample(taps, ResampleSpec::about_center(s, 2 * rx + 1, 2 * ry + 1, Interpolation::bicubic, Boundary::zero));
  const double target = taps.samples().abs().sum();
  const double have = k.samples().abs().sum();
  if (have > 0.0) k.samples() *= target / have;
  return k;
}

ResidualStats interior_residual(const Image& reference, const Image& other, int border) {
  if (!reference.same_geometry(other)) throw std::invalid_argument("interior_residual: geometry mismatch");
  const int w = reference.width(), h = reference.height();
  if (2 * border >= w || 2 * border >= h) throw std::invalid_argument("interior_residual: empty comparison region");
  ResidualStats st;
  st.border = border;
  double sum_abs = 0.0, sum_sq = 0.0;
  for (int c = 0; c < reference.channels(); ++c) {
    for (int y = border; y < h - border; ++y) {
      for (int x = border; x < w - border; ++x) {
        const double d = std::abs(reference(x, y, c) - other(x, y, c));
        sum_abs += d;
        st.max_abs = std::max(st.max_abs, d);
        sum_sq += reference(x, y, c) * reference(x, y, c);
        ++st.interior_pixels;
      }
    }
  }
  st.mean_abs = sum_abs / double(st.interior_pixels);
  st.reference_rms = std::sqrt(sum_sq / double(st.interior_pixels));
  return st;
}

Image downsample_about_center(const Image& img, double s) {
  const int w = std::max(1, int(std::ceil(img.width() / s)));
  const int h = std::max(1, int(std::ceil(img.height() / s)));
  return resample(img, ResampleSpec::about_center(1.0 / s, w, h, Interpolation::bicubic, Boundary::reflect));
}

Image upsample_about_center(const Image& coarse, double s, int width, int height) {
  return resample(coarse, ResampleSpec::about_center(s, width, height, Interpolation::bicubic, Boundary::reflect));
}

namespace {

template <typename Apply>
std::pair<Image, Image> duality_sides(const Image& img, double s, Apply apply) {
  require_valid(img, "duality_residual");
  if (!(s > 0.0)) throw std::invalid_argument("duality_residual: scale must be positive");
  Image direct = apply(img, s);
  if (s == 1.0) return {direct, direct};
  Image coarse = apply(downsample_about_center(img, s), 1.0);
  return {std::move(direct), upsample_about_center(coarse, s, img.width(), img.height())};
}

}  // namespace

std::pair<Image, Image> duality_pair(const Image& img, const GaussianDerivativeFilter& h, double s) {
  return duality_sides(img, s, [&h](const Image& f, double scale) {
    const int r = h.radius(scale);
    const Kernel1d kx = gaussian_derivative_kernel_1d(h.dx, h.sigma * scale, r);
    Kernel1d ky = gaussian_derivative_kernel_1d(h.dy, h.sigma * scale, r);
    ky *= std::pow(scale, h.dx + h.dy);
    return convolve_separable(f, kx, ky, Boundary::reflect);
  });
}

std::pair<Image, Image> duality_pair(const Image& img, const SampledFilter& h, double s) {
  return duality_sides(img, s, [&h](const Image& f, double scale) {
    return convolve_2d(f, h.kernel(scale), Boundary::reflect);
  });
}

ResidualStats duality_residual(const Image& img, const GaussianDerivativeFilter& h, double s) {
  auto [direct, dual] = duality_pair(img, h, s);
  return interior_residual(direct, dual, h.radius(std::max(s, 1.0)));
}

ResidualStats duality_residual(const Image& img, const SampledFilter& h, double s) {
  auto [direct, dual] = duality_pair(img, h, s);
  return interior_residual(direct, dual, h.radius(std::max(s, 1.0)));
}

ResidualStats normalised_derivative_equivalence(const Image& img, const DerivativeOrder& order, double sigma0,
                                                double s) {
  DerivativeOrder normalised = order;
  normalised.gamma = 1.0;
  const Image reference = normalised_derivative(img, normalised, s * sigma0);
  const Image channel = normalised_derivative(downsample_about_center(img, s), normalised, sigma0);
  const Image back = upsample_about_center(channel, s, img.width(), img.height());
  return interior_residual(reference, back, gaussian_radius(sigma0 * std::max(s, 1.0), order.total()));
}

}  // namespace scn
