#pragma once

#include "scn/image.hpp"
#include "scn/imageops.hpp"
#include "scn/kernels.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <vector>

namespace scn {

/// Gaussian scale-space representation: one smoothed plane per scale.
struct ScaleStack {
  Image base;
  std::vector<double> sigmas;
  std::vector<Image> planes;
};

/// Multi-index of a partial derivative along (x, y) plus the
/// scale-normalisation exponent gamma.
struct DerivativeOrder {
  int dx = 0;
  int dy = 0;
  double gamma = 0.0;

  int total() const { return dx + dy; }
};

constexpr int kMaxDerivativeOrder = 4;

ScaleStack scale_space(const Image& img, const std::vector<double>& sigmas);

/// Plane-wise export: plane_000.scni, ... plus manifest.json with the sigmas.
void write_scale_stack(const std::filesystem::path& dir, const ScaleStack& stack);
ScaleStack read_scale_stack(const std::filesystem::path& dir);

/// Raw Gaussian derivative L_{x^dx y^dy}(.; sigma); gamma is ignored.
Image gaussian_derivative(const Image& img, const DerivativeOrder& order, double sigma);

/// sigma^(|alpha| gamma) * gaussian_derivative.
Image normalised_derivative(const Image& img, const DerivativeOrder& order, double sigma);

/// n-th order derivative along the unit direction e, expanded as
/// sum_k C(n, k) e_x^k e_y^(n-k) L_{x^k y^(n-k)}.
Image directional_derivative(const Image& img, const Eigen::Vector2d& direction, int order, double sigma);

// ---------------------------------------------------------------------------
// Filter rescaling duality. A filter h rescaled by s is h_s(x) = s^-2 h(x / s);
// filtering the image with h_s equals filtering the 1/s-downsampled image with
// h and reading the result at x / s.

/// Gaussian derivative filter defined analytically, so that h_s is exact:
/// h_s = s^|alpha| * d^alpha g(.; s sigma).
struct GaussianDerivativeFilter {
  int dx = 0;
  int dy = 0;
  double sigma = 1.0;

  Image kernel(double s = 1.0) const;
  int radius(double s = 1.0) const;
};

/// Arbitrary sampled filter (odd-sized kernel image, centre pixel at the
/// origin). The rescaled kernel is obtained by bicubic interpolation and
/// renormalised to the L1 norm of the original.
struct SampledFilter {
  Image taps;

  Image kernel(double s = 1.0) const;
  int radius(double s = 1.0) const;
};

struct ResidualStats {
  double mean_abs = 0.0;
  double max_abs = 0.0;
  double reference_rms = 0.0;  // RMS of the reference plane over the interior
  int border = 0;
  long interior_pixels = 0;

  double normalised_mean() const { return reference_rms > 0 ? mean_abs / reference_rms : mean_abs; }
  double normalised_max() const { return reference_rms > 0 ? max_abs / reference_rms : max_abs; }
};

/// Mean/max absolute difference of two equally sized planes on the interior
/// that excludes `border` pixels on every side, normalised by the RMS of
/// `reference` there.
ResidualStats interior_residual(const Image& reference, const Image& other, int border);

/// Both sides of the duality on the original grid: (f * h_s, upsampled(f_{1/s} * h)).
std::pair<Image, Image> duality_pair(const Image& img, const GaussianDerivativeFilter& h, double s);
std::pair<Image, Image> duality_pair(const Image& img, const SampledFilter& h, double s);

ResidualStats duality_residual(const Image& img, const GaussianDerivativeFilter& h, double s);
ResidualStats duality_residual(const Image& img, const SampledFilter& h, double s);

/// A fixed gamma = 1 normalised derivative at sigma0 applied to the 1/s
/// rescaled image (as inside a scale channel), mapped back to the original
/// grid, against the gamma = 1 normalised derivative at s * sigma0 computed
/// on the original image.
ResidualStats normalised_derivative_equivalence(const Image& img, const DerivativeOrder& order, double sigma0,
                                                double s);

/// Image resampled by 1/s about its centre onto a grid of ceil(w / s) x ceil(h / s)
/// (bicubic, reflected border), and the inverse mapping back onto w x h.
Image downsample_about_center(const Image& img, double s);
Image upsample_about_center(const Image& coarse, double s, int width, int height);

}  // namespace scn
