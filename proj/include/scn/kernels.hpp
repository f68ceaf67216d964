#pragma once

#include "scn/image.hpp"

#include <Eigen/Core>

namespace scn {

enum class Boundary { zero, reflect, replicate };

/// Odd-length 1-D filter; coefficient i applies to offset i - radius.
using Kernel1d = Eigen::ArrayXd;

inline int kernel_radius(const Kernel1d& k) { return int(k.size() / 2); }

/// Maps an out-of-range sample index onto the image per boundary rule.
/// Returns -1 for zero extension. `reflect` mirrors about the outer pixel
/// edge (-1 -> 0, n -> n-1).
int boundary_index(int i, int n, Boundary boundary);

/// Sampled Gaussian g(x; sigma) = exp(-x^2 / 2 sigma^2) / (sqrt(2 pi) sigma).
double gaussian(double x, double sigma);

/// Probabilists' Hermite polynomial He_n(x).
double hermite_polynomial(int n, double x);

/// n-th derivative of the continuous Gaussian evaluated through the Hermite
/// closed form (-1)^n / sigma^n He_n(x / sigma) g(x; sigma).
double hermite_gauss_derivative(int n, double sigma, double x);

/// Default truncation radius ceil(4 sigma) (+ derivative order).
int gaussian_radius(double sigma, int order = 0);

/// Sampled Gaussian on [-radius, radius], renormalised to unit sum.
Kernel1d gaussian_kernel_1d(double sigma, int radius);
Kernel1d gaussian_kernel_1d(double sigma);

/// Sampled n-th order Gaussian derivative kernel. Coefficients are corrected
/// so that applying the kernel to x^j / j! reproduces delta_{jn} for every
/// j <= n: exact on polynomials up to the kernel's own order despite
/// sampling and truncation.
Kernel1d gaussian_derivative_kernel_1d(int order, double sigma, int radius);
Kernel1d gaussian_derivative_kernel_1d(int order, double sigma);

/// Separable convolution out(x, y) = sum_uv kx(u) ky(v) img(x - u, y - v) with
/// u, v running over [-radius, radius]; applied to every channel.
template <typename Scalar>
BasicImage<Scalar> convolve_separable(const BasicImage<Scalar>& img, const Kernel1d& kx,
                                      const Kernel1d& ky, Boundary boundary = Boundary::reflect);

/// Direct 2-D convolution with an arbitrary odd-sized kernel image whose
/// centre pixel is offset (0, 0).
template <typename Scalar>
BasicImage<Scalar> convolve_2d(const BasicImage<Scalar>& img, const Image& kernel,
                               Boundary boundary = Boundary::reflect);

}  // namespace scn
