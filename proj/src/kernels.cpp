#include "scn/kernels.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace scn {

int boundary_index(int i, int n, Boundary boundary) {
  if (i >= 0 && i < n) return i;
  switch (boundary) {
    case Boundary::zero:
      return -1;
    case Boundary::replicate:
      return i < 0 ? 0 : n - 1;
    case Boundary::reflect: {
      if (n == 1) return 0;
      const int period = 2 * n;
      int m = i % period;
      if (m < 0) m += period;
      return m < n ? m : period - 1 - m;
    }
  }
  return -1;
}

double gaussian(double x, double sigma) {
  return std::exp(-0.5 * x * x / (sigma * sigma)) / (std::sqrt(2.0 * std::numbers::pi) * sigma);
}

double hermite_polynomial(int n, double x) {
  if (n < 0) throw std::invalid_argument("hermite_polynomial: negative order");
  double prev = 1.0;
  if (n == 0) return prev;
  double cur = x;
  for (int k = 1; k < n; ++k) {
    const double next = x * cur - k * prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

double hermite_gauss_derivative(int n, double sigma, double x) {
  if (n < 0) throw std::invalid_argument("hermite_gauss_derivative: negative order");
  if (!(sigma > 0.0)) throw std::invalid_argument("hermite_gauss_derivative: sigma must be positive");
  const double sign = (n % 2 == 0) ? 1.0 : -1.0;
  return sign / std::pow(sigma, n) * hermite_polynomial(n, x / sigma) * gaussian(x, sigma);
}

int gaussian_radius(double sigma, int order) {
  return std::max(1, int(std::ceil(4.0 * sigma))) + order;
}

Kernel1d gaussian_kernel_1d(double sigma, int radius) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel_1d: sigma must be positive");
  if (radius < 0) throw std::invalid_argument("gaussian_kernel_1d: negative radius");
  Kernel1d k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  return k / k.sum();
}

Kernel1d gaussian_kernel_1d(double sigma) { return gaussian_kernel_1d(sigma, gaussian_radius(sigma)); }

namespace {

// m_j(h) = sum_u h(u) (-u)^j / j!, the response to x^j / j! at the origin.
double moment(const Kernel1d& k, int j) {
  const int r = kernel_radius(k);
  double fact = 1.0;
  for (int q = 2; q <= j; ++q) fact *= q;
  double acc = 0.0;
  for (int i = 0; i < k.size(); ++i) acc += k[i] * std::pow(-double(i - r), j);
  return acc / fact;
}

}  // namespace

Kernel1d gaussian_derivative_kernel_1d(int order, double sigma, int radius) {
  if (order < 0) throw std::invalid_argument("gaussian_derivative_kernel_1d: negative order");
  if (order == 0) return gaussian_kernel_1d(sigma, radius);
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_derivative_kernel_1d: sigma must be positive");

  // Lower orders of the same parity, each already moment-corrected.
  std::vector<Kernel1d> lower;
  for (int j = order % 2; j < order; j += 2) lower.push_back(gaussian_derivative_kernel_1d(j, sigma, radius));

  Kernel1d k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = hermite_gauss_derivative(order, sigma, i);
  int j = order % 2;
  for (const auto& low : lower) {
    k -= moment(k, j) * low;
    j += 2;
  }
  return k / moment(k, order);
}

Kernel1d gaussian_derivative_kernel_1d(int order, double sigma) {
  return gaussian_derivative_kernel_1d(order, sigma, gaussian_radius(sigma, order));
}

namespace {

struct Taps {
  std::vector<int> index;  // -1 == zero contribution
  std::vector<double> weight;
};

// Source taps for a 1-D convolution of length n.
std::vector<Taps> convolution_taps(const Kernel1d& k, int n, Boundary boundary) {
  const int r = kernel_radius(k);
  std::vector<Taps> taps(n);
  for (int x = 0; x < n; ++x) {
    for (int u = -r; u <= r; ++u) {
      const int src = boundary_index(x - u, n, boundary);
      if (src < 0) continue;
      taps[x].index.push_back(src);
      taps[x].weight.push_back(k[u + r]);
    }
  }
  return taps;
}

}  // namespace

template <typename Scalar>
BasicImage<Scalar> convolve_separable(const BasicImage<Scalar>& img, const Kernel1d& kx,
                                      const Kernel1d& ky, Boundary boundary) {
  if (kx.size() % 2 == 0 || ky.size() % 2 == 0) {
    throw std::invalid_argument("convolve_separable: kernels must have odd length");
  }
  const int w = img.width(), h = img.height();
  const auto tx = convolution_taps(kx, w, boundary);
  const auto ty = convolution_taps(ky, h, boundary);

  BasicImage<Scalar> out(w, h, img.channels(), Scalar(0), img.value_range());
  std::vector<double> tmp(std::size_t(w) * h);
  for (int c = 0; c < img.channels(); ++c) {
    auto src = img.plane(c);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        const auto& t = tx[x];
        for (std::size_t q = 0; q < t.index.size(); ++q) acc += t.weight[q] * double(src(y, t.index[q]));
        tmp[std::size_t(y) * w + x] = acc;
      }
    }
    auto dst = out.plane(c);
    for (int y = 0; y < h; ++y) {
      const auto& t = ty[y];
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t q = 0; q < t.index.size(); ++q) acc += t.weight[q] * tmp[std::size_t(t.index[q]) * w + x];
        dst(y, x) = Scalar(acc);
      }
    }
  }
  return out;
}

template <typename Scalar>
BasicImage<Scalar> convolve_2d(const BasicImage<Scalar>& img, const Image& kernel, Boundary boundary) {
  if (kernel.width() % 2 == 0 || kernel.height() % 2 == 0) {
    throw std::invalid_argument("convolve_2d: kernel dimensions must be odd");
  }
  const int rx = kernel.width() / 2, ry = kernel.height() / 2;
  const int w = img.width(), h = img.height();
  BasicImage<Scalar> out(w, h, img.channels(), Scalar(0), img.value_range());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int v = -ry; v <= ry; ++v) {
          const int sy = boundary_index(y - v, h, boundary);
          if (sy < 0) continue;
          for (int u = -rx; u <= rx; ++u) {
            const int sx = boundary_index(x - u, w, boundary);
            if (sx < 0) continue;
            acc += kernel(u + rx, v + ry) * double(img(sx, sy, c));
          }
        }
        out(x, y, c) = Scalar(acc);
      }
    }
  }
  return out;
}

template BasicImage<float> convolve_separable(const BasicImage<float>&, const Kernel1d&, const Kernel1d&, Boundary);
template BasicImage<double> convolve_separable(const BasicImage<double>&, const Kernel1d&, const Kernel1d&, Boundary);
template BasicImage<float> convolve_2d(const BasicImage<float>&, const Image&, Boundary);
template BasicImage<double> convolve_2d(const BasicImage<double>&, const Image&, Boundary);

}  // namespace scn
