#include "scn/imageops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace scn {

namespace {

struct Taps {
  std::array<int, 4> index{};
  std::array<double, 4> weight{};
  int count = 0;
};

double cubic_weight(double x) {
  constexpr double a = -0.5;  // Catmull-Rom
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

// Interpolation taps for a continuous source coordinate along one axis.
Taps axis_taps(double pos, int n, Interpolation kernel, Boundary boundary) {
  Taps t;
  const double base = std::floor(pos);
  const double frac = pos - base;
  const int i0 = int(base);
  auto push = [&](int i, double w) {
    if (w == 0.0) return;
    const int src = boundary_index(i, n, boundary);
    if (src < 0) return;
    t.index[t.count] = src;
    t.weight[t.count] = w;
    ++t.count;
  };
  if (kernel == Interpolation::bilinear) {
    push(i0, 1.0 - frac);
    push(i0 + 1, frac);
  } else {
    for (int k = -1; k <= 2; ++k) push(i0 + k, cubic_weight(frac - k));
  }
  return t;
}

}  // namespace

template <typename Scalar>
BasicImage<Scalar> resample(const BasicImage<Scalar>& img, const ResampleSpec& spec) {
  if (img.empty()) throw std::invalid_argument("resample: empty image");
  if (!(spec.scale > 0.0) || !std::isfinite(spec.scale)) {
    throw std::invalid_argument("resample: scale factor must be positive");
  }
  if (spec.out_width < 1 || spec.out_height < 1) {
    throw std::invalid_argument("resample: output dimensions must be >= 1");
  }
  const double x0 = spec.center ? (*spec.center)[0] : img.center_x();
  const double y0 = spec.center ? (*spec.center)[1] : img.center_y();
  const double cx = 0.5 * (spec.out_width - 1);
  const double cy = 0.5 * (spec.out_height - 1);

  std::vector<Taps> tx(spec.out_width), ty(spec.out_height);
  for (int x = 0; x < spec.out_width; ++x) {
    tx[x] = axis_taps((x - cx) / spec.scale + x0, img.width(), spec.kernel, spec.boundary);
  }
  for (int y = 0; y < spec.out_height; ++y) {
    ty[y] = axis_taps((y - cy) / spec.scale + y0, img.height(), spec.kernel, spec.boundary);
  }

  BasicImage<Scalar> out(spec.out_width, spec.out_height, img.channels(), Scalar(0), img.value_range());
  std::vector<double> rows(std::size_t(img.height()) * spec.out_width);
  for (int c = 0; c < img.channels(); ++c) {
    auto src = img.plane(c);
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < spec.out_width; ++x) {
        const Taps& t = tx[x];
        double acc = 0.0;
        for (int q = 0; q < t.count; ++q) acc += t.weight[q] * double(src(y, t.index[q]));
        rows[std::size_t(y) * spec.out_width + x] = acc;
      }
    }
    auto dst = out.plane(c);
    for (int y = 0; y < spec.out_height; ++y) {
      const Taps& t = ty[y];
      for (int x = 0; x < spec.out_width; ++x) {
        double acc = 0.0;
        for (int q = 0; q < t.count; ++q) acc += t.weight[q] * rows[std::size_t(t.index[q]) * spec.out_width + x];
        dst(y, x) = Scalar(acc);
      }
    }
  }
  return out;
}

template <typename Scalar>
BasicImage<Scalar> pad_or_crop(const BasicImage<Scalar>& img, int out_width, int out_height, Boundary mode) {
  if (out_width < 1 || out_height < 1) throw std::invalid_argument("pad_or_crop: output dimensions must be >= 1");
  if (img.empty()) throw std::invalid_argument("pad_or_crop: empty image");
  // Truncating division keeps the extra pixel on the right/bottom both when
  // growing and when shrinking.
  const int ox = (out_width - img.width()) / 2;
  const int oy = (out_height - img.height()) / 2;
  BasicImage<Scalar> out(out_width, out_height, img.channels(), Scalar(0), img.value_range());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < out_height; ++y) {
      const int sy = boundary_index(y - oy, img.height(), mode);
      if (sy < 0) continue;
      for (int x = 0; x < out_width; ++x) {
        const int sx = boundary_index(x - ox, img.width(), mode);
        if (sx < 0) continue;
        out(x, y, c) = img(sx, sy, c);
      }
    }
  }
  return out;
}

template <typename Scalar>
BasicImage<Scalar> gaussian_smooth(const BasicImage<Scalar>& img, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_smooth: sigma must be non-negative");
  if (sigma == 0.0) return img;
  const Kernel1d k = gaussian_kernel_1d(sigma);
  return convolve_separable(img, k, k, Boundary::reflect);
}

template <typename Scalar>
BasicImage<Scalar> arctan_squash(const BasicImage<Scalar>& img, double gain, double offset) {
  BasicImage<Scalar> out = img;
  out.samples() = (img.samples().template cast<double>() - offset)
                      .unaryExpr([gain](double v) { return 2.0 / std::numbers::pi * std::atan(gain * v); })
                      .template cast<Scalar>();
  out.set_value_range({-1.0, 1.0});
  return out;
}

template <typename Scalar>
BasicImage<Scalar> clip(const BasicImage<Scalar>& img, double lo, double hi) {
  if (!(hi > lo)) throw std::invalid_argument("clip: degenerate range");
  BasicImage<Scalar> out = img;
  out.samples() = img.samples().max(Scalar(lo)).min(Scalar(hi));
  return out;
}

template <typename Scalar>
BasicImage<Scalar> clip_and_rescale(const BasicImage<Scalar>& img, double lo, double hi, double new_lo,
                                    double new_hi) {
  if (!(hi > lo) || !(new_hi > new_lo)) throw std::invalid_argument("clip_and_rescale: degenerate range");
  const double gain = (new_hi - new_lo) / (hi - lo);
  BasicImage<Scalar> out = img;
  out.samples() = ((img.samples().template cast<double>().max(lo).min(hi) - lo) * gain + new_lo).template cast<Scalar>();
  out.set_value_range({new_lo, new_hi});
  return out;
}

#define SCN_INSTANTIATE(T)                                                                         \
  template BasicImage<T> resample(const BasicImage<T>&, const ResampleSpec&);                      \
  template BasicImage<T> pad_or_crop(const BasicImage<T>&, int, int, Boundary);                    \
  template BasicImage<T> gaussian_smooth(const BasicImage<T>&, double);                            \
  template BasicImage<T> arctan_squash(const BasicImage<T>&, double, double);                      \
  template BasicImage<T> clip(const BasicImage<T>&, double, double);                               \
  template BasicImage<T> clip_and_rescale(const BasicImage<T>&, double, double, double, double);

SCN_INSTANTIATE(float)
SCN_INSTANTIATE(double)
#undef SCN_INSTANTIATE

// ---------------------------------------------------------------------------

namespace {

constexpr char kImageMagic[4] = {'S', 'C', 'N', 'I'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("read_image: truncated file");
  return v;
}

}  // namespace

void write_image(const std::filesystem::path& path, const Image& img, SampleType type) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_image: cannot open " + path.string());
  os.write(kImageMagic, 4);
  put<std::uint8_t>(os, std::uint8_t(type));
  const char pad[3] = {0, 0, 0};
  os.write(pad, 3);
  put<std::uint32_t>(os, std::uint32_t(img.width()));
  put<std::uint32_t>(os, std::uint32_t(img.height()));
  put<std::uint32_t>(os, std::uint32_t(img.channels()));
  put<double>(os, img.value_range().lo);
  put<double>(os, img.value_range().hi);
  if (type == SampleType::u8) {
    std::vector<std::uint8_t> bytes(std::size_t(img.size()));
    for (Eigen::Index i = 0; i < img.size(); ++i) {
      bytes[std::size_t(i)] = std::uint8_t(std::clamp(std::lround(img.samples()[i]), 0L, 255L));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  } else {
    const Eigen::ArrayXf f = img.samples().cast<float>();
    os.write(reinterpret_cast<const char*>(f.data()), std::streamsize(f.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("write_image: write failed for " + path.string());
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_image: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kImageMagic, 4) != 0) {
    throw std::runtime_error("read_image: bad magic in " + path.string());
  }
  const auto type = SampleType(get<std::uint8_t>(is));
  is.ignore(3);
  const int w = int(get<std::uint32_t>(is));
  const int h = int(get<std::uint32_t>(is));
  const int c = int(get<std::uint32_t>(is));
  ValueRange range{get<double>(is), get<double>(is)};
  Image img(w, h, c, 0.0, range);
  if (type == SampleType::u8) {
    std::vector<std::uint8_t> bytes(std::size_t(img.size()));
    if (!is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()))) {
      throw std::runtime_error("read_image: truncated file");
    }
    for (Eigen::Index i = 0; i < img.size(); ++i) img.samples()[i] = bytes[std::size_t(i)];
  } else if (type == SampleType::f32) {
    Eigen::ArrayXf f(img.size());
    if (!is.read(reinterpret_cast<char*>(f.data()), std::streamsize(f.size() * sizeof(float)))) {
      throw std::runtime_error("read_image: truncated file");
    }
    img.samples() = f.cast<double>();
  } else {
    throw std::runtime_error("read_image: unknown sample type");
  }
  return img;
}

void write_pnm(const std::filesystem::path& path, const Image& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw std::invalid_argument("write_pnm: only 1 or 3 channels supported");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pnm: cannot open " + path.string());
  os << (img.channels() == 1 ? "P5" : "P6") << "\n" << img.width() << " " << img.height() << "\n255\n";
  const double lo = img.value_range().lo;
  const double span = img.value_range().span() > 0 ? img.value_range().span() : 1.0;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const double v = std::clamp((img(x, y, c) - lo) / span, 0.0, 1.0);
        os.put(char(std::uint8_t(std::lround(v * 255.0))));
      }
    }
  }
}

}  // namespace scn
