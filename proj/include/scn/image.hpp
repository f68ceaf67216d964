#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace scn {

/// Nominal sample range of an image, e.g. [0, 255] for raw MNIST or [-1, 1]
/// after the arctan squashing step.
struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;

  double span() const { return hi - lo; }
};

/// Planar multi-channel raster. Samples are stored channel-major, then
/// row-major: index = (c * height + y) * width + x. Pixel centres sit at
/// integer coordinates, so the geometric centre is ((w-1)/2, (h-1)/2).
template <typename Scalar>
class BasicImage {
 public:
  using Samples = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using PlaneMap = Eigen::Map<Plane>;
  using ConstPlaneMap = Eigen::Map<const Plane>;

  BasicImage() = default;

  BasicImage(int width, int height, int channels = 1, Scalar fill = Scalar(0),
             ValueRange range = {})
      : width_(width), height_(height), channels_(channels), range_(range) {
    if (width < 0 || height < 0 || channels < 0) {
      throw std::invalid_argument("BasicImage: negative dimension");
    }
    data_.setConstant(Eigen::Index(width) * height * channels, fill);
  }

  static BasicImage from_plane(const Plane& plane, ValueRange range = {}) {
    BasicImage img(int(plane.cols()), int(plane.rows()), 1, Scalar(0), range);
    img.plane(0) = plane;
    return img;
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  Eigen::Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0; }

  double center_x() const noexcept { return 0.5 * (width_ - 1); }
  double center_y() const noexcept { return 0.5 * (height_ - 1); }

  Eigen::Index index(int x, int y, int c = 0) const noexcept {
    return (Eigen::Index(c) * height_ + y) * width_ + x;
  }

  Scalar& operator()(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  Scalar operator()(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  PlaneMap plane(int c) {
    return PlaneMap(data_.data() + Eigen::Index(c) * width_ * height_, height_, width_);
  }
  ConstPlaneMap plane(int c) const {
    return ConstPlaneMap(data_.data() + Eigen::Index(c) * width_ * height_, height_, width_);
  }

  Samples& samples() noexcept { return data_; }
  const Samples& samples() const noexcept { return data_; }

  const ValueRange& value_range() const noexcept { return range_; }
  void set_value_range(ValueRange r) noexcept { range_ = r; }

  bool all_finite() const { return data_.isFinite().all(); }

  bool same_geometry(const BasicImage& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

  template <typename Other>
  BasicImage<Other> cast() const {
    BasicImage<Other> out(width_, height_, channels_, Other(0), range_);
    out.samples() = data_.template cast<Other>();
    return out;
  }

  bool operator==(const BasicImage& o) const {
    return same_geometry(o) && (data_ == o.data_).all();
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  ValueRange range_{};
  Samples data_;
};

using Image = BasicImage<double>;
using ImageF = BasicImage<float>;

/// Throws std::invalid_argument if the image is empty or holds NaN/Inf.
template <typename Scalar>
void require_valid(const BasicImage<Scalar>& img, const char* what) {
  if (img.empty()) throw std::invalid_argument(std::string(what) + ": empty image");
  if (!img.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite sample");
}

}  // namespace scn
