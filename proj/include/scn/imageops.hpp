#pragma once

#include "scn/image.hpp"
#include "scn/kernels.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>

namespace scn {

enum class Interpolation { bilinear, bicubic };

/// Uniform rescaling about a centre point. The output pixel x' samples the
/// input at (x' - c_out) / scale + x0, where c_out is the geometric centre of
/// the output grid and x0 defaults to the input centre. scale > 1 magnifies.
struct ResampleSpec {
  double scale = 1.0;
  std::optional<Eigen::Vector2d> center;
  int out_width = 1;
  int out_height = 1;
  Interpolation kernel = Interpolation::bilinear;
  Boundary boundary = Boundary::zero;

  static ResampleSpec about_center(double scale, int out_width, int out_height,
                                   Interpolation kernel = Interpolation::bilinear,
                                   Boundary boundary = Boundary::zero) {
    return {scale, std::nullopt, out_width, out_height, kernel, boundary};
  }
};

template <typename Scalar>
BasicImage<Scalar> resample(const BasicImage<Scalar>& img, const ResampleSpec& spec);

/// Centred embedding (growing) or window extraction (shrinking) per axis.
/// Odd size differences put the extra pixel on the right/bottom.
template <typename Scalar>
BasicImage<Scalar> pad_or_crop(const BasicImage<Scalar>& img, int out_width, int out_height,
                               Boundary mode = Boundary::zero);

/// Separable truncated Gaussian (radius ceil(4 sigma)), reflected at the
/// border. sigma == 0 returns the input unchanged.
template <typename Scalar>
BasicImage<Scalar> gaussian_smooth(const BasicImage<Scalar>& img, double sigma);

/// I_out = 2/pi * atan(gain * (I_in - offset)); output range (-1, 1).
template <typename Scalar>
BasicImage<Scalar> arctan_squash(const BasicImage<Scalar>& img, double gain, double offset);

/// Clamp to [lo, hi], then map affinely onto [new_lo, new_hi].
template <typename Scalar>
BasicImage<Scalar> clip_and_rescale(const BasicImage<Scalar>& img, double lo, double hi,
                                    double new_lo, double new_hi);

template <typename Scalar>
BasicImage<Scalar> clip(const BasicImage<Scalar>& img, double lo, double hi);

// ---------------------------------------------------------------------------
// Serialisation: "SCNI" magic, u8 dtype (0 = uint8, 1 = float32), u8 padding x3,
// u32 width, height, channels (little-endian), f64 range lo/hi, planar samples.

enum class SampleType : std::uint8_t { u8 = 0, f32 = 1 };

void write_image(const std::filesystem::path& path, const Image& img, SampleType type = SampleType::f32);
Image read_image(const std::filesystem::path& path);

/// 8-bit PGM (1 channel) or PPM (3 channels); samples mapped from the image's
/// value range onto [0, 255].
void write_pnm(const std::filesystem::path& path, const Image& img);

}  // namespace scn
