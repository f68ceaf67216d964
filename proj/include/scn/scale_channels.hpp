#pragma once

#include "scn/gradcheck.hpp"
#include "scn/image.hpp"
#include "scn/imageops.hpp"
#include "scn/nn.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace scn {

enum class Aggregation { fov_max, fov_avg, fov_conc, sw_max };

const char* to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& name);

/// Named architectures: "mnist_cnn" (8 blocks on 112x112), "mnist_base"
/// (4 blocks on the 28x28 channel input), "mnist_base_nobn" (the same
/// without batchnorm, for sliding-window channels) and "cifar_base"
/// (7 padded blocks, global average pooling).
NetworkSpec build_named_network(const std::string& name);

/// {s_min * ratio^k} up to s_max; s_max / s_min must be an integer power of
/// the ratio (within 1e-9 relative).
std::vector<double> geometric_scales(double s_min, double s_max, double ratio);

struct ScaleChannelConfig {
  double s_min = 0.5;
  double s_max = 8.0;
  double ratio = 1.189207115002721;  // 2^(1/4)
  Aggregation aggregation = Aggregation::fov_avg;
  int channel_input = 28;
  /// Out-of-frame samples of a rescaled view: replicate (border) for MNIST,
  /// reflect (mirror) for CIFAR.
  Boundary boundary = Boundary::replicate;
  NetworkSpec base;

  std::vector<double> scales() const;
  std::size_t num_channels() const { return scales().size(); }
  void validate() const;
  nlohmann::json to_json() const;
  static ScaleChannelConfig from_json(const nlohmann::json& j);
};

/// One rescaled copy of the input for one channel.
struct ChannelView {
  double scale;
  ImageF image;
  ResampleSpec geometry;
};

/// Channel s sees the input rescaled by 1/s about the image centre with
/// bilinear interpolation: a channel_input square for the foveated modes,
/// the whole rescaled image (at least channel_input wide) for sw_max.
std::vector<ChannelView> make_channel_views(const ImageF& img, const ScaleChannelConfig& cfg);

/// Network input assembled from a batch of images: foveated modes fold the
/// channel axis into the batch ([B*S, C, h, w], sample-major); sw_max keeps
/// one tensor per channel ([B, C, h_s, w_s]).
template <typename T>
struct ChannelBatch {
  int batch = 0;
  std::vector<double> scales;
  Tensor<T> folded;
  std::vector<Tensor<T>> per_channel;

  template <typename U>
  ChannelBatch<U> cast() const {
    ChannelBatch<U> out{batch, scales, folded.template cast<U>(), {}};
    for (const auto& t : per_channel) out.per_channel.push_back(t.template cast<U>());
    return out;
  }
};

ChannelBatch<float> make_channel_batch(const std::vector<const ImageF*>& images, const ScaleChannelConfig& cfg);

/// Scale-channel network: one shared base network applied to every channel,
/// channel logits aggregated by max, mean, a learned linear map or (sliding
/// window) spatial then channel max.
template <typename T>
class ScaleChannelModel {
 public:
  ScaleChannelModel() = default;
  ScaleChannelModel(ScaleChannelConfig cfg, std::uint64_t seed);
  ScaleChannelModel(ScaleChannelConfig cfg, Network<T> base, Network<T> mix);

  const ScaleChannelConfig& config() const { return cfg_; }
  const std::vector<double>& scales() const { return scales_; }
  std::size_t num_channels() const { return scales_.size(); }
  Network<T>& base() { return base_; }
  const Network<T>& base() const { return base_; }
  /// fov_conc mixing layer (fc over S * num_classes inputs); empty otherwise.
  Network<T>& mix() { return mix_; }
  const Network<T>& mix() const { return mix_; }
  std::size_t num_params() const;
  void zero_grads();

  /// Aggregated logits [B, K]. With `record` the call keeps what backward
  /// needs. Batchnorm statistics are pooled over the folded B*S batch.
  Tensor<T> forward(const ChannelBatch<T>& in, Mode mode, bool record = false);
  void backward(const Tensor<T>& dlogits);

  /// Channel logits [B, S, K] of the last forward call.
  const Tensor<T>& channel_logits() const { return channel_logits_; }
  /// Channel chosen by the max over channels, per (b, k) (fov_max, sw_max;
  /// lowest index on ties).
  const std::vector<int>& argmax_channel() const { return argmax_channel_; }

 private:
  ScaleChannelConfig cfg_;
  std::vector<double> scales_;
  Network<T> base_, mix_;
  std::size_t trunk_end_ = 0;

  Tensor<T> channel_logits_;
  std::vector<int> argmax_channel_;
  int batch_ = 0;
  bool recorded_ = false;
  Trace<T> base_trace_, mix_trace_;
  Tensor<T> mix_input_;
  // sliding window bookkeeping per channel
  std::vector<Trace<T>> trunk_traces_, head_traces_;
  std::vector<std::vector<int>> sw_position_;  // [s][b*K + k] -> window index
  std::vector<std::vector<int>> sw_shape_;     // [s] -> final map {C, H, W}
};

extern template class ScaleChannelModel<float>;
extern template class ScaleChannelModel<double>;

/// Windows of a [B, C, H, W] map with footprint (fh, fw), stride 1, as
/// [B * P, C, fh, fw] with P = (H - fh + 1)(W - fw + 1), sample-major.
template <typename T>
Tensor<T> extract_windows(const Tensor<T>& map, int fh, int fw);

// ---------------------------------------------------------------------------
// Property operations

struct CovarianceStats {
  int shift = 0;              // channel index offset k, t = ratio^k
  int overlapping = 0;        // channels compared
  double mean_abs = 0.0;      // normalised by the logit RMS of the original
  double max_abs = 0.0;
  double logit_rms = 0.0;
};

/// Channel logits of `rescaled` (the input scaled by t = ratio^k) at channel
/// i + k against those of `original` at channel i. Under the 1/s channel
/// convention an object rescaled by t reappears t-fold further along the
/// channel axis.
CovarianceStats covariance_residual(ScaleChannelModel<float>& model, const std::vector<const ImageF*>& original,
                                    const std::vector<const ImageF*>& rescaled, double t);

struct InvarianceGap {
  double mean_abs = 0.0;      // mean |logit difference|
  double max_abs = 0.0;
  double agreement = 0.0;     // fraction of equal argmax decisions
  bool near_boundary = false; // an object size within a ratio step of the channel range ends
};

/// Aggregated output for objects of size `size_a` against the same objects at
/// `size_b`. Sizes near the ends of the channel range set near_boundary.
InvarianceGap invariance_gap(ScaleChannelModel<float>& model, const std::vector<const ImageF*>& a, double size_a,
                             const std::vector<const ImageF*>& b, double size_b);

/// Finite-difference checks of every aggregation (gradients through the
/// shared base network and the fov_conc mixing layer) on small random
/// configurations, in double precision.
std::vector<GradCheckResult> aggregation_gradient_suite(std::uint64_t seed);

}  // namespace scn
