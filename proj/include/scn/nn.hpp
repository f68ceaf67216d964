#pragma once

#include "scn/random.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace scn {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor. Feature maps are NCHW, flat features NC.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  Vec<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    Eigen::Index n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    data.setConstant(n, fill);
  }

  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape.at(std::size_t(i)); }
  Eigen::Index size() const { return data.size(); }
  /// Elements per leading index (one sample).
  Eigen::Index stride0() const { return shape.empty() || shape[0] == 0 ? 0 : data.size() / shape[0]; }
  bool all_finite() const { return data.allFinite(); }

  T* sample(int n) { return data.data() + n * stride0(); }
  const T* sample(int n) const { return data.data() + n * stride0(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data = data.template cast<U>();
    return out;
  }
};

enum class LayerKind { conv, batchnorm, relu, fc, dropout, global_avg_pool };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int out = 0;        // conv output channels / fc output width
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  double p = 0.0;     // dropout probability

  static LayerSpec conv(int out_ch, int stride = 1, int pad = 1) { return {LayerKind::conv, out_ch, 3, stride, pad, 0.0}; }
  static LayerSpec batchnorm() { return {LayerKind::batchnorm}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec fc(int out_dim) { return {LayerKind::fc, out_dim}; }
  static LayerSpec dropout(double p) { return {LayerKind::dropout, 0, 3, 1, 1, p}; }
  static LayerSpec global_avg_pool() { return {LayerKind::global_avg_pool}; }

  bool trainable() const { return kind == LayerKind::conv || kind == LayerKind::fc || kind == LayerKind::batchnorm; }
  bool operator==(const LayerSpec&) const = default;
};

/// Activation geometry between layers; flat features have h = w = 1 and
/// flat = true.
struct FeatureShape {
  int c = 0, h = 0, w = 0;
  bool flat = false;
  int size() const { return c * h * w; }
  bool operator==(const FeatureShape&) const = default;
};

struct NetworkSpec {
  std::string name;
  int in_channels = 1;
  int in_height = 28;
  int in_width = 28;
  int num_classes = 10;
  std::vector<LayerSpec> layers;

  /// Shape after each layer for the nominal input (size layers + 1).
  std::vector<FeatureShape> shapes() const;
  std::vector<FeatureShape> shapes(FeatureShape input, std::size_t first, std::size_t last) const;
  void validate() const;
  std::size_t num_params() const;
  /// Index of the first fc layer (end of the convolutional trunk).
  std::size_t trunk_end() const;

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
  /// CRC-32 of the canonical JSON, as 8 hex digits.
  std::string hash() const;
  bool operator==(const NetworkSpec&) const = default;
};

enum class Mode { train, eval };

/// Per-call record of what backward needs: layer inputs and layer-specific
/// auxiliaries (batchnorm x-hat and 1/std, dropout masks).
template <typename T>
struct Trace {
  Mode mode = Mode::train;
  std::size_t first = 0, last = 0;
  std::vector<Tensor<T>> inputs;
  std::vector<Tensor<T>> aux;
  std::vector<Vec<T>> inv_std;
};

struct ParamBlock {
  std::size_t layer;
  std::string name;   // "weight", "bias", "gamma", "beta"
  Eigen::Index offset, size;
};

template <typename T>
class Network {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  Network() = default;
  /// All parameters zero, batchnorm scale 1 and running variance 1.
  explicit Network(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return spec_.layers.size(); }

  Vec<T>& params() { return params_; }
  const Vec<T>& params() const { return params_; }
  Vec<T>& grads() { return grads_; }
  const Vec<T>& grads() const { return grads_; }
  /// Batchnorm running mean/variance, laid out per batchnorm layer.
  Vec<T>& buffers() { return buffers_; }
  const Vec<T>& buffers() const { return buffers_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

  Eigen::Map<Vec<T>> param(std::size_t layer, const std::string& name);
  Eigen::Map<const Vec<T>> param(std::size_t layer, const std::string& name) const;
  Eigen::Map<Vec<T>> grad(std::size_t layer, const std::string& name);

  void zero_grads() { grads_.setZero(); }
  /// Reseeds the dropout stream.
  void seed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

  /// Runs layers [first, last). With a trace the call records what backward
  /// needs; batchnorm running statistics move only in train mode.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Trace<T>* trace = nullptr, std::size_t first = 0,
                    std::size_t last = npos);

  /// Accumulates parameter gradients of the layers recorded in `trace` and
  /// returns the gradient w.r.t. the traced input when `input_grad` is set.
  Tensor<T> backward(const Trace<T>& trace, const Tensor<T>& dout, bool input_grad = false);

  template <typename U>
  Network<U> cast() const {
    Network<U> out(spec_);
    out.params() = params_.template cast<U>();
    out.buffers() = buffers_.template cast<U>();
    return out;
  }

 private:
  NetworkSpec spec_;
  std::vector<FeatureShape> shapes_;
  std::vector<ParamBlock> blocks_;
  std::vector<Eigen::Index> buffer_offset_;
  Vec<T> params_, grads_, buffers_;
  Rng dropout_rng_{0};

  const ParamBlock& block(std::size_t layer, const std::string& name) const;
};

extern template class Network<float>;
extern template class Network<double>;

/// He-normal weights (std sqrt(2 / fan_in)), zero biases, batchnorm (1, 0).
template <typename T>
Network<T> init_weights(const NetworkSpec& spec, std::uint64_t seed);

/// Mean softmax cross-entropy over the batch; writes d loss / d logits when
/// `dlogits` is given.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* dlogits = nullptr);

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

// ---------------------------------------------------------------------------
// Optimisation

struct Schedule {
  enum class Kind { constant, exp_decay, cosine };
  Kind kind = Kind::exp_decay;
  double start = 3e-3;
  double floor = 5e-5;
  double period = 2.0;       // exp_decay: time for one factor-e decay
  double decay_time = 75.0;  // cosine: T

  static Schedule constant(double lr) { return {Kind::constant, lr, lr, 1.0, 1.0}; }
  static Schedule exp_decay(double start = 3e-3, double period = 2.0, double floor = 5e-5) {
    return {Kind::exp_decay, start, floor, period, 1.0};
  }
  static Schedule cosine(double start = 1e-3, double floor = 5e-5, double decay_time = 75.0) {
    return {Kind::cosine, start, floor, 1.0, decay_time};
  }

  nlohmann::json to_json() const;
  static Schedule from_json(const nlohmann::json& j);
};

double lr_at(const Schedule& schedule, double t);

template <typename T>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;
  Vec<T> m, v;

  void reset(Eigen::Index n) {
    m.setZero(n);
    v.setZero(n);
    step = 0;
  }
};

template <typename T>
void adam_step(Adam<T>& opt, Vec<T>& params, const Vec<T>& grads, double lr);

// ---------------------------------------------------------------------------
// Checkpoints: "SCNK", u32 version, u64 header length, JSON header (specs and
// their hashes, step, epoch, schedule, adam state scalars, user metadata),
// then per network float32 params, buffers, adam m and v.

struct CheckpointInfo {
  std::int64_t step = 0;
  int epoch = 0;
  Schedule schedule;
  nlohmann::json meta = nlohmann::json::object();
};

struct Checkpoint {
  std::vector<Network<float>> nets;
  std::vector<Adam<float>> opts;
  CheckpointInfo info;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<const Network<float>*>& nets,
                      const std::vector<const Adam<float>*>& opts, const CheckpointInfo& info);
/// Throws on a bad magic, unknown version, truncated payload or a stored spec
/// whose hash does not match its header entry.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace scn
