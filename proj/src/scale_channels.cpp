#include "scn/scale_channels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace scn {

namespace {

using Index = Eigen::Index;

const char* boundary_name(Boundary b) {
  switch (b) {
    case Boundary::zero: return "zero";
    case Boundary::reflect: return "reflect";
    case Boundary::replicate: return "replicate";
  }
  return "?";
}

Boundary parse_boundary(const std::string& s) {
  if (s == "zero") return Boundary::zero;
  if (s == "reflect") return Boundary::reflect;
  if (s == "replicate") return Boundary::replicate;
  throw std::invalid_argument("unknown boundary '" + s + "'");
}

bool has_batchnorm(const NetworkSpec& s) {
  return std::any_of(s.layers.begin(), s.layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::batchnorm; });
}

std::vector<LayerSpec> conv_blocks(const std::vector<std::pair<int, int>>& widths_strides, int pad, bool bn) {
  std::vector<LayerSpec> out;
  for (auto [w, s] : widths_strides) {
    out.push_back(LayerSpec::conv(w, s, pad));
    if (bn) out.push_back(LayerSpec::batchnorm());
    out.push_back(LayerSpec::relu());
  }
  return out;
}

NetworkSpec mix_spec(std::size_t channels, int classes) {
  NetworkSpec s;
  s.name = "fov_conc_mix";
  s.in_channels = int(channels) * classes;
  s.in_height = s.in_width = 1;
  s.num_classes = classes;
  s.layers = {LayerSpec::fc(classes)};
  return s;
}

int sw_view_size(int n, double s, int minimum) {
  return std::max(minimum, int(std::lround(n / s)));
}

}  // namespace

const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::fov_max: return "fov_max";
    case Aggregation::fov_avg: return "fov_avg";
    case Aggregation::fov_conc: return "fov_conc";
    case Aggregation::sw_max: return "sw_max";
  }
  return "?";
}

Aggregation parse_aggregation(const std::string& name) {
  for (auto a : {Aggregation::fov_max, Aggregation::fov_avg, Aggregation::fov_conc, Aggregation::sw_max})
    if (name == to_string(a)) return a;
  throw std::invalid_argument("unknown aggregation '" + name + "'");
}

NetworkSpec build_named_network(const std::string& name) {
  NetworkSpec s;
  s.name = name;
  s.num_classes = 10;
  const std::vector<LayerSpec> head = {LayerSpec::fc(100), LayerSpec::relu(), LayerSpec::dropout(0.15),
                                       LayerSpec::fc(10)};
  if (name == "mnist_cnn") {
    s.in_channels = 1;
    s.in_height = s.in_width = 112;
    s.layers = conv_blocks({{16, 1}, {16, 2}, {16, 1}, {16, 2}, {32, 1}, {32, 2}, {32, 1}, {32, 2}}, 0, true);
    s.layers.insert(s.layers.end(), head.begin(), head.end());
  } else if (name == "mnist_base" || name == "mnist_base_nobn") {
    s.in_channels = 1;
    s.in_height = s.in_width = 28;
    s.layers = conv_blocks({{16, 1}, {16, 2}, {32, 1}, {32, 2}}, 0, name == "mnist_base");
    s.layers.insert(s.layers.end(), head.begin(), head.end());
  } else if (name == "cifar_base") {
    s.in_channels = 3;
    s.in_height = s.in_width = 32;
    s.layers = conv_blocks({{32, 1}, {32, 1}, {32, 2}, {64, 1}, {64, 2}, {128, 1}, {128, 2}}, 1, true);
    s.layers.push_back(LayerSpec::global_avg_pool());
    s.layers.push_back(LayerSpec::fc(10));
  } else {
    throw std::invalid_argument("unknown network '" + name + "'");
  }
  s.validate();
  return s;
}

std::vector<double> geometric_scales(double s_min, double s_max, double ratio) {
  if (!(s_min > 0.0) || !(s_max >= s_min)) throw std::invalid_argument("geometric_scales: need 0 < s_min <= s_max");
  if (s_max == s_min) return {s_min};
  if (!(ratio > 1.0)) throw std::invalid_argument("geometric_scales: ratio must exceed 1");
  const double steps = std::log(s_max / s_min) / std::log(ratio);
  const long n = std::lround(steps);
  if (std::abs(s_min * std::pow(ratio, double(n)) - s_max) > 1e-9 * s_max)
    throw std::invalid_argument("geometric_scales: s_max / s_min is not a power of the ratio");
  std::vector<double> out(std::size_t(n) + 1);
  for (long k = 0; k <= n; ++k) {
    double v = s_min * std::pow(ratio, double(k));
    // Land exactly on powers of two (s = 1 must give the identity view).
    const double e = std::round(std::log2(v));
    if (std::abs(std::log2(v) - e) < 1e-12) v = std::exp2(e);
    out[std::size_t(k)] = v;
  }
  return out;
}

std::vector<double> ScaleChannelConfig::scales() const { return geometric_scales(s_min, s_max, ratio); }

void ScaleChannelConfig::validate() const {
  scales();
  base.validate();
  if (channel_input < 1) throw std::invalid_argument("ScaleChannelConfig: channel_input must be positive");
  if (base.in_height != channel_input || base.in_width != channel_input)
    throw std::invalid_argument("ScaleChannelConfig: base network input must be channel_input square");
  if (aggregation == Aggregation::sw_max) {
    if (has_batchnorm(base)) throw std::invalid_argument("ScaleChannelConfig: sw_max base must not use batchnorm");
    if (base.trunk_end() == 0 || base.trunk_end() == base.layers.size())
      throw std::invalid_argument("ScaleChannelConfig: sw_max base needs a conv trunk followed by fc layers");
  }
}

nlohmann::json ScaleChannelConfig::to_json() const {
  return {{"s_min", s_min},
          {"s_max", s_max},
          {"ratio", ratio},
          {"aggregation", to_string(aggregation)},
          {"channel_input", channel_input},
          {"boundary", boundary_name(boundary)},
          {"base", base.to_json()}};
}

ScaleChannelConfig ScaleChannelConfig::from_json(const nlohmann::json& j) {
  ScaleChannelConfig c;
  c.s_min = j.value("s_min", c.s_min);
  c.s_max = j.value("s_max", c.s_max);
  c.ratio = j.value("ratio", c.ratio);
  c.aggregation = parse_aggregation(j.value("aggregation", std::string("fov_avg")));
  c.channel_input = j.value("channel_input", c.channel_input);
  c.boundary = parse_boundary(j.value("boundary", std::string("replicate")));
  const auto& b = j.at("base");
  c.base = b.is_string() ? build_named_network(b.get<std::string>()) : NetworkSpec::from_json(b);
  c.validate();
  return c;
}

std::vector<ChannelView> make_channel_views(const ImageF& img, const ScaleChannelConfig& cfg) {
  require_valid(img, "make_channel_views");
  std::vector<ChannelView> out;
  for (double s : cfg.scales()) {
    int w = cfg.channel_input, h = cfg.channel_input;
    if (cfg.aggregation == Aggregation::sw_max) {
      w = sw_view_size(img.width(), s, cfg.channel_input);
      h = sw_view_size(img.height(), s, cfg.channel_input);
    }
    const ResampleSpec spec = ResampleSpec::about_center(1.0 / s, w, h, Interpolation::bilinear, cfg.boundary);
    out.push_back({s, resample(img, spec), spec});
  }
  return out;
}

ChannelBatch<float> make_channel_batch(const std::vector<const ImageF*>& images, const ScaleChannelConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("make_channel_batch: empty batch");
  ChannelBatch<float> batch;
  batch.batch = int(images.size());
  batch.scales = cfg.scales();
  const int S = int(batch.scales.size());
  const int c = images.front()->channels();
  for (const ImageF* img : images)
    if (!img->same_geometry(*images.front())) throw std::invalid_argument("make_channel_batch: mixed image sizes");
  if (c != cfg.base.in_channels) throw std::invalid_argument("make_channel_batch: image channels do not match the base network");
  if (cfg.aggregation != Aggregation::sw_max)
    batch.folded = Tensor<float>({batch.batch * S, c, cfg.channel_input, cfg.channel_input});
  for (int b = 0; b < batch.batch; ++b) {
    const auto views = make_channel_views(*images[std::size_t(b)], cfg);
    for (int s = 0; s < S; ++s) {
      const ImageF& v = views[std::size_t(s)].image;
      if (cfg.aggregation == Aggregation::sw_max) {
        if (b == 0) batch.per_channel.emplace_back(std::vector<int>{batch.batch, c, v.height(), v.width()});
        std::copy(v.samples().data(), v.samples().data() + v.size(), batch.per_channel[std::size_t(s)].sample(b));
      } else {
        std::copy(v.samples().data(), v.samples().data() + v.size(), batch.folded.sample(b * S + s));
      }
    }
  }
  return batch;
}

template <typename T>
Tensor<T> extract_windows(const Tensor<T>& map, int fh, int fw) {
  if (map.rank() != 4) throw std::invalid_argument("extract_windows: expected [B, C, H, W]");
  const int B = map.dim(0), C = map.dim(1), H = map.dim(2), W = map.dim(3);
  if (H < fh || W < fw) throw std::invalid_argument("extract_windows: feature map smaller than the classifier footprint");
  const int ph = H - fh + 1, pw = W - fw + 1;
  Tensor<T> out({B * ph * pw, C, fh, fw});
  for (int b = 0; b < B; ++b)
    for (int py = 0; py < ph; ++py)
      for (int px = 0; px < pw; ++px) {
        T* dst = out.sample((b * ph + py) * pw + px);
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < fh; ++y)
            for (int x = 0; x < fw; ++x) *dst++ = map.sample(b)[(Index(c) * H + py + y) * W + px + x];
      }
  return out;
}

template Tensor<float> extract_windows<float>(const Tensor<float>&, int, int);
template Tensor<double> extract_windows<double>(const Tensor<double>&, int, int);

// ---------------------------------------------------------------------------
// ScaleChannelModel

template <typename T>
ScaleChannelModel<T>::ScaleChannelModel(ScaleChannelConfig cfg, std::uint64_t seed)
    : ScaleChannelModel(cfg, init_weights<T>(cfg.base, seed),
                        cfg.aggregation == Aggregation::fov_conc
                            ? init_weights<T>(mix_spec(cfg.num_channels(), cfg.base.num_classes), seed + 1)
                            : Network<T>()) {}

template <typename T>
ScaleChannelModel<T>::ScaleChannelModel(ScaleChannelConfig cfg, Network<T> base, Network<T> mix)
    : cfg_(std::move(cfg)), base_(std::move(base)), mix_(std::move(mix)) {
  cfg_.validate();
  scales_ = cfg_.scales();
  if (!(base_.spec() == cfg_.base)) throw std::invalid_argument("ScaleChannelModel: base network does not match the config");
  if (cfg_.aggregation == Aggregation::fov_conc) {
    if (!(mix_.spec() == mix_spec(scales_.size(), cfg_.base.num_classes)))
      throw std::invalid_argument("ScaleChannelModel: fov_conc needs a mixing layer over S * num_classes inputs");
  } else if (mix_.num_layers() != 0) {
    throw std::invalid_argument("ScaleChannelModel: only fov_conc has a mixing layer");
  }
  trunk_end_ = cfg_.base.trunk_end();
}

template <typename T>
std::size_t ScaleChannelModel<T>::num_params() const {
  return std::size_t(base_.params().size() + mix_.params().size());
}

template <typename T>
void ScaleChannelModel<T>::zero_grads() {
  base_.zero_grads();
  mix_.zero_grads();
}

template <typename T>
Tensor<T> ScaleChannelModel<T>::forward(const ChannelBatch<T>& in, Mode mode, bool record) {
  const int S = int(scales_.size());
  const int K = cfg_.base.num_classes;
  const int B = in.batch;
  batch_ = B;
  recorded_ = record;
  channel_logits_ = Tensor<T>({B, S, K});

  if (cfg_.aggregation == Aggregation::sw_max) {
    if (int(in.per_channel.size()) != S) throw std::invalid_argument("ScaleChannelModel: expected one tensor per channel");
    const FeatureShape foot = cfg_.base.shapes()[trunk_end_];
    trunk_traces_.assign(std::size_t(S), {});
    head_traces_.assign(std::size_t(S), {});
    sw_position_.assign(std::size_t(S), std::vector<int>(std::size_t(B) * K, 0));
    sw_shape_.assign(std::size_t(S), {});
    for (int s = 0; s < S; ++s) {
      const Tensor<T>& x = in.per_channel[std::size_t(s)];
      if (x.rank() != 4 || x.dim(0) != B) throw std::invalid_argument("ScaleChannelModel: channel tensor has the wrong batch");
      const Tensor<T> map = base_.forward(x, mode, record ? &trunk_traces_[std::size_t(s)] : nullptr, 0, trunk_end_);
      sw_shape_[std::size_t(s)] = {map.dim(1), map.dim(2), map.dim(3)};
      const Tensor<T> windows = extract_windows(map, foot.h, foot.w);
      const int P = windows.dim(0) / B;
      const Tensor<T> logits =
          base_.forward(windows, mode, record ? &head_traces_[std::size_t(s)] : nullptr, trunk_end_);
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          int best = 0;
          for (int p = 1; p < P; ++p)
            if (logits.sample(b * P + p)[k] > logits.sample(b * P + best)[k]) best = p;
          sw_position_[std::size_t(s)][std::size_t(b * K + k)] = best;
          channel_logits_.sample(b)[s * K + k] = logits.sample(b * P + best)[k];
        }
    }
  } else {
    if (in.folded.rank() != 4 || in.folded.dim(0) != B * S)
      throw std::invalid_argument("ScaleChannelModel: folded input must be [B*S, C, h, w]");
    const Tensor<T> logits = base_.forward(in.folded, mode, record ? &base_trace_ : nullptr);
    channel_logits_.data = logits.data;
  }

  argmax_channel_.assign(std::size_t(B) * K, 0);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) {
      int best = 0;
      for (int s = 1; s < S; ++s)
        if (channel_logits_.sample(b)[s * K + k] > channel_logits_.sample(b)[best * K + k]) best = s;
      argmax_channel_[std::size_t(b * K + k)] = best;
    }

  Tensor<T> out({B, K});
  switch (cfg_.aggregation) {
    case Aggregation::fov_max:
    case Aggregation::sw_max:
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
          out.sample(b)[k] = channel_logits_.sample(b)[argmax_channel_[std::size_t(b * K + k)] * K + k];
      break;
    case Aggregation::fov_avg:
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
          // Summing in sorted order makes the mean independent of channel order.
          std::vector<T> v(static_cast<std::size_t>(S));
          for (int s = 0; s < S; ++s) v[std::size_t(s)] = channel_logits_.sample(b)[s * K + k];
          std::sort(v.begin(), v.end());
          double sum = 0.0;
          for (T x : v) sum += double(x);
          out.sample(b)[k] = T(sum / S);
        }
      break;
    case Aggregation::fov_conc:
      mix_input_ = Tensor<T>({B, S * K});
      mix_input_.data = channel_logits_.data;
      out = mix_.forward(mix_input_, mode, record ? &mix_trace_ : nullptr);
      break;
  }
  return out;
}

template <typename T>
void ScaleChannelModel<T>::backward(const Tensor<T>& dlogits) {
  if (!recorded_) throw std::logic_error("ScaleChannelModel::backward: forward was not recorded");
  const int S = int(scales_.size());
  const int K = cfg_.base.num_classes;
  const int B = batch_;
  if (dlogits.rank() != 2 || dlogits.dim(0) != B || dlogits.dim(1) != K)
    throw std::invalid_argument("ScaleChannelModel::backward: gradient shape mismatch");

  Tensor<T> dl({B * S, K});
  switch (cfg_.aggregation) {
    case Aggregation::fov_max:
    case Aggregation::sw_max:
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
          dl.sample(b * S + argmax_channel_[std::size_t(b * K + k)])[k] = dlogits.sample(b)[k];
      break;
    case Aggregation::fov_avg:
      for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s)
          for (int k = 0; k < K; ++k) dl.sample(b * S + s)[k] = dlogits.sample(b)[k] / T(S);
      break;
    case Aggregation::fov_conc: {
      const Tensor<T> d = mix_.backward(mix_trace_, dlogits, true);
      dl.data = d.data;
      break;
    }
  }

  if (cfg_.aggregation != Aggregation::sw_max) {
    base_.backward(base_trace_, dl);
    return;
  }
  for (int s = 0; s < S; ++s) {
    bool any = false;
    for (int b = 0; b < B && !any; ++b)
      for (int k = 0; k < K; ++k) any = any || dl.sample(b * S + s)[k] != T(0);
    if (!any) continue;
    const Trace<T>& head = head_traces_[std::size_t(s)];
    const Tensor<T>& windows = head.inputs.front();
    const int P = windows.dim(0) / B;
    Tensor<T> dhead({B * P, K});
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k)
        dhead.sample(b * P + sw_position_[std::size_t(s)][std::size_t(b * K + k)])[k] = dl.sample(b * S + s)[k];
    const Tensor<T> dwin = base_.backward(head, dhead, true);
    const auto& shape = sw_shape_[std::size_t(s)];
    const int C = shape[0], H = shape[1], W = shape[2];
    const int fh = windows.dim(2), fw = windows.dim(3);
    const int pw = W - fw + 1;
    Tensor<T> dmap({B, C, H, W});
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < P; ++p) {
        const int py = p / pw, px = p % pw;
        const T* src = dwin.sample(b * P + p);
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < fh; ++y)
            for (int x = 0; x < fw; ++x) dmap.sample(b)[(Index(c) * H + py + y) * W + px + x] += *src++;
      }
    base_.backward(trunk_traces_[std::size_t(s)], dmap);
  }
}

template class ScaleChannelModel<float>;
template class ScaleChannelModel<double>;

// ---------------------------------------------------------------------------

CovarianceStats covariance_residual(ScaleChannelModel<float>& model, const std::vector<const ImageF*>& original,
                                    const std::vector<const ImageF*>& rescaled, double t) {
  if (original.size() != rescaled.size() || original.empty())
    throw std::invalid_argument("covariance_residual: need equally many original and rescaled images");
  const ScaleChannelConfig& cfg = model.config();
  const int S = int(model.num_channels());
  const int K = cfg.base.num_classes;
  int k = 0;
  if (S > 1) {
    k = int(std::lround(std::log(t) / std::log(cfg.ratio)));
    if (std::abs(std::pow(cfg.ratio, k) - t) > 1e-9 * t)
      throw std::invalid_argument("covariance_residual: t must be an integer power of the channel ratio");
  } else if (t != 1.0) {
    throw std::invalid_argument("covariance_residual: no overlapping channels");
  }
  const int lo = std::max(0, -k), hi = std::min(S, S - k);
  if (hi <= lo) throw std::invalid_argument("covariance_residual: no overlapping channels");

  model.forward(make_channel_batch(original, cfg), Mode::eval);
  const Tensor<float> lo_logits = model.channel_logits();
  model.forward(make_channel_batch(rescaled, cfg), Mode::eval);
  const Tensor<float>& re_logits = model.channel_logits();

  CovarianceStats st;
  st.shift = k;
  st.overlapping = hi - lo;
  double sum_abs = 0.0, sum_sq = 0.0, max_abs = 0.0;
  std::size_t count = 0;
  for (int b = 0; b < int(original.size()); ++b)
    for (int i = lo; i < hi; ++i)
      for (int c = 0; c < K; ++c) {
        const double a = lo_logits.sample(b)[i * K + c];
        const double r = re_logits.sample(b)[(i + k) * K + c];
        sum_abs += std::abs(r - a);
        max_abs = std::max(max_abs, std::abs(r - a));
        sum_sq += a * a;
        ++count;
      }
  st.logit_rms = std::sqrt(sum_sq / double(count));
  const double norm = st.logit_rms > 0.0 ? st.logit_rms : 1.0;
  st.mean_abs = sum_abs / double(count) / norm;
  st.max_abs = max_abs / norm;
  return st;
}

InvarianceGap invariance_gap(ScaleChannelModel<float>& model, const std::vector<const ImageF*>& a, double size_a,
                             const std::vector<const ImageF*>& b, double size_b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("invariance_gap: need equally many images");
  const ScaleChannelConfig& cfg = model.config();
  InvarianceGap gap;
  const double inner_lo = cfg.s_min * cfg.ratio * (1.0 - 1e-12), inner_hi = cfg.s_max / cfg.ratio * (1.0 + 1e-12);
  for (double s : {size_a, size_b})
    if (!(s > 0.0)) throw std::invalid_argument("invariance_gap: object sizes must be positive");
    else if (s < inner_lo || s > inner_hi) gap.near_boundary = true;
  const Tensor<float> la = model.forward(make_channel_batch(a, cfg), Mode::eval);
  const Tensor<float> lb = model.forward(make_channel_batch(b, cfg), Mode::eval);
  const Vec<float> diff = (la.data - lb.data).cwiseAbs();
  gap.mean_abs = diff.mean();
  gap.max_abs = diff.maxCoeff();
  const auto pa = argmax_rows(la), pb = argmax_rows(lb);
  std::size_t same = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) same += pa[i] == pb[i];
  gap.agreement = double(same) / double(pa.size());
  return gap;
}

// ---------------------------------------------------------------------------

std::vector<GradCheckResult> aggregation_gradient_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  NetworkSpec bn_base;
  bn_base.name = "tiny_base";
  bn_base.in_height = bn_base.in_width = 7;
  bn_base.num_classes = 3;
  bn_base.layers = {LayerSpec::conv(3, 1, 0), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::conv(3, 2, 0),
                    LayerSpec::relu(), LayerSpec::fc(5), LayerSpec::relu(), LayerSpec::fc(3)};
  NetworkSpec plain = bn_base;
  plain.name = "tiny_base_nobn";
  plain.layers.erase(plain.layers.begin() + 1);

  const Aggregation modes[] = {Aggregation::fov_max, Aggregation::fov_avg, Aggregation::fov_conc, Aggregation::sw_max};
  for (std::size_t m = 0; m < 4; ++m) {
    ScaleChannelConfig cfg;
    cfg.s_min = 0.5;
    cfg.s_max = 2.0;
    cfg.ratio = std::sqrt(2.0);
    cfg.aggregation = modes[m];
    cfg.channel_input = 7;
    cfg.base = modes[m] == Aggregation::sw_max ? plain : bn_base;
    ScaleChannelModel<double> model(cfg, seed + m);
    Rng rng = Rng::derive(seed, {m});
    for (auto* net : {&model.base(), &model.mix()})
      for (const auto& b : net->blocks())
        if (b.name != "weight")
          for (Eigen::Index i = 0; i < b.size; ++i) net->params()[b.offset + i] += 0.2 * rng.normal();

    std::vector<ImageF> images(3, ImageF(12, 12));
    std::vector<const ImageF*> ptrs;
    for (auto& img : images) {
      for (Eigen::Index i = 0; i < img.size(); ++i) img.samples()[i] = float(rng.normal());
      ptrs.push_back(&img);
    }
    const ChannelBatch<double> batch = make_channel_batch(ptrs, cfg).cast<double>();
    const std::vector<int> labels = {0, 2, 1};

    const Eigen::Index nb = model.base().params().size(), nm = model.mix().params().size();
    std::vector<ParamBlock> blocks;
    for (const auto& b : model.base().blocks())
      blocks.push_back({b.layer, "base.layer" + std::to_string(b.layer) + "." + b.name, b.offset, b.size});
    for (const auto& b : model.mix().blocks())
      blocks.push_back({b.layer, "mix." + b.name, nb + b.offset, b.size});
    Vec<double> theta(nb + nm);
    theta << model.base().params(), model.mix().params();
    const Vec<double> buffers = model.base().buffers();

    Objective f = [&](const Vec<double>& t, Vec<double>* grad) {
      model.base().params() = t.head(nb);
      model.mix().params() = t.tail(nm);
      model.base().buffers() = buffers;
      model.base().seed_dropout(7);
      const Tensor<double> logits = model.forward(batch, Mode::train, grad != nullptr);
      Tensor<double> d;
      const double loss = softmax_cross_entropy(logits, labels, grad ? &d : nullptr);
      if (grad) {
        model.zero_grads();
        model.backward(d);
        grad->resize(t.size());
        *grad << model.base().grads(), model.mix().grads();
      }
      return loss;
    };
    out.push_back(check_objective(std::string("aggregation_") + to_string(modes[m]), f, theta, blocks));
  }
  return out;
}

}  // namespace scn
