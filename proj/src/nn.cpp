#include "scn/nn.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace scn {

static_assert(std::endian::native == std::endian::little, "checkpoint and dataset files assume a little-endian host");

namespace {

using Index = Eigen::Index;

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
// Upper bound on im2col buffer elements per GEMM chunk.
constexpr Index kColBudget = Index(1) << 22;
constexpr Index kColAlign = 48;

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::batchnorm, LayerKind::relu, LayerKind::fc, LayerKind::dropout,
                 LayerKind::global_avg_pool})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::fc: return "fc";
    case LayerKind::dropout: return "dropout";
    case LayerKind::global_avg_pool: return "global_avg_pool";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// NetworkSpec

std::vector<FeatureShape> NetworkSpec::shapes(FeatureShape in, std::size_t first, std::size_t last) const {
  std::vector<FeatureShape> out{in};
  for (std::size_t i = first; i < last; ++i) {
    const LayerSpec& l = layers[i];
    FeatureShape s = out.back();
    switch (l.kind) {
      case LayerKind::conv:
        if (s.flat) throw std::invalid_argument("layer " + std::to_string(i) + ": conv on flat features");
        s.h = (s.h + 2 * l.pad - l.kernel) / l.stride + 1;
        s.w = (s.w + 2 * l.pad - l.kernel) / l.stride + 1;
        if (out.back().h + 2 * l.pad < l.kernel || out.back().w + 2 * l.pad < l.kernel)
          throw std::invalid_argument("layer " + std::to_string(i) + ": input smaller than the kernel");
        s.c = l.out;
        break;
      case LayerKind::fc: s = {l.out, 1, 1, true}; break;
      case LayerKind::global_avg_pool:
        if (s.flat) throw std::invalid_argument("layer " + std::to_string(i) + ": pooling flat features");
        s = {s.c, 1, 1, true};
        break;
      default: break;
    }
    out.push_back(s);
  }
  return out;
}

std::vector<FeatureShape> NetworkSpec::shapes() const {
  return shapes({in_channels, in_height, in_width, false}, 0, layers.size());
}

void NetworkSpec::validate() const {
  if (in_channels < 1 || in_height < 1 || in_width < 1) throw std::invalid_argument("NetworkSpec: bad input geometry");
  if (num_classes < 1) throw std::invalid_argument("NetworkSpec: num_classes must be positive");
  if (layers.empty()) throw std::invalid_argument("NetworkSpec: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "NetworkSpec layer " + std::to_string(i) + ": ";
    if (l.kind == LayerKind::conv) {
      if (l.stride != 1 && l.stride != 2) throw std::invalid_argument(where + "stride must be 1 or 2");
      if (l.pad < 0) throw std::invalid_argument(where + "negative padding");
      if (l.kernel < 1) throw std::invalid_argument(where + "bad kernel size");
    }
    if ((l.kind == LayerKind::conv || l.kind == LayerKind::fc) && l.out < 1)
      throw std::invalid_argument(where + "output width must be positive");
    if (l.kind == LayerKind::dropout && !(l.p >= 0.0 && l.p < 1.0))
      throw std::invalid_argument(where + "dropout p must lie in [0, 1)");
  }
  auto last = std::find_if(layers.rbegin(), layers.rend(), [](const LayerSpec& l) {
    return l.kind == LayerKind::conv || l.kind == LayerKind::fc;
  });
  if (last == layers.rend() || last->out != num_classes)
    throw std::invalid_argument("NetworkSpec: last trainable layer must output num_classes logits");
  const auto s = shapes();
  if (s.back().size() != num_classes) throw std::invalid_argument("NetworkSpec: output is not a logit vector");
}

std::size_t NetworkSpec::num_params() const {
  const auto s = shapes();
  std::size_t n = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.kind == LayerKind::conv) n += std::size_t(l.out) * (s[i].c * l.kernel * l.kernel + 1);
    if (l.kind == LayerKind::fc) n += std::size_t(l.out) * (s[i].size() + 1);
    if (l.kind == LayerKind::batchnorm) n += 2 * std::size_t(s[i].c);
  }
  return n;
}

std::size_t NetworkSpec::trunk_end() const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::fc) return i;
  return layers.size();
}

nlohmann::json NetworkSpec::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["input"] = {in_channels, in_height, in_width};
  j["num_classes"] = num_classes;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json e{{"kind", to_string(l.kind)}};
    if (l.kind == LayerKind::conv) e.update({{"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad}});
    if (l.kind == LayerKind::fc) e["out"] = l.out;
    if (l.kind == LayerKind::dropout) e["p"] = l.p;
    j["layers"].push_back(e);
  }
  return j;
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.name = j.value("name", "");
  const auto in = j.at("input");
  s.in_channels = in.at(0);
  s.in_height = in.at(1);
  s.in_width = in.at(2);
  s.num_classes = j.at("num_classes");
  for (const auto& e : j.at("layers")) {
    LayerSpec l;
    l.kind = parse_kind(e.at("kind"));
    if (l.kind == LayerKind::conv) {
      l.out = e.at("out");
      l.kernel = e.value("kernel", 3);
      l.stride = e.value("stride", 1);
      l.pad = e.value("pad", 1);
    }
    if (l.kind == LayerKind::fc) l.out = e.at("out");
    if (l.kind == LayerKind::dropout) l.p = e.at("p");
    s.layers.push_back(l);
  }
  s.validate();
  return s;
}

std::string NetworkSpec::hash() const {
  const std::string text = to_json().dump();
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(text.data()), uInt(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

// ---------------------------------------------------------------------------
// Convolution helpers (row-major im2col; rows = (c, ky, kx), columns =
// (sample, oy, ox)).

namespace {

struct ConvGeom {
  int c, h, w, k, stride, pad, ho, wo;
  Index rows() const { return Index(c) * k * k; }
  Index plane() const { return Index(ho) * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols, Index ld) {
  for (int c = 0; c < g.c; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((Index(c) * g.k + ky) * g.k + kx) * ld;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          T* dst = row + Index(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (Index(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, Index ld, const ConvGeom& g, T* dx) {
  for (int c = 0; c < g.c; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((Index(c) * g.k + ky) * g.k + kx) * ld;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + Index(oy) * g.wo;
          T* dst = dx + (Index(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

int chunk_size(const ConvGeom& g, int n) {
  const Index per = std::max<Index>(1, g.rows() * g.plane());
  return int(std::clamp<Index>(kColBudget / per, 1, std::max(1, n)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T>::Network(NetworkSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  shapes_ = spec_.shapes();
  Index off = 0, boff = 0;
  buffer_offset_.assign(spec_.layers.size(), -1);
  auto add = [&](std::size_t layer, const char* name, Index n) {
    blocks_.push_back({layer, name, off, n});
    off += n;
  };
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    const FeatureShape& in = shapes_[i];
    if (l.kind == LayerKind::conv) {
      add(i, "weight", Index(l.out) * in.c * l.kernel * l.kernel);
      add(i, "bias", l.out);
    } else if (l.kind == LayerKind::fc) {
      add(i, "weight", Index(l.out) * in.size());
      add(i, "bias", l.out);
    } else if (l.kind == LayerKind::batchnorm) {
      add(i, "gamma", in.c);
      add(i, "beta", in.c);
      buffer_offset_[i] = boff;
      boff += 2 * in.c;
    }
  }
  params_.setZero(off);
  grads_.setZero(off);
  buffers_.setZero(boff);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (spec_.layers[i].kind != LayerKind::batchnorm) continue;
    param(i, "gamma").setOnes();
    buffers_.segment(buffer_offset_[i] + shapes_[i].c, shapes_[i].c).setOnes();
  }
}

template <typename T>
const ParamBlock& Network<T>::block(std::size_t layer, const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.layer == layer && b.name == name) return b;
  throw std::out_of_range("Network: layer " + std::to_string(layer) + " has no parameter '" + name + "'");
}

template <typename T>
Eigen::Map<Vec<T>> Network<T>::param(std::size_t layer, const std::string& name) {
  const auto& b = block(layer, name);
  return Eigen::Map<Vec<T>>(params_.data() + b.offset, b.size);
}

template <typename T>
Eigen::Map<const Vec<T>> Network<T>::param(std::size_t layer, const std::string& name) const {
  const auto& b = block(layer, name);
  return Eigen::Map<const Vec<T>>(params_.data() + b.offset, b.size);
}

template <typename T>
Eigen::Map<Vec<T>> Network<T>::grad(std::size_t layer, const std::string& name) {
  const auto& b = block(layer, name);
  return Eigen::Map<Vec<T>>(grads_.data() + b.offset, b.size);
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, Mode mode, Trace<T>* trace, std::size_t first, std::size_t last) {
  last = std::min(last, spec_.layers.size());
  if (first > last) throw std::invalid_argument("Network::forward: bad layer range");
  FeatureShape in;
  if (x.rank() == 4) in = {x.dim(1), x.dim(2), x.dim(3), false};
  else if (x.rank() == 2) in = {x.dim(1), 1, 1, true};
  else throw std::invalid_argument("Network::forward: expected NCHW or NC input, got " + shape_str(x.shape));
  const FeatureShape& nominal = shapes_[first];
  const bool fc_first = first < last && spec_.layers[first].kind == LayerKind::fc;
  if (in.c != nominal.c && !(fc_first && in.size() == nominal.size()))
    throw std::invalid_argument("Network::forward: input " + shape_str(x.shape) + " does not match the spec");
  const auto geo = spec_.shapes(in, first, last);
  const int n = x.dim(0);

  if (trace) {
    trace->mode = mode;
    trace->first = first;
    trace->last = last;
    trace->inputs.assign(last - first, {});
    trace->aux.assign(last - first, {});
    trace->inv_std.assign(last - first, {});
  }

  Tensor<T> cur = x;
  for (std::size_t i = first; i < last; ++i) {
    const LayerSpec& l = spec_.layers[i];
    const FeatureShape& s = geo[i - first];
    const FeatureShape& o = geo[i - first + 1];
    Tensor<T> out;
    switch (l.kind) {
      case LayerKind::conv: {
        const ConvGeom g{s.c, s.h, s.w, l.kernel, l.stride, l.pad, o.h, o.w};
        auto wb = block(i, "weight");
        Eigen::Map<const RowMatrix<T>> W(params_.data() + wb.offset, l.out, g.rows());
        auto b = param(i, "bias");
        out = Tensor<T>({n, l.out, o.h, o.w});
        const int chunk = chunk_size(g, n);
        RowMatrix<T> cols, y;
        for (int n0 = 0; n0 < n; n0 += chunk) {
          const int nc = std::min(chunk, n - n0);
          // Eigen's GEMM runs remainder rows of its (transposed) problem
          // through narrower kernels with a different summation order. A
          // column count that is a multiple of 48 (3 AVX-512 float packets)
          // keeps every output position on one kernel, so a pixel's value
          // does not depend on where it lands in the buffer.
          const Index used = nc * g.plane();
          const Index ld = (used + kColAlign - 1) / kColAlign * kColAlign;
          cols.resize(g.rows(), ld);
          cols.rightCols(ld - used).setZero();
          for (int j = 0; j < nc; ++j) im2col(cur.sample(n0 + j), g, cols.data() + j * g.plane(), ld);
          y.noalias() = W * cols;
          for (int j = 0; j < nc; ++j)
            for (int oc = 0; oc < l.out; ++oc)
              Eigen::Map<Vec<T>>(out.sample(n0 + j) + oc * g.plane(), g.plane()) =
                  y.row(oc).segment(j * g.plane(), g.plane()).transpose().array() + b[oc];
        }
        break;
      }
      case LayerKind::batchnorm: {
        const int c = s.c;
        const Index hw = Index(s.h) * s.w;
        auto gamma = param(i, "gamma");
        auto beta = param(i, "beta");
        auto run_mean = buffers_.segment(buffer_offset_[i], c);
        auto run_var = buffers_.segment(buffer_offset_[i] + c, c);
        Vec<T> mean(c), inv_std(c);
        if (mode == Mode::train) {
          const double m = double(n) * double(hw);
          if (m < 2) throw std::invalid_argument("Network::forward: batchnorm needs more than one value per channel");
          for (int ch = 0; ch < c; ++ch) {
            double sum = 0.0, sq = 0.0;
            for (int k = 0; k < n; ++k) {
              auto v = Eigen::Map<const Vec<T>>(cur.sample(k) + ch * hw, hw).template cast<double>();
              sum += v.sum();
            }
            const double mu = sum / m;
            for (int k = 0; k < n; ++k) {
              auto v = Eigen::Map<const Vec<T>>(cur.sample(k) + ch * hw, hw).template cast<double>();
              sq += (v.array() - mu).square().sum();
            }
            const double var = sq / m;
            mean[ch] = T(mu);
            inv_std[ch] = T(1.0 / std::sqrt(var + kBnEps));
            run_mean[ch] = T((1.0 - kBnMomentum) * run_mean[ch] + kBnMomentum * mu);
            run_var[ch] = T((1.0 - kBnMomentum) * run_var[ch] + kBnMomentum * var * m / (m - 1.0));
          }
        } else {
          mean = run_mean;
          for (int ch = 0; ch < c; ++ch) inv_std[ch] = T(1.0 / std::sqrt(double(run_var[ch]) + kBnEps));
        }
        Tensor<T> xhat(cur.shape);
        out = Tensor<T>(cur.shape);
        for (int k = 0; k < n; ++k)
          for (int ch = 0; ch < c; ++ch) {
            auto src = Eigen::Map<const Vec<T>>(cur.sample(k) + ch * hw, hw).array();
            auto xh = Eigen::Map<Vec<T>>(xhat.sample(k) + ch * hw, hw).array();
            xh = (src - mean[ch]) * inv_std[ch];
            Eigen::Map<Vec<T>>(out.sample(k) + ch * hw, hw).array() = gamma[ch] * xh + beta[ch];
          }
        if (trace) {
          trace->aux[i - first] = std::move(xhat);
          trace->inv_std[i - first] = inv_std;
        }
        break;
      }
      case LayerKind::relu:
        out = Tensor<T>(cur.shape);
        out.data = cur.data.cwiseMax(T(0));
        break;
      case LayerKind::dropout:
        if (mode == Mode::train && l.p > 0.0) {
          Tensor<T> mask(cur.shape);
          const T keep = T(1.0 / (1.0 - l.p));
          for (Index k = 0; k < mask.size(); ++k) mask.data[k] = dropout_rng_.uniform() < l.p ? T(0) : keep;
          out = Tensor<T>(cur.shape);
          out.data = cur.data.cwiseProduct(mask.data);
          if (trace) trace->aux[i - first] = std::move(mask);
        } else {
          out = cur;
        }
        break;
      case LayerKind::fc: {
        const Index d = s.size();
        if (d != shapes_[i].size())
          throw std::invalid_argument("Network::forward: fc layer " + std::to_string(i) + " expects " +
                                      std::to_string(shapes_[i].size()) + " features, got " + std::to_string(d));
        auto wb = block(i, "weight");
        Eigen::Map<const RowMatrix<T>> W(params_.data() + wb.offset, l.out, d);
        Eigen::Map<const RowMatrix<T>> X(cur.data.data(), n, d);
        out = Tensor<T>({n, l.out});
        Eigen::Map<RowMatrix<T>> Y(out.data.data(), n, l.out);
        Y.noalias() = X * W.transpose();
        Y.rowwise() += param(i, "bias").transpose();
        break;
      }
      case LayerKind::global_avg_pool: {
        const Index hw = Index(s.h) * s.w;
        out = Tensor<T>({n, s.c});
        Eigen::Map<const RowMatrix<T>> X(cur.data.data(), Index(n) * s.c, hw);
        out.data = X.rowwise().mean();
        break;
      }
    }
    if (trace) trace->inputs[i - first] = std::move(cur);
    cur = std::move(out);
  }
  return cur;
}

template <typename T>
Tensor<T> Network<T>::backward(const Trace<T>& trace, const Tensor<T>& dout, bool input_grad) {
  if (trace.inputs.size() != trace.last - trace.first || trace.last > spec_.layers.size())
    throw std::invalid_argument("Network::backward: missing activations");
  if (trace.inputs.empty()) return dout;
  Tensor<T> d = dout;
  for (std::size_t i = trace.last; i-- > trace.first;) {
    const LayerSpec& l = spec_.layers[i];
    const Tensor<T>& x = trace.inputs[i - trace.first];
    if (x.size() == 0 && x.shape.empty()) throw std::invalid_argument("Network::backward: missing activations");
    const int n = x.dim(0);
    const bool need_dx = input_grad || i > trace.first;
    Tensor<T> dx;
    switch (l.kind) {
      case LayerKind::conv: {
        const ConvGeom g{x.dim(1), x.dim(2), x.dim(3), l.kernel, l.stride, l.pad, d.dim(2), d.dim(3)};
        auto wb = block(i, "weight");
        Eigen::Map<const RowMatrix<T>> W(params_.data() + wb.offset, l.out, g.rows());
        Eigen::Map<RowMatrix<T>> dW(grads_.data() + wb.offset, l.out, g.rows());
        auto db = grad(i, "bias");
        if (need_dx) dx = Tensor<T>(x.shape);
        const int chunk = chunk_size(g, n);
        RowMatrix<T> cols, dy, dcols;
        for (int n0 = 0; n0 < n; n0 += chunk) {
          const int nc = std::min(chunk, n - n0);
          const Index ld = nc * g.plane();
          cols.resize(g.rows(), ld);
          dy.resize(l.out, ld);
          for (int j = 0; j < nc; ++j) {
            im2col(x.sample(n0 + j), g, cols.data() + j * g.plane(), ld);
            for (int oc = 0; oc < l.out; ++oc)
              dy.row(oc).segment(j * g.plane(), g.plane()) =
                  Eigen::Map<const Vec<T>>(d.sample(n0 + j) + oc * g.plane(), g.plane()).transpose();
          }
          dW.noalias() += dy * cols.transpose();
          db += dy.rowwise().sum();
          if (need_dx) {
            dcols.noalias() = W.transpose() * dy;
            for (int j = 0; j < nc; ++j) col2im(dcols.data() + j * g.plane(), ld, g, dx.sample(n0 + j));
          }
        }
        break;
      }
      case LayerKind::batchnorm: {
        const Tensor<T>& xhat = trace.aux[i - trace.first];
        const Vec<T>& inv_std = trace.inv_std[i - trace.first];
        const int c = x.dim(1);
        const Index hw = x.stride0() / c;
        auto gamma = param(i, "gamma");
        auto dgamma = grad(i, "gamma");
        auto dbeta = grad(i, "beta");
        const double m = double(n) * double(hw);
        dx = Tensor<T>(x.shape);
        for (int ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int k = 0; k < n; ++k) {
            auto dyv = Eigen::Map<const Vec<T>>(d.sample(k) + ch * hw, hw).template cast<double>().array();
            auto xh = Eigen::Map<const Vec<T>>(xhat.sample(k) + ch * hw, hw).template cast<double>().array();
            sum_dy += dyv.sum();
            sum_dy_xhat += (dyv * xh).sum();
          }
          dgamma[ch] += T(sum_dy_xhat);
          dbeta[ch] += T(sum_dy);
          if (!need_dx) continue;
          const T scale = gamma[ch] * inv_std[ch];
          for (int k = 0; k < n; ++k) {
            auto dyv = Eigen::Map<const Vec<T>>(d.sample(k) + ch * hw, hw).array();
            auto out = Eigen::Map<Vec<T>>(dx.sample(k) + ch * hw, hw).array();
            if (trace.mode == Mode::train) {
              auto xh = Eigen::Map<const Vec<T>>(xhat.sample(k) + ch * hw, hw).array();
              out = scale * (dyv - T(sum_dy / m) - xh * T(sum_dy_xhat / m));
            } else {
              out = scale * dyv;
            }
          }
        }
        break;
      }
      case LayerKind::relu:
        dx = Tensor<T>(x.shape);
        dx.data = (x.data.array() > T(0)).select(d.data.array(), T(0)).matrix();
        break;
      case LayerKind::dropout: {
        const Tensor<T>& mask = trace.aux[i - trace.first];
        dx = d;
        dx.shape = x.shape;
        if (mask.size() > 0) dx.data = d.data.cwiseProduct(mask.data);
        break;
      }
      case LayerKind::fc: {
        const Index dim = x.stride0();
        auto wb = block(i, "weight");
        Eigen::Map<const RowMatrix<T>> W(params_.data() + wb.offset, l.out, dim);
        Eigen::Map<RowMatrix<T>> dW(grads_.data() + wb.offset, l.out, dim);
        Eigen::Map<const RowMatrix<T>> X(x.data.data(), n, dim);
        Eigen::Map<const RowMatrix<T>> dY(d.data.data(), n, l.out);
        dW.noalias() += dY.transpose() * X;
        grad(i, "bias") += dY.colwise().sum().transpose();
        if (need_dx) {
          dx = Tensor<T>(x.shape);
          Eigen::Map<RowMatrix<T>>(dx.data.data(), n, dim).noalias() = dY * W;
        }
        break;
      }
      case LayerKind::global_avg_pool: {
        const Index hw = x.stride0() / x.dim(1);
        dx = Tensor<T>(x.shape);
        Eigen::Map<RowMatrix<T>> dX(dx.data.data(), Index(n) * x.dim(1), hw);
        dX.colwise() = d.data / T(hw);
        break;
      }
    }
    if (!need_dx) return {};
    d = std::move(dx);
  }
  return d;
}

template class Network<float>;
template class Network<double>;

template <typename T>
Network<T> init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  Network<T> net(spec);
  const auto shapes = spec.shapes();
  Rng rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::fc) continue;
    const double fan_in = l.kind == LayerKind::conv ? double(shapes[i].c) * l.kernel * l.kernel : shapes[i].size();
    const double sd = std::sqrt(2.0 / fan_in);
    auto w = net.param(i, "weight");
    for (Index k = 0; k < w.size(); ++k) w[k] = T(sd * rng.normal());
  }
  net.seed_dropout(seed ^ 0x9e3779b97f4a7c15ULL);
  return net;
}

template Network<float> init_weights<float>(const NetworkSpec&, std::uint64_t);
template Network<double> init_weights<double>(const NetworkSpec&, std::uint64_t);

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* dlogits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [N, K]");
  const int n = logits.dim(0), k = logits.dim(1);
  if (std::size_t(n) != labels.size()) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  if (n == 0) throw std::invalid_argument("softmax_cross_entropy: empty batch");
  if (dlogits) *dlogits = Tensor<T>(logits.shape);
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    if (labels[std::size_t(r)] < 0 || labels[std::size_t(r)] >= k)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    auto z = Eigen::Map<const Vec<T>>(logits.sample(r), k).template cast<double>().eval();
    const double zmax = z.maxCoeff();
    const Eigen::VectorXd e = (z.array() - zmax).exp().matrix();
    const double sum = e.sum();
    loss += std::log(sum) + zmax - z[labels[std::size_t(r)]];
    if (dlogits) {
      auto g = Eigen::Map<Vec<T>>(dlogits->sample(r), k);
      for (int c = 0; c < k; ++c) g[c] = T((e[c] / sum - (c == labels[std::size_t(r)] ? 1.0 : 0.0)) / n);
    }
  }
  return loss / n;
}

template double softmax_cross_entropy<float>(const Tensor<float>&, const std::vector<int>&, Tensor<float>*);
template double softmax_cross_entropy<double>(const Tensor<double>&, const std::vector<int>&, Tensor<double>*);

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("argmax_rows: logits must be [N, K]");
  std::vector<int> out(std::size_t(logits.dim(0)));
  for (int r = 0; r < logits.dim(0); ++r) {
    Index best;
    Eigen::Map<const Vec<T>>(logits.sample(r), logits.dim(1)).maxCoeff(&best);
    out[std::size_t(r)] = int(best);
  }
  return out;
}

template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);

// ---------------------------------------------------------------------------
// Optimisation

nlohmann::json Schedule::to_json() const {
  switch (kind) {
    case Kind::constant: return {{"kind", "constant"}, {"start", start}};
    case Kind::exp_decay: return {{"kind", "exp_decay"}, {"start", start}, {"period", period}, {"floor", floor}};
    case Kind::cosine: return {{"kind", "cosine"}, {"start", start}, {"floor", floor}, {"decay_time", decay_time}};
  }
  return {};
}

Schedule Schedule::from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind");
  if (kind == "constant") return constant(j.at("start"));
  if (kind == "exp_decay") return exp_decay(j.value("start", 3e-3), j.value("period", 2.0), j.value("floor", 5e-5));
  if (kind == "cosine") return cosine(j.value("start", 1e-3), j.value("floor", 5e-5), j.value("decay_time", 75.0));
  throw std::invalid_argument("unknown schedule kind '" + kind + "'");
}

double lr_at(const Schedule& s, double t) {
  if (!(t >= 0.0)) throw std::invalid_argument("lr_at: time must be non-negative");
  switch (s.kind) {
    case Schedule::Kind::constant: return s.start;
    case Schedule::Kind::exp_decay: return std::max(s.floor, s.start * std::exp(-t / s.period));
    case Schedule::Kind::cosine:
      return s.floor + (s.start - s.floor) * (1.0 + std::cos(std::numbers::pi * std::min(t / s.decay_time, 1.0))) / 2.0;
  }
  return s.start;
}

template <typename T>
void adam_step(Adam<T>& opt, Vec<T>& params, const Vec<T>& grads, double lr) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient/parameter size mismatch");
  if (opt.m.size() == 0 && opt.v.size() == 0) opt.reset(params.size());
  if (opt.m.size() != params.size() || opt.v.size() != params.size())
    throw std::invalid_argument("adam_step: optimiser state does not match the parameters");
  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, double(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, double(opt.step));
  opt.m = T(opt.beta1) * opt.m + T(1.0 - opt.beta1) * grads;
  opt.v = T(opt.beta2) * opt.v + T(1.0 - opt.beta2) * grads.cwiseAbs2();
  params.array() -= T(lr) * (opt.m.array() / T(c1)) / ((opt.v.array() / T(c2)).sqrt() + T(opt.eps));
}

template void adam_step<float>(Adam<float>&, Vec<float>&, const Vec<float>&, double);
template void adam_step<double>(Adam<double>&, Vec<double>&, const Vec<double>&, double);

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'C', 'N', 'K'};

void put(std::ostream& os, const Vec<float>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(float)));
}

void get(std::istream& is, Vec<float>& v, Index n, const std::string& what) {
  v.resize(n);
  is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(float)));
  if (!is) throw std::runtime_error("read_checkpoint: truncated " + what);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<const Network<float>*>& nets,
                      const std::vector<const Adam<float>*>& opts, const CheckpointInfo& info) {
  if (nets.size() != opts.size()) throw std::invalid_argument("write_checkpoint: one optimiser per network");
  nlohmann::json header;
  header["step"] = info.step;
  header["epoch"] = info.epoch;
  header["schedule"] = info.schedule.to_json();
  header["meta"] = info.meta;
  header["networks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < nets.size(); ++i) {
    const Adam<float>& a = *opts[i];
    header["networks"].push_back({{"spec", nets[i]->spec().to_json()},
                                  {"spec_hash", nets[i]->spec().hash()},
                                  {"num_params", nets[i]->params().size()},
                                  {"num_buffers", nets[i]->buffers().size()},
                                  {"adam", {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"step", a.step},
                                            {"has_state", a.m.size() > 0}}}});
  }
  const std::string text = header.dump();
  auto tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("write_checkpoint: cannot open " + tmp.string());
    os.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&version), sizeof version);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), std::streamsize(len));
    for (std::size_t i = 0; i < nets.size(); ++i) {
      put(os, nets[i]->params());
      put(os, nets[i]->buffers());
      if (opts[i]->m.size() > 0) {
        put(os, opts[i]->m);
        put(os, opts[i]->v);
      }
    }
    if (!os) throw std::runtime_error("write_checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_checkpoint: cannot open " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("read_checkpoint: " + path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion)
    throw std::runtime_error("read_checkpoint: unsupported version " + std::to_string(version));
  if (len > (std::uint64_t(1) << 30)) throw std::runtime_error("read_checkpoint: corrupt header length");
  std::string text(len, '\0');
  is.read(text.data(), std::streamsize(len));
  if (!is) throw std::runtime_error("read_checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ck;
  ck.info.step = header.at("step");
  ck.info.epoch = header.at("epoch");
  ck.info.schedule = Schedule::from_json(header.at("schedule"));
  ck.info.meta = header.at("meta");
  for (const auto& e : header.at("networks")) {
    const NetworkSpec spec = NetworkSpec::from_json(e.at("spec"));
    if (spec.hash() != e.at("spec_hash").get<std::string>())
      throw std::runtime_error("read_checkpoint: spec hash mismatch for '" + spec.name + "'");
    Network<float> net(spec);
    if (net.params().size() != e.at("num_params").get<Index>() || net.buffers().size() != e.at("num_buffers").get<Index>())
      throw std::runtime_error("read_checkpoint: parameter count mismatch for '" + spec.name + "'");
    get(is, net.params(), net.params().size(), "parameters");
    get(is, net.buffers(), net.buffers().size(), "buffers");
    Adam<float> opt;
    const auto& a = e.at("adam");
    opt.beta1 = a.at("beta1");
    opt.beta2 = a.at("beta2");
    opt.eps = a.at("eps");
    opt.step = a.at("step");
    if (a.at("has_state").get<bool>()) {
      get(is, opt.m, net.params().size(), "optimiser state");
      get(is, opt.v, net.params().size(), "optimiser state");
    }
    ck.nets.push_back(std::move(net));
    ck.opts.push_back(std::move(opt));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("read_checkpoint: trailing bytes");
  return ck;
}

}  // namespace scn
