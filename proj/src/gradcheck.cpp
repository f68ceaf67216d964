#include "scn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace scn {

GradCheckResult check_objective(const std::string& label, const Objective& f, const Vec<double>& theta,
                                const std::vector<ParamBlock>& blocks, double h) {
  Vec<double> analytic(theta.size());
  f(theta, &analytic);
  Vec<double> numeric(theta.size());
  Vec<double> probe = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double up = f(probe, nullptr);
    probe[i] = theta[i] - h;
    const double down = f(probe, nullptr);
    probe[i] = theta[i];
    numeric[i] = (up - down) / (2.0 * h);
  }
  GradCheckResult r{label, 0.0, "", std::size_t(theta.size())};
  for (const auto& b : blocks) {
    const auto a = analytic.segment(b.offset, b.size);
    const auto n = numeric.segment(b.offset, b.size);
    const double scale = std::max({a.norm(), n.norm(), 1e-6});
    const double rel = (a - n).norm() / scale;
    if (rel >= r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_block = b.name;
    }
  }
  return r;
}

GradCheckResult gradient_check(Network<double>& net, const Tensor<double>& x, const std::vector<int>& labels,
                               double h) {
  const Eigen::Index np = net.params().size();
  std::vector<ParamBlock> blocks;
  for (const auto& b : net.blocks())
    blocks.push_back({b.layer, "layer" + std::to_string(b.layer) + "." + b.name, b.offset, b.size});
  blocks.push_back({net.num_layers(), "input", np, x.size()});

  Vec<double> theta(np + x.size());
  theta << net.params(), x.data;
  const Vec<double> buffers = net.buffers();

  Objective f = [&](const Vec<double>& t, Vec<double>* grad) {
    net.params() = t.head(np);
    net.buffers() = buffers;
    Tensor<double> input = x;
    input.data = t.tail(x.size());
    net.seed_dropout(1234);
    Trace<double> trace;
    const Tensor<double> logits = net.forward(input, Mode::train, grad ? &trace : nullptr);
    Tensor<double> dlogits;
    const double loss = softmax_cross_entropy(logits, labels, grad ? &dlogits : nullptr);
    if (grad) {
      net.zero_grads();
      const Tensor<double> dx = net.backward(trace, dlogits, true);
      grad->resize(t.size());
      *grad << net.grads(), dx.data;
    }
    return loss;
  };
  GradCheckResult r = check_objective(net.spec().name, f, theta, blocks, h);
  net.params() = theta.head(np);
  net.buffers() = buffers;
  return r;
}

namespace {

struct Case {
  std::string label;
  std::vector<int> input;  // N, C, H, W (or N, D)
  std::vector<LayerSpec> layers;
};

}  // namespace

std::vector<GradCheckResult> layer_gradient_suite(std::uint64_t seed) {
  const int k = 4;
  const std::vector<Case> cases = {
      {"fc", {3, 7}, {LayerSpec::fc(k)}},
      {"conv_s1_p1", {2, 2, 5, 5}, {LayerSpec::conv(3, 1, 1), LayerSpec::fc(k)}},
      {"conv_s1_p0", {2, 2, 6, 5}, {LayerSpec::conv(3, 1, 0), LayerSpec::fc(k)}},
      {"conv_s2_p0", {2, 2, 7, 7}, {LayerSpec::conv(3, 2, 0), LayerSpec::fc(k)}},
      {"conv_s2_p1", {2, 3, 6, 6}, {LayerSpec::conv(2, 2, 1), LayerSpec::fc(k)}},
      {"batchnorm", {3, 2, 4, 4}, {LayerSpec::conv(3, 1, 1), LayerSpec::batchnorm(), LayerSpec::fc(k)}},
      {"batchnorm_flat", {5, 6}, {LayerSpec::fc(5), LayerSpec::batchnorm(), LayerSpec::fc(k)}},
      {"relu", {3, 2, 4, 4}, {LayerSpec::conv(3, 1, 1), LayerSpec::relu(), LayerSpec::fc(k)}},
      {"dropout", {3, 6}, {LayerSpec::fc(8), LayerSpec::dropout(0.3), LayerSpec::fc(k)}},
      {"global_avg_pool", {2, 2, 5, 5}, {LayerSpec::conv(3, 1, 1), LayerSpec::global_avg_pool(), LayerSpec::fc(k)}},
      {"conv_block_stack",
       {3, 1, 11, 11},
       {LayerSpec::conv(4, 1, 0), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::conv(4, 2, 0),
        LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::fc(6), LayerSpec::relu(), LayerSpec::dropout(0.15),
        LayerSpec::fc(k)}},
  };
  std::vector<GradCheckResult> out;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const Case& tc = cases[c];
    NetworkSpec spec;
    spec.name = tc.label;
    spec.num_classes = k;
    spec.layers = tc.layers;
    if (tc.input.size() == 4) {
      spec.in_channels = tc.input[1];
      spec.in_height = tc.input[2];
      spec.in_width = tc.input[3];
    } else {
      spec.in_channels = tc.input[1];
      spec.in_height = spec.in_width = 1;
    }
    Network<double> net = init_weights<double>(spec, seed + c);
    Rng rng = Rng::derive(seed, {c});
    // Non-trivial biases and batchnorm affine parameters.
    for (auto& b : net.blocks())
      if (b.name != "weight")
        for (Eigen::Index i = 0; i < b.size; ++i) net.params()[b.offset + i] += 0.3 * rng.normal();
    Tensor<double> x(tc.input);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data[i] = rng.normal();
    std::vector<int> labels(std::size_t(tc.input[0]));
    for (auto& l : labels) l = int(rng.below(std::uint64_t(k)));
    out.push_back(gradient_check(net, x, labels));
  }
  return out;
}

}  // namespace scn
