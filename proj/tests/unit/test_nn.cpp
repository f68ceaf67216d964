#include "scn/gradcheck.hpp"
#include "scn/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace scn;

namespace {

NetworkSpec make_spec(std::vector<LayerSpec> layers, int c, int h, int w, int classes) {
  NetworkSpec s;
  s.name = "test";
  s.in_channels = c;
  s.in_height = h;
  s.in_width = w;
  s.num_classes = classes;
  s.layers = std::move(layers);
  return s;
}

Tensor<double> random_tensor(std::vector<int> shape, std::uint64_t seed) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("spec validation") {
  CHECK_NOTHROW(make_spec({LayerSpec::fc(3)}, 2, 1, 1, 3).validate());
  CHECK_THROWS_AS(make_spec({LayerSpec::fc(4)}, 2, 1, 1, 3).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make_spec({LayerSpec::conv(2, 3), LayerSpec::fc(3)}, 1, 8, 8, 3).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make_spec({LayerSpec::dropout(1.0), LayerSpec::fc(3)}, 2, 1, 1, 3).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make_spec({LayerSpec::conv(3, 1, 0), LayerSpec::fc(3)}, 1, 2, 2, 3).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make_spec({}, 1, 2, 2, 3).validate(), std::invalid_argument);

  const NetworkSpec s = make_spec({LayerSpec::conv(4, 2, 0), LayerSpec::batchnorm(), LayerSpec::relu(),
                                   LayerSpec::dropout(0.25), LayerSpec::fc(3)},
                                  2, 9, 9, 3);
  CHECK(s.num_params() == 4 * 19 + 8 + 3 * 65);
  CHECK(Network<float>(s).params().size() == Eigen::Index(s.num_params()));
  CHECK(NetworkSpec::from_json(s.to_json()) == s);
  CHECK(NetworkSpec::from_json(s.to_json()).hash() == s.hash());
  CHECK(s.hash().size() == 8);
  CHECK(s.trunk_end() == 4);
}

TEST_CASE("zero network gives zero logits and a uniform softmax") {
  Network<double> net(make_spec({LayerSpec::conv(3, 1, 1), LayerSpec::relu(), LayerSpec::fc(5)}, 1, 6, 6, 5));
  const Tensor<double> logits = net.forward(random_tensor({2, 1, 6, 6}, 1), Mode::eval);
  CHECK(logits.data.cwiseAbs().maxCoeff() == 0.0);
  Tensor<double> d;
  const double loss = softmax_cross_entropy(logits, {0, 3}, &d);
  CHECK(loss == doctest::Approx(std::log(5.0)));
  // (softmax - onehot) / batch
  CHECK(d.sample(0)[0] == doctest::Approx((0.2 - 1.0) / 2));
  CHECK(d.sample(0)[1] == doctest::Approx(0.2 / 2));
  CHECK(d.sample(1)[3] == doctest::Approx((0.2 - 1.0) / 2));
}

TEST_CASE("delta kernel reproduces the input plane") {
  NetworkSpec spec = make_spec({LayerSpec::conv(1, 1, 1), LayerSpec::global_avg_pool(), LayerSpec::fc(2)}, 1, 5, 5, 2);
  Network<double> net(spec);
  net.param(0, "weight")[4] = 1.0;
  const Tensor<double> x = random_tensor({2, 1, 5, 5}, 3);
  const Tensor<double> y = net.forward(x, Mode::eval, nullptr, 0, 1);
  CHECK(y.shape == x.shape);
  CHECK(y.data == x.data);
}

TEST_CASE("two-layer forward pass matches the NumPy oracle") {
  Network<double> net(make_spec({LayerSpec::conv(2, 1, 1), LayerSpec::relu(), LayerSpec::fc(3)}, 1, 4, 4, 3));
  auto w1 = net.param(0, "weight");
  for (int k = 0; k < 18; ++k) w1[k] = 0.1 * k - 0.4;
  net.param(0, "bias") << 0.05, -0.1;
  auto w2 = net.param(2, "weight");
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 32; ++i) w2[j * 32 + i] = 0.01 * ((j * 32 + i) % 7) - 0.03;
  net.param(2, "bias") << 0.1, 0.0, -0.1;
  Tensor<double> x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x.data[i] = i / 8.0 - 1.0;
  // tests/oracles/tiny_forward.py
  const Tensor<double> logits = net.forward(x, Mode::eval);
  CHECK(logits.data[0] == doctest::Approx(0.16525).epsilon(1e-12));
  CHECK(logits.data[1] == doctest::Approx(-0.035).epsilon(1e-12));
  CHECK(logits.data[2] == doctest::Approx(-0.03925).epsilon(1e-12));
}

TEST_CASE("every layer kind passes the finite-difference check") {
  for (const auto& r : layer_gradient_suite(17)) {
    INFO(r.label << " worst block " << r.worst_block);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("backward: duplicated samples double their contribution") {
  const NetworkSpec spec = make_spec({LayerSpec::conv(3, 2, 0), LayerSpec::relu(), LayerSpec::fc(4)}, 2, 7, 7, 4);
  Network<double> net = init_weights<double>(spec, 5);
  const Tensor<double> ab = random_tensor({2, 2, 7, 7}, 6);
  Tensor<double> aab({3, 2, 7, 7});
  const auto per = ab.stride0();
  aab.data << ab.data.head(per), ab.data.head(per), ab.data.tail(per);

  auto grads = [&](const Tensor<double>& x, const std::vector<int>& labels) {
    net.zero_grads();
    Trace<double> trace;
    Tensor<double> d;
    softmax_cross_entropy(net.forward(x, Mode::train, &trace), labels, &d);
    net.backward(trace, d);
    return Vec<double>(net.grads() * double(labels.size()));
  };
  Tensor<double> a({1, 2, 7, 7});
  a.data = ab.data.head(per);
  Tensor<double> b({1, 2, 7, 7});
  b.data = ab.data.tail(per);
  const Vec<double> ga = grads(a, {1}), gb = grads(b, {3});
  CHECK((grads(aab, {1, 1, 3}) - (2 * ga + gb)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("backward without a trace is rejected") {
  Network<double> net(make_spec({LayerSpec::fc(2)}, 3, 1, 1, 2));
  Trace<double> empty;
  empty.last = 1;
  CHECK_THROWS_AS(net.backward(empty, Tensor<double>({1, 2})), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor<double>({1, 4}), Mode::eval), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor<double>({1, 2, 3}), Mode::eval), std::invalid_argument);
}

TEST_CASE("batchnorm normalises with batch statistics in train mode") {
  NetworkSpec spec = make_spec({LayerSpec::batchnorm(), LayerSpec::global_avg_pool(), LayerSpec::fc(2)}, 3, 6, 5, 2);
  Network<float> net(spec);
  Tensor<double> x = random_tensor({8, 3, 6, 5}, 9);
  x.data = x.data * 2.0 + Vec<double>::Constant(x.size(), 3.0);
  const Tensor<float> y = net.forward(x.cast<float>(), Mode::train, nullptr, 0, 1);
  const Eigen::Index hw = 30;
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int n = 0; n < 8; ++n)
      for (Eigen::Index k = 0; k < hw; ++k) sum += y.sample(n)[c * hw + k];
    const double mean = sum / (8 * hw);
    for (int n = 0; n < 8; ++n)
      for (Eigen::Index k = 0; k < hw; ++k) sq += std::pow(y.sample(n)[c * hw + k] - mean, 2);
    CHECK(std::abs(mean) <= 1e-5);
    CHECK(std::abs(sq / (8 * hw) - 1.0) <= 1e-4);
  }
  // Running statistics moved towards the batch (momentum 0.1).
  CHECK(net.buffers()[0] == doctest::Approx(0.1 * x.data.head(30).mean()).epsilon(0.5));
  const Tensor<float> e1 = net.forward(x.cast<float>(), Mode::eval);
  const Tensor<float> e2 = net.forward(x.cast<float>(), Mode::eval);
  CHECK(e1.data == e2.data);
  const Vec<float> before = net.buffers();
  net.forward(x.cast<float>(), Mode::eval);
  CHECK(net.buffers() == before);
}

TEST_CASE("eval mode is deterministic and dropout is inactive") {
  NetworkSpec spec = make_spec({LayerSpec::conv(4, 1, 0), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::fc(8),
                                LayerSpec::dropout(0.5), LayerSpec::fc(3)},
                               1, 8, 8, 3);
  Network<float> net = init_weights<float>(spec, 2);
  const Tensor<float> x = random_tensor({4, 1, 8, 8}, 4).cast<float>();
  const Tensor<float> a = net.forward(x, Mode::eval);
  const Tensor<float> b = net.forward(x, Mode::eval);
  CHECK(a.data == b.data);
  // Train mode with the same seed reproduces its dropout mask.
  net.seed_dropout(8);
  Network<float> copy = net;
  const Tensor<float> t1 = net.forward(x, Mode::train);
  const Tensor<float> t2 = copy.forward(x, Mode::train);
  CHECK(t1.data == t2.data);
}

TEST_CASE("unstrided conv trunk commutes with one-pixel shifts") {
  NetworkSpec spec = make_spec({LayerSpec::conv(5, 1, 0), LayerSpec::relu(), LayerSpec::conv(4, 1, 0), LayerSpec::relu(),
                                LayerSpec::fc(2)},
                               2, 16, 16, 2);
  Network<float> net = init_weights<float>(spec, 11);
  const Tensor<float> x = random_tensor({1, 2, 17, 16}, 12).cast<float>();
  Tensor<float> top({1, 2, 16, 16}), bottom({1, 2, 16, 16});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 16; ++y)
      for (int xx = 0; xx < 16; ++xx) {
        top.data[(c * 16 + y) * 16 + xx] = x.data[(c * 17 + y) * 16 + xx];
        bottom.data[(c * 16 + y) * 16 + xx] = x.data[(c * 17 + y + 1) * 16 + xx];
      }
  const Tensor<float> ft = net.forward(top, Mode::eval, nullptr, 0, 4);
  const Tensor<float> fb = net.forward(bottom, Mode::eval, nullptr, 0, 4);
  REQUIRE(ft.shape == std::vector<int>{1, 4, 12, 12});
  float worst = 0.0f;
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 11; ++y)
      for (int xx = 0; xx < 12; ++xx)
        worst = std::max(worst, std::abs(fb.data[(c * 12 + y) * 12 + xx] - ft.data[(c * 12 + y + 1) * 12 + xx]));
  CHECK(worst == 0.0f);
}

TEST_CASE("training separates a linearly separable toy set") {
  Rng rng(21);
  const int n = 64;
  Tensor<float> x({n, 1, 4, 4});
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[std::size_t(i)] = i % 2;
    for (int k = 0; k < 16; ++k) {
      const float sign = (k < 8) == (i % 2 == 0) ? 1.0f : -1.0f;
      x.sample(i)[k] = sign * 0.5f + float(0.3 * rng.normal());
    }
  }
  NetworkSpec spec = make_spec({LayerSpec::conv(4, 1, 1), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::fc(8),
                                LayerSpec::relu(), LayerSpec::fc(2)},
                               1, 4, 4, 2);
  Network<float> net = init_weights<float>(spec, 3);
  Adam<float> opt;
  double acc = 0.0;
  for (int step = 0; step < 200 && acc < 0.99; ++step) {
    Trace<float> trace;
    Tensor<float> d;
    softmax_cross_entropy(net.forward(x, Mode::train, &trace), labels, &d);
    net.zero_grads();
    net.backward(trace, d);
    adam_step(opt, net.params(), net.grads(), 1e-2);
    const auto pred = argmax_rows(net.forward(x, Mode::eval));
    acc = 0.0;
    for (int i = 0; i < n; ++i) acc += pred[std::size_t(i)] == labels[std::size_t(i)];
    acc /= n;
  }
  CHECK(acc >= 0.99);
}

TEST_CASE("adam") {
  Vec<double> p(3);
  p << 1.0, -2.0, 0.5;
  Adam<double> opt;
  adam_step(opt, p, Vec<double>(Vec<double>::Zero(3)), 1e-3);
  CHECK(p == Vec<double>((Vec<double>(3) << 1.0, -2.0, 0.5).finished()));

  Adam<double> first;
  Vec<double> q = Vec<double>::Zero(4);
  Vec<double> g(4);
  g << 0.3, -7.0, 0.3, 1e-3;
  adam_step(first, q, g, 0.01);
  // Bias-corrected first step: -lr * g / (|g| + eps).
  for (int i = 0; i < 4; ++i) CHECK(q[i] == doctest::Approx(-0.01 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
  CHECK(q[0] == q[2]);

  Vec<double> wrong(2);
  CHECK_THROWS_AS(adam_step(first, q, wrong, 0.01), std::invalid_argument);
}

TEST_CASE("learning-rate schedules") {
  const Schedule e = Schedule::exp_decay();
  CHECK(lr_at(e, 0) == doctest::Approx(3e-3));
  CHECK(lr_at(e, 2) == doctest::Approx(1.1036383235143269e-3).epsilon(1e-12));
  CHECK(lr_at(e, 100) == 5e-5);
  const Schedule c = Schedule::cosine(1e-3, 5e-5, 75);
  CHECK(lr_at(c, 0) == doctest::Approx(1e-3));
  CHECK(lr_at(c, 37.5) == doctest::Approx((1e-3 + 5e-5) / 2));
  CHECK(lr_at(c, 75) == 5e-5);
  CHECK(lr_at(c, 500) == 5e-5);
  CHECK_THROWS_AS(lr_at(c, -1), std::invalid_argument);
  CHECK(Schedule::from_json(c.to_json()).decay_time == 75);
}

TEST_CASE("init_weights") {
  NetworkSpec spec = make_spec({LayerSpec::conv(100, 1, 1), LayerSpec::batchnorm(), LayerSpec::global_avg_pool(),
                                LayerSpec::fc(3)},
                               16, 3, 3, 3);
  const Network<double> a = init_weights<double>(spec, 4);
  const Network<double> b = init_weights<double>(spec, 4);
  CHECK(a.params() == b.params());
  CHECK(a.params() != init_weights<double>(spec, 5).params());
  const auto w = a.param(0, "weight");
  REQUIRE(w.size() == 14400);
  const double sd = std::sqrt((w.array() - w.mean()).square().mean());
  CHECK(sd == doctest::Approx(std::sqrt(2.0 / 144)).epsilon(0.10));
  CHECK(a.param(0, "bias").cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.param(1, "gamma").array() == 1.0).all());
  CHECK((a.param(1, "beta").array() == 0.0).all());
}

TEST_CASE("checkpoint round trip") {
  NetworkSpec spec = make_spec({LayerSpec::conv(3, 2, 0), LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::fc(4)},
                               1, 7, 7, 4);
  Network<float> net = init_weights<float>(spec, 1);
  Adam<float> opt;
  Trace<float> trace;
  const Tensor<float> x = random_tensor({5, 1, 7, 7}, 2).cast<float>();
  Tensor<float> d;
  softmax_cross_entropy(net.forward(x, Mode::train, &trace), {0, 1, 2, 3, 0}, &d);
  net.backward(trace, d);
  adam_step(opt, net.params(), net.grads(), 1e-3);

  const auto path = std::filesystem::temp_directory_path() / "scn_test_nn" / "ck.scnk";
  CheckpointInfo info;
  info.step = 1;
  info.epoch = 3;
  info.meta = {{"note", "x"}};
  write_checkpoint(path, {&net}, {&opt}, info);
  const Checkpoint ck = read_checkpoint(path);
  REQUIRE(ck.nets.size() == 1);
  CHECK(ck.nets[0].spec() == spec);
  CHECK(ck.nets[0].params() == net.params());
  CHECK(ck.nets[0].buffers() == net.buffers());
  CHECK(ck.opts[0].m == opt.m);
  CHECK(ck.opts[0].step == 1);
  CHECK(ck.info.epoch == 3);
  CHECK(ck.info.meta["note"] == "x");
  Network<float> loaded = ck.nets[0];
  CHECK(loaded.forward(x, Mode::eval).data == net.forward(x, Mode::eval).data);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 4);
  CHECK_THROWS_AS(read_checkpoint(path), std::runtime_error);
  CHECK_THROWS_AS(read_checkpoint(path.parent_path() / "missing"), std::runtime_error);
}
