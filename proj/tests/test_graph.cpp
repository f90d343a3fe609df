#include <doctest.h>

#include <cmath>
#include <functional>

#include "ddaunet/graph.hpp"
#include "ddaunet/rng.hpp"

using namespace ddaunet;

namespace {

using DTensor = TensorT<double>;
using DNode = Node<double>;

void fill_random(DTensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (double& v : t.v) v = rng.uniform(lo, hi);
}

// Fixed projection weights so the scalar objective J = sum w.*out exercises
// every output element.
double proj_weight(size_t i) { return 0.25 + 0.5 * std::sin(static_cast<double>(i) + 1.0); }

double objective(const DTensor& out) {
  double j = 0;
  for (size_t i = 0; i < out.v.size(); ++i) j += proj_weight(i) * out.v[i];
  return j;
}

// Builds a tiny graph around one node-under-test and compares every leaf
// gradient against central finite differences.
struct Harness {
  std::vector<std::unique_ptr<DNode>> nodes;
  std::vector<DNode*> leaves;  // inputs and params to differentiate
  DNode* top = nullptr;
  bool training = true;

  InputNode<double>* input(DTensor value) {
    auto n = std::make_unique<InputNode<double>>();
    n->out = std::move(value);
    leaves.push_back(n.get());
    nodes.push_back(std::move(n));
    return static_cast<InputNode<double>*>(nodes.back().get());
  }

  ParamNode<double>* param(DTensor value) {
    auto n = std::make_unique<ParamNode<double>>();
    n->out = std::move(value);
    n->grad = DTensor(n->out.n, n->out.c, n->out.z, n->out.y, n->out.x);
    leaves.push_back(n.get());
    nodes.push_back(std::move(n));
    return static_cast<ParamNode<double>*>(nodes.back().get());
  }

  template <typename T, typename... Args>
  T* make(Args&&... args) {
    nodes.push_back(std::make_unique<T>(std::forward<Args>(args)...));
    top = nodes.back().get();
    return static_cast<T*>(top);
  }

  double forward() {
    for (auto& n : nodes) n->forward(training);
    return objective(top->out);
  }

  void backward() {
    forward();
    for (auto& n : nodes) {
      n->ensure_grad();
      n->grad.fill(0.0);
    }
    for (size_t i = 0; i < top->out.v.size(); ++i) top->grad.v[i] = proj_weight(i);
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) (*it)->backward();
  }

  void check_gradients(double eps = 1e-6, double tol = 5e-5) {
    backward();
    for (DNode* leaf : leaves) {
      for (size_t i = 0; i < leaf->out.v.size(); ++i) {
        const double saved = leaf->out.v[i];
        leaf->out.v[i] = saved + eps;
        const double jp = forward();
        leaf->out.v[i] = saved - eps;
        const double jm = forward();
        leaf->out.v[i] = saved;
        const double fd = (jp - jm) / (2 * eps);
        const double an = leaf->grad.v[i];
        const double scale = std::max({std::abs(fd), std::abs(an), 1.0});
        INFO("leaf grad #", i, " fd=", fd, " analytic=", an);
        CHECK(std::abs(fd - an) <= tol * scale);
      }
    }
  }
};

}  // namespace

TEST_CASE("conv3d gradients match finite differences") {
  Rng rng(101);
  for (int cfg = 0; cfg < 3; ++cfg) {
    const int kernel = cfg == 2 ? 1 : 3;
    const int dilation = cfg == 1 ? 2 : 1;
    Harness h;
    DTensor x(2, 3, 4, 5, 6);
    fill_random(x, rng);
    auto* in = h.input(std::move(x));
    DTensor w(2, 3, kernel, kernel, kernel);
    fill_random(w, rng, -0.5, 0.5);
    auto* wp = h.param(std::move(w));
    DTensor b(2, 1, 1, 1, 1);
    fill_random(b, rng, -0.1, 0.1);
    auto* bp = h.param(std::move(b));
    h.make<Conv3dNode<double>>(in, wp, bp, kernel, dilation);
    h.check_gradients();
  }
}

TEST_CASE("conv3d with padding equals a hand-computed correlation") {
  // 1-channel 1x1x3 input, kernel tap weights distinguishable
  Harness h;
  DTensor x(1, 1, 1, 1, 3);
  x.v = {1, 10, 100};
  auto* in = h.input(std::move(x));
  DTensor w(1, 1, 3, 3, 3);
  w.fill(0.0);
  // center tap = 1, +x tap = 2
  w.v[static_cast<size_t>((1 * 3 + 1) * 3 + 1)] = 1.0;
  w.v[static_cast<size_t>((1 * 3 + 1) * 3 + 2)] = 2.0;
  auto* wp = h.param(std::move(w));
  DTensor b(1, 1, 1, 1, 1);
  auto* bp = h.param(std::move(b));
  auto* conv = h.make<Conv3dNode<double>>(in, wp, bp, 3, 1);
  h.forward();
  CHECK(conv->out.v[0] == doctest::Approx(1 + 2 * 10));
  CHECK(conv->out.v[1] == doctest::Approx(10 + 2 * 100));
  CHECK(conv->out.v[2] == doctest::Approx(100 + 0));  // zero padding
}

TEST_CASE("batchnorm gradients match finite differences (train and eval)") {
  Rng rng(102);
  for (bool training : {true, false}) {
    Harness h;
    h.training = training;
    DTensor x(3, 2, 2, 3, 2);
    fill_random(x, rng, -2, 2);
    auto* in = h.input(std::move(x));
    DTensor g(2, 1, 1, 1, 1);
    g.v = {1.3, 0.7};
    auto* gp = h.param(std::move(g));
    DTensor b(2, 1, 1, 1, 1);
    b.v = {0.1, -0.2};
    auto* bp = h.param(std::move(b));
    auto* bn = h.make<BatchNormNode<double>>(in, gp, bp, 2);
    if (!training) {
      bn->running_mean = {0.3, -0.4};
      bn->running_var = {1.5, 0.8};
    }
    h.check_gradients();
  }
}

TEST_CASE("batchnorm normalizes batch statistics in training mode") {
  Rng rng(103);
  Harness h;
  DTensor x(4, 1, 2, 2, 2);
  fill_random(x, rng, -3, 5);
  auto* in = h.input(std::move(x));
  DTensor g(1, 1, 1, 1, 1, 1.0);
  auto* gp = h.param(std::move(g));
  DTensor b(1, 1, 1, 1, 1, 0.0);
  auto* bp = h.param(std::move(b));
  auto* bn = h.make<BatchNormNode<double>>(in, gp, bp, 1);
  h.forward();
  double mean = 0, var = 0;
  for (double v : bn->out.v) mean += v;
  mean /= static_cast<double>(bn->out.v.size());
  for (double v : bn->out.v) var += (v - mean) * (v - mean);
  var /= static_cast<double>(bn->out.v.size());
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("relu, sigmoid, softmax gradients") {
  Rng rng(104);
  {
    Harness h;
    DTensor x(2, 2, 2, 2, 2);
    fill_random(x, rng);
    for (double& v : x.v)
      if (std::abs(v) < 0.05) v = 0.1;  // keep away frm the kink
    auto* in = h.input(std::move(x));
    h.make<ReluNode<double>>(in);
    h.check_gradients();
  }
  {
    Harness h;
    DTensor x(1, 3, 2, 2, 2);
    fill_random(x, rng, -2, 2);
    auto* in = h.input(std::move(x));
    h.make<SigmoidNode<double>>(in);
    h.check_gradients();
  }
  {
    Harness h;
    DTensor x(2, 2, 2, 2, 2);
    fill_random(x, rng, -2, 2);
    auto* in = h.input(std::move(x));
    auto* sm = h.make<SoftmaxChannelNode<double>>(in);
    h.check_gradients();
    h.forward();
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t i = 0; i < sm->out.plane(); ++i)
        CHECK(sm->out.chan(n, 0)[i] + sm->out.chan(n, 1)[i] == doctest::Approx(1.0));
  }
}

TEST_CASE("maxpool and upsample gradients") {
  Rng rng(105);
  {
    Harness h;
    DTensor x(2, 2, 4, 4, 4);
    fill_random(x, rng);
    auto* in = h.input(std::move(x));
    auto* mp = h.make<MaxPool2Node<double>>(in);
    h.forward();
    CHECK(mp->out.z == 2);
    CHECK(mp->out.y == 2);
    CHECK(mp->out.x == 2);
    h.check_gradients();
  }
  {
    Harness h;
    DTensor x(1, 2, 2, 3, 2);
    fill_random(x, rng);
    auto* in = h.input(std::move(x));
    auto* up = h.make<Upsample2Node<double>>(in);
    h.forward();
    CHECK(up->out.z == 4);
    CHECK(up->out.y == 6);
    CHECK(up->out.x == 4);
    h.check_gradients();
  }
}

TEST_CASE("upsample interpolates between samples") {
  Harness h;
  DTensor x(1, 1, 1, 1, 2);
  x.v = {0.0, 1.0};
  auto* in = h.input(std::move(x));
  auto* up = h.make<Upsample2Node<double>>(in);
  h.forward();
  // mapping o/2 - 0.25 with border clamp: 0, 0.25, 0.75, 1
  CHECK(up->out.v[0] == doctest::Approx(0.0));
  CHECK(up->out.v[1] == doctest::Approx(0.25));
  CHECK(up->out.v[2] == doctest::Approx(0.75));
  CHECK(up->out.v[3] == doctest::Approx(1.0));
}

TEST_CASE("concat, channel reductions and broadcast multiply gradients") {
  Rng rng(106);
  {
    Harness h;
    DTensor a(2, 2, 2, 2, 2), b(2, 3, 2, 2, 2);
    fill_random(a, rng);
    fill_random(b, rng);
    auto* ia = h.input(std::move(a));
    auto* ib = h.input(std::move(b));
    auto* cat = h.make<ConcatNode<double>>(std::vector<DNode*>{ia, ib});
    h.forward();
    CHECK(cat->out.c == 5);
    h.check_gradients();
  }
  {
    Harness h;
    DTensor x(2, 3, 2, 2, 2);
    fill_random(x, rng);
    auto* in = h.input(std::move(x));
    h.make<ChannelMeanNode<double>>(in);
    h.check_gradients();
  }
  {
    Harness h;
    DTensor x(2, 3, 2, 2, 2);
    fill_random(x, rng);
    auto* in = h.input(std::move(x));
    h.make<ChannelMaxNode<double>>(in);
    h.check_gradients();
  }
  {
    Harness h;
    DTensor x(2, 3, 2, 2, 2);
    fill_random(x, rng);
    auto* in = h.input(std::move(x));
    h.make<GlobalAvgPoolNode<double>>(in);
    h.check_gradients();
  }
  {
    // spatial gate broadcast
    Harness h;
    DTensor x(2, 3, 2, 2, 2), g(2, 1, 2, 2, 2);
    fill_random(x, rng);
    fill_random(g, rng, 0.1, 0.9);
    auto* ix = h.input(std::move(x));
    auto* ig = h.input(std::move(g));
    h.make<MulBroadcastNode<double>>(ix, ig);
    h.check_gradients();
  }
  {
    // channel gate broadcast
    Harness h;
    DTensor x(2, 3, 2, 2, 2), g(2, 3, 1, 1, 1);
    fill_random(x, rng);
    fill_random(g, rng, 0.1, 0.9);
    auto* ix = h.input(std::move(x));
    auto* ig = h.input(std::move(g));
    h.make<MulBroadcastNode<double>>(ix, ig);
    h.check_gradients();
  }
}

TEST_CASE("concat center-crops larger inputs") {
  Harness h;
  DTensor a(1, 1, 2, 2, 2), b(1, 1, 4, 4, 4);
  for (size_t i = 0; i < a.v.size(); ++i) a.v[i] = 1.0;
  for (size_t i = 0; i < b.v.size(); ++i) b.v[i] = static_cast<double>(i);
  auto* ia = h.input(std::move(a));
  auto* ib = h.input(std::move(b));
  auto* cat = h.make<ConcatNode<double>>(std::vector<DNode*>{ia, ib});
  h.forward();
  CHECK(cat->out.z == 2);
  CHECK(cat->out.c == 2);
  // channel 1 holds the centered 2x2x2 crop of b: offsets (1,1,1)
  CHECK(cat->out.chan(0, 1)[0] == doctest::Approx(1 * 16 + 1 * 4 + 1));
}
