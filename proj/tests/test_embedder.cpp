#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "gds/embedder.hpp"
#include "gds/gradcheck.hpp"

using Catch::Matchers::WithinAbs;
using gds::Matrix;

namespace {

Matrix random_matrix(int r, int c, gds::Rng& rng) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

gds::MlpParams small_net(std::uint64_t seed, int classes = 0) {
  gds::Rng rng(seed);
  return gds::init_mlp({4, {6}, 3, classes, gds::Activation::tanh}, rng);
}

gds::Vector flat(const Matrix& m) { return Eigen::Map<const gds::Vector>(m.data(), m.size()); }

}  // namespace

TEST_CASE("identity-like parameters return the normalized input") {
  gds::MlpParams p;
  p.activation = gds::Activation::identity;
  p.weights.layers = {{Matrix::Identity(5, 5), gds::Vector::Zero(5)}, {Matrix::Identity(5, 5), gds::Vector::Zero(5)}};
  p.adam_m = gds::detail::zeros_like(p.weights);
  p.adam_v = gds::detail::zeros_like(p.weights);
  gds::Rng rng(1);
  const Matrix x = random_matrix(7, 5, rng);
  const Matrix e = gds::forward(p, x).embeddings;
  for (int i = 0; i < 7; ++i) {
    CHECK((e.row(i) - x.row(i) / x.row(i).norm()).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("forward outputs unit rows deterministically") {
  gds::Rng rng(2);
  const auto p = gds::init_mlp({}, rng);
  const Matrix x = random_matrix(20, 32, rng) * 3.0;
  const Matrix a = gds::forward(p, x).embeddings;
  const Matrix b = gds::forward(p, x).embeddings;
  CHECK(a == b);
  for (int i = 0; i < a.rows(); ++i) CHECK_THAT(a.row(i).norm(), WithinAbs(1.0, 1e-9));
  CHECK_THROWS(gds::forward(p, random_matrix(2, 31, rng)));
  gds::Rng r1(99), r2(99);
  CHECK(gds::init_mlp({}, r1).weights.layers[1].weight == gds::init_mlp({}, r2).weights.layers[1].weight);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  auto p = small_net(3);
  gds::Rng rng(3);
  const auto fw = gds::forward(p, random_matrix(5, 4, rng));
  const auto bw = gds::backward(p, fw.trace, Matrix::Zero(5, 3));
  for (const auto& l : bw.param_grads.layers) {
    CHECK(l.weight.isZero(0.0));
    CHECK(l.bias.isZero(0.0));
  }
  CHECK(bw.input_grads.isZero(0.0));
}

TEST_CASE("backward matches finite differences on a small net") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = small_net(seed);
    gds::Rng rng(seed + 100);
    Matrix x = random_matrix(5, 4, rng);
    const Matrix up = random_matrix(5, 3, rng);
    auto objective = [&] { return (gds::forward(p, x).embeddings.cwiseProduct(up)).sum(); };
    const auto fw = gds::forward(p, x);
    const auto bw = gds::backward(p, fw.trace, up);
    for (std::size_t l = 0; l < p.weights.layers.size(); ++l) {
      auto& w = p.weights.layers[l].weight;
      const auto nw = gds::numeric_gradient(objective, {w.data(), static_cast<std::size_t>(w.size())}, 1e-6);
      CHECK(gds::relative_error(flat(bw.param_grads.layers[l].weight), nw) < 1e-6);
      auto& b = p.weights.layers[l].bias;
      const auto nb = gds::numeric_gradient(objective, {b.data(), static_cast<std::size_t>(b.size())}, 1e-6);
      CHECK(gds::relative_error(bw.param_grads.layers[l].bias, nb) < 1e-6);
    }
    const auto nx = gds::numeric_gradient(objective, {x.data(), static_cast<std::size_t>(x.size())}, 1e-6);
    CHECK(gds::relative_error(flat(bw.input_grads), nx) < 1e-6);
  }
}

TEST_CASE("backward rejects a stale trace") {
  auto p = small_net(4);
  gds::Rng rng(4);
  const auto fw = gds::forward(p, random_matrix(3, 4, rng));
  auto g = gds::backward(p, fw.trace, Matrix::Ones(3, 3)).param_grads;
  gds::adam_step(p, g, {});
  CHECK_THROWS(gds::backward(p, fw.trace, Matrix::Ones(3, 3)));
  const auto fw2 = gds::forward(p, random_matrix(3, 4, rng));
  CHECK_THROWS(gds::backward(p, fw2.trace, Matrix::Ones(2, 3)));
}

TEST_CASE("classifier head gradient") {
  auto p = small_net(5, 4);
  gds::Rng rng(5);
  const Matrix e = gds::l2_normalize_rows(random_matrix(6, 3, rng)).x;
  const Matrix up = random_matrix(6, 4, rng);
  Matrix e2 = e;
  auto objective = [&] { return gds::classifier_logits(p, e2).cwiseProduct(up).sum(); };
  const auto g = gds::classifier_backward(p, e, up);
  auto& w = p.weights.classifier->weight;
  const auto nw = gds::numeric_gradient(objective, {w.data(), static_cast<std::size_t>(w.size())}, 1e-6);
  CHECK(gds::relative_error(flat(g.head.weight), nw) < 1e-7);
  const auto ne = gds::numeric_gradient(objective, {e2.data(), static_cast<std::size_t>(e2.size())}, 1e-6);
  CHECK(gds::relative_error(flat(g.grad_embeddings), ne) < 1e-7);
}

TEST_CASE("adam first step closed form") {
  auto p = small_net(6);
  const auto before = p.weights;
  gds::ParamSet g = gds::detail::zeros_like(p.weights);
  gds::Rng rng(6);
  std::normal_distribution<double> nd;
  for (auto s : gds::tensor_spans(g))
    for (auto& v : s) v = nd(rng);
  const gds::AdamConfig cfg{1e-3};
  gds::adam_step(p, g, cfg);
  CHECK(p.step == 1);
  auto after = gds::tensor_spans(p.weights);
  auto grads = gds::tensor_spans(g);
  gds::ParamSet b = before;
  auto orig = gds::tensor_spans(b);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      const double gi = grads[k][i];
      CHECK_THAT(after[k][i] - orig[k][i], WithinAbs(-cfg.lr * gi / (std::abs(gi) + cfg.eps), 1e-15));
    }
  }
}

TEST_CASE("adam: zero gradient and constant gradient") {
  auto p = small_net(7);
  const auto w0 = p.weights.layers[0].weight;
  gds::adam_step(p, gds::detail::zeros_like(p.weights), {});
  CHECK(p.weights.layers[0].weight == w0);
  CHECK(p.step == 1);

  auto q = small_net(8);
  gds::ParamSet g = gds::detail::zeros_like(q.weights);
  for (auto s : gds::tensor_spans(g))
    for (auto& v : s) v = 0.37;
  const gds::AdamConfig cfg{1e-3};
  double last = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double before = q.weights.layers[0].weight(0, 0);
    gds::adam_step(q, g, cfg);
    last = before - q.weights.layers[0].weight(0, 0);
  }
  CHECK_THAT(last, WithinAbs(cfg.lr, 1e-9));
}

TEST_CASE("adam rejects non-finite gradients") {
  auto p = small_net(9);
  gds::ParamSet g = gds::detail::zeros_like(p.weights);
  g.layers[0].weight(0, 0) = std::nan("");
  CHECK_THROWS_AS(gds::adam_step(p, g, {}), gds::runtime_failure);
}

TEST_CASE("checkpoint round trip") {
  auto p = small_net(10, 3);
  gds::ParamSet g = gds::detail::zeros_like(p.weights);
  for (auto s : gds::tensor_spans(g))
    for (auto& v : s) v = 0.1;
  gds::adam_step(p, g, {});
  std::stringstream ss;
  gds::save_checkpoint(p, ss);
  const auto q = gds::load_checkpoint(ss);
  CHECK(q.step == p.step);
  CHECK(q.activation == p.activation);
  REQUIRE(q.weights.layers.size() == p.weights.layers.size());
  for (std::size_t l = 0; l < q.weights.layers.size(); ++l) {
    CHECK(q.weights.layers[l].weight == p.weights.layers[l].weight);
    CHECK(q.adam_v.layers[l].bias == p.adam_v.layers[l].bias);
  }
  REQUIRE(q.weights.classifier.has_value());
  CHECK(q.weights.classifier->weight == p.weights.classifier->weight);

  std::stringstream bad("not a checkpoint at all");
  CHECK_THROWS(gds::load_checkpoint(bad));
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS(gds::load_checkpoint(truncated));
}
