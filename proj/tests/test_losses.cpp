#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "gds/data.hpp"
#include "gds/gradcheck.hpp"
#include "gds/losses.hpp"

using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using gds::GaussianStats;
using gds::LossConfig;
using gds::Matrix;

namespace {

constexpr double kLn2 = 0.69314718055994530942;

GaussianStats stats(double mean, double var) { return GaussianStats(mean, var, 0.99); }

Matrix unit_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix f(n, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) f(i, k) = nd(rng);
  return gds::l2_normalize_rows(f).x;
}

gds::Vector fd_grad(const std::function<double()>& f, Matrix& x, double h = 1e-6) {
  return gds::numeric_gradient(f, {x.data(), static_cast<std::size_t>(x.size())}, h);
}

gds::Vector flat(const Matrix& m) { return Eigen::Map<const gds::Vector>(m.data(), m.size()); }

}  // namespace

TEST_CASE("softplus closed forms") {
  CHECK_THAT(gds::softplus(0.0), WithinAbs(kLn2, 1e-12));
  CHECK_THAT(gds::softplus(50.0), WithinAbs(50.0, 1e-12));
  // ln(1 + e^-50) = e^-50 - e^-100/2 + ...; reference 1.9287498479639178e-22
  const double tiny = gds::softplus(-50.0);
  CHECK(tiny > 0.0);
  CHECK_THAT(tiny, WithinRel(1.9287498479639178e-22, 1e-12));
  CHECK(std::isfinite(gds::softplus(1000.0)));
  CHECK(gds::softplus(-1000.0) >= 0.0);
  // above ~36 the gap drops below one ulp of x
  for (double x = -40.0; x <= 30.0; x += 0.37) {
    const double gap = gds::softplus(x) - std::max(x, 0.0);
    CHECK(gap > 0.0);
    CHECK(gap <= kLn2 + 1e-15);
  }
}

TEST_CASE("pair_distance closed forms") {
  const std::vector<double> a{1.0, 0.0, 0.0};
  const std::vector<double> b{-1.0, 0.0, 0.0};
  const std::vector<double> c{0.0, 1.0, 0.0};
  CHECK(gds::pair_distance(a, a) == 0.0);
  CHECK_THAT(gds::pair_distance(a, b), WithinAbs(1.0, 1e-12));
  CHECK_THAT(gds::pair_distance(a, c), WithinAbs(std::sqrt(2.0) / 2.0, 1e-12));
  CHECK(gds::pair_distance(a, c) == gds::pair_distance(c, a));
  const std::vector<double> bad{2.0, 0.0, 0.0};
  CHECK_THROWS(gds::pair_distance(a, bad));
}

TEST_CASE("gds_loss closed forms") {
  LossConfig cfg;
  CHECK_THAT(gds::gds_loss(stats(0.4, 0.0), stats(0.4, 0.0), cfg), WithinAbs(kLn2, 1e-12));
  // softplus(-0.6) = ln(1 + e^-0.6)
  CHECK_THAT(gds::gds_loss(stats(0.2, 0.0), stats(0.8, 0.0), cfg),
             WithinAbs(std::log1p(std::exp(-0.6)), 1e-12));
  CHECK_THAT(gds::gds_loss(stats(0.2, 0.0), stats(0.8, 0.0), cfg), WithinAbs(0.4375, 5e-5));
  cfg.lambda_sigma = 0.0;
  CHECK(gds::gds_loss(stats(0.2, 0.05), stats(0.8, 0.07), cfg) ==
        gds::gds_loss(stats(0.2, 0.0), stats(0.8, 0.0), cfg));
  cfg.lambda_sigma = 1.0;
  CHECK_THAT(gds::gds_loss(stats(0.2, 0.01), stats(0.8, 0.02), cfg),
             WithinAbs(std::log1p(std::exp(-0.6)) + 0.03, 1e-12));
}

TEST_CASE("hard_mining_loss closed forms") {
  LossConfig cfg;  // kappa 3
  // mu+ + 3 sigma+ == mu- - 3 sigma-: 0.3 + 0.3 == 0.9 - 0.3
  CHECK_THAT(gds::hard_mining_loss(stats(0.3, 0.01), stats(0.9, 0.01), cfg), WithinAbs(kLn2, 1e-12));
  // zero variance: only the mean gap remains
  CHECK_THAT(gds::hard_mining_loss(stats(0.2, 0.0), stats(0.8, 0.0), cfg),
             WithinAbs(gds::softplus(-0.6), 1e-12));
  CHECK(std::isfinite(gds::hard_mining_terms(stats(0.2, 0.0), stats(0.8, 0.0), cfg).d_var_pos));
  CHECK_THAT(gds::hard_mining_loss(stats(0.3, 0.0025), stats(0.7, 0.0025), cfg),
             WithinAbs(std::log1p(std::exp(-0.1)), 1e-12));
  CHECK_THAT(gds::hard_mining_loss(stats(0.3, 0.0025), stats(0.7, 0.0025), cfg), WithinAbs(0.6444, 5e-5));
}

TEST_CASE("loss monotonicity") {
  LossConfig cfg;
  double prev = 1e9;
  for (double gap = 0.0; gap < 0.8; gap += 0.05) {
    const double v = gds::gds_loss(stats(0.5 - gap / 2, 0.01), stats(0.5 + gap / 2, 0.01), cfg);
    CHECK(v < prev);
    prev = v;
  }
  for (double var : {0.02, 0.01, 0.005}) {
    const double a = gds::gds_loss(stats(0.3, var), stats(0.7, 0.01), cfg);
    const double b = gds::gds_loss(stats(0.3, var / 2), stats(0.7, 0.01), cfg);
    CHECK(b < a);
    const double c = gds::hard_mining_loss(stats(0.3, 0.01), stats(0.7, var), cfg);
    const double d = gds::hard_mining_loss(stats(0.3, 0.01), stats(0.7, var / 2), cfg);
    CHECK(d < c);
  }
}

TEST_CASE("gds_h_loss value is evaluated on post-update statistics") {
  std::mt19937_64 rng(5);
  const Matrix x = unit_rows(8, 4, rng);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
  const auto pairs = gds::enumerate_pairs(labels);
  const auto pos = GaussianStats::initial(0.9);
  const auto neg = GaussianStats::initial(0.9);
  LossConfig cfg;
  const auto r = gds::gds_h_loss(x, pairs.positive, pairs.negative, pos, neg, cfg);
  CHECK(r.pos.count_seen() == 1);
  CHECK_THAT(r.output.value,
             WithinAbs(gds::gds_loss(r.pos, r.neg, cfg) + 0.5 * gds::hard_mining_loss(r.pos, r.neg, cfg), 1e-14));
  CHECK(r.gds_value == gds::gds_loss(r.pos, r.neg, cfg));

  // Pair order inside each list does not matter.
  auto shuffled_pos = pairs.positive;
  auto shuffled_neg = pairs.negative;
  std::shuffle(shuffled_pos.begin(), shuffled_pos.end(), rng);
  std::shuffle(shuffled_neg.begin(), shuffled_neg.end(), rng);
  const auto r2 = gds::gds_h_loss(x, shuffled_pos, shuffled_neg, pos, neg, cfg);
  CHECK_THAT(r2.output.value, WithinAbs(r.output.value, 1e-14));
  CHECK((r2.output.grad_embeddings - r.output.grad_embeddings).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gds_h_loss errors") {
  std::mt19937_64 rng(6);
  const Matrix x = unit_rows(4, 3, rng);
  const std::vector<gds::IndexPair> some{{0, 1}};
  const std::vector<gds::IndexPair> none;
  const auto s = GaussianStats::initial(0.99);
  CHECK_THROWS_AS(gds::gds_h_loss(x, none, some, s, s, {}), gds::degenerate_batch_error);
  CHECK_THROWS_AS(gds::gds_h_loss(x, some, none, s, s, {}), gds::degenerate_batch_error);
  const std::vector<gds::IndexPair> oob{{0, 9}};
  CHECK_THROWS(gds::gds_h_loss(x, oob, some, s, s, {}));
  Matrix raw = x * 2.0;
  CHECK_THROWS(gds::gds_h_loss(raw, some, some, s, s, {}));
}

TEST_CASE("gds_h_loss gradient matches finite differences") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3};
  const auto pairs = gds::enumerate_pairs(labels);
  for (int inst = 0; inst < 10; ++inst) {
    Matrix f = unit_rows(16, 8, rng) * (0.5 + u(rng));
    const double beta = inst == 0 ? 0.99 : 0.95 * u(rng);
    const GaussianStats pos(0.2 + 0.2 * u(rng), 0.01 * u(rng) + 1e-4, beta);
    const GaussianStats neg(0.5 + 0.2 * u(rng), 0.01 * u(rng) + 1e-4, beta);
    LossConfig cfg;
    auto value = [&] {
      return gds::detail::gds_h_unchecked(gds::l2_normalize_rows(f).x, pairs.positive, pairs.negative,
                                          pos, neg, cfg).output.value;
    };
    const auto nz = gds::l2_normalize_rows(f);
    const auto r = gds::gds_h_loss(nz.x, pairs.positive, pairs.negative, pos, neg, cfg);
    const Matrix ga = gds::l2_normalize_backward(nz, r.output.grad_embeddings);
    CHECK(gds::relative_error(flat(ga), fd_grad(value, f)) < 1e-5);
  }
}

TEST_CASE("gds_h_loss gradient vanishes as beta approaches 1") {
  std::mt19937_64 rng(8);
  const Matrix x = unit_rows(8, 4, rng);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
  const auto pairs = gds::enumerate_pairs(labels);
  double prev = 1e9;
  for (double beta : {0.0, 0.9, 0.99, 0.999, 0.9999}) {
    const auto s = GaussianStats(0.4, 0.02, beta);
    const auto t = GaussianStats(0.6, 0.02, beta);
    const double n = gds::gds_h_loss(x, pairs.positive, pairs.negative, s, t, {}).output.grad_embeddings.norm();
    CHECK(n < prev);
    prev = n;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("symmetric instance: mean-gap gradients cancel") {
  // Four points on a square; with lambda_sigma = lambda_h = 0 only the mean
  // gap term acts. Point 0 is in one positive pair (0,1) and one negative
  // pair (0,2) of equal length, and the statistics are equal, so the two
  // contributions to point 0 are equal and opposite along the shared part.
  Matrix x(4, 2);
  x << 1, 0, 0, 1, 0, -1, -1, 0;
  const std::vector<gds::IndexPair> pos{{0, 1}};
  const std::vector<gds::IndexPair> neg{{0, 2}};
  LossConfig cfg;
  cfg.lambda_sigma = 0.0;
  cfg.lambda_h = 0.0;
  const GaussianStats s(0.5, 0.01, 0.5);
  const auto r = gds::gds_h_loss(x, pos, neg, s, s, cfg);
  const auto& g = r.output.grad_embeddings;
  // d(0,1) == d(0,2); gradient on point 0 from the two pairs sums to a
  // vector along (x1 - x2) only, orthogonal to x0 - the component along x0 cancels.
  CHECK_THAT(g.row(0).dot(x.row(0)), WithinAbs(0.0, 1e-15));
  // Finite-difference confirmation of the whole gradient.
  Matrix y = x;
  auto value = [&] { return gds::detail::gds_h_unchecked(y, pos, neg, s, s, cfg).output.value; };
  CHECK(gds::relative_error(flat(g), fd_grad(value, y)) < 1e-7);
}

TEST_CASE("triplet_batch_hard") {
  SECTION("collapsed positives") {
    Matrix x(4, 2);
    x << 1, 0, 1, 0, -1, 0, -1, 0;
    const std::vector<int> labels{0, 0, 1, 1};
    const auto r = gds::triplet_batch_hard(x, labels);
    CHECK_THAT(r.value, WithinAbs(gds::softplus(-1.0), 1e-12));
  }
  SECTION("hand-placed circle points match finite differences") {
    Matrix x(4, 2);
    const double a[] = {0.1, 0.5, 2.0, 2.9};
    for (int i = 0; i < 4; ++i) x.row(i) << std::cos(a[i]), std::sin(a[i]);
    const std::vector<int> labels{0, 0, 1, 1};
    const auto r = gds::triplet_batch_hard(x, labels);
    auto value = [&] { return gds::detail::triplet_unchecked(x, labels).value; };
    CHECK(gds::relative_error(flat(r.grad_embeddings), fd_grad(value, x)) < 1e-7);
  }
  SECTION("permutation leaves the value unchanged") {
    std::mt19937_64 rng(9);
    const Matrix x = unit_rows(12, 5, rng);
    std::vector<int> labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3};
    const double v = gds::triplet_batch_hard(x, labels).value;
    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix xp(12, 5);
    std::vector<int> lp(12);
    for (int i = 0; i < 12; ++i) {
      xp.row(i) = x.row(perm[i]);
      lp[i] = labels[perm[i]];
    }
    CHECK_THAT(gds::triplet_batch_hard(xp, lp).value, WithinAbs(v, 1e-14));
  }
  SECTION("errors") {
    Matrix x(3, 2);
    x << 1, 0, 0, 1, -1, 0;
    CHECK_THROWS(gds::triplet_batch_hard(x, std::vector<int>{0, 0, 0}));
    // no anchor has a positive
    CHECK_THROWS(gds::triplet_batch_hard(x, std::vector<int>{0, 1, 2}));
  }
}

TEST_CASE("cross_entropy") {
  const std::vector<double> uniform(7, 0.3);
  const auto [v, g] = gds::cross_entropy(uniform, 2);
  CHECK_THAT(v, WithinAbs(std::log(7.0), 1e-12));
  CHECK_THAT(g.sum(), WithinAbs(0.0, 1e-15));
  CHECK_THAT(g(2), WithinAbs(1.0 / 7.0 - 1.0, 1e-15));

  const std::vector<double> dominant{60.0, 0.0, 0.0};
  CHECK(gds::cross_entropy(dominant, 0).first < 1e-20);
  CHECK_THROWS(gds::cross_entropy(dominant, 3));
  CHECK_THROWS(gds::cross_entropy(dominant, -1));

  std::mt19937_64 rng(10);
  std::normal_distribution<double> nd;
  std::vector<double> z(5);
  for (auto& e : z) e = nd(rng);
  const auto [v5, g5] = gds::cross_entropy(z, 3);
  auto value = [&] { return gds::cross_entropy(z, 3).first; };
  const auto n5 = gds::numeric_gradient(value, z, 1e-6);
  CHECK(gds::relative_error(g5, n5) < 1e-7);
}

TEST_CASE("normalization Jacobian is orthogonal to the output") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  Matrix f(6, 4), up(6, 4);
  for (int i = 0; i < 6; ++i)
    for (int k = 0; k < 4; ++k) {
      f(i, k) = nd(rng);
      up(i, k) = nd(rng);
    }
  const auto nz = gds::l2_normalize_rows(f);
  const Matrix g = gds::l2_normalize_backward(nz, up);
  for (int i = 0; i < 6; ++i) CHECK_THAT(g.row(i).dot(nz.x.row(i)), WithinAbs(0.0, 1e-14));
  CHECK_THROWS_AS(gds::l2_normalize_rows(Matrix::Zero(2, 3)), gds::runtime_failure);
}

TEST_CASE("distance gradient at coincident points is zero") {
  Matrix x(2, 2);
  x << 1, 0, 1, 0;
  Matrix g = Matrix::Zero(2, 2);
  gds::detail::add_distance_grad(g, x, 0, 1, 0.0, 1.0);
  CHECK(g.isZero(0.0));
}

TEST_CASE("loss config validation") {
  LossConfig c;
  c.kappa = -1.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.lambda_sigma = -0.1;
  CHECK_THROWS(c.validate());
}
