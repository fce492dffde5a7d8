#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gds/common.hpp"
#include "gds/data.hpp"
#include "gds/embedder.hpp"
#include "gds/losses.hpp"

// Central finite-difference checks of every analytic gradient in the library.

namespace gds {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int instances = 20;
  int batch = 16;      // 4 identities x batch/4 samples
  int embed_dim = 8;
  double step = 1e-6;
  double tolerance = 1e-5;
  bool inject_sign_error = false;  // negative control: flips the GDS-H analytic gradient
};

struct SuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  int worst_instance = -1;
  Eigen::Index worst_entry = -1;  // flat index of the largest |analytic - numeric|
  bool passed = false;
};

// ||a - n|| / max(||a||, ||n||), 0 when both vanish.
inline double relative_error(const Vector& analytic, const Vector& numeric) {
  const double scale = std::max(analytic.norm(), numeric.norm());
  return scale == 0.0 ? 0.0 : (analytic - numeric).norm() / scale;
}

// Central differences of f over the entries of `x` (restored afterwards).
inline Vector numeric_gradient(const std::function<double()>& f, std::span<double> x, double h) {
  Vector g(static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g(static_cast<Eigen::Index>(i)) = (up - down) / (2.0 * h);
  }
  return g;
}

namespace detail {

inline Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline Vector flatten(ParamSet& p) {
  std::vector<double> all;
  for (auto s : tensor_spans(p)) all.insert(all.end(), s.begin(), s.end());
  return Eigen::Map<const Vector>(all.data(), static_cast<Eigen::Index>(all.size()));
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline std::vector<int> block_labels(int batch) {
  std::vector<int> labels;
  const int per = std::max(2, batch / 4);
  for (int i = 0; i < batch; ++i) labels.push_back(i / per);
  return labels;
}

// Random pre-update statistics; instance 0 pins beta at 0.99.
inline std::pair<GaussianStats, GaussianStats> random_stats(int instance, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double beta = instance == 0 ? 0.99 : 0.95 * u(rng);
  GaussianStats pos(0.2 + 0.3 * u(rng), 0.005 + 0.05 * u(rng), beta);
  GaussianStats neg(0.5 + 0.3 * u(rng), 0.005 + 0.05 * u(rng), beta);
  return {pos, neg};
}

inline void record(SuiteResult& s, int instance, const Vector& a, const Vector& n) {
  const double e = relative_error(a, n);
  if (e > s.max_rel_error || s.worst_instance < 0) {
    s.max_rel_error = e;
    s.worst_instance = instance;
    Eigen::Index idx = 0;
    (a - n).cwiseAbs().maxCoeff(&idx);
    s.worst_entry = idx;
  }
}

}  // namespace detail

inline std::vector<SuiteResult> run_gradchecks(const GradcheckOptions& opt) {
  Rng rng(derive_seed(opt.seed, "gradcheck"));
  const LossConfig cfg;
  const std::vector<int> labels = detail::block_labels(opt.batch);
  const PairLists pairs = enumerate_pairs(labels);
  const double sign = opt.inject_sign_error ? -1.0 : 1.0;

  SuiteResult gdsh{"gds_h_loss"};
  SuiteResult triplet{"triplet_batch_hard"};
  SuiteResult ce{"cross_entropy"};
  SuiteResult mlp{"embedder_backward"};
  SuiteResult e2e{"end_to_end"};

  for (int inst = 0; inst < opt.instances; ++inst) {
    // Raw features -> L2 normalization -> loss.
    Matrix f = detail::random_matrix(opt.batch, opt.embed_dim, rng);
    auto [pos, neg] = detail::random_stats(inst, rng);
    {
      auto value = [&] {
        return detail::gds_h_unchecked(l2_normalize_rows(f).x, pairs.positive, pairs.negative, pos,
                                       neg, cfg).output.value;
      };
      const Normalized nz = l2_normalize_rows(f);
      const auto r = gds_h_loss(nz.x, pairs.positive, pairs.negative, pos, neg, cfg);
      const Matrix ga = sign * l2_normalize_backward(nz, r.output.grad_embeddings);
      const Vector gn = numeric_gradient(value, {f.data(), static_cast<std::size_t>(f.size())}, opt.step);
      detail::record(gdsh, inst, detail::flatten(ga), gn);
    }
    {
      auto value = [&] { return detail::triplet_unchecked(l2_normalize_rows(f).x, labels).value; };
      const Normalized nz = l2_normalize_rows(f);
      const Matrix ga = l2_normalize_backward(nz, triplet_batch_hard(nz.x, labels).grad_embeddings);
      const Vector gn = numeric_gradient(value, {f.data(), static_cast<std::size_t>(f.size())}, opt.step);
      detail::record(triplet, inst, detail::flatten(ga), gn);
    }
    {
      Matrix logits = detail::random_matrix(opt.batch, 5, rng);
      std::vector<int> cls;
      for (int i = 0; i < opt.batch; ++i) cls.push_back(static_cast<int>(rng() % 5));
      auto value = [&] { return cross_entropy_batch(logits, cls).value; };
      const Matrix ga = cross_entropy_batch(logits, cls).grad_embeddings;
      const Vector gn =
          numeric_gradient(value, {logits.data(), static_cast<std::size_t>(logits.size())}, opt.step);
      detail::record(ce, inst, detail::flatten(ga), gn);
    }
    {
      // Small net D=4, H=6, E=3 against a random upstream gradient.
      MlpShape shape{4, {6}, 3, 0, Activation::tanh};
      MlpParams p = init_mlp(shape, rng);
      Matrix x = detail::random_matrix(5, 4, rng);
      const Matrix up = detail::random_matrix(5, 3, rng);
      auto value = [&] { return (forward(p, x).embeddings.array() * up.array()).sum(); };
      const auto fw = forward(p, x);
      auto bw = backward(p, fw.trace, up);
      Vector ga(detail::flatten(bw.param_grads).size() + bw.input_grads.size());
      ga << detail::flatten(bw.param_grads), detail::flatten(bw.input_grads);
      std::vector<double> gn;
      for (auto s : tensor_spans(p.weights)) {
        const Vector g = numeric_gradient(value, s, opt.step);
        gn.insert(gn.end(), g.data(), g.data() + g.size());
      }
      const Vector gx = numeric_gradient(value, {x.data(), static_cast<std::size_t>(x.size())}, opt.step);
      gn.insert(gn.end(), gx.data(), gx.data() + gx.size());
      detail::record(mlp, inst, ga, Eigen::Map<const Vector>(gn.data(), static_cast<Eigen::Index>(gn.size())));
    }
    {
      // MLP -> normalization -> stats update -> GDS-H, w.r.t. every weight.
      MlpShape shape{10, {12}, opt.embed_dim, 0, Activation::tanh};
      MlpParams p = init_mlp(shape, rng);
      const Matrix x = detail::random_matrix(opt.batch, 10, rng);
      auto value = [&] {
        return detail::gds_h_unchecked(forward(p, x).embeddings, pairs.positive, pairs.negative, pos,
                                       neg, cfg).output.value;
      };
      const auto fw = forward(p, x);
      const auto r = gds_h_loss(fw.embeddings, pairs.positive, pairs.negative, pos, neg, cfg);
      auto bw = backward(p, fw.trace, r.output.grad_embeddings);
      const Vector ga = sign * detail::flatten(bw.param_grads);
      std::vector<double> gn;
      for (auto s : tensor_spans(p.weights)) {
        const Vector g = numeric_gradient(value, s, opt.step);
        gn.insert(gn.end(), g.data(), g.data() + g.size());
      }
      detail::record(e2e, inst, ga, Eigen::Map<const Vector>(gn.data(), static_cast<Eigen::Index>(gn.size())));
    }
  }
  std::vector<SuiteResult> out{gdsh, triplet, ce, mlp, e2e};
  for (auto& s : out) s.passed = s.max_rel_error < opt.tolerance;
  return out;
}

}  // namespace gds
