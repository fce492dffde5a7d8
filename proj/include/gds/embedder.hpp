#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gds/common.hpp"
#include "gds/losses.hpp"

namespace gds {

enum class Activation : std::uint32_t { tanh = 0, identity = 1 };

struct Dense {
  Matrix weight;  // out x in
  Vector bias;    // out
};

// Weights (or gradients, or Adam moments) of the embedder.
struct ParamSet {
  std::vector<Dense> layers;
  std::optional<Dense> classifier;  // embed_dim -> classes, stage-1 only
};

struct MlpShape {
  int input_dim = 32;
  std::vector<int> hidden = {64, 64};
  int embed_dim = 16;
  int classes = 0;  // 0 = no classification head
  Activation activation = Activation::tanh;
};

struct MlpParams {
  ParamSet weights;
  ParamSet adam_m;
  ParamSet adam_v;
  Activation activation = Activation::tanh;
  std::uint64_t step = 0;
  // Bumped on every parameter change; traces remember the value they saw.
  std::uint64_t version = 0;

  int input_dim() const { return static_cast<int>(weights.layers.front().weight.cols()); }
  int embed_dim() const { return static_cast<int>(weights.layers.back().weight.rows()); }
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

namespace detail {

inline Dense zeros_like(const Dense& d) {
  return {Matrix::Zero(d.weight.rows(), d.weight.cols()), Vector::Zero(d.bias.size())};
}

inline ParamSet zeros_like(const ParamSet& p) {
  ParamSet z;
  for (const auto& l : p.layers) z.layers.push_back(zeros_like(l));
  if (p.classifier) z.classifier = zeros_like(*p.classifier);
  return z;
}

inline Dense init_dense(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Dense d{Matrix(out, in), Vector::Zero(out)};
  for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = u(rng);
  return d;
}

inline void append_spans(Dense& d, std::vector<std::span<double>>& out) {
  out.emplace_back(d.weight.data(), static_cast<std::size_t>(d.weight.size()));
  out.emplace_back(d.bias.data(), static_cast<std::size_t>(d.bias.size()));
}

inline Matrix activate(const Matrix& z, Activation a) {
  return a == Activation::tanh ? Matrix(z.array().tanh().matrix()) : z;
}

// dL/dz given dL/da and the activation output a.
inline Matrix activate_backward(const Matrix& a, const Matrix& grad, Activation act) {
  if (act == Activation::identity) return grad;
  return (grad.array() * (1.0 - a.array().square())).matrix();
}

}  // namespace detail

// Flat views over every tensor, classifier last; used by Adam and checks.
inline std::vector<std::span<double>> tensor_spans(ParamSet& p) {
  std::vector<std::span<double>> out;
  for (auto& l : p.layers) detail::append_spans(l, out);
  if (p.classifier) detail::append_spans(*p.classifier, out);
  return out;
}

inline MlpParams init_mlp(const MlpShape& shape, Rng& rng) {
  require(shape.input_dim > 0 && shape.embed_dim > 0, "mlp dimensions must be positive");
  for (int h : shape.hidden) require(h > 0, "hidden widths must be positive");
  MlpParams p;
  p.activation = shape.activation;
  int in = shape.input_dim;
  for (int h : shape.hidden) {
    p.weights.layers.push_back(detail::init_dense(in, h, rng));
    in = h;
  }
  p.weights.layers.push_back(detail::init_dense(in, shape.embed_dim, rng));
  if (shape.classes > 0) {
    p.weights.classifier = detail::init_dense(shape.embed_dim, shape.classes, rng);
  }
  p.adam_m = detail::zeros_like(p.weights);
  p.adam_v = detail::zeros_like(p.weights);
  return p;
}

inline void drop_classifier(MlpParams& p) {
  p.weights.classifier.reset();
  p.adam_m.classifier.reset();
  p.adam_v.classifier.reset();
  ++p.version;
}

struct ForwardTrace {
  // activations[0] is the input; activations[l + 1] is the output of layer l.
  std::vector<Matrix> activations;
  Normalized normalized;
  std::uint64_t params_version = 0;
};

struct ForwardResult {
  Matrix embeddings;  // unit rows
  ForwardTrace trace;
};

inline ForwardResult forward(const MlpParams& params, const Matrix& inputs) {
  require(inputs.cols() == params.input_dim(), "forward: input dimension mismatch");
  ForwardTrace t;
  t.params_version = params.version;
  t.activations.reserve(params.weights.layers.size() + 1);
  t.activations.push_back(inputs);
  const auto last = params.weights.layers.size() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    const Dense& d = params.weights.layers[l];
    Matrix z = t.activations.back() * d.weight.transpose();
    z.rowwise() += d.bias.transpose();
    t.activations.push_back(l == last ? z : detail::activate(z, params.activation));
  }
  t.normalized = l2_normalize_rows(t.activations.back());
  Matrix emb = t.normalized.x;
  return {std::move(emb), std::move(t)};
}

struct BackwardResult {
  ParamSet param_grads;  // no classifier entry
  Matrix input_grads;
};

// Gradients of <grad_embeddings, embeddings> w.r.t. weights and inputs.
inline BackwardResult backward(const MlpParams& params, const ForwardTrace& trace,
                               const Matrix& grad_embeddings) {
  require(trace.params_version == params.version &&
              trace.activations.size() == params.weights.layers.size() + 1,
          "backward: trace does not match current parameters");
  require(grad_embeddings.rows() == trace.normalized.x.rows() &&
              grad_embeddings.cols() == trace.normalized.x.cols(),
          "backward: gradient shape mismatch");
  BackwardResult r;
  r.param_grads.layers.resize(params.weights.layers.size());
  Matrix g = l2_normalize_backward(trace.normalized, grad_embeddings);
  for (std::size_t l = params.weights.layers.size(); l-- > 0;) {
    const Dense& d = params.weights.layers[l];
    if (l + 1 < params.weights.layers.size()) {
      g = detail::activate_backward(trace.activations[l + 1], g, params.activation);
    }
    const Matrix& in = trace.activations[l];
    r.param_grads.layers[l] = {g.transpose() * in, g.colwise().sum().transpose()};
    g = g * d.weight;
  }
  r.input_grads = std::move(g);
  return r;
}

inline Matrix classifier_logits(const MlpParams& params, const Matrix& embeddings) {
  require(params.weights.classifier.has_value(), "classifier head not present");
  const Dense& c = *params.weights.classifier;
  Matrix z = embeddings * c.weight.transpose();
  z.rowwise() += c.bias.transpose();
  return z;
}

struct ClassifierGrads {
  Dense head;
  Matrix grad_embeddings;
};

inline ClassifierGrads classifier_backward(const MlpParams& params, const Matrix& embeddings,
                                           const Matrix& grad_logits) {
  const Dense& c = *params.weights.classifier;
  return {{grad_logits.transpose() * embeddings, grad_logits.colwise().sum().transpose()},
          grad_logits * c.weight};
}

inline bool all_finite(ParamSet& p) {
  for (auto s : tensor_spans(p)) {
    for (double v : s) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// Bias-corrected Adam. Tensors absent from `grads` (e.g. a missing
// classifier entry) are left untouched.
inline void adam_step(MlpParams& params, ParamSet grads, const AdamConfig& cfg) {
  require(grads.layers.size() == params.weights.layers.size(), "adam_step: layer count mismatch");
  if (!all_finite(grads)) throw runtime_failure("adam_step: non-finite gradient");
  const bool with_head = grads.classifier.has_value();
  require(!with_head || params.weights.classifier.has_value(), "adam_step: unexpected classifier grad");

  ++params.step;
  ++params.version;
  const double t = static_cast<double>(params.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);

  auto w = tensor_spans(params.weights);
  auto m = tensor_spans(params.adam_m);
  auto v = tensor_spans(params.adam_v);
  auto g = tensor_spans(grads);
  for (std::size_t k = 0; k < g.size(); ++k) {
    require(g[k].size() == w[k].size(), "adam_step: tensor shape mismatch");
    for (std::size_t i = 0; i < g[k].size(); ++i) {
      m[k][i] = cfg.beta1 * m[k][i] + (1.0 - cfg.beta1) * g[k][i];
      v[k][i] = cfg.beta2 * v[k][i] + (1.0 - cfg.beta2) * g[k][i] * g[k][i];
      w[k][i] -= cfg.lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: "GDSMLP" magic, format version, then weights / m / v param sets,
// each tensor prefixed by its (rows, cols). Native little-endian doubles.

inline constexpr char kCheckpointMagic[8] = {'G', 'D', 'S', 'M', 'L', 'P', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw validation_error("checkpoint truncated");
  return v;
}

inline void put_dense(std::ostream& os, const Dense& d) {
  put<std::uint64_t>(os, static_cast<std::uint64_t>(d.weight.rows()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(d.weight.cols()));
  os.write(reinterpret_cast<const char*>(d.weight.data()),
           static_cast<std::streamsize>(sizeof(double) * d.weight.size()));
  os.write(reinterpret_cast<const char*>(d.bias.data()),
           static_cast<std::streamsize>(sizeof(double) * d.bias.size()));
}

inline Dense get_dense(std::istream& is) {
  const auto rows = get<std::uint64_t>(is);
  const auto cols = get<std::uint64_t>(is);
  if (rows == 0 || cols == 0 || rows > (1u << 20) || cols > (1u << 20)) {
    throw validation_error("checkpoint: bad tensor shape");
  }
  Dense d{Matrix(rows, cols), Vector(rows)};
  is.read(reinterpret_cast<char*>(d.weight.data()),
          static_cast<std::streamsize>(sizeof(double) * d.weight.size()));
  is.read(reinterpret_cast<char*>(d.bias.data()),
          static_cast<std::streamsize>(sizeof(double) * d.bias.size()));
  if (!is) throw validation_error("checkpoint truncated");
  return d;
}

inline void put_set(std::ostream& os, const ParamSet& p) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) put_dense(os, l);
  put<std::uint8_t>(os, p.classifier ? 1 : 0);
  if (p.classifier) put_dense(os, *p.classifier);
}

inline ParamSet get_set(std::istream& is) {
  ParamSet p;
  const auto n = get<std::uint32_t>(is);
  if (n == 0 || n > 64) throw validation_error("checkpoint: bad layer count");
  for (std::uint32_t i = 0; i < n; ++i) p.layers.push_back(get_dense(is));
  if (get<std::uint8_t>(is) != 0) p.classifier = get_dense(is);
  return p;
}

}  // namespace detail

inline void save_checkpoint(const MlpParams& p, std::ostream& os) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.activation));
  detail::put<std::uint64_t>(os, p.step);
  detail::put_set(os, p.weights);
  detail::put_set(os, p.adam_m);
  detail::put_set(os, p.adam_v);
}

inline MlpParams load_checkpoint(std::istream& is) {
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw validation_error("not a checkpoint file");
  }
  if (detail::get<std::uint32_t>(is) != kCheckpointVersion) {
    throw validation_error("unsupported checkpoint version");
  }
  MlpParams p;
  const auto act = detail::get<std::uint32_t>(is);
  if (act > 1) throw validation_error("checkpoint: unknown activation");
  p.activation = static_cast<Activation>(act);
  p.step = detail::get<std::uint64_t>(is);
  p.weights = detail::get_set(is);
  p.adam_m = detail::get_set(is);
  p.adam_v = detail::get_set(is);
  for (std::size_t l = 1; l < p.weights.layers.size(); ++l) {
    if (p.weights.layers[l].weight.cols() != p.weights.layers[l - 1].weight.rows()) {
      throw validation_error("checkpoint: inconsistent layer shapes");
    }
  }
  return p;
}

inline void save_checkpoint(const MlpParams& p, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw runtime_failure("cannot write " + path.string());
  save_checkpoint(p, os);
}

inline MlpParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw validation_error("cannot read " + path.string());
  return load_checkpoint(is);
}

}  // namespace gds
