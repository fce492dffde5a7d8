#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "gds/common.hpp"

namespace gds {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw validation_error("unknown domain '" + s + "'");
}

// Struct-of-arrays: row i of `features` belongs to identities[i], domains[i].
struct LabeledDataset {
  Matrix features;
  std::vector<int> identities;
  std::vector<Domain> domains;
  int identity_count = 0;
  std::uint64_t rng_seed = 0;

  std::size_t size() const { return identities.size(); }
};

// Target-domain affine distortion applied to identity centers: rotation, a
// per-dimension scale, a shared random translation of per-coordinate std
// offset_scale, then isotropic Gaussian noise of noise_factor * spread.
struct DomainShift {
  bool enabled = false;
  bool rotate = true;
  double scale_min = 0.5;
  double scale_max = 2.0;
  double offset_scale = 0.0;
  double noise_factor = 0.3;
  // Also map each sample's deviation from its center through the linear part.
  bool map_deviations = false;
};

struct DomainConfig {
  int identity_count = 64;
  int samples_per_identity = 20;
  int dim = 32;
  double spread = 0.6;  // per-coordinate std of samples around their center
  DomainShift shift;
  Domain domain = Domain::source;
  std::uint64_t seed = 0;
};

namespace detail {

inline Matrix random_rotation(int dim, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  // Fix column signs so the map is a deterministic function of g.
  for (int c = 0; c < dim; ++c) {
    if (qr.matrixQR()(c, c) < 0) q.col(c) *= -1.0;
  }
  return q;
}

}  // namespace detail

// Identity centers ~ N(0, I); samples = center + spread * N(0, I).
inline LabeledDataset generate_domain(const DomainConfig& cfg) {
  require(cfg.identity_count >= 1, "identity_count must be >= 1");
  require(cfg.samples_per_identity >= 1, "samples_per_identity must be >= 1");
  require(cfg.dim >= 1, "dim must be >= 1");
  require(cfg.spread >= 0.0, "spread must be >= 0");
  const auto& sh = cfg.shift;
  if (sh.enabled) {
    require(sh.scale_min > 0.0 && sh.scale_min <= sh.scale_max, "shift scale range invalid");
    require(sh.noise_factor >= 0.0 && sh.offset_scale >= 0.0, "shift noise/offset must be >= 0");
  }

  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int d = cfg.dim;

  Matrix centers(cfg.identity_count, d);
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = normal(rng);

  Matrix linear = Matrix::Identity(d, d);
  if (sh.enabled) {
    Matrix rot = sh.rotate ? detail::random_rotation(d, rng) : Matrix::Identity(d, d);
    std::uniform_real_distribution<double> u(sh.scale_min, sh.scale_max);
    Vector scale(d);
    for (int k = 0; k < d; ++k) scale(k) = u(rng);
    Vector offset(d);
    for (int k = 0; k < d; ++k) offset(k) = sh.offset_scale * normal(rng);
    Matrix mapped = centers * rot.transpose();
    for (Eigen::Index i = 0; i < mapped.rows(); ++i) {
      for (int k = 0; k < d; ++k) {
        mapped(i, k) = scale(k) * mapped(i, k) + offset(k) + sh.noise_factor * cfg.spread * normal(rng);
      }
    }
    centers = std::move(mapped);
    if (sh.map_deviations) linear = scale.asDiagonal() * rot;
  }

  LabeledDataset ds;
  const auto n = static_cast<Eigen::Index>(cfg.identity_count) * cfg.samples_per_identity;
  ds.features.resize(n, d);
  ds.identities.reserve(static_cast<std::size_t>(n));
  ds.domains.assign(static_cast<std::size_t>(n), cfg.domain);
  ds.identity_count = cfg.identity_count;
  ds.rng_seed = cfg.seed;
  Eigen::Index r = 0;
  Vector dev(d);
  for (int id = 0; id < cfg.identity_count; ++id) {
    for (int s = 0; s < cfg.samples_per_identity; ++s, ++r) {
      for (int k = 0; k < d; ++k) dev(k) = cfg.spread * normal(rng);
      ds.features.row(r) = centers.row(id) + (linear * dev).transpose();
      ds.identities.push_back(id);
    }
  }
  return ds;
}

// Rows of `ds` selected by `rows`, identities relabeled 0.. in order of first
// appearance.
inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  LabeledDataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.features.cols());
  out.rng_seed = ds.rng_seed;
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < ds.size(), "subset: row out of range");
    out.features.row(static_cast<Eigen::Index>(i)) =
        ds.features.row(static_cast<Eigen::Index>(rows[i]));
    const int old = ds.identities[rows[i]];
    auto [it, inserted] = relabel.try_emplace(old, static_cast<int>(relabel.size()));
    out.identities.push_back(it->second);
    out.domains.push_back(ds.domains[rows[i]]);
  }
  out.identity_count = static_cast<int>(relabel.size());
  return out;
}

struct DatasetSplit {
  LabeledDataset train;
  LabeledDataset test;
};

// Identity-disjoint split: the first round(train_fraction * identity_count)
// identities train, the rest test.
inline DatasetSplit split_by_identity(const LabeledDataset& ds, double train_fraction) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0,1)");
  const int cut = static_cast<int>(std::lround(train_fraction * ds.identity_count));
  require(cut >= 1 && cut < ds.identity_count, "split leaves an empty side");
  std::vector<std::size_t> tr;
  std::vector<std::size_t> te;
  for (std::size_t i = 0; i < ds.size(); ++i) (ds.identities[i] < cut ? tr : te).push_back(i);
  return {subset(ds, tr), subset(ds, te)};
}

// Sample rows grouped by label, labels ascending, rows ascending.
inline std::map<int, std::vector<std::size_t>> group_by_label(std::span<const int> labels) {
  std::map<int, std::vector<std::size_t>> g;
  for (std::size_t i = 0; i < labels.size(); ++i) g[labels[i]].push_back(i);
  return g;
}

struct PkBatch {
  std::vector<std::size_t> indices;  // rows into the dataset
  std::vector<int> labels;           // aligned with indices
  int p = 0;
  int k = 0;
};

namespace detail {

// First `count` entries of v become a uniform sample without replacement.
template <typename T>
void partial_shuffle(std::vector<T>& v, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, v.size() - 1);
    std::swap(v[i], v[u(rng)]);
  }
}

}  // namespace detail

// P identities uniformly without replacement, then K of each identity's rows
// uniformly without replacement. Labels with < K rows are never drawn.
inline PkBatch pk_sample(std::span<const int> labels, int p, int k, Rng& rng) {
  require(p >= 1 && k >= 1, "P and K must be >= 1");
  const auto groups = group_by_label(labels);
  std::vector<const std::vector<std::size_t>*> eligible;
  for (const auto& [label, rows] : groups) {
    if (label >= 0 && rows.size() >= static_cast<std::size_t>(k)) eligible.push_back(&rows);
  }
  if (eligible.size() < static_cast<std::size_t>(p)) {
    throw validation_error("pk_sample: need " + std::to_string(p) + " identities with >= " +
                           std::to_string(k) + " samples, have " + std::to_string(eligible.size()));
  }
  detail::partial_shuffle(eligible, static_cast<std::size_t>(p), rng);
  PkBatch b;
  b.p = p;
  b.k = k;
  for (int i = 0; i < p; ++i) {
    std::vector<std::size_t> rows = *eligible[static_cast<std::size_t>(i)];
    detail::partial_shuffle(rows, static_cast<std::size_t>(k), rng);
    for (int j = 0; j < k; ++j) {
      b.indices.push_back(rows[static_cast<std::size_t>(j)]);
      b.labels.push_back(labels[rows[static_cast<std::size_t>(j)]]);
    }
  }
  return b;
}

struct PairLists {
  std::vector<IndexPair> positive;
  std::vector<IndexPair> negative;
};

// All unordered within-batch pairs (positions into the batch), split by label.
inline PairLists enumerate_pairs(std::span<const int> batch_labels) {
  PairLists out;
  for (std::size_t i = 0; i < batch_labels.size(); ++i) {
    for (std::size_t j = i + 1; j < batch_labels.size(); ++j) {
      (batch_labels[i] == batch_labels[j] ? out.positive : out.negative).push_back({i, j});
    }
  }
  return out;
}

inline PairLists enumerate_pairs(const PkBatch& batch) { return enumerate_pairs(batch.labels); }

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: header "domain,identity,f0,...,f{D-1}", doubles in shortest
// round-trip form.

inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw validation_error("bad number '" + std::string(s) + "'");
  }
  return v;
}

inline void write_dataset_csv(const LabeledDataset& ds, std::ostream& os) {
  os << "domain,identity";
  for (Eigen::Index k = 0; k < ds.features.cols(); ++k) os << ",f" << k;
  os << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << to_string(ds.domains[i]) << ',' << ds.identities[i];
    for (Eigen::Index k = 0; k < ds.features.cols(); ++k) {
      os << ',' << format_double(ds.features(static_cast<Eigen::Index>(i), k));
    }
    os << '\n';
  }
}

inline LabeledDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("domain,identity", 0) != 0) {
    throw validation_error("dataset csv: missing header");
  }
  const auto dim = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') - 1);
  require(dim >= 1, "dataset csv: no feature columns");
  std::vector<double> values;
  LabeledDataset ds;
  int max_id = -1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    for (;;) {
      auto c = rest.find(',');
      cells.push_back(rest.substr(0, c));
      if (c == std::string_view::npos) break;
      rest.remove_prefix(c + 1);
    }
    require(static_cast<Eigen::Index>(cells.size()) == dim + 2, "dataset csv: ragged row");
    ds.domains.push_back(domain_from_string(std::string(cells[0])));
    int id = 0;
    auto [p, ec] = std::from_chars(cells[1].data(), cells[1].data() + cells[1].size(), id);
    require(ec == std::errc() && id >= 0, "dataset csv: bad identity");
    ds.identities.push_back(id);
    max_id = std::max(max_id, id);
    for (std::size_t c = 2; c < cells.size(); ++c) values.push_back(parse_double(cells[c]));
  }
  ds.features = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(ds.identities.size()), dim);
  ds.identity_count = max_id + 1;
  return ds;
}

inline void write_dataset_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw runtime_failure("cannot write " + path.string());
  write_dataset_csv(ds, os);
}

inline LabeledDataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw validation_error("cannot read " + path.string());
  return read_dataset_csv(is);
}

}  // namespace gds
