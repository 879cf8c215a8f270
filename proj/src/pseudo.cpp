#include "m2v/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

namespace m2v {

Matrix sample_shell_uniform(std::size_t m, const PriorSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Eigen::Index dim = spec.d_z;
  const double d = static_cast<double>(dim);
  // (r_a/r_b)^d underflows harmlessly to zero for large d.
  const double q = std::exp(d * std::log(spec.r_a / spec.r_b));
  const double lo = spec.r_a * (1.0 + 1e-12);
  const double hi = spec.r_b * (1.0 - 1e-12);

  Rng rng(seed);
  Matrix out(static_cast<Eigen::Index>(m), dim);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double norm = 0.0;
    do {
      for (Eigen::Index j = 0; j < dim; ++j) out(i, j) = rng.normal();
      norm = out.row(i).norm();
    } while (norm == 0.0);
    const double u = rng.uniform_open();
    double rho = spec.r_b * std::exp(std::log(q + u * (1.0 - q)) / d);
    rho = std::clamp(rho, lo, hi);
    out.row(i) *= rho / norm;
  }
  return out;
}

Matrix decode_pseudo(const ParamStore& params, const Matrix& codes) { return decode(params, codes); }

std::vector<Edge> build_pseudo_adjacency(const Matrix& features, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw UsageError("tau_a must lie in (0, 1)");
  const Eigen::Index m = features.rows();
  if (m < 2) {
    std::cerr << "warning: pseudo-anomaly batch has " << m << " node(s); no internal edges\n";
    return {};
  }
  Vector norms = features.rowwise().norm();
  Matrix unit = features;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (norms(i) > 0.0) {
      unit.row(i) /= norms(i);
    } else {
      unit.row(i).setZero();
    }
  }
  const Matrix sim = unit * unit.transpose();

  std::vector<Edge> edges;
  for (Eigen::Index i = 0; i < m; ++i) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i) continue;
      lo = std::min(lo, sim(i, j));
      hi = std::max(hi, sim(i, j));
    }
    if (!(hi > lo)) continue;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i) continue;
      if ((sim(i, j) - lo) / (hi - lo) >= tau) {
        edges.push_back(make_edge(static_cast<std::size_t>(i), static_cast<std::size_t>(j)));
      }
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

Matrix pseudo_adjacency_matrix(std::size_t m, const std::vector<Edge>& edges) {
  const auto mm = static_cast<Eigen::Index>(m);
  Matrix a = Matrix::Zero(mm, mm);
  for (const Edge& e : edges) {
    a(static_cast<Eigen::Index>(e.u), static_cast<Eigen::Index>(e.v)) = 1.0;
    a(static_cast<Eigen::Index>(e.v), static_cast<Eigen::Index>(e.u)) = 1.0;
  }
  return a;
}

PseudoAnomalyBatch generate_pseudo_anomalies(const ParamStore& params, std::size_t n,
                                             const PriorSpec& spec, double eta, double tau,
                                             std::uint64_t seed) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw UsageError("eta must lie in [0, 1]");
  PseudoAnomalyBatch b;
  b.tau = tau;
  b.eta = eta;
  const std::size_t m = floor_count(eta, n);
  b.codes = sample_shell_uniform(m, spec, seed);
  if (m > 0) {
    b.features = decode_pseudo(params, b.codes);
  } else {
    b.features.resize(0, params.value(std::string(kDecoderPrefix) + ".b2").cols());
  }
  require_finite(b.features, "decoded pseudo-anomaly features");
  if (eta > 0.0) b.edges = build_pseudo_adjacency(b.features, tau);
  return b;
}

Matrix AugmentedGraph::adjacency() const { return pseudo_adjacency_matrix(num_nodes(), edges); }

AugmentedGraph augment(const IncompleteGraph& inc, const PseudoAnomalyBatch& batch) {
  if (batch.size() > 0 && static_cast<std::size_t>(batch.features.cols()) != inc.dim()) {
    throw std::invalid_argument("augment: pseudo features " + shape_str(batch.features) +
                                " vs observed " + shape_str(inc.observed_features));
  }
  AugmentedGraph a;
  a.real_count = inc.num_nodes();
  a.pseudo_count = batch.size();
  const auto n = static_cast<Eigen::Index>(a.real_count);
  const auto m = static_cast<Eigen::Index>(a.pseudo_count);
  const auto d = static_cast<Eigen::Index>(inc.dim());
  a.features.resize(n + m, d);
  a.features.topRows(n) = inc.observed_features;
  if (m > 0) a.features.bottomRows(m) = batch.features;
  a.feature_mask.resize(n + m, d);
  a.feature_mask.topRows(n) = inc.masks.feature_mask;
  a.feature_mask.bottomRows(m).setOnes();
  a.edges = inc.observed_edges;
  for (const Edge& e : batch.edges) {
    if (e.v >= a.pseudo_count) throw std::invalid_argument("augment: pseudo edge out of range");
    a.edges.push_back(Edge{e.u + a.real_count, e.v + a.real_count});
  }
  return a;
}

void dump_pseudo(const std::filesystem::path& path, const PseudoAnomalyBatch& batch) {
  Archive ar;
  ar.tensors.emplace_back("codes", batch.codes);
  ar.tensors.emplace_back("features", batch.features);
  ar.tensors.emplace_back("adjacency", pseudo_adjacency_matrix(batch.size(), batch.edges));
  ar.texts.emplace_back("tau", format_double(batch.tau));
  ar.texts.emplace_back("eta", format_double(batch.eta));
  write_archive(path, ar);
}

}  // namespace m2v
