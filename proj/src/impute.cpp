#include "m2v/impute.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace m2v {

void init_mlp(ParamStore& params, const std::string& prefix, Eigen::Index in, Eigen::Index hidden,
              Eigen::Index out, Rng& rng) {
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike.
  auto uniform = [&rng](Eigen::Index rows, Eigen::Index cols, double bound) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bound * (2.0 * rng.uniform_open() - 1.0);
    return m;
  };
  const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  params.add(prefix + ".w1", uniform(in, hidden, b1));
  params.add(prefix + ".b1", uniform(1, hidden, b1));
  params.add(prefix + ".w2", uniform(hidden, out, b2));
  params.add(prefix + ".b2", uniform(1, out, b2));
}

Var mlp_forward(Tape& tape, ParamStore& params, const std::string& prefix, Var x) {
  Var h = ops::relu(ops::add_bias(ops::matmul(x, tape.param(params, prefix + ".w1")),
                                  tape.param(params, prefix + ".b1")));
  return ops::add_bias(ops::matmul(h, tape.param(params, prefix + ".w2")),
                       tape.param(params, prefix + ".b2"));
}

Matrix mlp_apply(const ParamStore& params, const std::string& prefix, const Matrix& x) {
  Matrix h = x * params.value(prefix + ".w1");
  h.rowwise() += params.value(prefix + ".b1").row(0);
  h = h.cwiseMax(0.0);
  Matrix out = h * params.value(prefix + ".w2");
  out.rowwise() += params.value(prefix + ".b2").row(0);
  return out;
}

Var impute_features(Tape& tape, ParamStore& params, Var observed) {
  return mlp_forward(tape, params, kImputerPrefix, observed);
}

Matrix impute_features(const ParamStore& params, const Matrix& observed) {
  return mlp_apply(params, kImputerPrefix, observed);
}

Var feature_loss(Var imputed, const Matrix& observed, const Matrix& mask) {
  return ops::masked_mse(imputed, observed, mask);
}

std::string to_string(DiffusionNorm n) { return n == DiffusionNorm::RowStochastic ? "row" : "none"; }

DiffusionNorm parse_diffusion_norm(const std::string& s) {
  if (s == "row" || s == "row-stochastic") return DiffusionNorm::RowStochastic;
  if (s == "none") return DiffusionNorm::None;
  throw UsageError("unknown diffusion normalization '" + s + "'");
}

void DiffusionConfig::validate() const {
  if (!(beta > 0.0 && beta < 1.0)) throw UsageError("diffusion beta must lie in (0, 1)");
  if (!(tol > 0.0)) throw UsageError("diffusion tol must be positive");
  if (max_iters < 1) throw UsageError("diffusion max_iters must be >= 1");
}

DiffusionResult ppr_diffuse(const std::vector<Edge>& edges, std::size_t n, const DiffusionConfig& cfg) {
  cfg.validate();
  using Sparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;
  const auto nn = static_cast<Eigen::Index>(n);

  std::vector<double> degree(n, 1.0);  // self loop
  for (const Edge& e : edges) {
    degree[e.u] += 1.0;
    degree[e.v] += 1.0;
  }
  auto weight = [&](std::size_t row) {
    return cfg.normalization == DiffusionNorm::RowStochastic ? 1.0 / degree[row] : 1.0;
  };
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(n + 2 * edges.size());
  for (std::size_t i = 0; i < n; ++i) {
    trips.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i), weight(i));
  }
  for (const Edge& e : edges) {
    trips.emplace_back(static_cast<Eigen::Index>(e.u), static_cast<Eigen::Index>(e.v), weight(e.u));
    trips.emplace_back(static_cast<Eigen::Index>(e.v), static_cast<Eigen::Index>(e.u), weight(e.v));
  }
  Sparse trans(nn, nn);
  trans.setFromTriplets(trips.begin(), trips.end());

  DiffusionResult res;
  res.config = cfg;
  Matrix p = Matrix::Identity(nn, nn);
  Matrix next(nn, nn);
  const double teleport = 1.0 - cfg.beta;
  for (int t = 1; t <= cfg.max_iters; ++t) {
    next.noalias() = cfg.beta * (trans * p);
    next.diagonal().array() += teleport;
    const double change = (next - p).cwiseAbs().maxCoeff();
    p.swap(next);
    res.iterations = t;
    if (!std::isfinite(change)) break;
    if (change < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  next.noalias() = cfg.beta * (trans * p);
  next.diagonal().array() += teleport;
  res.residual = nn > 0 ? (next - p).cwiseAbs().maxCoeff() : 0.0;
  if (!res.converged) {
    std::cerr << "warning: PPR diffusion stopped after " << res.iterations
              << " iterations without reaching tol (residual " << res.residual << ", normalization "
              << to_string(cfg.normalization) << ")\n";
  }
  res.ppr = std::move(p);
  return res;
}

DiffusionResult ppr_diffuse(const Matrix& adjacency, const DiffusionConfig& cfg) {
  if (adjacency.rows() != adjacency.cols()) {
    throw std::invalid_argument("ppr_diffuse: adjacency must be square, got " + shape_str(adjacency));
  }
  std::vector<Edge> edges;
  for (Eigen::Index i = 0; i < adjacency.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < adjacency.cols(); ++j) {
      if (adjacency(i, j) != 0.0) {
        edges.push_back(Edge{static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
      }
    }
  }
  return ppr_diffuse(edges, static_cast<std::size_t>(adjacency.rows()), cfg);
}

Matrix densify_structure(const Matrix& observed, const Matrix& ppr, std::optional<int> top_k) {
  if (observed.rows() != ppr.rows() || observed.cols() != ppr.cols()) {
    throw std::invalid_argument("densify_structure: " + shape_str(observed) + " vs " + shape_str(ppr));
  }
  if (!top_k) return observed + ppr;
  if (*top_k < 0) throw UsageError("top_k must be non-negative");

  Matrix kept = Matrix::Zero(ppr.rows(), ppr.cols());
  std::vector<Eigen::Index> order;
  for (Eigen::Index i = 0; i < ppr.rows(); ++i) {
    order.clear();
    for (Eigen::Index j = 0; j < ppr.cols(); ++j) {
      if (j != i) order.push_back(j);
    }
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(*top_k), order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](Eigen::Index a, Eigen::Index b) {
                        if (ppr(i, a) != ppr(i, b)) return ppr(i, a) > ppr(i, b);
                        return a < b;
                      });
    for (std::size_t q = 0; q < k; ++q) kept(i, order[q]) = ppr(i, order[q]);
    if (i < ppr.cols()) kept(i, i) = ppr(i, i);
    for (Eigen::Index j = 0; j < ppr.cols(); ++j) {
      if (observed(i, j) != 0.0) kept(i, j) = ppr(i, j);
    }
  }
  return observed + kept;
}

Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

SurrogateStructure build_structure(const std::vector<Edge>& edges, std::size_t n,
                                   const DiffusionConfig& cfg, std::optional<int> top_k,
                                   bool use_diffusion) {
  const auto nn = static_cast<Eigen::Index>(n);
  Matrix observed = Matrix::Zero(nn, nn);
  for (const Edge& e : edges) {
    observed(static_cast<Eigen::Index>(e.u), static_cast<Eigen::Index>(e.v)) = 1.0;
    observed(static_cast<Eigen::Index>(e.v), static_cast<Eigen::Index>(e.u)) = 1.0;
  }
  SurrogateStructure s;
  if (!use_diffusion) {
    observed.diagonal().array() += 1.0;
    s.adjacency = std::move(observed);
    return s;
  }
  DiffusionResult diff = ppr_diffuse(edges, n, cfg);
  s.adjacency = symmetrize(densify_structure(observed, diff.ppr, top_k));
  diff.ppr.resize(0, 0);  // provenance only; the matrix lives in the adjacency
  s.diffusion = std::move(diff);
  return s;
}

}  // namespace m2v
