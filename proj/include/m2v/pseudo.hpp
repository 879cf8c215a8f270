#pragma once

#include "m2v/graphio.hpp"
#include "m2v/latent.hpp"

#include <filesystem>

namespace m2v {

/// Latent codes with density ∝ ρ^{d_z−1} on r_a < ρ < r_b (uniform over the shell volume).
Matrix sample_shell_uniform(std::size_t m, const PriorSpec& spec, std::uint64_t seed);

/// Decoded features for pseudo codes; evaluated outside any tape.
Matrix decode_pseudo(const ParamStore& params, const Matrix& codes);

/// Row-normalized cosine similarity thresholded at `tau` and OR-symmetrized.
/// Returns the undirected edge list over [0, M).
std::vector<Edge> build_pseudo_adjacency(const Matrix& features, double tau);
Matrix pseudo_adjacency_matrix(std::size_t m, const std::vector<Edge>& edges);

struct PseudoAnomalyBatch {
  Matrix codes;              // M x d_z
  Matrix features;           // M x d
  std::vector<Edge> edges;   // over [0, M)
  double tau = 0.5;
  double eta = 0.1;

  std::size_t size() const { return static_cast<std::size_t>(codes.rows()); }
};

/// M = floor(eta * n) codes from the shell, decoded, with their similarity subgraph.
PseudoAnomalyBatch generate_pseudo_anomalies(const ParamStore& params, std::size_t n,
                                             const PriorSpec& spec, double eta, double tau,
                                             std::uint64_t seed);

struct AugmentedGraph {
  Matrix features;          // (n + M) x d
  Matrix feature_mask;      // (n + M) x d, pseudo rows all ones
  std::vector<Edge> edges;  // real edges, then pseudo edges shifted by n
  std::size_t real_count = 0;
  std::size_t pseudo_count = 0;

  std::size_t num_nodes() const { return real_count + pseudo_count; }
  Matrix adjacency() const;
};

/// Block-diagonal union; no edge crosses between real and pseudo indices.
AugmentedGraph augment(const IncompleteGraph& inc, const PseudoAnomalyBatch& batch);

/// Writes codes, features and adjacency to a named-tensor archive.
void dump_pseudo(const std::filesystem::path& path, const PseudoAnomalyBatch& batch);

}  // namespace m2v
