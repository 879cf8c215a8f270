#pragma once

#include "m2v/autodiff.hpp"
#include "m2v/graphio.hpp"
#include "m2v/params.hpp"

#include <optional>
#include <string>

namespace m2v {

// Two-layer perceptron: in -> hidden (ReLU) -> out, stored as
// "<prefix>.w1", "<prefix>.b1", "<prefix>.w2", "<prefix>.b2".
void init_mlp(ParamStore& params, const std::string& prefix, Eigen::Index in, Eigen::Index hidden,
              Eigen::Index out, Rng& rng);
Var mlp_forward(Tape& tape, ParamStore& params, const std::string& prefix, Var x);
Matrix mlp_apply(const ParamStore& params, const std::string& prefix, const Matrix& x);

inline constexpr const char* kImputerPrefix = "imputer";

/// X̂ = f_θ(X_obs), one row at a time; the graph is never consulted.
Var impute_features(Tape& tape, ParamStore& params, Var observed);
Matrix impute_features(const ParamStore& params, const Matrix& observed);

/// Masked MSE between imputed and observed features over observed entries.
Var feature_loss(Var imputed, const Matrix& observed, const Matrix& mask);

enum class DiffusionNorm { RowStochastic, None };
std::string to_string(DiffusionNorm n);
DiffusionNorm parse_diffusion_norm(const std::string& s);

struct DiffusionConfig {
  double beta = 0.85;  // continuation probability
  int max_iters = 50;
  double tol = 1e-6;
  DiffusionNorm normalization = DiffusionNorm::RowStochastic;

  void validate() const;
};

struct DiffusionResult {
  Matrix ppr;  // n x n
  int iterations = 0;
  double residual = 0.0;  // max |P - (βÃP + (1-β)I)|
  bool converged = false;
  DiffusionConfig config;
};

/// Power iteration P ← βÃP + (1−β)I from P = I with Ã = A_obs + I (row-normalized by default).
DiffusionResult ppr_diffuse(const std::vector<Edge>& edges, std::size_t n, const DiffusionConfig& cfg);
DiffusionResult ppr_diffuse(const Matrix& adjacency, const DiffusionConfig& cfg);

/// Â = A_obs + A_ppr. With `top_k`, each row keeps only its k largest
/// off-diagonal diffusion entries (ties to the lower column), the diagonal,
/// and every entry on an observed edge.
Matrix densify_structure(const Matrix& observed, const Matrix& ppr, std::optional<int> top_k = {});

Matrix symmetrize(const Matrix& a);

struct SurrogateStructure {
  Matrix adjacency;  // symmetrized Â
  std::optional<DiffusionResult> diffusion;
};

/// Structure pathway end to end. With `use_diffusion` false the result is A_obs + I.
SurrogateStructure build_structure(const std::vector<Edge>& edges, std::size_t n,
                                   const DiffusionConfig& cfg, std::optional<int> top_k,
                                   bool use_diffusion);

}  // namespace m2v
