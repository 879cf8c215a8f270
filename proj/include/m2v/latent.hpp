#pragma once

#include "m2v/autodiff.hpp"
#include "m2v/params.hpp"

#include <cstdint>
#include <memory>
#include <string>

namespace m2v {

// ---- Projector: two-layer GCN ---------------------------------------------

enum class GcnNorm { Symmetric, None };
std::string to_string(GcnNorm n);
GcnNorm parse_gcn_norm(const std::string& s);

/// D^{-1/2} Â D^{-1/2} (rows with zero degree stay zero), or Â unchanged.
Matrix normalize_adjacency(const Matrix& adjacency, GcnNorm mode);

inline constexpr const char* kProjectorPrefix = "projector";

/// Glorot-uniform W1 (d x d_z) and W2 (d_z x d_z); no biases.
void init_projector(ParamStore& params, Eigen::Index d, Eigen::Index d_z, Rng& rng);

/// Z = ReLU(Â ReLU(Â X̂ W1) W2) with Â already normalized.
Var project(Tape& tape, ParamStore& params, Var features, std::shared_ptr<const Matrix> adjacency);
Matrix project(const ParamStore& params, const Matrix& features, const Matrix& adjacency);

// ---- Recovery decoder -------------------------------------------------------

inline constexpr const char* kDecoderPrefix = "decoder";

Var decode(Tape& tape, ParamStore& params, Var latent);
Matrix decode(const ParamStore& params, const Matrix& latent);

/// Masked MSE between decoded and observed features over observed entries.
Var recon_loss(Var decoded, const Matrix& observed, const Matrix& mask);

// ---- Priors -----------------------------------------------------------------

struct PriorSpec {
  Eigen::Index d_z = 256;
  double r = 8.0;
  double r_a = 9.6;
  double r_b = 16.0;
  /// Atoms per Sinkhorn evaluation; 0 means one per embedded node.
  std::size_t sample_count = 0;

  /// r_a = 1.2 r, r_b = 2 r.
  static PriorSpec from_radius(Eigen::Index d_z, double r, std::size_t sample_count = 0);
  void validate() const;
};

/// Radius in [lo, hi] with density ∝ ρ^{d-1} exp(-ρ²/2), by inverting the
/// regularized incomplete gamma of ρ²/2 with bisection to 1e-12.
double truncated_chi_radius(double u, double dim, double lo, double hi);

/// Standard Gaussian restricted to the ball ‖z‖ ≤ r.
Matrix sample_ball_prior(std::size_t m, const PriorSpec& spec, std::uint64_t seed);
/// Standard Gaussian restricted to the shell r_a < ‖z‖ ≤ r_b.
Matrix sample_shell_gaussian(std::size_t m, const PriorSpec& spec, std::uint64_t seed);

// ---- Sinkhorn divergence ----------------------------------------------------

struct SinkhornConfig {
  double eps = 0.1;
  int iters = 1000;
  bool debiased = true;

  void validate() const;
};

/// Pairwise squared Euclidean costs, clamped at zero.
Matrix squared_distances(const Matrix& x, const Matrix& y);

/// Entropic OT value between uniform clouds (dual objective after `iters`
/// symmetric log-domain updates, squared-Euclidean cost).
double entropic_ot(const Matrix& x, const Matrix& y, const SinkhornConfig& cfg);

/// S = OT(P,Q) − ½OT(P,P) − ½OT(Q,Q) when debiased, else OT(P,Q).
double sinkhorn_divergence(const Matrix& p, const Matrix& q, const SinkhornConfig& cfg);

/// Differentiable in `p`; gradients are backpropagated through every iteration.
Var sinkhorn_divergence(Var p, const Matrix& q, const SinkhornConfig& cfg);

}  // namespace m2v
