#include "m2v/latent.hpp"

#include "m2v/impute.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

namespace m2v {

std::string to_string(GcnNorm n) { return n == GcnNorm::Symmetric ? "symmetric" : "none"; }

GcnNorm parse_gcn_norm(const std::string& s) {
  if (s == "symmetric" || s == "sym") return GcnNorm::Symmetric;
  if (s == "none") return GcnNorm::None;
  throw UsageError("unknown GCN normalization '" + s + "'");
}

Matrix normalize_adjacency(const Matrix& adjacency, GcnNorm mode) {
  if (adjacency.rows() != adjacency.cols()) {
    throw std::invalid_argument("normalize_adjacency: not square " + shape_str(adjacency));
  }
  if (mode == GcnNorm::None) return adjacency;
  Vector inv_sqrt = adjacency.rowwise().sum();
  for (Eigen::Index i = 0; i < inv_sqrt.size(); ++i) {
    inv_sqrt(i) = inv_sqrt(i) > 0.0 ? 1.0 / std::sqrt(inv_sqrt(i)) : 0.0;
  }
  return inv_sqrt.asDiagonal() * adjacency * inv_sqrt.asDiagonal();
}

void init_projector(ParamStore& params, Eigen::Index d, Eigen::Index d_z, Rng& rng) {
  auto glorot = [&rng](Eigen::Index rows, Eigen::Index cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bound * (2.0 * rng.uniform_open() - 1.0);
    return m;
  };
  params.add(std::string(kProjectorPrefix) + ".w1", glorot(d, d_z));
  params.add(std::string(kProjectorPrefix) + ".w2", glorot(d_z, d_z));
}

Var project(Tape& tape, ParamStore& params, Var features, std::shared_ptr<const Matrix> adjacency) {
  if (adjacency->rows() != features.rows()) {
    throw std::invalid_argument("project: adjacency " + shape_str(*adjacency) + " vs features " +
                                shape_str(features.value()));
  }
  const std::string p = kProjectorPrefix;
  Var h = ops::relu(ops::matmul(adjacency, ops::matmul(features, tape.param(params, p + ".w1"))));
  return ops::relu(ops::matmul(adjacency, ops::matmul(h, tape.param(params, p + ".w2"))));
}

Matrix project(const ParamStore& params, const Matrix& features, const Matrix& adjacency) {
  if (adjacency.rows() != features.rows() || adjacency.cols() != features.rows()) {
    throw std::invalid_argument("project: adjacency " + shape_str(adjacency) + " vs features " +
                                shape_str(features));
  }
  const std::string p = kProjectorPrefix;
  Matrix xw = features * params.value(p + ".w1");
  Matrix h = (adjacency * xw).cwiseMax(0.0);
  Matrix hw = h * params.value(p + ".w2");
  return (adjacency * hw).cwiseMax(0.0);
}

Var decode(Tape& tape, ParamStore& params, Var latent) {
  return mlp_forward(tape, params, kDecoderPrefix, latent);
}

Matrix decode(const ParamStore& params, const Matrix& latent) {
  return mlp_apply(params, kDecoderPrefix, latent);
}

Var recon_loss(Var decoded, const Matrix& observed, const Matrix& mask) {
  return ops::masked_mse(decoded, observed, mask);
}

// ---- Priors -----------------------------------------------------------------

PriorSpec PriorSpec::from_radius(Eigen::Index d_z, double r, std::size_t sample_count) {
  PriorSpec s;
  s.d_z = d_z;
  s.r = r;
  s.r_a = 1.2 * r;
  s.r_b = 2.0 * r;
  s.sample_count = sample_count;
  return s;
}

void PriorSpec::validate() const {
  if (d_z < 1) throw UsageError("prior d_z must be >= 1");
  if (!(r > 0.0 && r < r_a && r_a < r_b) || !std::isfinite(r_b)) {
    throw UsageError("prior radii must satisfy 0 < r < r_a < r_b, got r=" + format_double(r) +
                     " r_a=" + format_double(r_a) + " r_b=" + format_double(r_b));
  }
}

double truncated_chi_radius(double u, double dim, double lo, double hi) {
  const double a = 0.5 * dim;
  auto lower = [a](double rho) { return rho <= 0.0 ? 0.0 : boost::math::gamma_p(a, 0.5 * rho * rho); };
  auto upper = [a](double rho) { return rho <= 0.0 ? 1.0 : boost::math::gamma_q(a, 0.5 * rho * rho); };

  // Work with whichever tail keeps the interval mass representable.
  const double p_lo = lower(lo);
  const bool use_upper = p_lo > 0.5;
  double left = lo;
  double right = hi;
  if (!use_upper) {
    const double p_hi = std::isfinite(hi) ? lower(hi) : 1.0;
    const double target = p_lo + u * (p_hi - p_lo);
    if (!std::isfinite(hi)) right = std::max(lo, 1.0) + 10.0 * std::sqrt(dim) + 40.0;
    while (right - left > 1e-12 * std::max(1.0, right)) {
      const double mid = 0.5 * (left + right);
      if (lower(mid) < target) {
        left = mid;
      } else {
        right = mid;
      }
    }
  } else {
    const double q_lo = upper(lo);
    const double q_hi = std::isfinite(hi) ? upper(hi) : 0.0;
    const double target = q_lo - u * (q_lo - q_hi);
    if (!std::isfinite(hi)) right = lo + 10.0 * std::sqrt(dim) + 40.0;
    while (right - left > 1e-12 * std::max(1.0, right)) {
      const double mid = 0.5 * (left + right);
      if (upper(mid) > target) {
        left = mid;
      } else {
        right = mid;
      }
    }
  }
  return 0.5 * (left + right);
}

namespace {

Matrix sample_radial(std::size_t m, Eigen::Index dim, double lo, double hi, bool open_lo,
                     std::uint64_t seed) {
  Rng rng(seed);
  Matrix out(static_cast<Eigen::Index>(m), dim);
  // Radii are pulled strictly inside the support so rounding in the final
  // scaling cannot land a point on or past a boundary.
  const double cap = hi * (1.0 - 1e-12);
  const double floor = open_lo ? lo * (1.0 + 1e-12) : lo;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double norm = 0.0;
    do {
      for (Eigen::Index j = 0; j < dim; ++j) out(i, j) = rng.normal();
      norm = out.row(i).norm();
    } while (norm == 0.0);
    double rho = truncated_chi_radius(rng.uniform_open(), static_cast<double>(dim), lo, hi);
    rho = std::clamp(rho, floor, cap);
    out.row(i) *= rho / norm;
  }
  return out;
}

}  // namespace

Matrix sample_ball_prior(std::size_t m, const PriorSpec& spec, std::uint64_t seed) {
  spec.validate();
  return sample_radial(m, spec.d_z, 0.0, spec.r, false, seed);
}

Matrix sample_shell_gaussian(std::size_t m, const PriorSpec& spec, std::uint64_t seed) {
  spec.validate();
  return sample_radial(m, spec.d_z, spec.r_a, spec.r_b, true, seed);
}

// ---- Sinkhorn ---------------------------------------------------------------

void SinkhornConfig::validate() const {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw UsageError("sinkhorn eps must be positive");
  if (iters < 1) throw UsageError("sinkhorn iters must be >= 1");
}

Matrix squared_distances(const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) {
    throw std::invalid_argument("squared_distances: " + shape_str(x) + " vs " + shape_str(y));
  }
  Matrix c(x.rows(), y.rows());
  c.noalias() = -2.0 * x * y.transpose();
  c.colwise() += x.rowwise().squaredNorm();
  c.rowwise() += y.rowwise().squaredNorm().transpose();
  return c.cwiseMax(0.0);
}

namespace {

// Flushes subnormals for the lifetime of the guard; exp() of very negative
// log-weights otherwise spends most of its time in microcode assists.
class DenormalGuard {
 public:
  DenormalGuard() {
#if defined(__SSE2__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);
#endif
  }
  ~DenormalGuard() {
#if defined(__SSE2__)
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned saved_ = 0;
};

Matrix self_cost(const Matrix& x) {
  Matrix c = squared_distances(x, x);
  c = 0.5 * (c + c.transpose()).eval();
  c.diagonal().setZero();
  return c;
}

using Array = Eigen::ArrayXd;
using ConstRow = Eigen::Map<const Array>;

// out_i = -eps * log Σ_j exp(h_j - c_ij)/eps, h already carrying eps*log(weight).
void soft_min_rows(const Matrix& c, const Array& h, double eps, Array& out) {
  const double inv = 1.0 / eps;
  const Eigen::Index k = c.cols();
  Array u(k);
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    u = (h - ConstRow(c.row(i).data(), k)) * inv;
    const double mx = u.maxCoeff();
    out(i) = -eps * (mx + std::log((u - mx).exp().sum()));
  }
}

struct PairTrace {
  Matrix f_prev, g_prev, tf, tg;  // iters x m / iters x k
};

struct SelfTrace {
  Matrix f_prev, tf;
};

void check_potentials(const Array& f, const char* what) {
  if (!f.allFinite()) {
    throw NumericalError(std::string("sinkhorn: non-finite potentials in ") + what +
                         " (eps too small for the cost scale?)");
  }
}

double pair_forward(const Matrix& c, const Matrix& ct, const SinkhornConfig& cfg, PairTrace* trace) {
  const Eigen::Index m = c.rows();
  const Eigen::Index k = c.cols();
  const double la = cfg.eps * -std::log(static_cast<double>(m));
  const double lb = cfg.eps * -std::log(static_cast<double>(k));
  Array f = Array::Zero(m), g = Array::Zero(k);
  Array tf(m), tg(k), hf(m), hg(k);
  if (trace) {
    trace->f_prev.resize(cfg.iters, m);
    trace->g_prev.resize(cfg.iters, k);
    trace->tf.resize(cfg.iters, m);
    trace->tg.resize(cfg.iters, k);
  }
  for (int t = 0; t < cfg.iters; ++t) {
    hg = g + lb;
    hf = f + la;
    soft_min_rows(c, hg, cfg.eps, tf);
    soft_min_rows(ct, hf, cfg.eps, tg);
    if (trace) {
      trace->f_prev.row(t) = f.transpose();
      trace->g_prev.row(t) = g.transpose();
      trace->tf.row(t) = tf.transpose();
      trace->tg.row(t) = tg.transpose();
    }
    f = 0.5 * (f + tf);
    g = 0.5 * (g + tg);
  }
  check_potentials(f, "OT(P,Q)");
  check_potentials(g, "OT(P,Q)");
  return f.mean() + g.mean();
}

double self_forward(const Matrix& c, const SinkhornConfig& cfg, SelfTrace* trace) {
  const Eigen::Index m = c.rows();
  const double la = cfg.eps * -std::log(static_cast<double>(m));
  Array f = Array::Zero(m), tf(m), hf(m);
  if (trace) {
    trace->f_prev.resize(cfg.iters, m);
    trace->tf.resize(cfg.iters, m);
  }
  for (int t = 0; t < cfg.iters; ++t) {
    hf = f + la;
    soft_min_rows(c, hf, cfg.eps, tf);
    if (trace) {
      trace->f_prev.row(t) = f.transpose();
      trace->tf.row(t) = tf.transpose();
    }
    f = 0.5 * (f + tf);
  }
  check_potentials(f, "OT(P,P)");
  return 2.0 * f.mean();
}

// d(value)/dC for the pair problem, unrolled over every recorded iteration.
Matrix pair_backward(const Matrix& c, const PairTrace& tr, const SinkhornConfig& cfg) {
  const Eigen::Index m = c.rows();
  const Eigen::Index k = c.cols();
  const double inv = 1.0 / cfg.eps;
  const double la = cfg.eps * -std::log(static_cast<double>(m));
  const double lb = cfg.eps * -std::log(static_cast<double>(k));
  Matrix cbar = Matrix::Zero(m, k);
  Array fbar = Array::Constant(m, 1.0 / static_cast<double>(m));
  Array gbar = Array::Constant(k, 1.0 / static_cast<double>(k));
  Array nf(m), ng(k), wf(k), wg(k), gs(k), tg(k), half_g(k);
  for (int t = cfg.iters - 1; t >= 0; --t) {
    gs = tr.g_prev.row(t).transpose().array() + lb;
    tg = tr.tg.row(t).transpose().array();
    half_g = 0.5 * gbar;
    nf = 0.5 * fbar;
    ng = 0.5 * gbar;
    for (Eigen::Index i = 0; i < m; ++i) {
      const ConstRow ci(c.row(i).data(), k);
      const double tfi = tr.tf(t, i);
      const double fi = tr.f_prev(t, i) + la;
      wf = ((gs - ci + tfi) * inv).exp();
      wg = ((fi - ci + tg) * inv).exp();
      const double af = 0.5 * fbar(i);
      auto row = cbar.row(i).array().transpose();
      row += af * wf + half_g * wg;
      ng -= af * wf;
      nf(i) -= (half_g * wg).sum();
    }
    fbar.swap(nf);
    gbar.swap(ng);
  }
  return cbar;
}

Matrix self_backward(const Matrix& c, const SelfTrace& tr, const SinkhornConfig& cfg) {
  const Eigen::Index m = c.rows();
  const double inv = 1.0 / cfg.eps;
  const double la = cfg.eps * -std::log(static_cast<double>(m));
  Matrix cbar = Matrix::Zero(m, m);
  Array fbar = Array::Constant(m, 2.0 / static_cast<double>(m));
  Array nf(m), w(m), fs(m);
  for (int t = cfg.iters - 1; t >= 0; --t) {
    fs = tr.f_prev.row(t).transpose().array() + la;
    nf = 0.5 * fbar;
    for (Eigen::Index i = 0; i < m; ++i) {
      const ConstRow ci(c.row(i).data(), m);
      w = ((fs - ci + tr.tf(t, i)) * inv).exp();
      const double af = 0.5 * fbar(i);
      auto row = cbar.row(i).array().transpose();
      row += af * w;
      nf -= af * w;
    }
    fbar.swap(nf);
  }
  return cbar;
}

// x̄ for C_ij = ‖x_i − y_j‖²: 2·diag(C̄1)·X − 2·C̄·Y.
Matrix cost_grad_x(const Matrix& cbar, const Matrix& x, const Matrix& y) {
  Matrix g = 2.0 * (cbar.rowwise().sum().asDiagonal() * x);
  g.noalias() -= 2.0 * cbar * y;
  return g;
}

void check_clouds(const Matrix& p, const Matrix& q) {
  if (p.rows() < 1 || q.rows() < 1) throw std::invalid_argument("sinkhorn: empty point cloud");
  if (p.cols() != q.cols()) {
    throw std::invalid_argument("sinkhorn: dimension mismatch " + shape_str(p) + " vs " + shape_str(q));
  }
}

}  // namespace

double entropic_ot(const Matrix& x, const Matrix& y, const SinkhornConfig& cfg) {
  cfg.validate();
  check_clouds(x, y);
  DenormalGuard guard;
  const Matrix c = squared_distances(x, y);
  const Matrix ct = c.transpose();
  return pair_forward(c, ct, cfg, nullptr);
}

double sinkhorn_divergence(const Matrix& p, const Matrix& q, const SinkhornConfig& cfg) {
  cfg.validate();
  check_clouds(p, q);
  DenormalGuard guard;
  const Matrix c = squared_distances(p, q);
  const Matrix ct = c.transpose();
  const double pq = pair_forward(c, ct, cfg, nullptr);
  if (!cfg.debiased) return pq;
  const double pp = self_forward(self_cost(p), cfg, nullptr);
  const double qq = self_forward(self_cost(q), cfg, nullptr);
  return pq - 0.5 * pp - 0.5 * qq;
}

Var sinkhorn_divergence(Var p, const Matrix& q, const SinkhornConfig& cfg) {
  cfg.validate();
  const Matrix& pv = p.value();
  check_clouds(pv, q);
  DenormalGuard guard;

  auto c = std::make_shared<Matrix>(squared_distances(pv, q));
  auto pair = std::make_shared<PairTrace>();
  const Matrix ct = c->transpose();
  double value = pair_forward(*c, ct, cfg, pair.get());

  std::shared_ptr<Matrix> cs;
  std::shared_ptr<SelfTrace> self;
  if (cfg.debiased) {
    cs = std::make_shared<Matrix>(self_cost(pv));
    self = std::make_shared<SelfTrace>();
    const double pp = self_forward(*cs, cfg, self.get());
    const double qq = self_forward(self_cost(q), cfg, nullptr);
    value -= 0.5 * pp + 0.5 * qq;
  }

  auto qk = std::make_shared<const Matrix>(q);
  const int ip = p.id();
  Matrix out(1, 1);
  out(0, 0) = value;
  return p.tape()->push(std::move(out), {ip},
                        [ip, c, pair, cs, self, qk, cfg](Tape& t, const Tape::Node& n) {
                          DenormalGuard g;
                          const double up = n.grad(0, 0);
                          const Matrix& x = t.value(ip);
                          Matrix grad = cost_grad_x(pair_backward(*c, *pair, cfg), x, *qk);
                          if (self) {
                            Matrix sb = self_backward(*cs, *self, cfg);
                            Matrix sym = sb + sb.transpose();
                            grad -= 0.5 * cost_grad_x(sym, x, x);
                          }
                          t.accumulate(ip, up * grad);
                        });
}

}  // namespace m2v
