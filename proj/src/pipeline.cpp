#include "m2v/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace m2v {

namespace {

// Seed streams derived from the master seed.
constexpr std::uint64_t kStreamInit = 0x1017;
constexpr std::uint64_t kStreamPreBatch = 0x9a01;
constexpr std::uint64_t kStreamPrePrior = 0x9a02;
constexpr std::uint64_t kStreamFineBatch = 0xf101;
constexpr std::uint64_t kStreamFinePrior = 0xf102;
constexpr std::uint64_t kStreamFineShellBatch = 0xf103;
constexpr std::uint64_t kStreamFineShell = 0xf104;
constexpr std::uint64_t kStreamPseudo = 0x95e0;
constexpr std::uint64_t kStreamInject = 0x1a1e;
constexpr std::uint64_t kStreamMask = 0x3a5c;

constexpr double kProbeRates[] = {1e-4, 5e-4, 1e-3};

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw UsageError("config key '" + key + "': invalid value '" + value + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v);
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v);
}

}  // namespace

// ---- TrainConfig --------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !(lambda >= 0.0)) throw UsageError("alpha and lambda must be >= 0");
  if (!(eta >= 0.0 && eta <= 1.0)) throw UsageError("eta must lie in [0, 1]");
  if (!(tau_a > 0.0 && tau_a < 1.0)) throw UsageError("tau_a must lie in (0, 1)");
  if (!(lr > 0.0)) throw UsageError("lr must be positive");
  if (epochs_pre < 1 || epochs_fine < 1) throw UsageError("epochs must be >= 1");
  if (probe_epochs < 1) throw UsageError("probe_epochs must be >= 1");
  if (hidden < 1) throw UsageError("hidden must be >= 1");
  prior().validate();
  sinkhorn().validate();
  diffusion().validate();
}

PriorSpec TrainConfig::prior() const {
  PriorSpec p;
  p.d_z = d_z;
  p.r = r;
  p.r_a = r_a;
  p.r_b = r_b;
  p.sample_count = sinkhorn_batch;
  return p;
}

SinkhornConfig TrainConfig::sinkhorn() const {
  SinkhornConfig s;
  s.eps = sinkhorn_eps;
  s.iters = sinkhorn_iters;
  return s;
}

DiffusionConfig TrainConfig::diffusion() const {
  DiffusionConfig d;
  d.beta = diffusion_beta;
  d.max_iters = diffusion_iters;
  d.tol = diffusion_tol;
  d.normalization = diffusion_norm;
  return d;
}

void TrainConfig::set(const std::string& key, const std::string& v) {
  if (key == "alpha") alpha = parse_double(key, v);
  else if (key == "lambda") lambda = parse_double(key, v);
  else if (key == "eta") eta = parse_double(key, v);
  else if (key == "tau_a") tau_a = parse_double(key, v);
  else if (key == "lr") lr = parse_double(key, v);
  else if (key == "lr_probe") lr_probe = parse_bool(key, v);
  else if (key == "probe_epochs") probe_epochs = parse_int<int>(key, v);
  else if (key == "epochs_pre") epochs_pre = parse_int<int>(key, v);
  else if (key == "epochs_fine") epochs_fine = parse_int<int>(key, v);
  else if (key == "d_z") d_z = parse_int<Eigen::Index>(key, v);
  else if (key == "hidden") hidden = parse_int<Eigen::Index>(key, v);
  else if (key == "r") {
    r = parse_double(key, v);
    r_a = 1.2 * r;
    r_b = 2.0 * r;
  } else if (key == "r_a") r_a = parse_double(key, v);
  else if (key == "r_b") r_b = parse_double(key, v);
  else if (key == "sinkhorn_eps") sinkhorn_eps = parse_double(key, v);
  else if (key == "sinkhorn_iters") sinkhorn_iters = parse_int<int>(key, v);
  else if (key == "sinkhorn_batch") sinkhorn_batch = parse_int<std::size_t>(key, v);
  else if (key == "diffusion_beta") diffusion_beta = parse_double(key, v);
  else if (key == "diffusion_iters") diffusion_iters = parse_int<int>(key, v);
  else if (key == "diffusion_tol") diffusion_tol = parse_double(key, v);
  else if (key == "diffusion_norm") diffusion_norm = parse_diffusion_norm(v);
  else if (key == "top_k") top_k = parse_int<int>(key, v);
  else if (key == "gcn_norm") gcn_norm = parse_gcn_norm(v);
  else if (key == "no_feat_loss") no_feat_loss = parse_bool(key, v);
  else if (key == "no_recon_loss") no_recon_loss = parse_bool(key, v);
  else if (key == "no_feature_pathway") no_feature_pathway = parse_bool(key, v);
  else if (key == "no_structure_pathway") no_structure_pathway = parse_bool(key, v);
  else if (key == "no_pseudo") no_pseudo = parse_bool(key, v);
  else if (key == "mean_fill") mean_fill = parse_bool(key, v);
  else if (key == "master_seed") master_seed = parse_int<std::uint64_t>(key, v);
  else throw UsageError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  // r first so explicit shell radii are not overwritten by the derived ones.
  if (auto it = kv.find("r"); it != kv.end()) c.set("r", it->second);
  for (const auto& [k, v] : kv) {
    if (k != "r") c.set(k, v);
  }
  return c;
}

KeyValues TrainConfig::to_key_values() const {
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  KeyValues kv;
  kv["alpha"] = format_double(alpha);
  kv["lambda"] = format_double(lambda);
  kv["eta"] = format_double(eta);
  kv["tau_a"] = format_double(tau_a);
  kv["lr"] = format_double(lr);
  kv["lr_probe"] = b(lr_probe);
  kv["probe_epochs"] = std::to_string(probe_epochs);
  kv["epochs_pre"] = std::to_string(epochs_pre);
  kv["epochs_fine"] = std::to_string(epochs_fine);
  kv["d_z"] = std::to_string(d_z);
  kv["hidden"] = std::to_string(hidden);
  kv["r"] = format_double(r);
  kv["r_a"] = format_double(r_a);
  kv["r_b"] = format_double(r_b);
  kv["sinkhorn_eps"] = format_double(sinkhorn_eps);
  kv["sinkhorn_iters"] = std::to_string(sinkhorn_iters);
  kv["sinkhorn_batch"] = std::to_string(sinkhorn_batch);
  kv["diffusion_beta"] = format_double(diffusion_beta);
  kv["diffusion_iters"] = std::to_string(diffusion_iters);
  kv["diffusion_tol"] = format_double(diffusion_tol);
  kv["diffusion_norm"] = to_string(diffusion_norm);
  kv["top_k"] = std::to_string(top_k);
  kv["gcn_norm"] = to_string(gcn_norm);
  kv["no_feat_loss"] = b(no_feat_loss);
  kv["no_recon_loss"] = b(no_recon_loss);
  kv["no_feature_pathway"] = b(no_feature_pathway);
  kv["no_structure_pathway"] = b(no_structure_pathway);
  kv["no_pseudo"] = b(no_pseudo);
  kv["mean_fill"] = b(mean_fill);
  kv["master_seed"] = std::to_string(master_seed);
  return kv;
}

std::uint64_t TrainConfig::hash() const {
  const std::string s = render_key_values(to_key_values());
  return fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

void TrainConfig::apply_variant(const std::string& variant) {
  std::stringstream ss(variant);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "full" || part.empty()) continue;
    if (part == "noFeatLoss") no_feat_loss = true;
    else if (part == "noReconLoss") no_recon_loss = true;
    else if (part == "noFeaturePathway") no_feature_pathway = true;
    else if (part == "noStructurePathway") no_structure_pathway = true;
    else if (part == "noPseudo") no_pseudo = true;
    else if (part == "meanFill") mean_fill = true;
    else throw UsageError("unknown variant '" + part + "'");
  }
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  return TrainConfig::from_key_values(read_key_values(path));
}

std::size_t ModelBundle::input_dim() const {
  return static_cast<std::size_t>(params.value(std::string(kImputerPrefix) + ".w1").rows());
}

// ---- Training -------------------------------------------------------------------

namespace {

// Everything an epoch needs that does not change between epochs of a stage.
struct StageInputs {
  Matrix features;  // zero-filled observations (real rows first)
  Matrix mask;
  std::optional<Matrix> fixed_features;  // replaces the imputer when set
  std::shared_ptr<const Matrix> adjacency;
  std::size_t real = 0;
  std::size_t pseudo = 0;
};

StageInputs prepare_stage(const TrainConfig& cfg, Matrix features, Matrix mask,
                          const std::vector<Edge>& edges, std::size_t real, std::size_t pseudo) {
  StageInputs in;
  in.real = real;
  in.pseudo = pseudo;
  const std::size_t n = real + pseudo;
  std::optional<int> top_k;
  if (cfg.top_k >= 0) top_k = cfg.top_k;
  SurrogateStructure s =
      build_structure(edges, n, cfg.diffusion(), top_k, !cfg.no_structure_pathway);
  in.adjacency = std::make_shared<const Matrix>(normalize_adjacency(s.adjacency, cfg.gcn_norm));
  if (cfg.mean_fill) {
    Matrix fill = features;
    const auto r = static_cast<Eigen::Index>(real);
    fill.topRows(r) = mean_fill_baseline(features.topRows(r), mask.topRows(r));
    in.fixed_features = std::move(fill);
  } else if (cfg.no_feature_pathway) {
    in.fixed_features = features;
  }
  in.features = std::move(features);
  in.mask = std::move(mask);
  return in;
}

StageInputs prepare_real(const TrainConfig& cfg, const IncompleteGraph& inc) {
  return prepare_stage(cfg, inc.observed_features, inc.masks.feature_mask, inc.observed_edges,
                       inc.num_nodes(), 0);
}

std::vector<Eigen::Index> batch_rows(std::size_t n, std::size_t batch, std::uint64_t seed) {
  std::vector<Eigen::Index> rows;
  if (batch == 0 || batch >= n) {
    rows.resize(n);
    std::iota(rows.begin(), rows.end(), Eigen::Index{0});
    return rows;
  }
  Rng rng(seed);
  for (std::size_t i : rng.sample_without_replacement(n, batch)) {
    rows.push_back(static_cast<Eigen::Index>(i));
  }
  return rows;
}

// Loss of one epoch on `tape`; `rec` receives the individual terms.
Var build_loss(Tape& tape, ParamStore& params, const TrainConfig& cfg, const StageInputs& in,
               int stage, int epoch, EpochRecord& rec) {
  const PriorSpec spec = cfg.prior();
  const SinkhornConfig sk = cfg.sinkhorn();
  const auto e = static_cast<std::uint64_t>(epoch);
  const std::uint64_t seed = cfg.master_seed;

  const bool learned = !in.fixed_features.has_value();
  Var xhat = learned ? impute_features(tape, params, tape.constant(in.features))
                     : tape.constant(*in.fixed_features);
  Var z = project(tape, params, xhat, in.adjacency);

  rec = EpochRecord{};
  rec.stage = stage;
  rec.epoch = epoch;

  const auto real = static_cast<Eigen::Index>(in.real);
  Var real_z = in.pseudo > 0 ? ops::row_range(z, 0, real) : z;
  const auto rows = batch_rows(in.real, cfg.sinkhorn_batch,
                               derive_seed(seed, stage == 0 ? kStreamPreBatch : kStreamFineBatch, e));
  const Matrix ball = sample_ball_prior(
      rows.size(), spec, derive_seed(seed, stage == 0 ? kStreamPrePrior : kStreamFinePrior, e));
  Var zb = rows.size() == in.real ? real_z : ops::slice_rows(real_z, rows);
  Var loss = sinkhorn_divergence(zb, ball, sk);
  rec.dist = loss.scalar();

  if (in.pseudo > 0) {
    Var pz = ops::row_range(z, real, static_cast<Eigen::Index>(in.pseudo));
    const auto prow = batch_rows(in.pseudo, cfg.sinkhorn_batch, derive_seed(seed, kStreamFineShellBatch, e));
    const Matrix shell = sample_shell_gaussian(prow.size(), spec, derive_seed(seed, kStreamFineShell, e));
    Var ds = sinkhorn_divergence(prow.size() == in.pseudo ? pz : ops::slice_rows(pz, prow), shell, sk);
    rec.dist_shell = ds.scalar();
    loss = ops::add(loss, ds);
  }
  if (learned && !cfg.no_feat_loss && cfg.alpha > 0.0) {
    Var lf = feature_loss(xhat, in.features, in.mask);
    rec.feat = lf.scalar();
    loss = ops::add(loss, ops::scale(lf, cfg.alpha));
  }
  if (!cfg.no_recon_loss && cfg.lambda > 0.0) {
    Var lr = recon_loss(decode(tape, params, z), in.features, in.mask);
    rec.recon = lr.scalar();
    loss = ops::add(loss, ops::scale(lr, cfg.lambda));
  }
  rec.total = loss.scalar();
  return loss;
}

EpochRecord train_epoch(ModelBundle& b, const StageInputs& in, int stage, int epoch) {
  Tape tape;
  EpochRecord rec;
  Var loss = build_loss(tape, b.params, b.config, in, stage, epoch, rec);
  if (!std::isfinite(rec.total)) {
    throw NumericalError(std::string(stage == 0 ? "pretrain" : "finetune") +
                         ": non-finite loss at epoch " + std::to_string(epoch));
  }
  tape.backward(loss);
  adam_step(b.params, b.adam);
  return rec;
}

AdamState fresh_adam(double lr) {
  AdamState a;
  a.lr = lr;
  return a;
}

}  // namespace

ModelBundle init_bundle(const IncompleteGraph& inc, const TrainConfig& cfg) {
  cfg.validate();
  ModelBundle b;
  b.config = cfg;
  const auto d = static_cast<Eigen::Index>(inc.dim());
  Rng rng(derive_seed(cfg.master_seed, kStreamInit));
  init_mlp(b.params, kImputerPrefix, d, cfg.hidden, d, rng);
  init_projector(b.params, d, cfg.d_z, rng);
  init_mlp(b.params, kDecoderPrefix, cfg.d_z, cfg.hidden, d, rng);
  b.adam = fresh_adam(cfg.lr);

  if (cfg.lr_probe) {
    const StageInputs in = prepare_real(cfg, inc);
    double best_loss = std::numeric_limits<double>::infinity();
    double best_lr = kProbeRates[0];
    for (double lr : kProbeRates) {
      ModelBundle trial;
      trial.params = b.params;
      trial.config = cfg;
      trial.adam = fresh_adam(lr);
      double last = std::numeric_limits<double>::infinity();
      try {
        for (int e = 0; e < cfg.probe_epochs; ++e) last = train_epoch(trial, in, 0, e).total;
      } catch (const NumericalError& err) {
        std::cerr << "warning: lr probe " << lr << " diverged: " << err.what() << "\n";
        continue;
      }
      if (last < best_loss) {
        best_loss = last;
        best_lr = lr;
      }
    }
    b.config.lr = best_lr;
    b.adam = fresh_adam(best_lr);
  }
  return b;
}

Var pretrain_objective(Tape& tape, ParamStore& params, const IncompleteGraph& inc,
                       const TrainConfig& cfg, int epoch) {
  const StageInputs in = prepare_real(cfg, inc);
  EpochRecord rec;
  return build_loss(tape, params, cfg, in, 0, epoch, rec);
}

void pretrain(ModelBundle& b, const IncompleteGraph& inc, int max_epochs) {
  if (inc.dim() != b.input_dim()) {
    throw DataError("graph has d=" + std::to_string(inc.dim()) + " but the model expects d=" +
                    std::to_string(b.input_dim()));
  }
  if (b.pre_done >= b.config.epochs_pre) return;
  const StageInputs in = prepare_real(b.config, inc);
  int ran = 0;
  while (b.pre_done < b.config.epochs_pre && (max_epochs < 0 || ran < max_epochs)) {
    b.history.push_back(train_epoch(b, in, 0, b.pre_done));
    ++b.pre_done;
    ++ran;
  }
}

void finetune(ModelBundle& b, const IncompleteGraph& inc, int max_epochs) {
  if (inc.dim() != b.input_dim()) {
    throw DataError("graph has d=" + std::to_string(inc.dim()) + " but the model expects d=" +
                    std::to_string(b.input_dim()));
  }
  if (b.pre_done < b.config.epochs_pre) {
    throw UsageError("finetune requires a completed pretrain stage (" + std::to_string(b.pre_done) +
                     "/" + std::to_string(b.config.epochs_pre) + " epochs)");
  }
  if (b.fine_done >= b.config.epochs_fine) return;
  const TrainConfig& cfg = b.config;
  if (!b.pseudo) {
    const double eta = cfg.no_pseudo ? 0.0 : cfg.eta;
    b.pseudo = generate_pseudo_anomalies(b.params, inc.num_nodes(), cfg.prior(), eta, cfg.tau_a,
                                         derive_seed(cfg.master_seed, kStreamPseudo));
  }
  const AugmentedGraph aug = augment(inc, *b.pseudo);
  const StageInputs in =
      prepare_stage(cfg, aug.features, aug.feature_mask, aug.edges, aug.real_count, aug.pseudo_count);
  int ran = 0;
  while (b.fine_done < cfg.epochs_fine && (max_epochs < 0 || ran < max_epochs)) {
    b.history.push_back(train_epoch(b, in, 1, b.fine_done));
    ++b.fine_done;
    ++ran;
  }
}

// ---- Checkpoints ----------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& b) {
  Archive ar;
  ar.texts.emplace_back("format", "m2v-checkpoint-1");
  ar.texts.emplace_back("config", render_key_values(b.config.to_key_values()));
  for (const auto& name : b.params.names()) ar.tensors.emplace_back("param/" + name, b.params.value(name));
  for (const auto& name : b.params.names()) {
    if (auto it = b.adam.m.find(name); it != b.adam.m.end()) ar.tensors.emplace_back("adam.m/" + name, it->second);
    if (auto it = b.adam.v.find(name); it != b.adam.v.end()) ar.tensors.emplace_back("adam.v/" + name, it->second);
  }
  Matrix state(1, 8);
  state << static_cast<double>(b.adam.step), b.adam.lr, b.adam.beta1, b.adam.beta2, b.adam.eps,
      static_cast<double>(b.pre_done), static_cast<double>(b.fine_done), b.pseudo ? 1.0 : 0.0;
  ar.tensors.emplace_back("state", state);
  Matrix hist(static_cast<Eigen::Index>(b.history.size()), 7);
  for (std::size_t i = 0; i < b.history.size(); ++i) {
    const EpochRecord& r = b.history[i];
    hist.row(static_cast<Eigen::Index>(i)) << r.stage, r.epoch, r.total, r.dist, r.dist_shell, r.feat, r.recon;
  }
  ar.tensors.emplace_back("history", hist);
  if (b.pseudo) {
    const PseudoAnomalyBatch& p = *b.pseudo;
    ar.tensors.emplace_back("pseudo/codes", p.codes);
    ar.tensors.emplace_back("pseudo/features", p.features);
    Matrix edges(static_cast<Eigen::Index>(p.edges.size()), 2);
    for (std::size_t i = 0; i < p.edges.size(); ++i) {
      edges(static_cast<Eigen::Index>(i), 0) = static_cast<double>(p.edges[i].u);
      edges(static_cast<Eigen::Index>(i), 1) = static_cast<double>(p.edges[i].v);
    }
    ar.tensors.emplace_back("pseudo/edges", edges);
    Matrix meta(1, 2);
    meta << p.tau, p.eta;
    ar.tensors.emplace_back("pseudo/meta", meta);
  }
  write_archive(path, ar);
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  const Archive ar = read_archive(path);
  auto fail = [&](const std::string& what) -> DataError {
    return DataError(path.string() + ": " + what);
  };
  const std::string* format = ar.find_text("format");
  if (!format || *format != "m2v-checkpoint-1") throw fail("not a checkpoint (missing format tag)");
  const std::string* config = ar.find_text("config");
  if (!config) throw fail("missing config entry");

  ModelBundle b;
  std::istringstream cs(*config);
  b.config = TrainConfig::from_key_values(parse_key_values(cs, path.string() + "#config"));
  for (const auto& [name, m] : ar.tensors) {
    if (name.rfind("param/", 0) == 0) b.params.add(name.substr(6), m);
  }
  for (const char* required : {"imputer.w1", "projector.w1", "projector.w2", "decoder.w1"}) {
    bool found = false;
    for (const auto& n : b.params.names()) found = found || n == required;
    if (!found) throw fail(std::string("missing parameter ") + required);
  }
  for (const auto& [name, m] : ar.tensors) {
    if (name.rfind("adam.m/", 0) == 0) b.adam.m[name.substr(7)] = m;
    if (name.rfind("adam.v/", 0) == 0) b.adam.v[name.substr(7)] = m;
  }
  const Matrix* state = ar.find_tensor("state");
  if (!state || state->rows() != 1 || state->cols() != 8) throw fail("missing or malformed state");
  b.adam.step = static_cast<std::uint64_t>((*state)(0, 0));
  b.adam.lr = (*state)(0, 1);
  b.adam.beta1 = (*state)(0, 2);
  b.adam.beta2 = (*state)(0, 3);
  b.adam.eps = (*state)(0, 4);
  b.pre_done = static_cast<int>((*state)(0, 5));
  b.fine_done = static_cast<int>((*state)(0, 6));
  const bool has_pseudo = (*state)(0, 7) != 0.0;

  const Matrix* hist = ar.find_tensor("history");
  if (!hist || (hist->rows() > 0 && hist->cols() != 7)) throw fail("missing or malformed history");
  for (Eigen::Index i = 0; i < hist->rows(); ++i) {
    EpochRecord r;
    r.stage = static_cast<int>((*hist)(i, 0));
    r.epoch = static_cast<int>((*hist)(i, 1));
    r.total = (*hist)(i, 2);
    r.dist = (*hist)(i, 3);
    r.dist_shell = (*hist)(i, 4);
    r.feat = (*hist)(i, 5);
    r.recon = (*hist)(i, 6);
    b.history.push_back(r);
  }
  if (has_pseudo) {
    const Matrix* codes = ar.find_tensor("pseudo/codes");
    const Matrix* feats = ar.find_tensor("pseudo/features");
    const Matrix* edges = ar.find_tensor("pseudo/edges");
    const Matrix* meta = ar.find_tensor("pseudo/meta");
    if (!codes || !feats || !edges || !meta) throw fail("incomplete pseudo-anomaly block");
    PseudoAnomalyBatch p;
    p.codes = *codes;
    p.features = *feats;
    for (Eigen::Index i = 0; i < edges->rows(); ++i) {
      p.edges.push_back(Edge{static_cast<std::size_t>((*edges)(i, 0)), static_cast<std::size_t>((*edges)(i, 1))});
    }
    p.tau = (*meta)(0, 0);
    p.eta = (*meta)(0, 1);
    b.pseudo = std::move(p);
  }
  return b;
}

// ---- Scoring ----------------------------------------------------------------------

Matrix mean_fill_baseline(const Matrix& observed, const Matrix& mask) {
  if (observed.rows() != mask.rows() || observed.cols() != mask.cols()) {
    throw std::invalid_argument("mean_fill_baseline: " + shape_str(observed) + " vs " + shape_str(mask));
  }
  Matrix out = observed;
  for (Eigen::Index j = 0; j < observed.cols(); ++j) {
    double sum = 0.0;
    double count = 0.0;
    for (Eigen::Index i = 0; i < observed.rows(); ++i) {
      if (mask(i, j) != 0.0) {
        sum += observed(i, j);
        count += 1.0;
      }
    }
    const double mean = count > 0.0 ? sum / count : 0.0;
    for (Eigen::Index i = 0; i < observed.rows(); ++i) {
      if (mask(i, j) == 0.0) out(i, j) = mean;
    }
  }
  return out;
}

Matrix embed_nodes(const ModelBundle& b, const IncompleteGraph& inc) {
  if (inc.dim() != b.input_dim()) {
    throw DataError("graph has d=" + std::to_string(inc.dim()) + " but the model expects d=" +
                    std::to_string(b.input_dim()));
  }
  const StageInputs in = prepare_real(b.config, inc);
  const Matrix xhat = in.fixed_features ? *in.fixed_features : impute_features(b.params, in.features);
  return project(b.params, xhat, *in.adjacency);
}

std::vector<std::size_t> rank_descending(const Vector& scores) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
  });
  return order;
}

ScoreReport score_nodes(const ModelBundle& b, const IncompleteGraph& inc) {
  const auto t0 = std::chrono::steady_clock::now();
  ScoreReport rep;
  rep.scores = embed_nodes(b, inc).rowwise().norm();
  rep.ranking = rank_descending(rep.scores);
  rep.config_hash = b.config.hash();
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

double auroc(const Vector& scores, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(scores.size()) != labels.size()) {
    throw std::invalid_argument("auroc: " + std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) < scores(static_cast<Eigen::Index>(b));
  });
  double pos = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores(static_cast<Eigen::Index>(order[j])) == scores(static_cast<Eigen::Index>(order[i]))) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      const int label = labels[order[k]];
      if (label != 0 && label != 1) throw DataError("auroc: labels must be 0 or 1");
      if (label == 1) {
        pos += 1.0;
        rank_sum += midrank;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw UsageError("AUROC undefined: labels contain a single class");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

void write_scores(const std::filesystem::path& path, const ScoreReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i : report.ranking) out << i << '\t' << format_double(report.scores(static_cast<Eigen::Index>(i))) << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

Vector read_scores(const std::filesystem::path& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Vector s = Vector::Constant(static_cast<Eigen::Index>(n), std::numeric_limits<double>::quiet_NaN());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t id = 0;
    double v = 0.0;
    if (!(ls >> id >> v) || id >= n) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected node_id<TAB>score with id < " +
                      std::to_string(n));
    }
    s(static_cast<Eigen::Index>(id)) = v;
  }
  if (!s.allFinite()) throw DataError(path.string() + ": missing or non-finite scores");
  return s;
}

// ---- Experiments ------------------------------------------------------------------

std::size_t CellResult::successes() const {
  return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const RunResult& r) { return r.error.empty(); }));
}

double CellResult::mean() const {
  double sum = 0.0;
  std::size_t k = 0;
  for (const auto& r : runs) {
    if (r.error.empty()) {
      sum += r.auroc;
      ++k;
    }
  }
  return k ? sum / static_cast<double>(k) : std::numeric_limits<double>::quiet_NaN();
}

double CellResult::stddev() const {
  const double mu = mean();
  double ss = 0.0;
  std::size_t k = 0;
  for (const auto& r : runs) {
    if (r.error.empty()) {
      ss += (r.auroc - mu) * (r.auroc - mu);
      ++k;
    }
  }
  return k > 1 ? std::sqrt(ss / static_cast<double>(k - 1)) : 0.0;
}

double CellResult::mean_seconds() const {
  double sum = 0.0;
  for (const auto& r : runs) sum += r.seconds;
  return runs.empty() ? 0.0 : sum / static_cast<double>(runs.size());
}

RunResult run_once(const ExperimentSpec& spec, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult res;
  res.seed = seed;
  const DatasetManifest manifest = DatasetManifest::load(spec.manifest);
  AttributedGraph g = load_graph(manifest).graph;
  if (!g.labels) {
    if (!spec.injection) throw DataError(manifest.name + ": dataset has no labels and no injection spec");
    g = inject_anomalies(g, *spec.injection, derive_seed(seed, kStreamInject)).graph;
  }
  const ObservationMask masks =
      make_masks(g, spec.node_rate, spec.edge_rate, spec.mask_mode, derive_seed(seed, kStreamMask));
  const IncompleteGraph inc = apply_masks(g, masks);

  TrainConfig cfg = spec.config;
  cfg.apply_variant(spec.variant);
  cfg.master_seed = seed;
  ModelBundle b = init_bundle(inc, cfg);
  pretrain(b, inc);
  finetune(b, inc);
  const ScoreReport rep = score_nodes(b, inc);
  res.auroc = auroc(rep.scores, *g.labels);
  if (spec.out_dir) {
    std::filesystem::create_directories(*spec.out_dir);
    std::ostringstream name;
    name << manifest.name << '_' << spec.variant << "_nr" << format_double(spec.node_rate) << "_er"
         << format_double(spec.edge_rate) << "_s" << seed << ".scores.tsv";
    write_scores(*spec.out_dir / name.str(), rep);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

CellResult run_experiment(const ExperimentSpec& spec) {
  CellResult cell;
  cell.dataset = DatasetManifest::load(spec.manifest).name;
  cell.node_rate = spec.node_rate;
  cell.edge_rate = spec.edge_rate;
  cell.variant = spec.variant;
  for (int r = 0; r < spec.repeats; ++r) {
    const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(r);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cell.runs.push_back(run_once(spec, seed));
    } catch (const std::exception& e) {
      RunResult failed;
      failed.seed = seed;
      failed.error = e.what();
      failed.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "warning: " << cell.dataset << " seed " << seed << " failed: " << e.what() << "\n";
      cell.runs.push_back(failed);
    }
  }
  return cell;
}

std::vector<CellResult> run_sweep(const ExperimentSpec& base, const std::string& key,
                                  const std::vector<std::string>& values) {
  std::vector<CellResult> cells;
  for (const std::string& v : values) {
    ExperimentSpec spec = base;
    if (key == "variant") {
      spec.variant = v;
    } else if (key == "mask_rate") {
      spec.node_rate = spec.edge_rate = parse_double(key, v);
    } else if (key == "node_rate") {
      spec.node_rate = parse_double(key, v);
    } else if (key == "edge_rate") {
      spec.edge_rate = parse_double(key, v);
    } else {
      spec.config.set(key, v);
    }
    CellResult cell = run_experiment(spec);
    cell.setting = key + "=" + v;
    cells.push_back(std::move(cell));
  }
  return cells;
}

void write_report(const std::filesystem::path& table, const std::filesystem::path& metrics,
                  const std::vector<CellResult>& cells) {
  std::ofstream out(table);
  if (!out) throw DataError("cannot write " + table.string());
  out << "dataset\tnode_rate\tedge_rate\tvariant\tsetting\tmean\tstd\trepeats\tfailures\truntime_s\n";
  KeyValues kv;
  for (const CellResult& c : cells) {
    const std::size_t ok = c.successes();
    out << c.dataset << '\t' << c.node_rate << '\t' << c.edge_rate << '\t' << c.variant << '\t'
        << (c.setting.empty() ? "-" : c.setting) << '\t' << c.mean() << '\t' << c.stddev() << '\t' << ok << '\t' << c.runs.size() - ok << '\t'
        << c.mean_seconds() << '\n';
    const std::string prefix = "cell." + c.dataset + "." + format_double(c.node_rate) + "." +
                               format_double(c.edge_rate) + "." + c.variant +
                               (c.setting.empty() ? "" : "." + c.setting) + ".";
    kv[prefix + "mean"] = format_double(c.mean());
    kv[prefix + "std"] = format_double(c.stddev());
    kv[prefix + "repeats"] = std::to_string(ok);
    kv[prefix + "failures"] = std::to_string(c.runs.size() - ok);
    kv[prefix + "runtime_s"] = format_double(c.mean_seconds());
    for (const RunResult& r : c.runs) {
      kv[prefix + "seed." + std::to_string(r.seed)] = r.error.empty() ? format_double(r.auroc) : "error: " + r.error;
    }
  }
  if (!out) throw DataError("write failed: " + table.string());
  write_key_values(metrics, kv);
}

}  // namespace m2v
