#pragma once

#include "m2v/graphio.hpp"
#include "m2v/impute.hpp"
#include "m2v/latent.hpp"
#include "m2v/pseudo.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace m2v {

struct TrainConfig {
  double alpha = 0.01;
  double lambda = 0.001;
  double eta = 0.1;
  double tau_a = 0.5;
  /// Used as-is when lr_probe is off; otherwise replaced by the probe winner.
  double lr = 1e-3;
  bool lr_probe = true;
  int probe_epochs = 10;
  int epochs_pre = 100;
  int epochs_fine = 100;
  Eigen::Index d_z = 256;
  Eigen::Index hidden = 256;
  double r = 8.0;
  double r_a = 9.6;
  double r_b = 16.0;
  double sinkhorn_eps = 0.1;
  int sinkhorn_iters = 1000;
  /// Real nodes (and prior atoms) per Sinkhorn evaluation; 0 uses every node.
  std::size_t sinkhorn_batch = 256;
  double diffusion_beta = 0.85;
  int diffusion_iters = 50;
  double diffusion_tol = 1e-6;
  DiffusionNorm diffusion_norm = DiffusionNorm::RowStochastic;
  int top_k = -1;  // negative keeps the dense diffusion matrix
  GcnNorm gcn_norm = GcnNorm::Symmetric;
  bool no_feat_loss = false;
  bool no_recon_loss = false;
  bool no_feature_pathway = false;
  bool no_structure_pathway = false;
  bool no_pseudo = false;
  /// Column-mean fill in place of the learned imputer.
  bool mean_fill = false;
  std::uint64_t master_seed = 0;

  void validate() const;
  PriorSpec prior() const;
  SinkhornConfig sinkhorn() const;
  DiffusionConfig diffusion() const;

  /// Sets one field from its textual form; r also moves r_a and r_b to 1.2r and 2r.
  void set(const std::string& key, const std::string& value);
  static TrainConfig from_key_values(const KeyValues& kv);
  KeyValues to_key_values() const;
  std::uint64_t hash() const;

  /// Applies a variant name such as "noPseudo" or "noPseudo+noStructurePathway".
  void apply_variant(const std::string& variant);
};

TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochRecord {
  int stage = 0;  // 0 pretrain, 1 finetune
  int epoch = 0;
  double total = 0.0;
  double dist = 0.0;
  double dist_shell = 0.0;
  double feat = 0.0;
  double recon = 0.0;
};

struct ModelBundle {
  ParamStore params;
  AdamState adam;
  TrainConfig config;
  std::vector<EpochRecord> history;
  int pre_done = 0;
  int fine_done = 0;
  std::optional<PseudoAnomalyBatch> pseudo;

  std::size_t input_dim() const;
};

/// Fresh parameters for `inc`; with lr_probe the learning rate is picked from
/// {1e-4, 5e-4, 1e-3} by the lowest pretrain loss after probe_epochs.
ModelBundle init_bundle(const IncompleteGraph& inc, const TrainConfig& cfg);

/// L_pretrain for `epoch` recorded on `tape`; nothing is updated.
Var pretrain_objective(Tape& tape, ParamStore& params, const IncompleteGraph& inc,
                       const TrainConfig& cfg, int epoch);

/// Continues pretraining up to epochs_pre; `max_epochs` bounds this call.
void pretrain(ModelBundle& bundle, const IncompleteGraph& inc, int max_epochs = -1);
/// Continues fine-tuning up to epochs_fine; pretraining must be complete.
void finetune(ModelBundle& bundle, const IncompleteGraph& inc, int max_epochs = -1);

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_checkpoint(const std::filesystem::path& path);

/// Column means over observed entries; an all-unobserved column becomes 0.
Matrix mean_fill_baseline(const Matrix& observed, const Matrix& mask);

struct ScoreReport {
  Vector scores;                     // real nodes only
  std::vector<std::size_t> ranking;  // descending score, ties to the lower id
  std::optional<double> auroc;
  std::uint64_t config_hash = 0;
  double seconds = 0.0;
};

/// s_i = ‖z_i‖ on the surrogate graph rebuilt from `inc` with trained parameters.
ScoreReport score_nodes(const ModelBundle& bundle, const IncompleteGraph& inc);
Matrix embed_nodes(const ModelBundle& bundle, const IncompleteGraph& inc);

std::vector<std::size_t> rank_descending(const Vector& scores);

/// Midrank AUROC; throws UsageError when only one class is present.
double auroc(const Vector& scores, const std::vector<int>& labels);

void write_scores(const std::filesystem::path& path, const ScoreReport& report);
Vector read_scores(const std::filesystem::path& path, std::size_t n);

// ---- Experiments --------------------------------------------------------------

struct ExperimentSpec {
  std::filesystem::path manifest;
  std::optional<InjectionSpec> injection;  // used when the dataset has no labels
  double node_rate = 0.3;
  double edge_rate = 0.3;
  MaskMode mask_mode = MaskMode::RowWise;
  int repeats = 5;
  std::uint64_t seed = 0;
  std::string variant = "full";
  TrainConfig config;
  /// Per-run score files land here when set.
  std::optional<std::filesystem::path> out_dir;
};

struct RunResult {
  std::uint64_t seed = 0;
  double auroc = 0.0;
  double seconds = 0.0;
  std::string error;  // empty on success
};

struct CellResult {
  std::string dataset;
  double node_rate = 0.0;
  double edge_rate = 0.0;
  std::string variant;
  std::string setting;  // "key=value" for sweep cells
  std::vector<RunResult> runs;

  std::size_t successes() const;
  double mean() const;
  double stddev() const;  // sample standard deviation
  double mean_seconds() const;
};

/// One training run end to end: load, inject if unlabeled, mask, train, score.
RunResult run_once(const ExperimentSpec& spec, std::uint64_t seed);
CellResult run_experiment(const ExperimentSpec& spec);

/// Runs one cell per value of `key` (a TrainConfig field, "mask_rate", "node_rate",
/// "edge_rate" or "variant").
std::vector<CellResult> run_sweep(const ExperimentSpec& base, const std::string& key,
                                  const std::vector<std::string>& values);

void write_report(const std::filesystem::path& table, const std::filesystem::path& metrics,
                  const std::vector<CellResult>& cells);

}  // namespace m2v
