// m2v: command-line front end for the incomplete-graph anomaly detector.

#include "m2v/gradcheck.hpp"
#include "m2v/pipeline.hpp"
#include "m2v/synth.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace m2v;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  fs::path config;
  fs::path out;
  bool deterministic = true;
  std::string precision = "f64";
  std::vector<std::string> overrides;
};

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw UsageError(std::string("--out is required: ") + what);
  return g.out;
}

TrainConfig resolve_config(const Globals& g) {
  TrainConfig cfg = g.config.empty() ? TrainConfig{} : load_train_config(g.config);
  for (const std::string& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed_given) cfg.master_seed = g.seed;
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_history(const ModelBundle& b, std::size_t from) {
  for (std::size_t i = from; i < b.history.size(); ++i) {
    const EpochRecord& r = b.history[i];
    std::cout << (r.stage == 0 ? "pretrain" : "finetune") << " epoch " << r.epoch << "  total "
              << r.total << "  dist " << r.dist;
    if (r.stage == 1) std::cout << "  shell " << r.dist_shell;
    std::cout << "  feat " << r.feat << "  recon " << r.recon << "\n";
  }
}

struct ExperimentArgs {
  fs::path manifest;
  std::string variant = "full";
  double node_rate = 0.3;
  double edge_rate = 0.3;
  std::string mode = "row";
  int repeats = 5;
  std::size_t clique_size = 15;
  std::size_t pool = 50;
};

void add_experiment_options(CLI::App* cmd, ExperimentArgs& a) {
  cmd->add_option("--manifest", a.manifest, "Dataset manifest")->required();
  cmd->add_option("--variant", a.variant, "full, or ablations joined by '+'");
  cmd->add_option("--node-rate", a.node_rate, "Fraction of feature rows masked");
  cmd->add_option("--edge-rate", a.edge_rate, "Fraction of edges masked");
  cmd->add_option("--mode", a.mode, "Feature mask mode: row or element");
  cmd->add_option("--repeats", a.repeats, "Seeds per cell (seed, seed+1, ...)");
  cmd->add_option("--clique-size", a.clique_size, "Injected clique size for unlabelled datasets");
  cmd->add_option("--pool", a.pool, "Contextual candidate pool for unlabelled datasets");
}

ExperimentSpec make_spec(const ExperimentArgs& a, const Globals& g) {
  ExperimentSpec s;
  s.manifest = a.manifest;
  const DatasetManifest m = DatasetManifest::load(a.manifest);
  if (!m.labels) s.injection = InjectionSpec::for_outlier_count(m.outliers, a.clique_size, a.pool);
  s.node_rate = a.node_rate;
  s.edge_rate = a.edge_rate;
  s.mask_mode = parse_mask_mode(a.mode);
  s.repeats = a.repeats;
  s.seed = g.seed;
  s.variant = a.variant;
  s.config = resolve_config(g);
  return s;
}

void finish_report(const std::vector<CellResult>& cells, const fs::path& out) {
  write_report(out / "report.tsv", out / "metrics.txt", cells);
  for (const CellResult& c : cells) {
    std::cout << c.dataset << "  nr=" << c.node_rate << " er=" << c.edge_rate << "  " << c.variant
              << (c.setting.empty() ? "" : "  " + c.setting) << "  AUROC " << c.mean() << " ± "
              << c.stddev() << "  (" << c.successes() << "/" << c.runs.size() << " runs, "
              << c.mean_seconds() << " s/run)\n";
  }
  std::cout << "report: " << (out / "report.tsv").string() << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"m2v: unsupervised anomaly detection on incomplete attributed graphs"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--config", g.config, "key = value training configuration");
  app.add_option("--set", g.overrides, "Config override key=value (repeatable)");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("--deterministic,!--no-deterministic", g.deterministic, "Deterministic execution (default on)");
  app.add_option("--precision", g.precision, "f64 or f32")->check(CLI::IsMember({"f64", "f32"}));

  std::string preset;
  auto* synth = app.add_subcommand("synth", "Generate a stand-in dataset (cora, disney, books)");
  synth->add_option("--preset", preset)->required();

  fs::path manifest;
  InjectionSpec inj;
  bool inj_explicit = false;
  auto* inject = app.add_subcommand("inject", "Inject clique and contextual anomalies");
  inject->add_option("--manifest", manifest)->required();
  inject->add_option("--clique-size", inj.clique_size);
  inject->add_option("--clique-count", inj.clique_count)->each([&](const std::string&) { inj_explicit = true; });
  inject->add_option("--contextual", inj.contextual_count)->each([&](const std::string&) { inj_explicit = true; });
  inject->add_option("--pool", inj.candidate_pool);

  double node_rate = 0.3;
  double edge_rate = 0.3;
  std::string mode = "row";
  auto* mask = app.add_subcommand("mask", "Mask features and edges into an incomplete-graph bundle");
  mask->add_option("--manifest", manifest)->required();
  mask->add_option("--node-rate", node_rate);
  mask->add_option("--edge-rate", edge_rate);
  mask->add_option("--mode", mode);

  fs::path bundle_dir;
  fs::path checkpoint;
  int epochs = -1;
  auto* pre = app.add_subcommand("pretrain", "Pretrain on a bundle and write a checkpoint");
  pre->add_option("--bundle", bundle_dir)->required();
  pre->add_option("--resume", checkpoint, "Continue from a checkpoint");
  pre->add_option("--epochs", epochs, "Stop after this many epochs in this call");

  auto* fine = app.add_subcommand("finetune", "Fine-tune with pseudo-anomalies");
  fine->add_option("--bundle", bundle_dir)->required();
  fine->add_option("--checkpoint", checkpoint)->required();
  fine->add_option("--epochs", epochs, "Stop after this many epochs in this call");

  fs::path embeddings;
  auto* score = app.add_subcommand("score", "Score nodes by latent norm");
  score->add_option("--bundle", bundle_dir)->required();
  score->add_option("--checkpoint", checkpoint)->required();
  score->add_option("--embeddings", embeddings, "Also write the latent matrix here");

  fs::path scores_path;
  auto* eval = app.add_subcommand("eval", "AUROC of a score file against bundle labels");
  eval->add_option("--scores", scores_path)->required();
  eval->add_option("--bundle", bundle_dir)->required();

  ExperimentArgs exp;
  auto* runc = app.add_subcommand("run", "End-to-end repeats for one cell");
  add_experiment_options(runc, exp);

  std::string key;
  std::string values;
  auto* sweep = app.add_subcommand("sweep", "One cell per value of a setting");
  add_experiment_options(sweep, exp);
  sweep->add_option("--key", key, "variant, mask_rate, node_rate, edge_rate or a config key")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();

  std::size_t gc_nodes = 12, gc_dim = 6, gc_hidden = 8, gc_probes = 0;
  Eigen::Index gc_dz = 4;
  int gc_iters = 200;
  double gc_step = 1e-5, gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the pretrain loss");
  gc->add_option("--nodes", gc_nodes);
  gc->add_option("--dim", gc_dim);
  gc->add_option("--dz", gc_dz);
  gc->add_option("--hidden", gc_hidden);
  gc->add_option("--iters", gc_iters);
  gc->add_option("--step", gc_step);
  gc->add_option("--tol", gc_tol);
  gc->add_option("--probes", gc_probes, "0 checks every parameter");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  g.seed_given = seed_opt->count() > 0;
  if (g.precision != "f64") {
    throw UsageError("--precision " + g.precision + " is not available; every computation runs in double");
  }
  if (!g.deterministic) {
    std::cerr << "note: execution is single-threaded; results are deterministic either way\n";
  }

  if (*synth) {
    const fs::path out = require_out(g, "dataset directory");
    const SynthSpec spec = synth_preset(preset);
    const fs::path m = write_dataset(out, spec, synthesize(spec, g.seed));
    std::cout << "manifest: " << m.string() << "\n";
  } else if (*inject) {
    const fs::path out = require_out(g, "dataset directory");
    const DatasetManifest m = DatasetManifest::load(manifest);
    const AttributedGraph base = load_graph(m).graph;
    if (base.labels) throw DataError(m.name + ": dataset already carries labels");
    InjectionSpec spec = inj;
    if (!inj_explicit) spec = InjectionSpec::for_outlier_count(m.outliers, inj.clique_size, inj.candidate_pool);
    const InjectionResult r = inject_anomalies(base, spec, g.seed);
    SynthSpec meta;
    meta.name = m.name;
    meta.manifest_outliers = r.structural.size() + r.contextual.size();
    const fs::path mp = write_dataset(out, meta, r.graph);
    std::cout << "injected " << r.structural.size() << " structural + " << r.contextual.size()
              << " contextual anomalies; manifest: " << mp.string() << "\n";
  } else if (*mask) {
    const fs::path out = require_out(g, "bundle directory");
    const AttributedGraph graph = load_graph(DatasetManifest::load(manifest)).graph;
    const ObservationMask m = make_masks(graph, node_rate, edge_rate, parse_mask_mode(mode), g.seed);
    save_bundle(out, apply_masks(graph, m), graph.labels);
    std::cout << "bundle: " << out.string() << "\n";
  } else if (*pre) {
    const fs::path out = require_out(g, "checkpoint path");
    const Bundle bundle = load_bundle(bundle_dir);
    ModelBundle b = checkpoint.empty() ? init_bundle(bundle.graph, resolve_config(g)) : load_checkpoint(checkpoint);
    const std::size_t from = b.history.size();
    pretrain(b, bundle.graph, epochs);
    print_history(b, from);
    save_checkpoint(out, b);
    std::cout << "checkpoint: " << out.string() << " (lr " << b.config.lr << ", " << b.pre_done << "/"
              << b.config.epochs_pre << " pretrain epochs)\n";
  } else if (*fine) {
    const fs::path out = require_out(g, "checkpoint path");
    const Bundle bundle = load_bundle(bundle_dir);
    ModelBundle b = load_checkpoint(checkpoint);
    const std::size_t from = b.history.size();
    finetune(b, bundle.graph, epochs);
    print_history(b, from);
    save_checkpoint(out, b);
    std::cout << "checkpoint: " << out.string() << " (" << b.fine_done << "/" << b.config.epochs_fine
              << " finetune epochs)\n";
  } else if (*score) {
    const fs::path out = require_out(g, "score file");
    const Bundle bundle = load_bundle(bundle_dir);
    const ModelBundle b = load_checkpoint(checkpoint);
    const ScoreReport rep = score_nodes(b, bundle.graph);
    write_scores(out, rep);
    if (!embeddings.empty()) write_feature_file(embeddings, embed_nodes(b, bundle.graph));
    std::cout << "scores: " << out.string() << " (" << rep.scores.size() << " nodes, config "
              << hex64(rep.config_hash) << ")\n";
  } else if (*eval) {
    const Bundle bundle = load_bundle(bundle_dir);
    if (!bundle.labels) throw DataError(bundle_dir.string() + ": bundle has no labels");
    const Vector s = read_scores(scores_path, bundle.graph.num_nodes());
    const double a = auroc(s, *bundle.labels);
    std::cout << "auroc\t" << format_double(a) << "\n";
    if (!g.out.empty()) write_key_values(g.out, {{"auroc", format_double(a)}});
  } else if (*runc || *sweep) {
    const fs::path out = require_out(g, "report directory");
    fs::create_directories(out);
    ExperimentSpec spec = make_spec(exp, g);
    spec.out_dir = out / "scores";
    std::vector<CellResult> cells;
    if (*runc) {
      cells.push_back(run_experiment(spec));
    } else {
      cells = run_sweep(spec, key, split_list(values));
    }
    finish_report(cells, out);
  } else if (*gc) {
    TrainConfig cfg = resolve_config(g);
    cfg.d_z = gc_dz;
    cfg.hidden = static_cast<Eigen::Index>(gc_hidden);
    cfg.sinkhorn_iters = gc_iters;
    cfg.lr_probe = false;
    const AttributedGraph graph = random_graph(gc_nodes, gc_dim, 0.3, derive_seed(g.seed, 1));
    const IncompleteGraph inc = apply_masks(graph, make_masks(graph, 0.25, 0.25, MaskMode::ElementWise, derive_seed(g.seed, 2)));
    ModelBundle b = init_bundle(inc, cfg);
    GradCheckOptions opts;
    opts.probes = gc_probes;
    opts.step = gc_step;
    opts.rel_tol = gc_tol;
    opts.seed = g.seed;
    const GradCheckReport rep = grad_check(
        [&](Tape& t, ParamStore& p) { return pretrain_objective(t, p, inc, cfg, 0); }, b.params, opts);
    std::cout << "probes " << rep.probes.size() << "  max_rel_err " << rep.max_rel_err << "  max_abs_err "
              << rep.max_abs_err << "  max_tensor_rel_err " << rep.max_tensor_rel_err << "  "
              << (rep.passed ? "PASS" : "FAIL") << "\n";
    if (!rep.passed) return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
