// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//
// The exit status reports whether every criterion could be evaluated; a
// criterion that is evaluated and misses its threshold prints FAIL but does
// not change the status unless --strict is given.

#include "m2v/gradcheck.hpp"
#include "m2v/pipeline.hpp"
#include "m2v/synth.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace m2v;
namespace fs = std::filesystem;

namespace {

// Criterion 1
constexpr std::size_t kGcNodes = 12;
constexpr std::size_t kGcDim = 6;
constexpr Eigen::Index kGcLatent = 4;
constexpr Eigen::Index kGcHidden = 8;
constexpr int kGcIters = 200;
constexpr double kGcStep = 1e-5;
constexpr double kGcTol = 1e-4;
constexpr double kGcSeconds = 60.0;
// Criterion 2
constexpr double kSelfTol = 1e-6;
constexpr double kAtomTol = 1e-8;
constexpr double kSymTol = 1e-8;
constexpr int kSymFixtures = 20;
constexpr Eigen::Index kSymAtoms = 8;
// Criterion 3
constexpr int kPprGraphs = 10;
constexpr double kPprTol = 1e-8;
// Criterion 4
constexpr std::size_t kPriorSamples = 10000;
// Criterion 5
constexpr int kSeeds = 5;
constexpr double kDisneyMin = 0.70;
constexpr double kDisneySeconds = 120.0;
constexpr double kBooksMin = 0.55;
constexpr double kCoraMin = 0.85;
constexpr double kCoraSeconds = 1800.0;
constexpr double kFallbackMargin = 0.05;
// Criterion 6
constexpr double kAblationMargin = 0.05;
// Criterion 7
constexpr double kRobustTol = 0.05;
// Criterion 8
constexpr int kResumeEpoch = 50;

struct Options {
  fs::path workdir = "acceptance_work";
  bool strict = false;
  bool quick = false;
  std::set<int> only;
};

struct Verdict {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<Verdict> g_verdicts;

void report(int id, const std::string& name, bool passed, const std::string& detail) {
  g_verdicts.push_back({id, name, passed, detail});
  std::cout << "criterion " << id << " [" << (passed ? "PASS" : "FAIL") << "] " << name << ": " << detail
            << std::endl;
}

void note(const std::string& s) { std::cout << "  " << s << std::endl; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix gaussian(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return m;
}

// ---- 1 ----------------------------------------------------------------------

void gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig cfg;
  cfg.d_z = kGcLatent;
  cfg.hidden = kGcHidden;
  cfg.sinkhorn_iters = kGcIters;
  cfg.lr_probe = false;
  const AttributedGraph g = random_graph(kGcNodes, kGcDim, 0.3, derive_seed(0, 1));
  const IncompleteGraph inc =
      apply_masks(g, make_masks(g, 0.25, 0.25, MaskMode::ElementWise, derive_seed(0, 2)));
  ModelBundle b = init_bundle(inc, cfg);
  GradCheckOptions opts;
  opts.probes = 0;
  opts.step = kGcStep;
  opts.rel_tol = kGcTol;
  const GradCheckReport r = grad_check(
      [&](Tape& t, ParamStore& p) { return pretrain_objective(t, p, inc, cfg, 0); }, b.params, opts);
  const double secs = elapsed(t0);
  const bool ok = r.max_tensor_rel_err <= kGcTol && secs < kGcSeconds;
  report(1, "gradient integrity", ok,
         "per-tensor rel err " + fmt(r.max_tensor_rel_err) + " (tol " + fmt(kGcTol) + "), " +
             std::to_string(r.probes.size()) + " scalars, elementwise max rel err " + fmt(r.max_rel_err) +
             ", max abs err " + fmt(r.max_abs_err) + ", " + fmt(secs, 3) + " s");
}

// ---- 2 ----------------------------------------------------------------------

void sinkhorn_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  const SinkhornConfig cfg;
  Rng rng(derive_seed(0, 0x52));
  double self_max = 0.0, atom_max = 0.0, sym_max = 0.0;
  for (int f = 0; f < kSymFixtures; ++f) {
    const Matrix p = gaussian(kSymAtoms, 4, rng);
    const Matrix q = gaussian(kSymAtoms, 4, rng);
    self_max = std::max(self_max, std::abs(sinkhorn_divergence(p, p, cfg)));
    sym_max = std::max(sym_max, std::abs(sinkhorn_divergence(p, q, cfg) - sinkhorn_divergence(q, p, cfg)));
    const Matrix z = gaussian(1, 4, rng);
    const Matrix y = gaussian(1, 4, rng);
    atom_max = std::max(atom_max, std::abs(sinkhorn_divergence(z, y, cfg) - (z - y).squaredNorm()));
  }
  const bool ok = self_max <= kSelfTol && atom_max <= kAtomTol && sym_max <= kSymTol;
  report(2, "sinkhorn properties", ok,
         "max |S(P,P)| " + fmt(self_max) + " (tol " + fmt(kSelfTol) + "), one-atom err " + fmt(atom_max) +
             " (tol " + fmt(kAtomTol) + "), symmetry err " + fmt(sym_max) + " (tol " + fmt(kSymTol) +
             ") over " + std::to_string(kSymFixtures) + " fixtures, " + fmt(elapsed(t0), 3) + " s");
}

// ---- 3 ----------------------------------------------------------------------

void ppr_oracle() {
  Rng rng(derive_seed(0, 0x77));
  double err_max = 0.0, row_max = 0.0;
  int cases = 0;
  bool converged = true;
  for (int k = 0; k < kPprGraphs; ++k) {
    const std::size_t n = 2 + rng.below(9);
    const AttributedGraph g = random_graph(n, 1, 0.35, rng.next_u64());
    Matrix trans = g.adjacency() + Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < trans.rows(); ++i) trans.row(i) /= trans.row(i).sum();
    for (double beta : {0.3, 0.5, 0.85}) {
      DiffusionConfig c;
      c.beta = beta;
      c.tol = 1e-14;
      c.max_iters = 10000;
      const DiffusionResult r = ppr_diffuse(g.edges, n, c);
      converged = converged && r.converged;
      const Eigen::Index nn = static_cast<Eigen::Index>(n);
      const Matrix oracle = (1.0 - beta) * (Matrix::Identity(nn, nn) - beta * trans).lu().inverse();
      err_max = std::max(err_max, (r.ppr - oracle).cwiseAbs().rowwise().sum().maxCoeff());
      row_max = std::max(row_max, (r.ppr.rowwise().sum().array() - 1.0).abs().maxCoeff());
      ++cases;
    }
  }
  const bool ok = converged && err_max <= kPprTol && row_max <= kPprTol;
  report(3, "PPR oracle equivalence", ok,
         std::to_string(cases) + " cases, max ||P - R||_inf " + fmt(err_max) + ", max |row sum - 1| " +
             fmt(row_max) + " (tol " + fmt(kPprTol) + ")" + (converged ? "" : ", some runs did not converge"));
}

// ---- 4 ----------------------------------------------------------------------

struct Fixture {
  std::string name;
  AttributedGraph graph;
};

void structural_invariants(const std::vector<Fixture>& fixtures) {
  const TrainConfig base;
  const PriorSpec spec = base.prior();
  bool cross_zero = true, pseudo_in = true;
  double pseudo_lo = INFINITY, pseudo_hi = 0.0;
  std::size_t pseudo_total = 0;
  for (const Fixture& f : fixtures) {
    const IncompleteGraph inc =
        apply_masks(f.graph, make_masks(f.graph, 0.3, 0.3, MaskMode::RowWise, derive_seed(0, 4)));
    TrainConfig cfg = base;
    cfg.lr_probe = false;
    const ModelBundle b = init_bundle(inc, cfg);
    const PseudoAnomalyBatch batch =
        generate_pseudo_anomalies(b.params, inc.num_nodes(), spec, cfg.eta, cfg.tau_a, derive_seed(0, 5));
    const AugmentedGraph aug = augment(inc, batch);
    const Eigen::Index n = static_cast<Eigen::Index>(aug.real_count);
    const Eigen::Index m = static_cast<Eigen::Index>(aug.pseudo_count);
    auto cross_ok = [&](const Matrix& a) {
      return (a.topRightCorner(n, m).array() == 0.0).all() && (a.bottomLeftCorner(m, n).array() == 0.0).all();
    };
    const SurrogateStructure s =
        build_structure(aug.edges, aug.num_nodes(), cfg.diffusion(), std::nullopt, true);
    cross_zero = cross_zero && cross_ok(aug.adjacency()) && cross_ok(s.adjacency) &&
                 cross_ok(normalize_adjacency(s.adjacency, cfg.gcn_norm));
    const Vector norms = batch.codes.rowwise().norm();
    if (norms.size() > 0) {
      pseudo_lo = std::min(pseudo_lo, norms.minCoeff());
      pseudo_hi = std::max(pseudo_hi, norms.maxCoeff());
      pseudo_in = pseudo_in && (norms.array() > spec.r_a).all() && (norms.array() < spec.r_b).all();
    }
    pseudo_total += batch.size();
  }

  const Vector ball = sample_ball_prior(kPriorSamples, spec, derive_seed(0, 6)).rowwise().norm();
  const Vector shell = sample_shell_gaussian(kPriorSamples, spec, derive_seed(0, 7)).rowwise().norm();
  const Vector uni = sample_shell_uniform(kPriorSamples, spec, derive_seed(0, 8)).rowwise().norm();
  const bool ball_ok = (ball.array() <= spec.r).all();
  const bool shell_ok = (shell.array() > spec.r_a).all() && (shell.array() <= spec.r_b).all();
  const bool uni_ok = (uni.array() > spec.r_a).all() && (uni.array() < spec.r_b).all();
  const bool ok = cross_zero && pseudo_in && pseudo_total > 0 && ball_ok && shell_ok && uni_ok;
  report(4, "structural invariants", ok,
         std::string("cross blocks ") + (cross_zero ? "zero" : "NONZERO") + " on " +
             std::to_string(fixtures.size()) + " fixtures; " + std::to_string(pseudo_total) +
             " pseudo codes with norms in [" + fmt(pseudo_lo, 8) + ", " + fmt(pseudo_hi, 8) + "] vs (" +
             fmt(spec.r_a) + ", " + fmt(spec.r_b) + "); ball max " + fmt(ball.maxCoeff(), 8) +
             ", shell-gaussian [" + fmt(shell.minCoeff(), 8) + ", " + fmt(shell.maxCoeff(), 8) +
             "], shell-uniform [" + fmt(uni.minCoeff(), 8) + ", " + fmt(uni.maxCoeff(), 8) + "] (" +
             std::to_string(kPriorSamples) + " samples each)");
}

// ---- 5-7 --------------------------------------------------------------------

struct Datasets {
  fs::path disney, books, cora;
};

Datasets make_datasets(const fs::path& dir) {
  Datasets d;
  for (const char* name : {"disney", "books", "cora"}) {
    const fs::path manifest = dir / "data" / name / "manifest.txt";
    if (!fs::exists(manifest)) {
      const SynthSpec spec = synth_preset(name);
      write_dataset(manifest.parent_path(), spec, synthesize(spec, 0));
    }
    if (std::string(name) == "disney") d.disney = manifest;
    if (std::string(name) == "books") d.books = manifest;
    if (std::string(name) == "cora") d.cora = manifest;
  }
  return d;
}

std::vector<CellResult> g_cells;

CellResult cell(const Options& opt, const fs::path& manifest, const std::string& variant, double rate) {
  ExperimentSpec s;
  s.manifest = manifest;
  const DatasetManifest m = DatasetManifest::load(manifest);
  if (!m.labels) s.injection = InjectionSpec::for_outlier_count(m.outliers);
  s.node_rate = rate;
  s.edge_rate = rate;
  s.repeats = kSeeds;
  s.seed = 0;
  s.variant = variant;
  s.out_dir = opt.workdir / "scores";
  if (opt.quick) {
    s.repeats = 2;
    s.config.epochs_pre = 3;
    s.config.epochs_fine = 3;
    s.config.probe_epochs = 1;
    s.config.sinkhorn_iters = 50;
  }
  CellResult c = run_experiment(s);
  std::ostringstream runs;
  for (const RunResult& r : c.runs) {
    runs << " s" << r.seed << "=" << (r.error.empty() ? fmt(r.auroc) : "error");
  }
  note(c.dataset + " " + variant + " mask " + fmt(rate) + ": AUROC " + fmt(c.mean()) + " +/- " +
       fmt(c.stddev()) + " (" + std::to_string(c.successes()) + "/" + std::to_string(c.runs.size()) +
       " runs, " + fmt(c.mean_seconds(), 4) + " s/run; max " + fmt([&] {
         double mx = 0.0;
         for (const RunResult& r : c.runs) mx = std::max(mx, r.seconds);
         return mx;
       }(), 4) + " s)" + runs.str());
  g_cells.push_back(c);
  return c;
}

double max_seconds(const CellResult& c) {
  double mx = 0.0;
  for (const RunResult& r : c.runs) mx = std::max(mx, r.seconds);
  return mx;
}

bool complete(const CellResult& c) { return c.successes() == c.runs.size() && !c.runs.empty(); }

void reproduction(const Options& opt, const Datasets& d, const std::set<int>& wanted) {
  const bool need5 = wanted.contains(5);
  const bool need6 = wanted.contains(6);
  const bool need7 = wanted.contains(7);
  std::optional<CellResult> cora_full;
  if (need5 || need6 || need7) cora_full = cell(opt, d.cora, "full", 0.3);

  if (need5) {
    const CellResult disney = cell(opt, d.disney, "full", 0.3);
    const CellResult books = cell(opt, d.books, "full", 0.3);
    const CellResult ablated = cell(opt, d.cora, "noPseudo+noStructurePathway", 0.3);
    const bool disney_ok = complete(disney) && disney.mean() >= kDisneyMin && max_seconds(disney) < kDisneySeconds;
    const bool books_ok = complete(books) && books.mean() >= kBooksMin;
    const bool cora_abs = complete(*cora_full) && cora_full->mean() >= kCoraMin;
    const bool cora_time = complete(*cora_full) && max_seconds(*cora_full) < kCoraSeconds;
    const double gap = cora_full->mean() - ablated.mean();
    const bool fallback = complete(ablated) && complete(*cora_full) && gap >= kFallbackMargin;
    note(std::string("disney ") + (disney_ok ? "meets" : "misses") + " AUROC >= " + fmt(kDisneyMin) +
         " and < " + fmt(kDisneySeconds) + " s/run");
    note(std::string("books ") + (books_ok ? "meets" : "misses") + " AUROC >= " + fmt(kBooksMin));
    note(std::string("cora ") + (cora_abs ? "meets" : "misses") + " AUROC >= " + fmt(kCoraMin) + ", " +
         (cora_time ? "meets" : "misses") + " < " + fmt(kCoraSeconds) + " s/run");
    note(std::string("cora fallback ") + (fallback ? "holds" : "fails") + ": full - ablated = " + fmt(gap) +
         " (need >= " + fmt(kFallbackMargin) + ")");
    report(5, "desk-scale reproduction", disney_ok && books_ok && cora_time && fallback,
           "disney " + fmt(disney.mean()) + " (max " + fmt(max_seconds(disney), 4) + " s), books " +
               fmt(books.mean()) + ", cora " + fmt(cora_full->mean()) + " (max " +
               fmt(max_seconds(*cora_full), 5) + " s), cora full - noPseudo+noStructurePathway " + fmt(gap));
  }
  if (need6) {
    const CellResult nopseudo = cell(opt, d.cora, "noPseudo", 0.3);
    const double drop = cora_full->mean() - nopseudo.mean();
    report(6, "ablation direction", complete(nopseudo) && complete(*cora_full) && drop >= kAblationMargin,
           "cora full " + fmt(cora_full->mean()) + ", noPseudo " + fmt(nopseudo.mean()) + ", drop " + fmt(drop) +
               " (need >= " + fmt(kAblationMargin) + ")");
  }
  if (need7) {
    const CellResult half = cell(opt, d.cora, "full", 0.5);
    const double diff = std::abs(half.mean() - cora_full->mean());
    report(7, "missing-rate robustness", complete(half) && complete(*cora_full) && diff <= kRobustTol,
           "cora 30% " + fmt(cora_full->mean()) + ", 50% " + fmt(half.mean()) + ", |diff| " + fmt(diff) +
               " (tol " + fmt(kRobustTol) + ")");
  }
}

// ---- 8 ----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism(const Options& opt, const Datasets& d) {
  const fs::path dir = opt.workdir / "determinism";
  fs::create_directories(dir);
  const AttributedGraph g = load_graph(DatasetManifest::load(d.disney)).graph;
  const IncompleteGraph inc =
      apply_masks(g, make_masks(g, 0.3, 0.3, MaskMode::RowWise, derive_seed(0, 0x3a5c)));
  TrainConfig cfg;
  int resume_at = kResumeEpoch;
  if (opt.quick) {
    cfg.epochs_pre = 4;
    cfg.epochs_fine = 2;
    cfg.probe_epochs = 1;
    cfg.sinkhorn_iters = 50;
    resume_at = 2;
  }
  auto finish = [&](ModelBundle& b, const std::string& name) {
    pretrain(b, inc);
    finetune(b, inc);
    write_scores(dir / name, score_nodes(b, inc));
    return slurp(dir / name);
  };
  ModelBundle a = init_bundle(inc, cfg);
  const std::string first = finish(a, "run_a.tsv");
  ModelBundle b = init_bundle(inc, cfg);
  const std::string second = finish(b, "run_b.tsv");

  ModelBundle c = init_bundle(inc, cfg);
  pretrain(c, inc, resume_at);
  save_checkpoint(dir / "mid.ckpt", c);
  ModelBundle resumed = load_checkpoint(dir / "mid.ckpt");
  const std::string third = finish(resumed, "run_resumed.tsv");

  const bool same = !first.empty() && first == second;
  const bool resume = first == third;
  report(8, "determinism", same && resume,
         std::string("repeat run ") + (same ? "bit-identical" : "DIFFERS") + ", resume at pretrain epoch " +
             std::to_string(resume_at) + " " + (resume ? "bit-identical" : "DIFFERS") + " (" +
             std::to_string(first.size()) + " bytes of scores)");
}

void write_summary(const fs::path& path) {
  std::ofstream out(path);
  out << "criterion\tname\tresult\tdetail\n";
  for (const Verdict& v : g_verdicts) {
    out << v.id << '\t' << v.name << '\t' << (v.passed ? "PASS" : "FAIL") << '\t' << v.detail << '\n';
  }
  if (!g_cells.empty()) {
    write_report(path.parent_path() / "cells.tsv", path.parent_path() / "cells_metrics.txt", g_cells);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2v acceptance suite"};
  Options opt;
  std::vector<int> only;
  app.add_option("--workdir", opt.workdir, "Scratch directory for datasets and outputs");
  app.add_flag("--strict", opt.strict, "Exit non-zero when any criterion fails");
  app.add_flag("--quick", opt.quick, "Plumbing check with tiny training budgets; verdicts are not meaningful");
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  opt.only = std::set<int>(only.begin(), only.end());
  auto wanted = [&](int id) { return opt.only.empty() || opt.only.contains(id); };

  try {
    fs::create_directories(opt.workdir);
    if (opt.quick) std::cout << "quick mode: training budgets reduced, verdicts below are not meaningful\n";
    const auto t0 = std::chrono::steady_clock::now();
    if (wanted(1)) gradient_integrity();
    if (wanted(2)) sinkhorn_properties();
    if (wanted(3)) ppr_oracle();
    const Datasets d = make_datasets(opt.workdir);
    if (wanted(4)) {
      std::vector<Fixture> fixtures;
      fixtures.push_back({"random12", random_graph(12, 6, 0.3, 3)});
      fixtures.push_back({"disney", load_graph(DatasetManifest::load(d.disney)).graph});
      fixtures.push_back({"books", load_graph(DatasetManifest::load(d.books)).graph});
      structural_invariants(fixtures);
    }
    if (wanted(8)) determinism(opt, d);
    std::set<int> heavy;
    for (int id : {5, 6, 7}) {
      if (wanted(id)) heavy.insert(id);
    }
    if (!heavy.empty()) reproduction(opt, d, heavy);

    std::sort(g_verdicts.begin(), g_verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
    write_summary(opt.workdir / "summary.tsv");
    std::size_t passed = 0;
    for (const Verdict& v : g_verdicts) passed += v.passed ? 1 : 0;
    std::cout << "summary: " << passed << "/" << g_verdicts.size() << " criteria passed in " << fmt(elapsed(t0), 5)
              << " s\n";
    for (const Verdict& v : g_verdicts) {
      std::cout << "  " << v.id << " " << (v.passed ? "PASS" : "FAIL") << "  " << v.name << "\n";
    }
    if (opt.strict && passed != g_verdicts.size()) return 1;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << "\n";
    return 2;
  }
}
