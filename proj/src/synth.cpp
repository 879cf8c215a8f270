#include "m2v/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace m2v {

SynthSpec synth_preset(const std::string& name) {
  SynthSpec s;
  s.name = name;
  if (name == "cora") {
    s.nodes = 2708;
    s.edges = 5278;
    s.dim = 1433;
    s.classes = 7;
    s.homophily = 0.81;
    s.features = SynthFeatures::BagOfWords;
    s.manifest_outliers = 150;
  } else if (name == "disney") {
    s.nodes = 124;
    s.edges = 167;
    s.dim = 28;
    s.classes = 3;
    s.homophily = 0.9;
    s.anomalies = 6;
    s.anomaly_attrs = 4;
    s.anomaly_shift = 2.5;
    s.manifest_outliers = 6;
  } else if (name == "books") {
    s.nodes = 1418;
    s.edges = 1847;
    s.dim = 21;
    s.classes = 5;
    s.homophily = 0.85;
    s.anomalies = 28;
    s.anomaly_attrs = 3;
    s.anomaly_shift = 2.0;
    s.manifest_outliers = 28;
  } else {
    throw UsageError("unknown synthetic preset '" + name + "' (expected cora, disney or books)");
  }
  return s;
}

namespace {

// Index drawn with probability proportional to the weights behind `cumulative`.
std::size_t draw(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.uniform_open() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

std::vector<double> cumsum(const std::vector<double>& w) {
  std::vector<double> c(w.size());
  std::partial_sum(w.begin(), w.end(), c.begin());
  return c;
}

// Class sizes proportional to `shares`, summing to n.
std::vector<std::size_t> split_classes(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<double> shares(classes);
  for (auto& s : shares) s = 0.5 + rng.uniform_open();
  const double total = std::accumulate(shares.begin(), shares.end(), 0.0);
  std::vector<std::size_t> label(n);
  std::vector<double> cum = cumsum(shares);
  std::size_t c = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = (static_cast<double>(i) + 0.5) / static_cast<double>(n) * total;
    while (c + 1 < classes && pos > cum[c]) ++c;
    label[i] = c;
  }
  return label;
}

}  // namespace

AttributedGraph synthesize(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.nodes < 2 || spec.dim < 1 || spec.classes < 1) throw UsageError("synthesize: degenerate spec");
  if (spec.edges > spec.nodes * (spec.nodes - 1) / 4) throw UsageError("synthesize: too many edges requested");
  if (spec.anomalies > spec.nodes) throw UsageError("synthesize: more anomalies than nodes");
  Rng rng(derive_seed(seed, 0x5717));
  const std::size_t n = spec.nodes;
  const auto d = static_cast<Eigen::Index>(spec.dim);

  const std::vector<std::size_t> cls = split_classes(n, spec.classes, rng);
  std::vector<std::vector<std::size_t>> members(spec.classes);
  for (std::size_t i = 0; i < n; ++i) members[cls[i]].push_back(i);

  // Degree propensities with a Pareto tail.
  std::vector<double> theta(n);
  for (auto& t : theta) t = std::pow(rng.uniform_open(), -1.0 / spec.degree_tail);
  std::vector<double> all_cum = cumsum(theta);
  std::vector<std::vector<double>> class_cum(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<double> w;
    for (std::size_t i : members[c]) w.push_back(theta[i]);
    class_cum[c] = cumsum(w);
  }
  auto partner = [&](std::size_t u) {
    if (rng.uniform_open() < spec.homophily && members[cls[u]].size() > 1) {
      return members[cls[u]][draw(class_cum[cls[u]], rng)];
    }
    return draw(all_cum, rng);
  };

  std::set<Edge> edges;
  // One edge per node first so nobody is isolated, then fill to the target.
  for (std::size_t u = 0; u < n && edges.size() < spec.edges; ++u) {
    for (int tries = 0; tries < 64; ++tries) {
      const std::size_t v = partner(u);
      if (v != u && edges.insert(make_edge(u, v)).second) break;
    }
  }
  while (edges.size() < spec.edges) {
    const std::size_t u = draw(all_cum, rng);
    const std::size_t v = partner(u);
    if (v != u) edges.insert(make_edge(u, v));
  }

  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(n), d);
  if (spec.features == SynthFeatures::BagOfWords) {
    // Zipf background plus a block of signature words per class.
    std::vector<double> zipf(spec.dim);
    for (std::size_t j = 0; j < spec.dim; ++j) zipf[j] = 1.0 / std::pow(static_cast<double>(j + 1), 0.8);
    std::vector<std::size_t> perm(spec.dim);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t j = spec.dim; j > 1; --j) std::swap(perm[j - 1], perm[rng.below(j)]);
    std::vector<double> background(spec.dim);
    for (std::size_t j = 0; j < spec.dim; ++j) background[perm[j]] = zipf[j];
    const std::vector<double> bg_cum = cumsum(background);
    std::vector<std::vector<std::size_t>> signature(spec.classes);
    for (auto& sig : signature) {
      for (std::size_t w : rng.sample_without_replacement(spec.dim, std::min(spec.signature_words, spec.dim))) {
        sig.push_back(w);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = spec.words_per_node / 2 + rng.below(spec.words_per_node + 1);
      for (std::size_t k = 0; k < len; ++k) {
        const auto& sig = signature[cls[i]];
        const std::size_t w = rng.uniform_open() < spec.signature_share ? sig[rng.below(sig.size())]
                                                                        : draw(bg_cum, rng);
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(w)) = 1.0;
      }
    }
  } else {
    Matrix centers(static_cast<Eigen::Index>(spec.classes), d);
    for (Eigen::Index k = 0; k < centers.size(); ++k) centers.data()[k] = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) {
        x(static_cast<Eigen::Index>(i), j) = centers(static_cast<Eigen::Index>(cls[i]), j) + spec.noise * rng.normal();
      }
    }
  }

  std::optional<std::vector<int>> labels;
  if (spec.anomalies > 0) {
    labels = std::vector<int>(n, 0);
    const RowVector mean = x.colwise().mean();
    const RowVector sd = ((x.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(n - 1)).sqrt();
    for (std::size_t i : rng.sample_without_replacement(n, spec.anomalies)) {
      (*labels)[i] = 1;
      for (std::size_t j : rng.sample_without_replacement(spec.dim, std::min(spec.anomaly_attrs, spec.dim))) {
        const double sign = rng.uniform_open() < 0.5 ? -1.0 : 1.0;
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += sign * spec.anomaly_shift * sd(static_cast<Eigen::Index>(j));
      }
    }
  }
  return AttributedGraph::build(std::move(x), std::vector<Edge>(edges.begin(), edges.end()), std::move(labels));
}

AttributedGraph random_graph(std::size_t n, std::size_t d, double edge_prob, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t v = u + 1; v < n; ++v) {
      if (rng.uniform_open() < edge_prob) edges.push_back(Edge{u, v});
    }
  }
  return AttributedGraph::build(std::move(x), edges, std::nullopt);
}

std::filesystem::path write_dataset(const std::filesystem::path& dir, const SynthSpec& spec,
                                    const AttributedGraph& g) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.name = spec.name;
  m.features = dir / "features.txt";
  m.edges = dir / "edges.txt";
  m.nodes = g.num_nodes();
  m.num_edges = g.edges.size();
  m.dim = g.dim();
  m.outliers = spec.manifest_outliers;
  write_feature_file(m.features, g.features);
  write_edge_file(m.edges, g.edges);
  if (g.labels) {
    m.labels = dir / "labels.txt";
    write_label_file(*m.labels, *g.labels);
  }
  const auto path = dir / "manifest.txt";
  m.save(path);
  return path;
}

}  // namespace m2v
