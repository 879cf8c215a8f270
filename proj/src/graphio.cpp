#include "m2v/graphio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace m2v {

namespace fs = std::filesystem;

Edge make_edge(std::size_t a, std::size_t b) { return a < b ? Edge{a, b} : Edge{b, a}; }

namespace {

std::uint64_t hash_edges(const std::vector<Edge>& edges, std::uint64_t h) {
  for (const Edge& e : edges) {
    const std::uint64_t pair[2] = {e.u, e.v};
    h = fnv1a({reinterpret_cast<const unsigned char*>(pair), sizeof pair}, h);
  }
  return h;
}

void fill_dense(Matrix& a, const std::vector<Edge>& edges) {
  for (const Edge& e : edges) {
    a(static_cast<Eigen::Index>(e.u), static_cast<Eigen::Index>(e.v)) = 1.0;
    a(static_cast<Eigen::Index>(e.v), static_cast<Eigen::Index>(e.u)) = 1.0;
  }
}

/// Whitespace tokenizer that remembers where every token came from.
class TokenReader {
 public:
  explicit TokenReader(const fs::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text_ = ss.str();
  }

  bool next_line(std::vector<std::string_view>& tokens) {
    tokens.clear();
    while (pos_ < text_.size()) {
      line_start_ = pos_;
      ++line_;
      std::size_t end = text_.find('\n', pos_);
      if (end == std::string::npos) end = text_.size();
      std::string_view line(text_.data() + pos_, end - pos_);
      pos_ = end + 1;
      std::size_t i = 0;
      while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) tokens.push_back(line.substr(i, j - i));
        i = j;
      }
      if (!tokens.empty()) return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what, std::string_view token = {}) const {
    std::ostringstream os;
    os << path_.string() << ":" << line_ << " (byte offset "
       << (token.empty() ? line_start_ : static_cast<std::size_t>(token.data() - text_.data()))
       << "): " << what;
    throw DataError(os.str());
  }

  double parse_double(std::string_view tok) const {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) fail("malformed number", tok);
    if (!std::isfinite(v)) fail("non-finite value", tok);
    return v;
  }

  long long parse_int(std::string_view tok) const {
    long long v = 0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) fail("malformed integer", tok);
    return v;
  }

  bool ends_with_newline() const { return text_.empty() || text_.back() == '\n'; }
  std::size_t line() const { return line_; }

 private:
  fs::path path_;
  std::string text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
  std::size_t line_start_ = 0;
};

std::size_t parse_size(const KeyValues& kv, const std::string& key, const fs::path& src) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError(src.string() + ": missing key '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw DataError(src.string() + ": key '" + key + "' is not a count");
  }
}

}  // namespace

Matrix AttributedGraph::adjacency() const {
  Matrix a = Matrix::Zero(features.rows(), features.rows());
  fill_dense(a, edges);
  return a;
}

std::uint64_t AttributedGraph::hash() const {
  std::uint64_t h = hash_matrix(features);
  h = hash_edges(edges, h);
  if (labels) {
    h = fnv1a({reinterpret_cast<const unsigned char*>(labels->data()), labels->size() * sizeof(int)},
              h);
  }
  return h;
}

AttributedGraph AttributedGraph::build(Matrix features, const std::vector<Edge>& raw_edges,
                                       std::optional<std::vector<int>> labels,
                                       EdgeCleanup* cleanup) {
  const std::size_t n = static_cast<std::size_t>(features.rows());
  require_finite(features, "features");
  EdgeCleanup stats;
  std::vector<Edge> edges;
  edges.reserve(raw_edges.size());
  for (const Edge& raw : raw_edges) {
    if (raw.u >= n || raw.v >= n) {
      throw DataError("edge (" + std::to_string(raw.u) + ", " + std::to_string(raw.v) +
                      ") references a node >= n=" + std::to_string(n));
    }
    if (raw.u == raw.v) {
      ++stats.self_loops;
      continue;
    }
    edges.push_back(make_edge(raw.u, raw.v));
  }
  std::sort(edges.begin(), edges.end());
  const auto last = std::unique(edges.begin(), edges.end());
  stats.duplicates = static_cast<std::size_t>(edges.end() - last);
  edges.erase(last, edges.end());

  if (labels) {
    if (labels->size() != n) {
      throw DataError("label count " + std::to_string(labels->size()) + " != n=" + std::to_string(n));
    }
    for (int l : *labels) {
      if (l != 0 && l != 1) throw DataError("labels must be 0 or 1");
    }
  }
  if (cleanup) *cleanup = stats;
  return AttributedGraph{std::move(features), std::move(edges), std::move(labels)};
}

std::string to_string(MaskMode mode) {
  return mode == MaskMode::RowWise ? "row" : "element";
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "row" || s == "row-wise" || s == "rowwise") return MaskMode::RowWise;
  if (s == "element" || s == "element-wise" || s == "elementwise") return MaskMode::ElementWise;
  throw UsageError("unknown mask mode '" + s + "' (expected row or element)");
}

Matrix IncompleteGraph::adjacency() const {
  Matrix a = Matrix::Zero(observed_features.rows(), observed_features.rows());
  fill_dense(a, observed_edges);
  return a;
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  const KeyValues kv = read_key_values(path);
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& key) -> fs::path {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError(path.string() + ": missing key '" + key + "'");
    fs::path p(it->second);
    return p.is_absolute() ? p : base / p;
  };
  DatasetManifest m;
  m.name = kv.contains("name") ? kv.at("name") : path.stem().string();
  m.features = resolve("features");
  m.edges = resolve("edges");
  if (kv.contains("labels") && !kv.at("labels").empty()) m.labels = resolve("labels");
  m.nodes = parse_size(kv, "nodes", path);
  m.num_edges = parse_size(kv, "num_edges", path);
  m.dim = parse_size(kv, "dim", path);
  m.outliers = parse_size(kv, "outliers", path);
  return m;
}

void DatasetManifest::save(const fs::path& path) const {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) { return p.lexically_relative(base).string(); };
  KeyValues kv{{"name", name},
               {"features", rel(features)},
               {"edges", rel(edges)},
               {"nodes", std::to_string(nodes)},
               {"num_edges", std::to_string(num_edges)},
               {"dim", std::to_string(dim)},
               {"outliers", std::to_string(outliers)}};
  if (labels) kv["labels"] = rel(*labels);
  write_key_values(path, kv);
}

Matrix read_feature_file(const fs::path& path) {
  TokenReader reader(path);
  std::vector<std::string_view> tokens;
  std::vector<double> values;
  std::size_t cols = 0;
  std::size_t rows = 0;
  while (reader.next_line(tokens)) {
    if (rows == 0) {
      cols = tokens.size();
    } else if (tokens.size() != cols) {
      reader.fail("expected " + std::to_string(cols) + " values, found " +
                  std::to_string(tokens.size()));
    }
    for (auto tok : tokens) values.push_back(reader.parse_double(tok));
    ++rows;
  }
  Matrix x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::copy(values.begin(), values.end(), x.data());
  return x;
}

std::vector<Edge> read_edge_file(const fs::path& path) {
  TokenReader reader(path);
  std::vector<std::string_view> tokens;
  std::vector<Edge> edges;
  while (reader.next_line(tokens)) {
    if (tokens.size() != 2) reader.fail("expected 'u v'");
    const long long u = reader.parse_int(tokens[0]);
    const long long v = reader.parse_int(tokens[1]);
    if (u < 0 || v < 0) reader.fail("negative node id", tokens[0]);
    edges.push_back(Edge{static_cast<std::size_t>(u), static_cast<std::size_t>(v)});
  }
  return edges;
}

std::vector<int> read_label_file(const fs::path& path) {
  TokenReader reader(path);
  std::vector<std::string_view> tokens;
  std::vector<int> labels;
  while (reader.next_line(tokens)) {
    if (tokens.size() != 1) reader.fail("expected a single label");
    const long long l = reader.parse_int(tokens[0]);
    if (l != 0 && l != 1) reader.fail("label must be 0 or 1", tokens[0]);
    labels.push_back(static_cast<int>(l));
  }
  return labels;
}

void write_feature_file(const fs::path& path, const Matrix& x) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[32];
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x(i, j));
      if (j) out << ' ';
      out.write(buf, p - buf);
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

void write_edge_file(const fs::path& path, const std::vector<Edge>& edges) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Edge& e : edges) out << e.u << ' ' << e.v << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

void write_label_file(const fs::path& path, const std::vector<int>& labels) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (int l : labels) out << l << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

LoadedGraph load_graph(const DatasetManifest& manifest) {
  Matrix x = read_feature_file(manifest.features);
  const std::string tag = manifest.name + ": ";
  if (static_cast<std::size_t>(x.rows()) != manifest.nodes) {
    throw DataError(tag + "feature rows " + std::to_string(x.rows()) + " != manifest nodes " +
                    std::to_string(manifest.nodes));
  }
  if (static_cast<std::size_t>(x.cols()) != manifest.dim) {
    throw DataError(tag + "feature columns " + std::to_string(x.cols()) + " != manifest dim " +
                    std::to_string(manifest.dim));
  }
  std::optional<std::vector<int>> labels;
  if (manifest.labels) labels = read_label_file(*manifest.labels);

  LoadedGraph out;
  out.graph = AttributedGraph::build(std::move(x), read_edge_file(manifest.edges), std::move(labels),
                                     &out.cleanup);
  if (out.cleanup.self_loops || out.cleanup.duplicates) {
    std::cerr << "warning: " << tag << "dropped " << out.cleanup.self_loops << " self loops and "
              << out.cleanup.duplicates << " duplicate edges\n";
  }
  if (out.graph.edges.size() != manifest.num_edges) {
    throw DataError(tag + "edge count " + std::to_string(out.graph.edges.size()) +
                    " != manifest num_edges " + std::to_string(manifest.num_edges));
  }
  if (out.graph.labels) {
    const auto ones = static_cast<std::size_t>(
        std::count(out.graph.labels->begin(), out.graph.labels->end(), 1));
    if (ones != manifest.outliers) {
      throw DataError(tag + "labelled outliers " + std::to_string(ones) +
                      " != manifest outliers " + std::to_string(manifest.outliers));
    }
  }
  return out;
}

InjectionSpec InjectionSpec::for_outlier_count(std::size_t outliers, std::size_t clique_size,
                                               std::size_t candidate_pool) {
  if (clique_size < 2) throw UsageError("clique size must be >= 2");
  InjectionSpec s;
  s.clique_size = clique_size;
  s.candidate_pool = candidate_pool;
  s.clique_count = (outliers / 2) / clique_size;
  s.contextual_count = outliers - s.clique_count * clique_size;
  return s;
}

InjectionResult inject_anomalies(const AttributedGraph& g, const InjectionSpec& spec,
                                 std::uint64_t seed) {
  const std::size_t n = g.num_nodes();
  if (g.labels) throw UsageError("inject_anomalies: graph already carries labels");
  const std::size_t structural = spec.clique_size * spec.clique_count;
  const std::size_t total = structural + spec.contextual_count;
  if (total > n) {
    throw DataError("inject_anomalies: need " + std::to_string(total) + " nodes, graph has " +
                    std::to_string(n));
  }
  if (spec.contextual_count > 0 && (spec.candidate_pool == 0 || spec.candidate_pool > n - 1)) {
    throw UsageError("inject_anomalies: candidate pool must be in [1, n-1]");
  }

  Rng rng(derive_seed(seed, 0x1a3c));
  const std::vector<std::size_t> chosen = rng.sample_without_replacement(n, total);

  InjectionResult res;
  res.structural.assign(chosen.begin(), chosen.begin() + static_cast<std::ptrdiff_t>(structural));
  res.contextual.assign(chosen.begin() + static_cast<std::ptrdiff_t>(structural), chosen.end());

  std::vector<Edge> edges = g.edges;
  for (std::size_t c = 0; c < spec.clique_count; ++c) {
    const auto* members = res.structural.data() + c * spec.clique_size;
    for (std::size_t a = 0; a < spec.clique_size; ++a) {
      for (std::size_t b = a + 1; b < spec.clique_size; ++b) {
        edges.push_back(make_edge(members[a], members[b]));
      }
    }
  }

  Matrix x = g.features;
  for (std::size_t target : res.contextual) {
    // Candidates are drawn from the other n-1 nodes; distances use the original features.
    std::vector<std::size_t> pool = rng.sample_without_replacement(n - 1, spec.candidate_pool);
    std::size_t best = 0;
    double best_dist = -1.0;
    for (std::size_t raw : pool) {
      const std::size_t cand = raw >= target ? raw + 1 : raw;
      const double dist = (g.features.row(static_cast<Eigen::Index>(cand)) -
                           g.features.row(static_cast<Eigen::Index>(target)))
                              .squaredNorm();
      if (dist > best_dist) {
        best_dist = dist;
        best = cand;
      }
    }
    x.row(static_cast<Eigen::Index>(target)) = g.features.row(static_cast<Eigen::Index>(best));
  }

  std::vector<int> labels(n, 0);
  for (std::size_t i : chosen) labels[i] = 1;
  res.graph = AttributedGraph::build(std::move(x), edges, std::move(labels));
  return res;
}

std::size_t floor_count(double rate, std::size_t count) {
  // 1e-9 absorbs decimal rates that are not exactly representable (0.29 * 100).
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(count) + 1e-9));
}

ObservationMask make_masks(const AttributedGraph& g, double node_rate, double edge_rate,
                           MaskMode mode, std::uint64_t seed) {
  if (!(node_rate >= 0.0 && node_rate <= 1.0) || !(edge_rate >= 0.0 && edge_rate <= 1.0)) {
    throw UsageError("mask rates must lie in [0, 1]");
  }
  const std::size_t n = g.num_nodes();
  const std::size_t d = g.dim();
  ObservationMask m;
  m.mode = mode;
  m.node_rate = node_rate;
  m.edge_rate = edge_rate;
  m.seed = seed;
  m.feature_mask = Matrix::Ones(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));

  Rng feature_rng(derive_seed(seed, 0xfea7));
  if (mode == MaskMode::RowWise) {
    for (std::size_t i : feature_rng.sample_without_replacement(n, floor_count(node_rate, n))) {
      m.feature_mask.row(static_cast<Eigen::Index>(i)).setZero();
    }
  } else {
    for (std::size_t k : feature_rng.sample_without_replacement(n * d, floor_count(node_rate, n * d))) {
      m.feature_mask.data()[k] = 0.0;
    }
  }

  Rng edge_rng(derive_seed(seed, 0xed9e));
  const std::size_t e = g.edges.size();
  for (std::size_t k : edge_rng.sample_without_replacement(e, floor_count(edge_rate, e))) {
    m.masked_edges.push_back(g.edges[k]);
  }
  std::sort(m.masked_edges.begin(), m.masked_edges.end());
  return m;
}

IncompleteGraph apply_masks(const AttributedGraph& g, const ObservationMask& m) {
  if (m.feature_mask.rows() != g.features.rows() || m.feature_mask.cols() != g.features.cols()) {
    throw DataError("apply_masks: mask " + shape_str(m.feature_mask) + " vs features " +
                    shape_str(g.features));
  }
  IncompleteGraph inc;
  inc.observed_features = g.features.cwiseProduct(m.feature_mask);
  const std::set<Edge> masked(m.masked_edges.begin(), m.masked_edges.end());
  for (const Edge& e : m.masked_edges) {
    if (!std::binary_search(g.edges.begin(), g.edges.end(), e)) {
      throw DataError("apply_masks: masked edge not present in graph");
    }
  }
  for (const Edge& e : g.edges) {
    if (!masked.contains(e)) inc.observed_edges.push_back(e);
  }
  inc.masks = m;
  inc.source_hash = g.hash();
  return inc;
}

std::optional<std::string> check_source(const IncompleteGraph& inc, const AttributedGraph& g) {
  const std::uint64_t h = g.hash();
  if (h == inc.source_hash) return std::nullopt;
  return "source hash mismatch: bundle was derived from " + hex64(inc.source_hash) +
         ", graph hashes to " + hex64(h);
}

namespace {

std::uint64_t content_hash(const IncompleteGraph& inc, const std::optional<std::vector<int>>& labels) {
  std::uint64_t h = hash_matrix(inc.observed_features);
  h = hash_edges(inc.observed_edges, h);
  h = hash_matrix(inc.masks.feature_mask, h);
  h = hash_edges(inc.masks.masked_edges, h);
  if (labels) {
    h = fnv1a({reinterpret_cast<const unsigned char*>(labels->data()), labels->size() * sizeof(int)},
              h);
  }
  return h;
}

}  // namespace

void save_bundle(const fs::path& dir, const IncompleteGraph& inc,
                 const std::optional<std::vector<int>>& labels) {
  fs::create_directories(dir);
  write_feature_file(dir / "features.txt", inc.observed_features);
  write_edge_file(dir / "edges.txt", inc.observed_edges);
  if (labels) write_label_file(dir / "labels.txt", *labels);
  write_edge_file(dir / "mask_edges.txt", inc.masks.masked_edges);

  // Masked feature entries as "row" (row-wise) or "row col" (element-wise) lines.
  {
    std::ofstream out(dir / "mask_features.txt");
    const Matrix& mx = inc.masks.feature_mask;
    for (Eigen::Index i = 0; i < mx.rows(); ++i) {
      if (inc.masks.mode == MaskMode::RowWise) {
        if (mx.cols() > 0 && mx(i, 0) == 0.0) out << i << '\n';
      } else {
        for (Eigen::Index j = 0; j < mx.cols(); ++j) {
          if (mx(i, j) == 0.0) out << i << ' ' << j << '\n';
        }
      }
    }
    if (!out) throw DataError("write failed: mask_features.txt");
  }

  KeyValues meta{{"format", "m2v-bundle-1"},
                 {"nodes", std::to_string(inc.num_nodes())},
                 {"dim", std::to_string(inc.dim())},
                 {"observed_edges", std::to_string(inc.observed_edges.size())},
                 {"masked_edges", std::to_string(inc.masks.masked_edges.size())},
                 {"mask_mode", to_string(inc.masks.mode)},
                 {"node_rate", format_double(inc.masks.node_rate)},
                 {"edge_rate", format_double(inc.masks.edge_rate)},
                 {"seed", std::to_string(inc.masks.seed)},
                 {"source_hash", hex64(inc.source_hash)},
                 {"content_hash", hex64(content_hash(inc, labels))},
                 {"has_labels", labels ? "1" : "0"}};
  write_key_values(dir / "meta.txt", meta);
}

Bundle load_bundle(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.txt";
  const KeyValues meta = read_key_values(meta_path);
  if (!meta.contains("format") || meta.at("format") != "m2v-bundle-1") {
    throw DataError(meta_path.string() + ": unrecognized bundle format");
  }
  const std::size_t n = parse_size(meta, "nodes", meta_path);
  const std::size_t d = parse_size(meta, "dim", meta_path);

  Bundle b;
  IncompleteGraph& inc = b.graph;
  inc.observed_features = read_feature_file(dir / "features.txt");
  if (static_cast<std::size_t>(inc.observed_features.rows()) != n ||
      (n > 0 && static_cast<std::size_t>(inc.observed_features.cols()) != d)) {
    throw DataError((dir / "features.txt").string() + ": expected " + std::to_string(n) + "x" +
                    std::to_string(d) + ", found " + shape_str(inc.observed_features) +
                    " (truncated?)");
  }
  inc.observed_features.conservativeResize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  inc.observed_edges = read_edge_file(dir / "edges.txt");
  if (inc.observed_edges.size() != parse_size(meta, "observed_edges", meta_path)) {
    throw DataError((dir / "edges.txt").string() + ": edge count differs from metadata (truncated?)");
  }
  inc.masks.masked_edges = read_edge_file(dir / "mask_edges.txt");
  if (inc.masks.masked_edges.size() != parse_size(meta, "masked_edges", meta_path)) {
    throw DataError((dir / "mask_edges.txt").string() +
                    ": edge count differs from metadata (truncated?)");
  }
  inc.masks.mode = parse_mask_mode(meta.at("mask_mode"));
  inc.masks.node_rate = std::stod(meta.at("node_rate"));
  inc.masks.edge_rate = std::stod(meta.at("edge_rate"));
  inc.masks.seed = std::stoull(meta.at("seed"));
  inc.source_hash = std::stoull(meta.at("source_hash"), nullptr, 16);

  inc.masks.feature_mask = Matrix::Ones(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  {
    TokenReader reader(dir / "mask_features.txt");
    std::vector<std::string_view> tokens;
    const std::size_t want = inc.masks.mode == MaskMode::RowWise ? 1 : 2;
    while (reader.next_line(tokens)) {
      if (tokens.size() != want) reader.fail("unexpected token count");
      const long long i = reader.parse_int(tokens[0]);
      if (i < 0 || static_cast<std::size_t>(i) >= n) reader.fail("row out of range", tokens[0]);
      if (want == 1) {
        inc.masks.feature_mask.row(static_cast<Eigen::Index>(i)).setZero();
      } else {
        const long long j = reader.parse_int(tokens[1]);
        if (j < 0 || static_cast<std::size_t>(j) >= d) reader.fail("column out of range", tokens[1]);
        inc.masks.feature_mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 0.0;
      }
    }
  }

  if (meta.at("has_labels") == "1") {
    b.labels = read_label_file(dir / "labels.txt");
    if (b.labels->size() != n) {
      throw DataError((dir / "labels.txt").string() + ": expected " + std::to_string(n) +
                      " labels, found " + std::to_string(b.labels->size()) + " (truncated?)");
    }
  }
  for (const auto* edges : {&inc.observed_edges, &inc.masks.masked_edges}) {
    for (const Edge& e : *edges) {
      if (e.u >= n || e.v >= n || e.u >= e.v) throw DataError(dir.string() + ": invalid edge in bundle");
    }
  }
  const std::uint64_t expect = std::stoull(meta.at("content_hash"), nullptr, 16);
  if (content_hash(inc, b.labels) != expect) {
    throw DataError(dir.string() + ": content hash mismatch (corrupt or partially written bundle)");
  }
  return b;
}

}  // namespace m2v
