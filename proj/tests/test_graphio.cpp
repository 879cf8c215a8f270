#include "m2v/graphio.hpp"
#include "m2v/synth.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace m2v;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("m2v_graphio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

AttributedGraph path_graph(std::size_t n, std::size_t d) {
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = static_cast<double>(k);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i + 1 < n; ++i) edges.push_back(Edge{i, i + 1});
  return AttributedGraph::build(std::move(x), edges, std::nullopt);
}

}  // namespace

TEST_CASE("build drops self loops and duplicates and canonicalizes order") {
  EdgeCleanup c;
  const auto g = AttributedGraph::build(Matrix::Zero(4, 2),
                                        {{2, 1}, {1, 2}, {3, 3}, {0, 3}, {1, 2}}, std::nullopt, &c);
  CHECK(c.self_loops == 1);
  CHECK(c.duplicates == 2);
  REQUIRE(g.edges.size() == 2);
  CHECK(g.edges[0] == Edge{0, 3});
  CHECK(g.edges[1] == Edge{1, 2});
  const Matrix a = g.adjacency();
  CHECK(a == a.transpose());
  CHECK(a.diagonal().isZero());
  CHECK(a.sum() == 4.0);
}

TEST_CASE("build rejects out-of-range edges and malformed labels") {
  CHECK_THROWS_AS(AttributedGraph::build(Matrix::Zero(3, 1), {{0, 3}}, std::nullopt), DataError);
  CHECK_THROWS_AS(AttributedGraph::build(Matrix::Zero(3, 1), {}, std::vector<int>{0, 1}), DataError);
  CHECK_THROWS_AS(AttributedGraph::build(Matrix::Zero(3, 1), {}, std::vector<int>{0, 1, 2}), DataError);
  Matrix bad = Matrix::Zero(2, 1);
  bad(1, 0) = std::nan("");
  CHECK_THROWS_AS(AttributedGraph::build(bad, {}, std::nullopt), DataError);
}

TEST_CASE("dataset files round-trip through a manifest") {
  const fs::path dir = scratch("roundtrip");
  SynthSpec spec = synth_preset("disney");
  const AttributedGraph g = synthesize(spec, 3);
  const fs::path manifest = write_dataset(dir, spec, g);
  const LoadedGraph loaded = load_graph(DatasetManifest::load(manifest));
  CHECK(loaded.graph.features == g.features);
  CHECK(loaded.graph.edges == g.edges);
  CHECK(loaded.graph.labels == g.labels);
  CHECK(loaded.graph.hash() == g.hash());
  fs::remove_all(dir);
}

TEST_CASE("manifest mismatches are data errors") {
  const fs::path dir = scratch("mismatch");
  SynthSpec spec = synth_preset("disney");
  const AttributedGraph g = synthesize(spec, 1);
  const fs::path path = write_dataset(dir, spec, g);
  const DatasetManifest good = DatasetManifest::load(path);

  DatasetManifest m = good;
  m.nodes += 1;
  CHECK_THROWS_AS(load_graph(m), DataError);
  m = good;
  m.dim -= 1;
  CHECK_THROWS_AS(load_graph(m), DataError);
  m = good;
  m.num_edges += 1;
  CHECK_THROWS_AS(load_graph(m), DataError);
  m = good;
  m.outliers += 1;
  CHECK_THROWS_AS(load_graph(m), DataError);

  std::ofstream(dir / "ragged.txt") << "1 2 3\n4 5\n";
  CHECK_THROWS_AS(read_feature_file(dir / "ragged.txt"), DataError);
  std::ofstream(dir / "badedge.txt") << "0 1\n2\n";
  CHECK_THROWS_AS(read_edge_file(dir / "badedge.txt"), DataError);
  std::ofstream(dir / "badlabel.txt") << "0\n3\n";
  CHECK_THROWS_AS(read_label_file(dir / "badlabel.txt"), DataError);
  CHECK_THROWS_AS(read_feature_file(dir / "missing.txt"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("outlier split puts half in cliques") {
  const auto s = InjectionSpec::for_outlier_count(150, 15);
  CHECK(s.clique_count == 5);
  CHECK(s.contextual_count == 75);
  const auto t = InjectionSpec::for_outlier_count(10, 3);
  CHECK(t.clique_count == 1);
  CHECK(t.contextual_count == 7);
  CHECK_THROWS_AS(InjectionSpec::for_outlier_count(10, 1), UsageError);
}

TEST_CASE("injection plants cliques and copies the farthest candidate") {
  const AttributedGraph g = random_graph(60, 5, 0.05, 17);
  InjectionSpec spec;
  spec.clique_size = 4;
  spec.clique_count = 2;
  spec.contextual_count = 6;
  spec.candidate_pool = 10;
  const InjectionResult r = inject_anomalies(g, spec, 9);
  REQUIRE(r.graph.labels);
  CHECK(std::count(r.graph.labels->begin(), r.graph.labels->end(), 1) == 14);
  CHECK(r.structural.size() == 8);
  CHECK(r.contextual.size() == 6);

  const std::set<Edge> edges(r.graph.edges.begin(), r.graph.edges.end());
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = a + 1; b < 4; ++b) {
        CHECK(edges.contains(make_edge(r.structural[c * 4 + a], r.structural[c * 4 + b])));
      }
    }
  }
  for (const Edge& e : g.edges) CHECK(edges.contains(e));

  for (std::size_t t : r.contextual) {
    const auto row = r.graph.features.row(static_cast<Eigen::Index>(t));
    bool copied = false;
    for (Eigen::Index i = 0; i < g.features.rows(); ++i) {
      if (static_cast<std::size_t>(i) != t && row == g.features.row(i)) copied = true;
    }
    CHECK(copied);
  }
  const InjectionResult again = inject_anomalies(g, spec, 9);
  CHECK(again.graph.hash() == r.graph.hash());
}

TEST_CASE("injection argument errors") {
  const AttributedGraph g = random_graph(10, 2, 0.2, 1);
  InjectionSpec spec;
  spec.clique_size = 5;
  spec.clique_count = 2;
  spec.contextual_count = 1;
  CHECK_THROWS_AS(inject_anomalies(g, spec, 0), DataError);
  spec.clique_count = 0;
  spec.candidate_pool = 10;
  CHECK_THROWS_AS(inject_anomalies(g, spec, 0), UsageError);
  spec.candidate_pool = 3;
  const auto labelled = inject_anomalies(g, spec, 0).graph;
  CHECK_THROWS_AS(inject_anomalies(labelled, spec, 0), UsageError);
}

TEST_CASE("row-wise masking hides floor(rate * n) rows") {
  const AttributedGraph g = synthesize(synth_preset("disney"), 2);
  const ObservationMask m = make_masks(g, 0.3, 0.2, MaskMode::RowWise, 5);
  std::size_t hidden = 0;
  for (Eigen::Index i = 0; i < m.feature_mask.rows(); ++i) {
    const double s = m.feature_mask.row(i).sum();
    CHECK((s == 0.0 || s == static_cast<double>(g.dim())));
    if (s == 0.0) ++hidden;
  }
  CHECK(hidden == 37);
  CHECK(m.masked_edges.size() == floor_count(0.2, g.edges.size()));
  CHECK(floor_count(0.29, 100) == 29);
}

TEST_CASE("element-wise masking hides floor(rate * n * d) entries") {
  const AttributedGraph g = path_graph(10, 7);
  const ObservationMask m = make_masks(g, 0.5, 0.0, MaskMode::ElementWise, 1);
  CHECK((m.feature_mask.array() == 0.0).count() == 35);
  CHECK(m.masked_edges.empty());
  CHECK_THROWS_AS(make_masks(g, 1.5, 0.0, MaskMode::RowWise, 1), UsageError);
  CHECK_THROWS_AS(make_masks(g, 0.1, -0.1, MaskMode::RowWise, 1), UsageError);
}

TEST_CASE("apply_masks zero-fills hidden entries and removes masked edges") {
  const AttributedGraph g = random_graph(40, 6, 0.15, 4);
  for (MaskMode mode : {MaskMode::RowWise, MaskMode::ElementWise}) {
    const ObservationMask m = make_masks(g, 0.4, 0.3, mode, 8);
    const IncompleteGraph inc = apply_masks(g, m);
    CHECK(inc.observed_features == g.features.cwiseProduct(m.feature_mask));
    CHECK(inc.observed_edges.size() + m.masked_edges.size() == g.edges.size());
    std::vector<Edge> merged = inc.observed_edges;
    merged.insert(merged.end(), m.masked_edges.begin(), m.masked_edges.end());
    std::sort(merged.begin(), merged.end());
    CHECK(merged == g.edges);
    CHECK_FALSE(check_source(inc, g));
    CHECK(check_source(inc, random_graph(40, 6, 0.15, 5)));
  }
  ObservationMask bad = make_masks(g, 0.1, 0.0, MaskMode::RowWise, 1);
  bad.masked_edges.push_back(Edge{0, 39});
  if (!std::binary_search(g.edges.begin(), g.edges.end(), Edge{0, 39})) {
    CHECK_THROWS_AS(apply_masks(g, bad), DataError);
  }
}

TEST_CASE("masks are deterministic in the seed") {
  const AttributedGraph g = random_graph(30, 4, 0.2, 2);
  const auto a = make_masks(g, 0.3, 0.3, MaskMode::RowWise, 11);
  const auto b = make_masks(g, 0.3, 0.3, MaskMode::RowWise, 11);
  const auto c = make_masks(g, 0.3, 0.3, MaskMode::RowWise, 12);
  CHECK(a.feature_mask == b.feature_mask);
  CHECK(a.masked_edges == b.masked_edges);
  CHECK((a.feature_mask != c.feature_mask || a.masked_edges != c.masked_edges));
}

TEST_CASE("bundles round-trip and detect truncation") {
  const AttributedGraph g = synthesize(synth_preset("disney"), 4);
  for (MaskMode mode : {MaskMode::RowWise, MaskMode::ElementWise}) {
    const fs::path dir = scratch("bundle_" + to_string(mode));
    const IncompleteGraph inc = apply_masks(g, make_masks(g, 0.3, 0.1, mode, 3));
    save_bundle(dir, inc, g.labels);
    const Bundle b = load_bundle(dir);
    CHECK(b.graph.observed_features == inc.observed_features);
    CHECK(b.graph.observed_edges == inc.observed_edges);
    CHECK(b.graph.masks.feature_mask == inc.masks.feature_mask);
    CHECK(b.graph.masks.masked_edges == inc.masks.masked_edges);
    CHECK(b.graph.masks.mode == mode);
    CHECK(b.graph.source_hash == inc.source_hash);
    CHECK(b.labels == g.labels);

    const auto edges = dir / "edges.txt";
    const auto size = fs::file_size(edges);
    fs::resize_file(edges, size / 2);
    CHECK_THROWS_AS(load_bundle(dir), DataError);
    fs::remove_all(dir);
  }
}

TEST_CASE("mask mode names parse") {
  CHECK(parse_mask_mode(to_string(MaskMode::RowWise)) == MaskMode::RowWise);
  CHECK(parse_mask_mode(to_string(MaskMode::ElementWise)) == MaskMode::ElementWise);
  CHECK_THROWS_AS(parse_mask_mode("diagonal"), UsageError);
}
