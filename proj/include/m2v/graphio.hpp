#pragma once

#include "m2v/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace m2v {

/// Undirected edge, stored with u < v.
struct Edge {
  std::size_t u = 0;
  std::size_t v = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

Edge make_edge(std::size_t a, std::size_t b);

struct EdgeCleanup {
  std::size_t self_loops = 0;
  std::size_t duplicates = 0;
};

/// Complete attributed graph: features, undirected edge set, optional labels.
struct AttributedGraph {
  Matrix features;                       // n x d
  std::vector<Edge> edges;               // sorted, unique, u < v
  std::optional<std::vector<int>> labels;  // 1 = anomaly

  std::size_t num_nodes() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  /// Dense symmetric 0/1 adjacency with zero diagonal.
  Matrix adjacency() const;
  std::uint64_t hash() const;

  /// Validates the edge list against `features` and canonicalizes it.
  /// Self loops and duplicates are dropped and counted in `cleanup`.
  static AttributedGraph build(Matrix features, const std::vector<Edge>& raw_edges,
                               std::optional<std::vector<int>> labels,
                               EdgeCleanup* cleanup = nullptr);
};

enum class MaskMode { RowWise, ElementWise };

std::string to_string(MaskMode mode);
MaskMode parse_mask_mode(const std::string& s);

struct ObservationMask {
  Matrix feature_mask;              // n x d, entries 0/1
  std::vector<Edge> masked_edges;   // sorted
  MaskMode mode = MaskMode::RowWise;
  double node_rate = 0.0;
  double edge_rate = 0.0;
  std::uint64_t seed = 0;
};

/// What the model sees: zero-filled features and the surviving edges.
struct IncompleteGraph {
  Matrix observed_features;
  std::vector<Edge> observed_edges;
  ObservationMask masks;
  std::uint64_t source_hash = 0;

  std::size_t num_nodes() const { return static_cast<std::size_t>(observed_features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(observed_features.cols()); }
  Matrix adjacency() const;
};

struct DatasetManifest {
  std::string name;
  std::filesystem::path features;
  std::filesystem::path edges;
  std::optional<std::filesystem::path> labels;
  std::size_t nodes = 0;
  std::size_t num_edges = 0;
  std::size_t dim = 0;
  std::size_t outliers = 0;

  /// Reads a `key = value` manifest; relative paths resolve against its directory.
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

// Text formats.
Matrix read_feature_file(const std::filesystem::path& path);
std::vector<Edge> read_edge_file(const std::filesystem::path& path);
std::vector<int> read_label_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const Matrix& x);
void write_edge_file(const std::filesystem::path& path, const std::vector<Edge>& edges);
void write_label_file(const std::filesystem::path& path, const std::vector<int>& labels);

struct LoadedGraph {
  AttributedGraph graph;
  EdgeCleanup cleanup;
};

/// Loads and validates against the manifest; any dimension mismatch is a DataError.
LoadedGraph load_graph(const DatasetManifest& manifest);

struct InjectionSpec {
  std::size_t clique_size = 15;
  std::size_t clique_count = 5;
  std::size_t contextual_count = 75;
  std::size_t candidate_pool = 50;

  /// Half structural, half contextual, cliques of `clique_size`.
  static InjectionSpec for_outlier_count(std::size_t outliers, std::size_t clique_size = 15,
                                         std::size_t candidate_pool = 50);
};

struct InjectionResult {
  AttributedGraph graph;
  std::vector<std::size_t> structural;
  std::vector<std::size_t> contextual;
};

InjectionResult inject_anomalies(const AttributedGraph& g, const InjectionSpec& spec,
                                 std::uint64_t seed);

ObservationMask make_masks(const AttributedGraph& g, double node_rate, double edge_rate,
                           MaskMode mode, std::uint64_t seed);

IncompleteGraph apply_masks(const AttributedGraph& g, const ObservationMask& m);

/// Returns a warning when `inc` was not derived from `g`.
std::optional<std::string> check_source(const IncompleteGraph& inc, const AttributedGraph& g);

// Bundle directory: features.txt, edges.txt, labels.txt (optional),
// mask_features.txt, mask_edges.txt, meta.txt.
struct Bundle {
  IncompleteGraph graph;
  std::optional<std::vector<int>> labels;
};

void save_bundle(const std::filesystem::path& dir, const IncompleteGraph& inc,
                 const std::optional<std::vector<int>>& labels);
Bundle load_bundle(const std::filesystem::path& dir);

/// floor(rate * count) with a guard against representation error in `rate`.
std::size_t floor_count(double rate, std::size_t count);

}  // namespace m2v
