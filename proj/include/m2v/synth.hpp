#pragma once

#include "m2v/graphio.hpp"

#include <filesystem>
#include <string>

namespace m2v {

// Stand-in datasets with the node, edge, dimension and outlier counts of the
// public benchmarks. They are generated, not downloaded, and carry no claim of
// matching the originals beyond those counts.

enum class SynthFeatures { BagOfWords, Continuous };

struct SynthSpec {
  std::string name;
  std::size_t nodes = 0;
  std::size_t edges = 0;
  std::size_t dim = 0;
  std::size_t classes = 1;
  double homophily = 0.8;      // fraction of edges drawn inside a class
  double degree_tail = 2.5;    // Pareto shape of the degree propensities
  SynthFeatures features = SynthFeatures::Continuous;
  std::size_t words_per_node = 18;
  std::size_t signature_words = 120;
  double signature_share = 0.6;
  double noise = 0.6;          // per-attribute noise for continuous features
  /// Planted anomalies (labelled datasets); zero leaves the graph unlabelled.
  std::size_t anomalies = 0;
  std::size_t anomaly_attrs = 0;
  double anomaly_shift = 0.0;  // in column standard deviations
  /// Outlier count written to the manifest (injected later when unlabelled).
  std::size_t manifest_outliers = 0;
};

/// "cora", "disney" or "books".
SynthSpec synth_preset(const std::string& name);

AttributedGraph synthesize(const SynthSpec& spec, std::uint64_t seed);

/// Erdős–Rényi edges with probability `edge_prob` and standard normal features.
AttributedGraph random_graph(std::size_t n, std::size_t d, double edge_prob, std::uint64_t seed);

/// Writes features/edges/labels plus `manifest.txt` under `dir`; returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& dir, const SynthSpec& spec,
                                    const AttributedGraph& g);

}  // namespace m2v
