#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geomattn/data.hpp"
#include "geomattn/model.hpp"
#include "geomattn/tensor.hpp"

namespace geomattn {

/// Retrieval features [n,d] aligned with identity, camera and optional track labels.
struct FeatureTable {
  std::vector<int> ids;
  std::vector<int> cameras;
  std::optional<std::vector<int>> tracks;
  Tensor features;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return features.dim(1); }
  /// Throws ShapeError when fields are misaligned.
  void validate() const;
};

/// Eval-mode features of every sample, in order.
FeatureTable extract_features(ReidModel& model, const Dataset& samples, std::size_t batch_size = 64);

/// Row-major [nq, ng] Euclidean distances.
std::vector<double> pairwise_distances(const FeatureTable& query, const FeatureTable& gallery);

struct EvalOptions {
  /// Exclude gallery entries sharing both identity and camera with the query.
  bool filter_same_camera = true;
  std::size_t max_rank = 50;
};

/// valid[i*ng + j] says whether gallery entry j may be ranked for query i.
std::vector<bool> filter_valid_gallery(const FeatureTable& query, const FeatureTable& gallery,
                                       const EvalOptions& options);

/// Mean of precision at each relevant rank; nullopt when nothing is relevant.
std::optional<double> average_precision(const std::vector<bool>& ranked_relevance);

struct RetrievalResult {
  double map = 0.0;
  /// cmc[k-1] = fraction of evaluated queries with a relevant entry in the top k.
  std::vector<double> cmc;
  std::vector<std::optional<double>> per_query_ap;
  std::size_t excluded_queries = 0;
};

RetrievalResult evaluate_image_to_image(const FeatureTable& query, const FeatureTable& gallery,
                                        const EvalOptions& options = {});

/// Tracks are ranked by the minimum distance over their valid member images.
RetrievalResult evaluate_image_to_track(const FeatureTable& query, const FeatureTable& gallery,
                                        const EvalOptions& options = {});

struct MetricsReport {
  double imap = 0.0;
  std::optional<double> tmap;
  std::vector<double> cmc;
  std::vector<std::optional<double>> per_query_ap;
  std::size_t excluded_queries = 0;
  std::size_t num_queries = 0;
  std::size_t num_gallery = 0;
  std::map<std::string, std::string> config;

  double top(std::size_t k) const { return cmc.at(k - 1); }
  std::string to_json() const;
};

MetricsReport evaluate(ReidModel& model, const Dataset& query, const Dataset& gallery,
                       const EvalOptions& options = {});

MetricsReport evaluate_tables(const FeatureTable& query, const FeatureTable& gallery,
                              const EvalOptions& options = {});

/// Expected AP of a uniformly random ranking of n entries with r relevant ones.
double expected_random_ap(std::size_t n, std::size_t r);

/// Mean of expected_random_ap over the queries that have a relevant valid gallery entry.
double expected_random_map(const FeatureTable& query, const FeatureTable& gallery, const EvalOptions& options = {});

/// Fraction of (image, k) pairs, over all four rotations of every image, whose rotation head
/// argmax equals k.
double rotation_accuracy(ReidModel& model, const Dataset& samples, std::size_t batch_size = 64);

/// Mean cosine between rot_k(Q(x)) and Q(rot_k(x)) over k = 1,2,3 and all images.
double rotation_consistency(ReidModel& model, std::span<const Tensor> images);

}  // namespace geomattn
