#include "geomattn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "geomattn/error.hpp"
#include "geomattn/image.hpp"
#include "geomattn/ops.hpp"
#include "json.hpp"

namespace geomattn {

namespace {

std::vector<std::size_t> rank_by_distance(std::span<const double> row, const std::vector<std::size_t>& candidates) {
  std::vector<std::size_t> order = candidates;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  return order;
}

RetrievalResult summarize(std::vector<std::optional<double>> aps, std::vector<std::optional<std::size_t>> first_hit,
                          std::size_t max_rank) {
  RetrievalResult r;
  r.cmc.assign(max_rank, 0.0);
  std::size_t evaluated = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < aps.size(); ++i) {
    if (!aps[i]) {
      ++r.excluded_queries;
      continue;
    }
    ++evaluated;
    sum += *aps[i];
    for (std::size_t k = *first_hit[i]; k < max_rank; ++k) r.cmc[k] += 1.0;
  }
  if (evaluated > 0) {
    r.map = sum / static_cast<double>(evaluated);
    for (double& c : r.cmc) c /= static_cast<double>(evaluated);
  }
  r.per_query_ap = std::move(aps);
  return r;
}

void check_tables(const FeatureTable& q, const FeatureTable& g) {
  q.validate();
  g.validate();
  if (g.size() == 0) throw DataError("evaluation needs a non-empty gallery");
  if (q.size() > 0 && q.dim() != g.dim()) {
    throw ShapeError("query features have dimension " + std::to_string(q.dim()) + ", gallery " +
                     std::to_string(g.dim()));
  }
}

// The means are undefined when every query would be excluded.
void require_some_relevant(const FeatureTable& q, const FeatureTable& g, const std::vector<bool>& valid) {
  const std::size_t nq = q.size(), ng = g.size();
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < ng; ++j)
      if (valid[i * ng + j] && g.ids[j] == q.ids[i]) return;
  if (nq > 0) throw DataError("no query has a relevant entry in the valid gallery");
}

}  // namespace

void FeatureTable::validate() const {
  if (cameras.size() != ids.size()) throw ShapeError("feature table: camera count differs from id count");
  if (tracks && tracks->size() != ids.size()) throw ShapeError("feature table: track count differs from id count");
  if (ids.empty()) return;
  if (features.rank() != 2 || features.dim(0) != ids.size()) {
    throw ShapeError("feature table: features must be [n,d] with n = " + std::to_string(ids.size()));
  }
}

FeatureTable extract_features(ReidModel& model, const Dataset& samples, std::size_t batch_size) {
  FeatureTable t;
  bool tracks = has_tracks(samples);
  if (tracks) t.tracks.emplace();
  std::vector<double> feats;
  std::size_t d = model.config().reid_feature_dim();
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<Tensor> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(samples[i].image);
    Tensor f = model.extract_reid_feature(stack_images(images));
    feats.insert(feats.end(), f.data().begin(), f.data().end());
  }
  for (const auto& s : samples) {
    t.ids.push_back(s.identity);
    t.cameras.push_back(s.camera);
    if (tracks) t.tracks->push_back(*s.track);
  }
  t.features = Tensor({samples.size(), d}, std::move(feats));
  return t;
}

std::vector<double> pairwise_distances(const FeatureTable& query, const FeatureTable& gallery) {
  if (query.features.rank() != 2 || gallery.features.rank() != 2 || query.dim() != gallery.dim()) {
    throw ShapeError("pairwise distances need [nq,d] and [ng,d] with equal d");
  }
  const std::size_t nq = query.features.dim(0), ng = gallery.features.dim(0), d = query.dim();
  auto q = query.features.data();
  auto g = gallery.features.data();
  std::vector<double> out(nq * ng);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = q[i * d + k] - g[j * d + k];
        ss += diff * diff;
      }
      out[i * ng + j] = std::sqrt(ss);
    }
  }
  return out;
}

std::vector<bool> filter_valid_gallery(const FeatureTable& query, const FeatureTable& gallery,
                                       const EvalOptions& options) {
  const std::size_t nq = query.size(), ng = gallery.size();
  std::vector<bool> valid(nq * ng, true);
  if (!options.filter_same_camera) return valid;
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < ng; ++j)
      if (query.ids[i] == gallery.ids[j] && query.cameras[i] == gallery.cameras[j]) valid[i * ng + j] = false;
  return valid;
}

std::optional<double> average_precision(const std::vector<bool>& ranked_relevance) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < ranked_relevance.size(); ++r) {
    if (!ranked_relevance[r]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

RetrievalResult evaluate_image_to_image(const FeatureTable& query, const FeatureTable& gallery,
                                        const EvalOptions& options) {
  check_tables(query, gallery);
  const std::size_t nq = query.size(), ng = gallery.size();
  const std::vector<double> dist = pairwise_distances(query, gallery);
  const std::vector<bool> valid = filter_valid_gallery(query, gallery, options);
  require_some_relevant(query, gallery, valid);
  std::vector<std::optional<double>> aps(nq);
  std::vector<std::optional<std::size_t>> first_hit(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<std::size_t> candidates;
    for (std::size_t j = 0; j < ng; ++j)
      if (valid[i * ng + j]) candidates.push_back(j);
    const auto order = rank_by_distance(std::span(dist).subspan(i * ng, ng), candidates);
    std::vector<bool> rel(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
      rel[r] = gallery.ids[order[r]] == query.ids[i];
      if (rel[r] && !first_hit[i]) first_hit[i] = r;
    }
    aps[i] = average_precision(rel);
  }
  return summarize(std::move(aps), std::move(first_hit), options.max_rank);
}

RetrievalResult evaluate_image_to_track(const FeatureTable& query, const FeatureTable& gallery,
                                        const EvalOptions& options) {
  check_tables(query, gallery);
  if (!gallery.tracks) throw DataError("image-to-track evaluation needs gallery track ids");
  const std::size_t nq = query.size(), ng = gallery.size();
  const std::vector<int>& tracks = *gallery.tracks;

  // Tracks in order of first appearance; each must hold a single identity.
  std::vector<int> track_ids;
  std::map<int, std::size_t> track_index;
  std::vector<int> track_identity;
  std::vector<std::size_t> member_track(ng);
  for (std::size_t j = 0; j < ng; ++j) {
    auto [it, inserted] = track_index.emplace(tracks[j], track_ids.size());
    if (inserted) {
      track_ids.push_back(tracks[j]);
      track_identity.push_back(gallery.ids[j]);
    } else if (track_identity[it->second] != gallery.ids[j]) {
      throw DataError("track " + std::to_string(tracks[j]) + " mixes identities");
    }
    member_track[j] = it->second;
  }
  const std::size_t nt = track_ids.size();

  const std::vector<double> dist = pairwise_distances(query, gallery);
  const std::vector<bool> valid = filter_valid_gallery(query, gallery, options);
  require_some_relevant(query, gallery, valid);
  std::vector<std::optional<double>> aps(nq);
  std::vector<std::optional<std::size_t>> first_hit(nq);
  std::vector<double> track_dist(nt);
  std::vector<bool> track_valid(nt);
  for (std::size_t i = 0; i < nq; ++i) {
    std::fill(track_dist.begin(), track_dist.end(), std::numeric_limits<double>::infinity());
    std::fill(track_valid.begin(), track_valid.end(), false);
    for (std::size_t j = 0; j < ng; ++j) {
      if (!valid[i * ng + j]) continue;
      const std::size_t t = member_track[j];
      track_valid[t] = true;
      track_dist[t] = std::min(track_dist[t], dist[i * ng + j]);
    }
    std::vector<std::size_t> candidates;
    for (std::size_t t = 0; t < nt; ++t)
      if (track_valid[t]) candidates.push_back(t);
    const auto order = rank_by_distance(track_dist, candidates);
    std::vector<bool> rel(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
      rel[r] = track_identity[order[r]] == query.ids[i];
      if (rel[r] && !first_hit[i]) first_hit[i] = r;
    }
    aps[i] = average_precision(rel);
  }
  return summarize(std::move(aps), std::move(first_hit), options.max_rank);
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["imAP"] = imap;
  if (tmap) j["tmAP"] = *tmap;
  nlohmann::ordered_json curve = nlohmann::ordered_json::object();
  for (std::size_t k = 1; k <= cmc.size(); ++k) curve[std::to_string(k)] = cmc[k - 1];
  j["cmc"] = curve;
  if (!cmc.empty()) j["top1"] = cmc[0];
  if (cmc.size() >= 5) j["top5"] = cmc[4];
  j["excluded_queries"] = excluded_queries;
  j["num_queries"] = num_queries;
  j["num_gallery"] = num_gallery;
  nlohmann::ordered_json ap = nlohmann::ordered_json::array();
  for (const auto& a : per_query_ap) {
    if (a) {
      ap.push_back(*a);
    } else {
      ap.push_back(nullptr);
    }
  }
  j["per_query_ap"] = ap;
  nlohmann::ordered_json c = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config) c[k] = v;
  j["config"] = c;
  return j.dump(2);
}

MetricsReport evaluate_tables(const FeatureTable& query, const FeatureTable& gallery, const EvalOptions& options) {
  const RetrievalResult images = evaluate_image_to_image(query, gallery, options);
  MetricsReport report;
  report.imap = images.map;
  report.cmc = images.cmc;
  report.per_query_ap = images.per_query_ap;
  report.excluded_queries = images.excluded_queries;
  report.num_queries = query.size();
  report.num_gallery = gallery.size();
  if (gallery.tracks) report.tmap = evaluate_image_to_track(query, gallery, options).map;
  return report;
}

MetricsReport evaluate(ReidModel& model, const Dataset& query, const Dataset& gallery, const EvalOptions& options) {
  return evaluate_tables(extract_features(model, query), extract_features(model, gallery), options);
}

double expected_random_ap(std::size_t n, std::size_t r) {
  if (r == 0 || r > n) throw ConfigError("expected_random_ap needs 0 < r <= n");
  if (n == 1) return 1.0;
  double harmonic = 0.0;
  for (std::size_t i = 1; i <= n; ++i) harmonic += 1.0 / static_cast<double>(i);
  const auto nd = static_cast<double>(n), rd = static_cast<double>(r);
  return (rd - 1.0) / (nd - 1.0) + harmonic * (nd - rd) / (nd * (nd - 1.0));
}

double expected_random_map(const FeatureTable& query, const FeatureTable& gallery, const EvalOptions& options) {
  const std::size_t nq = query.size(), ng = gallery.size();
  const std::vector<bool> valid = filter_valid_gallery(query, gallery, options);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < nq; ++i) {
    std::size_t n = 0, r = 0;
    for (std::size_t j = 0; j < ng; ++j) {
      if (!valid[i * ng + j]) continue;
      ++n;
      if (gallery.ids[j] == query.ids[i]) ++r;
    }
    if (r == 0) continue;
    sum += expected_random_ap(n, r);
    ++count;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

double rotation_accuracy(ReidModel& model, const Dataset& samples, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::size_t correct = 0, total = 0;
  for (int k = 0; k < 4; ++k) {
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
      const std::size_t end = std::min(samples.size(), start + batch_size);
      std::vector<Tensor> images;
      for (std::size_t i = start; i < end; ++i) images.push_back(rotate_image(samples[i].image, k));
      const Tensor logits = model.ssl_branch(stack_images(images), Mode::eval);
      auto z = logits.data();
      for (std::size_t i = 0; i < end - start; ++i) {
        const auto row = z.subspan(i * 4, 4);
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += best == k ? 1 : 0;
        ++total;
      }
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

double rotation_consistency(ReidModel& model, std::span<const Tensor> images) {
  NoGradGuard no_grad;
  if (images.empty()) return 0.0;
  double sum = 0.0;
  std::size_t count = 0;
  for (const Tensor& img : images) {
    const Tensor base = model.attention_map(stack_images(std::span(&img, 1)), Mode::eval).q;
    const std::size_t h = base.dim(1), w = base.dim(2);
    const Tensor base_map = reshape(base, {1, h, w});
    for (int k = 1; k < 4; ++k) {
      const Tensor rotated_mask = rotate_image(base_map, k);
      const Tensor rot_img = rotate_image(img, k);
      const Tensor mask_of_rotated = model.attention_map(stack_images(std::span(&rot_img, 1)), Mode::eval).q;
      auto a = rotated_mask.data();
      auto b = mask_of_rotated.data();
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
      }
      sum += dot / std::max(1e-300, std::sqrt(na * nb));
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace geomattn
