// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/retrieval.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

namespace idea {

DistanceMetric distance_metric_from_string(const std::string& s) {
    if (s == "cosine") return DistanceMetric::Cosine;
    if (s == "euclidean") return DistanceMetric::Euclidean;
    throw ConfigError("unknown distance metric: " + s);
}

double RetrievalResult::rank(int k) const {
    if (cmc_curve.empty() || k < 1) return 0.0;
    return cmc_curve[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(cmc_curve.size())) - 1)];
}

std::vector<int> ranked_gallery(std::span<const double> distances, int query_id, int query_cam, std::span<const int> gallery_ids,
                                std::span<const int> gallery_cams) {
    std::vector<int> order;
    order.reserve(distances.size());
    for (std::size_t j = 0; j < distances.size(); ++j)
        if (!(gallery_ids[j] == query_id && gallery_cams[j] == query_cam)) order.push_back(static_cast<int>(j));
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return std::tuple(distances[a], gallery_ids[a], gallery_cams[a], a) <
               std::tuple(distances[b], gallery_ids[b], gallery_cams[b], b);
    });
    return order;
}

RetrievalResult cmc_map(const Eigen::MatrixXd& dist, std::span<const int> query_ids, std::span<const int> gallery_ids,
                        std::span<const int> query_cams, std::span<const int> gallery_cams, std::vector<int> ranks) {
    const auto nq = static_cast<std::size_t>(dist.rows());
    const auto ng = static_cast<std::size_t>(dist.cols());
    if (ng == 0) throw EmptyGallery("cmc_map: empty gallery");
    if (query_ids.size() != nq || query_cams.size() != nq || gallery_ids.size() != ng || gallery_cams.size() != ng)
        throw ShapeMismatch("cmc_map: label arrays do not match the distance matrix");

    RetrievalResult r;
    r.ranks = std::move(ranks);
    r.cmc_curve.assign(ng, 0.0);
    std::vector<double> row(ng);
    for (std::size_t q = 0; q < nq; ++q) {
        for (std::size_t j = 0; j < ng; ++j) row[j] = dist(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(j));
        const auto order = ranked_gallery(row, query_ids[q], query_cams[q], gallery_ids, gallery_cams);
        int hits = 0;
        double precision_sum = 0.0;
        int first_hit = -1;
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            if (gallery_ids[order[pos]] != query_ids[q]) continue;
            ++hits;
            precision_sum += double(hits) / double(pos + 1);
            if (first_hit < 0) first_hit = static_cast<int>(pos);
        }
        if (hits == 0) {
            r.skipped_queries.push_back(static_cast<int>(q));
            continue;
        }
        r.per_query_ap.push_back(precision_sum / hits);
        for (std::size_t k = static_cast<std::size_t>(first_hit); k < ng; ++k) r.cmc_curve[k] += 1.0;
    }
    r.num_valid_queries = static_cast<int>(r.per_query_ap.size());
    if (r.num_valid_queries > 0) {
        r.mAP = std::accumulate(r.per_query_ap.begin(), r.per_query_ap.end(), 0.0) / r.num_valid_queries;
        for (double& c : r.cmc_curve) c /= r.num_valid_queries;
    } else {
        log_warning("cmc_map: no query has a valid gallery match");
    }
    for (int k : r.ranks) r.cmc.push_back(r.rank(k));
    return r;
}

std::vector<RankEntry> rank_list(const Eigen::MatrixXd& dist, const EvalSet& query, const EvalSet& gallery,
                                 const std::string& query_sample_id, int top_n) {
    const auto it = std::find(query.sample_ids.begin(), query.sample_ids.end(), query_sample_id);
    if (it == query.sample_ids.end()) throw UnknownQuery("query not in split: " + query_sample_id);
    const auto q = static_cast<Eigen::Index>(it - query.sample_ids.begin());
    std::vector<double> row(static_cast<std::size_t>(dist.cols()));
    for (Eigen::Index j = 0; j < dist.cols(); ++j) row[static_cast<std::size_t>(j)] = dist(q, j);
    const auto order = ranked_gallery(row, query.identities[q], query.cameras[q], gallery.identities, gallery.cameras);
    std::vector<RankEntry> out;
    const auto n = std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(top_n, 0)));
    for (std::size_t i = 0; i < n; ++i) {
        const int g = order[i];
        out.push_back(RankEntry{gallery.sample_ids[g], gallery.identities[g], gallery.cameras[g], row[g],
                                gallery.identities[g] == query.identities[q]});
    }
    return out;
}

void to_json(nlohmann::json& j, const RankEntry& e) {
    j = nlohmann::json{{"sample_id", e.sample_id}, {"identity", e.identity}, {"camera", e.camera},
                       {"distance", e.distance},   {"match", e.match}};
}

nlohmann::json results_json(const RetrievalResult& r, const std::string& variant, std::uint64_t seed) {
    return nlohmann::json{{"variant", variant},
                          {"seed", seed},
                          {"mAP", r.mAP},
                          {"cmc", {{"1", r.rank(1)}, {"5", r.rank(5)}, {"10", r.rank(10)}}},
                          {"num_valid_queries", r.num_valid_queries}};
}

}  // namespace idea
