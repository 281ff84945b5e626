// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idea/autodiff.hpp"
#include "idea/errors.hpp"
#include "idea/log.hpp"

namespace idea {

enum class DistanceMetric { Cosine, Euclidean };

DistanceMetric distance_metric_from_string(const std::string& s);

/// Pairwise distances between query rows and gallery rows. Cosine distance is
/// 1 - q̂·ĝ on L2-normalised rows; a zero row is at distance 1 from everything.
template <typename DerivedQ, typename DerivedG>
MatrixX<typename DerivedQ::Scalar> distance_matrix(const Eigen::MatrixBase<DerivedQ>& query,
                                                   const Eigen::MatrixBase<DerivedG>& gallery, DistanceMetric metric) {
    using Scalar = typename DerivedQ::Scalar;
    if (query.cols() != gallery.cols()) throw ShapeMismatch("distance_matrix: feature widths differ");
    MatrixX<Scalar> d(query.rows(), gallery.rows());
    if (metric == DistanceMetric::Euclidean) {
        for (Eigen::Index i = 0; i < query.rows(); ++i)
            for (Eigen::Index j = 0; j < gallery.rows(); ++j) d(i, j) = (query.row(i) - gallery.row(j)).norm();
        return d;
    }
    auto normalise = [](const auto& m, bool& saw_zero) {
        MatrixX<Scalar> out = m;
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            const Scalar n = out.row(i).norm();
            if (n > Scalar(0)) {
                out.row(i) /= n;
            } else {
                saw_zero = true;
            }
        }
        return out;
    };
    bool saw_zero = false;
    const MatrixX<Scalar> qn = normalise(query, saw_zero);
    const MatrixX<Scalar> gn = normalise(gallery, saw_zero);
    if (saw_zero) log_warning("distance_matrix: zero feature vector under cosine metric, treated as distance 1");
    d = (MatrixX<Scalar>::Ones(query.rows(), gallery.rows()) - qn * gn.transpose());
    return d;
}

struct RetrievalResult {
    double mAP = 0.0;
    std::vector<int> ranks;           // requested ranks, e.g. {1, 5, 10}
    std::vector<double> cmc;          // CMC at each requested rank
    std::vector<double> cmc_curve;    // CMC at every rank 1..Ng
    std::vector<double> per_query_ap; // valid queries only, in query order
    std::vector<int> skipped_queries; // queries without a valid gallery match
    int num_valid_queries = 0;

    /// CMC at rank k (1-based), from the full curve.
    double rank(int k) const;
};

/// Gallery indices for one query, ascending distance, with entries of the
/// same identity AND camera removed. Ties are ordered canonically by
/// (identity, camera) and then by index, so the ranking does not depend on
/// gallery order.
std::vector<int> ranked_gallery(std::span<const double> distances, int query_id, int query_cam, std::span<const int> gallery_ids,
                                std::span<const int> gallery_cams);

/// Cross-camera mAP and CMC.
RetrievalResult cmc_map(const Eigen::MatrixXd& dist, std::span<const int> query_ids, std::span<const int> gallery_ids,
                        std::span<const int> query_cams, std::span<const int> gallery_cams, std::vector<int> ranks = {1, 5, 10});

/// Query or gallery side of an evaluation split.
struct EvalSet {
    std::vector<std::string> sample_ids;
    std::vector<int> identities;
    std::vector<int> cameras;
};

struct RankEntry {
    std::string sample_id;
    int identity = 0;
    int camera = 0;
    double distance = 0.0;
    bool match = false;
};

/// The top_n ranked gallery entries (after the same-identity-same-camera
/// filter) for one query, with match flags.
std::vector<RankEntry> rank_list(const Eigen::MatrixXd& dist, const EvalSet& query, const EvalSet& gallery,
                                 const std::string& query_sample_id, int top_n);

void to_json(nlohmann::json& j, const RankEntry& e);

/// {variant, seed, mAP, cmc{1,5,10}, num_valid_queries}
nlohmann::json results_json(const RetrievalResult& r, const std::string& variant, std::uint64_t seed);

}  // namespace idea
