#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "tscm/data.hpp"
#include "tscm/models.hpp"

namespace tscm {

/// Immutable matrix of unit-norm float32 descriptors with ids and
/// locations. Queries never mutate it; concurrent searches are safe.
struct DescriptorDatabase {
    std::vector<std::int64_t> ids;
    std::vector<std::array<double, 2>> locations;
    std::size_t width = 0;
    std::vector<float> matrix;  // row-major size() x width
    std::uint64_t checkpoint_hash = 0;

    std::size_t size() const { return ids.size(); }
    std::span<const float> row(std::size_t i) const {
        return {matrix.data() + i * width, width};
    }
    void validate() const;  // unit-norm rows, unique ids
};

struct Neighbor {
    std::int64_t id = 0;
    double distance = 0.0;  // Euclidean, ascending
};

struct QueryResult {
    std::vector<Neighbor> neighbors;
    double elapsed_us = 0.0;
};

/// One descriptor per database-split sample; metadata records the
/// checkpoint provenance hash.
DescriptorDatabase build_database(const std::vector<const PlaceSample*>& samples,
                                  const Checkpoint& model, std::uint64_t checkpoint_hash = 0);

/// Exact top-n by Euclidean distance, ties broken by lower id. Distances
/// accumulate in double over the float32 values, matching the naive
/// double-loop definition term for term.
QueryResult knn_search(const DescriptorDatabase& db, std::span<const float> query,
                       std::size_t n);
QueryResult knn_search(const DescriptorDatabase& db, const Descriptor& query, std::size_t n);

/// Relevant database ids per query, aligned with the query list. Queries
/// with an empty set are excluded from every metric and counted.
using RelevantSets = std::vector<std::vector<std::int64_t>>;

double recall_at_n(const std::vector<QueryResult>& results, const RelevantSets& relevant,
                   std::size_t n, std::size_t* excluded = nullptr);
/// AP@N per query = sum_{k<=N} precision@k * rel(k) / min(N, #relevant),
/// averaged over queries.
double map_at_n(const std::vector<QueryResult>& results, const RelevantSets& relevant,
                std::size_t n);
/// Global AP over the pooled ranked list of every (query, candidate) pair
/// by ascending distance.
double average_precision(const std::vector<QueryResult>& results,
                         const RelevantSets& relevant);

struct EvalReport {
    std::map<std::size_t, double> recall;  // N -> fraction
    std::map<std::size_t, double> map_at;  // N -> mAP@N
    double ap = 0.0;
    std::size_t query_count = 0;
    std::size_t database_size = 0;
    std::size_t excluded_queries = 0;
    double match_median_us = 0.0;
    double match_p95_us = 0.0;

    nlohmann::json to_json() const;
};

/// Full evaluation: ranks every query against the whole database once and
/// derives recall@N, mAP@N, and global AP from the same rankings.
EvalReport evaluate(const DescriptorDatabase& db,
                    const std::vector<std::vector<float>>& queries,
                    const RelevantSets& relevant,
                    const std::vector<std::size_t>& ns = {1, 5, 10});

/// Ground truth by shared place_id (synthetic data) or within a radius in
/// meters of the query location (location-tagged data).
RelevantSets ground_truth_by_place(const std::vector<const PlaceSample*>& db_samples,
                                   const std::vector<const PlaceSample*>& queries);
RelevantSets ground_truth_by_radius(const DescriptorDatabase& db,
                                    const std::vector<const PlaceSample*>& queries,
                                    double r_gt = 25.0);

void save_database(const std::filesystem::path& path, const DescriptorDatabase& db);
DescriptorDatabase load_database(const std::filesystem::path& path);

struct MatchBench {
    double median_us = 0.0;
    double p95_us = 0.0;
    double serial_qps = 0.0;
    std::size_t threads = 1;
    double threaded_qps = 0.0;
    std::size_t queries = 0;
    std::size_t repetitions = 0;
};

struct GenBench {
    double median_us = 0.0;
    double p95_us = 0.0;
    std::size_t images = 0;
    std::size_t repetitions = 0;
};

/// Single-threaded per-query matching latency over repetitions, plus a
/// separate multi-query throughput figure (threads from the argument).
MatchBench bench_matching(const DescriptorDatabase& db,
                          const std::vector<std::vector<float>>& queries,
                          std::size_t repetitions, std::size_t threads = 1);
GenBench bench_generation(const Checkpoint& model, const std::vector<const PlaceSample*>& images,
                          std::size_t repetitions);

}  // namespace tscm
