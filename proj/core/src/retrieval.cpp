#include "tscm/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "tscm/binary_io.hpp"

namespace tscm {

namespace {
constexpr char kDbMagic[8] = {'T', 'S', 'C', 'M', 'D', 'E', 'S', 'C'};
constexpr std::uint32_t kDbVersion = 1;

double percentile(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double idx = p * double(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double t = idx - double(lo);
    return v[lo] * (1.0 - t) + v[hi] * t;
}
}  // namespace

void DescriptorDatabase::validate() const {
    if (matrix.size() != size() * width || locations.size() != size())
        throw DataError("descriptor database: inconsistent table sizes");
    std::set<std::int64_t> seen;
    for (std::size_t i = 0; i < size(); ++i) {
        if (!seen.insert(ids[i]).second)
            throw DataError("descriptor database: duplicate id " + std::to_string(ids[i]));
        double sq = 0.0;
        for (float v : row(i)) sq += double(v) * double(v);
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6)
            throw DataError("descriptor database: row " + std::to_string(i) +
                            " not unit norm");
    }
}

DescriptorDatabase build_database(const std::vector<const PlaceSample*>& samples,
                                  const Checkpoint& model, std::uint64_t checkpoint_hash) {
    DescriptorDatabase db;
    db.width = model.descriptor_width();
    db.checkpoint_hash = checkpoint_hash;
    db.ids.reserve(samples.size());
    db.matrix.reserve(samples.size() * db.width);
    for (const PlaceSample* s : samples) {
        const Descriptor d = model.infer(s->image);
        if (d.width() != db.width)
            throw NumericError("build_database: descriptor width drifted");
        db.ids.push_back(s->id);
        db.locations.push_back({s->x, s->y});
        for (double v : d.v) db.matrix.push_back(static_cast<float>(v));
    }
    db.validate();
    return db;
}

QueryResult knn_search(const DescriptorDatabase& db, std::span<const float> query,
                       std::size_t n) {
    if (db.size() == 0) throw DataError("knn_search: empty database");
    if (query.size() != db.width)
        throw DimensionError("knn_search: query width " + std::to_string(query.size()) +
                             " != database width " + std::to_string(db.width));
    if (n > db.size())
        throw ConfigError("knn_search: requested " + std::to_string(n) + " of " +
                          std::to_string(db.size()) + " rows");

    const auto start = std::chrono::steady_clock::now();
    // worst candidate on top; (distance, id) ascending order overall
    struct Entry {
        double d2;
        std::int64_t id;
    };
    auto worse = [](const Entry& a, const Entry& b) {
        return a.d2 < b.d2 || (a.d2 == b.d2 && a.id < b.id);
    };
    std::vector<Entry> heap;
    heap.reserve(n + 1);
    const float* q = query.data();
    for (std::size_t i = 0; i < db.size(); ++i) {
        const float* r = db.matrix.data() + i * db.width;
        double d2 = 0.0;
        for (std::size_t j = 0; j < db.width; ++j) {
            const double diff = double(r[j]) - double(q[j]);
            d2 += diff * diff;
        }
        const Entry e{d2, db.ids[i]};
        if (heap.size() < n) {
            heap.push_back(e);
            std::push_heap(heap.begin(), heap.end(), worse);
        } else if (worse(e, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), worse);
            heap.back() = e;
            std::push_heap(heap.begin(), heap.end(), worse);
        }
    }
    std::sort_heap(heap.begin(), heap.end(), worse);
    QueryResult res;
    res.neighbors.reserve(heap.size());
    for (const Entry& e : heap) res.neighbors.push_back({e.id, std::sqrt(e.d2)});
    res.elapsed_us = std::chrono::duration<double, std::micro>(
                         std::chrono::steady_clock::now() - start)
                         .count();
    return res;
}

QueryResult knn_search(const DescriptorDatabase& db, const Descriptor& query, std::size_t n) {
    std::vector<float> q(query.v.begin(), query.v.end());
    return knn_search(db, q, n);
}

double recall_at_n(const std::vector<QueryResult>& results, const RelevantSets& relevant,
                   std::size_t n, std::size_t* excluded) {
    if (results.size() != relevant.size())
        throw ConfigError("recall_at_n: results/ground-truth size mismatch");
    std::size_t hits = 0, considered = 0, skipped = 0;
    for (std::size_t qi = 0; qi < results.size(); ++qi) {
        if (relevant[qi].empty()) {
            ++skipped;
            continue;
        }
        ++considered;
        const auto& nb = results[qi].neighbors;
        const std::size_t top = std::min(n, nb.size());
        for (std::size_t k = 0; k < top; ++k) {
            if (std::find(relevant[qi].begin(), relevant[qi].end(), nb[k].id) !=
                relevant[qi].end()) {
                ++hits;
                break;
            }
        }
    }
    if (excluded) *excluded = skipped;
    return considered ? double(hits) / double(considered) : 0.0;
}

double map_at_n(const std::vector<QueryResult>& results, const RelevantSets& relevant,
                std::size_t n) {
    if (results.size() != relevant.size())
        throw ConfigError("map_at_n: results/ground-truth size mismatch");
    double sum = 0.0;
    std::size_t considered = 0;
    for (std::size_t qi = 0; qi < results.size(); ++qi) {
        if (relevant[qi].empty()) continue;
        ++considered;
        const auto& nb = results[qi].neighbors;
        const std::size_t top = std::min(n, nb.size());
        double ap = 0.0;
        std::size_t rel_seen = 0;
        for (std::size_t k = 0; k < top; ++k) {
            const bool rel = std::find(relevant[qi].begin(), relevant[qi].end(),
                                       nb[k].id) != relevant[qi].end();
            if (rel) {
                ++rel_seen;
                ap += double(rel_seen) / double(k + 1);
            }
        }
        sum += ap / double(std::min(n, relevant[qi].size()));
    }
    return considered ? sum / double(considered) : 0.0;
}

double average_precision(const std::vector<QueryResult>& results,
                         const RelevantSets& relevant) {
    if (results.size() != relevant.size())
        throw ConfigError("average_precision: results/ground-truth size mismatch");
    struct Pair {
        double distance;
        std::size_t query;
        std::int64_t id;
        bool rel;
    };
    std::vector<Pair> pool;
    std::size_t total_relevant = 0;
    for (std::size_t qi = 0; qi < results.size(); ++qi) {
        if (relevant[qi].empty()) continue;
        total_relevant += relevant[qi].size();
        for (const Neighbor& nb : results[qi].neighbors) {
            const bool rel = std::find(relevant[qi].begin(), relevant[qi].end(), nb.id) !=
                             relevant[qi].end();
            pool.push_back({nb.distance, qi, nb.id, rel});
        }
    }
    if (pool.empty() || total_relevant == 0) return 0.0;
    std::sort(pool.begin(), pool.end(), [](const Pair& a, const Pair& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        if (a.query != b.query) return a.query < b.query;
        return a.id < b.id;
    });
    double ap = 0.0;
    std::size_t rel_seen = 0;
    for (std::size_t k = 0; k < pool.size(); ++k) {
        if (!pool[k].rel) continue;
        ++rel_seen;
        ap += double(rel_seen) / double(k + 1);
    }
    return ap / double(total_relevant);
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    for (const auto& [n, v] : recall) j["recall"][std::to_string(n)] = v;
    for (const auto& [n, v] : map_at) j["map"][std::to_string(n)] = v;
    j["ap"] = ap;
    j["query_count"] = query_count;
    j["database_size"] = database_size;
    j["excluded_queries"] = excluded_queries;
    j["timing"] = {{"match_median_us", match_median_us}, {"match_p95_us", match_p95_us}};
    return j;
}

EvalReport evaluate(const DescriptorDatabase& db,
                    const std::vector<std::vector<float>>& queries,
                    const RelevantSets& relevant, const std::vector<std::size_t>& ns) {
    if (queries.size() != relevant.size())
        throw ConfigError("evaluate: query/ground-truth size mismatch");
    std::vector<QueryResult> results;
    results.reserve(queries.size());
    std::vector<double> times;
    for (const auto& q : queries) {
        results.push_back(knn_search(db, q, db.size()));
        times.push_back(results.back().elapsed_us);
    }
    EvalReport report;
    report.query_count = queries.size();
    report.database_size = db.size();
    for (std::size_t n : ns) {
        const std::size_t capped = std::min(n, db.size());
        report.recall[n] = recall_at_n(results, relevant, capped, &report.excluded_queries);
        report.map_at[n] = map_at_n(results, relevant, capped);
    }
    report.ap = average_precision(results, relevant);
    report.match_median_us = percentile(times, 0.5);
    report.match_p95_us = percentile(times, 0.95);
    return report;
}

RelevantSets ground_truth_by_place(const std::vector<const PlaceSample*>& db_samples,
                                   const std::vector<const PlaceSample*>& queries) {
    RelevantSets out;
    out.reserve(queries.size());
    for (const PlaceSample* q : queries) {
        std::vector<std::int64_t> rel;
        for (const PlaceSample* s : db_samples)
            if (s->place_id == q->place_id) rel.push_back(s->id);
        out.push_back(std::move(rel));
    }
    return out;
}

RelevantSets ground_truth_by_radius(const DescriptorDatabase& db,
                                    const std::vector<const PlaceSample*>& queries,
                                    double r_gt) {
    RelevantSets out;
    out.reserve(queries.size());
    for (const PlaceSample* q : queries) {
        std::vector<std::int64_t> rel;
        for (std::size_t i = 0; i < db.size(); ++i) {
            const double d = std::hypot(db.locations[i][0] - q->x, db.locations[i][1] - q->y);
            if (d <= r_gt) rel.push_back(db.ids[i]);
        }
        out.push_back(std::move(rel));
    }
    return out;
}

void save_database(const std::filesystem::path& path, const DescriptorDatabase& db) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write database: " + path.string());
    os.write(kDbMagic, sizeof(kDbMagic));
    bio::write_pod<std::uint32_t>(os, kDbVersion);
    bio::write_pod<std::uint64_t>(os, db.size());
    bio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(db.width));
    bio::write_pod<std::uint64_t>(os, db.checkpoint_hash);
    bio::write_array(os, db.matrix);
    bio::write_array(os, db.ids);
    for (const auto& loc : db.locations) {
        bio::write_pod<double>(os, loc[0]);
        bio::write_pod<double>(os, loc[1]);
    }
    if (!os) throw DataError("failed writing database " + path.string());
}

DescriptorDatabase load_database(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open database: " + path.string());
    bio::expect_magic(is, kDbMagic, sizeof(kDbMagic), "descriptor database");
    const auto version = bio::read_pod<std::uint32_t>(is, "database version");
    if (version != kDbVersion)
        throw VersionError("database version " + std::to_string(version) +
                           " unsupported (expected " + std::to_string(kDbVersion) + ")");
    DescriptorDatabase db;
    const auto n = bio::read_pod<std::uint64_t>(is, "database row count");
    db.width = bio::read_pod<std::uint32_t>(is, "database width");
    db.checkpoint_hash = bio::read_pod<std::uint64_t>(is, "database checkpoint hash");
    bio::read_array(is, db.matrix, n * db.width, "database matrix");
    bio::read_array(is, db.ids, n, "database ids");
    db.locations.resize(n);
    for (auto& loc : db.locations) {
        loc[0] = bio::read_pod<double>(is, "database location");
        loc[1] = bio::read_pod<double>(is, "database location");
    }
    db.validate();
    return db;
}

MatchBench bench_matching(const DescriptorDatabase& db,
                          const std::vector<std::vector<float>>& queries,
                          std::size_t repetitions, std::size_t threads) {
    if (repetitions < 3) throw ConfigError("bench_matching: need at least 3 repetitions");
    if (queries.empty()) throw ConfigError("bench_matching: no queries");
    MatchBench bench;
    bench.queries = queries.size();
    bench.repetitions = repetitions;
    bench.threads = std::max<std::size_t>(1, threads);

    std::vector<double> times;
    times.reserve(queries.size() * repetitions);
    const auto serial_start = std::chrono::steady_clock::now();
    for (std::size_t rep = 0; rep < repetitions; ++rep)
        for (const auto& q : queries) times.push_back(knn_search(db, q, 1).elapsed_us);
    const double serial_s = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                          serial_start)
                                .count();
    bench.median_us = percentile(times, 0.5);
    bench.p95_us = percentile(times, 0.95);
    bench.serial_qps = double(queries.size() * repetitions) / serial_s;

    if (bench.threads > 1) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::thread> pool;
        std::size_t chunk = (queries.size() + bench.threads - 1) / bench.threads;
        for (std::size_t t = 0; t < bench.threads; ++t) {
            const std::size_t lo = t * chunk;
            const std::size_t hi = std::min(queries.size(), lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, lo, hi] {
                for (std::size_t rep = 0; rep < repetitions; ++rep)
                    for (std::size_t i = lo; i < hi; ++i) knn_search(db, queries[i], 1);
            });
        }
        for (auto& th : pool) th.join();
        const double s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bench.threaded_qps = double(queries.size() * repetitions) / s;
    } else {
        bench.threaded_qps = bench.serial_qps;
    }
    return bench;
}

GenBench bench_generation(const Checkpoint& model,
                          const std::vector<const PlaceSample*>& images,
                          std::size_t repetitions) {
    if (repetitions < 3) throw ConfigError("bench_generation: need at least 3 repetitions");
    if (images.empty()) throw ConfigError("bench_generation: no images");
    GenBench bench;
    bench.images = images.size();
    bench.repetitions = repetitions;
    std::vector<double> times;
    times.reserve(images.size() * repetitions);
    for (std::size_t rep = 0; rep < repetitions; ++rep)
        for (const PlaceSample* s : images) {
            const auto start = std::chrono::steady_clock::now();
            volatile double sink = model.infer(s->image).v[0];
            (void)sink;
            times.push_back(std::chrono::duration<double, std::micro>(
                                std::chrono::steady_clock::now() - start)
                                .count());
        }
    bench.median_us = percentile(times, 0.5);
    bench.p95_us = percentile(times, 0.95);
    return bench;
}

}  // namespace tscm
