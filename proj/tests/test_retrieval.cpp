#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "oracles.hpp"
#include "tscm/retrieval.hpp"

using namespace tscm;
namespace fs = std::filesystem;

namespace {

DescriptorDatabase random_db(std::mt19937_64& rng, std::size_t rows, std::size_t width,
                             bool with_duplicates = false) {
    DescriptorDatabase db;
    db.width = width;
    for (std::size_t i = 0; i < rows; ++i) {
        oracle::Vec v;
        if (with_duplicates && i % 3 == 2) {
            // repeat the previous row under a new id to force distance ties
            v.assign(db.matrix.end() - width, db.matrix.end());
        } else {
            v = oracle::random_unit(rng, width);
        }
        for (double x : v) db.matrix.push_back(float(x));
        db.ids.push_back(std::int64_t(rows - i));  // ids deliberately unsorted
        db.locations.push_back({double(i), 0.0});
    }
    return db;
}

std::vector<float> random_query(std::mt19937_64& rng, std::size_t width) {
    const oracle::Vec v = oracle::random_unit(rng, width);
    std::vector<float> q(v.begin(), v.end());
    return q;
}

fs::path temp_path(const char* name) {
    return fs::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("knn matches the double-loop oracle on 100 random instances") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> rows_d(1, 200), width_d(2, 64);
    for (int instance = 0; instance < 100; ++instance) {
        const std::size_t rows = rows_d(rng), width = width_d(rng);
        const DescriptorDatabase db = random_db(rng, rows, width, instance % 2 == 0);
        const std::vector<float> q = random_query(rng, width);
        std::uniform_int_distribution<std::size_t> n_d(1, rows);
        const std::size_t n = n_d(rng);

        const QueryResult got = knn_search(db, q, n);
        const std::vector<oracle::KnnHit> want =
            oracle::knn_oracle(db.matrix, width, db.ids, q, n);
        REQUIRE(got.neighbors.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(got.neighbors[i].id == want[i].id);
            CHECK(got.neighbors[i].distance == want[i].distance);  // same arithmetic
        }
    }
}

TEST_CASE("a database row is its own nearest neighbor at distance zero") {
    std::mt19937_64 rng(2);
    const DescriptorDatabase db = random_db(rng, 50, 16);
    std::vector<float> q(db.row(7).begin(), db.row(7).end());
    const QueryResult res = knn_search(db, q, 1);
    CHECK(res.neighbors[0].id == db.ids[7]);
    CHECK(res.neighbors[0].distance == 0.0);
}

TEST_CASE("full ranking is a permutation of all ids") {
    std::mt19937_64 rng(3);
    const DescriptorDatabase db = random_db(rng, 40, 8);
    const QueryResult res = knn_search(db, random_query(rng, 8), db.size());
    REQUIRE(res.neighbors.size() == db.size());
    std::vector<std::int64_t> seen;
    for (const Neighbor& nb : res.neighbors) seen.push_back(nb.id);
    std::sort(seen.begin(), seen.end());
    std::vector<std::int64_t> all = db.ids;
    std::sort(all.begin(), all.end());
    CHECK(seen == all);
    for (std::size_t i = 1; i < res.neighbors.size(); ++i)
        CHECK(res.neighbors[i].distance >= res.neighbors[i - 1].distance);
}

TEST_CASE("knn input validation") {
    std::mt19937_64 rng(4);
    const DescriptorDatabase db = random_db(rng, 10, 8);
    CHECK_THROWS_AS(knn_search(db, random_query(rng, 8), 11), ConfigError);
    CHECK_THROWS_AS(knn_search(db, random_query(rng, 4), 1), DimensionError);
    DescriptorDatabase empty;
    empty.width = 8;
    CHECK_THROWS_AS(knn_search(empty, random_query(rng, 8), 1), DataError);
}

TEST_CASE("recall@N hand cases") {
    // three queries; correct item ranked 1st, 2nd, and absent
    std::vector<QueryResult> results(3);
    results[0].neighbors = {{10, 0.1}, {11, 0.2}};
    results[1].neighbors = {{20, 0.1}, {21, 0.2}};
    results[2].neighbors = {{30, 0.1}, {31, 0.2}};
    const RelevantSets relevant{{10}, {21}, {99}};
    CHECK(recall_at_n(results, relevant, 1) == doctest::Approx(1.0 / 3));
    CHECK(recall_at_n(results, relevant, 2) == doctest::Approx(2.0 / 3));

    // perfect and adversarial rankings
    const RelevantSets perfect{{10}, {20}, {30}};
    CHECK(recall_at_n(results, perfect, 1) == 1.0);
    const RelevantSets adversarial{{11}, {21}, {31}};
    CHECK(recall_at_n(results, adversarial, 1) == 0.0);
    CHECK(recall_at_n(results, adversarial, 2) == 1.0);
}

TEST_CASE("queries with empty ground truth are excluded and counted") {
    std::vector<QueryResult> results(2);
    results[0].neighbors = {{1, 0.0}};
    results[1].neighbors = {{2, 0.0}};
    const RelevantSets relevant{{1}, {}};
    std::size_t excluded = 0;
    CHECK(recall_at_n(results, relevant, 1, &excluded) == 1.0);
    CHECK(excluded == 1);
}

TEST_CASE("mAP@1 equals recall@1 and AP@5 hand case") {
    // single query, one relevant item at rank 2
    std::vector<QueryResult> results(1);
    results[0].neighbors = {{5, 0.1}, {7, 0.2}, {9, 0.3}, {11, 0.4}, {13, 0.5}};
    const RelevantSets relevant{{7}};
    CHECK(map_at_n(results, relevant, 5) == doctest::Approx(0.5));

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const DescriptorDatabase db = random_db(rng, 30, 8);
        std::vector<QueryResult> rs;
        RelevantSets rel;
        std::uniform_int_distribution<std::size_t> pick(0, 29);
        for (int q = 0; q < 6; ++q) {
            rs.push_back(knn_search(db, random_query(rng, 8), db.size()));
            std::vector<std::int64_t> ids;
            for (int k = 0; k < 3; ++k) ids.push_back(db.ids[pick(rng)]);
            std::sort(ids.begin(), ids.end());
            ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
            rel.push_back(ids);
        }
        CHECK(map_at_n(rs, rel, 1) == doctest::Approx(recall_at_n(rs, rel, 1)).epsilon(1e-12));

        // mAP@N against the definition oracle
        for (std::size_t n : {3u, 5u, 10u}) {
            double expect = 0.0;
            for (std::size_t q = 0; q < rs.size(); ++q) {
                std::vector<std::int64_t> ranking;
                for (const Neighbor& nb : rs[q].neighbors) ranking.push_back(nb.id);
                expect += oracle::ap_at_n_oracle(ranking, rel[q], n);
            }
            expect /= double(rs.size());
            CHECK(map_at_n(rs, rel, n) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("metrics stay in range and recall is monotone in N") {
    std::mt19937_64 rng(6);
    const DescriptorDatabase db = random_db(rng, 25, 6);
    std::vector<QueryResult> rs;
    RelevantSets rel;
    std::uniform_int_distribution<std::size_t> pick(0, 24);
    for (int q = 0; q < 8; ++q) {
        rs.push_back(knn_search(db, random_query(rng, 6), db.size()));
        rel.push_back({db.ids[pick(rng)], db.ids[pick(rng)]});
    }
    double prev = 0.0;
    for (std::size_t n = 1; n <= 25; ++n) {
        const double r = recall_at_n(rs, rel, n);
        CHECK(r >= prev);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
        prev = r;
    }
    const double ap = average_precision(rs, rel);
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
}

TEST_CASE("global AP over the pooled ranking, tiny hand case") {
    // two queries, two rows each; pooled by ascending distance:
    //   (q0,a,0.1,rel) (q1,c,0.2,not) (q0,b,0.3,not) (q1,d,0.4,rel)
    std::vector<QueryResult> rs(2);
    rs[0].neighbors = {{1, 0.1}, {2, 0.3}};
    rs[1].neighbors = {{3, 0.2}, {4, 0.4}};
    const RelevantSets rel{{1}, {4}};
    // precision at the relevant hits: 1/1 and 2/4; AP = (1 + 0.5)/2
    CHECK(average_precision(rs, rel) == doctest::Approx(0.75));
}

TEST_CASE("radius ground truth marks every database row within r_gt") {
    std::mt19937_64 rng(12);
    DescriptorDatabase db = random_db(rng, 6, 4);
    // place rows on a line 10 meters apart
    for (std::size_t i = 0; i < db.size(); ++i) db.locations[i] = {double(i) * 10.0, 0.0};
    PlaceSample q;
    q.id = 100;
    q.x = 12.0;
    q.y = 0.0;
    const RelevantSets rel = ground_truth_by_radius(db, {&q}, 25.0);
    REQUIRE(rel.size() == 1);
    // rows at 0,10,20,30 meters -> distances 12,2,8,18 <= 25; 28,38 excluded
    std::vector<std::int64_t> expect{db.ids[0], db.ids[1], db.ids[2], db.ids[3]};
    CHECK(rel[0] == expect);
}

TEST_CASE("database persistence round-trips bit exactly") {
    std::mt19937_64 rng(7);
    DescriptorDatabase db = random_db(rng, 33, 12);
    db.checkpoint_hash = 0xdeadbeefcafef00dULL;
    const fs::path path = temp_path("tscm_db_roundtrip.bin");
    save_database(path, db);
    const DescriptorDatabase loaded = load_database(path);
    CHECK(loaded.width == db.width);
    CHECK(loaded.checkpoint_hash == db.checkpoint_hash);
    CHECK(loaded.ids == db.ids);
    CHECK(loaded.matrix == db.matrix);  // float-exact
    CHECK(loaded.locations == db.locations);
}

TEST_CASE("database version and magic are enforced") {
    std::mt19937_64 rng(8);
    const fs::path path = temp_path("tscm_db_version.bin");
    save_database(path, random_db(rng, 5, 4));

    const fs::path versioned = temp_path("tscm_db_v9.bin");
    fs::copy_file(path, versioned, fs::copy_options::overwrite_existing);
    {
        std::fstream f(versioned, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t bad = 9;
        f.write(reinterpret_cast<const char*>(&bad), sizeof(bad));
    }
    CHECK_THROWS_AS(load_database(versioned), VersionError);

    const fs::path corrupted = temp_path("tscm_db_magic.bin");
    fs::copy_file(path, corrupted, fs::copy_options::overwrite_existing);
    {
        std::fstream f(corrupted, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOTADESC", 8);
    }
    CHECK_THROWS_AS(load_database(corrupted), DataError);
}

TEST_CASE("database rejects non-unit rows and duplicate ids") {
    DescriptorDatabase db;
    db.width = 2;
    db.ids = {1, 2};
    db.locations = {{0, 0}, {0, 0}};
    db.matrix = {1.0f, 0.0f, 0.5f, 0.5f};  // second row not unit norm
    CHECK_THROWS_AS(db.validate(), DataError);

    db.matrix = {1.0f, 0.0f, 0.0f, 1.0f};
    db.ids = {1, 1};
    CHECK_THROWS_AS(db.validate(), DataError);
}

TEST_CASE("concurrent queries return exactly the serial results") {
    std::mt19937_64 rng(9);
    const DescriptorDatabase db = random_db(rng, 120, 16);
    std::vector<std::vector<float>> queries;
    for (int i = 0; i < 16; ++i) queries.push_back(random_query(rng, 16));

    std::vector<QueryResult> serial;
    for (const auto& q : queries) serial.push_back(knn_search(db, q, 5));

    std::vector<QueryResult> parallel(queries.size());
    std::vector<std::thread> pool;
    for (int t = 0; t < 4; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < queries.size(); i += 4)
                parallel[i] = knn_search(db, queries[i], 5);
        });
    for (auto& th : pool) th.join();

    for (std::size_t i = 0; i < queries.size(); ++i) {
        REQUIRE(parallel[i].neighbors.size() == serial[i].neighbors.size());
        for (std::size_t k = 0; k < serial[i].neighbors.size(); ++k) {
            CHECK(parallel[i].neighbors[k].id == serial[i].neighbors[k].id);
            CHECK(parallel[i].neighbors[k].distance == serial[i].neighbors[k].distance);
        }
    }
}

TEST_CASE("evaluate produces a complete report") {
    std::mt19937_64 rng(10);
    const DescriptorDatabase db = random_db(rng, 30, 8);
    std::vector<std::vector<float>> queries;
    RelevantSets rel;
    std::uniform_int_distribution<std::size_t> pick(0, 29);
    for (int q = 0; q < 5; ++q) {
        queries.push_back(random_query(rng, 8));
        rel.push_back({db.ids[pick(rng)]});
    }
    const EvalReport report = evaluate(db, queries, rel);
    CHECK(report.query_count == 5);
    CHECK(report.database_size == 30);
    CHECK(report.recall.at(1) == report.map_at.at(1));  // mAP@1 == recall@1
    CHECK(report.recall.at(1) <= report.recall.at(5));
    CHECK(report.recall.at(5) <= report.recall.at(10));
    const nlohmann::json j = report.to_json();
    for (const char* key : {"recall", "map", "ap", "query_count", "database_size",
                            "excluded_queries", "timing"})
        CHECK(j.contains(key));
}

TEST_CASE("bench_matching reports medians and throughput") {
    std::mt19937_64 rng(11);
    const DescriptorDatabase db = random_db(rng, 200, 16);
    std::vector<std::vector<float>> queries;
    for (int i = 0; i < 10; ++i) queries.push_back(random_query(rng, 16));
    const MatchBench bench = bench_matching(db, queries, 3, 2);
    CHECK(bench.median_us > 0.0);
    CHECK(bench.p95_us >= bench.median_us);
    CHECK(bench.serial_qps > 0.0);
    CHECK(bench.threaded_qps > 0.0);
    CHECK(bench.queries == 10);
    CHECK_THROWS_AS(bench_matching(db, queries, 2, 1), ConfigError);  // reps >= 3
}

TEST_CASE("matching time grows with the database size") {
    std::mt19937_64 rng(13);
    const DescriptorDatabase small = random_db(rng, 500, 64);
    const DescriptorDatabase large = random_db(rng, 5000, 64);
    std::vector<std::vector<float>> queries;
    for (int i = 0; i < 5; ++i) queries.push_back(random_query(rng, 64));
    const MatchBench a = bench_matching(small, queries, 3);
    const MatchBench b = bench_matching(large, queries, 3);
    CHECK(b.median_us >= a.median_us);
}
