// Microbenchmarks for the retrieval path and descriptor generation.
// Run with: ./tscm_bench [--benchmark_filter=...]

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "tscm/data.hpp"
#include "tscm/models.hpp"
#include "tscm/retrieval.hpp"

namespace {

tscm::DescriptorDatabase make_db(std::size_t rows, std::size_t width) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> gauss(0.0, 1.0);
    tscm::DescriptorDatabase db;
    db.width = width;
    db.matrix.reserve(rows * width);
    for (std::size_t i = 0; i < rows; ++i) {
        std::vector<double> v(width);
        double sq = 0.0;
        for (double& x : v) {
            x = gauss(rng);
            sq += x * x;
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (double x : v) db.matrix.push_back(static_cast<float>(x * inv));
        db.ids.push_back(static_cast<std::int64_t>(i));
        db.locations.push_back({0.0, 0.0});
    }
    return db;
}

std::vector<float> make_query(std::size_t width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(width);
    double sq = 0.0;
    for (double& x : v) {
        x = gauss(rng);
        sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(sq);
    std::vector<float> q(width);
    for (std::size_t i = 0; i < width; ++i) q[i] = static_cast<float>(v[i] * inv);
    return q;
}

void BM_KnnMatch(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const auto width = static_cast<std::size_t>(state.range(1));
    const tscm::DescriptorDatabase db = make_db(rows, width);
    const std::vector<float> q = make_query(width, 99);
    for (auto _ : state) {
        auto result = tscm::knn_search(db, q, 1);
        benchmark::DoNotOptimize(result.neighbors.data());
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_KnnMatch)->Args({1000, 96})->Args({1000, 512})->Args({10000, 512});

void BM_KnnTop10(benchmark::State& state) {
    const tscm::DescriptorDatabase db = make_db(10000, 512);
    const std::vector<float> q = make_query(512, 13);
    for (auto _ : state) {
        auto result = tscm::knn_search(db, q, 10);
        benchmark::DoNotOptimize(result.neighbors.data());
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_KnnTop10);

void BM_DescriptorGeneration(benchmark::State& state) {
    const bool student = state.range(0) != 0;
    tscm::Checkpoint model;
    if (student) {
        model.kind = tscm::ModelKind::student;
        model.params = tscm::make_student_params(model.student_config, 5);
    } else {
        model.kind = tscm::ModelKind::teacher;
        model.params = tscm::make_teacher_params(model.teacher_config, 5);
    }
    tscm::SyntheticWorldConfig world;
    world.n_places = 2;
    world.views_per_place = 2;
    const tscm::Dataset ds = tscm::generate_synthetic(world, 1);
    const tscm::Tensor& image = ds.samples.front().image;
    for (auto _ : state) {
        auto d = model.infer(image);
        benchmark::DoNotOptimize(d.v.data());
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_DescriptorGeneration)->Arg(0)->ArgName("teacher")->Arg(1)->ArgName("student");

void BM_SyntheticGeneration(benchmark::State& state) {
    tscm::SyntheticWorldConfig world;
    world.n_places = 4;
    world.views_per_place = 8;
    std::uint64_t seed = 1;
    for (auto _ : state) {
        auto ds = tscm::generate_synthetic(world, seed++);
        benchmark::DoNotOptimize(ds.samples.data());
    }
    state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_SyntheticGeneration);

}  // namespace

BENCHMARK_MAIN();
