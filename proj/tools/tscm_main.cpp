// tscm: synthetic-world generation, teacher/student training, cross-metric
// distillation, descriptor retrieval, and latency benchmarking in one tool.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tscm/data.hpp"
#include "tscm/losses.hpp"
#include "tscm/models.hpp"
#include "tscm/retrieval.hpp"
#include "tscm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

void write_json_file(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw tscm::ConfigError("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

void require_file(const fs::path& path, const char* what) {
    if (!fs::exists(path))
        throw tscm::ConfigError(std::string(what) + " not found: " + path.string());
}

void require_dataset_dir(const fs::path& dir) {
    require_file(dir / "manifest.json", "dataset manifest");
    require_file(dir / "samples.bin", "dataset payload");
}

/// Echo of the resolved run configuration next to the outputs, so every
/// command is reproducible from what it wrote.
void echo_run_config(const fs::path& anchor, const std::string& command, const json& options) {
    json echo{{"schema", "tscm.run_config.v1"}, {"command", command}, {"options", options}};
    const fs::path path = fs::is_directory(anchor) ? anchor / "run_config.json"
                                                   : fs::path(anchor.string() + ".run.json");
    write_json_file(path, echo);
}

std::size_t bench_threads_from_env() {
    const char* env = std::getenv("TSCM_BENCH_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) throw tscm::ConfigError("TSCM_BENCH_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

struct TrainCli {
    tscm::TrainConfig train;
    std::string cm_terms = "d1,d2";
    std::string data_dir;
    std::string out_path;

    void add_common(CLI::App* cmd) {
        cmd->add_option("--data", data_dir, "dataset directory")->required();
        cmd->add_option("--out", out_path, "output checkpoint path")->required();
        cmd->add_option("--epochs", train.epochs, "training epochs");
        cmd->add_option("--batch-size", train.batch_size, "triplets per step");
        cmd->add_option("--lr", train.learning_rate, "initial learning rate");
        cmd->add_option("--lr-decay", train.lr_decay_per_epoch, "per-epoch lr factor");
        cmd->add_option("--weight-decay", train.weight_decay, "L2 weight decay");
        cmd->add_option("--margin", train.margin, "triplet margin");
        cmd->add_option("--seed", train.seed, "run seed");
        cmd->add_option("--r-pos", train.mining.r_pos, "positive radius, meters");
        cmd->add_option("--r-neg", train.mining.r_neg, "negative exclusion radius, meters");
        cmd->add_option("--negatives", train.mining.negatives_per_anchor,
                        "negatives per anchor");
    }

    json options_json() const {
        json j = train;
        j["data"] = data_dir;
        j["out"] = out_path;
        return j;
    }
};

void print_train_summary(const char* what, const tscm::TrainResult& result) {
    std::cout << what << ": " << result.steps << " steps, final val recall@1 "
              << result.final_val_recall1 << ", final lr " << result.final_lr << "\n";
}

json match_bench_json(const tscm::MatchBench& b) {
    return json{{"median_us", b.median_us},   {"p95_us", b.p95_us},
                {"serial_qps", b.serial_qps}, {"threads", b.threads},
                {"threaded_qps", b.threaded_qps}, {"queries", b.queries},
                {"repetitions", b.repetitions}};
}

int run(int argc, char** argv) {
    CLI::App app{"TSCM teacher-student place recognition toolkit"};
    app.require_subcommand(1);
    // optional INI config; keys live under a [subcommand] section and
    // mirror the flags one-to-one; explicit flags win on conflict
    app.set_config("--config", "", "read options from an INI config file");
    app.allow_config_extras(CLI::config_extras_mode::error);

    // gen-data ---------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic place dataset");
    tscm::SyntheticWorldConfig world;
    std::string gen_out;
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--places", world.n_places, "number of places");
    gen->add_option("--views", world.views_per_place, "views per place");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--grid-pitch", world.grid_pitch, "meters between places");
    gen->add_option("--brightness-sigma", world.brightness_sigma, "brightness nuisance");
    gen->add_option("--contrast-sigma", world.contrast_sigma, "contrast nuisance");
    gen->add_option("--noise-sigma", world.noise_sigma, "pixel noise");
    gen->add_option("--occlusion-prob", world.occlusion_prob, "occluder probability");
    gen->fallthrough(true);

    // train-teacher ------------------------------------------------------
    auto* tt = app.add_subcommand("train-teacher", "pre-train the teacher on triplets");
    TrainCli tt_cli;
    tt_cli.add_common(tt);
    tscm::TeacherConfig teacher_cfg;
    tt->add_flag("--no-inter-encoder{false}", teacher_cfg.use_inter_encoder,
                 "replace the inter-transformer with plain concatenation");
    tt->add_flag("--no-resnet-branch{false}", teacher_cfg.use_resnet_branch,
                 "drop the ResNet-side NetVLAD branch");
    tt->add_flag("--keep-last-stage{false}", teacher_cfg.drop_last_stage,
                 "feed branches from the final stub stage");
    tt->fallthrough(true);

    // distill-student ----------------------------------------------------
    auto* dst = app.add_subcommand("distill-student",
                                   "distill a student from a frozen teacher");
    TrainCli dst_cli;
    dst_cli.add_common(dst);
    std::string dst_teacher;
    dst->add_option("--teacher", dst_teacher, "teacher checkpoint")->required();
    dst->add_option("--cm-terms", dst_cli.cm_terms,
                    "cross-metric terms, e.g. d1,d2 or d1,d2,d3,d4 (empty for none)");
    dst->add_option("--weight-hard", dst_cli.train.weights.hard, "hard loss weight");
    dst->add_option("--weight-soft", dst_cli.train.weights.soft, "soft loss weight");
    dst->add_option("--weight-cm", dst_cli.train.weights.cross, "cross-metric weight");
    dst->fallthrough(true);

    // build-db -----------------------------------------------------------
    auto* bdb = app.add_subcommand("build-db", "embed a dataset split into a database");
    std::string bdb_data, bdb_ckpt, bdb_out, bdb_split = "database";
    bdb->add_option("--data", bdb_data, "dataset directory")->required();
    bdb->add_option("--checkpoint", bdb_ckpt, "model checkpoint")->required();
    bdb->add_option("--out", bdb_out, "output database file")->required();
    bdb->add_option("--split", bdb_split, "dataset split to embed");
    bdb->fallthrough(true);

    // query ----------------------------------------------------------------
    auto* qry = app.add_subcommand("query", "rank database entries for query images");
    std::string qry_db, qry_ckpt, qry_data, qry_report;
    std::int64_t qry_id = -1;
    std::size_t qry_top = 5, qry_limit = 0;
    qry->add_option("--db", qry_db, "database file")->required();
    qry->add_option("--checkpoint", qry_ckpt, "model checkpoint")->required();
    qry->add_option("--data", qry_data, "dataset directory")->required();
    qry->add_option("--id", qry_id, "query a single sample id");
    qry->add_option("--top", qry_top, "neighbors per query");
    qry->add_option("--limit", qry_limit, "max query-split samples (0 = all)");
    qry->add_option("--report", qry_report, "write results JSON here (default stdout)");
    qry->fallthrough(true);

    // eval -----------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "recall@N / mAP@N / AP evaluation");
    std::string ev_db, ev_ckpt, ev_queries, ev_report, ev_split = "query";
    ev->add_option("--db", ev_db, "database file")->required();
    ev->add_option("--queries", ev_queries, "dataset directory providing queries")
        ->required();
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--split", ev_split, "query split");
    ev->add_option("--report", ev_report, "output report JSON")->required();
    ev->fallthrough(true);

    // bench ------------------------------------------------------------------
    auto* bn = app.add_subcommand("bench", "latency benchmark (matching, generation)");
    std::string bn_db, bn_ckpt, bn_data, bn_report;
    std::size_t bn_rows = 0, bn_width = 512, bn_queries = 100, bn_reps = 5;
    std::uint64_t bn_seed = 1;
    bn->add_option("--db", bn_db, "database file to benchmark matching against");
    bn->add_option("--synthetic-rows", bn_rows,
                   "benchmark a random unit-norm database of this many rows");
    bn->add_option("--synthetic-width", bn_width, "width of the synthetic database");
    bn->add_option("--queries", bn_queries, "number of benchmark queries");
    bn->add_option("--repetitions", bn_reps, "repetitions over the query set");
    bn->add_option("--seed", bn_seed, "synthetic generation seed");
    bn->add_option("--checkpoint", bn_ckpt, "checkpoint for descriptor-generation timing");
    bn->add_option("--data", bn_data, "dataset directory for descriptor-generation timing");
    bn->add_option("--report", bn_report, "output report JSON");
    bn->fallthrough(true);

    // params --------------------------------------------------------------
    auto* pr = app.add_subcommand("params", "inspect a checkpoint's parameter count");
    std::string pr_ckpt;
    pr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
    pr->fallthrough(true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (gen->parsed()) {
        const tscm::Dataset ds = tscm::generate_synthetic(world, gen_seed);
        tscm::save_dataset(ds, gen_out);
        json opts = world;
        opts["seed"] = gen_seed;
        opts["out"] = gen_out;
        echo_run_config(gen_out, "gen-data", opts);
        std::size_t n_train = ds.split_samples(tscm::Split::train).size();
        std::size_t n_val = ds.split_samples(tscm::Split::val).size();
        std::size_t n_db = ds.split_samples(tscm::Split::database).size();
        std::size_t n_q = ds.split_samples(tscm::Split::query).size();
        std::cout << "gen-data: " << ds.samples.size() << " samples over " << world.n_places
                  << " places (train " << n_train << ", val " << n_val << ", database "
                  << n_db << ", query " << n_q << ") -> " << gen_out << "\n";
        return 0;
    }

    if (tt->parsed()) {
        require_dataset_dir(tt_cli.data_dir);
        const tscm::Dataset ds = tscm::load_dataset(tt_cli.data_dir);
        const tscm::TrainResult result = tscm::train_teacher(ds, teacher_cfg, tt_cli.train);
        tscm::Checkpoint ckpt;
        ckpt.kind = tscm::ModelKind::teacher;
        ckpt.teacher_config = teacher_cfg;
        ckpt.params = result.params;
        tscm::save_checkpoint(tt_cli.out_path, ckpt);
        tscm::write_training_log(tt_cli.out_path + ".log.jsonl", result.log);
        json opts = tt_cli.options_json();
        opts["teacher_config"] = teacher_cfg;
        echo_run_config(tt_cli.out_path, "train-teacher", opts);
        print_train_summary("train-teacher", result);
        return 0;
    }

    if (dst->parsed()) {
        require_dataset_dir(dst_cli.data_dir);
        require_file(dst_teacher, "teacher checkpoint");
        dst_cli.train.mask = tscm::CrossTermMask::parse(dst_cli.cm_terms);
        const tscm::Dataset ds = tscm::load_dataset(dst_cli.data_dir);
        const tscm::Checkpoint teacher = tscm::load_checkpoint(dst_teacher);
        if (teacher.kind != tscm::ModelKind::teacher)
            throw tscm::ConfigError("--teacher must point at a teacher checkpoint");
        tscm::StudentConfig student_cfg;  // toy default matches the teacher width
        const tscm::TrainResult result = tscm::distill_student(
            ds, teacher.teacher_config, teacher.params, student_cfg, dst_cli.train);
        tscm::Checkpoint ckpt;
        ckpt.kind = tscm::ModelKind::student;
        ckpt.student_config = student_cfg;
        ckpt.params = result.params;
        tscm::save_checkpoint(dst_cli.out_path, ckpt);
        tscm::write_training_log(dst_cli.out_path + ".log.jsonl", result.log);
        json opts = dst_cli.options_json();
        opts["teacher"] = dst_teacher;
        opts["cm_terms"] = dst_cli.train.mask.str();
        opts["student_config"] = student_cfg;
        echo_run_config(dst_cli.out_path, "distill-student", opts);
        print_train_summary("distill-student", result);
        std::cout << "  val soft-anchor distance: " << result.initial_val_soft_dist
                  << " -> " << result.final_val_soft_dist << "\n";
        return 0;
    }

    if (bdb->parsed()) {
        require_dataset_dir(bdb_data);
        require_file(bdb_ckpt, "checkpoint");
        const tscm::Dataset ds = tscm::load_dataset(bdb_data);
        const tscm::Checkpoint model = tscm::load_checkpoint(bdb_ckpt);
        const auto samples = ds.split_samples(tscm::split_from_string(bdb_split));
        if (samples.empty()) throw tscm::DataError("split '" + bdb_split + "' is empty");
        const tscm::DescriptorDatabase db =
            tscm::build_database(samples, model, tscm::fnv1a_file(bdb_ckpt));
        tscm::save_database(bdb_out, db);
        echo_run_config(bdb_out, "build-db",
                        json{{"data", bdb_data},
                             {"checkpoint", bdb_ckpt},
                             {"split", bdb_split},
                             {"out", bdb_out}});
        std::cout << "build-db: " << db.size() << " rows x " << db.width << " -> " << bdb_out
                  << "\n";
        return 0;
    }

    if (qry->parsed()) {
        require_file(qry_db, "database");
        require_file(qry_ckpt, "checkpoint");
        require_dataset_dir(qry_data);
        const tscm::DescriptorDatabase db = tscm::load_database(qry_db);
        const tscm::Checkpoint model = tscm::load_checkpoint(qry_ckpt);
        const tscm::Dataset ds = tscm::load_dataset(qry_data);
        std::vector<const tscm::PlaceSample*> targets;
        if (qry_id >= 0) {
            targets.push_back(&ds.by_id(qry_id));
        } else {
            targets = ds.split_samples(tscm::Split::query);
            if (qry_limit > 0 && targets.size() > qry_limit) targets.resize(qry_limit);
        }
        json out{{"schema", "tscm.query.v1"}, {"results", json::array()}};
        for (const tscm::PlaceSample* s : targets) {
            const tscm::QueryResult r =
                tscm::knn_search(db, model.infer(s->image), std::min(qry_top, db.size()));
            json neighbors = json::array();
            for (const tscm::Neighbor& nb : r.neighbors)
                neighbors.push_back({{"id", nb.id}, {"distance", nb.distance}});
            out["results"].push_back(
                {{"query_id", s->id}, {"place_id", s->place_id}, {"neighbors", neighbors}});
        }
        if (qry_report.empty())
            std::cout << out.dump(2) << "\n";
        else {
            write_json_file(qry_report, out);
            echo_run_config(qry_report, "query",
                            json{{"db", qry_db},
                                 {"checkpoint", qry_ckpt},
                                 {"data", qry_data},
                                 {"top", qry_top}});
            std::cout << "query: " << out["results"].size() << " queries -> " << qry_report
                      << "\n";
        }
        return 0;
    }

    if (ev->parsed()) {
        require_file(ev_db, "database");
        require_file(ev_ckpt, "checkpoint");
        require_dataset_dir(ev_queries);
        const tscm::DescriptorDatabase db = tscm::load_database(ev_db);
        const tscm::Checkpoint model = tscm::load_checkpoint(ev_ckpt);
        const tscm::Dataset ds = tscm::load_dataset(ev_queries);
        const auto queries = ds.split_samples(tscm::split_from_string(ev_split));
        if (queries.empty()) throw tscm::DataError("query split '" + ev_split + "' is empty");

        std::vector<std::vector<float>> qdesc;
        qdesc.reserve(queries.size());
        for (const tscm::PlaceSample* s : queries) {
            const tscm::Descriptor d = model.infer(s->image);
            qdesc.emplace_back(d.v.begin(), d.v.end());
        }
        // ground truth by place identity against the database rows
        std::vector<const tscm::PlaceSample*> db_samples;
        for (std::int64_t id : db.ids) db_samples.push_back(&ds.by_id(id));
        const tscm::RelevantSets relevant = tscm::ground_truth_by_place(db_samples, queries);
        tscm::EvalReport report = tscm::evaluate(db, qdesc, relevant);
        json out = report.to_json();
        out["schema"] = "tscm.eval_report.v1";
        write_json_file(ev_report, out);
        echo_run_config(ev_report, "eval",
                        json{{"db", ev_db},
                             {"queries", ev_queries},
                             {"checkpoint", ev_ckpt},
                             {"split", ev_split},
                             {"report", ev_report}});
        std::cout << "eval: recall@1 " << report.recall[1] << ", recall@5 "
                  << report.recall[5] << ", recall@10 " << report.recall[10] << ", mAP@1 "
                  << report.map_at[1] << ", AP " << report.ap << " -> " << ev_report << "\n";
        return 0;
    }

    if (bn->parsed()) {
        if (bn_db.empty() && bn_rows == 0)
            throw tscm::ConfigError("bench: provide --db or --synthetic-rows");
        const std::size_t threads = bench_threads_from_env();
        json out{{"schema", "tscm.bench_report.v1"}, {"threads", threads}};

        tscm::DescriptorDatabase db;
        if (!bn_db.empty()) {
            require_file(bn_db, "database");
            db = tscm::load_database(bn_db);
        } else {
            std::mt19937_64 rng(bn_seed);
            std::normal_distribution<double> gauss(0.0, 1.0);
            db.width = bn_width;
            db.matrix.reserve(bn_rows * bn_width);
            for (std::size_t i = 0; i < bn_rows; ++i) {
                std::vector<double> v(bn_width);
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
        }
        std::mt19937_64 qrng(bn_seed ^ 0x9e3779b97f4a7c15ULL);
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<std::vector<float>> queries;
        queries.reserve(bn_queries);
        for (std::size_t i = 0; i < bn_queries; ++i) {
            std::vector<double> v(db.width);
            double sq = 0.0;
            for (double& x : v) {
                x = gauss(qrng);
                sq += x * x;
            }
            const double inv = 1.0 / std::sqrt(sq);
            std::vector<float> q(db.width);
            for (std::size_t j = 0; j < db.width; ++j)
                q[j] = static_cast<float>(v[j] * inv);
            queries.push_back(std::move(q));
        }
        const tscm::MatchBench match = tscm::bench_matching(db, queries, bn_reps, threads);
        out["matching"] = match_bench_json(match);
        out["database"] = {{"rows", db.size()}, {"width", db.width}};
        std::cout << "bench: matching median " << match.median_us / 1000.0 << " ms, p95 "
                  << match.p95_us / 1000.0 << " ms over " << db.size() << " rows\n";

        if (!bn_ckpt.empty() || !bn_data.empty()) {
            if (bn_ckpt.empty() || bn_data.empty())
                throw tscm::ConfigError(
                    "bench: descriptor-generation timing needs both --checkpoint and --data");
            require_file(bn_ckpt, "checkpoint");
            require_dataset_dir(bn_data);
            const tscm::Checkpoint model = tscm::load_checkpoint(bn_ckpt);
            const tscm::Dataset ds = tscm::load_dataset(bn_data);
            auto images = ds.split_samples(tscm::Split::query);
            if (images.empty()) throw tscm::DataError("bench: query split is empty");
            const tscm::GenBench gen_bench = tscm::bench_generation(model, images, bn_reps);
            out["generation"] = {{"median_us", gen_bench.median_us},
                                 {"p95_us", gen_bench.p95_us},
                                 {"images", gen_bench.images},
                                 {"repetitions", gen_bench.repetitions}};
            std::cout << "bench: descriptor generation median "
                      << gen_bench.median_us / 1000.0 << " ms\n";
        }
        if (!bn_report.empty()) {
            write_json_file(bn_report, out);
            echo_run_config(bn_report, "bench",
                            json{{"db", bn_db},
                                 {"synthetic_rows", bn_rows},
                                 {"synthetic_width", bn_width},
                                 {"queries", bn_queries},
                                 {"repetitions", bn_reps},
                                 {"threads", threads}});
        }
        return 0;
    }

    if (pr->parsed()) {
        require_file(pr_ckpt, "checkpoint");
        const tscm::Checkpoint ckpt = tscm::load_checkpoint(pr_ckpt);
        json out{{"schema", "tscm.params.v1"},
                 {"kind", tscm::to_string(ckpt.kind)},
                 {"parameter_count", ckpt.params.count_scalars()},
                 {"parameter_arrays", ckpt.params.size()},
                 {"descriptor_width", ckpt.descriptor_width()}};
        std::cout << out.dump(2) << "\n";
        return 0;
    }

    return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const tscm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const tscm::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const tscm::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
