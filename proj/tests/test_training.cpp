#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "tscm/data.hpp"
#include "tscm/training.hpp"

using namespace tscm;

namespace {

// Small world and models sized so a training test runs in a second or two.
SyntheticWorldConfig tiny_world(std::size_t places = 2, std::size_t views = 8) {
    SyntheticWorldConfig cfg;
    cfg.n_places = places;
    cfg.views_per_place = views;
    cfg.channels = 2;
    cfg.height = 8;
    cfg.width = 8;
    cfg.occlusion_max = 3;
    cfg.shift_max = 1;
    return cfg;
}

TeacherConfig tiny_teacher() {
    TeacherConfig cfg;
    cfg.channels = 2;
    cfg.height = 8;
    cfg.width = 8;
    cfg.tokens = 4;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.d_ff = 4;
    cfg.mid_feature_width = 4;
    cfg.inter_vlad = {8, 2, 4};
    cfg.side_vlad = {4, 2, 4};
    return cfg;
}

StudentConfig tiny_student() {
    StudentConfig cfg;
    cfg.channels = 2;
    cfg.height = 8;
    cfg.width = 8;
    cfg.tokens = 4;
    cfg.backbone_channels = 3;
    cfg.replace_channels = 3;
    cfg.backbone_vlad = {3, 2, 6};
    cfg.replace_vlad = {3, 2, 6};
    return cfg;
}

TrainConfig quick_train(std::size_t epochs = 1) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-3;
    cfg.seed = 1;
    return cfg;
}

}  // namespace

TEST_CASE("adam leaves parameters untouched on zero gradient and zero decay") {
    ParameterSet params;
    params.add("w", {4}, 4);
    init_params(params, 1);
    const std::vector<double> before = params.at("w").value;
    AdamState state(params);
    adam_step(params, state, 0.1, 0.0);
    CHECK(params.at("w").value == before);
    CHECK(state.step == 1);
}

TEST_CASE("first adam step moves opposite the gradient sign") {
    ParameterSet params;
    params.add("w", {3}, 3);
    params.at("w").value = {1.0, -2.0, 0.5};
    params.at("w").grad = {0.3, -0.7, 1e-4};
    const std::vector<double> before = params.at("w").value;
    AdamState state(params);
    adam_step(params, state, 0.01, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
        const double delta = params.at("w").value[i] - before[i];
        CHECK(delta * params.at("w").grad[i] < 0.0);  // sign-consistent with -grad
    }
}

TEST_CASE("adam on f(w)=w^2 shrinks |w| monotonically") {
    ParameterSet params;
    params.add("w", {1}, 1);
    params.at("w").value = {1.0};
    AdamState state(params);
    double prev = 1.0;
    for (int step = 0; step < 3; ++step) {
        params.at("w").grad = {2.0 * params.at("w").value[0]};
        adam_step(params, state, 0.1, 0.0);
        const double w = std::abs(params.at("w").value[0]);
        CHECK(w < prev);
        prev = w;
    }
}

TEST_CASE("adam rejects non-finite gradients with the parameter name") {
    ParameterSet params;
    params.add("late.weight", {2}, 2);
    params.at("late.weight").grad = {std::numeric_limits<double>::quiet_NaN(), 0.0};
    AdamState state(params);
    try {
        adam_step(params, state, 0.1, 0.0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("late.weight") != std::string::npos);
    }
}

TEST_CASE("weight decay folds into the gradient") {
    ParameterSet params;
    params.add("w", {1}, 1);
    params.at("w").value = {2.0};
    params.at("w").grad = {0.0};
    AdamState state(params);
    adam_step(params, state, 0.01, 0.5);  // g = 0 + 0.5*2 = 1
    CHECK(params.at("w").value[0] < 2.0);
}

TEST_CASE("teacher training reduces the loss on a two-place world") {
    const Dataset ds = generate_synthetic(tiny_world(), 3);
    TrainConfig cfg = quick_train(8);
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;  // the tiny stub net needs large steps
    const TrainResult result = train_teacher(ds, tiny_teacher(), cfg);
    REQUIRE(result.steps >= 8);
    double first_epoch = 0, last_epoch = 0;
    std::size_t first_n = 0, last_n = 0;
    for (const TrainLogRecord& r : result.log) {
        if (r.kind != "step") continue;
        if (r.epoch == 1) {
            first_epoch += r.l_total;
            ++first_n;
        } else if (r.epoch == cfg.epochs) {
            last_epoch += r.l_total;
            ++last_n;
        }
    }
    CHECK(last_epoch / double(last_n) < first_epoch / double(first_n));
}

TEST_CASE("learning rate decays by the configured factor per epoch") {
    const Dataset ds = generate_synthetic(tiny_world(), 5);
    TrainConfig cfg = quick_train(10);
    cfg.batch_size = 64;  // one step per epoch keeps this fast
    const TrainResult result = train_teacher(ds, tiny_teacher(), cfg);
    CHECK(result.final_lr ==
          doctest::Approx(cfg.learning_rate * std::pow(0.99, 10)).epsilon(1e-12));
    // step records carry the epoch's lr
    for (const TrainLogRecord& r : result.log)
        if (r.kind == "step")
            CHECK(r.lr == doctest::Approx(cfg.learning_rate *
                                          std::pow(0.99, double(r.epoch - 1)))
                              .epsilon(1e-12));
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
    const Dataset ds = generate_synthetic(tiny_world(), 7);
    const TrainConfig cfg = quick_train(2);
    const TrainResult a = train_teacher(ds, tiny_teacher(), cfg);
    const TrainResult b = train_teacher(ds, tiny_teacher(), cfg);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i)
        CHECK(a.log[i].l_total == b.log[i].l_total);  // bit-exact
    for (std::size_t i = 0; i < a.params.size(); ++i)
        CHECK(a.params.params()[i].value == b.params.params()[i].value);
}

TEST_CASE("distillation keeps the teacher frozen and both widths aligned") {
    const Dataset ds = generate_synthetic(tiny_world(), 11);
    const TeacherConfig tcfg = tiny_teacher();
    const TrainResult teacher = train_teacher(ds, tcfg, quick_train(1));

    TrainConfig cfg = quick_train(1);
    cfg.mask = CrossTermMask::pull_only();
    const StudentConfig scfg = tiny_student();
    REQUIRE(tcfg.descriptor_width() == scfg.descriptor_width());
    ParameterSet frozen_teacher = teacher.params;
    frozen_teacher.zero_grads();
    // distill_student hard-fails internally if any teacher gradient appears
    const TrainResult student = distill_student(ds, tcfg, frozen_teacher, scfg, cfg);
    CHECK(student.steps >= 1);
    CHECK(frozen_teacher.grads_all_zero());
    CHECK(student.initial_val_soft_dist >= 0.0);
    CHECK(student.final_val_soft_dist >= 0.0);

    // width mismatch is rejected up front
    StudentConfig narrow = scfg;
    narrow.backbone_vlad.d_output = 4;
    CHECK_THROWS_AS(distill_student(ds, tcfg, teacher.params, narrow, cfg), ConfigError);
}

TEST_CASE("every logged total equals the sum of its components") {
    const Dataset ds = generate_synthetic(tiny_world(), 13);
    const TeacherConfig tcfg = tiny_teacher();
    const TrainResult teacher = train_teacher(ds, tcfg, quick_train(1));
    TrainConfig cfg = quick_train(2);
    cfg.mask = CrossTermMask::all_four();
    const TrainResult student = distill_student(ds, tcfg, teacher.params, tiny_student(), cfg);
    std::size_t checked = 0;
    for (const TrainLogRecord& r : student.log)
        if (r.kind == "step") {
            CHECK(std::abs(r.l_total - (r.l_hard + r.l_soft + r.l_cm)) < 1e-10);
            ++checked;
        }
    CHECK(checked == student.steps);
}

TEST_CASE("no cross terms and zero soft weight reduce distillation to triplet training") {
    const Dataset ds = generate_synthetic(tiny_world(), 17);
    const TeacherConfig tcfg = tiny_teacher();
    const TrainResult teacher = train_teacher(ds, tcfg, quick_train(1));

    TrainConfig cfg = quick_train(2);
    cfg.mask = CrossTermMask{};  // no cross terms
    cfg.weights.soft = 0.0;
    const StudentConfig scfg = tiny_student();
    const TrainResult distilled = distill_student(ds, tcfg, teacher.params, scfg, cfg);

    const TrainResult plain = train_triplet_only(
        ds,
        [scfg](const BoundParams& p, const Tensor& img) {
            return student_forward(scfg, p, img);
        },
        make_student_params(scfg, mix_seed(cfg.seed, kStudentInitSalt)), cfg);

    REQUIRE(distilled.log.size() == plain.log.size());
    for (std::size_t i = 0; i < plain.log.size(); ++i)
        if (plain.log[i].kind == "step")
            CHECK(distilled.log[i].l_total == plain.log[i].l_total);  // bit-exact
    for (std::size_t i = 0; i < plain.params.size(); ++i)
        CHECK(distilled.params.params()[i].value == plain.params.params()[i].value);
}

TEST_CASE("training on an unmineable dataset raises the mining error") {
    SyntheticWorldConfig world = tiny_world(3, 2);
    const Dataset ds = generate_synthetic(world, 19);
    CHECK_THROWS_AS(train_teacher(ds, tiny_teacher(), quick_train(1)), DataError);
}

TEST_CASE("train config validation") {
    TrainConfig cfg = quick_train();
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = quick_train();
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = quick_train();
    cfg.mask = CrossTermMask{false, false, true, true};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training log serializes to JSON lines") {
    const Dataset ds = generate_synthetic(tiny_world(), 23);
    const TrainResult result = train_teacher(ds, tiny_teacher(), quick_train(1));
    const auto path = std::filesystem::temp_directory_path() / "tscm_train_log.jsonl";
    write_training_log(path, result.log);
    std::ifstream in(path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.contains("kind"));
        CHECK(j.contains("L_total"));
        ++lines;
    }
    CHECK(lines == result.log.size());
}
