#include "tscm/training.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <unordered_map>

#include "tscm/retrieval.hpp"

namespace tscm {

AdamState::AdamState(const ParameterSet& params) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Parameter& p : params.params()) {
        m.emplace_back(p.numel(), 0.0);
        v.emplace_back(p.numel(), 0.0);
    }
}

void adam_step(ParameterSet& params, AdamState& state, double lr, double weight_decay,
               const AdamConfig& cfg) {
    if (state.m.size() != params.size())
        throw NumericError("adam_step: state does not match parameter set");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = params.params()[pi];
        if (state.m[pi].size() != p.numel())
            throw NumericError("adam_step: moment buffer shape mismatch on '" + p.name + "'");
        for (std::size_t i = 0; i < p.numel(); ++i) {
            if (!std::isfinite(p.grad[i]))
                throw NumericError("adam_step: non-finite gradient on '" + p.name + "'");
            const double g = p.grad[i] + weight_decay * p.value[i];
            state.m[pi][i] = cfg.beta1 * state.m[pi][i] + (1.0 - cfg.beta1) * g;
            state.v[pi][i] = cfg.beta2 * state.v[pi][i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = state.m[pi][i] / bc1;
            const double v_hat = state.v[pi][i] / bc2;
            p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("train config: epochs must be >= 1");
    if (learning_rate <= 0 || lr_decay_per_epoch <= 0 || weight_decay < 0)
        throw ConfigError("train config: rates must be positive");
    if (margin <= 0) throw ConfigError("train config: margin must be positive");
    mask.validate();
    mining.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"learning_rate", c.learning_rate},
                       {"lr_decay_per_epoch", c.lr_decay_per_epoch},
                       {"weight_decay", c.weight_decay},
                       {"margin", c.margin},
                       {"cm_terms", c.mask.str()},
                       {"weight_hard", c.weights.hard},
                       {"weight_soft", c.weights.soft},
                       {"weight_cm", c.weights.cross},
                       {"r_pos", c.mining.r_pos},
                       {"r_neg", c.mining.r_neg},
                       {"negatives_per_anchor", c.mining.negatives_per_anchor},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.lr_decay_per_epoch = j.at("lr_decay_per_epoch").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.margin = j.at("margin").get<double>();
    c.mask = CrossTermMask::parse(j.at("cm_terms").get<std::string>());
    c.weights.hard = j.at("weight_hard").get<double>();
    c.weights.soft = j.at("weight_soft").get<double>();
    c.weights.cross = j.at("weight_cm").get<double>();
    c.mining.r_pos = j.at("r_pos").get<double>();
    c.mining.r_neg = j.at("r_neg").get<double>();
    c.mining.negatives_per_anchor = j.at("negatives_per_anchor").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
}

nlohmann::json TrainLogRecord::to_json() const {
    nlohmann::json j{{"kind", kind},      {"step", step},       {"epoch", epoch},
                     {"lr", lr},          {"L_hard", l_hard},   {"L_soft", l_soft},
                     {"L_cm", l_cm},      {"L_total", l_total}};
    if (val_recall1) j["val_recall@1"] = *val_recall1;
    if (val_soft_anchor_dist) j["val_soft_anchor_dist"] = *val_soft_anchor_dist;
    return j;
}

void write_training_log(const std::filesystem::path& path,
                        const std::vector<TrainLogRecord>& log) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot write training log: " + path.string());
    for (const TrainLogRecord& r : log) os << r.to_json().dump() << "\n";
}

namespace {

using TeacherFn = std::function<const Descriptor&(std::int64_t)>;

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

/// Frozen-parameter validation recall@1: database split vs val split.
double validation_recall1(const Dataset& ds, const ForwardFn& forward,
                          const ParameterSet& params) {
    const auto db_samples = ds.split_samples(Split::database);
    const auto val_samples = ds.split_samples(Split::val);
    if (db_samples.empty() || val_samples.empty()) return 0.0;
    BoundParams frozen(params);
    DescriptorDatabase db;
    db.width = forward(frozen, db_samples.front()->image).numel();
    for (const PlaceSample* s : db_samples) {
        const Tensor d = forward(frozen, s->image);
        db.ids.push_back(s->id);
        db.locations.push_back({s->x, s->y});
        for (double v : d.values()) db.matrix.push_back(static_cast<float>(v));
    }
    std::vector<QueryResult> results;
    for (const PlaceSample* s : val_samples) {
        const Tensor d = forward(frozen, s->image);
        std::vector<float> q(d.values().begin(), d.values().end());
        results.push_back(knn_search(db, q, 1));
    }
    return recall_at_n(results, ground_truth_by_place(db_samples, val_samples), 1);
}

double mean_val_soft_distance(const Dataset& ds, const ForwardFn& forward,
                              const ParameterSet& params, const TeacherFn& teacher) {
    const auto val_samples = ds.split_samples(Split::val);
    if (val_samples.empty()) return 0.0;
    BoundParams frozen(params);
    double sum = 0.0;
    for (const PlaceSample* s : val_samples)
        sum += squared_distance(forward(frozen, s->image).values(), teacher(s->id).v);
    return sum / double(val_samples.size());
}

struct LoopSetup {
    const Dataset& ds;
    const TrainConfig& train;
    ForwardFn forward;
    ParameterSet params;      // initialized by the caller
    TeacherFn teacher;        // null for plain triplet training
    CrossTermMask mask;       // empty for plain triplet training
    LossWeights weights;
};

TrainResult run_training_loop(LoopSetup setup) {
    const TrainConfig& train = setup.train;
    train.validate();
    const bool kd = static_cast<bool>(setup.teacher);

    TrainResult result;
    result.params = std::move(setup.params);
    AdamState adam(result.params);

    auto epoch_record = [&](std::size_t epoch, double lr) {
        TrainLogRecord r;
        r.kind = "epoch";
        r.epoch = epoch;
        r.step = result.steps;
        r.lr = lr;
        r.val_recall1 = validation_recall1(setup.ds, setup.forward, result.params);
        if (kd)
            r.val_soft_anchor_dist =
                mean_val_soft_distance(setup.ds, setup.forward, result.params, setup.teacher);
        result.log.push_back(r);
        return r;
    };

    // epoch 0: pre-training snapshot
    {
        const TrainLogRecord r0 = epoch_record(0, train.learning_rate);
        if (kd) result.initial_val_soft_dist = *r0.val_soft_anchor_dist;
    }

    double lr = train.learning_rate;
    for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
        const MiningResult mined =
            mine_triplets(setup.ds, train.mining, mix_seed(train.seed, 1000 + epoch));
        result.skipped_anchors += mined.skipped_anchors;

        for (std::size_t base = 0; base < mined.triplets.size(); base += train.batch_size) {
            const std::size_t take =
                std::min(train.batch_size, mined.triplets.size() - base);
            Tape tape;
            BoundParams bound(result.params, tape);
            std::unordered_map<std::int64_t, Tensor> cache;
            auto embed = [&](std::int64_t id) -> Tensor {
                auto it = cache.find(id);
                if (it != cache.end()) return it->second;
                Tensor d = setup.forward(bound, setup.ds.by_id(id).image);
                cache.emplace(id, d);
                return d;
            };
            std::vector<TripletEmbeddings> batch;
            batch.reserve(take);
            for (std::size_t i = 0; i < take; ++i) {
                const MinedTriplet& t = mined.triplets[base + i];
                TripletEmbeddings e;
                e.margin = train.margin;
                e.student_anchor = embed(t.anchor);
                e.student_positive = embed(t.positive);
                for (std::int64_t n : t.negatives) e.student_negatives.push_back(embed(n));
                if (kd) {
                    e.teacher_anchor = Tensor::from({setup.teacher(t.anchor).width()},
                                                    setup.teacher(t.anchor).v);
                    e.teacher_positive = Tensor::from({setup.teacher(t.positive).width()},
                                                      setup.teacher(t.positive).v);
                    for (std::int64_t n : t.negatives)
                        e.teacher_negatives.push_back(
                            Tensor::from({setup.teacher(n).width()}, setup.teacher(n).v));
                }
                batch.push_back(std::move(e));
            }

            LossBreakdown bd;
            Tensor loss = total_loss(batch, setup.mask, setup.weights, &bd);
            if (!std::isfinite(bd.total))
                throw NumericError("training diverged: non-finite loss at step " +
                                   std::to_string(result.steps + 1));
            tape.backward(loss);
            bound.collect_grads();
            adam_step(result.params, adam, lr, train.weight_decay);
            ++result.steps;

            TrainLogRecord r;
            r.kind = "step";
            r.step = result.steps;
            r.epoch = epoch;
            r.lr = lr;
            r.l_hard = bd.hard;
            r.l_soft = bd.soft;
            r.l_cm = bd.cross;
            r.l_total = bd.total;
            result.log.push_back(r);
        }

        const TrainLogRecord re = epoch_record(epoch, lr);
        result.final_val_recall1 = *re.val_recall1;
        if (kd) result.final_val_soft_dist = *re.val_soft_anchor_dist;
        lr *= train.lr_decay_per_epoch;
    }
    result.final_lr = lr;
    return result;
}

}  // namespace

TrainResult train_triplet_only(const Dataset& ds, ForwardFn forward, ParameterSet params,
                               const TrainConfig& train) {
    LoopSetup setup{ds,      train,           std::move(forward), std::move(params),
                    nullptr, CrossTermMask{}, LossWeights{train.weights.hard, 0.0, 0.0}};
    return run_training_loop(std::move(setup));
}

TrainResult train_teacher(const Dataset& ds, const TeacherConfig& config,
                          const TrainConfig& train) {
    config.validate();
    return train_triplet_only(
        ds,
        [config](const BoundParams& p, const Tensor& img) {
            return teacher_forward(config, p, img);
        },
        make_teacher_params(config, mix_seed(train.seed, kTeacherInitSalt)), train);
}

TrainResult distill_student(const Dataset& ds, const TeacherConfig& teacher_config,
                            const ParameterSet& teacher_params, const StudentConfig& config,
                            const TrainConfig& train) {
    config.validate();
    teacher_config.validate();
    if (teacher_config.descriptor_width() != config.descriptor_width())
        throw ConfigError("distill: teacher descriptor width " +
                          std::to_string(teacher_config.descriptor_width()) +
                          " != student width " + std::to_string(config.descriptor_width()));

    // The teacher is fixed during distillation: descriptors are computed
    // once, outside any tape, and its gradient buffers must stay zero.
    auto cache = std::make_shared<std::unordered_map<std::int64_t, Descriptor>>();
    auto teacher_set = std::make_shared<ParameterSet>(teacher_params);
    teacher_set->zero_grads();
    const Dataset* ds_ptr = &ds;
    TeacherFn teacher = [cache, teacher_set, teacher_config,
                         ds_ptr](std::int64_t id) -> const Descriptor& {
        auto it = cache->find(id);
        if (it != cache->end()) return it->second;
        BoundParams frozen(*teacher_set);
        Descriptor d(teacher_forward(teacher_config, frozen, ds_ptr->by_id(id).image).values());
        return cache->emplace(id, std::move(d)).first->second;
    };

    LoopSetup setup{ds, train,
                    [config](const BoundParams& p, const Tensor& img) {
                        return student_forward(config, p, img);
                    },
                    make_student_params(config, mix_seed(train.seed, kStudentInitSalt)),
                    teacher,
                    train.mask,
                    train.weights};
    TrainResult result = run_training_loop(std::move(setup));
    if (!teacher_set->grads_all_zero())
        throw NumericError("distill: frozen-teacher violation, nonzero teacher gradient");
    return result;
}

}  // namespace tscm
