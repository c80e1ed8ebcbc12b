#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "tscm/data.hpp"
#include "tscm/losses.hpp"
#include "tscm/models.hpp"
#include "tscm/params.hpp"

namespace tscm {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Per-parameter first/second moment buffers plus the shared step counter.
struct AdamState {
    explicit AdamState(const ParameterSet& params);

    std::vector<std::vector<double>> m, v;
    std::size_t step = 0;
};

/// Classic Adam with the L2 term folded into the gradient
/// (g <- g + weight_decay * w), bias-corrected moments.
void adam_step(ParameterSet& params, AdamState& state, double lr, double weight_decay,
               const AdamConfig& cfg = {});

struct TrainConfig {
    std::size_t batch_size = 8;
    std::size_t epochs = 5;
    double learning_rate = 1e-3;  // toy default; the full-scale setting is 1e-5
    double lr_decay_per_epoch = 0.99;
    double weight_decay = 0.001;
    double margin = 0.1;
    CrossTermMask mask = CrossTermMask::pull_only();
    LossWeights weights;
    TripletSpec mining;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One JSON-lines record. "step" records carry batch losses; "epoch"
/// records carry validation metrics (epoch 0 is the pre-training snapshot).
struct TrainLogRecord {
    std::string kind;  // "step" | "epoch"
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double l_hard = 0.0, l_soft = 0.0, l_cm = 0.0, l_total = 0.0;
    std::optional<double> val_recall1;
    std::optional<double> val_soft_anchor_dist;  // mean d(S(x),T(x)) on val

    nlohmann::json to_json() const;
};

struct TrainResult {
    ParameterSet params;
    std::vector<TrainLogRecord> log;
    std::size_t steps = 0;
    double final_lr = 0.0;
    double final_val_recall1 = 0.0;
    double initial_val_soft_dist = -1.0;
    double final_val_soft_dist = -1.0;
    std::size_t skipped_anchors = 0;
};

using ForwardFn = std::function<Tensor(const BoundParams&, const Tensor&)>;

/// Seeds folded into TrainConfig::seed for parameter initialization.
inline constexpr std::uint64_t kTeacherInitSalt = 0x7eac4e8;
inline constexpr std::uint64_t kStudentInitSalt = 0x57bde27;

/// Plain triplet training of an arbitrary model; train_teacher is this
/// applied to the teacher forward.
TrainResult train_triplet_only(const Dataset& ds, ForwardFn forward, ParameterSet params,
                               const TrainConfig& train);

/// Minimizes the student-only triplet loss over mined triplets (the
/// teacher's own pre-training objective).
TrainResult train_teacher(const Dataset& ds, const TeacherConfig& config,
                          const TrainConfig& train);

/// Cross-metric distillation: the teacher runs frozen (its gradients are
/// asserted to stay exactly zero), the student minimizes
/// hard + soft + masked cross-metric terms.
TrainResult distill_student(const Dataset& ds, const TeacherConfig& teacher_config,
                            const ParameterSet& teacher_params, const StudentConfig& config,
                            const TrainConfig& train);

void write_training_log(const std::filesystem::path& path,
                        const std::vector<TrainLogRecord>& log);

}  // namespace tscm
