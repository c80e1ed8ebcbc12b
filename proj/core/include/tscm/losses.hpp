#pragma once

#include <span>
#include <string>
#include <vector>

#include "tscm/tensor.hpp"

namespace tscm {

/// Student and teacher descriptors for one mined triplet. Teacher entries
/// are treated as constants by every loss: gradients never flow into them.
/// Multiple negatives per anchor are averaged.
struct TripletEmbeddings {
    Tensor student_anchor, student_positive;
    std::vector<Tensor> student_negatives;
    Tensor teacher_anchor, teacher_positive;
    std::vector<Tensor> teacher_negatives;
    double margin = 0.1;

    bool has_teacher() const { return teacher_anchor.defined(); }
};

/// Which cross-model distance terms participate: pull terms d(S(a),T(p)),
/// d(S(p),T(a)) and push terms d(S(a),T(n)), d(S(n),T(a)). A push term
/// without any pull term is rejected (the hinge needs something to pull).
struct CrossTermMask {
    bool sa_tp = false;  // D1
    bool sp_ta = false;  // D2
    bool sa_tn = false;  // D3
    bool sn_ta = false;  // D4

    bool any() const { return sa_tp || sp_ta || sa_tn || sn_ta; }
    bool any_pull() const { return sa_tp || sp_ta; }
    bool any_push() const { return sa_tn || sn_ta; }
    void validate() const;

    static CrossTermMask all_four() { return {true, true, true, true}; }
    static CrossTermMask pull_only() { return {true, true, false, false}; }
    /// Parses "d1,d2[,d3][,d4]" (case-insensitive, empty string allowed).
    static CrossTermMask parse(const std::string& terms);
    std::string str() const;
};

/// Squared Euclidean distance between equal-width descriptors: the d(.)
/// used by every loss in this module.
Tensor distance_sq(const Tensor& x, const Tensor& y);
/// Plain Euclidean distance behind the same contract, for callers that
/// want the unsquared metric. Not differentiable at coincident inputs
/// (subgradient 0 there).
Tensor distance_euclidean(const Tensor& x, const Tensor& y);

/// Hinged student-only triplet loss, averaged over negatives:
/// mean_n max{ d(S_a,S_p) - d(S_a,S_n) + m, 0 }.
Tensor triplet_loss(const TripletEmbeddings& e);
/// Batch mean of the above.
Tensor triplet_loss(std::span<const TripletEmbeddings> batch);

/// Soft-target alignment, batch mean of
/// d(S(a),T(a)) + d(S(p),T(p)) + mean_n d(S(n),T(n)). Empty batches yield
/// zero (callers may surface the warning via LossBreakdown).
Tensor soft_kd_loss(std::span<const TripletEmbeddings> batch);

/// Cross-model distance terms under a mask. With any push term enabled the
/// per-triplet value is hinged, max{ pulls - pushes + m, 0 }, then batch
/// averaged; with pull terms only it is the unhinged batch mean of the
/// enabled pull distances. An empty mask yields zero.
Tensor cross_metric_loss(std::span<const TripletEmbeddings> batch, const CrossTermMask& mask,
                         double margin);

struct LossWeights {
    double hard = 1.0, soft = 1.0, cross = 1.0;
};

struct LossBreakdown {
    double hard = 0.0, soft = 0.0, cross = 0.0, total = 0.0;
    bool empty_batch = false;
};

/// Weighted sum of the three components (zero-weight components are
/// skipped entirely). Default weights reproduce the plain unweighted sum.
Tensor total_loss(std::span<const TripletEmbeddings> batch, const CrossTermMask& mask,
                  const LossWeights& weights = {}, LossBreakdown* breakdown = nullptr);

}  // namespace tscm
