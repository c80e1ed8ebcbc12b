#include "tscm/losses.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace tscm {

void CrossTermMask::validate() const {
    if (any_push() && !any_pull())
        throw ConfigError("cross-term mask: push terms (d3/d4) need at least one pull term");
}

CrossTermMask CrossTermMask::parse(const std::string& terms) {
    CrossTermMask mask;
    std::stringstream ss(terms);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        std::string t;
        for (char ch : tok)
            if (!std::isspace(static_cast<unsigned char>(ch)))
                t += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (t.empty()) continue;
        if (t == "d1")
            mask.sa_tp = true;
        else if (t == "d2")
            mask.sp_ta = true;
        else if (t == "d3")
            mask.sa_tn = true;
        else if (t == "d4")
            mask.sn_ta = true;
        else
            throw ConfigError("cross-term mask: unknown term '" + tok + "'");
    }
    mask.validate();
    return mask;
}

std::string CrossTermMask::str() const {
    std::string s;
    auto append = [&s](const char* t) {
        if (!s.empty()) s += ',';
        s += t;
    };
    if (sa_tp) append("d1");
    if (sp_ta) append("d2");
    if (sa_tn) append("d3");
    if (sn_ta) append("d4");
    return s;
}

Tensor distance_sq(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape())
        throw DimensionError("distance: width mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
    Tensor d = sub(x, y);
    return reduce_sum(mul(d, d));
}

Tensor distance_euclidean(const Tensor& x, const Tensor& y) {
    return sqrt_elem(distance_sq(x, y));
}

namespace {

void require_student(const TripletEmbeddings& e) {
    if (!e.student_anchor.defined() || !e.student_positive.defined())
        throw NumericError("loss: student anchor/positive missing");
    if (e.margin <= 0.0) throw ConfigError("loss: margin must be positive");
}

void require_teacher(const TripletEmbeddings& e) {
    if (!e.teacher_anchor.defined() || !e.teacher_positive.defined())
        throw NumericError("loss: teacher embeddings missing");
    if (e.teacher_negatives.size() != e.student_negatives.size())
        throw NumericError("loss: teacher/student negative counts disagree");
}

Tensor mean_of(std::vector<Tensor> terms) {
    Tensor sum = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) sum = add(sum, terms[i]);
    return scale(sum, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

Tensor triplet_loss(const TripletEmbeddings& e) {
    require_student(e);
    if (e.student_negatives.empty())
        throw NumericError("triplet_loss: at least one negative required");
    Tensor d_ap = distance_sq(e.student_anchor, e.student_positive);
    std::vector<Tensor> hinges;
    hinges.reserve(e.student_negatives.size());
    for (const Tensor& neg : e.student_negatives) {
        Tensor d_an = distance_sq(e.student_anchor, neg);
        hinges.push_back(relu(add_const(sub(d_ap, d_an), e.margin)));
    }
    return mean_of(std::move(hinges));
}

Tensor triplet_loss(std::span<const TripletEmbeddings> batch) {
    if (batch.empty()) return Tensor::scalar(0.0);
    std::vector<Tensor> terms;
    terms.reserve(batch.size());
    for (const TripletEmbeddings& e : batch) terms.push_back(triplet_loss(e));
    return mean_of(std::move(terms));
}

Tensor soft_kd_loss(std::span<const TripletEmbeddings> batch) {
    if (batch.empty()) return Tensor::scalar(0.0);
    std::vector<Tensor> terms;
    terms.reserve(batch.size());
    for (const TripletEmbeddings& e : batch) {
        require_student(e);
        require_teacher(e);
        Tensor t = add(distance_sq(e.student_anchor, detach(e.teacher_anchor)),
                       distance_sq(e.student_positive, detach(e.teacher_positive)));
        if (!e.student_negatives.empty()) {
            std::vector<Tensor> negs;
            negs.reserve(e.student_negatives.size());
            for (std::size_t i = 0; i < e.student_negatives.size(); ++i)
                negs.push_back(
                    distance_sq(e.student_negatives[i], detach(e.teacher_negatives[i])));
            t = add(t, mean_of(std::move(negs)));
        }
        terms.push_back(t);
    }
    return mean_of(std::move(terms));
}

Tensor cross_metric_loss(std::span<const TripletEmbeddings> batch, const CrossTermMask& mask,
                         double margin) {
    mask.validate();
    if (batch.empty() || !mask.any()) return Tensor::scalar(0.0);
    std::vector<Tensor> terms;
    terms.reserve(batch.size());
    for (const TripletEmbeddings& e : batch) {
        require_student(e);
        require_teacher(e);
        Tensor pull = Tensor::scalar(0.0);
        if (mask.sa_tp)
            pull = add(pull, distance_sq(e.student_anchor, detach(e.teacher_positive)));
        if (mask.sp_ta)
            pull = add(pull, distance_sq(e.student_positive, detach(e.teacher_anchor)));
        if (!mask.any_push()) {
            terms.push_back(pull);
            continue;
        }
        if (e.student_negatives.empty())
            throw NumericError("cross_metric_loss: push terms need negatives");
        std::vector<Tensor> hinges;
        hinges.reserve(e.student_negatives.size());
        for (std::size_t i = 0; i < e.student_negatives.size(); ++i) {
            Tensor push = Tensor::scalar(0.0);
            if (mask.sa_tn)
                push = add(push,
                           distance_sq(e.student_anchor, detach(e.teacher_negatives[i])));
            if (mask.sn_ta)
                push = add(push,
                           distance_sq(e.student_negatives[i], detach(e.teacher_anchor)));
            hinges.push_back(relu(add_const(sub(pull, push), margin)));
        }
        terms.push_back(mean_of(std::move(hinges)));
    }
    return mean_of(std::move(terms));
}

Tensor total_loss(std::span<const TripletEmbeddings> batch, const CrossTermMask& mask,
                  const LossWeights& weights, LossBreakdown* breakdown) {
    mask.validate();
    Tensor total = Tensor::scalar(0.0);
    LossBreakdown b;
    b.empty_batch = batch.empty();
    if (weights.hard != 0.0) {
        Tensor hard = triplet_loss(batch);
        b.hard = hard.item();
        total = add(total, weights.hard == 1.0 ? hard : scale(hard, weights.hard));
    }
    if (weights.soft != 0.0) {
        Tensor soft = soft_kd_loss(batch);
        b.soft = soft.item();
        total = add(total, weights.soft == 1.0 ? soft : scale(soft, weights.soft));
    }
    if (weights.cross != 0.0 && mask.any()) {
        const double margin = batch.empty() ? 0.1 : batch.front().margin;
        Tensor cross = cross_metric_loss(batch, mask, margin);
        b.cross = cross.item();
        total = add(total, weights.cross == 1.0 ? cross : scale(cross, weights.cross));
    }
    b.total = total.item();
    if (breakdown) *breakdown = b;
    return total;
}

}  // namespace tscm
