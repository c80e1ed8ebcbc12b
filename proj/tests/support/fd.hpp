#pragma once

// Finite-difference sweep over every parameter of a model closure. The
// analytic pass binds the whole ParameterSet as tape leaves; the numeric
// pass perturbs one scalar at a time and re-evaluates frozen.

#include <algorithm>
#include <cmath>
#include <functional>

#include "tscm/gradcheck.hpp"
#include "tscm/params.hpp"
#include "tscm/tensor.hpp"

namespace fdcheck {

struct ParamSweepResult {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::size_t skipped_coords = 0;
    bool hinge_boundary = false;
};

/// loss_fn builds a scalar loss from bound parameters; the tape argument
/// is non-null only for the analytic pass.
using ParamLossFn = std::function<tscm::Tensor(const tscm::BoundParams&, tscm::Tape&)>;

inline ParamSweepResult check_param_grads(tscm::ParameterSet& params,
                                          const ParamLossFn& loss_fn, double step = 1e-6) {
    ParamSweepResult res;

    params.zero_grads();
    {
        tscm::Tape tape;
        tscm::BoundParams bound(params, tape);
        tscm::Tensor loss = loss_fn(bound, tape);
        tape.backward(loss);
        bound.collect_grads();
        res.hinge_boundary = tape.hinge_boundary_hit();
    }

    auto eval = [&](double* y, std::uint64_t* pattern) {
        tscm::Tape tape;
        tscm::BoundParams frozen_on_tape(params, tape);  // leaves, but no backward
        *y = loss_fn(frozen_on_tape, tape).item();
        *pattern = tape.relu_pattern();
        res.hinge_boundary = res.hinge_boundary || tape.hinge_boundary_hit();
    };

    for (tscm::Parameter& p : params.params()) {
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double saved = p.value[i];
            double up, down;
            std::uint64_t pat_up, pat_down;
            p.value[i] = saved + step;
            eval(&up, &pat_up);
            p.value[i] = saved - step;
            eval(&down, &pat_down);
            p.value[i] = saved;
            if (pat_up != pat_down) {
                ++res.skipped_coords;
                continue;
            }
            const double num = (up - down) / (2.0 * step);
            const double err = std::abs(p.grad[i] - num) / std::max(1.0, std::abs(num));
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.coords_checked;
        }
    }
    return res;
}

}  // namespace fdcheck
