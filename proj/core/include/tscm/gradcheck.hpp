#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "tscm/tensor.hpp"

namespace tscm {

struct GradCheckResult {
    double max_rel_err = 0.0;
    /// True when an evaluation landed within Tape::kink_tolerance of a relu
    /// kink; comparisons there check a subgradient and are skipped.
    bool hinge_boundary = false;
    /// Coordinates whose +/-step evaluations straddled a hinge (their
    /// central difference is meaningless and they are not compared).
    std::size_t skipped_coords = 0;
};

using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Central finite differences against the reverse-mode gradient.
/// Per-coordinate error is |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double step = 1e-6) {
    GradCheckResult res;
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor leaf = tape.variable(x.shape(), x.values());
        Tensor loss = f(tape, leaf);
        if (loss.numel() != 1) throw NumericError("grad_check: f must be scalar-valued");
        tape.backward(loss);
        analytic = leaf.grad();
        res.hinge_boundary = tape.hinge_boundary_hit();
    }
    const std::vector<double>& base = x.values();
    struct Eval {
        double y;
        std::uint64_t pattern;
    };
    auto eval = [&](std::vector<double> v) -> Eval {
        Tape tape;
        Tensor leaf = tape.constant(x.shape(), std::move(v));
        const double y = f(tape, leaf).item();
        res.hinge_boundary = res.hinge_boundary || tape.hinge_boundary_hit();
        return {y, tape.relu_pattern()};
    };
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> hi = base, lo = base;
        hi[i] += step;
        lo[i] -= step;
        const Eval up = eval(std::move(hi));
        const Eval down = eval(std::move(lo));
        if (up.pattern != down.pattern) {
            ++res.skipped_coords;
            continue;
        }
        const double num = (up.y - down.y) / (2.0 * step);
        const double err = std::abs(analytic[i] - num) / std::max(1.0, std::abs(num));
        res.max_rel_err = std::max(res.max_rel_err, err);
    }
    return res;
}

}  // namespace tscm
