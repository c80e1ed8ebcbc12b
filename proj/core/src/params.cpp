#include "tscm/params.hpp"

#include <cmath>
#include <random>

namespace tscm {

Parameter& ParameterSet::add(std::string name, std::vector<std::size_t> shape,
                             std::size_t fan_in) {
    if (index_.count(name))
        throw ConfigError("ParameterSet: duplicate parameter '" + name + "'");
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ConfigError("ParameterSet: zero extent in '" + name + "'");
        n *= d;
    }
    Parameter p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.value.assign(n, 0.0);
    p.grad.assign(n, 0.0);
    p.init_fan_in = fan_in;
    index_.emplace(p.name, params_.size());
    params_.push_back(std::move(p));
    return params_.back();
}

Parameter& ParameterSet::at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end())
        throw ConfigError("ParameterSet: unknown parameter '" + std::string(name) + "'");
    return params_[it->second];
}

const Parameter& ParameterSet::at(std::string_view name) const {
    return const_cast<ParameterSet*>(this)->at(name);
}

bool ParameterSet::contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
}

std::size_t ParameterSet::count_scalars() const {
    std::size_t n = 0;
    for (const Parameter& p : params_) n += p.numel();
    return n;
}

void ParameterSet::zero_grads() {
    for (Parameter& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

bool ParameterSet::grads_all_zero() const {
    for (const Parameter& p : params_)
        for (double g : p.grad)
            if (g != 0.0) return false;
    return true;
}

void init_params(ParameterSet& set, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Parameter& p : set.params()) {
        if (p.init_fan_in == 0) {
            std::fill(p.value.begin(), p.value.end(), 0.0);
            continue;
        }
        const double bound = std::sqrt(6.0 / static_cast<double>(p.init_fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : p.value) v = dist(rng);
    }
}

BoundParams::BoundParams(const ParameterSet& set) : set_(&set) {
    bound_.reserve(set.size());
    for (const Parameter& p : set.params()) bound_.push_back(Tensor::from(p.shape, p.value));
}

BoundParams::BoundParams(ParameterSet& set, Tape& tape) : set_(&set), mutable_set_(&set) {
    bound_.reserve(set.size());
    for (Parameter& p : set.params()) bound_.push_back(tape.variable(p.shape, p.value));
}

Tensor BoundParams::operator[](std::string_view name) const {
    const Parameter& p = set_->at(name);
    return bound_[&p - set_->params().data()];
}

void BoundParams::collect_grads() {
    if (!mutable_set_) throw NumericError("collect_grads: parameters were bound frozen");
    for (std::size_t i = 0; i < bound_.size(); ++i)
        mutable_set_->params()[i].grad = bound_[i].grad();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer over seed ^ rotated salt
    std::uint64_t z = seed ^ (salt * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace tscm
