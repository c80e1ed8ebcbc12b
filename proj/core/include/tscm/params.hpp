#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tscm/tensor.hpp"

namespace tscm {

/// Named trainable array with a persistent gradient buffer.
struct Parameter {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;     // same length as value
    std::size_t init_fan_in = 0;  // 0 -> zero-initialized (biases)

    std::size_t numel() const { return value.size(); }
};

/// Ordered collection of parameters; order is the registration order and
/// drives seeded initialization and checkpoint layout.
class ParameterSet {
public:
    Parameter& add(std::string name, std::vector<std::size_t> shape, std::size_t fan_in = 0);
    Parameter& at(std::string_view name);
    const Parameter& at(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t count_scalars() const;
    void zero_grads();
    bool grads_all_zero() const;

    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// He-style uniform fan-in init for weights (bound sqrt(6/fan_in)),
/// zeros for parameters registered without a fan-in. Deterministic per seed.
void init_params(ParameterSet& set, std::uint64_t seed);

/// Tensor bindings for one forward pass. Bound to a tape, each parameter
/// becomes a gradient-requiring leaf; bound frozen, parameters enter the
/// graph as detached constants and no gradient can reach them.
class BoundParams {
public:
    /// Frozen inference binding.
    explicit BoundParams(const ParameterSet& set);
    /// Trainable binding: leaves recorded on the tape.
    BoundParams(ParameterSet& set, Tape& tape);

    Tensor operator[](std::string_view name) const;
    /// Copies leaf gradients back into Parameter::grad (zeros where the
    /// backward sweep never reached a leaf).
    void collect_grads();
    bool trainable() const { return mutable_set_ != nullptr; }

private:
    const ParameterSet* set_;
    ParameterSet* mutable_set_ = nullptr;
    std::vector<Tensor> bound_;
};

/// Dataset-independent 64-bit mix for deriving sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace tscm
