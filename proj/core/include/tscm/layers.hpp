#pragma once

#include <string>
#include <vector>

#include "tscm/params.hpp"
#include "tscm/tensor.hpp"

namespace tscm {

// Layers register their parameters under a dotted prefix in a ParameterSet
// and run on the tensors a BoundParams hands out, so the same code serves
// training (leaf-bound) and frozen inference (constant-bound).

struct LinearSpec {
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

struct CrossAttentionSpec {
    std::size_t d_model = 512;
    std::size_t n_heads = 4;

    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;
};

struct FfnSpec {
    std::size_t d_model = 512;
    std::size_t d_ff = 1024;
};

struct InterTransformerSpec {
    CrossAttentionSpec attention;
    FfnSpec ffn;
};

struct NetVladSpec {
    std::size_t feature_size = 0;
    std::size_t clusters = 64;
    std::size_t d_output = 0;

    void validate() const;
};

struct ConvStageSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
};

void add_linear(ParameterSet& set, const std::string& prefix, const LinearSpec& spec);
void add_cross_attention(ParameterSet& set, const std::string& prefix,
                         const CrossAttentionSpec& spec);
void add_ffn(ParameterSet& set, const std::string& prefix, const FfnSpec& spec);
void add_inter_transformer(ParameterSet& set, const std::string& prefix,
                           const InterTransformerSpec& spec);
void add_netvlad(ParameterSet& set, const std::string& prefix, const NetVladSpec& spec);
void add_conv_stage(ParameterSet& set, const std::string& prefix, const ConvStageSpec& spec);

/// x * W + b for a vector or a row-major token matrix.
Tensor linear(const BoundParams& p, const std::string& prefix, const Tensor& x);

/// Scaled dot-product attention where queries come from one branch and
/// keys/values from the other: per head softmax(Q K^T / sqrt(d_k)) V,
/// heads concatenated and output-projected. Optionally returns the
/// per-head attention weight matrices.
Tensor cross_attention(const BoundParams& p, const std::string& prefix,
                       const CrossAttentionSpec& spec, const Tensor& x_query,
                       const Tensor& x_kv, std::vector<Tensor>* attention_out = nullptr);

/// FFN(f_att + f_in) + f_att + f_in; collapses to plain addition when the
/// FFN output layer is zero.
Tensor ffn_residual(const BoundParams& p, const std::string& prefix, const FfnSpec& spec,
                    const Tensor& f_att, const Tensor& f_in);

/// Two-branch encoder: each branch attends over the other's keys/values,
/// passes through its residual FFN, and the branch outputs are
/// concatenated along the feature axis (width doubles).
Tensor inter_transformer_encode(const BoundParams& p, const std::string& prefix,
                                const InterTransformerSpec& spec, const Tensor& f_res,
                                const Tensor& f_vit);

/// Soft-assignment VLAD aggregation over t local features, intra- and
/// globally normalized, projected to d_output, unit-norm output.
Tensor netvlad(const BoundParams& p, const std::string& prefix, const NetVladSpec& spec,
               const Tensor& features);

/// The flattened, L2-normalized VLAD block before the output projection.
/// When its norm falls below 1e-12 a fixed unit basis vector is
/// substituted so downstream stays finite.
Tensor netvlad_pre_projection(const BoundParams& p, const std::string& prefix,
                              const NetVladSpec& spec, const Tensor& features);

/// 3x3 conv + relu, spatial size preserved.
Tensor conv_stage(const BoundParams& p, const std::string& prefix, const Tensor& image);

}  // namespace tscm
