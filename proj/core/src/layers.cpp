#include "tscm/layers.hpp"

#include <cmath>

namespace tscm {

void CrossAttentionSpec::validate() const {
    if (d_model == 0 || n_heads == 0)
        throw ConfigError("cross-attention: d_model and n_heads must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("cross-attention: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
}

void NetVladSpec::validate() const {
    if (feature_size == 0 || d_output == 0)
        throw ConfigError("netvlad: feature_size and d_output must be positive");
    if (clusters < 2) throw ConfigError("netvlad: needs at least 2 clusters");
}

void add_linear(ParameterSet& set, const std::string& prefix, const LinearSpec& spec) {
    if (spec.d_in == 0 || spec.d_out == 0)
        throw ConfigError("linear '" + prefix + "': zero dimension");
    set.add(prefix + ".weight", {spec.d_in, spec.d_out}, spec.d_in);
    set.add(prefix + ".bias", {spec.d_out});
}

void add_cross_attention(ParameterSet& set, const std::string& prefix,
                         const CrossAttentionSpec& spec) {
    spec.validate();
    for (const char* part : {".wq", ".wk", ".wv", ".wo"})
        set.add(prefix + part, {spec.d_model, spec.d_model}, spec.d_model);
}

void add_ffn(ParameterSet& set, const std::string& prefix, const FfnSpec& spec) {
    add_linear(set, prefix + ".fc1", {spec.d_model, spec.d_ff});
    add_linear(set, prefix + ".fc2", {spec.d_ff, spec.d_model});
}

void add_inter_transformer(ParameterSet& set, const std::string& prefix,
                           const InterTransformerSpec& spec) {
    if (spec.attention.d_model != spec.ffn.d_model)
        throw ConfigError("inter-transformer '" + prefix + "': attention/ffn width mismatch");
    add_cross_attention(set, prefix + ".res.attn", spec.attention);
    add_ffn(set, prefix + ".res.ffn", spec.ffn);
    add_cross_attention(set, prefix + ".vit.attn", spec.attention);
    add_ffn(set, prefix + ".vit.ffn", spec.ffn);
}

void add_netvlad(ParameterSet& set, const std::string& prefix, const NetVladSpec& spec) {
    spec.validate();
    set.add(prefix + ".assign_w", {spec.feature_size, spec.clusters}, spec.feature_size);
    set.add(prefix + ".assign_b", {spec.clusters});
    set.add(prefix + ".centers", {spec.clusters, spec.feature_size}, spec.feature_size);
    add_linear(set, prefix + ".proj", {spec.clusters * spec.feature_size, spec.d_output});
}

void add_conv_stage(ParameterSet& set, const std::string& prefix, const ConvStageSpec& spec) {
    if (spec.in_channels == 0 || spec.out_channels == 0)
        throw ConfigError("conv stage '" + prefix + "': zero channel count");
    set.add(prefix + ".weight", {spec.out_channels, spec.in_channels, 3, 3},
            spec.in_channels * 9);
    set.add(prefix + ".bias", {spec.out_channels});
}

Tensor linear(const BoundParams& p, const std::string& prefix, const Tensor& x) {
    const Tensor w = p[prefix + ".weight"];
    const Tensor b = p[prefix + ".bias"];
    if (x.rank() == 1) {
        Tensor row = reshape(x, {1, x.shape()[0]});
        Tensor out = add_rowvec(matmul(row, w), b);
        return reshape(out, {w.shape()[1]});
    }
    return add_rowvec(matmul(x, w), b);
}

Tensor cross_attention(const BoundParams& p, const std::string& prefix,
                       const CrossAttentionSpec& spec, const Tensor& x_query,
                       const Tensor& x_kv, std::vector<Tensor>* attention_out) {
    spec.validate();
    if (x_query.rank() != 2 || x_kv.rank() != 2)
        throw DimensionError("cross_attention: token matrices expected, got " +
                             shape_str(x_query.shape()) + " and " + shape_str(x_kv.shape()));
    if (x_query.shape() != x_kv.shape())
        throw DimensionError("cross_attention: branch shapes disagree, " +
                             shape_str(x_query.shape()) + " vs " + shape_str(x_kv.shape()));
    if (x_query.shape()[0] == 0) throw DimensionError("cross_attention: zero tokens");
    if (x_query.shape()[1] != spec.d_model)
        throw DimensionError("cross_attention: width " + std::to_string(x_query.shape()[1]) +
                             " != d_model " + std::to_string(spec.d_model));

    const Tensor q = matmul(x_query, p[prefix + ".wq"]);
    const Tensor k = matmul(x_kv, p[prefix + ".wk"]);
    const Tensor v = matmul(x_kv, p[prefix + ".wv"]);

    const std::size_t dk = spec.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor heads;
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
        Tensor qh = slice_last(q, h * dk, dk);
        Tensor kh = slice_last(k, h * dk, dk);
        Tensor vh = slice_last(v, h * dk, dk);
        Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
        if (attention_out) attention_out->push_back(weights);
        Tensor out = matmul(weights, vh);
        heads = h == 0 ? out : concat(heads, out);
    }
    return matmul(heads, p[prefix + ".wo"]);
}

Tensor ffn_residual(const BoundParams& p, const std::string& prefix, const FfnSpec& spec,
                    const Tensor& f_att, const Tensor& f_in) {
    if (f_att.shape() != f_in.shape())
        throw DimensionError("ffn_residual: shape mismatch " + shape_str(f_att.shape()) +
                             " vs " + shape_str(f_in.shape()));
    (void)spec;
    Tensor s = add(f_att, f_in);
    Tensor hidden = relu(linear(p, prefix + ".fc1", s));
    Tensor out = linear(p, prefix + ".fc2", hidden);
    return add(out, s);
}

Tensor inter_transformer_encode(const BoundParams& p, const std::string& prefix,
                                const InterTransformerSpec& spec, const Tensor& f_res,
                                const Tensor& f_vit) {
    if (f_res.shape() != f_vit.shape())
        throw DimensionError("inter_transformer: branch shapes disagree, " +
                             shape_str(f_res.shape()) + " vs " + shape_str(f_vit.shape()));
    Tensor res_att = cross_attention(p, prefix + ".res.attn", spec.attention, f_res, f_vit);
    Tensor res_itf = ffn_residual(p, prefix + ".res.ffn", spec.ffn, res_att, f_res);
    Tensor vit_att = cross_attention(p, prefix + ".vit.attn", spec.attention, f_vit, f_res);
    Tensor vit_itf = ffn_residual(p, prefix + ".vit.ffn", spec.ffn, vit_att, f_vit);
    return concat(res_itf, vit_itf);
}

Tensor netvlad_pre_projection(const BoundParams& p, const std::string& prefix,
                              const NetVladSpec& spec, const Tensor& features) {
    spec.validate();
    if (features.rank() != 2 || features.shape()[1] != spec.feature_size)
        throw DimensionError("netvlad: expected [t x " + std::to_string(spec.feature_size) +
                             "] features, got " + shape_str(features.shape()));
    if (features.shape()[0] == 0) throw DimensionError("netvlad: zero local features");

    Tensor logits = add_rowvec(matmul(features, p[prefix + ".assign_w"]),
                               p[prefix + ".assign_b"]);
    Tensor assign = softmax_rows(logits);  // t x K
    // V(k) = sum_i a_k(x_i) (x_i - c_k) = A^T X - diag(colsum A) C
    Tensor centers = p[prefix + ".centers"];
    Tensor vlad = sub(matmul(transpose(assign), features),
                      scale_rows(centers, col_sums(assign)));
    Tensor flat = reshape(l2_normalize_rows(vlad), {spec.clusters * spec.feature_size});

    double sq = 0.0;
    for (double x : flat.values()) sq += x * x;
    if (std::sqrt(sq) < 1e-12) {
        // all residuals vanished; hand a fixed direction to the projection
        std::vector<double> basis(spec.clusters * spec.feature_size, 0.0);
        basis[0] = 1.0;
        return Tensor::from({spec.clusters * spec.feature_size}, std::move(basis));
    }
    return l2_normalize(flat);
}

Tensor netvlad(const BoundParams& p, const std::string& prefix, const NetVladSpec& spec,
               const Tensor& features) {
    Tensor flat = netvlad_pre_projection(p, prefix, spec, features);
    return l2_normalize(linear(p, prefix + ".proj", flat));
}

Tensor conv_stage(const BoundParams& p, const std::string& prefix, const Tensor& image) {
    return relu(conv2d_3x3(image, p[prefix + ".weight"], p[prefix + ".bias"]));
}

}  // namespace tscm
