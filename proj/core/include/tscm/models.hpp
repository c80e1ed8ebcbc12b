#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tscm/layers.hpp"
#include "tscm/params.hpp"
#include "tscm/tensor.hpp"

namespace tscm {

/// Toy-scale teacher: two conv backbone stubs (ResNet-role, ViT-role),
/// an inter-transformer encoder fusing their token sequences, NetVLAD-MLP
/// heads per branch, plus a pooled mid-feature branch. The final
/// descriptor concatenates all enabled branch descriptors.
struct TeacherConfig {
    std::size_t channels = 3, height = 32, width = 32;
    std::size_t tokens = 16;  // perfect square; grid pooling over the map
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    bool use_resnet_branch = true;  // ResNet-side NetVLAD descriptor branch
    bool drop_last_stage = true;    // feed branches from the penultimate stub stage
    bool use_inter_encoder = true;  // false: plain feature concat replaces the encoder
    std::size_t mid_feature_width = 32;  // 0 disables the pooled mid-feature branch
    NetVladSpec inter_vlad{64, 8, 32};
    NetVladSpec side_vlad{32, 8, 32};

    std::size_t grid() const;
    std::size_t descriptor_width() const;
    void validate() const;
};

/// Student keeps a conv backbone branch and replaces the ViT +
/// inter-transformer pair with a single conv branch; NetVLAD heads per
/// branch, same final descriptor width as the teacher by configuration.
struct StudentConfig {
    std::size_t channels = 3, height = 32, width = 32;
    std::size_t tokens = 16;
    std::size_t backbone_channels = 24;
    std::size_t replace_channels = 24;
    NetVladSpec backbone_vlad{24, 8, 48};
    NetVladSpec replace_vlad{24, 8, 48};

    std::size_t grid() const;
    std::size_t descriptor_width() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const TeacherConfig& c);
void from_json(const nlohmann::json& j, TeacherConfig& c);
void to_json(nlohmann::json& j, const StudentConfig& c);
void from_json(const nlohmann::json& j, StudentConfig& c);

/// Unit-norm global feature vector; the currency of retrieval.
struct Descriptor {
    std::vector<double> v;

    Descriptor() = default;
    explicit Descriptor(std::vector<double> values);  // validates unit norm
    std::size_t width() const { return v.size(); }
};

/// Registers all parameters for the configuration (no initialization).
ParameterSet teacher_parameter_set(const TeacherConfig& config);
ParameterSet student_parameter_set(const StudentConfig& config);
/// Registration + seeded He-uniform init.
ParameterSet make_teacher_params(const TeacherConfig& config, std::uint64_t seed);
ParameterSet make_student_params(const StudentConfig& config, std::uint64_t seed);

Tensor teacher_forward(const TeacherConfig& config, const BoundParams& p,
                       const Tensor& image);
Tensor student_forward(const StudentConfig& config, const BoundParams& p,
                       const Tensor& image);

enum class ModelKind { teacher, student };
std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

/// A loadable model: kind, config, and parameters.
struct Checkpoint {
    ModelKind kind = ModelKind::teacher;
    TeacherConfig teacher_config;
    StudentConfig student_config;
    ParameterSet params;

    std::size_t descriptor_width() const;
    Tensor forward(const BoundParams& p, const Tensor& image) const;
    /// Frozen single-image inference.
    Descriptor infer(const Tensor& image) const;
};

// Versioned binary container of named shape-tagged arrays; 64-bit payload
// round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a hash of a file's bytes (descriptor-database provenance).
std::uint64_t fnv1a_file(const std::filesystem::path& path);

}  // namespace tscm
