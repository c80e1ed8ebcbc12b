#include "tscm/models.hpp"

#include <cmath>
#include <fstream>

#include "tscm/binary_io.hpp"

namespace tscm {

namespace {

constexpr char kCheckpointMagic[8] = {'T', 'S', 'C', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::size_t square_grid(std::size_t tokens, const char* who) {
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(double(tokens))));
    if (g == 0 || g * g != tokens)
        throw ConfigError(std::string(who) + ": tokens must be a perfect square, got " +
                          std::to_string(tokens));
    return g;
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const char* who) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        if (!known)
            throw ConfigError(std::string(who) + ": unknown key '" + it.key() + "'");
    }
}

void vlad_to_json(nlohmann::json& j, const NetVladSpec& s) {
    j = {{"feature_size", s.feature_size}, {"clusters", s.clusters}, {"d_output", s.d_output}};
}

NetVladSpec vlad_from_json(const nlohmann::json& j, const char* who) {
    check_keys(j, {"feature_size", "clusters", "d_output"}, who);
    NetVladSpec s;
    s.feature_size = j.at("feature_size").get<std::size_t>();
    s.clusters = j.at("clusters").get<std::size_t>();
    s.d_output = j.at("d_output").get<std::size_t>();
    return s;
}

}  // namespace

std::size_t TeacherConfig::grid() const { return square_grid(tokens, "teacher config"); }

std::size_t TeacherConfig::descriptor_width() const {
    return inter_vlad.d_output + (use_resnet_branch ? side_vlad.d_output : 0) +
           mid_feature_width;
}

void TeacherConfig::validate() const {
    const std::size_t g = grid();
    if (channels == 0 || height == 0 || width == 0)
        throw ConfigError("teacher config: zero image extent");
    if (height % g != 0 || width % g != 0)
        throw ConfigError("teacher config: token grid does not divide the image");
    CrossAttentionSpec{d_model, n_heads}.validate();
    inter_vlad.validate();
    if (inter_vlad.feature_size != 2 * d_model)
        throw ConfigError("teacher config: inter_vlad.feature_size must be 2*d_model");
    if (use_resnet_branch) {
        side_vlad.validate();
        if (side_vlad.feature_size != d_model)
            throw ConfigError("teacher config: side_vlad.feature_size must be d_model");
    }
    if (descriptor_width() == 0)
        throw ConfigError("teacher config: no branch enabled");
}

std::size_t StudentConfig::grid() const { return square_grid(tokens, "student config"); }

std::size_t StudentConfig::descriptor_width() const {
    return backbone_vlad.d_output + replace_vlad.d_output;
}

void StudentConfig::validate() const {
    const std::size_t g = grid();
    if (channels == 0 || height == 0 || width == 0)
        throw ConfigError("student config: zero image extent");
    if (height % g != 0 || width % g != 0)
        throw ConfigError("student config: token grid does not divide the image");
    backbone_vlad.validate();
    replace_vlad.validate();
    if (backbone_vlad.feature_size != backbone_channels ||
        replace_vlad.feature_size != replace_channels)
        throw ConfigError("student config: NetVLAD feature_size must match conv channels");
}

void to_json(nlohmann::json& j, const TeacherConfig& c) {
    j = nlohmann::json{{"channels", c.channels},
                       {"height", c.height},
                       {"width", c.width},
                       {"tokens", c.tokens},
                       {"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"d_ff", c.d_ff},
                       {"use_resnet_branch", c.use_resnet_branch},
                       {"drop_last_stage", c.drop_last_stage},
                       {"use_inter_encoder", c.use_inter_encoder},
                       {"mid_feature_width", c.mid_feature_width}};
    vlad_to_json(j["inter_vlad"], c.inter_vlad);
    vlad_to_json(j["side_vlad"], c.side_vlad);
}

void from_json(const nlohmann::json& j, TeacherConfig& c) {
    check_keys(j,
               {"channels", "height", "width", "tokens", "d_model", "n_heads", "d_ff",
                "use_resnet_branch", "drop_last_stage", "use_inter_encoder",
                "mid_feature_width", "inter_vlad", "side_vlad"},
               "teacher config");
    c.channels = j.at("channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.tokens = j.at("tokens").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.use_resnet_branch = j.at("use_resnet_branch").get<bool>();
    c.drop_last_stage = j.at("drop_last_stage").get<bool>();
    c.use_inter_encoder = j.at("use_inter_encoder").get<bool>();
    c.mid_feature_width = j.at("mid_feature_width").get<std::size_t>();
    c.inter_vlad = vlad_from_json(j.at("inter_vlad"), "teacher config inter_vlad");
    c.side_vlad = vlad_from_json(j.at("side_vlad"), "teacher config side_vlad");
}

void to_json(nlohmann::json& j, const StudentConfig& c) {
    j = nlohmann::json{{"channels", c.channels},
                       {"height", c.height},
                       {"width", c.width},
                       {"tokens", c.tokens},
                       {"backbone_channels", c.backbone_channels},
                       {"replace_channels", c.replace_channels}};
    vlad_to_json(j["backbone_vlad"], c.backbone_vlad);
    vlad_to_json(j["replace_vlad"], c.replace_vlad);
}

void from_json(const nlohmann::json& j, StudentConfig& c) {
    check_keys(j,
               {"channels", "height", "width", "tokens", "backbone_channels",
                "replace_channels", "backbone_vlad", "replace_vlad"},
               "student config");
    c.channels = j.at("channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.tokens = j.at("tokens").get<std::size_t>();
    c.backbone_channels = j.at("backbone_channels").get<std::size_t>();
    c.replace_channels = j.at("replace_channels").get<std::size_t>();
    c.backbone_vlad = vlad_from_json(j.at("backbone_vlad"), "student config backbone_vlad");
    c.replace_vlad = vlad_from_json(j.at("replace_vlad"), "student config replace_vlad");
}

Descriptor::Descriptor(std::vector<double> values) : v(std::move(values)) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-8)
        throw NumericError("Descriptor: not unit norm (" + std::to_string(std::sqrt(sq)) +
                           ")");
}

ParameterSet teacher_parameter_set(const TeacherConfig& c) {
    c.validate();
    ParameterSet set;
    add_conv_stage(set, "res.stage1", {c.channels, c.d_model});
    add_conv_stage(set, "res.stage2", {c.d_model, c.d_model});
    add_conv_stage(set, "vit.stage1", {c.channels, c.d_model});
    if (c.use_inter_encoder) {
        InterTransformerSpec itf{{c.d_model, c.n_heads}, {c.d_model, c.d_ff}};
        add_inter_transformer(set, "inter", itf);
    }
    add_netvlad(set, "inter_vlad", c.inter_vlad);
    if (c.use_resnet_branch) add_netvlad(set, "side_vlad", c.side_vlad);
    if (c.mid_feature_width > 0)
        add_linear(set, "mid_head", {c.d_model, c.mid_feature_width});
    return set;
}

ParameterSet student_parameter_set(const StudentConfig& c) {
    c.validate();
    ParameterSet set;
    add_conv_stage(set, "backbone.stage1", {c.channels, c.backbone_channels});
    add_conv_stage(set, "replace.stage1", {c.channels, c.replace_channels});
    add_netvlad(set, "backbone_vlad", c.backbone_vlad);
    add_netvlad(set, "replace_vlad", c.replace_vlad);
    return set;
}

ParameterSet make_teacher_params(const TeacherConfig& config, std::uint64_t seed) {
    ParameterSet set = teacher_parameter_set(config);
    init_params(set, seed);
    return set;
}

ParameterSet make_student_params(const StudentConfig& config, std::uint64_t seed) {
    ParameterSet set = student_parameter_set(config);
    init_params(set, seed);
    return set;
}

namespace {
void check_image(const Tensor& image, std::size_t c, std::size_t h, std::size_t w,
                 const char* who) {
    const std::vector<std::size_t> want{c, h, w};
    if (image.shape() != want)
        throw DimensionError(std::string(who) + ": image " + shape_str(image.shape()) +
                             " does not match configured " + shape_str(want));
}
}  // namespace

Tensor teacher_forward(const TeacherConfig& c, const BoundParams& p, const Tensor& image) {
    c.validate();
    check_image(image, c.channels, c.height, c.width, "teacher_forward");
    const std::size_t g = c.grid();

    Tensor res1 = conv_stage(p, "res.stage1", image);
    Tensor res_sel = c.drop_last_stage ? res1 : conv_stage(p, "res.stage2", res1);
    Tensor res_tokens = patch_tokens(res_sel, g);

    Tensor vit_tokens = patch_tokens(conv_stage(p, "vit.stage1", image), g);

    Tensor fused;
    if (c.use_inter_encoder) {
        InterTransformerSpec itf{{c.d_model, c.n_heads}, {c.d_model, c.d_ff}};
        fused = inter_transformer_encode(p, "inter", itf, res_tokens, vit_tokens);
    } else {
        fused = concat(res_tokens, vit_tokens);
    }
    Tensor descriptor = netvlad(p, "inter_vlad", c.inter_vlad, fused);

    if (c.use_resnet_branch)
        descriptor = concat(descriptor, netvlad(p, "side_vlad", c.side_vlad, res_tokens));
    if (c.mid_feature_width > 0)
        descriptor =
            concat(descriptor, l2_normalize(linear(p, "mid_head", global_mean_pool(res_sel))));

    return l2_normalize(descriptor);
}

Tensor student_forward(const StudentConfig& c, const BoundParams& p, const Tensor& image) {
    c.validate();
    check_image(image, c.channels, c.height, c.width, "student_forward");
    const std::size_t g = c.grid();

    Tensor a_tokens = patch_tokens(conv_stage(p, "backbone.stage1", image), g);
    Tensor b_tokens = patch_tokens(conv_stage(p, "replace.stage1", image), g);
    Tensor descriptor = concat(netvlad(p, "backbone_vlad", c.backbone_vlad, a_tokens),
                               netvlad(p, "replace_vlad", c.replace_vlad, b_tokens));
    return l2_normalize(descriptor);
}

std::string to_string(ModelKind kind) {
    return kind == ModelKind::teacher ? "teacher" : "student";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "teacher") return ModelKind::teacher;
    if (s == "student") return ModelKind::student;
    throw DataError("unknown model kind '" + s + "'");
}

std::size_t Checkpoint::descriptor_width() const {
    return kind == ModelKind::teacher ? teacher_config.descriptor_width()
                                      : student_config.descriptor_width();
}

Tensor Checkpoint::forward(const BoundParams& p, const Tensor& image) const {
    return kind == ModelKind::teacher ? teacher_forward(teacher_config, p, image)
                                      : student_forward(student_config, p, image);
}

Descriptor Checkpoint::infer(const Tensor& image) const {
    BoundParams frozen(params);
    return Descriptor(forward(frozen, image).values());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open checkpoint for writing: " + path.string());
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    bio::write_pod<std::uint32_t>(os, kCheckpointVersion);
    bio::write_string(os, to_string(ckpt.kind));
    nlohmann::json cfg;
    if (ckpt.kind == ModelKind::teacher)
        cfg = ckpt.teacher_config;
    else
        cfg = ckpt.student_config;
    bio::write_string(os, cfg.dump());
    bio::write_pod<std::uint64_t>(os, ckpt.params.size());
    for (const Parameter& p : ckpt.params.params()) {
        bio::write_string(os, p.name);
        bio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.shape.size()));
        for (std::size_t d : p.shape) bio::write_pod<std::uint64_t>(os, d);
        bio::write_array(os, p.value);
    }
    if (!os) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint: " + path.string());
    bio::expect_magic(is, kCheckpointMagic, sizeof(kCheckpointMagic), "checkpoint");
    const auto version = bio::read_pod<std::uint32_t>(is, "checkpoint version");
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint version " + std::to_string(version) +
                           " unsupported (expected " + std::to_string(kCheckpointVersion) +
                           ")");
    Checkpoint ckpt;
    ckpt.kind = model_kind_from_string(bio::read_string(is, "checkpoint kind"));
    const nlohmann::json cfg = nlohmann::json::parse(
        bio::read_string(is, "checkpoint config"), nullptr, false);
    if (cfg.is_discarded()) throw DataError("checkpoint config is not valid JSON");
    // Re-register from config so ordering, shapes, and fan-in metadata all
    // come from the model definition, then fill values from the file.
    if (ckpt.kind == ModelKind::teacher) {
        ckpt.teacher_config = cfg.get<TeacherConfig>();
        ckpt.params = teacher_parameter_set(ckpt.teacher_config);
    } else {
        ckpt.student_config = cfg.get<StudentConfig>();
        ckpt.params = student_parameter_set(ckpt.student_config);
    }
    const auto count = bio::read_pod<std::uint64_t>(is, "checkpoint parameter count");
    if (count != ckpt.params.size())
        throw DataError("checkpoint parameter count " + std::to_string(count) +
                        " does not match config (" + std::to_string(ckpt.params.size()) + ")");
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = bio::read_string(is, "parameter name");
        if (!ckpt.params.contains(name))
            throw DataError("checkpoint parameter '" + name + "' unknown to this config");
        Parameter& p = ckpt.params.at(name);
        const auto rank = bio::read_pod<std::uint32_t>(is, "parameter rank");
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape)
            d = static_cast<std::size_t>(bio::read_pod<std::uint64_t>(is, "parameter dim"));
        if (shape != p.shape)
            throw DataError("checkpoint parameter '" + name + "' shape " + shape_str(shape) +
                            " does not match config " + shape_str(p.shape));
        bio::read_array(is, p.value, p.numel(), "parameter values");
    }
    return ckpt;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open for hashing: " + path.string());
    std::uint64_t h = 1469598103934665603ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
        if (!is) break;
    }
    return h;
}

}  // namespace tscm
