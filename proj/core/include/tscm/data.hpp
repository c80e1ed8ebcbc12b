#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tscm/tensor.hpp"

namespace tscm {

/// Synthetic place world: latent per-place signatures on a jittered grid,
/// rendered into views through nuisance transforms. Grid pitch stays above
/// twice the negative radius so place identity and geographic proximity
/// coincide.
struct SyntheticWorldConfig {
    std::size_t n_places = 8;
    std::size_t views_per_place = 20;
    std::size_t channels = 3, height = 32, width = 32;
    double grid_pitch = 60.0;   // meters between place cells
    double place_jitter = 4.0;  // cell-center jitter
    double view_jitter = 3.0;   // per-view offset around the place
    // nuisance magnitudes; tuned so raw-pixel retrieval stays weak while
    // the dataset remains learnable
    double brightness_sigma = 0.25;
    double contrast_sigma = 0.30;
    double noise_sigma = 0.06;
    double occlusion_prob = 0.6;
    std::size_t occlusion_max = 14;  // max square occluder edge, pixels
    std::size_t shift_max = 7;       // per-view cyclic translation, pixels
    double train_frac = 0.5, val_frac = 0.125, database_frac = 0.1875;

    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticWorldConfig& c);
void from_json(const nlohmann::json& j, SyntheticWorldConfig& c);

enum class Split { train, val, database, query };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// One observation of a place: image payload plus planar location and
/// place identity. Image values are float32-representable so payloads
/// round-trip bit-exactly through the 32-bit sidecar file.
struct PlaceSample {
    std::int64_t id = 0;
    std::int64_t place_id = 0;
    double x = 0.0, y = 0.0;
    Split split = Split::train;
    Tensor image;  // C x H x W in [0,1]
};

struct DatasetManifest {
    std::uint32_t version = 1;
    std::uint64_t seed = 0;
    SyntheticWorldConfig config;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<PlaceSample> samples;

    const PlaceSample& by_id(std::int64_t id) const;
    std::vector<const PlaceSample*> split_samples(Split s) const;
    /// Disjoint splits, finite locations, query/val ground truth present in
    /// the database split.
    void validate() const;
};

Dataset generate_synthetic(const SyntheticWorldConfig& config, std::uint64_t seed);

/// Directory layout: manifest.json + samples.bin (magic, version, then
/// per-sample little-endian float32 payloads at manifest-recorded offsets).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Distance rules for mining: positives within r_pos of the anchor,
/// negatives beyond r_neg.
struct TripletSpec {
    double r_pos = 10.0;
    double r_neg = 25.0;
    std::size_t negatives_per_anchor = 2;

    void validate() const;
};

struct MinedTriplet {
    std::int64_t anchor = 0;
    std::int64_t positive = 0;
    std::vector<std::int64_t> negatives;
};

struct MiningResult {
    std::vector<MinedTriplet> triplets;
    std::size_t skipped_anchors = 0;  // anchors with no valid positive
};

MiningResult mine_triplets(const Dataset& ds, const TripletSpec& spec, std::uint64_t seed);

/// Mean pixel-wise Pearson correlation between same-place and
/// different-place view pairs (the generation sanity statistic).
struct CorrelationStats {
    double intra_place = 0.0;
    double inter_place = 0.0;
};
CorrelationStats pixel_correlation_stats(const Dataset& ds, std::size_t max_pairs = 4000);

}  // namespace tscm
