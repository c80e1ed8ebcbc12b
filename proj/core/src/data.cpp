#include "tscm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "tscm/binary_io.hpp"
#include "tscm/params.hpp"  // mix_seed

namespace tscm {

namespace {
constexpr char kSamplesMagic[8] = {'T', 'S', 'C', 'M', 'S', 'M', 'P', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
}  // namespace

void SyntheticWorldConfig::validate() const {
    if (n_places < 2) throw ConfigError("synthetic world: need at least 2 places");
    if (views_per_place < 2) throw ConfigError("synthetic world: need at least 2 views");
    if (channels == 0 || height < 8 || width < 8)
        throw ConfigError("synthetic world: implausible image dims");
    if (grid_pitch <= 0 || place_jitter < 0 || view_jitter < 0)
        throw ConfigError("synthetic world: invalid geometry");
    if (train_frac <= 0 || val_frac < 0 || database_frac <= 0 ||
        train_frac + val_frac + database_frac >= 1.0)
        throw ConfigError("synthetic world: split fractions must leave room for queries");
    if (occlusion_max >= std::min(height, width))
        throw ConfigError("synthetic world: occluder larger than the image");
    if (shift_max >= std::min(height, width))
        throw ConfigError("synthetic world: shift larger than the image");
}

void to_json(nlohmann::json& j, const SyntheticWorldConfig& c) {
    j = nlohmann::json{{"n_places", c.n_places},
                       {"views_per_place", c.views_per_place},
                       {"channels", c.channels},
                       {"height", c.height},
                       {"width", c.width},
                       {"grid_pitch", c.grid_pitch},
                       {"place_jitter", c.place_jitter},
                       {"view_jitter", c.view_jitter},
                       {"brightness_sigma", c.brightness_sigma},
                       {"contrast_sigma", c.contrast_sigma},
                       {"noise_sigma", c.noise_sigma},
                       {"occlusion_prob", c.occlusion_prob},
                       {"occlusion_max", c.occlusion_max},
                       {"shift_max", c.shift_max},
                       {"train_frac", c.train_frac},
                       {"val_frac", c.val_frac},
                       {"database_frac", c.database_frac}};
}

void from_json(const nlohmann::json& j, SyntheticWorldConfig& c) {
    c.n_places = j.at("n_places").get<std::size_t>();
    c.views_per_place = j.at("views_per_place").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.grid_pitch = j.at("grid_pitch").get<double>();
    c.place_jitter = j.at("place_jitter").get<double>();
    c.view_jitter = j.at("view_jitter").get<double>();
    c.brightness_sigma = j.at("brightness_sigma").get<double>();
    c.contrast_sigma = j.at("contrast_sigma").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.occlusion_prob = j.at("occlusion_prob").get<double>();
    c.occlusion_max = j.at("occlusion_max").get<std::size_t>();
    c.shift_max = j.at("shift_max").get<std::size_t>();
    c.train_frac = j.at("train_frac").get<double>();
    c.val_frac = j.at("val_frac").get<double>();
    c.database_frac = j.at("database_frac").get<double>();
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::database: return "database";
        case Split::query: return "query";
    }
    throw ConfigError("bad split enum");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "database") return Split::database;
    if (s == "query") return Split::query;
    throw DataError("unknown split '" + s + "'");
}

const PlaceSample& Dataset::by_id(std::int64_t id) const {
    for (const PlaceSample& s : samples)
        if (s.id == id) return s;
    throw DataError("dataset: no sample with id " + std::to_string(id));
}

std::vector<const PlaceSample*> Dataset::split_samples(Split s) const {
    std::vector<const PlaceSample*> out;
    for (const PlaceSample& p : samples)
        if (p.split == s) out.push_back(&p);
    return out;
}

void Dataset::validate() const {
    std::set<std::int64_t> ids;
    std::set<std::int64_t> db_places;
    for (const PlaceSample& s : samples) {
        if (!ids.insert(s.id).second)
            throw DataError("dataset: duplicate sample id " + std::to_string(s.id));
        if (!std::isfinite(s.x) || !std::isfinite(s.y))
            throw DataError("dataset: non-finite location on sample " + std::to_string(s.id));
        for (double v : s.image.values())
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw DataError("dataset: image values out of [0,1] on sample " +
                                std::to_string(s.id));
        if (s.split == Split::database) db_places.insert(s.place_id);
    }
    for (const PlaceSample& s : samples)
        if ((s.split == Split::query || s.split == Split::val) &&
            !db_places.count(s.place_id))
            throw DataError("dataset: sample " + std::to_string(s.id) +
                            " has no ground truth in the database split");
}

namespace {

// Smooth per-place signature: coarse random grid, bilinearly upsampled.
std::vector<double> render_signature(std::mt19937_64& rng, std::size_t c, std::size_t h,
                                     std::size_t w) {
    constexpr std::size_t kCoarse = 6;
    std::uniform_real_distribution<double> uni(0.12, 0.88);
    std::vector<double> coarse(c * kCoarse * kCoarse);
    for (double& v : coarse) v = uni(rng);
    std::vector<double> img(c * h * w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double fy = (double(y) + 0.5) / double(h) * (kCoarse - 1);
                const double fx = (double(x) + 0.5) / double(w) * (kCoarse - 1);
                const std::size_t y0 = std::min<std::size_t>(std::size_t(fy), kCoarse - 2);
                const std::size_t x0 = std::min<std::size_t>(std::size_t(fx), kCoarse - 2);
                const double ty = fy - double(y0), tx = fx - double(x0);
                auto at = [&](std::size_t yy, std::size_t xx) {
                    return coarse[(ch * kCoarse + yy) * kCoarse + xx];
                };
                img[(ch * h + y) * w + x] =
                    (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                    ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
            }
    return img;
}

}  // namespace

Dataset generate_synthetic(const SyntheticWorldConfig& config, std::uint64_t seed) {
    config.validate();
    Dataset ds;
    ds.manifest.version = kDatasetVersion;
    ds.manifest.seed = seed;
    ds.manifest.config = config;

    std::mt19937_64 rng(mix_seed(seed, 0xda7a));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni01(0.0, 1.0);

    const std::size_t grid_cols =
        static_cast<std::size_t>(std::ceil(std::sqrt(double(config.n_places))));

    struct Place {
        double x, y;
        std::vector<double> signature;
    };
    std::vector<Place> places;
    places.reserve(config.n_places);
    for (std::size_t p = 0; p < config.n_places; ++p) {
        Place pl;
        pl.x = double(p % grid_cols) * config.grid_pitch +
               std::clamp(gauss(rng) * config.place_jitter, -config.grid_pitch / 4,
                          config.grid_pitch / 4);
        pl.y = double(p / grid_cols) * config.grid_pitch +
               std::clamp(gauss(rng) * config.place_jitter, -config.grid_pitch / 4,
                          config.grid_pitch / 4);
        pl.signature = render_signature(rng, config.channels, config.height, config.width);
        places.push_back(std::move(pl));
    }

    // train and database always get at least one view; val and query may be
    // empty on very small worlds
    const std::size_t V = config.views_per_place;
    const auto n_train = std::max<std::size_t>(1, std::size_t(double(V) * config.train_frac));
    const auto n_db = std::max<std::size_t>(1, std::size_t(double(V) * config.database_frac));
    const auto n_val = std::size_t(double(V) * config.val_frac);
    if (n_train + n_val + n_db > V)
        throw ConfigError("synthetic world: split fractions exceed the views per place");

    std::int64_t next_id = 0;
    for (std::size_t p = 0; p < config.n_places; ++p) {
        std::vector<std::size_t> order(V);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t v = 0; v < V; ++v) {
            PlaceSample s;
            s.id = next_id++;
            s.place_id = static_cast<std::int64_t>(p);
            const double ang = uni01(rng) * 2.0 * 3.14159265358979323846;
            const double rad = uni01(rng) * config.view_jitter;
            s.x = places[p].x + rad * std::cos(ang);
            s.y = places[p].y + rad * std::sin(ang);

            const std::size_t slot = order[v];
            if (slot < n_train)
                s.split = Split::train;
            else if (slot < n_train + n_db)
                s.split = Split::database;
            else if (slot < n_train + n_db + n_val)
                s.split = Split::val;
            else
                s.split = Split::query;

            // nuisance transforms: viewpoint shift, contrast, brightness,
            // pixel noise, occluder
            std::vector<double> img = places[p].signature;
            if (config.shift_max > 0) {
                std::uniform_int_distribution<std::size_t> sh(0, 2 * config.shift_max);
                const std::size_t dy = sh(rng), dx = sh(rng);
                const std::size_t H = config.height, W = config.width;
                std::vector<double> shifted(img.size());
                for (std::size_t c = 0; c < config.channels; ++c)
                    for (std::size_t y = 0; y < H; ++y)
                        for (std::size_t x = 0; x < W; ++x)
                            shifted[(c * H + y) * W + x] =
                                img[(c * H + (y + dy) % H) * W + (x + dx) % W];
                img = std::move(shifted);
            }
            const double contrast = 1.0 + gauss(rng) * config.contrast_sigma;
            const double brightness = gauss(rng) * config.brightness_sigma;
            for (double& px : img) px = (px - 0.5) * contrast + 0.5 + brightness;
            for (double& px : img) px += gauss(rng) * config.noise_sigma;
            if (config.occlusion_max > 0 && uni01(rng) < config.occlusion_prob) {
                std::uniform_int_distribution<std::size_t> edge_d(config.occlusion_max / 2,
                                                                  config.occlusion_max);
                const std::size_t edge = edge_d(rng);
                std::uniform_int_distribution<std::size_t> ypos(0, config.height - edge);
                std::uniform_int_distribution<std::size_t> xpos(0, config.width - edge);
                const std::size_t oy = ypos(rng), ox = xpos(rng);
                const double fill = uni01(rng);
                for (std::size_t c = 0; c < config.channels; ++c)
                    for (std::size_t y = oy; y < oy + edge; ++y)
                        for (std::size_t x = ox; x < ox + edge; ++x)
                            img[(c * config.height + y) * config.width + x] = fill;
            }
            for (double& px : img) px = as_f32(std::clamp(px, 0.0, 1.0));
            s.image = Tensor::from({config.channels, config.height, config.width},
                                   std::move(img));
            ds.samples.push_back(std::move(s));
        }
    }
    ds.validate();

    CorrelationStats stats = pixel_correlation_stats(ds);
    if (!(stats.intra_place > stats.inter_place))
        throw DataError("synthetic world: same-place views no more correlated than "
                        "different-place views (intra " +
                        std::to_string(stats.intra_place) + ", inter " +
                        std::to_string(stats.inter_place) + ")");
    return ds;
}

CorrelationStats pixel_correlation_stats(const Dataset& ds, std::size_t max_pairs) {
    auto correlation = [](const std::vector<double>& a, const std::vector<double>& b) {
        const std::size_t n = a.size();
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ma += a[i];
            mb += b[i];
        }
        ma /= double(n);
        mb /= double(n);
        double cov = 0, va = 0, vb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma) * (a[i] - ma);
            vb += (b[i] - mb) * (b[i] - mb);
        }
        const double denom = std::sqrt(va * vb);
        return denom > 0 ? cov / denom : 0.0;
    };
    std::mt19937_64 rng(0xc0ffee);
    std::uniform_int_distribution<std::size_t> pick(0, ds.samples.size() - 1);
    double intra = 0, inter = 0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t it = 0; it < max_pairs; ++it) {
        const PlaceSample& a = ds.samples[pick(rng)];
        const PlaceSample& b = ds.samples[pick(rng)];
        if (a.id == b.id) continue;
        const double c = correlation(a.image.values(), b.image.values());
        if (a.place_id == b.place_id) {
            intra += c;
            ++n_intra;
        } else {
            inter += c;
            ++n_inter;
        }
    }
    CorrelationStats stats;
    if (n_intra) stats.intra_place = intra / double(n_intra);
    if (n_inter) stats.inter_place = inter / double(n_inter);
    return stats;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream bin(dir / "samples.bin", std::ios::binary);
    if (!bin) throw ConfigError("cannot write " + (dir / "samples.bin").string());
    bin.write(kSamplesMagic, sizeof(kSamplesMagic));
    bio::write_pod<std::uint32_t>(bin, ds.manifest.version);

    nlohmann::json manifest;
    manifest["format_version"] = ds.manifest.version;
    manifest["seed"] = ds.manifest.seed;
    manifest["config"] = ds.manifest.config;
    nlohmann::json samples = nlohmann::json::array();
    for (const PlaceSample& s : ds.samples) {
        const auto offset = static_cast<std::uint64_t>(bin.tellp());
        std::vector<float> payload(s.image.values().begin(), s.image.values().end());
        bio::write_array(bin, payload);
        samples.push_back({{"id", s.id},
                           {"place_id", s.place_id},
                           {"x", s.x},
                           {"y", s.y},
                           {"split", to_string(s.split)},
                           {"offset", offset},
                           {"count", payload.size()}});
    }
    manifest["samples"] = std::move(samples);
    if (!bin) throw DataError("failed writing samples.bin");
    bin.close();

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw ConfigError("cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw ConfigError("cannot open " + (dir / "manifest.json").string());
    const nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
    if (manifest.is_discarded())
        throw DataError("manifest.json is not valid JSON: " + (dir / "manifest.json").string());

    Dataset ds;
    const auto version = manifest.at("format_version").get<std::uint32_t>();
    if (version != kDatasetVersion)
        throw VersionError("dataset format version " + std::to_string(version) +
                           " unsupported (expected " + std::to_string(kDatasetVersion) + ")");
    ds.manifest.version = version;
    ds.manifest.seed = manifest.at("seed").get<std::uint64_t>();
    ds.manifest.config = manifest.at("config").get<SyntheticWorldConfig>();

    std::ifstream bin(dir / "samples.bin", std::ios::binary);
    if (!bin) throw ConfigError("cannot open " + (dir / "samples.bin").string());
    bio::expect_magic(bin, kSamplesMagic, sizeof(kSamplesMagic), "samples.bin");
    const auto bin_version = bio::read_pod<std::uint32_t>(bin, "samples.bin version");
    if (bin_version != version)
        throw VersionError("samples.bin version " + std::to_string(bin_version) +
                           " does not match manifest version " + std::to_string(version));
    bin.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(bin.tellg());

    const SyntheticWorldConfig& c = ds.manifest.config;
    const std::size_t expect_count = c.channels * c.height * c.width;
    for (const nlohmann::json& js : manifest.at("samples")) {
        PlaceSample s;
        s.id = js.at("id").get<std::int64_t>();
        s.place_id = js.at("place_id").get<std::int64_t>();
        s.x = js.at("x").get<double>();
        s.y = js.at("y").get<double>();
        s.split = split_from_string(js.at("split").get<std::string>());
        const auto offset = js.at("offset").get<std::uint64_t>();
        const auto count = js.at("count").get<std::uint64_t>();
        if (count != expect_count)
            throw DataError("sample " + std::to_string(s.id) + ": payload count " +
                            std::to_string(count) + " does not match config");
        if (offset + count * sizeof(float) > file_size)
            throw DataError("sample " + std::to_string(s.id) +
                            ": payload offset past end of samples.bin");
        bin.seekg(static_cast<std::streamoff>(offset));
        std::vector<float> payload;
        bio::read_array(bin, payload, count, "sample payload");
        std::vector<double> img(payload.begin(), payload.end());
        s.image = Tensor::from({c.channels, c.height, c.width}, std::move(img));
        ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
}

void TripletSpec::validate() const {
    if (!(0 < r_pos && r_pos < r_neg))
        throw ConfigError("triplet spec: need 0 < r_pos < r_neg");
    if (negatives_per_anchor == 0)
        throw ConfigError("triplet spec: negatives_per_anchor must be positive");
}

MiningResult mine_triplets(const Dataset& ds, const TripletSpec& spec, std::uint64_t seed) {
    spec.validate();
    auto train = ds.split_samples(Split::train);
    if (train.empty()) throw DataError("mine_triplets: train split is empty");

    auto dist = [](const PlaceSample& a, const PlaceSample& b) {
        return std::hypot(a.x - b.x, a.y - b.y);
    };

    std::mt19937_64 rng(mix_seed(seed, 0x3a1e75));
    std::vector<std::size_t> anchor_order(train.size());
    std::iota(anchor_order.begin(), anchor_order.end(), 0);
    std::shuffle(anchor_order.begin(), anchor_order.end(), rng);

    MiningResult result;
    for (std::size_t ai : anchor_order) {
        const PlaceSample& anchor = *train[ai];
        std::vector<const PlaceSample*> positives, negatives;
        for (const PlaceSample* s : train) {
            if (s->id == anchor.id) continue;
            const double d = dist(anchor, *s);
            if (d <= spec.r_pos)
                positives.push_back(s);
            else if (d > spec.r_neg)
                negatives.push_back(s);
        }
        if (positives.empty() || negatives.size() < spec.negatives_per_anchor) {
            ++result.skipped_anchors;
            continue;
        }
        MinedTriplet t;
        t.anchor = anchor.id;
        t.positive = positives[std::uniform_int_distribution<std::size_t>(
            0, positives.size() - 1)(rng)]->id;
        std::shuffle(negatives.begin(), negatives.end(), rng);
        for (std::size_t i = 0; i < spec.negatives_per_anchor; ++i)
            t.negatives.push_back(negatives[i]->id);
        result.triplets.push_back(std::move(t));
    }
    if (result.triplets.empty())
        throw DataError("mine_triplets: no mineable triplet in the dataset");
    return result;
}

}  // namespace tscm
