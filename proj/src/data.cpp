#include "selfdetr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "selfdetr/checkpoint.hpp"
#include "selfdetr/errors.hpp"

namespace selfdetr::data {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
    return splitmix64(splitmix64(splitmix64(seed) ^ split) ^ index);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

VideoSample generate_video(const SynthConfig& cfg, const std::vector<double>& patterns,
                           std::uint64_t seed, std::string id) {
    std::mt19937_64 rng(seed);
    const std::size_t T = cfg.length, D = cfg.feature_dim;
    const std::size_t k = uniform_index(rng, cfg.min_instances, cfg.max_instances);
    const std::size_t wmin = cfg.min_width_frames(), wmax = cfg.max_width_frames();

    std::vector<std::size_t> widths(k);
    for (auto& w : widths) w = uniform_index(rng, wmin, wmax);
    auto needed = [&] {
        std::size_t s = (k - 1) * cfg.min_gap;
        for (auto w : widths) s += w;
        return s;
    };
    while (needed() > T) {
        auto it = std::max_element(widths.begin(), widths.end());
        --*it;  // validate() guarantees this terminates above wmin
    }
    const std::size_t slack = T - needed();
    std::vector<std::size_t> cuts(k);
    for (auto& c : cuts) c = uniform_index(rng, 0, slack);
    std::sort(cuts.begin(), cuts.end());

    VideoSample v;
    v.id = std::move(id);
    v.length = T;
    v.feature_dim = D;
    v.features.assign(T * D, 0.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& x : v.features) x = cfg.noise * normal(rng);

    std::size_t pos = cuts[0];
    for (std::size_t i = 0; i < k; ++i) {
        if (i > 0) pos += cfg.min_gap + (cuts[i] - cuts[i - 1]);
        const std::size_t w = widths[i];
        const auto cls = static_cast<int>(uniform_index(rng, 0, cfg.num_classes - 1));
        const double* pattern = patterns.data() + static_cast<std::size_t>(cls) * D;
        for (std::size_t f = pos; f < pos + w; ++f) {
            const double from_start = static_cast<double>(f - pos + 1);
            const double from_end = static_cast<double>(pos + w - f);
            const double ramp = static_cast<double>(cfg.ramp + 1);
            const double amp = std::min({1.0, from_start / ramp, from_end / ramp});
            for (std::size_t d = 0; d < D; ++d) v.features[f * D + d] += amp * pattern[d];
        }
        v.segments.push_back(Segment::from_interval(static_cast<double>(pos) / static_cast<double>(T),
                                                    static_cast<double>(pos + w) / static_cast<double>(T), cls));
        pos += w;
    }
    return v;
}

std::vector<VideoSample> generate_split(const SynthConfig& cfg, const std::vector<double>& patterns,
                                        std::uint64_t split, std::size_t count, const std::string& prefix) {
    std::vector<VideoSample> out(count);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
        const auto idx = static_cast<std::size_t>(i);
        char id[32];
        std::snprintf(id, sizeof id, "%s_%04zu", prefix.c_str(), idx);
        out[idx] = generate_video(cfg, patterns, derive_seed(cfg.seed, split, idx), id);
    }
    return out;
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::size_t SynthConfig::min_width_frames() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(min_width * static_cast<double>(length))));
}

std::size_t SynthConfig::max_width_frames() const {
    return static_cast<std::size_t>(std::floor(max_width * static_cast<double>(length)));
}

void SynthConfig::validate() const {
    if (min_instances == 0) throw ConfigError("synthetic videos need at least one instance (min_instances >= 1)");
    if (max_instances < min_instances) throw ConfigError("max_instances must be >= min_instances");
    if (length < 2 || feature_dim == 0 || num_classes == 0)
        throw ConfigError("length >= 2, feature_dim > 0 and num_classes > 0 are required");
    if (!(min_width > 0.0) || max_width_frames() < min_width_frames())
        throw ConfigError("instance width range is empty");
    if (max_instances * (min_width_frames() + min_gap) > length)
        throw ConfigError("cannot pack " + std::to_string(max_instances) + " instances of width " +
                          std::to_string(min_width_frames()) + " with gap " + std::to_string(min_gap) +
                          " into " + std::to_string(length) + " frames");
    if (noise < 0.0) throw ConfigError("noise must be non-negative");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"length", c.length},         {"feature_dim", c.feature_dim}, {"num_classes", c.num_classes},
         {"min_instances", c.min_instances}, {"max_instances", c.max_instances}, {"min_width", c.min_width},
         {"max_width", c.max_width},   {"min_gap", c.min_gap},         {"ramp", c.ramp},
         {"noise", c.noise},           {"train_size", c.train_size},   {"test_size", c.test_size},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    SynthConfig d;
    c.length = j.value("length", d.length);
    c.feature_dim = j.value("feature_dim", d.feature_dim);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.min_instances = j.value("min_instances", d.min_instances);
    c.max_instances = j.value("max_instances", d.max_instances);
    c.min_width = j.value("min_width", d.min_width);
    c.max_width = j.value("max_width", d.max_width);
    c.min_gap = j.value("min_gap", d.min_gap);
    c.ramp = j.value("ramp", d.ramp);
    c.noise = j.value("noise", d.noise);
    c.train_size = j.value("train_size", d.train_size);
    c.test_size = j.value("test_size", d.test_size);
    c.seed = j.value("seed", d.seed);
}

Dataset generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(derive_seed(cfg.seed, 0, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> patterns(cfg.num_classes * cfg.feature_dim);
    for (auto& p : patterns) p = normal(rng);

    Dataset ds;
    ds.num_classes = cfg.num_classes;
    ds.feature_dim = cfg.feature_dim;
    ds.train = generate_split(cfg, patterns, 1, cfg.train_size, "train");
    ds.test = generate_split(cfg, patterns, 2, cfg.test_size, "test");
    return ds;
}

void write_feature_file(const fs::path& path, const VideoSample& sample) {
    if (sample.features.size() != sample.length * sample.feature_dim)
        throw DimensionError("sample " + sample.id + " has inconsistent feature size");
    const nlohmann::json header = {{"T", sample.length}, {"D_feat", sample.feature_dim}};
    const std::vector<double>* payload[] = {&sample.features};
    write_framed(path, header, payload);
}

void write_annotation_file(const fs::path& path, const VideoSample& sample) {
    auto arr = nlohmann::json::array();
    const auto T = static_cast<double>(sample.length);
    for (const auto& s : sample.segments)
        arr.push_back({{"start", s.start() * T}, {"end", s.end() * T}, {"class", s.class_id}});
    write_text(path, arr.dump());
}

VideoSample load_feature_file(const fs::path& feature_path, const fs::path& annotation_path,
                              std::size_t num_classes, std::string id) {
    VideoSample v;
    v.id = id.empty() ? feature_path.stem().string() : std::move(id);
    const auto header = read_framed(feature_path, v.features);
    if (!header.contains("T") || !header.contains("D_feat"))
        throw ValidationError(feature_path.string() + ": header must contain T and D_feat");
    v.length = header.at("T").get<std::size_t>();
    v.feature_dim = header.at("D_feat").get<std::size_t>();
    if (v.length == 0) throw ValidationError(feature_path.string() + ": T must be >= 1");
    if (v.features.size() != v.length * v.feature_dim)
        throw ValidationError(feature_path.string() + ": header declares " + std::to_string(v.length) + "x" +
                              std::to_string(v.feature_dim) + " values but payload holds " +
                              std::to_string(v.features.size()));

    const auto ann = read_json_file(annotation_path);
    if (!ann.is_array()) throw ValidationError(annotation_path.string() + ": expected a JSON array");
    const auto T = static_cast<double>(v.length);
    for (const auto& a : ann) {
        const double start = a.at("start").get<double>();
        const double end = a.at("end").get<double>();
        const int cls = a.at("class").get<int>();
        if (end < start) throw ValidationError(annotation_path.string() + ": annotation ends before it starts");
        const double s = start / T, e = end / T;
        if (s < 0.0 || e > 1.0) throw ValidationError(annotation_path.string() + ": interval outside the video");
        if (cls < 0 || static_cast<std::size_t>(cls) >= num_classes)
            throw ValidationError(annotation_path.string() + ": unknown class id " + std::to_string(cls));
        v.segments.push_back(Segment::from_interval(s, e, cls));
    }
    return v;
}

void write_dataset(const fs::path& dir, const Dataset& dataset, const nlohmann::json& extra, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ValidationError("output directory " + dir.string() + " is not empty (use --force)");
    fs::create_directories(dir);
    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["format"] = "selfdetr-dataset";
    manifest["version"] = 1;
    manifest["num_classes"] = dataset.num_classes;
    manifest["feature_dim"] = dataset.feature_dim;
    auto write_split = [&](const std::vector<VideoSample>& samples, const char* name) {
        auto arr = nlohmann::json::array();
        for (const auto& s : samples) {
            const auto feat = fs::path("features") / (s.id + ".bin");
            const auto ann = fs::path("annotations") / (s.id + ".json");
            write_feature_file(dir / feat, s);
            write_annotation_file(dir / ann, s);
            arr.push_back({{"id", s.id}, {"features", feat.generic_string()}, {"annotations", ann.generic_string()}});
        }
        manifest[name] = std::move(arr);
    };
    write_split(dataset.train, "train");
    write_split(dataset.test, "test");
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& manifest_path) {
    const auto manifest = read_json_file(manifest_path);
    if (manifest.value("format", "") != "selfdetr-dataset")
        throw ValidationError(manifest_path.string() + " is not a dataset manifest");
    Dataset ds;
    ds.num_classes = manifest.at("num_classes").get<std::size_t>();
    ds.feature_dim = manifest.at("feature_dim").get<std::size_t>();
    const auto root = manifest_path.parent_path();
    auto read_split = [&](const char* name) {
        std::vector<VideoSample> out;
        for (const auto& e : manifest.value(name, nlohmann::json::array())) {
            auto s = load_feature_file(root / e.at("features").get<std::string>(),
                                       root / e.at("annotations").get<std::string>(), ds.num_classes,
                                       e.at("id").get<std::string>());
            if (s.feature_dim != ds.feature_dim)
                throw ValidationError("sample " + s.id + " has feature_dim " + std::to_string(s.feature_dim));
            out.push_back(std::move(s));
        }
        return out;
    };
    ds.train = read_split("train");
    ds.test = read_split("test");
    return ds;
}

std::vector<Window> window_slice(const VideoSample& sample, std::size_t win, std::size_t overlap) {
    if (win <= overlap) throw ConfigError("window must be longer than its overlap");
    const std::size_t stride = win - overlap;
    const std::size_t T = sample.length, D = sample.feature_dim;
    std::vector<std::size_t> starts{0};
    while (starts.back() + win < T) starts.push_back(starts.back() + stride);

    const auto Td = static_cast<double>(T);
    const auto wd = static_cast<double>(win);
    std::vector<Window> out;
    for (auto ws : starts) {
        Window w;
        w.start = ws;
        w.size = win;
        w.sample.id = sample.id;
        w.sample.length = win;
        w.sample.feature_dim = D;
        w.sample.features.resize(win * D);
        for (std::size_t f = 0; f < win; ++f) {
            const std::size_t src = std::min(ws + f, T - 1);
            std::copy_n(sample.features.begin() + static_cast<std::ptrdiff_t>(src * D), D,
                        w.sample.features.begin() + static_cast<std::ptrdiff_t>(f * D));
        }
        const double lo = static_cast<double>(ws), hi = static_cast<double>(ws + win);
        for (const auto& s : sample.segments) {
            const double s0 = s.start() * Td, s1 = s.end() * Td;
            const double c0 = std::max(s0, lo), c1 = std::min(s1, hi);
            if (c1 <= c0 || (c1 - c0) < 0.5 * (s1 - s0)) continue;
            w.sample.segments.push_back(Segment::from_interval((c0 - lo) / wd, (c1 - lo) / wd, s.class_id, s.score));
        }
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<double> resize_linear(const std::vector<double>& features, std::size_t length, std::size_t dim,
                                  std::size_t target) {
    if (length < 2) throw DimensionError("resize_linear needs at least two frames");
    if (target < 2) throw DimensionError("resize_linear needs a target length of at least two");
    if (features.size() != length * dim) throw DimensionError("resize_linear: feature size mismatch");
    std::vector<double> out(target * dim);
    for (std::size_t i = 0; i < target; ++i) {
        const double x = static_cast<double>(i * (length - 1)) / static_cast<double>(target - 1);
        const auto lo = std::min(static_cast<std::size_t>(x), length - 1);
        const double frac = x - static_cast<double>(lo);
        const std::size_t hi = std::min(lo + 1, length - 1);
        for (std::size_t d = 0; d < dim; ++d) {
            const double a = features[lo * dim + d], b = features[hi * dim + d];
            out[i * dim + d] = frac == 0.0 ? a : a + frac * (b - a);
        }
    }
    return out;
}

}  // namespace selfdetr::data
