#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "selfdetr/checkpoint.hpp"
#include "selfdetr/data.hpp"

using namespace selfdetr;
using namespace selfdetr::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
    ~TempDir() { fs::remove_all(path); }
};

VideoSample ramp_sample(std::size_t T, std::size_t D) {
    VideoSample v;
    v.id = "ramp";
    v.length = T;
    v.feature_dim = D;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) v.features.push_back(static_cast<double>(t) + 0.01 * static_cast<double>(d));
    return v;
}

void write_raw(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic and well formed") {
    SynthConfig cfg;
    cfg.train_size = 40;
    cfg.test_size = 10;
    const auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
    REQUIRE(a.train.size() == 40);
    REQUIRE(a.test.size() == 10);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].features == b.train[i].features);
        CHECK(a.train[i].id == b.train[i].id);
    }
    cfg.seed = 1;
    CHECK(generate_synthetic(cfg).train[0].features != a.train[0].features);

    const double T = static_cast<double>(cfg.length);
    for (const auto* split : {&a.train, &a.test})
        for (const auto& v : *split) {
            CHECK(v.features.size() == cfg.length * cfg.feature_dim);
            CHECK(v.segments.size() >= cfg.min_instances);
            CHECK(v.segments.size() <= cfg.max_instances);
            for (std::size_t i = 0; i < v.segments.size(); ++i) {
                const auto& s = v.segments[i];
                CHECK(s.start() >= 0.0);
                CHECK(s.end() <= 1.0);
                CHECK(s.width * T >= static_cast<double>(cfg.min_width_frames()) - 1e-9);
                CHECK(s.class_id >= 0);
                CHECK(s.class_id < static_cast<int>(cfg.num_classes));
                // Exhaustive pairwise disjointness with the minimum gap.
                for (std::size_t j = 0; j < v.segments.size(); ++j) {
                    if (i == j) continue;
                    const auto& o = v.segments[j];
                    const double gap = std::max(o.start() - s.end(), s.start() - o.end()) * T;
                    CHECK(gap >= static_cast<double>(cfg.min_gap) - 1e-9);
                }
            }
        }
}

TEST_CASE("background and actions follow the generator contract") {
    SynthConfig cfg;
    cfg.train_size = 60;
    cfg.test_size = 0;
    const auto ds = generate_synthetic(cfg);
    // Background frames are pure noise: mean ~0, variance ~noise^2.
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& v : ds.train)
        for (std::size_t t = 0; t < v.length; ++t) {
            const double c = (static_cast<double>(t) + 0.5) / static_cast<double>(v.length);
            bool inside = false;
            for (const auto& s : v.segments) inside = inside || (c >= s.start() && c <= s.end());
            if (inside) continue;
            for (std::size_t d = 0; d < v.feature_dim; ++d) {
                const double x = v.features[t * v.feature_dim + d];
                sum += x;
                sq += x * x;
                ++n;
            }
        }
    const double mean = sum / static_cast<double>(n);
    CHECK(std::fabs(mean) < 0.02);
    CHECK(sq / static_cast<double>(n) == doctest::Approx(cfg.noise * cfg.noise).epsilon(0.05));
}

TEST_CASE("class patterns are linearly separable after mean pooling") {
    SynthConfig cfg;
    const auto ds = generate_synthetic(cfg);
    const std::size_t D = cfg.feature_dim, C = cfg.num_classes;
    auto pooled = [&](const VideoSample& v, const matching::Segment& s) {
        std::vector<double> m(D, 0.0);
        const auto a = static_cast<std::size_t>(std::lround(s.start() * static_cast<double>(v.length)));
        const auto b = static_cast<std::size_t>(std::lround(s.end() * static_cast<double>(v.length)));
        for (std::size_t t = a; t < b; ++t)
            for (std::size_t d = 0; d < D; ++d) m[d] += v.features[t * D + d] / static_cast<double>(b - a);
        return m;
    };
    // Nearest class mean is a linear decision rule.
    std::vector<std::vector<double>> centroid(C, std::vector<double>(D, 0.0));
    std::vector<std::size_t> count(C, 0);
    for (const auto& v : ds.train)
        for (const auto& s : v.segments) {
            const auto m = pooled(v, s);
            for (std::size_t d = 0; d < D; ++d) centroid[s.class_id][d] += m[d];
            ++count[s.class_id];
        }
    for (std::size_t c = 0; c < C; ++c)
        for (auto& x : centroid[c]) x /= static_cast<double>(std::max<std::size_t>(count[c], 1));
    std::size_t right = 0, total = 0;
    for (const auto& v : ds.test)
        for (const auto& s : v.segments) {
            const auto m = pooled(v, s);
            std::size_t best = 0;
            double best_score = -1e300;
            for (std::size_t c = 0; c < C; ++c) {
                double score = 0.0, norm = 0.0;
                for (std::size_t d = 0; d < D; ++d) {
                    score += m[d] * centroid[c][d];
                    norm += centroid[c][d] * centroid[c][d];
                }
                score -= 0.5 * norm;
                if (score > best_score) best_score = score, best = c;
            }
            right += best == static_cast<std::size_t>(s.class_id);
            ++total;
        }
    CHECK(static_cast<double>(right) / static_cast<double>(total) > 0.9);
}

TEST_CASE("infeasible synthetic configs are rejected") {
    SynthConfig cfg;
    cfg.min_instances = 0;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    cfg = {};
    cfg.length = 16;
    cfg.max_instances = 8;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    cfg = {};
    cfg.min_width = 0.5;
    cfg.max_width = 0.4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("feature files round-trip") {
    TempDir dir("selfdetr_data_files");
    fs::create_directories(dir.path);
    auto v = ramp_sample(128, 32);
    v.segments = {matching::Segment::from_interval(0.25, 0.5, 1), matching::Segment::from_interval(0.75, 1.0, 0)};
    write_feature_file(dir.path / "v.bin", v);
    write_annotation_file(dir.path / "v.json", v);
    const auto back = load_feature_file(dir.path / "v.bin", dir.path / "v.json", 2);
    CHECK(back.length == 128);
    CHECK(back.feature_dim == 32);
    CHECK(back.features == v.features);
    REQUIRE(back.segments.size() == 2);
    CHECK(back.segments[0].start() == 0.25);
    CHECK(back.segments[1].end() == 1.0);
    CHECK(back.id == "v");

    // Header is one JSON line; payload is raw little-endian binary64.
    std::ifstream in(dir.path / "v.bin", std::ios::binary);
    std::string header;
    std::getline(in, header);
    CHECK(nlohmann::json::parse(header) == nlohmann::json{{"T", 128}, {"D_feat", 32}});
    double first[2];
    in.read(reinterpret_cast<char*>(first), sizeof first);
    CHECK(first[0] == 0.0);
    CHECK(first[1] == 0.01);
    CHECK(fs::file_size(dir.path / "v.bin") == header.size() + 1 + 128 * 32 * 8);
}

TEST_CASE("feature file validation") {
    TempDir dir("selfdetr_data_invalid");
    fs::create_directories(dir.path);
    auto v = ramp_sample(4, 2);
    write_feature_file(dir.path / "v.bin", v);
    write_raw(dir.path / "bad_order.json", R"([{"start": 3, "end": 1, "class": 0}])");
    CHECK_THROWS_AS(load_feature_file(dir.path / "v.bin", dir.path / "bad_order.json", 2), ValidationError);
    write_raw(dir.path / "outside.json", R"([{"start": 1, "end": 5, "class": 0}])");
    CHECK_THROWS_AS(load_feature_file(dir.path / "v.bin", dir.path / "outside.json", 2), ValidationError);
    write_raw(dir.path / "class.json", R"([{"start": 1, "end": 2, "class": 7}])");
    CHECK_THROWS_AS(load_feature_file(dir.path / "v.bin", dir.path / "class.json", 2), ValidationError);
    write_raw(dir.path / "ok.json", "[]");
    write_raw(dir.path / "short.bin", std::string(R"({"T":4,"D_feat":2})") + "\n" + std::string(8 * 7, '\0'));
    CHECK_THROWS_AS(load_feature_file(dir.path / "short.bin", dir.path / "ok.json", 2), ValidationError);
}

TEST_CASE("dataset directories") {
    TempDir dir("selfdetr_dataset_dir");
    SynthConfig cfg;
    cfg.train_size = 5;
    cfg.test_size = 3;
    const auto ds = generate_synthetic(cfg);
    write_dataset(dir.path, ds, {{"note", "x"}}, false);
    CHECK_THROWS_AS(write_dataset(dir.path, ds, {}, false), ValidationError);
    write_dataset(dir.path, ds, {}, true);
    const auto back = load_dataset(dir.path / "manifest.json");
    CHECK(back.train.size() == 5);
    CHECK(back.test.size() == 3);
    CHECK(back.num_classes == cfg.num_classes);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(back.train[i].id == ds.train[i].id);
        CHECK(back.train[i].features == ds.train[i].features);
        REQUIRE(back.train[i].segments.size() == ds.train[i].segments.size());
        for (std::size_t k = 0; k < ds.train[i].segments.size(); ++k)
            CHECK(std::fabs(back.train[i].segments[k].start() - ds.train[i].segments[k].start()) < 1e-12);
    }
}

TEST_CASE("window slicing") {
    auto v = ramp_sample(128, 2);
    v.segments = {matching::Segment::from_interval(0.25, 0.5, 0)};
    auto w = window_slice(v, 128, 32);
    REQUIRE(w.size() == 1);
    CHECK(w[0].sample.features == v.features);
    CHECK(w[0].sample.segments[0].start() == 0.25);

    // T = 224, stride 96: windows at 0 and 96; the second reaches 224 exactly.
    v = ramp_sample(224, 2);
    w = window_slice(v, 128, 32);
    REQUIRE(w.size() == 2);
    CHECK(w[0].start == 0);
    CHECK(w[1].start == 96);

    // Padding repeats the last frame.
    v = ramp_sample(200, 2);
    w = window_slice(v, 128, 32);
    REQUIRE(w.size() == 2);
    CHECK(w[1].sample.features[(127) * 2] == 199.0);
    CHECK(w[1].sample.features[(103) * 2] == 199.0);
    CHECK(w[1].sample.features[(102) * 2] == 198.0);
    CHECK_THROWS_AS(window_slice(v, 32, 32), ConfigError);
}

TEST_CASE("window targets follow the half-containment rule") {
    auto v = ramp_sample(224, 1);
    const double T = 224.0;
    // Frames [80, 140): 48 of 60 frames in window 0, all 60 in window 1.
    // Frames [116, 136): 12 of 20 frames in window 0, all in window 1.
    // Frames [20, 60): only in window 0.
    // Frames [120, 140): 8 of 20 frames in window 0, so only window 1 keeps it.
    v.segments = {matching::Segment::from_interval(80 / T, 140 / T, 0), matching::Segment::from_interval(116 / T, 136 / T, 1),
                  matching::Segment::from_interval(20 / T, 60 / T, 2), matching::Segment::from_interval(120 / T, 140 / T, 3)};
    const auto w = window_slice(v, 128, 32);
    REQUIRE(w.size() == 2);
    auto count_class = [](const Window& win, int c) {
        std::size_t n = 0;
        for (const auto& s : win.sample.segments) n += s.class_id == c;
        return n;
    };
    CHECK(count_class(w[0], 0) == 1);
    CHECK(count_class(w[1], 0) == 1);
    CHECK(count_class(w[0], 1) == 1);
    CHECK(count_class(w[1], 1) == 1);
    CHECK(count_class(w[0], 2) == 1);
    CHECK(count_class(w[1], 2) == 0);
    CHECK(count_class(w[0], 3) == 0);
    CHECK(count_class(w[1], 3) == 1);

    // Mapping kept segments back recovers the clipped originals.
    for (const auto& win : w)
        for (const auto& s : win.sample.segments) {
            const double gs = (static_cast<double>(win.start) + s.start() * 128.0) / T;
            const double ge = (static_cast<double>(win.start) + s.end() * 128.0) / T;
            const auto& o = v.segments[static_cast<std::size_t>(s.class_id)];
            const double lo = static_cast<double>(win.start) / T, hi = static_cast<double>(win.start + 128) / T;
            CHECK(std::fabs(gs - std::max(o.start(), lo)) < 1e-9);
            CHECK(std::fabs(ge - std::min(o.end(), hi)) < 1e-9);
        }
}

TEST_CASE("linear resizing") {
    const std::vector<double> ramp{0.0, 1.0};
    const auto r = resize_linear(ramp, 2, 1, 3);
    CHECK(r == std::vector<double>{0.0, 0.5, 1.0});

    const auto v = ramp_sample(17, 3);
    const auto same = resize_linear(v.features, 17, 3, 17);
    for (std::size_t i = 0; i < same.size(); ++i) CHECK(std::fabs(same[i] - v.features[i]) < 1e-12);

    const auto up = resize_linear(v.features, 17, 3, 192);
    CHECK(up.size() == 192 * 3);
    for (std::size_t d = 0; d < 3; ++d) {
        CHECK(up[d] == v.features[d]);
        CHECK(up[191 * 3 + d] == v.features[16 * 3 + d]);
    }
    const auto flat = resize_linear(std::vector<double>(10, 2.5), 5, 2, 9);
    for (double x : flat) CHECK(x == 2.5);
    CHECK_THROWS_AS(resize_linear({1.0}, 1, 1, 4), DimensionError);
}
