#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/matching_loss.hpp"

namespace selfdetr::data {

using matching::Segment;

struct VideoSample {
    std::string id;
    std::size_t length = 0;       // T
    std::size_t feature_dim = 0;  // D_feat
    std::vector<double> features; // T x D_feat, row-major
    std::vector<Segment> segments;
};

struct SynthConfig {
    std::size_t length = 64;
    std::size_t feature_dim = 32;
    std::size_t num_classes = 5;
    std::size_t min_instances = 1;
    std::size_t max_instances = 5;
    double min_width = 0.05;  // fraction of the video length
    double max_width = 0.4;
    std::size_t min_gap = 2;  // frames
    std::size_t ramp = 2;     // frames of linear onset/offset at each instance boundary
    double noise = 0.5;       // background standard deviation
    std::size_t train_size = 200;
    std::size_t test_size = 64;
    std::uint64_t seed = 0;

    std::size_t min_width_frames() const;
    std::size_t max_width_frames() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct Dataset {
    std::size_t num_classes = 0;
    std::size_t feature_dim = 0;
    std::vector<VideoSample> train;
    std::vector<VideoSample> test;
};

// Class patterns come from `seed`; each video draws from its own stream
// derived from (seed, split, index), so generation order does not matter.
Dataset generate_synthetic(const SynthConfig& cfg);

// Feature file: framed JSON header {"T", "D_feat"} + T*D_feat float64 LE.
void write_feature_file(const std::filesystem::path& path, const VideoSample& sample);
// Annotations: JSON array of {"start", "end", "class"} with start/end in frames.
void write_annotation_file(const std::filesystem::path& path, const VideoSample& sample);
VideoSample load_feature_file(const std::filesystem::path& feature_path,
                              const std::filesystem::path& annotation_path, std::size_t num_classes,
                              std::string id = {});

// Writes manifest.json plus features/ and annotations/ under `dir`.
// Refuses a non-empty directory unless `force` is set.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset, const nlohmann::json& extra,
                   bool force);
Dataset load_dataset(const std::filesystem::path& manifest_path);

struct Window {
    std::size_t start = 0;  // first frame of the window in the source video
    std::size_t size = 0;   // window length in frames (including padding)
    VideoSample sample;     // window-local features and targets
};

// Stride = win - overlap. Trailing frames are padded by repeating the last
// frame. A segment is kept in a window when at least half of its span lies
// inside it; kept segments are clipped and renormalized by `win`.
std::vector<Window> window_slice(const VideoSample& sample, std::size_t win = 128, std::size_t overlap = 32);

// Per-channel linear interpolation of T x D features onto `target` points
// spaced uniformly over [0, T - 1].
std::vector<double> resize_linear(const std::vector<double>& features, std::size_t length,
                                  std::size_t dim, std::size_t target = 192);

}  // namespace selfdetr::data
