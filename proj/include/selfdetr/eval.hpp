#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/matching_loss.hpp"
#include "selfdetr/model.hpp"

namespace selfdetr::eval {

using matching::Segment;

enum class Decay { linear, gaussian };

struct NmsOptions {
    bool enabled = true;
    double iou_threshold = 0.40;
    std::size_t top_k = 100;
    Decay decay = Decay::linear;
    double sigma = 0.5;  // gaussian decay: score *= exp(-iou^2 / sigma)
};

void to_json(nlohmann::json& j, const NmsOptions& o);
void from_json(const nlohmann::json& j, NmsOptions& o);

// Orders by score descending, then start ascending, then end ascending.
bool detection_before(const Segment& a, const Segment& b);

// Iterative SoftNMS over detections of one class; returns at most top_k.
std::vector<Segment> soft_nms(std::vector<Segment> preds, const NmsOptions& options);

struct VideoDetections {
    std::string id;
    std::vector<Segment> detections;
};

struct VideoGroundTruth {
    std::string id;
    std::vector<Segment> segments;
};

// AP of one class at one tIoU. Predictions are matched greedily in score
// order, each ground truth at most once; the area uses all-point
// interpolation. Returns nullopt when the class has no ground truth.
std::optional<double> average_precision(std::span<const VideoDetections> results,
                                        std::span<const VideoGroundTruth> gts, int class_id, double tiou);

struct MapResult {
    std::vector<double> thresholds;
    std::vector<double> map;  // one per threshold
    double average = 0.0;
};

void to_json(nlohmann::json& j, const MapResult& r);

// mAP(t) = mean AP over classes that have at least one ground truth.
MapResult mean_ap(std::span<const VideoDetections> results, std::span<const VideoGroundTruth> gts,
                  std::size_t num_classes, std::vector<double> thresholds = {0.3, 0.4, 0.5, 0.6, 0.7});

// Turns one prediction into scored detections: every (query, foreground
// class) pair scored by its softmax probability, then per-class SoftNMS and
// a per-video cap of top_k.
std::vector<Segment> detections_from_prediction(const model::Prediction& pred, const NmsOptions& options);

nlohmann::json results_to_json(std::span<const VideoDetections> results);
std::vector<VideoDetections> results_from_json(const nlohmann::json& j);

}  // namespace selfdetr::eval
