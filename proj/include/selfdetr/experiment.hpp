#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/checkpoint.hpp"
#include "selfdetr/config.hpp"
#include "selfdetr/data.hpp"
#include "selfdetr/eval.hpp"
#include "selfdetr/model.hpp"

namespace selfdetr {

// Training or inference units after preprocessing. For windowed input each
// unit is one window; `offset`/`span` map window-local coordinates back to
// the source video: global = (offset + local * span) / source_length.
struct Unit {
    data::VideoSample sample;
    std::string source_id;
    double offset = 0.0;
    double span = 0.0;
    double source_length = 0.0;
};

std::vector<Unit> preprocess(std::span<const data::VideoSample> videos, const PreprocessConfig& cfg);

struct StepLosses {
    double total = 0.0;
    double detr = 0.0;
    double fb_encoder = 0.0;
    double fb_decoder = 0.0;
};

void to_json(nlohmann::json& j, const StepLosses& s);

// Forward pass, Eq. 9-style objective and its terms for one sample.
struct SampleObjective {
    model::DiffArray total;
    StepLosses values;
};
SampleObjective sample_objective(const model::DetrModel& model, const data::VideoSample& sample,
                                 const ExperimentConfig& config);

class Trainer {
   public:
    Trainer(ExperimentConfig config, std::vector<data::VideoSample> train_videos);

    // One optimizer step over `batch` (indices into the training units);
    // gradients are averaged over the batch. Returns the batch-mean losses.
    StepLosses step(std::span<const std::size_t> batch, double lr);

    // Shuffled order for `epoch`, a pure function of (seed, epoch).
    std::vector<std::size_t> epoch_order(std::size_t epoch) const;

    using StepCallback = std::function<void(std::size_t step, std::size_t epoch, const StepLosses&)>;
    // Runs epochs [next_epoch, epochs); returns one JSON record per epoch.
    std::vector<nlohmann::json> run(std::size_t epochs_to_run, const StepCallback& on_step = {});
    std::vector<nlohmann::json> train_all(const StepCallback& on_step = {}) {
        return run(config_.epochs - next_epoch_, on_step);
    }

    Checkpoint checkpoint() const;
    // Restores parameters, optimizer moments and progress counters.
    void restore(const Checkpoint& checkpoint);

    const model::DetrModel& model() const { return model_; }
    model::DetrModel& model() { return model_; }
    const ExperimentConfig& config() const { return config_; }
    const std::string& hash() const { return hash_; }
    std::size_t next_epoch() const { return next_epoch_; }
    std::int64_t global_step() const { return adam_.step; }
    std::size_t unit_count() const { return units_.size(); }

   private:
    ExperimentConfig config_;
    std::string hash_;
    std::vector<Unit> units_;
    model::DetrModel model_;
    ad::AdamState adam_;
    std::size_t next_epoch_ = 0;
};

// Detections of one video in global normalized coordinates.
std::vector<eval::Segment> predict_video(const model::DetrModel& model, const data::VideoSample& video,
                                         const ExperimentConfig& config);

struct Evaluation {
    std::vector<eval::VideoDetections> results;
    eval::MapResult metrics;
};

Evaluation evaluate(const model::DetrModel& model, std::span<const data::VideoSample> videos,
                    const ExperimentConfig& config);

std::vector<eval::VideoGroundTruth> ground_truths(std::span<const data::VideoSample> videos);

// Rebuilds a model from a checkpoint; the config is read from its metadata.
model::DetrModel model_from_checkpoint(const Checkpoint& checkpoint, ExperimentConfig* config_out = nullptr);

// Dataset named by the config (manifest path) or generated from `data`.
data::Dataset resolve_dataset(const ExperimentConfig& config);

}  // namespace selfdetr
