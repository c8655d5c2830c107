#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/data.hpp"
#include "selfdetr/eval.hpp"
#include "selfdetr/matching_loss.hpp"
#include "selfdetr/model.hpp"
#include "selfdetr/self_feedback.hpp"

namespace selfdetr {

enum class Preprocess { none, window, resize };

struct PreprocessConfig {
    Preprocess mode = Preprocess::none;
    std::size_t window = 128;
    std::size_t overlap = 32;
    std::size_t resize = 192;
};

struct OptimizerConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Fractions of the total epoch count at which lr is multiplied by decay_factor.
    std::vector<double> decay_at = {2.0 / 3.0, 5.0 / 6.0};
    double decay_factor = 0.1;
    double clip_norm = 0.0;  // global gradient norm clip; 0 disables

    double lr_at_epoch(std::size_t epoch, std::size_t total_epochs) const;
};

struct EvalConfig {
    eval::NmsOptions nms;
    std::vector<double> thresholds = {0.3, 0.4, 0.5, 0.6, 0.7};
    std::size_t diversity_samples = 64;
};

struct ExperimentConfig {
    model::ModelConfig model;
    matching::LossWeights loss;
    feedback::FeedbackConfig feedback;
    data::SynthConfig data;
    std::string dataset;  // manifest path; empty -> generate from `data` in memory
    PreprocessConfig preprocess;
    OptimizerConfig optimizer;
    std::size_t epochs = 60;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
    EvalConfig eval;

    void validate() const;
};

// lambda_e / lambda_d are stored under "feedback" and mapped to LossWeights.
void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Unknown keys are rejected so typos do not silently fall back to defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);

// Applies "a.b.c=value" to a JSON document; value is parsed as JSON when
// possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// FNV-1a 64 of the canonical JSON with output_dir removed, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

}  // namespace selfdetr
