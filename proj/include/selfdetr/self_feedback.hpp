#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/autodiff.hpp"
#include "selfdetr/model.hpp"

// Guidance maps built from decoder cross-attention, and the KL objectives
// that pull self-attention toward them.
namespace selfdetr::feedback {

using ad::DiffArray;

enum class EncoderAggregation { matmul, average, last };
enum class DecoderMode { layer, last, average };
enum class Guidance { cross_attention, identity, diversity_max, off };

struct FeedbackConfig {
    EncoderAggregation encoder_aggregation = EncoderAggregation::matmul;
    DecoderMode decoder_mode = DecoderMode::layer;
    Guidance guidance = Guidance::cross_attention;
    bool detach_guidance = false;
};

void to_json(nlohmann::json& j, const FeedbackConfig& c);
void from_json(const nlohmann::json& j, FeedbackConfig& c);

EncoderAggregation parse_encoder_aggregation(const std::string& s);
DecoderMode parse_decoder_mode(const std::string& s);
Guidance parse_guidance(const std::string& s);
std::string to_string(EncoderAggregation a);
std::string to_string(DecoderMode m);
std::string to_string(Guidance g);

struct GuidanceMaps {
    DiffArray encoder;               // G_E, T x T
    std::vector<DiffArray> decoder;  // G_D per decoder layer, Lq x Lq
    DiffArray aggregated;            // H, T x T
};

// sqrt(A A^T), entrywise root. Symmetric Lq x Lq.
DiffArray guidance_decoder(const DiffArray& cross_map);
// sqrt(Abar^T Abar) where Abar is the mean cross-attention over layers.
DiffArray guidance_encoder(std::span<const DiffArray> cross_maps);
// H^1 = A^1, H^i = sqrt(H^{i-1} (A^i)^T).
DiffArray aggregate_encoder_attention(std::span<const DiffArray> enc_self);
DiffArray aggregate_encoder(std::span<const DiffArray> enc_self, EncoderAggregation how);

DiffArray row_renormalize(const DiffArray& m, double eps = 1e-8);

// KL(renorm(H) || renorm(G_E)).
DiffArray feedback_loss_encoder(const DiffArray& aggregated, const DiffArray& guidance);
// sum_l KL(renorm(A_D^l) || renorm(G_D^l)).
DiffArray feedback_loss_decoder(std::span<const DiffArray> dec_self, std::span<const DiffArray> guidance);

// Smooth stand-in for the rank-1 residual diversity: column means replace
// the column medians so the term is differentiable.
DiffArray surrogate_diversity(const DiffArray& map);

// Loss term for the non cross-attention guidance modes on a set of maps:
// identity -> sum of KL(renorm(A) || renorm(I)); diversity_max -> -sum of
// surrogate diversity.
DiffArray alternative_guidance(Guidance mode, std::span<const DiffArray> maps);

struct FeedbackLosses {
    DiffArray encoder;  // scalar; zero constant when not applicable
    DiffArray decoder;
};

// Both feedback terms for one forward pass according to `config`. Terms are
// computed even when their lambda is zero so they can be logged.
FeedbackLosses compute_feedback(const model::AttentionBundle& attention, const FeedbackConfig& config);

}  // namespace selfdetr::feedback
