#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/autodiff.hpp"

namespace selfdetr::model {

using ad::DiffArray;

struct ModelConfig {
    std::size_t input_dim = 32;  // feature channels of the input sequence
    std::size_t num_encoder_layers = 2;
    std::size_t num_decoder_layers = 4;
    std::size_t num_queries = 40;
    std::size_t model_dim = 64;
    std::size_t num_heads = 4;
    std::size_t mlp_dim = 256;
    std::size_t num_classes = 5;  // foreground classes; index num_classes is background
    double dropout = 0.0;
    bool decoder_self_attention = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Head-averaged, row-stochastic maps recorded during one forward pass.
struct AttentionBundle {
    std::vector<DiffArray> enc_self;  // T x T per encoder layer
    std::vector<DiffArray> dec_self;  // Lq x Lq per decoder layer
    std::vector<DiffArray> cross;     // Lq x T per decoder layer
};

struct Prediction {
    DiffArray class_logits;  // Lq x (C + 1)
    DiffArray segments;      // Lq x 2, (center, width) after sigmoid
};

struct ForwardResult {
    std::vector<Prediction> per_layer;  // one per decoder layer, last is final
    AttentionBundle attention;
};

struct Linear {
    DiffArray weight;  // in x out
    DiffArray bias;    // out
    DiffArray operator()(const DiffArray& x) const;
};

struct Norm {
    DiffArray gain;
    DiffArray bias;
    DiffArray operator()(const DiffArray& x) const;
};

struct AttentionParams {
    Linear q, k, v, out;
};

struct AttentionOutput {
    DiffArray output;
    DiffArray map;  // mean of the per-head maps
};

struct EncoderLayer {
    AttentionParams self_attn;
    Norm norm1;
    Linear mlp_in, mlp_out;
    Norm norm2;
};

struct DecoderLayer {
    AttentionParams self_attn;
    Norm norm1;
    AttentionParams cross_attn;
    Norm norm2;
    Linear mlp_in, mlp_out;
    Norm norm3;
};

struct Heads {
    Linear cls;
    Linear seg1, seg2, seg3;
};

// pe[t, 2k] = sin(t / 10000^(2k/D)), pe[t, 2k+1] = cos(same angle).
std::vector<double> positional_encoding(std::size_t length, std::size_t dim);

AttentionOutput multi_head_attention(const DiffArray& query, const DiffArray& key,
                                     const DiffArray& value, const AttentionParams& params,
                                     std::size_t heads);

struct EncoderOutput {
    DiffArray refined;
    std::vector<DiffArray> self_maps;
};
EncoderOutput encoder_forward(const DiffArray& features, std::span<const EncoderLayer> layers,
                              std::size_t heads);

struct DecoderOutput {
    std::vector<DiffArray> states;
    std::vector<DiffArray> self_maps;
    std::vector<DiffArray> cross_maps;
};
// `memory_pos` is added to the encoder output to form keys. `query_embed`
// initializes the query states and is re-added to the queries of both
// attention blocks in every layer.
DecoderOutput decoder_forward(const DiffArray& memory, const DiffArray& memory_pos,
                              const DiffArray& query_embed, std::span<const DecoderLayer> layers,
                              std::size_t heads, bool use_self_attention);

Prediction predict_heads(const DiffArray& query_state, const Heads& heads);

class DetrModel {
   public:
    DetrModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    // features: T x input_dim
    ForwardResult forward(const DiffArray& features) const;

    std::vector<DiffArray>& parameters() { return params_; }
    const std::vector<DiffArray>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    void zero_grad();

    Heads& heads() { return heads_; }

   private:
    DiffArray make_param(const std::string& name, ad::Shape shape, std::vector<double> values);
    Linear make_linear(const std::string& name, std::size_t in, std::size_t out);
    Norm make_norm(const std::string& name, std::size_t dim);
    AttentionParams make_attention(const std::string& name);

    ModelConfig config_;
    std::mt19937_64 rng_;
    Linear input_proj_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    DiffArray query_embed_;
    Heads heads_;
    std::vector<DiffArray> params_;
    std::vector<std::string> names_;
};

}  // namespace selfdetr::model
