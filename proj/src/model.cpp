#include "selfdetr/model.hpp"

#include <cmath>

#include "selfdetr/errors.hpp"

namespace selfdetr::model {

void ModelConfig::validate() const {
    if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0)
        throw ConfigError("model_dim must be a positive multiple of num_heads");
    if (model_dim % 2 != 0) throw ConfigError("model_dim must be even for sinusoidal encoding");
    if (num_decoder_layers == 0) throw ConfigError("at least one decoder layer is required");
    if (num_queries == 0 || num_classes == 0 || input_dim == 0 || mlp_dim == 0)
        throw ConfigError("num_queries, num_classes, input_dim and mlp_dim must be positive");
    if (dropout != 0.0) throw ConfigError("dropout is not supported; set model.dropout to 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"input_dim", c.input_dim},
         {"num_encoder_layers", c.num_encoder_layers},
         {"num_decoder_layers", c.num_decoder_layers},
         {"num_queries", c.num_queries},
         {"model_dim", c.model_dim},
         {"num_heads", c.num_heads},
         {"mlp_dim", c.mlp_dim},
         {"num_classes", c.num_classes},
         {"dropout", c.dropout},
         {"decoder_self_attention", c.decoder_self_attention}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.input_dim = j.value("input_dim", d.input_dim);
    c.num_encoder_layers = j.value("num_encoder_layers", d.num_encoder_layers);
    c.num_decoder_layers = j.value("num_decoder_layers", d.num_decoder_layers);
    c.num_queries = j.value("num_queries", d.num_queries);
    c.model_dim = j.value("model_dim", d.model_dim);
    c.num_heads = j.value("num_heads", d.num_heads);
    c.mlp_dim = j.value("mlp_dim", d.mlp_dim);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.dropout = j.value("dropout", d.dropout);
    c.decoder_self_attention = j.value("decoder_self_attention", d.decoder_self_attention);
}

DiffArray Linear::operator()(const DiffArray& x) const { return ad::add_row_bias(ad::matmul(x, weight), bias); }

DiffArray Norm::operator()(const DiffArray& x) const { return ad::layer_norm(x, gain, bias, 1e-5); }

std::vector<double> positional_encoding(std::size_t length, std::size_t dim) {
    if (dim % 2 != 0) throw ConfigError("positional_encoding requires an even dimension");
    std::vector<double> pe(length * dim);
    for (std::size_t t = 0; t < length; ++t)
        for (std::size_t k = 0; k < dim / 2; ++k) {
            const double angle = static_cast<double>(t) /
                                 std::pow(10000.0, static_cast<double>(2 * k) / static_cast<double>(dim));
            pe[t * dim + 2 * k] = std::sin(angle);
            pe[t * dim + 2 * k + 1] = std::cos(angle);
        }
    return pe;
}

AttentionOutput multi_head_attention(const DiffArray& query, const DiffArray& key,
                                     const DiffArray& value, const AttentionParams& params,
                                     std::size_t heads) {
    const std::size_t dim = query.cols();
    if (key.cols() != dim || value.cols() != dim || key.rows() != value.rows())
        throw DimensionError("multi_head_attention: query/key/value shapes disagree");
    if (heads == 0 || dim % heads != 0) throw DimensionError("multi_head_attention: bad head count");
    const std::size_t head_dim = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    const auto q = params.q(query);
    const auto k = params.k(key);
    const auto v = params.v(value);
    std::vector<DiffArray> outs, maps;
    outs.reserve(heads);
    maps.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto qh = heads == 1 ? q : ad::slice_cols(q, h * head_dim, head_dim);
        const auto kh = heads == 1 ? k : ad::slice_cols(k, h * head_dim, head_dim);
        const auto vh = heads == 1 ? v : ad::slice_cols(v, h * head_dim, head_dim);
        auto a = ad::softmax_rows(ad::matmul_nt(qh, kh), scale);
        outs.push_back(ad::matmul(a, vh));
        maps.push_back(std::move(a));
    }
    auto merged = heads == 1 ? outs[0] : ad::concat_cols(outs);
    auto map = heads == 1 ? maps[0] : ad::average(maps);
    return {params.out(merged), std::move(map)};
}

EncoderOutput encoder_forward(const DiffArray& features, std::span<const EncoderLayer> layers,
                              std::size_t heads) {
    EncoderOutput out;
    auto x = features;
    for (const auto& layer : layers) {
        auto attn = multi_head_attention(x, x, x, layer.self_attn, heads);
        x = layer.norm1(ad::add(x, attn.output));
        auto hidden = layer.mlp_out(ad::relu(layer.mlp_in(x)));
        x = layer.norm2(ad::add(x, hidden));
        out.self_maps.push_back(std::move(attn.map));
    }
    out.refined = std::move(x);
    return out;
}

DecoderOutput decoder_forward(const DiffArray& memory, const DiffArray& memory_pos,
                              const DiffArray& query_embed, std::span<const DecoderLayer> layers,
                              std::size_t heads, bool use_self_attention) {
    if (memory.shape() != memory_pos.shape())
        throw DimensionError("decoder_forward: memory and positional encoding shapes differ");
    DecoderOutput out;
    const auto keys = ad::add(memory, memory_pos);
    auto tgt = query_embed;
    for (const auto& layer : layers) {
        if (use_self_attention) {
            const auto q = ad::add(tgt, query_embed);
            auto sa = multi_head_attention(q, q, tgt, layer.self_attn, heads);
            tgt = layer.norm1(ad::add(tgt, sa.output));
            out.self_maps.push_back(std::move(sa.map));
        }
        auto ca = multi_head_attention(ad::add(tgt, query_embed), keys, memory, layer.cross_attn, heads);
        tgt = layer.norm2(ad::add(tgt, ca.output));
        out.cross_maps.push_back(std::move(ca.map));
        auto hidden = layer.mlp_out(ad::relu(layer.mlp_in(tgt)));
        tgt = layer.norm3(ad::add(tgt, hidden));
        out.states.push_back(tgt);
    }
    return out;
}

Prediction predict_heads(const DiffArray& query_state, const Heads& heads) {
    Prediction p;
    p.class_logits = heads.cls(query_state);
    auto h = ad::relu(heads.seg1(query_state));
    h = ad::relu(heads.seg2(h));
    p.segments = ad::sigmoid(heads.seg3(h));
    return p;
}

DetrModel::DetrModel(const ModelConfig& config, std::uint64_t seed) : config_(config), rng_(seed) {
    config_.validate();
    const std::size_t d = config_.model_dim;
    input_proj_ = make_linear("input_proj", config_.input_dim, d);
    for (std::size_t i = 0; i < config_.num_encoder_layers; ++i) {
        const std::string p = "encoder." + std::to_string(i) + ".";
        EncoderLayer layer;
        layer.self_attn = make_attention(p + "self_attn");
        layer.norm1 = make_norm(p + "norm1", d);
        layer.mlp_in = make_linear(p + "mlp_in", d, config_.mlp_dim);
        layer.mlp_out = make_linear(p + "mlp_out", config_.mlp_dim, d);
        layer.norm2 = make_norm(p + "norm2", d);
        encoder_.push_back(std::move(layer));
    }
    for (std::size_t i = 0; i < config_.num_decoder_layers; ++i) {
        const std::string p = "decoder." + std::to_string(i) + ".";
        DecoderLayer layer;
        if (config_.decoder_self_attention) {
            layer.self_attn = make_attention(p + "self_attn");
            layer.norm1 = make_norm(p + "norm1", d);
        }
        layer.cross_attn = make_attention(p + "cross_attn");
        layer.norm2 = make_norm(p + "norm2", d);
        layer.mlp_in = make_linear(p + "mlp_in", d, config_.mlp_dim);
        layer.mlp_out = make_linear(p + "mlp_out", config_.mlp_dim, d);
        layer.norm3 = make_norm(p + "norm3", d);
        decoder_.push_back(std::move(layer));
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> q(config_.num_queries * d);
    for (auto& v : q) v = normal(rng_);
    query_embed_ = make_param("query_embed", {config_.num_queries, d}, std::move(q));
    heads_.cls = make_linear("head.cls", d, config_.num_classes + 1);
    heads_.seg1 = make_linear("head.seg1", d, d);
    heads_.seg2 = make_linear("head.seg2", d, d);
    heads_.seg3 = make_linear("head.seg3", d, 2);
}

DiffArray DetrModel::make_param(const std::string& name, ad::Shape shape, std::vector<double> values) {
    auto p = DiffArray::parameter(std::move(shape), std::move(values));
    params_.push_back(p);
    names_.push_back(name);
    return p;
}

Linear DetrModel::make_linear(const std::string& name, std::size_t in, std::size_t out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    std::vector<double> w(in * out);
    for (auto& v : w) v = uniform(rng_);
    Linear l;
    l.weight = make_param(name + ".weight", {in, out}, std::move(w));
    l.bias = make_param(name + ".bias", {out}, std::vector<double>(out, 0.0));
    return l;
}

Norm DetrModel::make_norm(const std::string& name, std::size_t dim) {
    Norm n;
    n.gain = make_param(name + ".gain", {dim}, std::vector<double>(dim, 1.0));
    n.bias = make_param(name + ".bias", {dim}, std::vector<double>(dim, 0.0));
    return n;
}

AttentionParams DetrModel::make_attention(const std::string& name) {
    const std::size_t d = config_.model_dim;
    return {make_linear(name + ".q", d, d), make_linear(name + ".k", d, d),
            make_linear(name + ".v", d, d), make_linear(name + ".out", d, d)};
}

ForwardResult DetrModel::forward(const DiffArray& features) const {
    if (features.shape().size() != 2 || features.cols() != config_.input_dim)
        throw DimensionError("forward: expected T x " + std::to_string(config_.input_dim) +
                             " features, got " + ad::shape_string(features.shape()));
    const std::size_t length = features.rows();
    const std::size_t d = config_.model_dim;
    const auto pos = DiffArray::constant({length, d}, positional_encoding(length, d));
    const auto x = ad::add(input_proj_(features), pos);

    auto enc = encoder_forward(x, encoder_, config_.num_heads);
    auto dec = decoder_forward(enc.refined, pos, query_embed_, decoder_, config_.num_heads,
                               config_.decoder_self_attention);
    ForwardResult result;
    result.per_layer.reserve(dec.states.size());
    for (const auto& s : dec.states) result.per_layer.push_back(predict_heads(s, heads_));
    result.attention.enc_self = std::move(enc.self_maps);
    result.attention.dec_self = std::move(dec.self_maps);
    result.attention.cross = std::move(dec.cross_maps);
    return result;
}

void DetrModel::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace selfdetr::model
