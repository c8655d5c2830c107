#include "selfdetr/self_feedback.hpp"

#include "selfdetr/errors.hpp"

namespace selfdetr::feedback {

EncoderAggregation parse_encoder_aggregation(const std::string& s) {
    if (s == "matmul") return EncoderAggregation::matmul;
    if (s == "average") return EncoderAggregation::average;
    if (s == "last") return EncoderAggregation::last;
    throw ConfigError("unknown feedback.encoder_aggregation '" + s + "'");
}

DecoderMode parse_decoder_mode(const std::string& s) {
    if (s == "layer") return DecoderMode::layer;
    if (s == "last") return DecoderMode::last;
    if (s == "average") return DecoderMode::average;
    throw ConfigError("unknown feedback.decoder_mode '" + s + "'");
}

Guidance parse_guidance(const std::string& s) {
    if (s == "cross_attention") return Guidance::cross_attention;
    if (s == "identity") return Guidance::identity;
    if (s == "diversity_max") return Guidance::diversity_max;
    if (s == "off") return Guidance::off;
    throw ConfigError("unknown feedback.guidance '" + s + "'");
}

std::string to_string(EncoderAggregation a) {
    switch (a) {
        case EncoderAggregation::matmul: return "matmul";
        case EncoderAggregation::average: return "average";
        case EncoderAggregation::last: return "last";
    }
    return "?";
}

std::string to_string(DecoderMode m) {
    switch (m) {
        case DecoderMode::layer: return "layer";
        case DecoderMode::last: return "last";
        case DecoderMode::average: return "average";
    }
    return "?";
}

std::string to_string(Guidance g) {
    switch (g) {
        case Guidance::cross_attention: return "cross_attention";
        case Guidance::identity: return "identity";
        case Guidance::diversity_max: return "diversity_max";
        case Guidance::off: return "off";
    }
    return "?";
}

void to_json(nlohmann::json& j, const FeedbackConfig& c) {
    j = {{"encoder_aggregation", to_string(c.encoder_aggregation)},
         {"decoder_mode", to_string(c.decoder_mode)},
         {"guidance", to_string(c.guidance)},
         {"detach_guidance", c.detach_guidance}};
}

void from_json(const nlohmann::json& j, FeedbackConfig& c) {
    FeedbackConfig d;
    c.encoder_aggregation = parse_encoder_aggregation(j.value("encoder_aggregation", std::string("matmul")));
    c.decoder_mode = parse_decoder_mode(j.value("decoder_mode", std::string("layer")));
    c.guidance = parse_guidance(j.value("guidance", std::string("cross_attention")));
    c.detach_guidance = j.value("detach_guidance", d.detach_guidance);
}

DiffArray guidance_decoder(const DiffArray& cross_map) {
    return ad::elementwise_sqrt(ad::matmul_nt(cross_map, cross_map));
}

DiffArray guidance_encoder(std::span<const DiffArray> cross_maps) {
    if (cross_maps.empty()) throw ConfigError("guidance_encoder needs at least one cross-attention map");
    const auto mean_map = cross_maps.size() == 1 ? cross_maps[0] : ad::average(cross_maps);
    return ad::elementwise_sqrt(ad::matmul(ad::transpose(mean_map), mean_map));
}

DiffArray aggregate_encoder_attention(std::span<const DiffArray> enc_self) {
    if (enc_self.empty()) throw ConfigError("aggregate_encoder_attention needs at least one map");
    auto h = enc_self[0];
    for (std::size_t i = 1; i < enc_self.size(); ++i) h = ad::elementwise_sqrt(ad::matmul_nt(h, enc_self[i]));
    return h;
}

DiffArray aggregate_encoder(std::span<const DiffArray> enc_self, EncoderAggregation how) {
    if (enc_self.empty()) throw ConfigError("encoder aggregation needs at least one map");
    switch (how) {
        case EncoderAggregation::matmul: return aggregate_encoder_attention(enc_self);
        case EncoderAggregation::average: return ad::average(enc_self);
        case EncoderAggregation::last: return enc_self.back();
    }
    throw ConfigError("unknown encoder aggregation");
}

DiffArray row_renormalize(const DiffArray& m, double eps) { return ad::row_normalize(m, eps); }

DiffArray feedback_loss_encoder(const DiffArray& aggregated, const DiffArray& guidance) {
    if (aggregated.shape() != guidance.shape())
        throw DimensionError("feedback_loss_encoder: " + ad::shape_string(aggregated.shape()) + " vs " +
                             ad::shape_string(guidance.shape()));
    return ad::kl_rows(row_renormalize(aggregated), row_renormalize(guidance));
}

DiffArray feedback_loss_decoder(std::span<const DiffArray> dec_self, std::span<const DiffArray> guidance) {
    if (dec_self.size() != guidance.size())
        throw ConfigError("feedback_loss_decoder: " + std::to_string(dec_self.size()) +
                          " self-attention maps but " + std::to_string(guidance.size()) + " guidance maps");
    std::vector<DiffArray> terms;
    terms.reserve(dec_self.size());
    for (std::size_t l = 0; l < dec_self.size(); ++l)
        terms.push_back(feedback_loss_encoder(dec_self[l], guidance[l]));
    if (terms.empty()) return DiffArray::scalar(0.0);
    return terms.size() == 1 ? terms[0] : ad::add_all(terms);
}

DiffArray surrogate_diversity(const DiffArray& map) { return ad::composite_norm(ad::center_columns(map)); }

DiffArray alternative_guidance(Guidance mode, std::span<const DiffArray> maps) {
    std::vector<DiffArray> terms;
    switch (mode) {
        case Guidance::identity:
            for (const auto& a : maps) {
                if (a.rows() != a.cols()) throw DimensionError("identity guidance needs square maps");
                terms.push_back(ad::kl_rows(row_renormalize(a), row_renormalize(DiffArray::identity(a.rows()))));
            }
            break;
        case Guidance::diversity_max:
            for (const auto& a : maps) terms.push_back(ad::scale(surrogate_diversity(a), -1.0));
            break;
        default:
            throw ConfigError("alternative_guidance supports 'identity' and 'diversity_max' only");
    }
    if (terms.empty()) return DiffArray::scalar(0.0);
    return terms.size() == 1 ? terms[0] : ad::add_all(terms);
}

namespace {

DiffArray maybe_detach(const DiffArray& g, bool detach) { return detach ? g.detach() : g; }

// The self-attention maps and matching guidance maps the decoder term uses.
void select_decoder_pairs(const model::AttentionBundle& att, const FeedbackConfig& cfg,
                          std::vector<DiffArray>& self_maps, std::vector<DiffArray>& guides) {
    const auto& sa = att.dec_self;
    if (sa.empty()) return;
    const bool need_guides = cfg.guidance == Guidance::cross_attention;
    switch (cfg.decoder_mode) {
        case DecoderMode::layer:
            self_maps = sa;
            if (need_guides)
                for (const auto& c : att.cross) guides.push_back(maybe_detach(guidance_decoder(c), cfg.detach_guidance));
            break;
        case DecoderMode::last:
            self_maps = {sa.back()};
            if (need_guides) guides = {maybe_detach(guidance_decoder(att.cross.back()), cfg.detach_guidance)};
            break;
        case DecoderMode::average: {
            self_maps = {ad::average(sa)};
            if (need_guides) {
                std::vector<DiffArray> g;
                for (const auto& c : att.cross) g.push_back(guidance_decoder(c));
                guides = {maybe_detach(ad::average(g), cfg.detach_guidance)};
            }
            break;
        }
    }
}

}  // namespace

FeedbackLosses compute_feedback(const model::AttentionBundle& attention, const FeedbackConfig& config) {
    FeedbackLosses out{DiffArray::scalar(0.0), DiffArray::scalar(0.0)};
    if (config.guidance == Guidance::off) return out;

    if (!attention.enc_self.empty()) {
        const auto h = aggregate_encoder(attention.enc_self, config.encoder_aggregation);
        if (config.guidance == Guidance::cross_attention) {
            const auto g = maybe_detach(guidance_encoder(attention.cross), config.detach_guidance);
            out.encoder = feedback_loss_encoder(h, g);
        } else {
            const DiffArray maps[] = {h};
            out.encoder = alternative_guidance(config.guidance, maps);
        }
    }

    std::vector<DiffArray> self_maps, guides;
    select_decoder_pairs(attention, config, self_maps, guides);
    if (!self_maps.empty()) {
        out.decoder = config.guidance == Guidance::cross_attention
                          ? feedback_loss_decoder(self_maps, guides)
                          : alternative_guidance(config.guidance, self_maps);
    }
    return out;
}

}  // namespace selfdetr::feedback
