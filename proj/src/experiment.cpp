#include "selfdetr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "selfdetr/errors.hpp"
#include "selfdetr/matching_loss.hpp"
#include "selfdetr/self_feedback.hpp"

namespace selfdetr {

std::vector<Unit> preprocess(std::span<const data::VideoSample> videos, const PreprocessConfig& cfg) {
    std::vector<Unit> units;
    for (const auto& v : videos) {
        const auto T = static_cast<double>(v.length);
        switch (cfg.mode) {
            case Preprocess::none:
                units.push_back({v, v.id, 0.0, T, T});
                break;
            case Preprocess::resize: {
                Unit u{v, v.id, 0.0, T, T};
                u.sample.features = data::resize_linear(v.features, v.length, v.feature_dim, cfg.resize);
                u.sample.length = cfg.resize;
                units.push_back(std::move(u));
                break;
            }
            case Preprocess::window:
                for (auto& w : data::window_slice(v, cfg.window, cfg.overlap))
                    units.push_back({std::move(w.sample), v.id, static_cast<double>(w.start),
                                     static_cast<double>(w.size), T});
                break;
        }
    }
    return units;
}

void to_json(nlohmann::json& j, const StepLosses& s) {
    j = {{"L_total", s.total}, {"L_DETR", s.detr}, {"L_fb_E", s.fb_encoder}, {"L_fb_D", s.fb_decoder}};
}

SampleObjective sample_objective(const model::DetrModel& model, const data::VideoSample& sample,
                                 const ExperimentConfig& config) {
    const auto x = model::DiffArray::constant({sample.length, sample.feature_dim}, sample.features);
    const auto fwd = model.forward(x);
    const auto detr = matching::detr_loss(fwd.per_layer, sample.segments, config.loss);
    const auto fb = feedback::compute_feedback(fwd.attention, config.feedback);
    SampleObjective out;
    out.total = matching::total_loss(detr, fb.encoder, fb.decoder, config.loss);
    out.values = {out.total.item(), detr.item(), fb.encoder.item(), fb.decoder.item()};
    return out;
}

Trainer::Trainer(ExperimentConfig config, std::vector<data::VideoSample> train_videos)
    : config_(std::move(config)), hash_(config_hash(config_)), model_(config_.model, config_.seed) {
    config_.validate();
    units_ = preprocess(train_videos, config_.preprocess);
    if (units_.empty()) throw ConfigError("training set is empty");
    adam_.reset(model_.parameters());
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(units_.size());
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5d7u};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

StepLosses Trainer::step(std::span<const std::size_t> batch, double lr) {
    model_.zero_grad();
    StepLosses mean;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (auto idx : batch) {
        const auto& s = units_.at(idx).sample;
        const auto obj = sample_objective(model_, s, config_);
        const auto& v = obj.values;
        if (!std::isfinite(v.total))
            throw DivergenceError("non-finite loss at step " + std::to_string(adam_.step) + " on sample '" + s.id +
                                  "': L_DETR=" + std::to_string(v.detr) + " L_fb_E=" + std::to_string(v.fb_encoder) +
                                  " L_fb_D=" + std::to_string(v.fb_decoder));
        ad::backward(obj.total, w);
        mean.total += w * v.total;
        mean.detr += w * v.detr;
        mean.fb_encoder += w * v.fb_encoder;
        mean.fb_decoder += w * v.fb_decoder;
    }
    auto& params = model_.parameters();
    if (config_.optimizer.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : params)
            if (p.has_grad())
                for (double g : p.node()->grad) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > config_.optimizer.clip_norm) {
            const double f = config_.optimizer.clip_norm / norm;
            for (auto& p : params)
                for (double& g : p.node()->grad) g *= f;
        }
    }
    const ad::AdamOptions opts{lr, config_.optimizer.beta1, config_.optimizer.beta2, config_.optimizer.eps};
    ad::adam_step(params, adam_, opts);
    return mean;
}

std::vector<nlohmann::json> Trainer::run(std::size_t epochs_to_run, const StepCallback& on_step) {
    std::vector<nlohmann::json> records;
    const std::size_t end = std::min(config_.epochs, next_epoch_ + epochs_to_run);
    for (; next_epoch_ < end; ++next_epoch_) {
        const double lr = config_.optimizer.lr_at_epoch(next_epoch_, config_.epochs);
        const auto order = epoch_order(next_epoch_);
        StepLosses sum;
        std::size_t steps = 0;
        for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
            const std::span<const std::size_t> batch(order.data() + b, std::min(config_.batch_size, order.size() - b));
            const auto l = step(batch, lr);
            if (on_step) on_step(static_cast<std::size_t>(adam_.step), next_epoch_, l);
            sum.total += l.total;
            sum.detr += l.detr;
            sum.fb_encoder += l.fb_encoder;
            sum.fb_decoder += l.fb_decoder;
            ++steps;
        }
        const double n = static_cast<double>(steps);
        nlohmann::json rec = StepLosses{sum.total / n, sum.detr / n, sum.fb_encoder / n, sum.fb_decoder / n};
        rec["epoch"] = next_epoch_;
        rec["lr"] = lr;
        rec["steps"] = adam_.step;
        rec["config_hash"] = hash_;
        rec["seed"] = config_.seed;
        records.push_back(std::move(rec));
    }
    return records;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint ck;
    ck.config_hash = hash_;
    ck.meta = {{"config", nlohmann::json(config_)},
               {"seed", config_.seed},
               {"next_epoch", next_epoch_},
               {"step", adam_.step}};
    const auto& params = model_.parameters();
    const auto& names = model_.parameter_names();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto v = params[i].values();
        ck.arrays.push_back({names[i], params[i].shape(), {v.begin(), v.end()}});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        ck.arrays.push_back({"adam.m." + names[i], params[i].shape(), adam_.m[i]});
        ck.arrays.push_back({"adam.v." + names[i], params[i].shape(), adam_.v[i]});
    }
    return ck;
}

namespace {

void load_parameters(model::DetrModel& model, const Checkpoint& ck) {
    auto& params = model.parameters();
    const auto& names = model.parameter_names();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto* a = ck.find(names[i]);
        if (!a) throw ValidationError("checkpoint is missing parameter '" + names[i] + "'");
        if (a->shape != params[i].shape())
            throw ValidationError("checkpoint parameter '" + names[i] + "' has shape " + ad::shape_string(a->shape) +
                                  ", model expects " + ad::shape_string(params[i].shape()));
        std::copy(a->values.begin(), a->values.end(), params[i].mutable_values().begin());
    }
}

}  // namespace

void Trainer::restore(const Checkpoint& ck) {
    if (ck.config_hash != hash_)
        throw ValidationError("checkpoint config hash " + ck.config_hash + " does not match " + hash_);
    load_parameters(model_, ck);
    const auto& names = model_.parameter_names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto* m = ck.find("adam.m." + names[i]);
        const auto* v = ck.find("adam.v." + names[i]);
        if (!m || !v) throw ValidationError("checkpoint has no optimizer state for '" + names[i] + "'");
        adam_.m[i] = m->values;
        adam_.v[i] = v->values;
    }
    adam_.step = ck.meta.at("step").get<std::int64_t>();
    next_epoch_ = ck.meta.at("next_epoch").get<std::size_t>();
}

std::vector<eval::Segment> predict_video(const model::DetrModel& model, const data::VideoSample& video,
                                         const ExperimentConfig& config) {
    ad::NoGradGuard guard;
    const data::VideoSample* one = &video;
    const auto units = preprocess(std::span(one, 1), config.preprocess);
    if (units.size() == 1 && config.preprocess.mode != Preprocess::window) {
        const auto& s = units[0].sample;
        const auto fwd = model.forward(model::DiffArray::constant({s.length, s.feature_dim}, s.features));
        return eval::detections_from_prediction(fwd.per_layer.back(), config.eval.nms);
    }
    // Windows: map each window's detections to video coordinates, then
    // suppress duplicates from overlapping windows.
    const std::size_t nc = config.model.num_classes;
    std::vector<std::vector<eval::Segment>> per_class(nc);
    auto opts = config.eval.nms;
    auto window_opts = opts;
    window_opts.top_k = std::max<std::size_t>(opts.top_k, 1);
    for (const auto& u : units) {
        const auto& s = u.sample;
        const auto fwd = model.forward(model::DiffArray::constant({s.length, s.feature_dim}, s.features));
        for (auto d : eval::detections_from_prediction(fwd.per_layer.back(), window_opts)) {
            const double a = std::clamp((u.offset + d.start() * u.span) / u.source_length, 0.0, 1.0);
            const double b = std::clamp((u.offset + d.end() * u.span) / u.source_length, 0.0, 1.0);
            per_class[static_cast<std::size_t>(d.class_id)].push_back(
                eval::Segment::from_interval(a, b, d.class_id, d.score));
        }
    }
    std::vector<eval::Segment> all;
    for (auto& c : per_class) {
        auto kept = opts.enabled ? eval::soft_nms(std::move(c), opts) : std::move(c);
        all.insert(all.end(), kept.begin(), kept.end());
    }
    std::stable_sort(all.begin(), all.end(), eval::detection_before);
    if (all.size() > opts.top_k) all.resize(opts.top_k);
    return all;
}

std::vector<eval::VideoGroundTruth> ground_truths(std::span<const data::VideoSample> videos) {
    std::vector<eval::VideoGroundTruth> out;
    for (const auto& v : videos) out.push_back({v.id, v.segments});
    return out;
}

Evaluation evaluate(const model::DetrModel& model, std::span<const data::VideoSample> videos,
                    const ExperimentConfig& config) {
    Evaluation ev;
    ev.results.resize(videos.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < videos.size(); ++i)
        ev.results[i] = {videos[i].id, predict_video(model, videos[i], config)};
    const auto gts = ground_truths(videos);
    ev.metrics = eval::mean_ap(ev.results, gts, config.model.num_classes, config.eval.thresholds);
    return ev;
}

model::DetrModel model_from_checkpoint(const Checkpoint& ck, ExperimentConfig* config_out) {
    if (!ck.meta.contains("config")) throw ValidationError("checkpoint metadata has no config");
    const auto cfg = ck.meta.at("config").get<ExperimentConfig>();
    model::DetrModel m(cfg.model, cfg.seed);
    load_parameters(m, ck);
    if (config_out) *config_out = cfg;
    return m;
}

data::Dataset resolve_dataset(const ExperimentConfig& config) {
    if (!config.dataset.empty()) return data::load_dataset(config.dataset);
    return data::generate_synthetic(config.data);
}

}  // namespace selfdetr
