#include "selfdetr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "selfdetr/errors.hpp"

namespace selfdetr::eval {

void to_json(nlohmann::json& j, const NmsOptions& o) {
    j = {{"enabled", o.enabled},
         {"iou_threshold", o.iou_threshold},
         {"top_k", o.top_k},
         {"decay", o.decay == Decay::linear ? "linear" : "gaussian"},
         {"sigma", o.sigma}};
}

void from_json(const nlohmann::json& j, NmsOptions& o) {
    NmsOptions d;
    o.enabled = j.value("enabled", d.enabled);
    o.iou_threshold = j.value("iou_threshold", d.iou_threshold);
    o.top_k = j.value("top_k", d.top_k);
    const auto decay = j.value("decay", std::string("linear"));
    if (decay == "linear")
        o.decay = Decay::linear;
    else if (decay == "gaussian")
        o.decay = Decay::gaussian;
    else
        throw ConfigError("unknown eval.nms.decay '" + decay + "'");
    o.sigma = j.value("sigma", d.sigma);
}

bool detection_before(const Segment& a, const Segment& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start() != b.start()) return a.start() < b.start();
    return a.end() < b.end();
}

std::vector<Segment> soft_nms(std::vector<Segment> preds, const NmsOptions& options) {
    std::vector<Segment> kept;
    kept.reserve(std::min(preds.size(), options.top_k));
    while (!preds.empty() && kept.size() < options.top_k) {
        auto best = std::min_element(preds.begin(), preds.end(), detection_before);
        const Segment pick = *best;
        preds.erase(best);
        for (auto& p : preds) {
            const double iou = matching::segment_iou(pick, p);
            if (options.decay == Decay::linear) {
                if (iou > options.iou_threshold) p.score *= (1.0 - iou);
            } else {
                p.score *= std::exp(-(iou * iou) / options.sigma);
            }
        }
        kept.push_back(pick);
    }
    return kept;
}

std::optional<double> average_precision(std::span<const VideoDetections> results,
                                        std::span<const VideoGroundTruth> gts, int class_id, double tiou) {
    std::map<std::string, std::vector<Segment>> truth;
    std::size_t positives = 0;
    for (const auto& v : gts)
        for (const auto& s : v.segments)
            if (s.class_id == class_id) {
                truth[v.id].push_back(s);
                ++positives;
            }
    if (positives == 0) return std::nullopt;

    struct Candidate {
        const std::string* video;
        Segment seg;
    };
    std::vector<Candidate> cands;
    for (const auto& v : results)
        for (const auto& d : v.detections)
            if (d.class_id == class_id) cands.push_back({&v.id, d});
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.seg.score != b.seg.score) return a.seg.score > b.seg.score;
        if (*a.video != *b.video) return *a.video < *b.video;
        return detection_before(a.seg, b.seg);
    });

    std::map<std::string, std::vector<char>> used;
    for (const auto& [id, segs] : truth) used[id].assign(segs.size(), 0);
    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const auto& c : cands) {
        bool hit = false;
        if (auto it = truth.find(*c.video); it != truth.end()) {
            const auto& segs = it->second;
            std::vector<std::size_t> order(segs.size());
            std::iota(order.begin(), order.end(), 0);
            std::vector<double> ious(segs.size());
            for (std::size_t g = 0; g < segs.size(); ++g) ious[g] = matching::segment_iou(c.seg, segs[g]);
            std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ious[a] > ious[b]; });
            auto& flags = used[*c.video];
            for (auto g : order) {
                if (ious[g] < tiou) break;
                if (flags[g]) continue;
                flags[g] = 1;
                hit = true;
                break;
            }
        }
        hit ? ++tp : ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
    }

    // All-point interpolated area under the precision/recall curve.
    std::vector<double> mprec{0.0}, mrec{0.0};
    mprec.insert(mprec.end(), precision.begin(), precision.end());
    mrec.insert(mrec.end(), recall.begin(), recall.end());
    mprec.push_back(0.0);
    mrec.push_back(1.0);
    for (std::size_t i = mprec.size() - 1; i > 0; --i) mprec[i - 1] = std::max(mprec[i - 1], mprec[i]);
    double ap = 0.0;
    for (std::size_t i = 1; i < mrec.size(); ++i)
        if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mprec[i];
    return ap;
}

void to_json(nlohmann::json& j, const MapResult& r) {
    j = {{"thresholds", r.thresholds}, {"map", r.map}, {"average", r.average}};
}

MapResult mean_ap(std::span<const VideoDetections> results, std::span<const VideoGroundTruth> gts,
                  std::size_t num_classes, std::vector<double> thresholds) {
    MapResult out;
    out.thresholds = std::move(thresholds);
    for (double t : out.thresholds) {
        double total = 0.0;
        std::size_t counted = 0;
        for (std::size_t c = 0; c < num_classes; ++c) {
            if (auto ap = average_precision(results, gts, static_cast<int>(c), t)) {
                total += *ap;
                ++counted;
            }
        }
        out.map.push_back(counted ? total / static_cast<double>(counted) : 0.0);
    }
    if (!out.map.empty())
        out.average = std::accumulate(out.map.begin(), out.map.end(), 0.0) / static_cast<double>(out.map.size());
    return out;
}

std::vector<Segment> detections_from_prediction(const model::Prediction& pred, const NmsOptions& options) {
    const std::size_t nq = pred.class_logits.rows();
    const std::size_t nc = pred.class_logits.cols();
    const std::size_t fg = nc - 1;
    const auto logits = pred.class_logits.values();
    const auto seg = pred.segments.values();
    std::vector<std::vector<Segment>> per_class(fg);
    std::vector<double> prob(nc);
    for (std::size_t q = 0; q < nq; ++q) {
        double mx = logits[q * nc];
        for (std::size_t c = 1; c < nc; ++c) mx = std::max(mx, logits[q * nc + c]);
        double s = 0.0;
        for (std::size_t c = 0; c < nc; ++c) s += (prob[c] = std::exp(logits[q * nc + c] - mx));
        for (std::size_t c = 0; c < fg; ++c) {
            Segment d{seg[2 * q], seg[2 * q + 1], static_cast<int>(c), prob[c] / s};
            // Store the clamped interval so downstream IoU and export agree.
            d = Segment::from_interval(d.start(), d.end(), d.class_id, d.score);
            per_class[c].push_back(d);
        }
    }
    std::vector<Segment> all;
    for (auto& cls : per_class) {
        auto kept = options.enabled ? soft_nms(std::move(cls), options) : std::move(cls);
        all.insert(all.end(), kept.begin(), kept.end());
    }
    std::stable_sort(all.begin(), all.end(), detection_before);
    if (all.size() > options.top_k) all.resize(options.top_k);
    return all;
}

nlohmann::json results_to_json(std::span<const VideoDetections> results) {
    auto arr = nlohmann::json::array();
    for (const auto& v : results) {
        auto dets = nlohmann::json::array();
        for (const auto& d : v.detections)
            dets.push_back({{"start", d.start()}, {"end", d.end()}, {"class", d.class_id}, {"score", d.score}});
        arr.push_back({{"id", v.id}, {"detections", std::move(dets)}});
    }
    return arr;
}

std::vector<VideoDetections> results_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw ValidationError("results must be a JSON array of videos");
    std::vector<VideoDetections> out;
    for (const auto& v : j) {
        VideoDetections vd;
        vd.id = v.at("id").get<std::string>();
        for (const auto& d : v.at("detections"))
            vd.detections.push_back(Segment::from_interval(d.at("start").get<double>(), d.at("end").get<double>(),
                                                           d.at("class").get<int>(), d.at("score").get<double>()));
        out.push_back(std::move(vd));
    }
    return out;
}

}  // namespace selfdetr::eval
