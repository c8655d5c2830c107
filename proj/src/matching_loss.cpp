#include "selfdetr/matching_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "selfdetr/errors.hpp"

namespace selfdetr::matching {

double Segment::start() const { return std::clamp(center - 0.5 * width, 0.0, 1.0); }
double Segment::end() const { return std::clamp(center + 0.5 * width, 0.0, 1.0); }

Segment Segment::from_interval(double start, double end, int class_id, double score) {
    return {0.5 * (start + end), end - start, class_id, score};
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"w_cls", w.w_cls},
         {"w_l1", w.w_l1},
         {"w_iou", w.w_iou},
         {"background_weight", w.background_weight},
         {"aux_loss", w.aux_loss}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
    LossWeights d;
    w.w_cls = j.value("w_cls", d.w_cls);
    w.w_l1 = j.value("w_l1", d.w_l1);
    w.w_iou = j.value("w_iou", d.w_iou);
    w.background_weight = j.value("background_weight", d.background_weight);
    w.aux_loss = j.value("aux_loss", d.aux_loss);
    for (double v : {w.w_cls, w.w_l1, w.w_iou, w.lambda_e, w.lambda_d, w.background_weight})
        if (v < 0.0) throw ConfigError("loss weights must be non-negative");
}

double interval_iou(double s1, double e1, double s2, double e2) {
    if (s1 == s2 && e1 == e2) return 1.0;
    const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
    const double uni = (e1 - s1) + (e2 - s2) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double segment_iou(const Segment& a, const Segment& b) {
    return interval_iou(a.start(), a.end(), b.start(), b.end());
}

CostMatrix::CostMatrix(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols) throw DimensionError("CostMatrix: data size does not match shape");
}

CostMatrix match_cost_matrix(const model::Prediction& pred, std::span<const Segment> gts,
                             const LossWeights& weights) {
    const std::size_t nq = pred.class_logits.rows();
    const std::size_t nc = pred.class_logits.cols();
    if (gts.size() > nq)
        throw CapacityError(std::to_string(gts.size()) + " ground truths exceed " + std::to_string(nq) +
                            " queries");
    std::vector<double> prob(nq * nc);
    const auto logits = pred.class_logits.values();
    for (std::size_t j = 0; j < nq; ++j) {
        double mx = logits[j * nc];
        for (std::size_t c = 1; c < nc; ++c) mx = std::max(mx, logits[j * nc + c]);
        double s = 0.0;
        for (std::size_t c = 0; c < nc; ++c) s += (prob[j * nc + c] = std::exp(logits[j * nc + c] - mx));
        for (std::size_t c = 0; c < nc; ++c) prob[j * nc + c] /= s;
    }
    const auto seg = pred.segments.values();
    std::vector<double> cost(gts.size() * nq);
    for (std::size_t i = 0; i < gts.size(); ++i) {
        const auto& g = gts[i];
        if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) + 1 >= nc)
            throw DimensionError("ground-truth class id out of range");
        for (std::size_t j = 0; j < nq; ++j) {
            const double c = seg[2 * j], w = seg[2 * j + 1];
            const double l1 = std::fabs(g.center - c) + std::fabs(g.width - w);
            const double iou = interval_iou(g.center - 0.5 * g.width, g.center + 0.5 * g.width,
                                            c - 0.5 * w, c + 0.5 * w);
            cost[i * nq + j] = -weights.w_cls * prob[j * nc + static_cast<std::size_t>(g.class_id)] +
                               weights.w_l1 * l1 + weights.w_iou * (1.0 - iou);
        }
    }
    return {gts.size(), nq, std::move(cost)};
}

namespace {

// Shortest augmenting path Hungarian method over the sub-matrix selected by
// `rows` x `cols` (rows.size() <= cols.size()). Returns the optimal cost and
// writes the chosen position in `cols` for each row.
double solve_assignment(const CostMatrix& cost, std::span<const std::size_t> rows,
                        std::span<const std::size_t> cols, std::vector<std::size_t>* choice) {
    const std::size_t m = rows.size(), n = cols.size();
    if (m == 0) {
        if (choice) choice->clear();
        return 0.0;
    }
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<double> minv(n + 1);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= m; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost.at(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> pick(m, 0);
    for (std::size_t j = 1; j <= n; ++j)
        if (p[j] != 0) pick[p[j] - 1] = j - 1;
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) total += cost.at(rows[i], cols[pick[i]]);
    if (choice) *choice = std::move(pick);
    return total;
}

}  // namespace

Assignment hungarian(const CostMatrix& cost) {
    if (cost.rows > cost.cols)
        throw CapacityError("hungarian: " + std::to_string(cost.rows) + " rows exceed " +
                            std::to_string(cost.cols) + " columns");
    for (double c : cost.data)
        if (!std::isfinite(c)) throw DomainError("hungarian: non-finite cost");
    Assignment result;
    if (cost.rows == 0) return result;

    std::vector<std::size_t> all_rows(cost.rows), all_cols(cost.cols);
    std::iota(all_rows.begin(), all_rows.end(), 0);
    std::iota(all_cols.begin(), all_cols.end(), 0);
    std::vector<std::size_t> pick;
    const double best = solve_assignment(cost, all_rows, all_cols, &pick);
    double scale_ref = 1.0;
    for (double c : cost.data) scale_ref = std::max(scale_ref, std::fabs(c));
    const double tol = 1e-12 * scale_ref * static_cast<double>(cost.rows);

    // Walk rows in order and give each the smallest column that still admits
    // an optimal completion.
    std::vector<std::size_t> fixed(cost.rows);
    std::vector<char> taken(cost.cols, 0);
    double fixed_sum = 0.0;
    std::vector<std::size_t> current = pick;  // positions into all_cols
    for (std::size_t i = 0; i < cost.rows; ++i) {
        std::vector<std::size_t> rest_rows(all_rows.begin() + static_cast<std::ptrdiff_t>(i + 1), all_rows.end());
        std::size_t chosen = current[i];
        for (std::size_t j = 0; j < current[i]; ++j) {
            if (taken[j]) continue;
            std::vector<std::size_t> rest_cols;
            for (std::size_t c = 0; c < cost.cols; ++c)
                if (!taken[c] && c != j) rest_cols.push_back(c);
            std::vector<std::size_t> sub_pick;
            const double sub = solve_assignment(cost, rest_rows, rest_cols, &sub_pick);
            if (fixed_sum + cost.at(i, j) + sub <= best + tol) {
                chosen = j;
                for (std::size_t r = 0; r < sub_pick.size(); ++r) current[i + 1 + r] = rest_cols[sub_pick[r]];
                break;
            }
        }
        fixed[i] = chosen;
        taken[chosen] = 1;
        fixed_sum += cost.at(i, chosen);
    }
    result.row_to_col = std::move(fixed);
    result.total_cost = 0.0;
    for (std::size_t i = 0; i < cost.rows; ++i) result.total_cost += cost.at(i, result.row_to_col[i]);
    return result;
}

DiffArray detr_layer_loss(const model::Prediction& pred, std::span<const Segment> gts,
                          const LossWeights& weights) {
    const std::size_t nq = pred.class_logits.rows();
    const std::size_t background = pred.class_logits.cols() - 1;

    std::vector<std::size_t> targets(nq, background);
    std::vector<double> class_weights(nq, weights.background_weight);
    std::vector<std::size_t> matched_queries;
    std::vector<double> matched_targets;
    if (!gts.empty()) {
        const auto assignment = hungarian(match_cost_matrix(pred, gts, weights));
        for (std::size_t i = 0; i < gts.size(); ++i) {
            const std::size_t q = assignment.row_to_col[i];
            targets[q] = static_cast<std::size_t>(gts[i].class_id);
            class_weights[q] = 1.0;
            matched_queries.push_back(q);
            matched_targets.push_back(gts[i].center);
            matched_targets.push_back(gts[i].width);
        }
    }
    auto loss = ad::scale(ad::cross_entropy_rows(pred.class_logits, targets, class_weights), weights.w_cls);
    if (matched_queries.empty()) return loss;

    const double inv_m = 1.0 / static_cast<double>(matched_queries.size());
    const auto matched = ad::gather_rows(pred.segments, matched_queries);
    const auto target = DiffArray::constant({matched_queries.size(), 2}, matched_targets);
    const auto l1 = ad::scale(ad::sum(ad::abs(ad::sub(matched, target))), inv_m);
    const auto iou_sum = ad::sum(ad::interval_iou_rows(matched, matched_targets));
    const auto iou_loss = ad::scale(ad::add_scalar(ad::scale(iou_sum, -1.0), static_cast<double>(matched_queries.size())), inv_m);
    const DiffArray terms[] = {loss, ad::scale(l1, weights.w_l1), ad::scale(iou_loss, weights.w_iou)};
    return ad::add_all(terms);
}

DiffArray detr_loss(std::span<const model::Prediction> per_layer, std::span<const Segment> gts,
                    const LossWeights& weights) {
    if (per_layer.empty()) throw DimensionError("detr_loss needs at least one decoder layer output");
    if (!weights.aux_loss) return detr_layer_loss(per_layer.back(), gts, weights);
    std::vector<DiffArray> layers;
    layers.reserve(per_layer.size());
    for (const auto& p : per_layer) layers.push_back(detr_layer_loss(p, gts, weights));
    if (layers.size() == 1) return layers[0];
    return ad::scale(ad::add_all(layers), 1.0 / static_cast<double>(layers.size()));
}

DiffArray total_loss(const DiffArray& detr, const DiffArray& fb_enc, const DiffArray& fb_dec,
                     const LossWeights& weights) {
    std::vector<DiffArray> terms{detr};
    if (weights.lambda_e != 0.0) terms.push_back(ad::scale(fb_enc, weights.lambda_e));
    if (weights.lambda_d != 0.0) terms.push_back(ad::scale(fb_dec, weights.lambda_d));
    return terms.size() == 1 ? detr : ad::add_all(terms);
}

}  // namespace selfdetr::matching
