#pragma once

#include <span>
#include <vector>

#include "json.hpp"

#include "selfdetr/autodiff.hpp"
#include "selfdetr/model.hpp"

namespace selfdetr::matching {

using ad::DiffArray;

// One action interval in normalized video time.
struct Segment {
    double center = 0.5;
    double width = 0.0;
    int class_id = 0;
    double score = 1.0;

    // Interval endpoints clamped to [0, 1].
    double start() const;
    double end() const;
    static Segment from_interval(double start, double end, int class_id, double score = 1.0);
};

struct LossWeights {
    double w_cls = 2.0;
    double w_l1 = 2.0;
    double w_iou = 5.0;
    double lambda_e = 5.0;
    double lambda_d = 5.0;
    double background_weight = 0.1;
    bool aux_loss = true;  // average the detection loss over every decoder layer
};

// Serializes the detection weights only; lambda_e / lambda_d live under the
// `feedback` section of the experiment config.
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// IoU of two closed intervals; identical intervals give 1, empty union 0.
double interval_iou(double s1, double e1, double s2, double e2);
// IoU of the clamped intervals of two segments.
double segment_iou(const Segment& a, const Segment& b);

struct CostMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    CostMatrix() = default;
    CostMatrix(std::size_t r, std::size_t c, std::vector<double> d);
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct Assignment {
    std::vector<std::size_t> row_to_col;
    double total_cost = 0.0;  // sum of cost(i, row_to_col[i]) in row order
};

// cost(i, j) = -w_cls p_j(c_i) + w_l1 |t_i - t_j|_1 + w_iou (1 - IoU(t_i, t_j)),
// rows are ground truths and columns are queries. Intervals are taken
// unclamped from (center, width) to agree with the training loss.
CostMatrix match_cost_matrix(const model::Prediction& pred, std::span<const Segment> gts,
                             const LossWeights& weights);

// Minimum-cost injective assignment of rows to columns (rows <= cols).
// Among optimal assignments the lexicographically smallest column sequence
// is returned.
Assignment hungarian(const CostMatrix& cost);

// Detection objective of one decoder layer's prediction.
DiffArray detr_layer_loss(const model::Prediction& pred, std::span<const Segment> gts,
                          const LossWeights& weights);
// Mean over decoder layers when aux_loss is set, otherwise the last layer.
DiffArray detr_loss(std::span<const model::Prediction> per_layer, std::span<const Segment> gts,
                    const LossWeights& weights);

// L = L_detr + lambda_e * L_fb_enc + lambda_d * L_fb_dec. Terms with a zero
// weight are left out of the graph entirely.
DiffArray total_loss(const DiffArray& detr, const DiffArray& fb_enc, const DiffArray& fb_dec,
                     const LossWeights& weights);

}  // namespace selfdetr::matching
