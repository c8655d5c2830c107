#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "selfdetr/errors.hpp"

// Minimal reverse-mode differentiation over dense double arrays.
//
// Arrays have one to three axes. Matrix operations treat the last axis as
// columns and fold every leading axis into rows. Each operation records its
// inputs and an adjoint closure; `backward` linearizes the reachable graph
// into a tape (topological order by creation) and replays it in reverse.
namespace selfdetr::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t id = 0;      // creation order, used to order the tape
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad();
};

class DiffArray {
   public:
    DiffArray() = default;

    static DiffArray constant(Shape shape, std::vector<double> values);
    static DiffArray parameter(Shape shape, std::vector<double> values);
    static DiffArray zeros(Shape shape, bool requires_grad = false);
    static DiffArray full(Shape shape, double value);
    static DiffArray scalar(double value);
    static DiffArray identity(std::size_t n);

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const;  // product of all axes but the last
    std::size_t cols() const;  // last axis

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }
    double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    // Gradient of the last backward pass; zeros if nothing was accumulated.
    std::vector<double> grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    // Same values, no history, no gradient.
    DiffArray detach() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit DiffArray(std::shared_ptr<Node> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

bool grad_enabled();

// Reverse-topological replay list for one root.
class Tape {
   public:
    static Tape record(const DiffArray& root);
    // Seeds the root adjoint with `seed` (broadcast over its entries) and
    // replays every recorded adjoint in reverse order.
    void replay(double seed = 1.0) const;
    std::size_t size() const { return order_.size(); }

   private:
    std::vector<std::shared_ptr<Node>> order_;  // forward order
};

// Accumulates d(seed * root)/d(leaf) into every reachable requires_grad node.
void backward(const DiffArray& root, double seed = 1.0);

// ---- operations ---------------------------------------------------------

// Result of a user-defined operation. `backward_fn` receives the result node
// and must add its contribution into each input's ensure_grad().
DiffArray custom_op(Shape shape, std::vector<double> values, std::vector<DiffArray> inputs,
                    std::function<void(Node&)> backward_fn);

DiffArray matmul(const DiffArray& a, const DiffArray& b);     // a[m x k] b[k x n]
DiffArray matmul_nt(const DiffArray& a, const DiffArray& b);  // a[m x k] b[n x k]^T
DiffArray transpose(const DiffArray& a);

DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& a, double s);
DiffArray add_scalar(const DiffArray& a, double s);
// x[m x n] + bias[n] broadcast over rows.
DiffArray add_row_bias(const DiffArray& x, const DiffArray& bias);
DiffArray relu(const DiffArray& x);
DiffArray sigmoid(const DiffArray& x);
DiffArray abs(const DiffArray& x);

DiffArray softmax_rows(const DiffArray& x, double scale = 1.0);
DiffArray layer_norm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                     double eps = 1e-5);
// Entrywise square root; the adjoint uses 1/(2 sqrt(x + 1e-12)).
DiffArray elementwise_sqrt(const DiffArray& x);
// Each row divided by max(row sum, eps), so stochastic rows pass through unchanged.
DiffArray row_normalize(const DiffArray& x, double eps = 1e-8);
// Mean over rows of sum_j p_ij ln((p_ij + eps) / (q_ij + eps)).
DiffArray kl_rows(const DiffArray& p, const DiffArray& q, double eps = 1e-8);

DiffArray sum(const DiffArray& x);
DiffArray mean(const DiffArray& x);
// Elementwise mean of equally shaped arrays.
DiffArray average(std::span<const DiffArray> xs);
// Sum of scalars.
DiffArray add_all(std::span<const DiffArray> xs);

DiffArray slice_cols(const DiffArray& x, std::size_t begin, std::size_t count);
DiffArray concat_cols(std::span<const DiffArray> parts);
DiffArray gather_rows(const DiffArray& x, std::span<const std::size_t> rows);

// Weighted softmax cross-entropy over rows of logits:
// sum_i w_i * -log softmax(x_i)[t_i] / sum_i w_i.
DiffArray cross_entropy_rows(const DiffArray& logits, std::span<const std::size_t> targets,
                             std::span<const double> weights);
// Row-wise 1-D IoU between (center, width) rows of `pred` and constant `target`.
DiffArray interval_iou_rows(const DiffArray& pred, std::span<const double> target);
// x minus its column means broadcast over rows.
DiffArray center_columns(const DiffArray& x);
// sqrt(max column abs-sum * max row abs-sum), subgradient at ties picks the first.
DiffArray composite_norm(const DiffArray& x);

// ---- optimization -------------------------------------------------------

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t step = 0;

    void reset(std::span<const DiffArray> params);
};

// One bias-corrected Adam update from the gradients held by `params`.
// Throws DivergenceError on a non-finite gradient before touching anything.
void adam_step(std::span<DiffArray> params, AdamState& state, const AdamOptions& options);

// ---- verification -------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

using ScalarFn = std::function<DiffArray(const DiffArray&)>;

// Compares the reverse-mode gradient of f at x with central differences.
// Error per entry is |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const ScalarFn& f, const DiffArray& x, double h = 1e-5);

}  // namespace selfdetr::ad
