#include "selfdetr/gradient_suite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "selfdetr/autodiff.hpp"
#include "selfdetr/config.hpp"
#include "selfdetr/experiment.hpp"
#include "selfdetr/model.hpp"
#include "selfdetr/self_feedback.hpp"

namespace selfdetr::gradcheck {

using ad::DiffArray;
using ad::Shape;

namespace {

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t seed) : gen(seed) {}
    std::vector<double> uniform(std::size_t n, double lo, double hi) {
        std::uniform_real_distribution<double> u(lo, hi);
        std::vector<double> v(n);
        for (auto& x : v) x = u(gen);
        return v;
    }
    // Values bounded away from zero, for ops with a kink at the origin.
    std::vector<double> away_from_zero(std::size_t n) {
        auto v = uniform(n, 0.2, 1.5);
        std::bernoulli_distribution sign(0.5);
        for (auto& x : v)
            if (sign(gen)) x = -x;
        return v;
    }
    DiffArray constant(Shape s, double lo = -1.0, double hi = 1.0) {
        const auto n = ad::shape_size(s);
        return DiffArray::constant(std::move(s), uniform(n, lo, hi));
    }
};

// Projects an array onto a scalar with fixed random weights.
ad::ScalarFn probe(std::function<DiffArray(const DiffArray&)> op, std::uint64_t seed) {
    return [op = std::move(op), seed](const DiffArray& x) {
        const auto y = op(x);
        Rng rng(seed);
        const auto r = DiffArray::constant(y.shape(), rng.uniform(y.size(), -1.0, 1.0));
        return ad::sum(ad::mul(y, r));
    };
}

CaseResult run(const std::string& name, const ad::ScalarFn& f, const DiffArray& x, double tol) {
    const auto r = ad::grad_check(f, x);
    return {name, r.max_rel_error, r.max_rel_error < tol};
}

DiffArray row_stochastic(Rng& rng, std::size_t m, std::size_t n) {
    const auto logits = rng.constant({m, n}, -2.0, 2.0);
    return ad::softmax_rows(logits);
}

}  // namespace

std::vector<CaseResult> check_operations(double tol) {
    std::vector<CaseResult> out;
    Rng rng(20240601);
    auto add = [&](const std::string& name, std::function<DiffArray(const DiffArray&)> op, DiffArray x) {
        out.push_back(run(name, probe(std::move(op), out.size() + 1), x, tol));
    };
    auto param = [&](Shape s, double lo = -1.0, double hi = 1.0) {
        const auto n = ad::shape_size(s);
        return DiffArray::constant(std::move(s), rng.uniform(n, lo, hi));
    };
    auto kinked = [&](Shape s) {
        const auto n = ad::shape_size(s);
        return DiffArray::constant(std::move(s), rng.away_from_zero(n));
    };

    const auto b34 = param({3, 4});
    const auto b54 = param({5, 4});
    add("matmul.lhs", [&](const DiffArray& x) { return ad::matmul(x, b34); }, param({2, 3}));
    add("matmul.rhs", [&](const DiffArray& x) { return ad::matmul(b54, x); }, param({4, 3}));
    add("matmul_nt.lhs", [&](const DiffArray& x) { return ad::matmul_nt(x, b54); }, param({3, 4}));
    add("matmul_nt.rhs", [&](const DiffArray& x) { return ad::matmul_nt(b54, x); }, param({2, 4}));
    add("matmul_nt.self", [](const DiffArray& x) { return ad::matmul_nt(x, x); }, param({3, 4}));
    add("transpose", [](const DiffArray& x) { return ad::transpose(x); }, param({3, 5}));

    const auto c35 = param({3, 5});
    add("add", [&](const DiffArray& x) { return ad::add(x, c35); }, param({3, 5}));
    add("sub.lhs", [&](const DiffArray& x) { return ad::sub(x, c35); }, param({3, 5}));
    add("sub.rhs", [&](const DiffArray& x) { return ad::sub(c35, x); }, param({3, 5}));
    add("mul", [&](const DiffArray& x) { return ad::mul(x, c35); }, param({3, 5}));
    add("mul.self", [](const DiffArray& x) { return ad::mul(x, x); }, param({3, 5}));
    add("scale", [](const DiffArray& x) { return ad::scale(x, -1.7); }, param({4}));
    add("add_scalar", [](const DiffArray& x) { return ad::add_scalar(x, 0.3); }, param({4}));
    const auto bias5 = param({5});
    add("add_row_bias.x", [&](const DiffArray& x) { return ad::add_row_bias(x, bias5); }, param({3, 5}));
    add("add_row_bias.bias", [&](const DiffArray& x) { return ad::add_row_bias(c35, x); }, param({5}));
    add("relu", [](const DiffArray& x) { return ad::relu(x); }, kinked({3, 4}));
    add("sigmoid", [](const DiffArray& x) { return ad::sigmoid(x); }, param({3, 4}, -3.0, 3.0));
    add("abs", [](const DiffArray& x) { return ad::abs(x); }, kinked({3, 4}));

    add("softmax_rows", [](const DiffArray& x) { return ad::softmax_rows(x, 0.7); }, param({3, 6}, -2.0, 2.0));
    add("softmax_rows.3d", [](const DiffArray& x) { return ad::softmax_rows(x); }, param({2, 3, 4}, -2.0, 2.0));
    const auto gain = param({6}, 0.5, 1.5);
    const auto beta = param({6});
    const auto ln_x = param({4, 6}, -2.0, 2.0);
    add("layer_norm.x", [&](const DiffArray& x) { return ad::layer_norm(x, gain, beta); }, param({4, 6}, -2.0, 2.0));
    add("layer_norm.gain", [&](const DiffArray& x) { return ad::layer_norm(ln_x, x, beta); }, param({6}, 0.5, 1.5));
    add("layer_norm.bias", [&](const DiffArray& x) { return ad::layer_norm(ln_x, gain, x); }, param({6}));
    add("elementwise_sqrt", [](const DiffArray& x) { return ad::elementwise_sqrt(x); }, param({3, 4}, 0.1, 2.0));
    add("row_normalize", [](const DiffArray& x) { return ad::row_normalize(x); }, param({3, 4}, 0.1, 2.0));
    const auto q = param({3, 4}, 0.05, 1.0);
    const auto p = param({3, 4}, 0.05, 1.0);
    out.push_back(run("kl_rows.p", [&](const DiffArray& x) { return ad::kl_rows(x, q); }, param({3, 4}, 0.05, 1.0), tol));
    out.push_back(run("kl_rows.q", [&](const DiffArray& x) { return ad::kl_rows(p, x); }, param({3, 4}, 0.05, 1.0), tol));

    out.push_back(run("sum", [](const DiffArray& x) { return ad::sum(ad::mul(x, x)); }, param({3, 4}), tol));
    out.push_back(run("mean", [](const DiffArray& x) { return ad::mean(ad::mul(x, x)); }, param({3, 4}), tol));
    const auto other = param({3, 4});
    add("average", [&](const DiffArray& x) {
        const DiffArray xs[] = {x, other, ad::mul(x, x)};
        return ad::average(xs);
    }, param({3, 4}));
    out.push_back(run("add_all", [](const DiffArray& x) {
        const DiffArray xs[] = {ad::sum(x), ad::sum(ad::mul(x, x)), ad::mean(x)};
        return ad::add_all(xs);
    }, param({3, 4}), tol));
    add("slice_cols", [](const DiffArray& x) { return ad::slice_cols(x, 1, 2); }, param({3, 5}));
    add("concat_cols", [&](const DiffArray& x) {
        const DiffArray parts[] = {x, c35, ad::scale(x, 2.0)};
        return ad::concat_cols(parts);
    }, param({3, 2}));
    const std::vector<std::size_t> gather{2, 0, 2};
    add("gather_rows", [&](const DiffArray& x) { return ad::gather_rows(x, gather); }, param({4, 3}));

    const std::vector<std::size_t> targets{0, 2, 1, 2};
    const std::vector<double> weights{1.0, 0.1, 1.0, 0.1};
    out.push_back(run("cross_entropy_rows",
                      [&](const DiffArray& x) { return ad::cross_entropy_rows(x, targets, weights); },
                      param({4, 3}, -2.0, 2.0), tol));
    // Predicted and target intervals overlap partially, away from the
    // containment and disjointness kinks.
    const std::vector<double> seg_target{0.40, 0.20, 0.60, 0.30, 0.30, 0.10};
    const auto seg_pred = DiffArray::constant({3, 2}, {0.45, 0.25, 0.52, 0.18, 0.34, 0.15});
    add("interval_iou_rows", [&](const DiffArray& x) { return ad::interval_iou_rows(x, seg_target); }, seg_pred);
    add("center_columns", [](const DiffArray& x) { return ad::center_columns(x); }, param({4, 3}));
    out.push_back(run("composite_norm", [](const DiffArray& x) { return ad::composite_norm(x); },
                      DiffArray::constant({3, 3}, {0.9, -0.2, 0.4, 0.1, 0.3, -0.25, -0.5, 0.15, 0.05}), tol));

    // Composite blocks built from the primitives above.
    model::AttentionParams attn;
    auto lin = [&](std::size_t in, std::size_t o) {
        return model::Linear{param({in, o}, -0.5, 0.5), param({o}, -0.1, 0.1)};
    };
    attn = {lin(4, 4), lin(4, 4), lin(4, 4), lin(4, 4)};
    const auto kv = param({5, 4});
    add("attention.query", [&](const DiffArray& x) { return model::multi_head_attention(x, kv, kv, attn, 2).output; },
        param({3, 4}));
    add("attention.map", [&](const DiffArray& x) { return model::multi_head_attention(x, x, x, attn, 2).map; },
        param({3, 4}));
    const auto cross_logits = param({4, 6}, -2.0, 2.0);
    add("guidance_decoder", [](const DiffArray& x) { return feedback::guidance_decoder(ad::softmax_rows(x)); },
        param({4, 6}, -2.0, 2.0));
    add("guidance_encoder", [&](const DiffArray& x) {
        const DiffArray maps[] = {ad::softmax_rows(x), ad::softmax_rows(cross_logits)};
        return feedback::guidance_encoder(maps);
    }, param({4, 6}, -2.0, 2.0));
    const auto enc2 = param({5, 5}, -2.0, 2.0);
    add("aggregate_encoder", [&](const DiffArray& x) {
        const DiffArray maps[] = {ad::softmax_rows(x), ad::softmax_rows(enc2), ad::softmax_rows(ad::scale(x, -0.5))};
        return feedback::aggregate_encoder_attention(maps);
    }, param({5, 5}, -2.0, 2.0));
    const auto guide = row_stochastic(rng, 4, 4);
    out.push_back(run("feedback_loss_encoder",
                      [&](const DiffArray& x) { return feedback::feedback_loss_encoder(ad::softmax_rows(x), guide); },
                      param({4, 4}, -2.0, 2.0), tol));
    out.push_back(run("surrogate_diversity",
                      [](const DiffArray& x) { return feedback::surrogate_diversity(ad::softmax_rows(x)); },
                      param({4, 4}, -2.0, 2.0), tol));
    return out;
}

CaseResult check_toy_model(double tol) {
    ExperimentConfig cfg;
    cfg.model.input_dim = 4;
    cfg.model.model_dim = 8;
    cfg.model.num_heads = 2;
    cfg.model.mlp_dim = 12;
    cfg.model.num_encoder_layers = 2;
    cfg.model.num_decoder_layers = 2;
    cfg.model.num_queries = 4;
    cfg.model.num_classes = 2;
    cfg.loss.lambda_e = 5.0;
    cfg.loss.lambda_d = 5.0;

    model::DetrModel model(cfg.model, 7);
    Rng rng(99);
    data::VideoSample sample;
    sample.id = "toy";
    sample.length = 8;
    sample.feature_dim = 4;
    sample.features = rng.uniform(8 * 4, -1.0, 1.0);
    sample.segments = {matching::Segment::from_interval(0.125, 0.5, 0), matching::Segment::from_interval(0.625, 0.875, 1)};

    model.zero_grad();
    ad::backward(sample_objective(model, sample, cfg).total);
    const double h = 1e-5;
    double worst = 0.0;
    ad::NoGradGuard no_grad;
    for (auto& p : model.parameters()) {
        const auto analytic = p.grad();
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            values[i] = keep + h;
            const double fp = sample_objective(model, sample, cfg).values.total;
            values[i] = keep - h;
            const double fm = sample_objective(model, sample, cfg).values.total;
            values[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            worst = std::max(worst, std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i])));
        }
    }
    return {"toy_model.total_loss", worst, worst < tol};
}

CaseResult check_corrupted_adjoint(double tol) {
    auto bad_sigmoid = [](const DiffArray& x) {
        std::vector<double> y(x.values().begin(), x.values().end());
        for (auto& v : y) v = 1.0 / (1.0 + std::exp(-v));
        return ad::custom_op(x.shape(), y, {x}, [](ad::Node& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += 1.1 * self.grad[i] * self.value[i] * (1.0 - self.value[i]);
        });
    };
    Rng rng(5);
    const auto probe_fn = probe(bad_sigmoid, 77);
    const auto r = ad::grad_check(probe_fn, DiffArray::constant({3, 4}, rng.uniform(12, -2.0, 2.0)));
    return {"corrupted_sigmoid", r.max_rel_error, r.max_rel_error < tol};
}

}  // namespace selfdetr::gradcheck
