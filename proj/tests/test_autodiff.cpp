#include <cmath>
#include <random>

#include "doctest.h"

#include "selfdetr/autodiff.hpp"
#include "selfdetr/gradient_suite.hpp"

using namespace selfdetr;
using ad::DiffArray;

namespace {

std::vector<double> uniform(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
    const auto a = DiffArray::constant({2, 2}, {1, 2, 3, 4});
    const auto b = DiffArray::constant({2, 1}, {0, 1});
    const auto c = ad::matmul(a, b);
    CHECK(c.shape() == ad::Shape{2, 1});
    CHECK(c.at(0, 0) == 2.0);
    CHECK(c.at(1, 0) == 4.0);

    const auto x = DiffArray::constant({2, 3}, uniform(6, 1));
    const auto ix = ad::matmul(DiffArray::identity(2), x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(ix.values()[i] == x.values()[i]);
    CHECK_THROWS_AS(ad::matmul(x, x), DimensionError);
}

TEST_CASE("matmul gradient against central differences") {
    const auto b = DiffArray::constant({3, 4}, uniform(12, 2));
    const auto r = ad::grad_check([&](const DiffArray& a) { return ad::sum(ad::matmul(a, b)); },
                                  DiffArray::constant({2, 3}, uniform(6, 3)));
    CHECK(r.max_rel_error < 1e-6);
    // d sum(AB) / dA_ij = sum_k B_jk
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += b.at(j, k);
            CHECK(r.analytic[i * 3 + j] == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("softmax rows") {
    auto y = ad::softmax_rows(DiffArray::constant({2, 2}, {0.0, 0.0, std::log(2.0), 0.0}));
    CHECK(y.at(0, 0) == doctest::Approx(0.5));
    CHECK(y.at(0, 1) == doctest::Approx(0.5));
    CHECK(y.at(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(y.at(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    // Large magnitudes are stable through the row-max shift.
    const auto big = uniform(40 * 17, 4, -800.0, 800.0);
    y = ad::softmax_rows(DiffArray::constant({40, 17}, big), 1.3);
    for (std::size_t i = 0; i < 40; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 17; ++j) {
            CHECK(std::isfinite(y.at(i, j)));
            s += y.at(i, j);
        }
        CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("layer norm closed forms") {
    const auto gain = DiffArray::constant({2}, {1, 1});
    const auto bias = DiffArray::constant({2}, {0, 0});
    auto y = ad::layer_norm(DiffArray::constant({1, 2}, {1, -1}), gain, bias);
    // var = 1, so the output is (x - 0) / sqrt(1 + 1e-5).
    CHECK(y.at(0, 0) == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
    CHECK(y.at(0, 1) == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
    y = ad::layer_norm(DiffArray::constant({1, 2}, {3, 3}), gain, bias);
    CHECK(y.at(0, 0) == 0.0);
    CHECK(y.at(0, 1) == 0.0);
}

TEST_CASE("elementwise sqrt") {
    const auto y = ad::elementwise_sqrt(DiffArray::constant({2, 2}, {1, 4, 9, 0}));
    CHECK(std::vector<double>(y.values().begin(), y.values().end()) == std::vector<double>{1, 2, 3, 0});
    const auto i3 = ad::elementwise_sqrt(DiffArray::identity(3));
    for (std::size_t i = 0; i < 9; ++i) CHECK(i3.values()[i] == DiffArray::identity(3).values()[i]);
    CHECK_THROWS_AS(ad::elementwise_sqrt(DiffArray::constant({1}, {-1e-3})), DomainError);

    const auto r = ad::grad_check([](const DiffArray& x) { return ad::sum(ad::elementwise_sqrt(x)); },
                                  DiffArray::constant({1}, {0.25}));
    CHECK(r.analytic[0] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.max_rel_error < 1e-6);
    // Zero entry: bounded adjoint rather than inf.
    auto z = DiffArray::parameter({1}, {0.0});
    ad::backward(ad::sum(ad::elementwise_sqrt(z)));
    CHECK(std::isfinite(z.grad()[0]));
    CHECK(z.grad()[0] == doctest::Approx(0.5e6));
}

TEST_CASE("kl rows") {
    const auto p = DiffArray::constant({1, 2}, {0.5, 0.5});
    const auto q = DiffArray::constant({1, 2}, {0.75, 0.25});
    const double eps = 1e-8;
    const double expected = 0.5 * std::log((0.5 + eps) / (0.75 + eps)) + 0.5 * std::log((0.5 + eps) / (0.25 + eps));
    CHECK(ad::kl_rows(p, q).item() == doctest::Approx(expected).epsilon(1e-14));
    CHECK(ad::kl_rows(p, q).item() == doctest::Approx(0.14384).epsilon(1e-4));
    CHECK(std::fabs(ad::kl_rows(p, p).item()) <= 1e-10);
    CHECK_THROWS_AS(ad::kl_rows(p, DiffArray::constant({2, 1}, {0.5, 0.5})), DimensionError);

    // Gibbs inequality on random row-stochastic pairs; the value is a mean over rows.
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto a = ad::softmax_rows(DiffArray::constant({5, 7}, uniform(35, 10 + s, -3, 3)));
        const auto b = ad::softmax_rows(DiffArray::constant({5, 7}, uniform(35, 50 + s, -3, 3)));
        const double kl = ad::kl_rows(a, b).item();
        CHECK(kl >= 0.0);
        double sum_rows = 0.0;
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 7; ++j)
                sum_rows += a.at(i, j) * std::log((a.at(i, j) + eps) / (b.at(i, j) + eps));
        CHECK(kl == doctest::Approx(sum_rows / 5.0).epsilon(1e-12));
    }
}

TEST_CASE("adam") {
    auto p = DiffArray::parameter({2}, {0.3, -0.7});
    ad::AdamState state;
    state.reset(std::span(&p, 1));
    p.node()->ensure_grad() = {0.0, 0.0};
    ad::adam_step(std::span(&p, 1), state, {});
    CHECK(p.values()[0] == 0.3);
    CHECK(p.values()[1] == -0.7);

    auto q = DiffArray::parameter({1}, {1.0});
    state.reset(std::span(&q, 1));
    q.node()->ensure_grad() = {1.0};
    ad::adam_step(std::span(&q, 1), state, {1e-3, 0.9, 0.999, 1e-8});
    // m_hat = v_hat = 1 after one step: update = lr / (1 + eps).
    CHECK(q.values()[0] == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-15));

    auto run = [] {
        auto x = DiffArray::parameter({3}, {0.1, 0.2, 0.3});
        ad::AdamState st;
        st.reset(std::span(&x, 1));
        for (int i = 0; i < 2; ++i) {
            x.zero_grad();
            ad::backward(ad::sum(ad::mul(x, x)));
            ad::adam_step(std::span(&x, 1), st, {});
        }
        return std::vector<double>(x.values().begin(), x.values().end());
    };
    CHECK(run() == run());

    auto bad = DiffArray::parameter({1}, {1.0});
    state.reset(std::span(&bad, 1));
    bad.node()->ensure_grad() = {std::nan("")};
    CHECK_THROWS_AS(ad::adam_step(std::span(&bad, 1), state, {}), DivergenceError);
    CHECK(bad.values()[0] == 1.0);
}

TEST_CASE("grad check helper") {
    auto r = ad::grad_check([](const DiffArray& x) { return ad::sum(ad::mul(x, x)); },
                            DiffArray::constant({2}, {1, 2}));
    CHECK(r.analytic[0] == doctest::Approx(2.0));
    CHECK(r.analytic[1] == doctest::Approx(4.0));
    CHECK(r.max_rel_error < 1e-7);
    r = ad::grad_check([](const DiffArray&) { return DiffArray::scalar(3.0); }, DiffArray::constant({2}, {1, 2}));
    CHECK(r.analytic == std::vector<double>{0.0, 0.0});
    CHECK(r.max_rel_error == 0.0);
}

TEST_CASE("two adjoint paths accumulate") {
    // y = sum(x * a) + sum(x * b) uses x twice; dy/dx = a + b.
    auto x = DiffArray::parameter({3}, {1, 2, 3});
    const auto a = DiffArray::constant({3}, {0.5, -1, 2});
    const auto b = DiffArray::constant({3}, {1, 1, -4});
    const DiffArray parts[] = {ad::sum(ad::mul(x, a)), ad::sum(ad::mul(x, b))};
    ad::backward(ad::add_all(parts));
    CHECK(x.grad() == std::vector<double>{1.5, 0.0, -2.0});
    // A second backward adds on top.
    const DiffArray again[] = {ad::sum(ad::mul(x, a))};
    ad::backward(ad::add_all(again));
    CHECK(x.grad() == std::vector<double>{2.0, -1.0, 0.0});
}

TEST_CASE("no-grad guard records nothing") {
    auto x = DiffArray::parameter({2}, {1, 2});
    {
        ad::NoGradGuard guard;
        const auto y = ad::sum(ad::mul(x, x));
        CHECK_FALSE(y.requires_grad());
        CHECK(y.node()->inputs.empty());
    }
    CHECK(ad::grad_enabled());
    CHECK(ad::sum(x).requires_grad());
}

TEST_CASE("forward and backward are bitwise deterministic") {
    auto run = [] {
        auto w = DiffArray::parameter({6, 5}, uniform(30, 77));
        const auto x = DiffArray::constant({4, 6}, uniform(24, 78));
        const auto y = ad::softmax_rows(ad::matmul(x, w), 0.5);
        const auto l = ad::kl_rows(y, ad::row_normalize(ad::elementwise_sqrt(ad::matmul(ad::matmul_nt(y, y), y))));
        ad::backward(l);
        return std::pair(l.item(), w.grad());
    };
    CHECK(run() == run());
}

TEST_CASE("every registered operation passes the finite-difference check") {
    for (const auto& r : gradcheck::check_operations()) {
        INFO(r.name << " max rel error " << r.max_rel_error);
        CHECK(r.passed);
    }
}

TEST_CASE("corrupted adjoint is caught") {
    const auto r = gradcheck::check_corrupted_adjoint();
    CHECK_FALSE(r.passed);
    CHECK(r.max_rel_error > 1e-3);
}

TEST_CASE("shape validation") {
    CHECK_THROWS_AS(DiffArray::constant({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(DiffArray::constant({1, 1, 1, 1}, {1}), DimensionError);
    CHECK_THROWS_AS(ad::add(DiffArray::zeros({2}), DiffArray::zeros({3})), DimensionError);
    CHECK_THROWS_AS(DiffArray::zeros({2}).item(), DimensionError);
}

TEST_CASE("3-axis arrays fold leading axes into rows") {
    const auto x = DiffArray::constant({2, 3, 4}, uniform(24, 9));
    CHECK(x.rows() == 6);
    CHECK(x.cols() == 4);
    const auto y = ad::softmax_rows(x);
    CHECK(y.shape() == ad::Shape{2, 3, 4});
}

TEST_CASE("row normalization floors tiny row sums") {
    auto x = DiffArray::parameter({2, 2}, {1e-10, 1e-10, 1.0, 3.0});
    const auto y = ad::row_normalize(x, 1e-8);
    CHECK(y.at(0, 0) == doctest::Approx(1e-2).epsilon(1e-12));
    CHECK(y.at(1, 1) == 0.75);
    ad::backward(ad::sum(y));
    const auto g = x.grad();
    // Floored rows scale by 1/eps; normal rows sum to one, so their gradient vanishes.
    CHECK(g[0] == doctest::Approx(1e8));
    CHECK(std::fabs(g[2]) < 1e-15);
    CHECK(std::fabs(g[3]) < 1e-15);
}
