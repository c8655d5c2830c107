#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"

#include "selfdetr/data.hpp"
#include "selfdetr/diversity.hpp"
#include "selfdetr/model.hpp"

using namespace selfdetr;
using namespace selfdetr::diversity;

namespace {

std::vector<double> uniform(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

model::ModelConfig tiny_model() {
    model::ModelConfig c;
    c.input_dim = 8;
    c.model_dim = 8;
    c.num_heads = 2;
    c.mlp_dim = 16;
    c.num_queries = 6;
    c.num_classes = 3;
    return c;
}

data::SynthConfig tiny_data() {
    data::SynthConfig s;
    s.length = 24;
    s.feature_dim = 8;
    s.num_classes = 3;
    s.max_instances = 2;
    s.train_size = 4;
    s.test_size = 10;
    return s;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("composite norm") {
    CHECK(composite_norm(std::vector<double>(6, 0.0), 2, 3) == 0.0);
    CHECK(composite_norm(std::vector<double>{1, 0, 0, 1}, 2, 2) == 1.0);
    CHECK(composite_norm(std::vector<double>{1, -1, 0, 0}, 2, 2) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    // Direct max-column / max-row oracle on a random matrix.
    const auto v = uniform(12, 3);
    double c = 0.0, r = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < 3; ++i) s += std::fabs(v[i * 4 + j]);
        c = std::max(c, s);
    }
    for (std::size_t i = 0; i < 3; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 4; ++j) s += std::fabs(v[i * 4 + j]);
        r = std::max(r, s);
    }
    CHECK(composite_norm(v, 3, 4) == doctest::Approx(std::sqrt(c * r)).epsilon(1e-15));
}

TEST_CASE("rank-1 residual") {
    const std::vector<double> a{0.1, 0.7, 0.2};
    std::vector<double> rank1;
    for (int i = 0; i < 5; ++i) rank1.insert(rank1.end(), a.begin(), a.end());
    const auto r = rank1_residual(rank1, 5, 3);
    CHECK(r.d == 0.0);
    CHECK(r.a == a);

    const auto eye = rank1_residual(std::vector<double>{1, 0, 0, 1}, 2, 2);
    CHECK(eye.a == std::vector<double>{0.5, 0.5});
    CHECK(eye.d == 1.0);

    CHECK(rank1_residual(std::vector<double>(9, 0.37), 3, 3).d == 0.0);

    // Odd row count takes the middle value.
    const auto odd = rank1_residual(std::vector<double>{3, 0, 1, 0, 2, 0}, 3, 2);
    CHECK(odd.a[0] == 2.0);
}

TEST_CASE("rank-1 residual is invariant to column shifts") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const std::size_t m = 5 + s % 3, n = 4 + s % 4;
        auto v = uniform(m * n, 10 + s, 0.0, 1.0);
        const auto shift = uniform(n, 50 + s, -3.0, 3.0);
        const double d0 = rank1_residual(v, m, n).d;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) v[i * n + j] += shift[j];
        CHECK(std::fabs(rank1_residual(v, m, n).d - d0) < 1e-9);
        CHECK(d0 >= 0.0);
    }
}

TEST_CASE("diversity report") {
    const auto ds = data::generate_synthetic(tiny_data());
    model::DetrModel m(tiny_model(), 5);
    CHECK_THROWS_AS(diversity_report(m, ds.test, 0, 1), ConfigError);

    const auto r = diversity_report(m, ds.test, 6, 1, "abc");
    CHECK(r.enc_self.size() == 2);
    CHECK(r.dec_self.size() == 4);
    CHECK(r.sample_count == 6);
    CHECK(r.config_hash == "abc");
    for (double d : r.enc_self) CHECK(d >= 0.0);
    for (double d : r.dec_self) CHECK(d >= 0.0);

    const auto again = diversity_report(m, ds.test, 6, 1, "abc");
    CHECK(again.enc_self == r.enc_self);
    CHECK(again.dec_self == r.dec_self);
    CHECK(diversity_report(m, ds.test, 100, 1).sample_count == ds.test.size());

    // The mean over the whole pool does not depend on the sampling seed.
    const auto all1 = diversity_report(m, ds.test, 100, 1), all2 = diversity_report(m, ds.test, 100, 2);
    for (std::size_t l = 0; l < all1.enc_self.size(); ++l)
        CHECK(all1.enc_self[l] == doctest::Approx(all2.enc_self[l]).epsilon(1e-13));

    // Single-sample report equals a direct library computation.
    const auto one = diversity_report(m, std::span(ds.test).subspan(0, 1), 1, 0);
    ad::NoGradGuard guard;
    const auto fwd = m.forward(ad::DiffArray::constant({ds.test[0].length, ds.test[0].feature_dim}, ds.test[0].features));
    for (std::size_t l = 0; l < 2; ++l) {
        const auto& a = fwd.attention.enc_self[l];
        CHECK(one.enc_self[l] == rank1_residual(a.values(), a.rows(), a.cols()).d);
    }

    nlohmann::json j = r;
    const auto back = j.get<DiversityReport>();
    CHECK(back.enc_self == r.enc_self);
    CHECK(back.sample_count == r.sample_count);
}

TEST_CASE("attention export round-trips") {
    const auto ds = data::generate_synthetic(tiny_data());
    model::DetrModel m(tiny_model(), 5);
    TempDir dir("selfdetr_export_test");
    export_attention(m, ds.test[0], dir.path);
    for (const char* name : {"enc_self_0.csv", "enc_self_1.csv", "dec_self_3.csv", "cross_0.csv", "manifest.json"})
        CHECK(std::filesystem::exists(dir.path / name));
    CHECK_FALSE(std::filesystem::exists(dir.path / "enc_self_2.csv"));

    ad::NoGradGuard guard;
    const auto fwd = m.forward(ad::DiffArray::constant({ds.test[0].length, ds.test[0].feature_dim}, ds.test[0].features));
    std::size_t rows = 0, cols = 0;
    const auto cross = read_csv_matrix(dir.path / "cross_0.csv", rows, cols);
    CHECK(rows == fwd.attention.cross[0].rows());
    CHECK(cols == fwd.attention.cross[0].cols());
    for (std::size_t i = 0; i < cross.size(); ++i) CHECK(std::fabs(cross[i] - fwd.attention.cross[0].values()[i]) < 1e-9);
}
