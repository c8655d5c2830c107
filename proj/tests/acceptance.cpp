// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Usage: acceptance [--epochs N] [--report path.json]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eval_fixtures.hpp"
#include "selfdetr/diversity.hpp"
#include "selfdetr/experiment.hpp"
#include "selfdetr/gradient_suite.hpp"
#include "selfdetr/self_feedback.hpp"

using namespace selfdetr;
using ad::DiffArray;
using nlohmann::json;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

struct Options {
    std::size_t epochs = 60;
    std::string report;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Eigen::MatrixXd to_eigen(const DiffArray& a) {
    Eigen::MatrixXd m(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.at(i, j);
    return m;
}

Eigen::Index numerical_rank(const Eigen::MatrixXd& m) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) r += s(i) > 1e-8;
    return r;
}

bool rank_ambiguous(const Eigen::MatrixXd& m) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > 1e-8 && s(i) <= 1e-4) return true;
    return false;
}

// Row-stochastic rows x cols. With rank < min(rows, cols) every row is a
// convex combination of `rank` random distributions.
DiffArray random_stochastic(std::mt19937_64& rng, std::size_t rows, std::size_t cols, std::size_t rank) {
    std::exponential_distribution<double> e(1.0);
    std::vector<std::vector<double>> basis(rank, std::vector<double>(cols));
    for (auto& b : basis) {
        for (auto& x : b) x = e(rng);
        const double s = std::accumulate(b.begin(), b.end(), 0.0);
        for (auto& x : b) x /= s;
    }
    std::vector<double> v(rows * cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        std::vector<double> w(rank);
        for (auto& x : w) x = e(rng);
        const double s = std::accumulate(w.begin(), w.end(), 0.0);
        for (std::size_t k = 0; k < rank; ++k)
            for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] += w[k] / s * basis[k][j];
    }
    return DiffArray::constant({rows, cols}, std::move(v));
}

Outcome gradient_correctness() {
    double worst = 0.0;
    std::string worst_name;
    bool ok = true;
    for (const auto& c : gradcheck::check_operations()) {
        ok = ok && c.passed;
        if (c.max_rel_error >= worst) worst = c.max_rel_error, worst_name = c.name;
    }
    const auto toy = gradcheck::check_toy_model();
    ok = ok && toy.passed;
    return {ok && worst < 1e-4 && toy.max_rel_error < 1e-4,
            "ops max rel err " + fmt("%.2e", worst) + " (" + worst_name + "), toy model " + fmt("%.2e", toy.max_rel_error)};
}

double brute_force_min(const matching::CostMatrix& c) {
    std::vector<std::size_t> cols(c.cols);
    std::iota(cols.begin(), cols.end(), 0);
    double best = INFINITY;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < c.rows; ++i) s += c.at(i, cols[i]);
        best = std::min(best, s);
        std::reverse(cols.begin() + static_cast<std::ptrdiff_t>(c.rows), cols.end());
    } while (std::next_permutation(cols.begin(), cols.end()));
    return best;
}

Outcome hungarian_oracle() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    std::size_t mismatches = 0;
    for (int t = 0; t < 200; ++t) {
        const auto m = std::uniform_int_distribution<std::size_t>(1, 7)(rng);
        const auto n = std::uniform_int_distribution<std::size_t>(m, 9)(rng);
        std::vector<double> d(m * n);
        // Every fourth case uses small integers so ties are common.
        for (auto& x : d) x = t % 4 == 0 ? std::round(u(rng) / 4.0) : u(rng);
        const matching::CostMatrix c(m, n, d);
        mismatches += matching::hungarian(c).total_cost != brute_force_min(c);
    }
    return {mismatches == 0, std::to_string(200 - mismatches) + "/200 equal to the exhaustive minimum"};
}

Outcome guidance_properties() {
    std::mt19937_64 rng(31);
    double asym = 0.0;
    std::size_t rank_ok = 0, nonneg_ok = 0, redrawn = 0;
    for (int t = 0; t < 100; ++t) {
        const auto lq = std::uniform_int_distribution<std::size_t>(2, 10)(rng);
        const auto T = std::uniform_int_distribution<std::size_t>(2, 16)(rng);
        const auto full = std::min(lq, T);
        const auto rank = t % 2 ? full : std::uniform_int_distribution<std::size_t>(1, full)(rng);
        std::vector<DiffArray> cross;
        // A singular value in (tol, sqrt(tol)] counts in A but squares below
        // tol in the Gram matrix, so such draws are redrawn.
        do {
            cross.clear();
            for (int l = 0; l < 3; ++l) cross.push_back(random_stochastic(rng, lq, T, rank));
        } while (rank_ambiguous(to_eigen(cross[0])) && ++redrawn);
        const auto gd = to_eigen(feedback::guidance_decoder(cross[0]));
        const auto ge = to_eigen(feedback::guidance_encoder(cross));
        asym = std::max({asym, (gd - gd.transpose()).cwiseAbs().maxCoeff(), (ge - ge.transpose()).cwiseAbs().maxCoeff()});
        nonneg_ok += gd.minCoeff() >= 0.0 && ge.minCoeff() >= 0.0;

        const auto a = to_eigen(cross[0]);
        const auto r = numerical_rank(a);
        rank_ok += numerical_rank(a * a.transpose()) == r && numerical_rank(a.transpose() * a) == r;
    }
    return {asym <= 1e-9 && rank_ok == 100 && nonneg_ok == 100,
            "max asymmetry " + fmt("%.1e", asym) + ", rank identity " + std::to_string(rank_ok) + "/100 (" + std::to_string(redrawn) +
                " ill-conditioned draws redrawn)"};
}

Outcome feedback_identities() {
    std::mt19937_64 rng(41);
    double worst_zero = 0.0, min_positive = INFINITY;
    for (int t = 0; t < 100; ++t) {
        const auto lq = std::uniform_int_distribution<std::size_t>(2, 10)(rng);
        const auto T = std::uniform_int_distribution<std::size_t>(2, 16)(rng);
        std::vector<DiffArray> cross{random_stochastic(rng, lq, T, std::min(lq, T)),
                                     random_stochastic(rng, lq, T, std::min(lq, T))};
        std::vector<DiffArray> gd{feedback::guidance_decoder(cross[0]), feedback::guidance_decoder(cross[1])};
        const auto ge = feedback::guidance_encoder(cross);

        // Self-attention rows equal to the guidance rows.
        std::vector<DiffArray> dec_equal{feedback::row_renormalize(gd[0]), feedback::row_renormalize(gd[1])};
        worst_zero = std::max(worst_zero, std::fabs(feedback::feedback_loss_decoder(dec_equal, gd).item()));
        worst_zero = std::max(worst_zero,
                              std::fabs(feedback::feedback_loss_encoder(feedback::row_renormalize(ge), ge).item()));

        std::vector<DiffArray> dec_other{random_stochastic(rng, lq, lq, lq), random_stochastic(rng, lq, lq, lq)};
        min_positive = std::min(min_positive, feedback::feedback_loss_decoder(dec_other, gd).item());
        min_positive =
            std::min(min_positive, feedback::feedback_loss_encoder(random_stochastic(rng, T, T, T), ge).item());
    }
    return {worst_zero <= 1e-10 && min_positive > 0.0,
            "max |KL| on equal rows " + fmt("%.1e", worst_zero) + ", min KL on unequal pairs " + fmt("%.2e", min_positive)};
}

Outcome diversity_metric() {
    std::mt19937_64 rng(51);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double rank1 = 0.0, shift = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto m = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
        const auto n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
        std::vector<double> a(n), x(m * n), c(n);
        for (auto& v : a) v = u(rng);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) x[i * n + j] = a[j];
        rank1 = std::max(rank1, diversity::rank1_residual(x, m, n).d);

        for (auto& v : x) v = u(rng);
        for (auto& v : c) v = 10.0 * u(rng);
        auto shifted = x;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) shifted[i * n + j] += c[j];
        shift = std::max(shift, std::fabs(diversity::rank1_residual(shifted, m, n).d -
                                          diversity::rank1_residual(x, m, n).d));
    }
    const double eye = diversity::rank1_residual(std::vector<double>{1.0, 0.0, 0.0, 1.0}, 2, 2).d;
    return {rank1 == 0.0 && eye == 1.0 && shift <= 1e-9,
            "rank-1 max d " + fmt("%.1e", rank1) + ", d(I2) = " + fmt("%.17g", eye) + ", max shift change " +
                fmt("%.1e", shift)};
}

Outcome evaluation_oracle() {
    const auto mc = fixtures::micro_case();
    const auto expected = fixtures::micro_case_expected();
    const auto r = eval::mean_ap(mc.results, mc.gts, 2);
    double err = 0.0;
    for (std::size_t i = 0; i < expected.size(); ++i) err = std::max(err, std::fabs(r.map[i] - expected[i]));
    const double avg = std::accumulate(expected.begin(), expected.end(), 0.0) / 5.0;
    err = std::max(err, std::fabs(r.average - avg));

    using matching::Segment;
    const auto same = eval::soft_nms({Segment::from_interval(0.2, 0.6, 0, 0.9), Segment::from_interval(0.2, 0.6, 0, 0.8)}, {});
    const auto half = eval::soft_nms({Segment::from_interval(0.0, 0.4, 0, 0.9), Segment::from_interval(0.1, 0.3, 0, 0.6)}, {});
    const double nms_err = std::max(std::fabs(same[1].score - 0.8 * (1.0 - 1.0)), std::fabs(half[1].score - 0.6 * (1.0 - 0.5)));
    return {err <= 1e-12 && nms_err <= 1e-12,
            "micro-case max error " + fmt("%.1e", err) + ", SoftNMS decay error " + fmt("%.1e", nms_err)};
}

struct RunSummary {
    double avg_map = 0.0;
    double enc_final = 0.0;
    double dec_final = 0.0;
};

ExperimentConfig experiment_config(std::uint64_t seed, double lambda_e, double lambda_d, std::size_t epochs) {
    ExperimentConfig c;
    c.data.train_size = 200;
    c.data.test_size = 64;
    c.data.length = 64;
    c.seed = seed;
    c.epochs = epochs;
    c.loss.lambda_e = lambda_e;
    c.loss.lambda_d = lambda_d;
    return c;
}

RunSummary train_and_measure(const ExperimentConfig& cfg) {
    const auto ds = resolve_dataset(cfg);
    Trainer trainer(cfg, ds.train);
    trainer.train_all();
    const auto ev = evaluate(trainer.model(), ds.test, cfg);
    const auto div = diversity::diversity_report(trainer.model(), ds.test, cfg.eval.diversity_samples, cfg.seed, trainer.hash());
    return {ev.metrics.average, div.enc_self.back(), div.dec_self.back()};
}

struct Ablation {
    // Indexed [variant][seed]; variants: baseline, full, encoder-only, decoder-only.
    std::vector<std::vector<RunSummary>> runs;
    json report = json::object();
};

const char* kVariants[] = {"baseline", "full", "encoder_only", "decoder_only"};

Ablation run_ablation(const Options& opt) {
    const double lambdas[4][2] = {{0.0, 0.0}, {5.0, 5.0}, {5.0, 0.0}, {0.0, 5.0}};
    Ablation a;
    a.runs.resize(4);
    for (std::size_t v = 0; v < 4; ++v)
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto s = train_and_measure(experiment_config(seed, lambdas[v][0], lambdas[v][1], opt.epochs));
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            a.runs[v].push_back(s);
            a.report[kVariants[v]].push_back(
                {{"seed", seed}, {"avg_map", s.avg_map}, {"enc_final", s.enc_final}, {"dec_final", s.dec_final}, {"seconds", secs}});
            std::fprintf(stderr, "  %-12s seed %llu: avg mAP %.4f, enc d %.4f, dec d %.4f (%.0f s)\n", kVariants[v],
                         static_cast<unsigned long long>(seed), s.avg_map, s.enc_final, s.dec_final, secs);
        }
    return a;
}

Outcome diversity_direction(const Ablation& a) {
    std::size_t wins = 0;
    std::string detail;
    for (std::size_t s = 0; s < 3; ++s) {
        const auto& b = a.runs[0][s];
        const auto& f = a.runs[1][s];
        wins += f.enc_final > b.enc_final && f.dec_final > b.dec_final;
        detail += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + " enc " + fmt("%.3f", b.enc_final) +
                  "->" + fmt("%.3f", f.enc_final) + " dec " + fmt("%.3f", b.dec_final) + "->" + fmt("%.3f", f.dec_final);
    }
    return {wins == 3, detail};
}

Outcome map_direction(const Ablation& a) {
    double mean[4] = {};
    for (std::size_t v = 0; v < 4; ++v)
        for (const auto& r : a.runs[v]) mean[v] += r.avg_map / 3.0;
    std::string detail;
    for (std::size_t v = 0; v < 4; ++v) detail += (v ? ", " : "") + std::string(kVariants[v]) + " " + fmt("%.4f", mean[v]);
    return {mean[1] >= mean[0] && mean[2] >= mean[0] && mean[3] >= mean[0], "mean avg mAP: " + detail};
}

Outcome determinism() {
    auto cfg = experiment_config(7, 5.0, 5.0, 4);
    cfg.data.train_size = 48;
    cfg.data.test_size = 16;
    auto run = [&] {
        const auto ds = resolve_dataset(cfg);
        Trainer t(cfg, ds.train);
        std::vector<double> losses;
        t.train_all([&](std::size_t, std::size_t, const StepLosses& l) {
            if (losses.size() < 10) losses.push_back(l.total);
        });
        auto metrics = json(evaluate(t.model(), ds.test, cfg).metrics);
        metrics["config_hash"] = t.hash();
        return std::make_pair(losses, metrics.dump());
    };
    const auto a = run(), b = run();
    const bool same_losses = a.first.size() == 10 && a.first == b.first;
    return {same_losses && a.second == b.second,
            std::string(same_losses ? "10/10 step losses identical" : "step losses differ") + ", metrics JSON " +
                (a.second == b.second ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
    Options opt;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--epochs" && i + 1 < argc)
            opt.epochs = std::stoul(argv[++i]);
        else if (arg == "--report" && i + 1 < argc)
            opt.report = argv[++i];
        else {
            std::fprintf(stderr, "usage: acceptance [--epochs N] [--report path.json]\n");
            return 1;
        }
    }

    int failures = 0;
    auto report = [&](int id, const char* name, const std::function<Outcome()>& criterion) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criterion();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.passed;
        std::printf("[%s] %d %s: %s (%.1f s)\n", o.passed ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
        std::fflush(stdout);
    };

    report(1, "gradient correctness", gradient_correctness);
    report(2, "hungarian oracle", hungarian_oracle);
    report(3, "guidance properties", guidance_properties);
    report(4, "feedback loss identities", feedback_identities);
    report(5, "diversity metric", diversity_metric);

    Ablation ablation;
    bool trained = false;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        ablation = run_ablation(opt);
        trained = true;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "ablation failed: %s\n", e.what());
    }
    const double train_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto from_ablation = [&](Outcome (*f)(const Ablation&)) {
        return [&, f] { return trained ? f(ablation) : Outcome{false, "training failed"}; };
    };
    std::fprintf(stderr, "  ablation: 12 runs in %.0f s\n", train_secs);
    report(6, "diversity direction", from_ablation(diversity_direction));
    report(7, "mAP direction", from_ablation(map_direction));
    report(8, "evaluation oracle", evaluation_oracle);
    report(9, "determinism", determinism);

    if (!opt.report.empty()) std::ofstream(opt.report) << ablation.report.dump(2) << "\n";
    std::printf("%d/9 criteria passed\n", 9 - failures);
    return failures == 0 ? 0 : 1;
}
