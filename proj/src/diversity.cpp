#include "selfdetr/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "selfdetr/errors.hpp"

namespace selfdetr::diversity {

double composite_norm(std::span<const double> values, std::size_t rows, std::size_t cols) {
    if (values.size() != rows * cols) throw DimensionError("composite_norm: size does not match rows x cols");
    std::vector<double> col(cols, 0.0), row(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const double a = std::fabs(values[i * cols + j]);
            col[j] += a;
            row[i] += a;
        }
    if (rows == 0 || cols == 0) return 0.0;
    return std::sqrt(*std::max_element(col.begin(), col.end()) * *std::max_element(row.begin(), row.end()));
}

Rank1Residual rank1_residual(std::span<const double> values, std::size_t rows, std::size_t cols) {
    if (values.size() != rows * cols) throw DimensionError("rank1_residual: size does not match rows x cols");
    Rank1Residual out;
    out.a.resize(cols);
    std::vector<double> column(rows);
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t i = 0; i < rows; ++i) column[i] = values[i * cols + j];
        std::sort(column.begin(), column.end());
        const std::size_t h = rows / 2;
        out.a[j] = rows % 2 ? column[h] : 0.5 * (column[h - 1] + column[h]);
    }
    std::vector<double> residual(values.begin(), values.end());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) residual[i * cols + j] -= out.a[j];
    out.d = composite_norm(residual, rows, cols);
    return out;
}

void to_json(nlohmann::json& j, const DiversityReport& r) {
    j = {{"enc_self", r.enc_self},
         {"dec_self", r.dec_self},
         {"sample_count", r.sample_count},
         {"config_hash", r.config_hash},
         {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, DiversityReport& r) {
    r.enc_self = j.at("enc_self").get<std::vector<double>>();
    r.dec_self = j.at("dec_self").get<std::vector<double>>();
    r.sample_count = j.at("sample_count").get<std::size_t>();
    r.config_hash = j.value("config_hash", std::string());
    r.seed = j.value("seed", std::uint64_t{0});
}

namespace {

double map_diversity(const model::DiffArray& m) { return rank1_residual(m.values(), m.rows(), m.cols()).d; }

model::DiffArray sample_features(const data::VideoSample& s) {
    return model::DiffArray::constant({s.length, s.feature_dim}, s.features);
}

}  // namespace

DiversityReport diversity_report(const model::DetrModel& model, std::span<const data::VideoSample> samples,
                                 std::size_t count, std::uint64_t seed, const std::string& config_hash) {
    if (count == 0) throw ConfigError("diversity report needs at least one sample");
    if (samples.empty()) throw ConfigError("diversity report needs a non-empty dataset");
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min(count, order.size()));

    const std::size_t ne = model.config().num_encoder_layers;
    const std::size_t nd = model.config().decoder_self_attention ? model.config().num_decoder_layers : 0;
    std::vector<std::vector<double>> enc(order.size()), dec(order.size());

    // Trainable parameters are shared read-only; the recording flag is thread-local.
#pragma omp parallel for schedule(dynamic)
    for (std::size_t s = 0; s < order.size(); ++s) {
        ad::NoGradGuard guard;
        const auto fwd = model.forward(sample_features(samples[order[s]]));
        for (const auto& m : fwd.attention.enc_self) enc[s].push_back(map_diversity(m));
        for (const auto& m : fwd.attention.dec_self) dec[s].push_back(map_diversity(m));
    }

    DiversityReport report;
    report.enc_self.assign(ne, 0.0);
    report.dec_self.assign(nd, 0.0);
    for (std::size_t s = 0; s < order.size(); ++s) {
        for (std::size_t l = 0; l < ne; ++l) report.enc_self[l] += enc[s][l];
        for (std::size_t l = 0; l < nd; ++l) report.dec_self[l] += dec[s][l];
    }
    const double n = static_cast<double>(order.size());
    for (auto& v : report.enc_self) v /= n;
    for (auto& v : report.dec_self) v /= n;
    report.sample_count = order.size();
    report.config_hash = config_hash;
    report.seed = seed;
    return report;
}

void export_attention(const model::DetrModel& model, const data::VideoSample& sample,
                      const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    ad::NoGradGuard guard;
    const auto fwd = model.forward(sample_features(sample));
    auto files = nlohmann::json::array();
    auto dump = [&](const std::string& kind, const std::vector<model::DiffArray>& maps) {
        for (std::size_t l = 0; l < maps.size(); ++l) {
            const auto& m = maps[l];
            const std::string name = kind + "_" + std::to_string(l) + ".csv";
            std::ofstream out(dir / name);
            if (!out) throw IoError("cannot write " + (dir / name).string());
            char buf[32];
            for (std::size_t i = 0; i < m.rows(); ++i) {
                for (std::size_t j = 0; j < m.cols(); ++j) {
                    std::snprintf(buf, sizeof buf, "%.17g", m.at(i, j));
                    out << (j ? "," : "") << buf;
                }
                out << '\n';
            }
            if (!out) throw IoError("write failed: " + (dir / name).string());
            files.push_back({{"kind", kind}, {"layer", l}, {"file", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        }
    };
    dump("enc_self", fwd.attention.enc_self);
    dump("dec_self", fwd.attention.dec_self);
    dump("cross", fwd.attention.cross);
    std::ofstream man(dir / "manifest.json");
    man << nlohmann::json{{"sample", sample.id}, {"maps", files}}.dump(2) << '\n';
    if (!man) throw IoError("cannot write " + (dir / "manifest.json").string());
}

std::vector<double> read_csv_matrix(const std::filesystem::path& path, std::size_t& rows, std::size_t& cols) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<double> values;
    rows = cols = 0;
    std::string line, cell;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::size_t n = 0;
        while (std::getline(ss, cell, ',')) {
            values.push_back(std::stod(cell));
            ++n;
        }
        if (rows == 0) cols = n;
        if (n != cols) throw ValidationError(path.string() + ": ragged CSV row");
        ++rows;
    }
    return values;
}

}  // namespace selfdetr::diversity
