#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/data.hpp"
#include "selfdetr/model.hpp"

namespace selfdetr::diversity {

// sqrt(max column abs-sum * max row abs-sum) of a row-major m x n matrix.
double composite_norm(std::span<const double> values, std::size_t rows, std::size_t cols);

struct Rank1Residual {
    std::vector<double> a;  // column medians
    double d = 0.0;
};

// d = composite_norm(A - 1 a^T) with a_j the median of column j; an even
// count takes the mean of the middle pair.
Rank1Residual rank1_residual(std::span<const double> values, std::size_t rows, std::size_t cols);

struct DiversityReport {
    std::vector<double> enc_self;  // mean d per encoder layer
    std::vector<double> dec_self;  // mean d per decoder layer
    std::size_t sample_count = 0;
    std::string config_hash;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DiversityReport& r);
void from_json(const nlohmann::json& j, DiversityReport& r);

// Mean d(A) per layer over `count` samples drawn without replacement with
// `seed` (all samples when count exceeds the pool). Inference only.
DiversityReport diversity_report(const model::DetrModel& model, std::span<const data::VideoSample> samples,
                                 std::size_t count, std::uint64_t seed, const std::string& config_hash = {});

// Writes {kind}_{layer}.csv for every map of one forward pass plus manifest.json.
void export_attention(const model::DetrModel& model, const data::VideoSample& sample,
                      const std::filesystem::path& dir);

// Reads a map written by export_attention.
std::vector<double> read_csv_matrix(const std::filesystem::path& path, std::size_t& rows, std::size_t& cols);

}  // namespace selfdetr::diversity
