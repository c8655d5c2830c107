#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "selfdetr/autodiff.hpp"

namespace selfdetr {

// Binary layout shared by checkpoints and feature files:
//
//   <JSON header, UTF-8, no newline characters> '\n' <payload>
//
// The payload is every array in header order as raw little-endian IEEE-754
// binary64 values, row-major, with no padding.
struct NamedArray {
    std::string name;
    ad::Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string config_hash;
    nlohmann::json meta;  // free-form: model config, optimizer step, epoch, ...
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
};

void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::span<const std::vector<double>* const> payloads);
// Returns the header; fills `payload` with every value after the newline.
nlohmann::json read_framed(const std::filesystem::path& path, std::vector<double>& payload);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace selfdetr
