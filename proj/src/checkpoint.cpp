#include "selfdetr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "selfdetr/errors.hpp"

namespace selfdetr {

namespace {

static_assert(std::endian::native == std::endian::little,
              "payload encoding assumes a little-endian host");

constexpr const char* kCheckpointFormat = "selfdetr-checkpoint";

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

void write_framed(const std::filesystem::path& path, const nlohmann::json& header,
                  std::span<const std::vector<double>* const> payloads) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    const std::string text = header.dump();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.put('\n');
    for (const auto* p : payloads)
        out.write(reinterpret_cast<const char*>(p->data()),
                  static_cast<std::streamsize>(p->size() * sizeof(double)));
    if (!out) throw IoError("write failed: " + path.string());
}

nlohmann::json read_framed(const std::filesystem::path& path, std::vector<double>& payload) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("missing header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("malformed header in " + path.string() + ": " + e.what());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % sizeof(double) != 0)
        throw ValidationError("payload of " + path.string() + " is not a whole number of float64 values");
    payload.resize(bytes.size() / sizeof(double));
    std::memcpy(payload.data(), bytes.data(), bytes.size());
    return header;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    nlohmann::json header;
    header["format"] = kCheckpointFormat;
    header["version"] = 1;
    header["dtype"] = "float64-le";
    header["config_hash"] = checkpoint.config_hash;
    header["meta"] = checkpoint.meta;
    auto& tensors = header["tensors"] = nlohmann::json::array();
    std::vector<const std::vector<double>*> payloads;
    for (const auto& a : checkpoint.arrays) {
        if (ad::shape_size(a.shape) != a.values.size())
            throw DimensionError("checkpoint array " + a.name + " has inconsistent shape");
        tensors.push_back({{"name", a.name}, {"shape", a.shape}});
        payloads.push_back(&a.values);
    }
    write_framed(path, header, payloads);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::vector<double> payload;
    const auto header = read_framed(path, payload);
    if (header.value("format", "") != kCheckpointFormat || header.value("dtype", "") != "float64-le")
        throw ValidationError(path.string() + " is not a float64 selfdetr checkpoint");
    Checkpoint ck;
    ck.config_hash = header.value("config_hash", "");
    ck.meta = header.value("meta", nlohmann::json::object());
    std::size_t offset = 0;
    for (const auto& t : header.at("tensors")) {
        NamedArray a;
        a.name = t.at("name").get<std::string>();
        a.shape = t.at("shape").get<ad::Shape>();
        const std::size_t n = ad::shape_size(a.shape);
        if (offset + n > payload.size())
            throw ValidationError("checkpoint payload shorter than header declares: " + path.string());
        a.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                        payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
        offset += n;
        ck.arrays.push_back(std::move(a));
    }
    if (offset != payload.size())
        throw ValidationError("checkpoint payload longer than header declares: " + path.string());
    return ck;
}

}  // namespace selfdetr
