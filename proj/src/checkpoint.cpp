#include "moss/checkpoint.h"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace moss {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'S', 'S', 'C', 'K', 'P', 'T'};
constexpr int kFormatVersion = 1;

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

// Doubles are written as their raw IEEE-754 bits, little endian; this is
// the native layout on every platform we build for, so round trips are
// byte-exact.
void put_f64_le(std::string& out, double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    put_u64_le(out, bits);
}

double get_f64_le(const unsigned char* p) {
    std::uint64_t bits = get_u64_le(p);
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
}

} // namespace

Checkpoint snapshot_checkpoint(const StreamModel& model, const RunConfig& cfg,
                               const std::string& stage,
                               const NormStats& stats) {
    Checkpoint ck;
    ck.config = cfg;
    ck.stage = stage;
    ck.stats = stats;
    for (const auto& p : model.params().entries()) {
        ck.names.push_back(p.name);
        ck.shapes.push_back(p.value.shape());
        ck.values.push_back(p.value.vec());
    }
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["config"] = nlohmann::json::parse(run_config_to_json(ck.config));
    header["stage"] = ck.stage;
    header["norm_stats"] = nlohmann::json::parse(norm_stats_to_json(ck.stats));
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < ck.names.size(); ++i) {
        nlohmann::json a;
        a["name"] = ck.names[i];
        a["shape"] = ck.shapes[i];
        a["offset"] = offset;
        manifest.push_back(a);
        offset += 8 * shape_numel(ck.shapes[i]);
    }
    header["arrays"] = manifest;

    std::string body = header.dump();
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u64_le(out, body.size());
    out += body;
    for (std::size_t i = 0; i < ck.values.size(); ++i) {
        if (ck.values[i].size() != shape_numel(ck.shapes[i]))
            throw std::runtime_error("save_checkpoint: array '" + ck.names[i] +
                                     "' does not match its shape");
        for (double x : ck.values[i]) put_f64_le(out, x);
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string raw((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    if (raw.size() < sizeof(kMagic) + 8 ||
        std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("load_checkpoint: not a checkpoint file: " +
                                 path);
    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
    std::uint64_t header_len = get_u64_le(bytes + sizeof(kMagic));
    std::size_t data_start = sizeof(kMagic) + 8 + header_len;
    if (data_start > raw.size())
        throw std::runtime_error("load_checkpoint: truncated header");

    nlohmann::json header = nlohmann::json::parse(
        raw.substr(sizeof(kMagic) + 8, header_len));
    if (header.at("format_version").get<int>() != kFormatVersion)
        throw std::runtime_error("load_checkpoint: unsupported format version");

    Checkpoint ck;
    ck.config = parse_run_config(header.at("config").dump());
    ck.stage = header.at("stage").get<std::string>();
    ck.stats = norm_stats_from_json(header.at("norm_stats").dump());

    std::uint64_t expect_offset = 0;
    for (const auto& a : header.at("arrays")) {
        std::string name = a.at("name").get<std::string>();
        auto shape = a.at("shape").get<std::vector<int>>();
        std::uint64_t offset = a.at("offset").get<std::uint64_t>();
        if (offset != expect_offset)
            throw std::runtime_error(
                "load_checkpoint: non-contiguous offset for array '" + name +
                "'");
        std::uint64_t n = shape_numel(shape);
        std::size_t begin = data_start + offset;
        if (begin + 8 * n > raw.size())
            throw std::runtime_error(
                "load_checkpoint: data out of bounds for array '" + name +
                "'");
        std::vector<double> vals(n);
        for (std::uint64_t i = 0; i < n; ++i)
            vals[i] = get_f64_le(bytes + begin + 8 * i);
        ck.names.push_back(std::move(name));
        ck.shapes.push_back(std::move(shape));
        ck.values.push_back(std::move(vals));
        expect_offset += 8 * n;
    }
    if (data_start + expect_offset != raw.size())
        throw std::runtime_error(
            "load_checkpoint: file size does not match the manifest");
    return ck;
}

namespace {

int copy_arrays(StreamModel& model, const Checkpoint& ck, bool exact) {
    ParamStore& params = model.params();
    if (exact && ck.names.size() != params.entries().size())
        throw std::runtime_error(
            "apply_checkpoint: parameter count mismatch (checkpoint " +
            std::to_string(ck.names.size()) + ", model " +
            std::to_string(params.entries().size()) + ")");
    int copied = 0;
    for (std::size_t i = 0; i < ck.names.size(); ++i) {
        const std::string& name = ck.names[i];
        if (!params.has(name))
            throw std::runtime_error(
                "apply_checkpoint: model has no parameter '" + name + "'");
        Tensor& t = params.at(name);
        if (t.shape() != ck.shapes[i])
            throw std::runtime_error("apply_checkpoint: shape mismatch for '" +
                                     name + "'");
        t.vec() = ck.values[i];
        ++copied;
    }
    return copied;
}

} // namespace

void apply_checkpoint(StreamModel& model, const Checkpoint& ck) {
    copy_arrays(model, ck, true);
}

int apply_checkpoint_subset(StreamModel& model, const Checkpoint& ck) {
    return copy_arrays(model, ck, false);
}

} // namespace moss
