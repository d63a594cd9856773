#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdst/errors.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// SPKT binary tensor file:
//   "SPKT" | u8 version (1) | u8 rank | rank x u32 LE extents | f32 LE row-major payload
namespace spkt {

inline constexpr std::array<char, 4> kMagic = {'S', 'P', 'K', 'T'};
inline constexpr std::uint8_t kVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Tensor& t) {
    if (t.rank() > 255) throw DimensionError("SPKT supports rank <= 255");
    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) {
        if (e > UINT32_MAX) throw DimensionError("SPKT extent exceeds u32");
        detail::put_u32(out, static_cast<std::uint32_t>(e));
    }
    out.reserve(out.size() + 4 * t.size());
    for (double v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

inline Tensor decode(const std::vector<std::uint8_t>& bytes, const std::string& source = "<buffer>") {
    if (bytes.size() < 6 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw DataError(source + ": not an SPKT tensor (bad magic)");
    }
    if (bytes[4] != kVersion) throw DataError(source + ": unsupported SPKT version " + std::to_string(bytes[4]));
    const std::size_t rank = bytes[5];
    if (bytes.size() < 6 + 4 * rank) throw DataError(source + ": truncated SPKT header");
    Shape shape(rank);
    for (std::size_t i = 0; i < rank; ++i) shape[i] = detail::get_u32(bytes.data() + 6 + 4 * i);
    const std::size_t header = 6 + 4 * rank;
    const std::size_t n = numel(shape);
    if (bytes.size() != header + 4 * n) {
        throw DataError(source + ": SPKT payload holds " + std::to_string((bytes.size() - header) / 4) +
                        " values, shape " + to_string(shape) + " needs " + std::to_string(n));
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        values[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + header + 4 * i));
    }
    return Tensor(std::move(shape), std::move(values));
}

inline void write(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode(t);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("missing tensor file: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode(bytes, path.string());
}

}  // namespace spkt

using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

// Directory of SPKT files indexed by manifest.jsonl lines {name, file, shape}.
inline void save_named_tensors(const std::filesystem::path& dir, const NamedTensorList& tensors) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw DataError("cannot write manifest in " + dir.string());
    for (const auto& [name, t] : tensors) {
        const std::string file = name + ".spkt";
        spkt::write(dir / file, t);
        nlohmann::json line = {{"name", name}, {"file", file}, {"shape", t.shape()}};
        manifest << line.dump() << "\n";
    }
}

inline NamedTensorList load_named_tensors(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw DataError("missing weights manifest: " + (dir / "manifest.jsonl").string());
    NamedTensorList out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        Tensor t = spkt::read(dir / j.at("file").get<std::string>());
        const auto shape = j.at("shape").get<Shape>();
        if (shape != t.shape()) {
            throw DataError(j.at("name").get<std::string>() + ": manifest shape " + to_string(shape) +
                            " disagrees with file shape " + to_string(t.shape()));
        }
        out.emplace_back(j.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

}  // namespace mdst
