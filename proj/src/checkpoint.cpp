#include "medfor/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "medfor/errors.hpp"

namespace medfor {

namespace {

static_assert(std::numeric_limits<float>::is_iec559, "IEEE-754 floats required");

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t float_bits(double v) { return std::bit_cast<std::uint32_t>(static_cast<float>(v)); }

void put_f32_le(std::string& out, double v) {
    const std::uint32_t bits = float_bits(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f32_le(const unsigned char* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

void save_tensor_archive(const std::filesystem::path& path, const TensorArchive& archive) {
    nlohmann::json header = nlohmann::json::object();
    if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : archive.tensors) {
        if (name == "__metadata__") throw ValidationError("reserved tensor name __metadata__");
        if (shape_numel(tensor.shape) != tensor.numel()) {
            throw DimensionError("tensor " + name + " has shape " + shape_to_string(tensor.shape) + " but " +
                                 std::to_string(tensor.numel()) + " values");
        }
        // Values must already be f32-representable so that save -> load is lossless.
        for (double v : tensor.data) {
            if (!std::isnan(v) && static_cast<double>(static_cast<float>(v)) != v) {
                throw ValidationError("tensor " + name + " holds a value not representable in f32");
            }
        }
        const std::uint64_t bytes = 4 * tensor.numel();
        header[name] = {{"dtype", "F32"}, {"shape", tensor.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string header_text = header.dump();
    header_text.append((8 - header_text.size() % 8) % 8, ' ');

    std::string blob;
    blob.reserve(8 + header_text.size() + offset);
    put_u64_le(blob, header_text.size());
    blob += header_text;
    for (const auto& [name, tensor] : archive.tensors) {
        for (double v : tensor.data) put_f32_le(blob, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("error writing checkpoint " + path.string());
}

TensorArchive load_tensor_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::string blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    if (blob.size() < 8) throw FormatError(path.string() + ": truncated checkpoint (no header length)");
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    if (header_len > blob.size() - 8) throw FormatError(path.string() + ": truncated checkpoint header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(8, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
    }
    if (!header.is_object()) throw FormatError(path.string() + ": checkpoint header is not an object");

    const std::uint64_t payload_start = 8 + header_len;
    const std::uint64_t payload_size = blob.size() - payload_start;
    TensorArchive archive;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            archive.metadata = entry;
            continue;
        }
        try {
            if (entry.at("dtype").get<std::string>() != "F32") {
                throw FormatError(path.string() + ": tensor " + name + " has unsupported dtype " +
                                  entry.at("dtype").get<std::string>());
            }
            Tensor t(entry.at("shape").get<Shape>());
            const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > payload_size) {
                throw FormatError(path.string() + ": tensor " + name + " lies outside the payload (truncated file?)");
            }
            if (offsets[1] - offsets[0] != 4 * t.numel()) {
                throw FormatError(path.string() + ": tensor " + name + " byte range does not match its shape");
            }
            const unsigned char* p = bytes + payload_start + offsets[0];
            for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = get_f32_le(p + 4 * i);
            archive.tensors.emplace(name, std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ": bad header entry for " + name + ": " + e.what());
        }
    }
    return archive;
}

std::uint64_t fingerprint(const TensorMap& tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : tensors) {
        mix(name.data(), name.size());
        mix(t.shape.data(), t.shape.size() * sizeof(std::int64_t));
        // Full double bits: any drift, even below f32 resolution, changes the hash.
        mix(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

}  // namespace medfor
