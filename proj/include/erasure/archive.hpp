#pragma once

#include <filesystem>
#include <string>

#include "erasure/nn.hpp"
#include "json.hpp"

namespace erasure {

/// Single-file container: 8-byte magic "ERASEARC", u32 format version, u64 header
/// length, a JSON header {"metadata": ..., "blobs": [{name, shape, offset, count}]},
/// then the blobs as little-endian IEEE-754 doubles in header order.
struct Archive {
    nlohmann::json metadata = nlohmann::json::object();
    StateDict blobs;
};

std::string encode_archive(const Archive& archive);
Archive decode_archive(const std::string& bytes);

/// Writes through a temporary file and rename, so readers never see partial files.
void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace erasure
