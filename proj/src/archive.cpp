#include "erasure/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "erasure/errors.hpp"

namespace erasure {

static_assert(std::endian::native == std::endian::little, "archive blobs are stored little-endian");

namespace {
constexpr char kMagic[8] = {'E', 'R', 'A', 'S', 'E', 'A', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw ConfigError("truncated archive");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}
}  // namespace

std::string encode_archive(const Archive& archive) {
    nlohmann::json header;
    header["metadata"] = archive.metadata;
    header["blobs"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, blob] : archive.blobs) {
        header["blobs"].push_back({{"name", name}, {"shape", blob.shape}, {"offset", offset}, {"count", blob.data.size()}});
        offset += blob.data.size();
    }
    const std::string text = header.dump();
    std::string out(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    for (const auto& [_, blob] : archive.blobs)
        out.append(reinterpret_cast<const char*>(blob.data.data()), blob.data.size() * sizeof(double));
    return out;
}

Archive decode_archive(const std::string& bytes) {
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw ConfigError("not an archive (bad magic)");
    std::size_t pos = sizeof kMagic;
    if (get<std::uint32_t>(bytes, pos) != kVersion) throw ConfigError("unsupported archive version");
    const auto header_len = get<std::uint64_t>(bytes, pos);
    if (pos + header_len > bytes.size()) throw ConfigError("truncated archive header");
    const auto header = nlohmann::json::parse(bytes.substr(pos, header_len));
    pos += header_len;
    Archive archive;
    archive.metadata = header.at("metadata");
    for (const auto& entry : header.at("blobs")) {
        Blob blob;
        blob.shape = entry.at("shape").get<Shape>();
        const auto count = entry.at("count").get<std::size_t>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const std::size_t begin = pos + offset * sizeof(double);
        if (count != numel(blob.shape) || begin + count * sizeof(double) > bytes.size())
            throw ConfigError("corrupt archive blob " + entry.at("name").get<std::string>());
        blob.data.resize(count);
        std::memcpy(blob.data.data(), bytes.data() + begin, count * sizeof(double));
        archive.blobs.emplace(entry.at("name").get<std::string>(), std::move(blob));
    }
    return archive;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeFailure("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw RuntimeFailure("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
    write_file_atomic(path, encode_archive(archive));
}

Archive read_archive(const std::filesystem::path& path) { return decode_archive(read_file(path)); }

}  // namespace erasure
