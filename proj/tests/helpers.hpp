#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <string>
#include <unistd.h>

#include "erasure/backends.hpp"
#include "erasure/toy_backend.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("erasure-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Toy backend with randomly initialized (untrained) weights: fast, deterministic.
inline std::unique_ptr<erasure::toy::ToyBackend> random_toy(std::uint64_t seed = 5) {
    erasure::Rng rng(seed);
    const erasure::toy::Architecture arch;
    erasure::toy::DenoiserNet net(arch, rng);
    return std::make_unique<erasure::toy::ToyBackend>(seed, arch, net.parameters().state());
}

/// Pretrained toy backend from the shared build cache (trained on first use).
inline std::unique_ptr<erasure::toy::ToyBackend> pretrained_toy(std::uint64_t seed = 0) {
    erasure::toy::PretrainOptions o;
    o.cache_dir = ERASURE_TOY_CACHE_DIR;
    std::filesystem::create_directories(*o.cache_dir);
    return erasure::toy::pretrain_toy(seed, o);
}

inline std::filesystem::path data_dir() { return ERASURE_DATA_DIR; }

}  // namespace testing
