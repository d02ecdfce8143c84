#pragma once

// Backend loading by locator and the HTTP adapter for external diffusion stacks.
//
// Locators:
//   toy:<seed>            the built-in toy world, pretrained on first use and cached
//   http://host:port      a model served over the bridge protocol below
//
// Bridge protocol (JSON over HTTP, tensors as {"shape": [...], "data": [...]}):
//   GET  /v1/info                     locator, shapes, schedule, components, base hash
//   POST /v1/encode_text              {prompt} -> tensor
//   POST /v1/encode_image             {image} -> tensor
//   POST /v1/decode                   {latent} -> image
//   POST /v1/snapshot                 -> {handle, hash}
//   POST /v1/release                  {handle}
//   POST /v1/predict                  {handle, latent, timesteps, embedding, record} -> {prediction, tape}
//   POST /v1/backward                 {tape, grad} -> {latent_grad, embedding_grad}
//   POST /v1/weights                  {handle} -> state dict
//   POST /v1/load_weights, /v1/train_scope, /v1/zero_grad, /v1/optimizer_step,
//        /v1/optimizer_state, /v1/load_optimizer_state, /v1/reset_optimizer
// Handle "trainable" names the trainable denoiser. Parameter gradients stay on the
// server; /v1/backward returns only the gradients of the request inputs.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "erasure/backend.hpp"
#include "erasure/toy_backend.hpp"
#include "json.hpp"

namespace erasure {

struct BackendOptions {
    /// Toy weight cache; ERASURE_CACHE_DIR or ~/.cache/erasure when unset.
    std::optional<std::filesystem::path> cache_dir;
    toy::PretrainOptions pretrain;
    double timeout_seconds = 600.0;
};

std::filesystem::path default_cache_dir();

/// Throws ConfigError for malformed locators and BackendError when loading fails.
std::unique_ptr<DiffusionBackend> load_backend(const std::string& locator, const BackendOptions& options = {});

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);
nlohmann::json image_to_json(const Image& image);
Image image_from_json(const nlohmann::json& j);
nlohmann::json state_to_json(const StateDict& state);
StateDict state_from_json(const nlohmann::json& j);

/// Client side of the bridge protocol. Construction fetches /v1/info and fails
/// with BackendError if any component is missing.
std::unique_ptr<DiffusionBackend> connect_http_backend(const std::string& url, double timeout_seconds = 600.0);

/// Serves a backend over the bridge protocol. Requests are handled one at a time.
class BridgeServer {
public:
    explicit BridgeServer(DiffusionBackend& backend);
    ~BridgeServer();
    BridgeServer(const BridgeServer&) = delete;
    BridgeServer& operator=(const BridgeServer&) = delete;

    /// Binds and serves on a background thread; port 0 picks a free port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    void stop();
    std::string url() const;

private:
    struct State;
    std::unique_ptr<State> state_;
    std::thread thread_;
};

}  // namespace erasure
