#include "erasure/backends.hpp"

#include <charconv>
#include <cstdlib>
#include <map>
#include <mutex>

#include "httplib.h"

#include "erasure/errors.hpp"

namespace erasure {

std::filesystem::path default_cache_dir() {
    if (const char* dir = std::getenv("ERASURE_CACHE_DIR"); dir && *dir) return dir;
    if (const char* home = std::getenv("HOME"); home && *home) return std::filesystem::path(home) / ".cache" / "erasure";
    return ".erasure-cache";
}

nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
    auto shape = j.at("shape").get<Shape>();
    auto data = j.at("data").get<std::vector<double>>();
    if (numel(shape) != data.size()) throw BackendError("tensor payload size does not match its shape");
    return Tensor::from(std::move(shape), std::move(data));
}

nlohmann::json image_to_json(const Image& image) {
    return {{"height", image.height}, {"width", image.width}, {"channels", image.channels}, {"pixels", image.pixels}};
}

Image image_from_json(const nlohmann::json& j) {
    Image image{j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>(),
                j.at("channels").get<std::size_t>(), j.at("pixels").get<std::vector<double>>()};
    if (image.pixels.size() != image.height * image.width * image.channels)
        throw BackendError("image payload size does not match its dimensions");
    return image;
}

nlohmann::json state_to_json(const StateDict& state) {
    auto j = nlohmann::json::object();
    for (const auto& [name, blob] : state) j[name] = {{"shape", blob.shape}, {"data", blob.data}};
    return j;
}

StateDict state_from_json(const nlohmann::json& j) {
    StateDict state;
    for (const auto& [name, v] : j.items())
        state[name] = Blob{v.at("shape").get<Shape>(), v.at("data").get<std::vector<double>>()};
    return state;
}

// ---------------------------------------------------------------------------
// Client

namespace {

class Connection {
public:
    Connection(const std::string& url, double timeout) : client_(url) {
        const auto secs = static_cast<time_t>(timeout);
        client_.set_connection_timeout(10);
        client_.set_read_timeout(secs);
        client_.set_write_timeout(secs);
    }

    nlohmann::json get(const std::string& path) {
        std::lock_guard lock(mutex_);
        return check(path, client_.Get(path));
    }

    nlohmann::json post(const std::string& path, const nlohmann::json& body) {
        std::lock_guard lock(mutex_);
        return check(path, client_.Post(path, body.dump(), "application/json"));
    }

private:
    static nlohmann::json check(const std::string& path, const httplib::Result& res) {
        if (!res) throw BackendError("bridge request " + path + " failed: " + httplib::to_string(res.error()));
        nlohmann::json body;
        try {
            body = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception&) {
            throw BackendError("bridge request " + path + " returned malformed JSON (status " +
                               std::to_string(res->status) + ")");
        }
        if (res->status != 200) {
            const std::string message = body.is_object() ? body.value("error", std::string("unknown error")) : "";
            if (body.is_object() && body.value("kind", "") == "contract") throw ContractError(message);
            throw BackendError("bridge request " + path + " failed: " + message);
        }
        return body;
    }

    httplib::Client client_;
    std::mutex mutex_;
};

Tensor remote_predict(const std::shared_ptr<Connection>& conn, const std::string& handle, const Tensor& latent,
                      std::span<const std::size_t> timesteps, const Tensor& embedding, bool trainable) {
    const bool record = grad_enabled() && (trainable || latent.requires_grad() || embedding.requires_grad());
    nlohmann::json body = {{"handle", handle},
                           {"latent", tensor_to_json(latent)},
                           {"timesteps", std::vector<std::size_t>(timesteps.begin(), timesteps.end())},
                           {"embedding", tensor_to_json(embedding)},
                           {"record", record}};
    const auto reply = conn->post("/v1/predict", body);
    Tensor pred = tensor_from_json(reply.at("prediction"));
    if (!record) return pred;

    const auto tape = reply.at("tape").get<std::uint64_t>();
    auto values = std::vector<double>(pred.data().begin(), pred.data().end());
    // The anchor keeps the result on the graph when neither input requires a gradient:
    // the remote parameters still need theirs.
    const Tensor anchor = Tensor::parameter({1}, {0.0});
    return make_result(pred.shape(), std::move(values), {latent, embedding, anchor}, [conn, tape](detail::Node& node) {
        const auto& grad = node.grad_buffer();
        const auto reply = conn->post("/v1/backward", {{"tape", tape}, {"grad", grad}});
        const auto accumulate = [](const std::shared_ptr<detail::Node>& parent, const nlohmann::json& g) {
            if (!parent->requires_grad || g.is_null()) return;
            const auto values = g.get<std::vector<double>>();
            auto& buf = parent->grad_buffer();
            if (values.size() != buf.size()) throw BackendError("bridge gradient has the wrong size");
            for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += values[i];
        };
        accumulate(node.parents[0], reply.at("latent_grad"));
        accumulate(node.parents[1], reply.at("embedding_grad"));
    });
}

class RemoteFrozen final : public DenoiserHandle {
public:
    RemoteFrozen(std::shared_ptr<Connection> conn, std::string handle)
        : conn_(std::move(conn)), handle_(std::move(handle)) {}
    ~RemoteFrozen() override {
        try {
            conn_->post("/v1/release", {{"handle", handle_}});
        } catch (const Error&) {
        }
    }
    Tensor predict(const Tensor& latent, std::span<const std::size_t> timesteps,
                   const Tensor& embedding) const override {
        return remote_predict(conn_, handle_, latent, timesteps, embedding, false);
    }
    StateDict weights() const override { return state_from_json(conn_->post("/v1/weights", {{"handle", handle_}})); }

private:
    std::shared_ptr<Connection> conn_;
    std::string handle_;
};

class RemoteTrainable final : public TrainableDenoiser {
public:
    explicit RemoteTrainable(std::shared_ptr<Connection> conn) : conn_(std::move(conn)) {}
    Tensor predict(const Tensor& latent, std::span<const std::size_t> timesteps,
                   const Tensor& embedding) const override {
        return remote_predict(conn_, "trainable", latent, timesteps, embedding, true);
    }
    StateDict weights() const override {
        return state_from_json(conn_->post("/v1/weights", {{"handle", "trainable"}}));
    }
    void load_weights(const StateDict& weights) override {
        conn_->post("/v1/load_weights", {{"weights", state_to_json(weights)}});
    }
    void set_train_scope(TrainScope scope) override { conn_->post("/v1/train_scope", {{"scope", to_string(scope)}}); }
    void zero_grad() override { conn_->post("/v1/zero_grad", nlohmann::json::object()); }
    void optimizer_step(const AdamSettings& s) override {
        conn_->post("/v1/optimizer_step", {{"learning_rate", s.learning_rate},
                                           {"beta1", s.beta1},
                                           {"beta2", s.beta2},
                                           {"epsilon", s.epsilon}});
    }
    StateDict optimizer_state() const override {
        return state_from_json(conn_->post("/v1/optimizer_state", nlohmann::json::object()));
    }
    void load_optimizer_state(const StateDict& state) override {
        conn_->post("/v1/load_optimizer_state", {{"state", state_to_json(state)}});
    }
    void reset_optimizer() override { conn_->post("/v1/reset_optimizer", nlohmann::json::object()); }

private:
    std::shared_ptr<Connection> conn_;
};

class HttpBackend final : public DiffusionBackend {
public:
    HttpBackend(const std::string& url, double timeout) : url_(url), conn_(std::make_shared<Connection>(url, timeout)) {
        nlohmann::json info;
        try {
            info = conn_->get("/v1/info");
        } catch (const BackendError& e) {
            throw BackendError("cannot load backend '" + url + "': " + e.what());
        }
        try {
            const auto& components = info.at("components");
            for (const char* part : {"text_encoder", "autoencoder", "scheduler", "denoiser"})
                if (!components.value(part, false))
                    throw BackendError("backend '" + url + "' is missing its " + std::string(part));
            remote_locator_ = info.at("locator").get<std::string>();
            latent_shape_ = info.at("latent_shape").get<Shape>();
            embedding_shape_ = info.at("embedding_shape").get<Shape>();
            image_size_ = info.at("image_size").get<std::size_t>();
            schedule_ = NoiseSchedule::from_alpha_bars(info.at("schedule").get<std::vector<double>>());
            base_hash_ = info.at("base_weights_hash").get<std::string>();
            sampler_.guidance_scale = info.at("sampler").at("guidance_scale").get<double>();
            sampler_.clip_value = info.at("sampler").at("clip_value").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw BackendError("backend '" + url + "' sent an incomplete description: " + e.what());
        }
        if (latent_shape_.size() != 3 || embedding_shape_.size() != 2)
            throw BackendError("backend '" + url + "' reports malformed latent or embedding shapes");
        trainable_ = std::make_shared<RemoteTrainable>(conn_);
    }

    std::string locator() const override { return url_; }
    Tensor encode_text(const std::string& prompt) const override {
        return tensor_from_json(conn_->post("/v1/encode_text", {{"prompt", prompt}}));
    }
    Tensor encode_image(const Image& image) const override {
        return tensor_from_json(conn_->post("/v1/encode_image", {{"image", image_to_json(image)}}));
    }
    Image decode_latent(const Tensor& latent) const override {
        return image_from_json(conn_->post("/v1/decode", {{"latent", tensor_to_json(latent)}}));
    }
    const NoiseSchedule& schedule() const override { return schedule_; }
    Shape latent_shape() const override { return latent_shape_; }
    Shape embedding_shape() const override { return embedding_shape_; }
    std::size_t image_size() const override { return image_size_; }
    std::shared_ptr<const DenoiserHandle> snapshot() const override {
        const auto reply = conn_->post("/v1/snapshot", nlohmann::json::object());
        return std::make_shared<RemoteFrozen>(conn_, reply.at("handle").get<std::string>());
    }
    std::shared_ptr<TrainableDenoiser> trainable() const override { return trainable_; }
    std::string base_weights_hash() const override { return base_hash_; }
    SamplerSettings sampler_settings() const override { return sampler_; }

    /// Locator the server reports for the model it wraps.
    const std::string& remote_locator() const { return remote_locator_; }

private:
    std::string url_;
    std::string remote_locator_;
    std::shared_ptr<Connection> conn_;
    Shape latent_shape_;
    Shape embedding_shape_;
    std::size_t image_size_ = 0;
    NoiseSchedule schedule_;
    std::string base_hash_;
    SamplerSettings sampler_;
    std::shared_ptr<RemoteTrainable> trainable_;
};

}  // namespace

std::unique_ptr<DiffusionBackend> connect_http_backend(const std::string& url, double timeout_seconds) {
    return std::make_unique<HttpBackend>(url, timeout_seconds);
}

std::unique_ptr<DiffusionBackend> load_backend(const std::string& locator, const BackendOptions& options) {
    if (locator.starts_with("toy:")) {
        const std::string digits = locator.substr(4);
        std::uint64_t seed = 0;
        const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), seed);
        if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size())
            throw ConfigError("toy locator must be toy:<non-negative integer seed>, got '" + locator + "'");
        auto pretrain = options.pretrain;
        if (!pretrain.cache_dir) pretrain.cache_dir = options.cache_dir ? *options.cache_dir : default_cache_dir();
        std::filesystem::create_directories(*pretrain.cache_dir);
        return toy::pretrain_toy(seed, pretrain);
    }
    if (locator.starts_with("http://")) return connect_http_backend(locator, options.timeout_seconds);
    throw ConfigError("unrecognized backend locator '" + locator + "' (expected toy:<seed> or http://host:port)");
}

// ---------------------------------------------------------------------------
// Server

struct BridgeServer::State {
    explicit State(DiffusionBackend& b) : backend(b) {}

    struct Tape {
        Tensor latent;
        Tensor embedding;
        Tensor output;
    };

    DiffusionBackend& backend;
    httplib::Server server;
    std::mutex mutex;
    std::map<std::string, std::shared_ptr<const DenoiserHandle>> snapshots;
    std::map<std::uint64_t, Tape> tapes;
    std::uint64_t next_handle = 0;
    std::uint64_t next_tape = 0;
    std::string host;
    int port = 0;

    const DenoiserHandle& handle(const std::string& name) {
        if (name == "trainable") return *backend.trainable();
        auto it = snapshots.find(name);
        if (it == snapshots.end()) throw ContractError("unknown denoiser handle '" + name + "'");
        return *it->second;
    }

    nlohmann::json info() {
        const auto& s = backend.sampler_settings();
        return {{"locator", backend.locator()},
                {"latent_shape", backend.latent_shape()},
                {"embedding_shape", backend.embedding_shape()},
                {"image_size", backend.image_size()},
                {"schedule", backend.schedule().table()},
                {"base_weights_hash", backend.base_weights_hash()},
                {"sampler", {{"guidance_scale", s.guidance_scale}, {"clip_value", s.clip_value}}},
                {"components", {{"text_encoder", true}, {"autoencoder", true}, {"scheduler", true}, {"denoiser", true}}}};
    }

    nlohmann::json predict(const nlohmann::json& req) {
        const bool record = req.at("record").get<bool>();
        const auto ts = req.at("timesteps").get<std::vector<std::size_t>>();
        const auto& h = handle(req.at("handle").get<std::string>());
        if (!record) {
            NoGradGuard guard;
            const Tensor out =
                h.predict(tensor_from_json(req.at("latent")), ts, tensor_from_json(req.at("embedding")));
            return {{"prediction", tensor_to_json(out)}, {"tape", nullptr}};
        }
        const Tensor latent_in = tensor_from_json(req.at("latent"));
        const Tensor emb_in = tensor_from_json(req.at("embedding"));
        Tape tape{Tensor::parameter(latent_in.shape(), {latent_in.data().begin(), latent_in.data().end()}),
                  Tensor::parameter(emb_in.shape(), {emb_in.data().begin(), emb_in.data().end()}), {}};
        tape.output = h.predict(tape.latent, ts, tape.embedding);
        const auto id = next_tape++;
        const auto out = tensor_to_json(tape.output);
        tapes.emplace(id, std::move(tape));
        return {{"prediction", out}, {"tape", id}};
    }

    nlohmann::json backward(const nlohmann::json& req) {
        auto it = tapes.find(req.at("tape").get<std::uint64_t>());
        if (it == tapes.end()) throw ContractError("unknown or consumed gradient tape");
        Tape tape = std::move(it->second);
        tapes.erase(it);
        auto grad = req.at("grad").get<std::vector<double>>();
        if (grad.size() != tape.output.numel()) throw ContractError("gradient size does not match the prediction");
        const Tensor seed = Tensor::from(tape.output.shape(), std::move(grad));
        if (tape.output.requires_grad()) ops::sum(ops::mul(tape.output, seed)).backward();
        const auto grad_of = [](const Tensor& t) -> nlohmann::json {
            if (t.grad().empty()) return std::vector<double>(t.numel(), 0.0);
            return std::vector<double>(t.grad().begin(), t.grad().end());
        };
        return {{"latent_grad", grad_of(tape.latent)}, {"embedding_grad", grad_of(tape.embedding)}};
    }

    nlohmann::json dispatch(const std::string& path, const nlohmann::json& req) {
        auto& trainable = *backend.trainable();
        if (path == "/v1/encode_text") return tensor_to_json(backend.encode_text(req.at("prompt").get<std::string>()));
        if (path == "/v1/encode_image") return tensor_to_json(backend.encode_image(image_from_json(req.at("image"))));
        if (path == "/v1/decode") return image_to_json(backend.decode_latent(tensor_from_json(req.at("latent"))));
        if (path == "/v1/snapshot") {
            auto snap = backend.snapshot();
            const std::string name = "snapshot-" + std::to_string(next_handle++);
            const std::string hash = snap->content_hash();
            snapshots.emplace(name, std::move(snap));
            return {{"handle", name}, {"hash", hash}};
        }
        if (path == "/v1/release") {
            snapshots.erase(req.at("handle").get<std::string>());
            return nlohmann::json::object();
        }
        if (path == "/v1/predict") return predict(req);
        if (path == "/v1/backward") return backward(req);
        if (path == "/v1/weights") return state_to_json(handle(req.at("handle").get<std::string>()).weights());
        if (path == "/v1/load_weights") {
            trainable.load_weights(state_from_json(req.at("weights")));
            return nlohmann::json::object();
        }
        if (path == "/v1/train_scope") {
            trainable.set_train_scope(parse_train_scope(req.at("scope").get<std::string>()));
            return nlohmann::json::object();
        }
        if (path == "/v1/zero_grad") {
            tapes.clear();
            trainable.zero_grad();
            return nlohmann::json::object();
        }
        if (path == "/v1/optimizer_step") {
            tapes.clear();
            trainable.optimizer_step({req.at("learning_rate").get<double>(), req.at("beta1").get<double>(),
                                      req.at("beta2").get<double>(), req.at("epsilon").get<double>()});
            return nlohmann::json::object();
        }
        if (path == "/v1/optimizer_state") return state_to_json(trainable.optimizer_state());
        if (path == "/v1/load_optimizer_state") {
            trainable.load_optimizer_state(state_from_json(req.at("state")));
            return nlohmann::json::object();
        }
        if (path == "/v1/reset_optimizer") {
            trainable.reset_optimizer();
            return nlohmann::json::object();
        }
        throw ContractError("unknown bridge endpoint " + path);
    }
};

BridgeServer::BridgeServer(DiffusionBackend& backend) : state_(std::make_unique<State>(backend)) {
    auto* s = state_.get();
    const auto reply = [](httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    };
    s->server.Get("/v1/info", [s, reply](const httplib::Request&, httplib::Response& res) {
        std::lock_guard lock(s->mutex);
        reply(res, 200, s->info());
    });
    s->server.Post(R"(/v1/\w+)", [s, reply](const httplib::Request& req, httplib::Response& res) {
        std::lock_guard lock(s->mutex);
        try {
            reply(res, 200, s->dispatch(req.path, nlohmann::json::parse(req.body)));
        } catch (const ContractError& e) {
            reply(res, 400, {{"error", e.what()}, {"kind", "contract"}});
        } catch (const std::exception& e) {
            reply(res, 500, {{"error", e.what()}, {"kind", "backend"}});
        }
    });
}

BridgeServer::~BridgeServer() { stop(); }

int BridgeServer::start(const std::string& host, int port) {
    auto& server = state_->server;
    state_->host = host;
    if (port == 0) {
        port = server.bind_to_any_port(host);
    } else if (!server.bind_to_port(host, port)) {
        port = -1;
    }
    if (port < 0) throw BackendError("bridge server cannot bind " + host);
    state_->port = port;
    thread_ = std::thread([&server] { server.listen_after_bind(); });
    server.wait_until_ready();
    return port;
}

void BridgeServer::stop() {
    if (!thread_.joinable()) return;
    state_->server.stop();
    thread_.join();
}

std::string BridgeServer::url() const { return "http://" + state_->host + ":" + std::to_string(state_->port); }

}  // namespace erasure
