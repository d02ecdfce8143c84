#include "erasure/backend.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "erasure/concept_manifold.hpp"
#include "erasure/errors.hpp"

namespace erasure {

void write_image(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw ContractError("write_image: 1 or 3 channels supported");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write image " + path.string());
    out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
    std::string bytes(image.pixels.size(), '\0');
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        const double v = std::clamp((image.pixels[i] + 1.0) * 127.5, 0.0, 255.0);
        bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v)));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open image " + path.string());
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
    in >> magic >> width >> height >> maxval;
    if ((magic != "P5" && magic != "P6") || maxval != 255 || !in) throw ConfigError("unsupported image " + path.string());
    in.get();
    Image image;
    image.width = width;
    image.height = height;
    image.channels = magic == "P5" ? 1 : 3;
    std::string bytes(width * height * image.channels, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ConfigError("truncated image " + path.string());
    image.pixels.resize(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        image.pixels[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / 127.5 - 1.0;
    return image;
}

NoiseSchedule NoiseSchedule::from_alpha_bars(std::vector<double> alpha_bars) {
    if (alpha_bars.empty()) throw BackendError("noise schedule must not be empty");
    for (std::size_t t = 0; t < alpha_bars.size(); ++t) {
        if (!(alpha_bars[t] > 0.0 && alpha_bars[t] <= 1.0))
            throw BackendError("noise schedule entry " + std::to_string(t) + " outside (0, 1]");
        if (t > 0 && alpha_bars[t] > alpha_bars[t - 1])
            throw BackendError("noise schedule must be non-increasing");
    }
    NoiseSchedule s;
    s.alpha_bars_ = std::move(alpha_bars);
    return s;
}

NoiseSchedule NoiseSchedule::linear_betas(double beta_start, double beta_end, std::size_t steps) {
    if (steps == 0) throw ConfigError("schedule needs at least one step");
    std::vector<double> bars(steps);
    double running = 1.0;
    for (std::size_t t = 0; t < steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
        running *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
        bars[t] = running;
    }
    return from_alpha_bars(std::move(bars));
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
    if (t >= alpha_bars_.size())
        throw ConfigError("timestep " + std::to_string(t) + " outside schedule of length " +
                          std::to_string(alpha_bars_.size()));
    return alpha_bars_[t];
}

TrainScope parse_train_scope(const std::string& text) {
    if (text == "all") return TrainScope::all;
    if (text == "attention") return TrainScope::attention;
    throw ConfigError("train_scope must be 'all' or 'attention', got '" + text + "'");
}

std::string to_string(TrainScope scope) { return scope == TrainScope::all ? "all" : "attention"; }

Tensor condition_embedding(const DiffusionBackend& backend, const std::string& prompt) {
    return normalize_tokens(backend.encode_text(prompt));
}

Tensor stack_embeddings(const std::vector<Tensor>& embeddings) {
    if (embeddings.empty()) throw ContractError("stack_embeddings: empty input");
    NoGradGuard guard;
    std::vector<Tensor> parts;
    for (const auto& e : embeddings) {
        Shape s{1};
        s.insert(s.end(), e.shape().begin(), e.shape().end());
        parts.push_back(ops::reshape(e, s));
    }
    return ops::concat0(parts);
}

std::vector<Tensor> ddim_sample_latents(const DiffusionBackend& backend, const DenoiserHandle& denoiser,
                                        const std::vector<Tensor>& embeddings,
                                        const std::vector<std::uint64_t>& seeds, const SamplerSettings& settings) {
    if (embeddings.size() != seeds.size()) throw ContractError("ddim_sample_latents: embeddings/seeds mismatch");
    if (embeddings.empty()) return {};
    NoGradGuard guard;
    const std::size_t batch = embeddings.size();
    const Shape latent = backend.latent_shape();
    const std::size_t per = numel(latent);

    std::vector<double> x(batch * per);
    for (std::size_t b = 0; b < batch; ++b) {
        Rng rng(seeds[b]);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = 0; i < per; ++i) x[b * per + i] = normal(rng);
    }

    const Tensor uncond = condition_embedding(backend, "");
    std::vector<Tensor> both = embeddings;
    both.insert(both.end(), batch, uncond);
    const Tensor cond_batch = stack_embeddings(both);

    Shape batched{2 * batch};
    batched.insert(batched.end(), latent.begin(), latent.end());
    const auto& schedule = backend.schedule();
    for (std::size_t step = schedule.size(); step-- > 0;) {
        std::vector<double> doubled(x);
        doubled.insert(doubled.end(), x.begin(), x.end());
        const std::vector<std::size_t> ts(2 * batch, step);
        const Tensor eps = denoiser.predict(Tensor::from(batched, std::move(doubled)), ts, cond_batch);
        const auto e = eps.data();
        const double ab = schedule.alpha_bar(step);
        const double ab_prev = step == 0 ? 1.0 : schedule.alpha_bar(step - 1);
        for (std::size_t i = 0; i < batch * per; ++i) {
            const double guided = e[batch * per + i] + settings.guidance_scale * (e[i] - e[batch * per + i]);
            double x0 = (x[i] - std::sqrt(1.0 - ab) * guided) / std::sqrt(ab);
            double eps_hat = guided;
            if (settings.clip_value > 0.0) {
                x0 = std::clamp(x0, -settings.clip_value, settings.clip_value);
                if (ab < 1.0) eps_hat = (x[i] - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
            }
            x[i] = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_hat;
        }
    }

    std::vector<Tensor> out;
    for (std::size_t b = 0; b < batch; ++b)
        out.push_back(Tensor::from(latent, std::vector<double>(x.begin() + static_cast<std::ptrdiff_t>(b * per),
                                                               x.begin() + static_cast<std::ptrdiff_t>((b + 1) * per))));
    return out;
}

std::vector<Image> DiffusionBackend::sample_batch(const std::vector<std::string>& prompts,
                                                  const std::vector<std::uint64_t>& seeds) const {
    std::vector<Tensor> embeddings;
    for (const auto& p : prompts) embeddings.push_back(condition_embedding(*this, p));
    const auto latents = ddim_sample_latents(*this, *trainable(), embeddings, seeds, sampler_settings());
    std::vector<Image> images;
    for (const auto& z : latents) images.push_back(decode_latent(z));
    return images;
}

Image DiffusionBackend::sample(const std::string& prompt, std::uint64_t seed) const {
    return sample_batch({prompt}, {seed}).front();
}

}  // namespace erasure
