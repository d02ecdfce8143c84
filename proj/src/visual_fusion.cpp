#include "erasure/visual_fusion.hpp"

#include <algorithm>
#include <cmath>

#include "erasure/errors.hpp"

namespace erasure {

void ScaleSet::validate() const {
    if (scales.empty()) throw ConfigError("scale set must not be empty");
    if (scales.front() != 1.0) throw ConfigError("scale set must start with 1.0");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (!(scales[i] > 0.0 && scales[i] <= 1.0)) throw ConfigError("scales must lie in (0, 1]");
        if (i > 0 && !(scales[i] < scales[i - 1])) throw ConfigError("scales must be strictly decreasing");
    }
}

std::pair<std::size_t, std::size_t> scaled_size(std::size_t height, std::size_t width, double scale) {
    auto one = [scale](std::size_t n) {
        const double r = std::round(static_cast<double>(n) * scale);
        return r < 1.0 ? std::size_t{1} : static_cast<std::size_t>(r);
    };
    return {one(height), one(width)};
}

std::size_t token_count(std::size_t height, std::size_t width, const ScaleSet& scales) {
    std::size_t n = 0;
    for (double s : scales.scales) {
        const auto [h, w] = scaled_size(height, width, s);
        n += h * w;
    }
    return n;
}

Tensor bilinear_resize(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
    if (grid.rank() != 4) throw ContractError("bilinear_resize expects [B,C,H,W], got " + shape_string(grid.shape()));
    if (out_h == 0 || out_w == 0) throw ConfigError("bilinear_resize: zero-size target");
    const std::size_t planes = grid.dim(0) * grid.dim(1), in_h = grid.dim(2), in_w = grid.dim(3);
    const auto src = grid.data();
    if (in_h == out_h && in_w == out_w) return Tensor::from(grid.shape(), {src.begin(), src.end()});

    struct Tap {
        std::size_t lo, hi;
        double frac;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> t(out);
        const double ratio = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            const double pos = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
            const auto lo = static_cast<std::size_t>(pos);
            t[o] = {lo, std::min(lo + 1, in - 1), pos - static_cast<double>(lo)};
        }
        return t;
    };
    const auto ty = taps(in_h, out_h), tx = taps(in_w, out_w);
    std::vector<double> out(planes * out_h * out_w);
    for (std::size_t p = 0; p < planes; ++p) {
        const double* in = src.data() + p * in_h * in_w;
        double* dst = out.data() + p * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& b = tx[x];
                const double top = in[a.lo * in_w + b.lo] * (1.0 - b.frac) + in[a.lo * in_w + b.hi] * b.frac;
                const double bottom = in[a.hi * in_w + b.lo] * (1.0 - b.frac) + in[a.hi * in_w + b.hi] * b.frac;
                dst[y * out_w + x] = top * (1.0 - a.frac) + bottom * a.frac;
            }
        }
    }
    return Tensor::from({grid.dim(0), grid.dim(1), out_h, out_w}, std::move(out));
}

TokenSequence make_multiscale_tokens(const LatentGrid& z, const ScaleSet& scales) {
    scales.validate();
    const Tensor& v = z.values;
    if (v.rank() != 4) throw ContractError("latent must be [B,C,H,W], got " + shape_string(v.shape()));
    const std::size_t batch = v.dim(0), channels = v.dim(1), height = v.dim(2), width = v.dim(3);
    if (batch == 0 || channels == 0 || height == 0 || width == 0) throw ConfigError("latent has a zero dimension");

    TokenSequence seq;
    std::vector<Tensor> grids;
    for (double s : scales.scales) {
        const auto [h, w] = scaled_size(height, width, s);
        grids.push_back(bilinear_resize(v, h, w));
        seq.per_scale_lengths.push_back(h * w);
    }
    std::size_t total = 0;
    for (auto n : seq.per_scale_lengths) total += n;

    std::vector<double> tokens(batch * total * channels);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < grids.size(); ++k) {
            const std::size_t pixels = seq.per_scale_lengths[k];
            const double* g = grids[k].data().data() + b * channels * pixels;
            for (std::size_t p = 0; p < pixels; ++p)
                for (std::size_t c = 0; c < channels; ++c)
                    tokens[(b * total + offset + p) * channels + c] = g[c * pixels + p];
            offset += pixels;
        }
    }
    seq.tokens = Tensor::from({batch, total, channels}, std::move(tokens));
    return seq;
}

std::vector<double> sinusoidal_table(std::size_t length, std::size_t channels) {
    std::vector<double> table(length * channels);
    for (std::size_t n = 0; n < length; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            const double i2 = static_cast<double>(c - c % 2);
            const double angle = static_cast<double>(n) / std::pow(10000.0, i2 / static_cast<double>(channels));
            table[n * channels + c] = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return table;
}

TokenSequence add_positional(const TokenSequence& tokens) {
    if (tokens.positional_added) throw ContractError("positional embedding already added");
    const Tensor& t = tokens.tokens;
    if (t.rank() != 3) throw ContractError("tokens must be [B,N,C]");
    const std::size_t batch = t.dim(0), length = t.dim(1), channels = t.dim(2);
    const auto table = sinusoidal_table(length, channels);
    std::vector<double> out(t.data().begin(), t.data().end());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < length * channels; ++i) out[b * length * channels + i] += table[i];
    TokenSequence result = tokens;
    result.tokens = Tensor::from(t.shape(), std::move(out));
    result.positional_added = true;
    return result;
}

FusionTransformer::FusionTransformer(std::size_t channels, const FusionSettings& settings, Rng& rng)
    : channels_(channels), settings_(settings) {
    if (channels == 0) throw ConfigError("fusion transformer needs at least one channel");
    if (settings.depth == 0) throw ConfigError("fusion depth must be positive");
    if (settings.heads == 0 || channels % settings.heads != 0)
        throw ConfigError("fusion heads must divide the latent channel count " + std::to_string(channels));
    if (!(settings.ffn_ratio > 0.0)) throw ConfigError("fusion ffn_ratio must be positive");
    const auto hidden = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(channels * settings.ffn_ratio)));
    const double std_c = 1.0 / std::sqrt(static_cast<double>(channels));
    const double std_h = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (std::size_t i = 0; i < settings.depth; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        Block b;
        b.norm_attn = LayerNorm(params_, p + "norm_attn", channels);
        b.query = Linear(params_, p + "attn.query", channels, channels, rng, std_c);
        b.key = Linear(params_, p + "attn.key", channels, channels, rng, std_c);
        b.value = Linear(params_, p + "attn.value", channels, channels, rng, std_c);
        b.attn_out = Linear(params_, p + "attn.out", channels, channels, rng, std_c);
        b.norm_ffn = LayerNorm(params_, p + "norm_ffn", channels);
        b.ffn_in = Linear(params_, p + "ffn.in", channels, hidden, rng, std_c);
        b.ffn_out = Linear(params_, p + "ffn.out", hidden, channels, rng, std_h);
        blocks_.push_back(std::move(b));
    }
    final_norm_ = LayerNorm(params_, "final_norm", channels);
    projection_ = Linear(params_, "projection", channels, channels, rng, 0.0);
    auto w = projection_.weight().mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
}

Tensor FusionTransformer::attention(const Block& block, const Tensor& x) const {
    const Tensor q = block.query.forward(x), k = block.key.forward(x), v = block.value.forward(x);
    const std::size_t head_dim = channels_ / settings_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < settings_.heads; ++h) {
        const std::size_t lo = h * head_dim, hi = lo + head_dim;
        const Tensor scores = ops::scale(ops::matmul(ops::slice_cols(q, lo, hi), ops::transpose(ops::slice_cols(k, lo, hi))), scale);
        heads.push_back(ops::matmul(ops::softmax_rows(scores), ops::slice_cols(v, lo, hi)));
    }
    return block.attn_out.forward(heads.size() == 1 ? heads.front() : ops::concat_cols(heads));
}

Tensor FusionTransformer::forward(const Tensor& tokens) const {
    if (tokens.rank() != 3 || tokens.dim(2) != channels_)
        throw ContractError("fusion transformer expects [B,N," + std::to_string(channels_) + "] tokens, got " +
                            shape_string(tokens.shape()));
    const std::size_t batch = tokens.dim(0), length = tokens.dim(1);
    std::vector<Tensor> outputs;
    for (std::size_t b = 0; b < batch; ++b) {
        Tensor x = ops::reshape(ops::slice0(tokens, b, b + 1), {length, channels_});
        for (const auto& block : blocks_) {
            x = ops::add(x, attention(block, block.norm_attn.forward(x)));
            x = ops::add(x, block.ffn_out.forward(ops::gelu(block.ffn_in.forward(block.norm_ffn.forward(x)))));
        }
        outputs.push_back(ops::reshape(projection_.forward(final_norm_.forward(x)), {1, length, channels_}));
    }
    return batch == 1 ? outputs.front() : ops::concat0(outputs);
}

FusedLatent fuse(const LatentGrid& z, const TokenSequence& tokens, const FusionTransformer& transformer,
                 double lambda) {
    if (!tokens.positional_added) throw ContractError("fuse requires positional embeddings");
    const Tensor& v = z.values;
    if (v.rank() != 4) throw ContractError("latent must be [B,C,H,W]");
    const std::size_t batch = v.dim(0), channels = v.dim(1), height = v.dim(2), width = v.dim(3);
    const std::size_t pixels = height * width;
    if (transformer.channels() != channels)
        throw ContractError("fusion transformer width " + std::to_string(transformer.channels()) +
                            " does not match latent channels " + std::to_string(channels));
    if (tokens.tokens.rank() != 3 || tokens.tokens.dim(0) != batch || tokens.tokens.dim(1) < pixels)
        throw ContractError("token sequence shorter than H*W or batch mismatch");

    const Tensor out = transformer.forward(tokens.tokens);
    std::vector<Tensor> grids;
    for (std::size_t b = 0; b < batch; ++b) {
        const Tensor seq = ops::reshape(ops::slice0(out, b, b + 1), {out.dim(1), channels});
        const Tensor head = ops::transpose(ops::slice0(seq, 0, pixels));
        grids.push_back(ops::reshape(head, {1, channels, height, width}));
    }
    const Tensor residual = batch == 1 ? grids.front() : ops::concat0(grids);
    return {ops::add(v, ops::scale(residual, lambda)), lambda};
}

LatentGrid noise_latent(const Tensor& clean_latent, std::size_t timestep, const NoiseSchedule& schedule, Rng& rng) {
    const double ab = schedule.alpha_bar(timestep);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto z0 = clean_latent.data();
    std::vector<double> out(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + s * normal(rng);
    return {Tensor::from(clean_latent.shape(), std::move(out)), timestep, {}};
}

}  // namespace erasure
