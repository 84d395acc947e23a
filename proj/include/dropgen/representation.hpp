#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dropgen/envs.hpp"
#include "dropgen/model.hpp"
#include "dropgen/rng.hpp"
#include "dropgen/tensor.hpp"

namespace dropgen {

// Per-channel normalization over the position axis to zero mean and unit
// population standard deviation. Channels whose variance falls under the
// 1e-8 guard map to all-zeros. Accepts [C, L] or [B, C, L].
inline Tensor instance_normalize(const Tensor& features) {
    check(features.rank() == 2 || features.rank() == 3,
          "instance_normalize expects [C, L] or [B, C, L]");
    const bool batched = features.rank() == 3;
    const int batch = batched ? features.dim(0) : 1;
    const int channels = batched ? features.dim(1) : features.dim(0);
    const int length = batched ? features.dim(2) : features.dim(1);
    check(length >= 2, "instance_normalize needs length >= 2");
    Tensor out = features;
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            double* row = out.data() + (static_cast<long>(n) * channels + c) * length;
            double mean = 0.0;
            for (int l = 0; l < length; ++l) mean += row[l];
            mean /= length;
            double var = 0.0;
            for (int l = 0; l < length; ++l) var += (row[l] - mean) * (row[l] - mean);
            var /= length;
            if (var < 1e-8) {
                for (int l = 0; l < length; ++l) row[l] = 0.0;
            } else {
                const double inv = 1.0 / std::sqrt(var);
                for (int l = 0; l < length; ++l) row[l] = (row[l] - mean) * inv;
            }
        }
    return out;
}

// z = (x_u, x_s): unstable channels first, then stable channels. The model's
// partition index depends on this ordering.
inline Tensor concat_channels(const Tensor& x_u, const Tensor& x_s) {
    check(x_u.rank() == x_s.rank() && (x_u.rank() == 2 || x_u.rank() == 3),
          "concat_channels expects matching [C, L] or [B, C, L] ranks");
    const bool batched = x_u.rank() == 3;
    const int batch = batched ? x_u.dim(0) : 1;
    check(!batched || x_s.dim(0) == batch, "concat_channels batch mismatch");
    const int cu = batched ? x_u.dim(1) : x_u.dim(0);
    const int cs = batched ? x_s.dim(1) : x_s.dim(0);
    const int length = batched ? x_u.dim(2) : x_u.dim(1);
    const int length_s = batched ? x_s.dim(2) : x_s.dim(1);
    check(length == length_s, "concat_channels length mismatch");
    Tensor z(batched ? std::vector<int>{batch, cu + cs, length}
                     : std::vector<int>{cu + cs, length});
    for (int n = 0; n < batch; ++n) {
        double* dst = z.data() + static_cast<long>(n) * (cu + cs) * length;
        const double* su = x_u.data() + static_cast<long>(n) * cu * length;
        const double* ss = x_s.data() + static_cast<long>(n) * cs * length;
        for (long i = 0; i < static_cast<long>(cu) * length; ++i) dst[i] = su[i];
        for (long i = 0; i < static_cast<long>(cs) * length; ++i)
            dst[static_cast<long>(cu) * length + i] = ss[i];
    }
    return z;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& z, int n_u) {
    check(z.rank() == 2, "split_channels expects [C, L]");
    check(n_u > 0 && n_u < z.dim(0), "split index out of range");
    Tensor a({n_u, z.dim(1)});
    Tensor b({z.dim(0) - n_u, z.dim(1)});
    for (int c = 0; c < z.dim(0); ++c)
        for (int l = 0; l < z.dim(1); ++l) {
            if (c < n_u)
                a(c, l) = z(c, l);
            else
                b(c - n_u, l) = z(c, l);
        }
    return {a, b};
}

// -- frozen stable-representation extractor ------------------------------------

enum class ExtractorKind { identity, frozen_random, learned_frozen };

inline std::string extractor_kind_name(ExtractorKind k) {
    switch (k) {
        case ExtractorKind::identity: return "identity";
        case ExtractorKind::frozen_random: return "frozen-random";
        case ExtractorKind::learned_frozen: return "learned-frozen";
    }
    return "identity";
}

inline ExtractorKind extractor_kind_from_name(const std::string& s) {
    if (s == "identity") return ExtractorKind::identity;
    if (s == "frozen-random") return ExtractorKind::frozen_random;
    if (s == "learned-frozen") return ExtractorKind::learned_frozen;
    contract_fail("unknown extractor kind: " + s);
}

// Surrogate for the frozen representation extractor f_phi. Parameters are
// fixed at construction and never updated by downstream training.
class Extractor {
public:
    ExtractorKind kind() const { return kind_; }
    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }

    // [B, n_s, L] -> [B, d, L]; deterministic, parameters immutable.
    Tensor extract(const Tensor& x_s) const {
        check(x_s.rank() == 3, "extract expects [B, n_s, L]");
        check(x_s.dim(1) == in_ch_, "extract input channel mismatch");
        if (kind_ == ExtractorKind::identity) return x_s;
        return net_.forward(x_s);
    }

    uint64_t checksum() const {
        return kind_ == ExtractorKind::identity ? 0xd09 : net_.checksum();
    }

    const Model& net() const { return net_; }

    static Extractor identity(int n_s) {
        Extractor e;
        e.kind_ = ExtractorKind::identity;
        e.in_ch_ = n_s;
        e.out_ch_ = n_s;
        return e;
    }

    static Extractor frozen_random(int n_s, int d, uint64_t seed) {
        Extractor e;
        e.kind_ = ExtractorKind::frozen_random;
        e.in_ch_ = n_s;
        e.out_ch_ = d;
        ModelSpec spec;
        spec.partition = 0;
        spec.layers.push_back({n_s, d, 3, Act::tanh});
        spec.layers.push_back({d, d, 1, Act::identity});
        e.net_ = Model::random_init(spec, mix64(seed, 0xf00d));
        return e;
    }

    // Pretrains a small denoising network (reconstruct x_s from x_s + noise,
    // pooled over the training environments), then freezes it.
    static Extractor learned_frozen(const EnvironmentSpec& env_spec, uint64_t seed,
                                    int n_samples = 128, int steps = 200,
                                    double lr = 5e-2) {
        Extractor e;
        e.kind_ = ExtractorKind::learned_frozen;
        e.in_ch_ = env_spec.n_s();
        e.out_ch_ = env_spec.n_s();
        ModelSpec spec;
        spec.partition = 0;
        const int hidden = 8;
        spec.layers.push_back({env_spec.n_s(), hidden, 3, Act::tanh});
        spec.layers.push_back({hidden, env_spec.n_s(), 1, Act::identity});
        Model net = Model::random_init(spec, mix64(seed, 0x5eed));

        Dataset pool = sample_pooled(env_spec, env_spec.train_envs, n_samples, seed);
        Batch batch = full_batch(pool);
        Rng noise_rng = stream_rng(seed, StreamTag::noise);
        Tensor noisy = batch.x_s;
        for (long i = 0; i < noisy.size(); ++i) noisy[i] += 0.3 * noise_rng.normal();

        for (int step = 0; step < steps; ++step) {
            Graph g;
            std::vector<Var> pv;
            Var out = net.forward_graph(g, noisy, pv);
            Var loss = g.half_sse(out, batch.x_s);
            g.backward(loss);
            const double scale = lr / static_cast<double>(noisy.size());
            for (size_t p = 0; p < net.params().size(); ++p) {
                const Tensor& grad = g.grad(pv[p]);
                Tensor& theta = net.params()[p];
                for (long i = 0; i < theta.size(); ++i) theta[i] -= scale * grad[i];
            }
        }
        e.net_ = std::move(net);
        return e;
    }

private:
    ExtractorKind kind_ = ExtractorKind::identity;
    int in_ch_ = 0;
    int out_ch_ = 0;
    Model net_;
};

// -- channel dropout -----------------------------------------------------------

enum class MaskMode { two_block, per_channel, structured_block };

inline std::string mask_mode_name(MaskMode m) {
    switch (m) {
        case MaskMode::two_block: return "two-block";
        case MaskMode::per_channel: return "per-channel";
        case MaskMode::structured_block: return "structured-block";
    }
    return "per-channel";
}

inline MaskMode mask_mode_from_name(const std::string& s) {
    if (s == "two-block") return MaskMode::two_block;
    if (s == "per-channel") return MaskMode::per_channel;
    if (s == "structured-block") return MaskMode::structured_block;
    contract_fail("unknown mask mode: " + s);
}

// Fixed two-block mask patterns mu in {(1,1), (1,0), (0,1)}.
enum class BlockMask { both, unstable_only, stable_only };

struct Mask {
    std::vector<uint8_t> keep;  // one bit per channel of z

    bool all_zero() const {
        for (uint8_t k : keep)
            if (k) return false;
        return true;
    }
};

// The mask law M. `p` is the dropout probability; `rescale` selects standard
// inverted-dropout scaling of kept channels by 1/(1-p). In two-block mode the
// all-zero mask is excluded and the three admissible masks carry
// pi proportional to {(1-p)^2, (1-p)p, p(1-p)}.
struct MaskDistribution {
    MaskMode mode = MaskMode::per_channel;
    double p = 0.5;
    bool rescale = true;
    int channels = 0;     // total channels of z
    int n_u = 0;          // unstable block size (leading channels)
    bool guarantee_nonzero = false;  // per-channel / structured: resample all-zero masks

    void validate() const {
        check(p >= 0.0 && p < 1.0, "dropout p must be in [0, 1)");
        check(channels > 1, "mask distribution needs at least two channels");
        check(n_u > 0 && n_u < channels, "mask block split out of range");
    }

    // pi over {(1,1), (1,0), (0,1)} for two-block mode.
    std::array<double, 3> pi() const {
        validate();
        if (p == 0.0) return {1.0, 0.0, 0.0};
        const double keep = 1.0 - p;
        const double z = keep * keep + 2.0 * keep * p;  // 1 - p^2
        return {keep * keep / z, keep * p / z, p * keep / z};
    }
};

inline Mask block_mask(const MaskDistribution& dist, BlockMask which) {
    Mask m;
    m.keep.assign(static_cast<size_t>(dist.channels), 1);
    if (which == BlockMask::stable_only)
        for (int c = 0; c < dist.n_u; ++c) m.keep[static_cast<size_t>(c)] = 0;
    if (which == BlockMask::unstable_only)
        for (int c = dist.n_u; c < dist.channels; ++c) m.keep[static_cast<size_t>(c)] = 0;
    return m;
}

inline Mask sample_mask(const MaskDistribution& dist, Rng& rng) {
    dist.validate();
    if (dist.mode == MaskMode::two_block) {
        const auto pi = dist.pi();
        const double u = rng.uniform();
        BlockMask which = BlockMask::both;
        if (u >= pi[0] && u < pi[0] + pi[1])
            which = BlockMask::unstable_only;
        else if (u >= pi[0] + pi[1])
            which = BlockMask::stable_only;
        return block_mask(dist, which);
    }
    if (dist.mode == MaskMode::structured_block) {
        for (;;) {
            Mask m;
            m.keep.assign(static_cast<size_t>(dist.channels), 1);
            const bool keep_u = rng.uniform() >= dist.p;
            const bool keep_s = rng.uniform() >= dist.p;
            for (int c = 0; c < dist.channels; ++c)
                m.keep[static_cast<size_t>(c)] = c < dist.n_u ? keep_u : keep_s;
            if (!dist.guarantee_nonzero || !m.all_zero()) return m;
        }
    }
    for (;;) {  // per-channel
        Mask m;
        m.keep.assign(static_cast<size_t>(dist.channels), 0);
        for (int c = 0; c < dist.channels; ++c)
            m.keep[static_cast<size_t>(c)] = rng.uniform() >= dist.p ? 1 : 0;
        if (!dist.guarantee_nonzero || !m.all_zero()) return m;
    }
}

// z~ = mask applied channel-wise; kept channels scaled by 1/(1-p) iff the
// distribution's rescale flag is set. Accepts [C, L] or [B, C, L] with a
// single mask, applied to every sample.
inline Tensor apply_channel_dropout(const Tensor& z, const Mask& mask,
                                    const MaskDistribution& dist) {
    const bool batched = z.rank() == 3;
    check(batched || z.rank() == 2, "dropout expects [C, L] or [B, C, L]");
    const int channels = batched ? z.dim(1) : z.dim(0);
    check(static_cast<int>(mask.keep.size()) == channels,
          "mask length does not match channel count");
    const double factor = dist.rescale && dist.p > 0.0 ? 1.0 / (1.0 - dist.p) : 1.0;
    Tensor out = z;
    const int batch = batched ? z.dim(0) : 1;
    const int length = batched ? z.dim(2) : z.dim(1);
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            double* row = out.data() + (static_cast<long>(n) * channels + c) * length;
            if (mask.keep[static_cast<size_t>(c)]) {
                if (factor != 1.0)
                    for (int l = 0; l < length; ++l) row[l] *= factor;
            } else {
                for (int l = 0; l < length; ++l) row[l] = 0.0;
            }
        }
    return out;
}

// Builds the model input for a whole batch: extract, instance-normalize, and
// concatenate. This is the one place the (x_u, features) ordering is fixed.
inline Tensor build_inputs(const Extractor& extractor, const Tensor& x_u, const Tensor& x_s) {
    Tensor features = instance_normalize(extractor.extract(x_s));
    return concat_channels(x_u, features);
}

enum class InputMode { full, image_only, reps_only };

inline std::string input_mode_name(InputMode m) {
    switch (m) {
        case InputMode::full: return "full";
        case InputMode::image_only: return "image-only";
        case InputMode::reps_only: return "reps-only";
    }
    return "full";
}

inline InputMode input_mode_from_name(const std::string& s) {
    if (s == "full") return InputMode::full;
    if (s == "image-only") return InputMode::image_only;
    if (s == "reps-only") return InputMode::reps_only;
    contract_fail("unknown input mode: " + s);
}

// Zeroes the complementary block without rescale (evaluation-time ablation).
inline Tensor apply_input_mode(const Tensor& z, int n_u, InputMode mode) {
    if (mode == InputMode::full) return z;
    check(z.rank() == 3, "apply_input_mode expects [B, C, L]");
    MaskDistribution dist;
    dist.mode = MaskMode::two_block;
    dist.p = 0.0;
    dist.rescale = false;
    dist.channels = z.dim(1);
    dist.n_u = n_u;
    const Mask m = block_mask(dist, mode == InputMode::image_only ? BlockMask::unstable_only
                                                                  : BlockMask::stable_only);
    return apply_channel_dropout(z, m, dist);
}

}  // namespace dropgen
