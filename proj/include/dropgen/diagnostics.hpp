#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropgen/envs.hpp"
#include "dropgen/grad_check.hpp"
#include "dropgen/io.hpp"
#include "dropgen/losses.hpp"
#include "dropgen/representation.hpp"
#include "dropgen/training.hpp"

namespace dropgen {

// -- Eq. 1 risk decomposition --------------------------------------------------

struct RiskReport {
    double r_11 = 0.0;  // joint risk, nats
    double r_10 = 0.0;  // unstable-only (image) risk
    double r_01 = 0.0;  // stable-only (reps) risk
    std::array<double, 3> pi{1.0, 0.0, 0.0};
    double objective = 0.0;  // L = sum_mu pi_mu R_mu
    // Bayes references when the generating spec is discrete
    std::optional<double> h_y_xs;
    std::optional<double> h_y_joint_min;

    json to_json() const {
        json j;
        j["R_11"] = r_11;
        j["R_10"] = r_10;
        j["R_01"] = r_01;
        j["pi"] = {pi[0], pi[1], pi[2]};
        j["objective"] = objective;
        if (h_y_xs) j["bayes_H_Y_given_Xs"] = *h_y_xs;
        if (h_y_joint_min) j["bayes_min_H_Y_given_Xs_Xu"] = *h_y_joint_min;
        return j;
    }
};

namespace detail {

inline double masked_risk(const Model& model, const Extractor& extractor, const Batch& batch,
                          int n_u, BlockMask which) {
    MaskDistribution dist;
    dist.mode = MaskMode::two_block;
    dist.p = 0.0;
    dist.rescale = false;  // Eq. 1 uses literal masking
    dist.channels = model.input_channels();
    dist.n_u = n_u;
    Tensor z = build_inputs(extractor, batch.x_u, batch.x_s);
    z = apply_channel_dropout(z, block_mask(dist, which), dist);
    return softmax_cross_entropy_value(model.forward(z), batch.y);
}

}  // namespace detail

// Exact per-mask risks under the three admissible masks (rescale off) and the
// objective L = sum_mu pi_mu R_mu. pi must cover only the admissible masks.
inline RiskReport decomposed_risk(const Model& model, const Extractor& extractor,
                                  const Dataset& data, const std::array<double, 3>& pi,
                                  const EnvironmentSpec* spec = nullptr) {
    double total = 0.0;
    for (double p : pi) {
        check(p >= 0.0, "pi entries must be non-negative");
        total += p;
    }
    check(std::abs(total - 1.0) < 1e-9, "pi must sum to 1 over the three admissible masks");
    Batch batch = full_batch(data);
    RiskReport rep;
    rep.pi = pi;
    rep.r_11 = detail::masked_risk(model, extractor, batch, data.n_u, BlockMask::both);
    rep.r_10 = detail::masked_risk(model, extractor, batch, data.n_u, BlockMask::unstable_only);
    rep.r_01 = detail::masked_risk(model, extractor, batch, data.n_u, BlockMask::stable_only);
    rep.objective = pi[0] * rep.r_11 + pi[1] * rep.r_10 + pi[2] * rep.r_01;
    // Bayes floors only exist for specs that satisfy the assumptions; a
    // violating spec already surfaces as a training warning.
    if (spec && spec->mode == EmissionMode::discrete &&
        verify_assumptions(*spec).all_pass()) {
        BayesRisks bayes = bayes_risks(*spec);
        rep.h_y_xs = bayes.h_y_xs;
        double mn = 1e300;
        for (double h : bayes.h_y_joint) mn = std::min(mn, h);
        rep.h_y_joint_min = mn;
    }
    return rep;
}

struct McRisk {
    double mean = 0.0;
    double std_error = 0.0;
    long draws = 0;
};

// Monte-Carlo estimate of the training objective under random two-block masks
// (rescale off): each draw picks one sample and one mask. Comparable to the
// stratified objective within a few standard errors.
inline McRisk mc_masked_risk(const Model& model, const Extractor& extractor,
                             const Dataset& data, const MaskDistribution& dist_in, long draws,
                             uint64_t seed) {
    check(draws > 1, "mc_masked_risk needs draws > 1");
    MaskDistribution dist = dist_in;
    dist.rescale = false;
    Rng rng = stream_rng(seed, StreamTag::mask, 0x3c3c);
    double sum = 0.0, sum_sq = 0.0;
    Batch all = full_batch(data);
    Tensor z_all = build_inputs(extractor, all.x_u, all.x_s);
    const int length = data.length;
    const int channels = z_all.dim(1);
    for (long d = 0; d < draws; ++d) {
        const int i = static_cast<int>(rng.below(static_cast<uint64_t>(data.size())));
        const Mask mask = sample_mask(dist, rng);
        Tensor z({1, channels, length});
        for (int c = 0; c < channels; ++c)
            for (int l = 0; l < length; ++l)
                z(0, c, l) = mask.keep[static_cast<size_t>(c)] ? z_all(i, c, l) : 0.0;
        IntTensor y({1, length});
        for (int l = 0; l < length; ++l) y(0, l) = all.y(i, l);
        const double loss = softmax_cross_entropy_value(model.forward(z), y);
        sum += loss;
        sum_sq += loss * loss;
    }
    McRisk out;
    out.draws = draws;
    out.mean = sum / static_cast<double>(draws);
    const double var =
        (sum_sq - sum * sum / static_cast<double>(draws)) / static_cast<double>(draws - 1);
    out.std_error = std::sqrt(std::max(0.0, var) / static_cast<double>(draws));
    return out;
}

// -- Condition 1 gradient alignment ---------------------------------------------

struct AlignmentRecord {
    long step = 0;
    double cosine = 0.0;        // cos(grad_Ws R_(1,1), grad_Ws R_(0,1))
    double norm_joint = 0.0;    // ||grad_Ws R_(1,1)||
    double norm_stable = 0.0;   // ||grad_Ws R_(0,1)||
    bool degenerate = false;    // either norm under 1e-12
    // Secondary trace for the figure's (1,0)-vs-(1,1) pairing; the (1,0)
    // gradient of W_s is structurally zero, so this is always degenerate and
    // recorded only to surface the discrepancy.
    double cosine_vs_unstable_regime = 0.0;
    bool secondary_degenerate = true;
};

// Computes grad_Ws of the joint risk and of the stable-only risk on the same
// held-out batch (no dropout in either measured pass) and returns the cosine.
inline AlignmentRecord gradient_alignment(const Model& model, const Extractor& extractor,
                                          const Batch& batch, int n_u, long step = 0) {
    check(batch.y.size() > 0, "alignment needs a non-empty batch");
    MaskDistribution dist;
    dist.mode = MaskMode::two_block;
    dist.p = 0.0;
    dist.rescale = false;
    dist.channels = model.input_channels();
    dist.n_u = n_u;

    Tensor z = build_inputs(extractor, batch.x_u, batch.x_s);
    auto grad_ws_under = [&](BlockMask which) {
        Tensor masked = apply_channel_dropout(z, block_mask(dist, which), dist);
        Graph g;
        std::vector<Var> pv;
        Var logits = model.forward_graph(g, masked, pv);
        Var loss = g.softmax_cross_entropy(logits, batch.y);
        g.backward(loss);
        GradientBundle grads = model.collect_grads(g, pv);
        return grads.first_layer_stable();
    };

    Tensor g_joint = grad_ws_under(BlockMask::both);
    Tensor g_stable = grad_ws_under(BlockMask::stable_only);
    Tensor g_unstable_regime = grad_ws_under(BlockMask::unstable_only);

    AlignmentRecord rec;
    rec.step = step;
    rec.norm_joint = norm(g_joint);
    rec.norm_stable = norm(g_stable);
    if (rec.norm_joint < 1e-12 || rec.norm_stable < 1e-12) {
        rec.degenerate = true;
    } else {
        rec.cosine = dot(g_joint, g_stable) / (rec.norm_joint * rec.norm_stable);
    }
    const double norm_u = norm(g_unstable_regime);
    if (norm_u >= 1e-12 && rec.norm_joint >= 1e-12) {
        rec.secondary_degenerate = false;
        rec.cosine_vs_unstable_regime =
            dot(g_joint, g_unstable_regime) / (rec.norm_joint * norm_u);
    }
    return rec;
}

inline std::string alignment_csv(const std::vector<AlignmentRecord>& records) {
    CsvWriter csv({"step", "cosine", "norm_joint", "norm_stable", "degenerate"});
    for (const auto& r : records)
        csv.row({std::to_string(r.step), fmt_double(r.cosine), fmt_double(r.norm_joint),
                 fmt_double(r.norm_stable), r.degenerate ? "1" : "0"});
    return csv.str();
}

// -- stable-input usage ----------------------------------------------------------

struct StableUsage {
    double output_variance = 0.0;  // variance of (0,1)-masked softmax outputs
    double r_01 = 0.0;             // stable-only risk, nats
    std::optional<double> gap_to_bayes;  // R_01 - H(Y|X_s) when spec is discrete
};

// Variance of the reps-only softmax outputs across the dataset. Zero variance
// certifies that the model ignores X_s.
inline StableUsage stable_usage(const Model& model, const Extractor& extractor,
                                const Dataset& data, const EnvironmentSpec* spec = nullptr) {
    check(data.size() >= 2, "stable_usage needs at least two samples");
    Batch batch = full_batch(data);
    MaskDistribution dist;
    dist.mode = MaskMode::two_block;
    dist.p = 0.0;
    dist.rescale = false;
    dist.channels = model.input_channels();
    dist.n_u = data.n_u;
    Tensor z = build_inputs(extractor, batch.x_u, batch.x_s);
    z = apply_channel_dropout(z, block_mask(dist, BlockMask::stable_only), dist);
    Tensor logits = model.forward(z);
    Tensor probs = kernels::softmax(logits);

    StableUsage out;
    out.r_01 = softmax_cross_entropy_value(logits, batch.y);
    // pooled per-(class, position) variance across samples, averaged
    const int batch_n = probs.dim(0), classes = probs.dim(1), length = probs.dim(2);
    double var_sum = 0.0;
    for (int c = 0; c < classes; ++c)
        for (int l = 0; l < length; ++l) {
            double mean = 0.0;
            for (int n = 0; n < batch_n; ++n) mean += probs(n, c, l);
            mean /= batch_n;
            double var = 0.0;
            for (int n = 0; n < batch_n; ++n)
                var += (probs(n, c, l) - mean) * (probs(n, c, l) - mean);
            var_sum += var / batch_n;
        }
    out.output_variance = var_sum / (static_cast<double>(classes) * length);
    if (spec && spec->mode == EmissionMode::discrete &&
        verify_assumptions(*spec).all_pass())
        out.gap_to_bayes = out.r_01 - bayes_risks(*spec).h_y_xs;
    return out;
}

// -- channel-removal sensitivity ---------------------------------------------------

struct SensitivityReport {
    double baseline_dice = 0.0;       // full input
    double delta_drop_image = 0.0;    // baseline - Dice(image zeroed)
    double delta_drop_reps = 0.0;     // baseline - Dice(reps zeroed)

    json to_json() const {
        return {{"baseline_dice", baseline_dice},
                {"delta_drop_image", delta_drop_image},
                {"delta_drop_reps", delta_drop_reps}};
    }
};

inline SensitivityReport channel_removal_sensitivity(const Model& model,
                                                     const Extractor& extractor,
                                                     const Dataset& val_data) {
    SensitivityReport rep;
    rep.baseline_dice = evaluate(model, extractor, val_data, InputMode::full).mean_dice;
    const double image_zeroed =
        evaluate(model, extractor, val_data, InputMode::reps_only).mean_dice;
    const double reps_zeroed =
        evaluate(model, extractor, val_data, InputMode::image_only).mean_dice;
    rep.delta_drop_image = rep.baseline_dice - image_zeroed;
    rep.delta_drop_reps = rep.baseline_dice - reps_zeroed;
    return rep;
}

// -- linear CKA ------------------------------------------------------------------

struct CkaResult {
    double value = 0.0;
    bool degenerate = false;  // a zero-variance input matrix
};

// Linear centered kernel alignment between row-paired representation matrices
// A [N x Da], B [N x Db]: ||Ac' Bc||_F^2 / (||Ac' Ac||_F ||Bc' Bc||_F).
inline CkaResult linear_cka(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "linear_cka expects matrices");
    check(a.dim(0) == b.dim(0), "linear_cka row count mismatch");
    check(a.dim(0) >= 3, "linear_cka needs at least 3 rows");
    auto center = [](const Tensor& m) {
        Tensor out = m;
        for (int j = 0; j < m.dim(1); ++j) {
            double mean = 0.0;
            for (int i = 0; i < m.dim(0); ++i) mean += m(i, j);
            mean /= m.dim(0);
            for (int i = 0; i < m.dim(0); ++i) out(i, j) -= mean;
        }
        return out;
    };
    Tensor ac = center(a);
    Tensor bc = center(b);
    auto cross_fro_sq = [](const Tensor& x, const Tensor& y) {
        // ||X' Y||_F^2 without materializing the D x D product
        double total = 0.0;
        for (int j = 0; j < x.dim(1); ++j)
            for (int k = 0; k < y.dim(1); ++k) {
                double s = 0.0;
                for (int i = 0; i < x.dim(0); ++i) s += x(i, j) * y(i, k);
                total += s * s;
            }
        return total;
    };
    const double num = cross_fro_sq(ac, bc);
    const double da = std::sqrt(cross_fro_sq(ac, ac));
    const double db = std::sqrt(cross_fro_sq(bc, bc));
    CkaResult r;
    if (da < 1e-30 || db < 1e-30) {
        r.degenerate = true;
        return r;
    }
    r.value = num / (da * db);
    return r;
}

// Rows = samples, columns = flattened feature channels.
inline Tensor representation_matrix(const std::vector<Tensor>& per_sample) {
    check(!per_sample.empty(), "representation_matrix needs samples");
    const long cols = per_sample.front().size();
    Tensor m({static_cast<int>(per_sample.size()), static_cast<int>(cols)});
    for (size_t i = 0; i < per_sample.size(); ++i) {
        check(per_sample[i].size() == cols, "ragged representation rows");
        for (long j = 0; j < cols; ++j) m(static_cast<int>(i), static_cast<int>(j)) =
            per_sample[i][j];
    }
    return m;
}

// Cross-environment stability of raw x_u versus extracted features on paired
// datasets (same labels and stable draws, environment-specific unstable draws).
struct StabilityComparison {
    double cka_extracted = 0.0;
    double cka_raw_unstable = 0.0;
};

inline StabilityComparison extractor_stability(const Extractor& extractor,
                                               const Dataset& env_a, const Dataset& env_b) {
    check(env_a.size() == env_b.size(), "paired datasets must have equal size");
    std::vector<Tensor> fa, fb, ua, ub;
    for (int i = 0; i < env_a.size(); ++i) {
        Batch one_a = make_batch(env_a, {i});
        Batch one_b = make_batch(env_b, {i});
        fa.push_back(instance_normalize(extractor.extract(one_a.x_s)));
        fb.push_back(instance_normalize(extractor.extract(one_b.x_s)));
        ua.push_back(one_a.x_u);
        ub.push_back(one_b.x_u);
    }
    StabilityComparison out;
    out.cka_extracted = linear_cka(representation_matrix(fa), representation_matrix(fb)).value;
    out.cka_raw_unstable =
        linear_cka(representation_matrix(ua), representation_matrix(ub)).value;
    return out;
}

// -- weight-noise robustness -------------------------------------------------------

struct RobustnessPoint {
    double alpha = 0.0;
    double mean_dice = 0.0;
    double mean_loss = 0.0;
};

// Adds N(0, (alpha * per-tensor-std)^2) noise to a copy of all parameters,
// evaluates, and averages over `trials` perturbations. alpha = 0 returns the
// unperturbed evaluation exactly.
inline std::vector<RobustnessPoint> weight_noise_robustness(
    const Model& model, const Extractor& extractor, const Dataset& data,
    const std::vector<double>& alphas, int trials, uint64_t seed) {
    check(trials >= 1, "trials must be >= 1");
    std::vector<RobustnessPoint> curve;
    std::vector<double> tensor_std;
    for (const auto& p : model.params()) tensor_std.push_back(std_of(p));
    for (size_t ai = 0; ai < alphas.size(); ++ai) {
        const double alpha = alphas[ai];
        check(alpha >= 0.0, "alpha must be non-negative");
        RobustnessPoint pt;
        pt.alpha = alpha;
        if (alpha == 0.0) {
            EvalResult r = evaluate(model, extractor, data);
            pt.mean_dice = r.mean_dice;
            pt.mean_loss = r.loss;
        } else {
            for (int t = 0; t < trials; ++t) {
                Model noisy = model;
                Rng rng = stream_rng(seed, StreamTag::noise, ai, static_cast<uint64_t>(t));
                for (size_t p = 0; p < noisy.params().size(); ++p) {
                    const double sigma = alpha * tensor_std[p];
                    if (sigma == 0.0) continue;
                    for (long i = 0; i < noisy.params()[p].size(); ++i)
                        noisy.params()[p][i] += sigma * rng.normal();
                }
                EvalResult r = evaluate(noisy, extractor, data);
                pt.mean_dice += r.mean_dice;
                pt.mean_loss += r.loss;
            }
            pt.mean_dice /= trials;
            pt.mean_loss /= trials;
        }
        curve.push_back(pt);
    }
    return curve;
}

// -- synthetic input corruptions ----------------------------------------------------

enum class CorruptionKind { gamma, bias };

inline CorruptionKind corruption_from_name(const std::string& s) {
    if (s == "gamma") return CorruptionKind::gamma;
    if (s == "bias") return CorruptionKind::bias;
    contract_fail("unknown corruption kind: " + s);
}

// Gamma/contrast adjustment or a smooth multiplicative bias field over the
// position axis. Level 0 is the identity for both kinds. Gamma requires
// non-negative inputs (they are rescaled to [0, 1] internally per channel);
// the exponent's direction alternates with the seed. The bias field is a
// degree-3 polynomial over normalized position with mean 1 and amplitude
// `level` (level < 1 keeps the field positive).
inline Tensor corrupt(const Tensor& x_u, CorruptionKind kind, double level, uint64_t seed) {
    check(level >= 0.0, "corruption level must be non-negative");
    check(x_u.rank() == 2 || x_u.rank() == 3, "corrupt expects [C, L] or [B, C, L]");
    if (level == 0.0) return x_u;

    const bool batched = x_u.rank() == 3;
    const int batch = batched ? x_u.dim(0) : 1;
    const int channels = batched ? x_u.dim(1) : x_u.dim(0);
    const int length = batched ? x_u.dim(2) : x_u.dim(1);
    Tensor out = x_u;

    if (kind == CorruptionKind::gamma) {
        for (long i = 0; i < x_u.size(); ++i)
            check(x_u[i] >= 0.0, "gamma corruption requires non-negative inputs");
        Rng rng = stream_rng(seed, StreamTag::noise, 0x9a44a);
        const double sign = rng.below(2) == 0 ? -1.0 : 1.0;
        const double gamma = std::exp(level * sign);
        if (gamma == 1.0) return x_u;
        for (int n = 0; n < batch; ++n)
            for (int c = 0; c < channels; ++c) {
                double* row = out.data() + (static_cast<long>(n) * channels + c) * length;
                double lo = row[0], hi = row[0];
                for (int l = 1; l < length; ++l) {
                    lo = std::min(lo, row[l]);
                    hi = std::max(hi, row[l]);
                }
                const double span = hi - lo;
                if (span <= 0.0) continue;
                for (int l = 0; l < length; ++l)
                    row[l] = lo + span * std::pow((row[l] - lo) / span, gamma);
            }
        return out;
    }

    // bias field
    check(level < 1.0, "bias level must be < 1 to keep the field positive");
    Rng rng = stream_rng(seed, StreamTag::noise, 0xb1a5);
    std::array<double, 4> coeff{};
    for (auto& c : coeff) c = rng.uniform(-1.0, 1.0);
    std::vector<double> field(static_cast<size_t>(length));
    double mean = 0.0;
    for (int l = 0; l < length; ++l) {
        const double t = length > 1 ? static_cast<double>(l) / (length - 1) : 0.0;
        field[static_cast<size_t>(l)] =
            coeff[0] + coeff[1] * t + coeff[2] * t * t + coeff[3] * t * t * t;
        mean += field[static_cast<size_t>(l)];
    }
    mean /= length;
    double amp = 0.0;
    for (auto& f : field) {
        f -= mean;
        amp = std::max(amp, std::abs(f));
    }
    for (auto& f : field) f = 1.0 + (amp > 0.0 ? level * f / amp : 0.0);
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            double* row = out.data() + (static_cast<long>(n) * channels + c) * length;
            for (int l = 0; l < length; ++l) row[l] *= field[static_cast<size_t>(l)];
        }
    return out;
}

}  // namespace dropgen
