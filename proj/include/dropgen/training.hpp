#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dropgen/envs.hpp"
#include "dropgen/grad_check.hpp"
#include "dropgen/io.hpp"
#include "dropgen/losses.hpp"
#include "dropgen/model.hpp"
#include "dropgen/representation.hpp"

namespace dropgen {

enum class DropoutLocation { inputs_only, all_layers };

inline std::string dropout_location_name(DropoutLocation d) {
    return d == DropoutLocation::inputs_only ? "inputs-only" : "all-layers";
}

inline DropoutLocation dropout_location_from_name(const std::string& s) {
    if (s == "inputs-only") return DropoutLocation::inputs_only;
    if (s == "all-layers") return DropoutLocation::all_layers;
    contract_fail("unknown dropout location: " + s);
}

struct TrainConfig {
    int steps = 2000;
    int batch_size = 32;
    double lr0 = 2e-4;
    double weight_decay = 1e-4;
    LossKind loss = LossKind::cross_entropy;
    double dropout_p = 0.5;
    MaskMode mask_mode = MaskMode::per_channel;
    bool rescale = true;
    bool mask_guarantee_nonzero = false;
    DropoutLocation dropout_location = DropoutLocation::inputs_only;
    ExtractorKind extractor = ExtractorKind::identity;
    InputMode input_mode = InputMode::full;  // image-/reps-only ablation training
    uint64_t seed = 0;
    int eval_every = 100;

    void validate() const {
        check(steps >= 0, "steps must be non-negative");
        check(batch_size > 0, "batch size must be positive");
        check(lr0 > 0.0, "lr0 must be positive");
        check(weight_decay >= 0.0, "weight decay must be non-negative");
        check(dropout_p >= 0.0 && dropout_p < 1.0, "p in [0,1)");
        check(eval_every > 0, "eval_every must be positive");
    }
};

// lr = lr0 * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(long step, long total_steps, double lr0) {
    check(total_steps > 0, "total_steps must be positive");
    check(step >= 0 && step <= total_steps, "step outside [0, total_steps]");
    constexpr double pi = 3.14159265358979323846;
    return lr0 * 0.5 *
           (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static OptimizerState like(const Model& model) {
        OptimizerState s;
        for (const auto& p : model.params()) {
            s.m.emplace_back(Tensor(p.shape()));
            s.v.emplace_back(Tensor(p.shape()));
        }
        return s;
    }
};

// AdamW: bias-corrected Adam step, then decoupled decay theta -= lr*lambda*theta.
inline void adamw_step(std::vector<Tensor>& params, const GradientBundle& grads,
                       OptimizerState& state, double lr, double weight_decay) {
    check(params.size() == grads.grads.size() && params.size() == state.m.size(),
          "optimizer shape mismatch");
    grads.check_finite();
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        check(params[p].same_shape(grads.grads[p]), "gradient shape mismatch");
        for (long i = 0; i < params[p].size(); ++i) {
            const double g = grads.grads[p][i];
            double& m = state.m[p][i];
            double& v = state.v[p][i];
            m = state.beta1 * m + (1.0 - state.beta1) * g;
            v = state.beta2 * v + (1.0 - state.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            params[p][i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
            // decoupled decay theta <- theta - lr*lambda*theta, as one scaling
            params[p][i] *= 1.0 - lr * weight_decay;
        }
    }
}

struct EvalResult {
    double loss = 0.0;       // configured loss kind, nats for CE
    double mean_dice = 0.0;
    std::vector<double> per_class_dice;
};

// Dropout-free evaluation on the full dataset; image-only / reps-only modes
// zero the complementary block without rescale.
inline EvalResult evaluate(const Model& model, const Extractor& extractor, const Dataset& data,
                           InputMode mode = InputMode::full,
                           LossKind loss_kind = LossKind::cross_entropy) {
    check(data.size() > 0, "evaluate needs data");
    Batch batch = full_batch(data);
    Tensor z = build_inputs(extractor, batch.x_u, batch.x_s);
    z = apply_input_mode(z, data.n_u, mode);
    Tensor logits = model.forward(z);
    EvalResult r;
    r.loss = loss_value(loss_kind, logits, batch.y);
    DiceResult dice = dice_score(argmax_channels(logits), batch.y, data.num_classes);
    r.mean_dice = dice.mean;
    r.per_class_dice = dice.per_class;
    return r;
}

struct HistoryRecord {
    long step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss_full = 0.0;
    double val_loss_mask10 = 0.0;  // image-only input
    double val_loss_mask01 = 0.0;  // reps-only input
    double val_dice = 0.0;
    double ood_dice = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
    std::vector<HistoryRecord> records;
    std::vector<std::string> warnings;

    std::string to_csv() const {
        CsvWriter csv({"step", "lr", "train_loss", "val_loss_full", "val_loss_mask10",
                       "val_loss_mask01", "val_dice", "ood_dice"});
        for (const auto& r : records)
            csv.row({std::to_string(r.step), fmt_double(r.lr), fmt_double(r.train_loss),
                     fmt_double(r.val_loss_full), fmt_double(r.val_loss_mask10),
                     fmt_double(r.val_loss_mask01), fmt_double(r.val_dice),
                     std::isnan(r.ood_dice) ? "nan" : fmt_double(r.ood_dice)});
        return csv.str();
    }
};

namespace detail {

// Per-sample masks for one training step, derived purely from (seed, step).
inline std::vector<Mask> step_masks(const MaskDistribution& dist, uint64_t seed, long step,
                                    int batch_size) {
    Rng rng = stream_rng(seed, StreamTag::mask, static_cast<uint64_t>(step));
    std::vector<Mask> masks;
    masks.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) masks.push_back(sample_mask(dist, rng));
    return masks;
}

inline std::vector<int> step_batch_indices(uint64_t seed, long step, int batch_size,
                                           int dataset_size) {
    Rng rng = stream_rng(seed, StreamTag::batch, static_cast<uint64_t>(step));
    std::vector<int> idx(static_cast<size_t>(batch_size));
    for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<uint64_t>(dataset_size)));
    return idx;
}

// Applies per-sample channel masks to a batched z.
inline Tensor apply_sample_masks(const Tensor& z, const std::vector<Mask>& masks,
                                 const MaskDistribution& dist) {
    Tensor out = z;
    const int channels = z.dim(1), length = z.dim(2);
    const double factor = dist.rescale && dist.p > 0.0 ? 1.0 / (1.0 - dist.p) : 1.0;
    for (int n = 0; n < z.dim(0); ++n) {
        const Mask& m = masks[static_cast<size_t>(n)];
        for (int c = 0; c < channels; ++c) {
            double* row = out.data() + (static_cast<long>(n) * channels + c) * length;
            if (m.keep[static_cast<size_t>(c)]) {
                if (factor != 1.0)
                    for (int l = 0; l < length; ++l) row[l] *= factor;
            } else {
                for (int l = 0; l < length; ++l) row[l] = 0.0;
            }
        }
    }
    return out;
}

// Hidden-layer channel dropout factors for the all-layers location: one
// per-sample channel mask for every non-final layer.
inline std::vector<Tensor> hidden_layer_masks(const Model& model, double p, bool rescale,
                                              uint64_t seed, long step, int batch_size) {
    Rng rng = stream_rng(seed, StreamTag::mask, static_cast<uint64_t>(step), 0x1a7e);
    std::vector<Tensor> masks;
    const double factor = rescale && p > 0.0 ? 1.0 / (1.0 - p) : 1.0;
    for (size_t i = 0; i + 1 < model.spec().layers.size(); ++i) {
        const int ch = model.spec().layers[i].out_channels;
        Tensor m({batch_size, ch});
        for (long j = 0; j < m.size(); ++j) m[j] = rng.uniform() >= p ? factor : 0.0;
        masks.push_back(std::move(m));
    }
    return masks;
}

}  // namespace detail

struct TrainState {
    Model model;
    OptimizerState opt;
    long step = 0;
    TrainHistory history;
};

// Read-only observation of the model during training (alignment traces and
// similar instruments). Never touches the run's random streams.
struct TrainObserver {
    int every = 0;  // 0 disables
    std::function<void(const Model&, long step)> fn;
};

// One DropGen training run. Per step: sample a minibatch, extract and
// instance-normalize the stable features, concatenate, sample and apply
// channel dropout, forward, loss, backward, AdamW step on a cosine schedule.
// Evaluation records use no dropout and the full input. Deterministic given
// config.seed; `resume_from` continues a checkpointed run bit-exactly.
// `halt_after` (when >= 0) stops the run at that step while keeping the full
// schedule, producing a checkpointable mid-run state.
inline TrainState train(const TrainConfig& config, const Dataset& train_data,
                        const Dataset& val_data, const Dataset* ood_data, Model model,
                        const Extractor& extractor,
                        const EnvironmentSpec* spec = nullptr,
                        const TrainState* resume_from = nullptr,
                        const TrainObserver* observer = nullptr, long halt_after = -1) {
    config.validate();
    check(train_data.size() > 0 && val_data.size() > 0, "train/val data required");

    const uint64_t extractor_checksum = extractor.checksum();

    TrainState st;
    if (resume_from) {
        st = *resume_from;
    } else {
        st.model = std::move(model);
        st.opt = OptimizerState::like(st.model);
        st.step = 0;
    }
    check(st.model.input_channels() == train_data.n_u + extractor.out_channels(),
          "model input channels must equal n_u + extractor output channels");
    check(st.model.partition() == train_data.n_u, "model partition must equal n_u");

    if (spec && spec->mode == EmissionMode::discrete && st.step == 0) {
        AssumptionReport rep = verify_assumptions(*spec);
        if (!rep.all_pass())
            st.history.warnings.push_back("assumption check failed: " + rep.first_failed());
    }

    MaskDistribution dist;
    dist.mode = config.mask_mode;
    dist.p = config.dropout_p;
    dist.rescale = config.rescale;
    dist.channels = st.model.input_channels();
    dist.n_u = train_data.n_u;
    dist.guarantee_nonzero = config.mask_guarantee_nonzero;

    // History records train loss as a dropout-free pass over a fixed train
    // subset, so the column is smooth and comparable across configs.
    const int train_eval_n = std::min(train_data.size(), 256);
    Dataset train_eval;
    train_eval.spec_hash = train_data.spec_hash;
    train_eval.seed = train_data.seed;
    train_eval.num_classes = train_data.num_classes;
    train_eval.n_u = train_data.n_u;
    train_eval.n_s = train_data.n_s;
    train_eval.length = train_data.length;
    train_eval.samples.assign(train_data.samples.begin(),
                              train_data.samples.begin() + train_eval_n);

    auto record = [&](long step) {
        HistoryRecord r;
        r.step = step;
        r.lr = cosine_lr(step, config.steps == 0 ? 1 : config.steps, config.lr0);
        r.train_loss =
            evaluate(st.model, extractor, train_eval, config.input_mode, config.loss).loss;
        EvalResult full = evaluate(st.model, extractor, val_data, InputMode::full, config.loss);
        r.val_loss_full = full.loss;
        r.val_dice = full.mean_dice;
        r.val_loss_mask10 =
            evaluate(st.model, extractor, val_data, InputMode::image_only, config.loss).loss;
        r.val_loss_mask01 =
            evaluate(st.model, extractor, val_data, InputMode::reps_only, config.loss).loss;
        if (ood_data)
            r.ood_dice = evaluate(st.model, extractor, *ood_data, InputMode::full).mean_dice;
        st.history.records.push_back(r);
    };

    if (st.step == 0) record(0);

    const long last_step = halt_after >= 0 ? std::min<long>(halt_after, config.steps)
                                           : config.steps;
    for (long step = st.step; step < last_step; ++step) {
        const auto indices =
            detail::step_batch_indices(config.seed, step, config.batch_size, train_data.size());
        Batch batch = make_batch(train_data, indices);
        Tensor z = build_inputs(extractor, batch.x_u, batch.x_s);
        if (config.input_mode != InputMode::full) {
            z = apply_input_mode(z, train_data.n_u, config.input_mode);
        } else if (config.dropout_p > 0.0) {
            const auto masks =
                detail::step_masks(dist, config.seed, step, config.batch_size);
            z = detail::apply_sample_masks(z, masks, dist);
        }

        std::vector<Tensor> layer_masks;
        const std::vector<Tensor>* layer_masks_ptr = nullptr;
        if (config.dropout_location == DropoutLocation::all_layers && config.dropout_p > 0.0 &&
            config.input_mode == InputMode::full) {
            layer_masks = detail::hidden_layer_masks(st.model, config.dropout_p, config.rescale,
                                                     config.seed, step, config.batch_size);
            layer_masks_ptr = &layer_masks;
        }

        Graph g;
        std::vector<Var> param_vars;
        Var logits = st.model.forward_graph(g, z, param_vars, layer_masks_ptr);
        Var loss = loss_graph(g, config.loss, logits, batch.y);
        g.backward(loss);
        GradientBundle grads = st.model.collect_grads(g, param_vars);

        const double lr = cosine_lr(step, config.steps, config.lr0);
        adamw_step(st.model.params(), grads, st.opt, lr, config.weight_decay);
        st.step = step + 1;

        if (st.step % config.eval_every == 0) record(st.step);
        if (observer && observer->every > 0 && st.step % observer->every == 0)
            observer->fn(st.model, st.step);
    }

    check(extractor.checksum() == extractor_checksum, "extractor was mutated during training");
    return st;
}

// Entropy-minimization test-time adaptation baseline: `steps` full-batch
// gradient-descent steps on the mean prediction entropy of the unlabeled
// target data. Labels in `target` are never read; all parameters update.
inline Model entropy_min_adapt(Model model, const Extractor& extractor, const Dataset& target,
                               int steps, double lr,
                               std::vector<double>* entropy_trace = nullptr) {
    check(steps >= 0, "steps must be non-negative");
    Batch batch = full_batch(target);
    Tensor z = build_inputs(extractor, batch.x_u, batch.x_s);
    if (entropy_trace) entropy_trace->push_back(softmax_entropy_value(model.forward(z)));
    for (int step = 0; step < steps; ++step) {
        Graph g;
        std::vector<Var> param_vars;
        Var logits = model.forward_graph(g, z, param_vars);
        Var loss = g.softmax_entropy(logits);
        g.backward(loss);
        for (size_t p = 0; p < model.params().size(); ++p) {
            const Tensor& grad = g.grad(param_vars[p]);
            Tensor& theta = model.params()[p];
            for (long i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
        }
        if (entropy_trace) entropy_trace->push_back(softmax_entropy_value(model.forward(z)));
    }
    return model;
}

// -- checkpointing -----------------------------------------------------------

inline json model_to_json(const Model& model, bool frozen = false) {
    json arch;
    arch["partition"] = model.spec().partition;
    arch["layers"] = json::array();
    for (const auto& l : model.spec().layers)
        arch["layers"].push_back({{"in", l.in_channels},
                                  {"out", l.out_channels},
                                  {"kernel", l.kernel},
                                  {"act", act_name(l.act)}});
    json j;
    j["schema_version"] = 1;
    j["kind"] = "model";
    j["frozen"] = frozen;
    j["arch"] = arch;
    j["params"] = json::array();
    for (const auto& p : model.params()) {
        json t;
        t["shape"] = p.shape();
        t["data"] = p.vec();
        j["params"].push_back(t);
    }
    return j;
}

inline Model model_from_json(const json& j) {
    check(j.value("schema_version", 0) == 1, "checkpoint: unsupported schema_version");
    ModelSpec spec;
    spec.partition = j.at("arch").at("partition").get<int>();
    for (const auto& l : j.at("arch").at("layers"))
        spec.layers.push_back({l.at("in").get<int>(), l.at("out").get<int>(),
                               l.at("kernel").get<int>(),
                               act_from_name(l.at("act").get<std::string>())});
    Model m(spec);
    const auto& params = j.at("params");
    check(params.size() == m.params().size(), "checkpoint: parameter count mismatch");
    for (size_t i = 0; i < m.params().size(); ++i) {
        const auto shape = params[i].at("shape").get<std::vector<int>>();
        check(shape == m.params()[i].shape(), "checkpoint: parameter shape mismatch");
        const auto data = params[i].at("data").get<std::vector<double>>();
        check(static_cast<long>(data.size()) == m.params()[i].size(),
              "checkpoint: parameter data length mismatch");
        for (long k = 0; k < m.params()[i].size(); ++k) m.params()[i][k] = data[static_cast<size_t>(k)];
    }
    return m;
}

inline void save_checkpoint(const TrainState& st, const fs::path& path) {
    json j = model_to_json(st.model);
    j["kind"] = "train_state";
    j["step"] = st.step;
    json opt;
    opt["step"] = st.opt.step;
    opt["m"] = json::array();
    opt["v"] = json::array();
    for (const auto& t : st.opt.m) opt["m"].push_back(t.vec());
    for (const auto& t : st.opt.v) opt["v"].push_back(t.vec());
    j["optimizer"] = opt;
    json hist = json::array();
    for (const auto& r : st.history.records)
        hist.push_back({{"step", r.step},
                        {"lr", r.lr},
                        {"train_loss", r.train_loss},
                        {"val_loss_full", r.val_loss_full},
                        {"val_loss_mask10", r.val_loss_mask10},
                        {"val_loss_mask01", r.val_loss_mask01},
                        {"val_dice", r.val_dice},
                        {"ood_dice", r.ood_dice}});
    j["history"] = hist;
    j["warnings"] = st.history.warnings;
    atomic_write(path, j.dump(2) + "\n");
}

inline TrainState load_checkpoint(const fs::path& path) {
    json j = parse_json_file(path);
    check(j.value("kind", "") == "train_state", "not a training checkpoint");
    TrainState st;
    st.model = model_from_json(j);
    st.step = j.at("step").get<long>();
    st.opt = OptimizerState::like(st.model);
    st.opt.step = j.at("optimizer").at("step").get<long>();
    const auto& jm = j.at("optimizer").at("m");
    const auto& jv = j.at("optimizer").at("v");
    check(jm.size() == st.opt.m.size() && jv.size() == st.opt.v.size(),
          "checkpoint: optimizer state mismatch");
    for (size_t i = 0; i < st.opt.m.size(); ++i) {
        const auto mdata = jm[i].get<std::vector<double>>();
        const auto vdata = jv[i].get<std::vector<double>>();
        check(static_cast<long>(mdata.size()) == st.opt.m[i].size(), "optimizer m size mismatch");
        check(static_cast<long>(vdata.size()) == st.opt.v[i].size(), "optimizer v size mismatch");
        for (long k = 0; k < st.opt.m[i].size(); ++k) {
            st.opt.m[i][k] = mdata[static_cast<size_t>(k)];
            st.opt.v[i][k] = vdata[static_cast<size_t>(k)];
        }
    }
    for (const auto& r : j.at("history")) {
        HistoryRecord rec;
        rec.step = r.at("step").get<long>();
        rec.lr = r.at("lr").get<double>();
        rec.train_loss = r.at("train_loss").get<double>();
        rec.val_loss_full = r.at("val_loss_full").get<double>();
        rec.val_loss_mask10 = r.at("val_loss_mask10").get<double>();
        rec.val_loss_mask01 = r.at("val_loss_mask01").get<double>();
        rec.val_dice = r.at("val_dice").get<double>();
        rec.ood_dice = r.at("ood_dice").is_null()
                           ? std::numeric_limits<double>::quiet_NaN()
                           : r.at("ood_dice").get<double>();
        st.history.records.push_back(rec);
    }
    st.history.warnings = j.value("warnings", std::vector<std::string>{});
    return st;
}

}  // namespace dropgen
