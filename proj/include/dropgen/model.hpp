#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dropgen/graph.hpp"
#include "dropgen/rng.hpp"
#include "dropgen/tensor.hpp"

namespace dropgen {

enum class Act { identity, relu, tanh };

inline std::string act_name(Act a) {
    switch (a) {
        case Act::identity: return "identity";
        case Act::relu: return "relu";
        case Act::tanh: return "tanh";
    }
    return "identity";
}

inline Act act_from_name(const std::string& s) {
    if (s == "identity") return Act::identity;
    if (s == "relu") return Act::relu;
    if (s == "tanh") return Act::tanh;
    contract_fail("unknown activation: " + s);
}

struct LayerSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;  // odd; 1 = affine over channels
    Act act = Act::identity;
};

// Architecture description. Parameter shapes are a deterministic function of
// this struct. `partition` is the count of unstable input channels: the first
// layer's kernel columns split into W_u = W[:, :partition, :] and
// W_s = W[:, partition:, :]. Auxiliary nets (extractors) whose input has no
// unstable block use partition 0.
struct ModelSpec {
    std::vector<LayerSpec> layers;
    int partition = 0;

    void validate() const {
        check(!layers.empty(), "model needs at least one layer");
        check(partition >= 0 && partition < layers.front().in_channels,
              "partition must split the first layer's input channels");
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            check(l.in_channels > 0 && l.out_channels > 0, "layer channels must be positive");
            check(l.kernel > 0 && l.kernel % 2 == 1, "layer kernel must be odd");
            if (i > 0)
                check(l.in_channels == layers[i - 1].out_channels,
                      "layer channel chain mismatch");
        }
    }
};

// Builds the standard per-position predictor used in the experiments:
// input -> hidden conv/ReLU blocks -> class logits.
inline ModelSpec make_mlp_spec(int in_channels, int partition, int hidden, int depth,
                               int classes, int kernel = 1) {
    ModelSpec spec;
    spec.partition = partition;
    int in = in_channels;
    for (int i = 0; i < depth; ++i) {
        spec.layers.push_back({in, hidden, kernel, Act::relu});
        in = hidden;
    }
    spec.layers.push_back({in, classes, kernel, Act::identity});
    spec.validate();
    return spec;
}

// Per-parameter gradients, shape-aligned with Model::params(). Provides the
// first-layer kernel slices over unstable/stable input channels.
struct GradientBundle {
    std::vector<Tensor> grads;
    int partition = 0;

    void check_finite() const {
        for (size_t i = 0; i < grads.size(); ++i)
            check(grads[i].all_finite(),
                  "non-finite gradient in parameter " + std::to_string(i));
    }

    Tensor first_layer_unstable() const {
        check(partition > 0, "model has no unstable block");
        return slice_first_kernel(0, partition);
    }
    Tensor first_layer_stable() const {
        check(partition > 0, "model has no unstable block");
        return slice_first_kernel(partition, grads.front().dim(1));
    }

private:
    Tensor slice_first_kernel(int c0, int c1) const {
        const Tensor& w = grads.front();  // [O, C, k]
        Tensor out({w.dim(0), c1 - c0, w.dim(2)});
        for (int o = 0; o < w.dim(0); ++o)
            for (int c = c0; c < c1; ++c)
                for (int j = 0; j < w.dim(2); ++j) out(o, c - c0, j) = w(o, c, j);
        return out;
    }
};

// Layered differentiable predictor h_theta. Parameters are stored flat as
// [W0, b0, W1, b1, ...]; W0's input-channel axis carries the (W_u, W_s) split.
class Model {
public:
    Model() = default;

    explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        for (const auto& l : spec_.layers) {
            params_.emplace_back(
                Tensor({l.out_channels, l.in_channels, l.kernel}));
            params_.emplace_back(Tensor({l.out_channels}));
        }
    }

    // He-style init scaled by `init_scale`; small scales start the network
    // near zero so feature pathways grow by gradient signal alone.
    static Model random_init(ModelSpec spec, uint64_t seed, double init_scale = 1.0) {
        Model m(std::move(spec));
        Rng rng = stream_rng(seed, StreamTag::init);
        for (size_t i = 0; i < m.spec_.layers.size(); ++i) {
            const auto& l = m.spec_.layers[i];
            const double scale =
                init_scale * std::sqrt(2.0 / static_cast<double>(l.in_channels * l.kernel));
            Tensor& w = m.params_[2 * i];
            for (long j = 0; j < w.size(); ++j) w[j] = scale * rng.normal();
            // biases start at zero
        }
        return m;
    }

    const ModelSpec& spec() const { return spec_; }
    int input_channels() const { return spec_.layers.front().in_channels; }
    int output_channels() const { return spec_.layers.back().out_channels; }
    int partition() const { return spec_.partition; }

    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }

    Tensor first_layer_unstable() const { return slice_first(0, spec_.partition); }
    Tensor first_layer_stable() const {
        return slice_first(spec_.partition, spec_.layers.front().in_channels);
    }

    // Plain inference pass. `layer_masks`, when given, multiplies the output
    // channels of every non-final layer by the mask factors (the all-layers
    // dropout location); entry i applies after layer i's nonlinearity.
    Tensor forward(const Tensor& batch,
                   const std::vector<Tensor>* layer_masks = nullptr) const {
        check_input(batch);
        Tensor h = batch;
        for (size_t i = 0; i < spec_.layers.size(); ++i) {
            h = kernels::conv1d(h, params_[2 * i], params_[2 * i + 1]);
            h = apply_act(h, spec_.layers[i].act);
            if (layer_masks && i + 1 < spec_.layers.size())
                h = kernels::channel_scale(h, (*layer_masks)[i]);
        }
        return h;
    }

    // Graph pass for training; fills `param_vars` aligned with params().
    Var forward_graph(Graph& g, const Tensor& batch, std::vector<Var>& param_vars,
                      const std::vector<Tensor>* layer_masks = nullptr) const {
        check_input(batch);
        param_vars.clear();
        for (const auto& p : params_) param_vars.push_back(g.leaf(p, true));
        Var h = g.leaf(batch, false);
        for (size_t i = 0; i < spec_.layers.size(); ++i) {
            h = g.conv1d(h, param_vars[2 * i], param_vars[2 * i + 1]);
            switch (spec_.layers[i].act) {
                case Act::identity: break;
                case Act::relu: h = g.relu(h); break;
                case Act::tanh: h = g.tanh_act(h); break;
            }
            if (layer_masks && i + 1 < spec_.layers.size())
                h = g.channel_scale(h, (*layer_masks)[i]);
        }
        return h;
    }

    GradientBundle collect_grads(const Graph& g, const std::vector<Var>& param_vars) const {
        GradientBundle bundle;
        bundle.partition = spec_.partition;
        for (Var v : param_vars) bundle.grads.push_back(g.grad(v));
        bundle.check_finite();
        return bundle;
    }

    // FNV-1a over the raw parameter bytes; used by frozen-extractor checks.
    uint64_t checksum() const {
        uint64_t h = 1469598103934665603ULL;
        for (const auto& p : params_)
            for (long i = 0; i < p.size(); ++i) {
                const double v = p[i];
                const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
                for (size_t b = 0; b < sizeof(double); ++b) {
                    h ^= bytes[b];
                    h *= 1099511628211ULL;
                }
            }
        return h;
    }

private:
    static Tensor apply_act(const Tensor& x, Act a) {
        switch (a) {
            case Act::identity: return x;
            case Act::relu: return kernels::relu(x);
            case Act::tanh: return kernels::tanh(x);
        }
        return x;
    }

    Tensor slice_first(int c0, int c1) const {
        const Tensor& w = params_.front();
        Tensor out({w.dim(0), c1 - c0, w.dim(2)});
        for (int o = 0; o < w.dim(0); ++o)
            for (int c = c0; c < c1; ++c)
                for (int j = 0; j < w.dim(2); ++j) out(o, c - c0, j) = w(o, c, j);
        return out;
    }

    void check_input(const Tensor& batch) const {
        check(batch.rank() == 3, "model input must be [B, C, L]");
        check(batch.dim(1) == input_channels(),
              "batch channel count does not match model input channels");
    }

    ModelSpec spec_;
    std::vector<Tensor> params_;
};

}  // namespace dropgen
