#pragma once

#include <algorithm>
#include <cmath>

#include "dropgen/losses.hpp"
#include "dropgen/model.hpp"

namespace dropgen {

// Reverse-mode gradients of the given loss at the model's current parameters.
inline GradientBundle loss_gradients(const Model& model, const Tensor& batch,
                                     const IntTensor& labels, LossKind kind) {
    Graph g;
    std::vector<Var> param_vars;
    Var logits = model.forward_graph(g, batch, param_vars);
    Var loss = loss_graph(g, kind, logits, labels);
    g.backward(loss);
    return model.collect_grads(g, param_vars);
}

inline double loss_at(const Model& model, const Tensor& batch, const IntTensor& labels,
                      LossKind kind) {
    return loss_value(kind, model.forward(batch), labels);
}

// Compares reverse-mode gradients against central finite differences for every
// parameter entry. Returns the maximum relative error with denominator
// max(|analytic|, |numeric|, 1e-8). `fault_scale` multiplies the analytic
// gradient before the comparison; 1.0 checks the real thing, anything else is
// a negative control that the comparison must flag.
inline double grad_check(Model model, const Tensor& batch, const IntTensor& labels,
                         LossKind kind, double epsilon, double fault_scale = 1.0) {
    check(epsilon > 0.0, "grad_check epsilon must be positive");
    GradientBundle analytic = loss_gradients(model, batch, labels, kind);
    double max_rel = 0.0;
    auto& params = model.params();
    for (size_t p = 0; p < params.size(); ++p) {
        for (long i = 0; i < params[p].size(); ++i) {
            const double saved = params[p][i];
            params[p][i] = saved + epsilon;
            const double up = loss_at(model, batch, labels, kind);
            params[p][i] = saved - epsilon;
            const double down = loss_at(model, batch, labels, kind);
            params[p][i] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic.grads[p][i] * fault_scale;
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace dropgen
