#pragma once

#include <cmath>
#include <vector>

#include "dropgen/graph.hpp"
#include "dropgen/model.hpp"
#include "dropgen/tensor.hpp"

namespace dropgen {

enum class LossKind { cross_entropy, dice_cross_entropy };

inline std::string loss_name(LossKind k) {
    return k == LossKind::cross_entropy ? "ce" : "dice_ce";
}

inline LossKind loss_from_name(const std::string& s) {
    if (s == "ce") return LossKind::cross_entropy;
    if (s == "dice_ce") return LossKind::dice_cross_entropy;
    contract_fail("unknown loss: " + s);
}

constexpr double kDiceSmooth = 1e-5;

// Value-path cross entropy (nats), mean over batch and positions.
inline double softmax_cross_entropy_value(const Tensor& logits, const IntTensor& labels) {
    check(logits.rank() == 3, "cross entropy expects [B, K, L] logits");
    check(labels.rank() == 2 && labels.dim(0) == logits.dim(0) &&
              labels.dim(1) == logits.dim(2),
          "cross entropy label shape mismatch");
    check_labels_in_range(labels, logits.dim(1));
    Tensor p = kernels::softmax(logits);
    double loss = 0.0;
    for (int n = 0; n < logits.dim(0); ++n)
        for (int l = 0; l < logits.dim(2); ++l) loss -= std::log(p(n, labels(n, l), l));
    return loss / (static_cast<double>(logits.dim(0)) * logits.dim(2));
}

inline double softmax_entropy_value(const Tensor& logits) {
    Tensor p = kernels::softmax(logits);
    double total = 0.0;
    for (long i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) total -= p[i] * std::log(p[i]);
    return total / (static_cast<double>(logits.dim(0)) * logits.dim(2));
}

inline double soft_dice_loss_value(const Tensor& logits, const IntTensor& labels,
                                   double smooth = kDiceSmooth) {
    Tensor p = kernels::softmax(logits);
    const int batch = p.dim(0), classes = p.dim(1), length = p.dim(2);
    check_labels_in_range(labels, classes);
    std::vector<double> inter(static_cast<size_t>(classes), 0.0);
    std::vector<double> psum(static_cast<size_t>(classes), 0.0);
    std::vector<double> tsum(static_cast<size_t>(classes), 0.0);
    for (int n = 0; n < batch; ++n)
        for (int l = 0; l < length; ++l) {
            const int t = labels(n, l);
            tsum[static_cast<size_t>(t)] += 1.0;
            for (int c = 0; c < classes; ++c) {
                psum[static_cast<size_t>(c)] += p(n, c, l);
                if (c == t) inter[static_cast<size_t>(c)] += p(n, c, l);
            }
        }
    double dice_sum = 0.0;
    for (int c = 0; c < classes; ++c)
        dice_sum += (2.0 * inter[static_cast<size_t>(c)] + smooth) /
                    (psum[static_cast<size_t>(c)] + tsum[static_cast<size_t>(c)] + smooth);
    return 1.0 - dice_sum / classes;
}

// The configured training loss, value path. Dice+CE is equally weighted.
inline double loss_value(LossKind kind, const Tensor& logits, const IntTensor& labels) {
    const double ce = softmax_cross_entropy_value(logits, labels);
    if (kind == LossKind::cross_entropy) return ce;
    return 0.5 * ce + 0.5 * soft_dice_loss_value(logits, labels);
}

// Graph-path counterpart of loss_value.
inline Var loss_graph(Graph& g, LossKind kind, Var logits, const IntTensor& labels) {
    Var ce = g.softmax_cross_entropy(logits, labels);
    if (kind == LossKind::cross_entropy) return ce;
    Var probs = g.softmax(logits);
    Var dice = g.soft_dice_loss(probs, labels, kDiceSmooth);
    return g.add(g.scale(ce, 0.5), g.scale(dice, 0.5));
}

// Argmax over the channel dim; ties break to the lowest class index.
inline IntTensor argmax_channels(const Tensor& logits) {
    check(logits.rank() == 3, "argmax expects [B, K, L]");
    IntTensor out({logits.dim(0), logits.dim(2)});
    for (int n = 0; n < logits.dim(0); ++n)
        for (int l = 0; l < logits.dim(2); ++l) {
            int best = 0;
            double best_v = logits(n, 0, l);
            for (int c = 1; c < logits.dim(1); ++c)
                if (logits(n, c, l) > best_v) {
                    best_v = logits(n, c, l);
                    best = c;
                }
            out(n, l) = best;
        }
    return out;
}

struct DiceResult {
    std::vector<double> per_class;    // valid where `defined` is true
    std::vector<bool> defined;        // false when the class is absent from both
    double mean = 0.0;
};

// Hard-label Dice with counts pooled over batch and positions. Classes absent
// from both prediction and truth are excluded from the mean by default, or
// counted as 1.0 when `empty_as_one` is set.
inline DiceResult dice_score(const IntTensor& pred, const IntTensor& truth, int num_classes,
                             bool empty_as_one = false) {
    check(pred.shape() == truth.shape(), "dice shape mismatch");
    check_labels_in_range(pred, num_classes);
    check_labels_in_range(truth, num_classes);
    std::vector<double> inter(static_cast<size_t>(num_classes), 0.0);
    std::vector<double> psum(static_cast<size_t>(num_classes), 0.0);
    std::vector<double> tsum(static_cast<size_t>(num_classes), 0.0);
    for (long i = 0; i < pred.size(); ++i) {
        psum[static_cast<size_t>(pred[i])] += 1.0;
        tsum[static_cast<size_t>(truth[i])] += 1.0;
        if (pred[i] == truth[i]) inter[static_cast<size_t>(pred[i])] += 1.0;
    }
    DiceResult r;
    r.per_class.assign(static_cast<size_t>(num_classes), 0.0);
    r.defined.assign(static_cast<size_t>(num_classes), false);
    double total = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        const double denom = psum[static_cast<size_t>(c)] + tsum[static_cast<size_t>(c)];
        if (denom == 0.0) {
            if (empty_as_one) {
                r.per_class[static_cast<size_t>(c)] = 1.0;
                r.defined[static_cast<size_t>(c)] = true;
                total += 1.0;
                ++counted;
            }
            continue;
        }
        const double d = 2.0 * inter[static_cast<size_t>(c)] / denom;
        r.per_class[static_cast<size_t>(c)] = d;
        r.defined[static_cast<size_t>(c)] = true;
        total += d;
        ++counted;
    }
    r.mean = counted > 0 ? total / counted : 0.0;
    return r;
}

}  // namespace dropgen
