#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dropgen/tensor.hpp"

namespace dropgen {

namespace kernels {

// Shared forward kernels. The plain inference path and the autodiff graph both
// call these, so eval and training produce bitwise-identical activations.

// x: [B, C, L], w: [O, C, k] (k odd, zero 'same' padding), b: [O] -> [B, O, L]
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.rank() == 3, "conv1d expects [B, C, L] input");
    check(w.rank() == 3, "conv1d expects [O, C, k] kernel");
    const int batch = x.dim(0), in_ch = x.dim(1), length = x.dim(2);
    const int out_ch = w.dim(0), k = w.dim(2);
    check(w.dim(1) == in_ch, "conv1d channel mismatch");
    check(k % 2 == 1, "conv1d kernel size must be odd");
    check(b.rank() == 1 && b.dim(0) == out_ch, "conv1d bias shape mismatch");
    const int half = k / 2;
    Tensor y({batch, out_ch, length});
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < out_ch; ++o)
            for (int l = 0; l < length; ++l) {
                double acc = b[o];
                for (int c = 0; c < in_ch; ++c)
                    for (int j = 0; j < k; ++j) {
                        int pos = l + j - half;
                        if (pos < 0 || pos >= length) continue;
                        acc += w(o, c, j) * x(n, c, pos);
                    }
                y(n, o, l) = acc;
            }
    return y;
}

inline void conv1d_backward(const Tensor& x, const Tensor& w, const Tensor& gy,
                            Tensor& gx, Tensor& gw, Tensor& gb) {
    const int batch = x.dim(0), in_ch = x.dim(1), length = x.dim(2);
    const int out_ch = w.dim(0), k = w.dim(2);
    const int half = k / 2;
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < out_ch; ++o)
            for (int l = 0; l < length; ++l) {
                const double g = gy(n, o, l);
                gb[o] += g;
                for (int c = 0; c < in_ch; ++c)
                    for (int j = 0; j < k; ++j) {
                        int pos = l + j - half;
                        if (pos < 0 || pos >= length) continue;
                        gw(o, c, j) += g * x(n, c, pos);
                        gx(n, c, pos) += g * w(o, c, j);
                    }
            }
}

// Numerically stabilized softmax over the channel dim of [B, K, L].
inline Tensor softmax(const Tensor& logits) {
    check(logits.rank() == 3, "softmax expects [B, K, L]");
    const int batch = logits.dim(0), classes = logits.dim(1), length = logits.dim(2);
    Tensor p({batch, classes, length});
    for (int n = 0; n < batch; ++n)
        for (int l = 0; l < length; ++l) {
            double mx = logits(n, 0, l);
            for (int c = 1; c < classes; ++c) mx = std::max(mx, logits(n, c, l));
            double z = 0.0;
            for (int c = 0; c < classes; ++c) {
                double e = std::exp(logits(n, c, l) - mx);
                p(n, c, l) = e;
                z += e;
            }
            for (int c = 0; c < classes; ++c) p(n, c, l) /= z;
        }
    return p;
}

inline Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (long i = 0; i < y.size(); ++i)
        if (y[i] < 0.0) y[i] = 0.0;
    return y;
}

inline Tensor tanh(const Tensor& x) {
    Tensor y = x;
    for (long i = 0; i < y.size(); ++i) y[i] = std::tanh(y[i]);
    return y;
}

// Multiplies channel c of [B, C, L] by factors[c] ([C]) or factors(n, c)
// ([B, C]).
inline Tensor channel_scale(const Tensor& x, const Tensor& factors) {
    check(x.rank() == 3, "channel_scale expects [B, C, L]");
    const bool per_sample = factors.rank() == 2;
    check((per_sample && factors.dim(0) == x.dim(0) && factors.dim(1) == x.dim(1)) ||
              (factors.rank() == 1 && factors.dim(0) == x.dim(1)),
          "channel_scale shape mismatch");
    Tensor y = x;
    for (int n = 0; n < x.dim(0); ++n)
        for (int c = 0; c < x.dim(1); ++c) {
            const double f = per_sample ? factors(n, c) : factors[c];
            for (int l = 0; l < x.dim(2); ++l) y(n, c, l) *= f;
        }
    return y;
}

}  // namespace kernels

struct Var {
    int id = -1;
};

// Tape-style reverse-mode graph over Tensor nodes. Nodes are appended in
// evaluation order, so the reverse of creation order is a topological order
// for the backward sweep.
class Graph {
public:
    Var leaf(Tensor value, bool needs_grad) {
        return push(std::move(value), needs_grad, nullptr);
    }

    const Tensor& value(Var v) const { return nodes_[check_id(v)].value; }
    const Tensor& grad(Var v) const { return nodes_[check_id(v)].grad; }
    Tensor& grad_mut(Var v) { return nodes_[check_id(v)].grad; }

    Var add(Var a, Var b) {
        check(value(a).same_shape(value(b)), "add shape mismatch");
        Tensor y = value(a);
        y += value(b);
        return push(std::move(y), needs(a) || needs(b), [a, b](Graph& g, int self) {
            const Tensor& gy = g.nodes_[self].grad;
            g.accumulate(a, gy);
            g.accumulate(b, gy);
        });
    }

    Var scale(Var a, double s) {
        Tensor y = value(a);
        y *= s;
        return push(std::move(y), needs(a), [a, s](Graph& g, int self) {
            Tensor gy = g.nodes_[self].grad;
            gy *= s;
            g.accumulate(a, gy);
        });
    }

    Var sum(Var a) {
        double total = 0.0;
        for (long i = 0; i < value(a).size(); ++i) total += value(a)[i];
        Tensor y({1});
        y[0] = total;
        return push(std::move(y), needs(a), [a](Graph& g, int self) {
            const double g0 = g.nodes_[self].grad[0];
            Tensor gx(g.value(a).shape());
            gx.fill(g0);
            g.accumulate(a, gx);
        });
    }

    Var relu(Var a) {
        Tensor y = kernels::relu(value(a));
        return push(std::move(y), needs(a), [a](Graph& g, int self) {
            const Tensor& x = g.value(a);
            Tensor gx = g.nodes_[self].grad;
            for (long i = 0; i < gx.size(); ++i)
                if (x[i] <= 0.0) gx[i] = 0.0;  // subgradient at 0 is 0
            g.accumulate(a, gx);
        });
    }

    Var tanh_act(Var a) {
        Tensor y = kernels::tanh(value(a));
        const int self_id = static_cast<int>(nodes_.size());
        return push(std::move(y), needs(a), [a, self_id](Graph& g, int self) {
            const Tensor& y2 = g.nodes_[self_id].value;
            Tensor gx = g.nodes_[self].grad;
            for (long i = 0; i < gx.size(); ++i) gx[i] *= (1.0 - y2[i] * y2[i]);
            g.accumulate(a, gx);
        });
    }

    Var conv1d(Var x, Var w, Var b) {
        Tensor y = kernels::conv1d(value(x), value(w), value(b));
        return push(std::move(y), needs(x) || needs(w) || needs(b),
                    [x, w, b](Graph& g, int self) {
                        const Tensor& gy = g.nodes_[self].grad;
                        Tensor gx(g.value(x).shape());
                        Tensor gw(g.value(w).shape());
                        Tensor gb(g.value(b).shape());
                        kernels::conv1d_backward(g.value(x), g.value(w), gy, gx, gw, gb);
                        g.accumulate(x, gx);
                        g.accumulate(w, gw);
                        g.accumulate(b, gb);
                    });
    }

    Var channel_scale(Var x, Tensor factors) {
        Tensor y = kernels::channel_scale(value(x), factors);
        return push(std::move(y), needs(x), [x, factors](Graph& g, int self) {
            Tensor gx = kernels::channel_scale(g.nodes_[self].grad, factors);
            g.accumulate(x, gx);
        });
    }

    Var softmax(Var logits) {
        Tensor p = kernels::softmax(value(logits));
        const int self_id = static_cast<int>(nodes_.size());
        return push(std::move(p), needs(logits), [logits, self_id](Graph& g, int self) {
            const Tensor& p2 = g.nodes_[self_id].value;
            const Tensor& gy = g.nodes_[self].grad;
            const int batch = p2.dim(0), classes = p2.dim(1), length = p2.dim(2);
            Tensor gx(p2.shape());
            for (int n = 0; n < batch; ++n)
                for (int l = 0; l < length; ++l) {
                    double inner = 0.0;
                    for (int c = 0; c < classes; ++c) inner += gy(n, c, l) * p2(n, c, l);
                    for (int c = 0; c < classes; ++c)
                        gx(n, c, l) = p2(n, c, l) * (gy(n, c, l) - inner);
                }
            g.accumulate(logits, gx);
        });
    }

    // Mean over batch and positions of -log softmax(logits)[label], in nats.
    Var softmax_cross_entropy(Var logits, const IntTensor& labels) {
        const Tensor& z = value(logits);
        check(z.rank() == 3, "cross entropy expects [B, K, L] logits");
        check(labels.rank() == 2 && labels.dim(0) == z.dim(0) && labels.dim(1) == z.dim(2),
              "cross entropy label shape mismatch");
        check_labels_in_range(labels, z.dim(1));
        Tensor p = kernels::softmax(z);
        const int batch = z.dim(0), length = z.dim(2);
        const double denom = static_cast<double>(batch) * length;
        double loss = 0.0;
        for (int n = 0; n < batch; ++n)
            for (int l = 0; l < length; ++l)
                loss -= std::log(p(n, labels(n, l), l));
        Tensor y({1});
        y[0] = loss / denom;
        Tensor probs = std::move(p);
        return push(std::move(y), needs(logits),
                    [logits, probs, labels, denom](Graph& g, int self) {
                        const double g0 = g.nodes_[self].grad[0];
                        Tensor gx = probs;
                        for (int n = 0; n < labels.dim(0); ++n)
                            for (int l = 0; l < labels.dim(1); ++l)
                                gx(n, labels(n, l), l) -= 1.0;
                        gx *= g0 / denom;
                        g.accumulate(logits, gx);
                    });
    }

    // Mean over batch and positions of the softmax prediction entropy (nats).
    Var softmax_entropy(Var logits) {
        const Tensor& z = value(logits);
        check(z.rank() == 3, "entropy expects [B, K, L] logits");
        Tensor p = kernels::softmax(z);
        const int batch = z.dim(0), classes = z.dim(1), length = z.dim(2);
        const double denom = static_cast<double>(batch) * length;
        double total = 0.0;
        for (int n = 0; n < batch; ++n)
            for (int l = 0; l < length; ++l)
                for (int c = 0; c < classes; ++c) {
                    double q = p(n, c, l);
                    if (q > 0.0) total -= q * std::log(q);
                }
        Tensor y({1});
        y[0] = total / denom;
        Tensor probs = std::move(p);
        return push(std::move(y), needs(logits), [logits, probs, denom](Graph& g, int self) {
            const double g0 = g.nodes_[self].grad[0];
            const int batch = probs.dim(0), classes = probs.dim(1), length = probs.dim(2);
            Tensor gx(probs.shape());
            for (int n = 0; n < batch; ++n)
                for (int l = 0; l < length; ++l) {
                    double row_entropy = 0.0;
                    for (int c = 0; c < classes; ++c) {
                        double q = probs(n, c, l);
                        if (q > 0.0) row_entropy -= q * std::log(q);
                    }
                    for (int c = 0; c < classes; ++c) {
                        double q = probs(n, c, l);
                        double lg = q > 0.0 ? std::log(q) : 0.0;
                        gx(n, c, l) = -q * (lg + row_entropy) * g0 / denom;
                    }
                }
            g.accumulate(logits, gx);
        });
    }

    // Soft Dice loss on class probabilities: 1 - mean_c of the smoothed ratio.
    Var soft_dice_loss(Var probs, const IntTensor& labels, double smooth) {
        const Tensor& p = value(probs);
        check(p.rank() == 3, "soft dice expects [B, K, L] probabilities");
        check(labels.rank() == 2 && labels.dim(0) == p.dim(0) && labels.dim(1) == p.dim(2),
              "soft dice label shape mismatch");
        const int batch = p.dim(0), classes = p.dim(1), length = p.dim(2);
        check_labels_in_range(labels, classes);
        std::vector<double> inter(classes, 0.0), psum(classes, 0.0), tsum(classes, 0.0);
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
        std::vector<double> num(classes), den(classes);
        for (int c = 0; c < classes; ++c) {
            num[static_cast<size_t>(c)] = 2.0 * inter[static_cast<size_t>(c)] + smooth;
            den[static_cast<size_t>(c)] =
                psum[static_cast<size_t>(c)] + tsum[static_cast<size_t>(c)] + smooth;
            dice_sum += num[static_cast<size_t>(c)] / den[static_cast<size_t>(c)];
        }
        Tensor y({1});
        y[0] = 1.0 - dice_sum / classes;
        return push(std::move(y), needs(probs),
                    [probs, labels, num, den, classes](Graph& g, int self) {
                        const double g0 = g.nodes_[self].grad[0];
                        const Tensor& p2 = g.value(probs);
                        Tensor gx(p2.shape());
                        for (int n = 0; n < p2.dim(0); ++n)
                            for (int l = 0; l < p2.dim(2); ++l) {
                                const int t = labels(n, l);
                                for (int c = 0; c < classes; ++c) {
                                    const double dnum = (c == t) ? 2.0 : 0.0;
                                    const double d =
                                        (dnum * den[static_cast<size_t>(c)] -
                                         num[static_cast<size_t>(c)]) /
                                        (den[static_cast<size_t>(c)] * den[static_cast<size_t>(c)]);
                                    gx(n, c, l) = -g0 * d / classes;
                                }
                            }
                        g.accumulate(probs, gx);
                    });
    }

    // 0.5 * sum((x - target)^2)
    Var half_sse(Var x, const Tensor& target) {
        check(value(x).same_shape(target), "half_sse shape mismatch");
        double loss = 0.0;
        const Tensor& xv = value(x);
        for (long i = 0; i < xv.size(); ++i) {
            const double d = xv[i] - target[i];
            loss += 0.5 * d * d;
        }
        Tensor y({1});
        y[0] = loss;
        return push(std::move(y), needs(x), [x, target](Graph& g, int self) {
            const double g0 = g.nodes_[self].grad[0];
            const Tensor& xv = g.value(x);
            Tensor gx(xv.shape());
            for (long i = 0; i < xv.size(); ++i) gx[i] = g0 * (xv[i] - target[i]);
            g.accumulate(x, gx);
        });
    }

    // Reverse sweep from a scalar loss node.
    void backward(Var loss) {
        Node& root = nodes_[check_id(loss)];
        check(root.value.size() == 1, "backward requires a scalar loss node");
        for (auto& n : nodes_) n.grad.fill(0.0);
        root.grad[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
            if (nodes_[static_cast<size_t>(i)].backprop)
                nodes_[static_cast<size_t>(i)].backprop(*this, i);
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Graph&, int)> backprop;
    };

    size_t check_id(Var v) const {
        check(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "invalid graph node id");
        return static_cast<size_t>(v.id);
    }

    bool needs(Var v) const { return nodes_[check_id(v)].needs_grad; }

    void accumulate(Var v, const Tensor& g) {
        Node& n = nodes_[check_id(v)];
        if (!n.needs_grad) return;
        n.grad += g;
    }

    Var push(Tensor value, bool needs_grad, std::function<void(Graph&, int)> backprop) {
        Node n;
        n.grad = Tensor(value.shape());
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

}  // namespace dropgen
