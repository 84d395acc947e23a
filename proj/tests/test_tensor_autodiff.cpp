#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dropgen/grad_check.hpp"
#include "dropgen/losses.hpp"
#include "dropgen/model.hpp"
#include "dropgen/rng.hpp"

using namespace dropgen;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (long i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

IntTensor random_labels(int batch, int length, int classes, Rng& rng) {
    IntTensor y({batch, length});
    for (long i = 0; i < y.size(); ++i)
        y[i] = static_cast<int>(rng.below(static_cast<uint64_t>(classes)));
    return y;
}

// Independent straight-line recomputation of a k=1 conv stack (matrix multiply
// per position), deliberately not sharing any code with the library kernels.
std::vector<double> oracle_mlp_forward(const Model& m, const Tensor& x, int n, int l) {
    std::vector<double> h(static_cast<size_t>(x.dim(1)));
    for (int c = 0; c < x.dim(1); ++c) h[static_cast<size_t>(c)] = x(n, c, l);
    for (size_t layer = 0; layer < m.spec().layers.size(); ++layer) {
        const Tensor& w = m.params()[2 * layer];
        const Tensor& b = m.params()[2 * layer + 1];
        std::vector<double> out(static_cast<size_t>(w.dim(0)));
        for (int o = 0; o < w.dim(0); ++o) {
            double acc = b[o];
            for (int c = 0; c < w.dim(1); ++c) acc += w(o, c, 0) * h[static_cast<size_t>(c)];
            out[static_cast<size_t>(o)] = acc;
        }
        if (m.spec().layers[layer].act == Act::relu)
            for (auto& v : out) v = v > 0.0 ? v : 0.0;
        h = out;
    }
    return h;
}

}  // namespace

TEST(Tensor, InvariantsAndConstruction) {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.size(), 6);
    EXPECT_DOUBLE_EQ(t(1, 2), 6.0);
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
    EXPECT_THROW(Tensor::from({1}, {std::nan("")}), std::invalid_argument);
    EXPECT_THROW(Tensor::from({1}, {INFINITY}), std::invalid_argument);
    EXPECT_THROW(Tensor({0, 2}), std::invalid_argument);
}

TEST(Forward, IdentityAffineLayerIsIdentity) {
    // one affine layer, identity weights, zero bias, identity nonlinearity
    ModelSpec spec;
    spec.partition = 1;
    spec.layers.push_back({3, 3, 1, Act::identity});
    Model m(spec);
    for (int o = 0; o < 3; ++o) m.params()[0](o, o, 0) = 1.0;

    Rng rng(7);
    Tensor x = random_tensor({2, 3, 5}, rng);
    Tensor y = m.forward(x);
    ASSERT_TRUE(y.same_shape(x));
    for (long i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Forward, ZeroInputZeroBiasReluGivesZeroLogits) {
    Model m = Model::random_init(make_mlp_spec(3, 1, 8, 2, 4), 3);
    Tensor x({2, 3, 6});
    Tensor y = m.forward(x);
    for (long i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(Forward, MatchesScriptedRecomputationOracle) {
    Model m = Model::random_init(make_mlp_spec(3, 1, 6, 1, 4), 0);
    Rng rng(0);
    Tensor x = random_tensor({4, 3, 8}, rng);
    Tensor y = m.forward(x);
    for (int n = 0; n < 4; ++n)
        for (int l = 0; l < 8; ++l) {
            auto logits = oracle_mlp_forward(m, x, n, l);
            for (int c = 0; c < 4; ++c)
                EXPECT_NEAR(y(n, c, l), logits[static_cast<size_t>(c)], 1e-12);
        }
}

TEST(Forward, OutputLengthMatchesInputForWideKernels) {
    Model m = Model::random_init(make_mlp_spec(4, 2, 6, 2, 3, 3), 11);
    Rng rng(5);
    Tensor x = random_tensor({2, 4, 9}, rng);
    Tensor y = m.forward(x);
    EXPECT_EQ(y.dim(0), 2);
    EXPECT_EQ(y.dim(1), 3);
    EXPECT_EQ(y.dim(2), 9);
}

TEST(Forward, ShapeMismatchIsContractViolation) {
    Model m = Model::random_init(make_mlp_spec(3, 1, 4, 1, 2), 1);
    Tensor bad({2, 5, 6});
    EXPECT_THROW(m.forward(bad), std::invalid_argument);
}

TEST(Forward, DeterministicBitwise) {
    Model m = Model::random_init(make_mlp_spec(4, 2, 8, 2, 3, 3), 9);
    Rng rng(42);
    Tensor x = random_tensor({3, 4, 7}, rng);
    Tensor a = m.forward(x);
    Tensor b = m.forward(x);
    for (long i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Backward, SumOfParametersGivesUnitGradients) {
    Model m = Model::random_init(make_mlp_spec(3, 1, 4, 1, 2), 2);
    Graph g;
    std::vector<Var> pv;
    for (const auto& p : m.params()) pv.push_back(g.leaf(p, true));
    Var total = g.sum(pv[0]);
    for (size_t i = 1; i < pv.size(); ++i) total = g.add(total, g.sum(pv[i]));
    g.backward(total);
    for (Var v : pv) {
        const Tensor& grad = g.grad(v);
        for (long i = 0; i < grad.size(); ++i) EXPECT_DOUBLE_EQ(grad[i], 1.0);
    }
}

TEST(Backward, NonScalarLossIsContractViolation) {
    Graph g;
    Var x = g.leaf(Tensor({2, 2, 2}), true);
    EXPECT_THROW(g.backward(x), std::invalid_argument);
}

TEST(Backward, LinearLeastSquaresMatchesClosedForm) {
    // loss = 0.5 || W x - y ||^2, gradient (W x - y) x^T
    Rng rng(13);
    Tensor w = random_tensor({3, 4, 1}, rng);
    Tensor b({3});
    Tensor x = random_tensor({1, 4, 1}, rng);
    Tensor target = random_tensor({1, 3, 1}, rng);

    Graph g;
    Var wv = g.leaf(w, true);
    Var bv = g.leaf(b, true);
    Var xv = g.leaf(x, false);
    Var pred = g.conv1d(xv, wv, bv);
    Var loss = g.half_sse(pred, target);
    g.backward(loss);

    for (int o = 0; o < 3; ++o) {
        double residual = -target(0, o, 0);
        for (int c = 0; c < 4; ++c) residual += w(o, c, 0) * x(0, c, 0);
        for (int c = 0; c < 4; ++c)
            EXPECT_NEAR(g.grad(wv)(o, c, 0), residual * x(0, c, 0), 1e-12);
    }
}

TEST(Backward, StableGradientIsExactlyZeroUnderImageOnlyMask) {
    // batch with stable channels identically zero -> grad of W_s bitwise zero
    Model m = Model::random_init(make_mlp_spec(5, 2, 8, 2, 3, 3), 21);
    Rng rng(3);
    Tensor x = random_tensor({4, 5, 10}, rng);
    for (int n = 0; n < 4; ++n)
        for (int c = 2; c < 5; ++c)
            for (int l = 0; l < 10; ++l) x(n, c, l) = 0.0;
    IntTensor labels = random_labels(4, 10, 3, rng);

    GradientBundle grads = loss_gradients(m, x, labels, LossKind::cross_entropy);
    Tensor ws = grads.first_layer_stable();
    for (long i = 0; i < ws.size(); ++i) EXPECT_EQ(ws[i], 0.0);
    // and the unstable slice is generically nonzero
    EXPECT_GT(norm(grads.first_layer_unstable()), 0.0);
}

TEST(Backward, DeterministicBitwise) {
    Model m = Model::random_init(make_mlp_spec(4, 1, 6, 2, 3), 5);
    Rng rng(8);
    Tensor x = random_tensor({3, 4, 6}, rng);
    IntTensor labels = random_labels(3, 6, 3, rng);
    GradientBundle a = loss_gradients(m, x, labels, LossKind::cross_entropy);
    GradientBundle b = loss_gradients(m, x, labels, LossKind::cross_entropy);
    for (size_t p = 0; p < a.grads.size(); ++p)
        for (long i = 0; i < a.grads[p].size(); ++i)
            EXPECT_EQ(a.grads[p][i], b.grads[p][i]);
}

TEST(GradCheck, QuadraticLossIsExactUpToRoundoff) {
    // A linear model with half-SSE against a fixed target is quadratic in the
    // parameters, so central differences are exact up to roundoff.
    Rng rng(17);
    Tensor w = random_tensor({2, 3, 1}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor target = random_tensor({2, 2, 4}, rng);

    auto loss_of = [&](const Tensor& wt, const Tensor& bt) {
        Graph g;
        Var wv = g.leaf(wt, false);
        Var bv = g.leaf(bt, false);
        Var out = g.conv1d(g.leaf(x, false), wv, bv);
        return g.value(g.half_sse(out, target))[0];
    };

    Graph g;
    Var wv = g.leaf(w, true);
    Var bv = g.leaf(b, true);
    Var out = g.conv1d(g.leaf(x, false), wv, bv);
    g.backward(g.half_sse(out, target));

    const double eps = 1e-5;
    double max_rel = 0.0;
    for (long i = 0; i < w.size(); ++i) {
        Tensor wp = w, wm = w;
        wp[i] += eps;
        wm[i] -= eps;
        double numeric = (loss_of(wp, b) - loss_of(wm, b)) / (2 * eps);
        double a = g.grad(wv)[i];
        max_rel = std::max(max_rel,
                           std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
    }
    EXPECT_LT(max_rel, 1e-8);
}

TEST(GradCheck, TwoLayerReluAwayFromKinks) {
    Model m = Model::random_init(make_mlp_spec(3, 1, 8, 2, 4), 4);
    // push parameters away from activation kinks
    for (auto& p : m.params())
        for (long i = 0; i < p.size(); ++i)
            if (std::abs(p[i]) < 1e-3) p[i] = p[i] < 0 ? -1e-3 : 1e-3;
    Rng rng(6);
    Tensor x = random_tensor({3, 3, 5}, rng);
    IntTensor labels = random_labels(3, 5, 4, rng);
    EXPECT_LT(grad_check(m, x, labels, LossKind::cross_entropy, 1e-5), 1e-5);
}

TEST(GradCheck, InjectedFaultIsDetected) {
    Model m = Model::random_init(make_mlp_spec(3, 1, 6, 1, 3), 12);
    Rng rng(9);
    Tensor x = random_tensor({2, 3, 4}, rng);
    IntTensor labels = random_labels(2, 4, 3, rng);
    EXPECT_GT(grad_check(m, x, labels, LossKind::cross_entropy, 1e-5, 1.01), 1e-3);
}

TEST(GradCheck, RandomizedArchitecturesProperty) {
    // ten random small architectures, both loss kinds mixed
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng = stream_rng(seed, StreamTag::misc);
        const int in = 2 + static_cast<int>(rng.below(3));
        const int part = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(in - 1)));
        const int hidden = 4 + static_cast<int>(rng.below(5));
        const int depth = 1 + static_cast<int>(rng.below(2));
        const int classes = 2 + static_cast<int>(rng.below(3));
        const int kernel = rng.below(2) == 0 ? 1 : 3;
        Model m = Model::random_init(make_mlp_spec(in, part, hidden, depth, classes, kernel),
                                     seed + 100);
        for (auto& p : m.params())
            for (long i = 0; i < p.size(); ++i)
                if (std::abs(p[i]) < 1e-3) p[i] = p[i] < 0 ? -1e-3 : 1e-3;
        Tensor x = random_tensor({2, in, 6}, rng);
        IntTensor labels = random_labels(2, 6, classes, rng);
        LossKind kind = seed % 2 == 0 ? LossKind::cross_entropy : LossKind::dice_cross_entropy;
        EXPECT_LT(grad_check(m, x, labels, kind, 1e-5), 1e-4) << "seed " << seed;
    }
}

TEST(GradCheck, ExactZeroPropertyAcrossArchitectures) {
    // any batch with zero stable channels -> bitwise-zero stable slice
    for (uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng = stream_rng(seed, StreamTag::noise);
        const int in = 3 + static_cast<int>(rng.below(3));
        const int part = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(in - 1)));
        const int kernel = rng.below(2) == 0 ? 1 : 3;
        Model m = Model::random_init(make_mlp_spec(in, part, 6, 2, 3, kernel), seed);
        Tensor x = random_tensor({3, in, 8}, rng);
        for (int n = 0; n < 3; ++n)
            for (int c = part; c < in; ++c)
                for (int l = 0; l < 8; ++l) x(n, c, l) = 0.0;
        IntTensor labels = random_labels(3, 8, 3, rng);
        LossKind kind = seed % 2 == 0 ? LossKind::cross_entropy : LossKind::dice_cross_entropy;
        GradientBundle grads = loss_gradients(m, x, labels, kind);
        Tensor ws = grads.first_layer_stable();
        for (long i = 0; i < ws.size(); ++i)
            ASSERT_EQ(ws[i], 0.0) << "seed " << seed;
    }
}

TEST(Graph, TanhAndEntropyGradientsPassFiniteDifferences) {
    Rng rng(31);
    Tensor w = random_tensor({3, 2, 1}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor x = random_tensor({2, 2, 5}, rng);

    auto value_of = [&](const Tensor& wt) {
        Graph g;
        Var out = g.conv1d(g.leaf(x, false), g.leaf(wt, false), g.leaf(b, false));
        return g.value(g.softmax_entropy(g.tanh_act(out)))[0];
    };

    Graph g;
    Var wv = g.leaf(w, true);
    Var out = g.conv1d(g.leaf(x, false), wv, g.leaf(b, false));
    g.backward(g.softmax_entropy(g.tanh_act(out)));

    const double eps = 1e-6;
    for (long i = 0; i < w.size(); ++i) {
        Tensor wp = w, wm = w;
        wp[i] += eps;
        wm[i] -= eps;
        const double numeric = (value_of(wp) - value_of(wm)) / (2 * eps);
        EXPECT_NEAR(g.grad(wv)[i], numeric, 1e-6);
    }
}

TEST(Graph, ChannelScaleMasksGradientFlow)
{
    Rng rng(33);
    Tensor x = random_tensor({1, 3, 4}, rng);
    Tensor factors = Tensor::from({3}, {1.0, 0.0, 2.0});
    Graph g;
    Var xv = g.leaf(x, true);
    Var y = g.channel_scale(xv, factors);
    g.backward(g.sum(y));
    for (int l = 0; l < 4; ++l) {
        EXPECT_DOUBLE_EQ(g.grad(xv)(0, 0, l), 1.0);
        EXPECT_DOUBLE_EQ(g.grad(xv)(0, 1, l), 0.0);
        EXPECT_DOUBLE_EQ(g.grad(xv)(0, 2, l), 2.0);
    }
}
