#include <sstream>

#include <gtest/gtest.h>

#include "dfid/nn_core.hpp"

using namespace dfid;
using namespace dfid::nn;

namespace {

Layer make_layer(MatrixXd w, VectorXd b, Activation a) { return Layer{std::move(w), std::move(b), a}; }

Batch random_batch(Index n, Index d, Rng& rng) {
    Batch b;
    b.inputs = standard_normal_matrix(n, d, rng);
    return b;
}

}  // namespace

TEST(Forward, IdentityLinearLayer) {
    DenseNet net({make_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::linear)});
    VectorXd y = net.forward(VectorXd{{1.0, 2.0}});
    EXPECT_EQ(y, (VectorXd{{1.0, 2.0}}));
}

TEST(Forward, ReluClampsNegatives) {
    DenseNet net({make_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::relu)});
    EXPECT_EQ(net.forward(VectorXd{{-1.0, 2.0}}), (VectorXd{{0.0, 2.0}}));
}

TEST(Forward, HandMultiply) {
    MatrixXd w{{1, 1}, {0, 1}};
    DenseNet net({make_layer(w, VectorXd{{0.5, 0.0}}, Activation::linear)});
    EXPECT_EQ(net.forward(VectorXd{{1.0, 1.0}}), (VectorXd{{2.5, 1.0}}));
}

TEST(Forward, RejectsDimensionMismatch) {
    DenseNet net({make_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::linear)});
    EXPECT_THROW(net.forward(VectorXd::Zero(3)), ConfigError);
}

TEST(DenseNetShape, RejectsUnchainedLayers) {
    std::vector<Layer> layers{make_layer(MatrixXd::Zero(3, 2), VectorXd::Zero(3), Activation::tanh),
                              make_layer(MatrixXd::Zero(1, 4), VectorXd::Zero(1), Activation::linear)};
    EXPECT_THROW(DenseNet(std::move(layers)), ConfigError);
}

TEST(Backprop, ScalarChainRule) {
    // y = w x, L = (y - t)^2 with w = 1, x = 2, t = 0: dL/dw = 2 (w x - t) x = 8.
    DenseNet net({make_layer(MatrixXd::Constant(1, 1, 1.0), VectorXd::Zero(1), Activation::linear)});
    Batch b;
    b.inputs = MatrixXd::Constant(1, 1, 2.0);
    b.targets = MatrixXd::Zero(1, 1);
    GradSet g = backprop_grads(net, mse_tail(), b);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_DOUBLE_EQ(g[0][0], 8.0);
    EXPECT_DOUBLE_EQ(g[1][0], 4.0);
}

TEST(Backprop, ConstantLossGivesZeroGradient) {
    // The second output does not enter the loss, so its row of weights gets nothing.
    Rng rng(3);
    DenseNet net = DenseNet::glorot({3, 2}, {Activation::linear}, rng);
    LossTail first_only{"first", [](const VectorXd& out, const Batch&, Index, VectorXd* dout) {
                            if (dout) *dout = VectorXd{{2.0 * out[0], 0.0}};
                            return out[0] * out[0];
                        }};
    Batch b = random_batch(4, 3, rng);
    GradSet g = backprop_grads(net, first_only, b);
    Eigen::Map<MatrixXd> dw(g[0].data(), 2, 3);
    EXPECT_EQ(dw.row(1).norm(), 0.0);
    EXPECT_EQ(g[1][1], 0.0);
}

TEST(Backprop, FrozenPrefixHasNoGradients) {
    Rng rng(5);
    DenseNet net = DenseNet::glorot({4, 5, 3}, {Activation::tanh, Activation::linear}, rng, 1);
    Batch b = random_batch(3, 4, rng);
    b.targets = standard_normal_matrix(3, 3, rng);
    GradSet g = backprop_grads(net, mse_tail(), b);
    EXPECT_EQ(g.size(), 2u);
    EXPECT_EQ(g[0].size(), 15);
}

TEST(Backprop, NonFiniteReportsLayer) {
    std::vector<Layer> layers{make_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::tanh),
                              make_layer(MatrixXd::Constant(2, 2, std::numeric_limits<double>::infinity()),
                                         VectorXd::Zero(2), Activation::linear)};
    DenseNet net(std::move(layers));
    try {
        net.forward(VectorXd{{0.0, 1.0}});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
    }
}

TEST(GradCheck, LinearMseIsTight) {
    Rng rng(11);
    DenseNet net = DenseNet::glorot({5, 3}, {Activation::linear}, rng);
    Batch b = random_batch(6, 5, rng);
    b.targets = standard_normal_matrix(6, 3, rng);
    EXPECT_LT(grad_check(make_objective(net, mse_tail(), b)), 1e-6);
}

TEST(GradCheck, RandomNetsAllTails) {
    const Activation acts[] = {Activation::linear, Activation::relu, Activation::tanh};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Activation hidden = acts[seed % 3];
        for (int tail_kind = 0; tail_kind < 3; ++tail_kind) {
            DenseNet net;
            Batch b;
            // redraw until relu units sit at least 1e-3 from their kinks
            for (int attempt = 0;; ++attempt) {
                const Index out = tail_kind == 1 ? 1 : 3;
                net = DenseNet::glorot({4, 6, out}, {hidden, Activation::linear}, rng);
                b = random_batch(5, 4, rng);
                if (hidden != Activation::relu || relu_kink_margin(net, b.inputs) >= 1e-3) break;
                ASSERT_LT(attempt, 200);
            }
            LossTail tail;
            if (tail_kind == 0) {
                tail = mse_tail();
                b.targets = standard_normal_matrix(5, 3, rng);
            } else if (tail_kind == 1) {
                tail = logistic_tail();
                b.targets = MatrixXd(5, 1);
                for (Index r = 0; r < 5; ++r) b.targets(r, 0) = r % 2;
            } else {
                tail = softmax_tail();
                b.targets = MatrixXd(5, 1);
                for (Index r = 0; r < 5; ++r) b.targets(r, 0) = r % 3;
            }
            EXPECT_LT(grad_check(make_objective(net, tail, b)), 1e-4)
                << "seed " << seed << " tail " << tail.name << " hidden " << to_string(hidden);
        }
    }
}

TEST(GradCheck, DetectsCorruptedGradient) {
    Rng rng(2);
    DenseNet net = DenseNet::glorot({3, 2}, {Activation::linear}, rng);
    Batch b = random_batch(4, 3, rng);
    b.targets = standard_normal_matrix(4, 2, rng);
    const double err = grad_check(make_objective(net, mse_tail(), b), 1e-5, [](GradSet& g) {
        for (auto& v : g) v *= 1.1;
    });
    // |1.1g - g| / (1.1|g|) = 1/11
    EXPECT_NEAR(err, 0.1 / 1.1, 1e-4);
}

TEST(GradCheck, RejectsNonPositiveEps) {
    Rng rng(2);
    DenseNet net = DenseNet::glorot({3, 2}, {Activation::linear}, rng);
    Batch b = random_batch(2, 3, rng);
    b.targets = MatrixXd::Zero(2, 2);
    EXPECT_THROW(grad_check(make_objective(net, mse_tail(), b), 0.0), ConfigError);
}

TEST(Optimizer, SgdArithmetic) {
    VectorXd p{{1.0}};
    std::vector<ParamView> params{{p.data(), 1}};
    auto opt = Optimizer::sgd(0.1);
    opt.step(params, GradSet{VectorXd{{2.0}}});
    EXPECT_DOUBLE_EQ(p[0], 0.8);
}

TEST(Optimizer, ZeroGradientLeavesParams) {
    for (auto opt : {Optimizer::sgd(0.1), Optimizer::adam(0.01)}) {
        VectorXd p{{1.5, -2.0}};
        std::vector<ParamView> params{{p.data(), 2}};
        for (int i = 0; i < 3; ++i) opt.step(params, GradSet{VectorXd::Zero(2)});
        EXPECT_EQ(p, (VectorXd{{1.5, -2.0}}));
    }
}

TEST(Optimizer, AdamFirstStep) {
    // m_hat = g, v_hat = g^2, so the first update is lr * g / (|g| + eps).
    VectorXd p{{1.0}};
    std::vector<ParamView> params{{p.data(), 1}};
    auto opt = Optimizer::adam(0.001, 0.9, 0.999);
    opt.step(params, GradSet{VectorXd{{1.0}}});
    EXPECT_NEAR(1.0 - p[0], 0.001, 1e-10);
    EXPECT_EQ(opt.state().first_moment.size(), 1u);
    EXPECT_EQ(opt.state().first_moment[0].size(), 1);
}

TEST(Optimizer, ShapeMismatchRejected) {
    VectorXd p{{1.0, 2.0}};
    std::vector<ParamView> params{{p.data(), 2}};
    auto opt = Optimizer::sgd(0.1);
    EXPECT_THROW(opt.step(params, GradSet{VectorXd::Zero(3)}), ConfigError);
}

TEST(Optimizer, FrozenPrefixImmutableUnderTraining) {
    for (bool adam : {false, true}) {
        Rng rng(9);
        DenseNet net = DenseNet::glorot({4, 6, 6, 2}, {Activation::tanh, Activation::relu, Activation::linear}, rng, 2);
        const DenseNet before = net;
        Batch b = random_batch(8, 4, rng);
        b.targets = standard_normal_matrix(8, 2, rng);
        auto opt = adam ? Optimizer::adam(0.01) : Optimizer::sgd(0.05);
        auto params = net.trainable_params();
        for (int i = 0; i < 25; ++i) opt.step(params, backprop_grads(net, mse_tail(), b));
        for (std::size_t k = 0; k < 2; ++k) {
            EXPECT_EQ(0, std::memcmp(before.layers()[k].weight.data(), net.layers()[k].weight.data(),
                                     sizeof(double) * net.layers()[k].weight.size()));
            EXPECT_EQ(0, std::memcmp(before.layers()[k].bias.data(), net.layers()[k].bias.data(),
                                     sizeof(double) * net.layers()[k].bias.size()));
        }
        EXPECT_FALSE(before == net);
    }
}

TEST(Optimizer, TrainingIsDeterministic) {
    auto run = [] {
        Rng rng(21);
        DenseNet net = DenseNet::glorot({5, 4, 5}, {Activation::tanh, Activation::linear}, rng);
        Batch b = random_batch(16, 5, rng);
        auto opt = Optimizer::adam(0.01);
        auto params = net.trainable_params();
        for (int i = 0; i < 40; ++i) opt.step(params, backprop_grads(net, mse_tail(), b));
        return net;
    };
    EXPECT_TRUE(run() == run());
}

TEST(Losses, EuclideanDistance) {
    VectorXd a{{1.0, 1.0, 1.0}};
    EXPECT_EQ(euclidean_distance(a, a), 0.0);
    EXPECT_DOUBLE_EQ(euclidean_distance(VectorXd{{0.0, 0.0}}, VectorXd{{3.0, 4.0}}), 5.0);
    EXPECT_NEAR(euclidean_distance(a, VectorXd{{2.0, 3.0, 4.0}}), 3.7416573867739413, 1e-12);
    EXPECT_THROW(euclidean_distance(a, VectorXd::Zero(2)), ConfigError);
}

TEST(Losses, ContrastiveExamples) {
    EXPECT_EQ(contrastive_loss(0.0, 0, 2.0), 0.0);
    EXPECT_EQ(contrastive_loss(2.5, 1, 2.0), 0.0);
    EXPECT_DOUBLE_EQ(contrastive_loss(0.5, 1, 2.0), 2.25);
}

TEST(Losses, HingeExamples) {
    EXPECT_EQ(hinge_sq_loss(60.0, 50.0), 0.0);
    EXPECT_EQ(hinge_sq_loss(40.0, 50.0), 100.0);
    EXPECT_EQ(hinge_sq_loss(0.0, 50.0), 2500.0);
}

TEST(Losses, MseExamples) {
    VectorXd a{{1.0, 2.0}};
    EXPECT_EQ(mse_loss(a, a), 0.0);
    EXPECT_EQ(mse_loss(VectorXd{{0.0, 0.0}}, VectorXd{{1.0, 1.0}}), 1.0);
    EXPECT_EQ(mse_loss(a, VectorXd{{2.0, 4.0}}), 2.5);
}

TEST(Losses, ClosedFormsOnDenseGrid) {
    for (int yi = 0; yi <= 1; ++yi)
        for (double m = 0.25; m <= 4.0; m += 0.25)
            for (double d = 0.0; d <= 6.0; d += 0.05) {
                const double expect =
                    yi == 0 ? d * d : (d < m ? (m - d) * (m - d) : 0.0);
                EXPECT_DOUBLE_EQ(contrastive_loss(d, yi, m), expect);
                EXPECT_DOUBLE_EQ(hinge_sq_loss(d, m), d < m ? (m - d) * (m - d) : 0.0);
                const bool zero = (yi == 0 && d == 0.0) || (yi == 1 && d >= m);
                EXPECT_EQ(contrastive_loss(d, yi, m) == 0.0, zero);
                // derivatives against central differences away from the hinge point
                if (std::abs(d - m) > 1e-3 && d > 1e-3) {
                    const double h = 1e-6;
                    const double cd = (contrastive_loss(d + h, yi, m) - contrastive_loss(d - h, yi, m)) / (2 * h);
                    EXPECT_NEAR(contrastive_loss_grad(d, yi, m), cd, 1e-6);
                    const double hd = (hinge_sq_loss(d + h, m) - hinge_sq_loss(d - h, m)) / (2 * h);
                    EXPECT_NEAR(hinge_sq_grad(d, m), hd, 1e-6);
                }
            }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Rng rng(4);
    DenseNet net = DenseNet::glorot({6, 5, 3}, {Activation::relu, Activation::tanh}, rng, 1);
    net.mutable_layers()[1].bias = standard_normal_vector(3, rng);
    std::stringstream ss;
    write_checkpoint(ss, net);
    DenseNet back = read_checkpoint(ss);
    EXPECT_TRUE(back == net);
    EXPECT_EQ(back.frozen_prefix_len(), 1u);
}

TEST(Checkpoint, HeaderLayout) {
    MatrixXd w{{1.0, 2.0}};
    DenseNet net({make_layer(w, VectorXd{{-0.5}}, Activation::tanh)});
    std::stringstream ss;
    write_checkpoint(ss, net);
    const std::string bytes = ss.str();
    ASSERT_EQ(bytes.size(), 8u + 4 + 4 + 12 + 3 * 8);
    EXPECT_EQ(bytes.substr(0, 8), "DFIDNET1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);   // layer count
    EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 2);  // in
    EXPECT_EQ(static_cast<unsigned char>(bytes[20]), 1);  // out
    EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 2);  // tanh tag
    double first;
    std::memcpy(&first, bytes.data() + 28, 8);
    EXPECT_EQ(first, 1.0);
}

TEST(Checkpoint, RejectsGarbage) {
    std::stringstream ss("not a checkpoint at all");
    EXPECT_THROW(read_checkpoint(ss), IoError);
}
