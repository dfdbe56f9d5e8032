#pragma once
// Linear softmax probe: how much of a label is linearly recoverable from a
// representation.

#include <vector>

#include "dfid/nn_core.hpp"

namespace dfid::nn {

struct ProbeResult {
    double train_accuracy = 0;
    double test_accuracy = 0;
};

inline double classification_accuracy(const DenseNet& net, const MatrixXd& x, const std::vector<int>& y) {
    if (x.rows() != static_cast<Index>(y.size())) throw ConfigError("accuracy: row/label count mismatch");
    if (y.empty()) return 0.0;
    Index hits = 0;
    for (Index r = 0; r < x.rows(); ++r) {
        VectorXd out = net.forward(x.row(r).transpose());
        Index arg = 0;
        out.maxCoeff(&arg);
        hits += (arg == y[static_cast<std::size_t>(r)]);
    }
    return static_cast<double>(hits) / static_cast<double>(x.rows());
}

// Inputs are standardized with training statistics before fitting.
inline ProbeResult linear_probe(const MatrixXd& train_x, const std::vector<int>& train_y, const MatrixXd& test_x,
                                const std::vector<int>& test_y, int classes, std::uint64_t seed, int epochs = 200) {
    if (classes < 2) throw ConfigError("probe: need at least two classes");
    const VectorXd mean = train_x.colwise().mean().transpose();
    VectorXd sd = ((train_x.rowwise() - mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
    for (Index j = 0; j < sd.size(); ++j)
        if (sd[j] < 1e-12) sd[j] = 1.0;
    auto standardize = [&](const MatrixXd& m) {
        return MatrixXd(((m.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix());
    };
    Batch b;
    b.inputs = standardize(train_x);
    b.targets.resize(train_x.rows(), 1);
    for (Index r = 0; r < train_x.rows(); ++r) {
        const int c = train_y[static_cast<std::size_t>(r)];
        if (c < 0 || c >= classes) throw ConfigError("probe: label out of range");
        b.targets(r, 0) = c;
    }
    Rng rng(seed);
    auto net = DenseNet::glorot({train_x.cols(), static_cast<Index>(classes)}, {Activation::linear}, rng);
    auto opt = Optimizer::adam(1e-2);
    fit(net, softmax_tail(), b, opt, {epochs, 32, "probe"}, rng);
    return {classification_accuracy(net, b.inputs, train_y), classification_accuracy(net, standardize(test_x), test_y)};
}

}  // namespace dfid::nn
