#pragma once
// Minimal dense-network engine: forward/backward passes, loss primitives,
// optimizers, central-difference gradient verification and a binary
// checkpoint format. All numerics are double precision and single threaded;
// reductions run in a fixed order so training is bit-reproducible.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dfid/error.hpp"
#include "dfid/random.hpp"

namespace dfid::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation : std::uint8_t { linear = 0, relu = 1, tanh = 2 };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::linear: return "linear";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

inline Activation activation_from_string(std::string_view s) {
    if (s == "linear") return Activation::linear;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct Layer {
    MatrixXd weight;  // [out x in]
    VectorXd bias;    // [out]
    Activation activation = Activation::linear;

    Index in() const { return weight.cols(); }
    Index out() const { return weight.rows(); }
};

// Mutable window onto one parameter tensor, flattened in Eigen storage order.
struct ParamView {
    double* data = nullptr;
    Index size = 0;

    Eigen::Map<VectorXd> map() const { return {data, size}; }
};

// Gradients aligned one-to-one with a list of ParamViews.
using GradSet = std::vector<VectorXd>;

inline GradSet zero_grads(std::span<const ParamView> params) {
    GradSet g;
    g.reserve(params.size());
    for (const auto& p : params) g.push_back(VectorXd::Zero(p.size));
    return g;
}

inline void append(std::vector<ParamView>& dst, const std::vector<ParamView>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
}

struct ForwardTrace {
    std::vector<VectorXd> inputs;  // input to each layer
    std::vector<VectorXd> pre;     // pre-activation of each layer
    VectorXd output;
};

namespace detail {

inline void activate(Activation a, VectorXd& v) {
    switch (a) {
        case Activation::linear: break;
        case Activation::relu: v = v.cwiseMax(0.0); break;
        case Activation::tanh: v = v.array().tanh().matrix(); break;
    }
}

inline VectorXd activation_derivative(Activation a, const VectorXd& pre) {
    switch (a) {
        case Activation::linear: return VectorXd::Ones(pre.size());
        case Activation::relu: return (pre.array() > 0.0).cast<double>().matrix();
        case Activation::tanh: {
            VectorXd t = pre.array().tanh().matrix();
            return (1.0 - t.array().square()).matrix();
        }
    }
    return VectorXd::Ones(pre.size());
}

}  // namespace detail

class DenseNet {
public:
    DenseNet() = default;

    explicit DenseNet(std::vector<Layer> layers, std::size_t frozen_prefix_len = 0)
        : layers_(std::move(layers)), frozen_(frozen_prefix_len) {
        if (layers_.empty()) throw ConfigError("DenseNet needs at least one layer");
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (l.bias.size() != l.out())
                throw ConfigError("layer " + std::to_string(i) + ": bias length does not match output size");
            if (i > 0 && layers_[i - 1].out() != l.in())
                throw ConfigError("layer " + std::to_string(i) + ": input size does not chain with previous layer");
        }
        if (frozen_ > layers_.size()) throw ConfigError("frozen prefix longer than the network");
    }

    // Glorot-uniform weights, zero biases. dims has one more entry than acts.
    static DenseNet glorot(std::span<const Index> dims, std::span<const Activation> acts, Rng& rng,
                           std::size_t frozen_prefix_len = 0) {
        if (dims.size() != acts.size() + 1 || acts.empty())
            throw ConfigError("glorot: need dims.size() == acts.size() + 1");
        std::vector<Layer> layers;
        for (std::size_t i = 0; i < acts.size(); ++i) {
            const Index fan_in = dims[i], fan_out = dims[i + 1];
            const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            std::uniform_real_distribution<double> u(-limit, limit);
            Layer l;
            l.weight.resize(fan_out, fan_in);
            for (Index c = 0; c < fan_in; ++c)
                for (Index r = 0; r < fan_out; ++r) l.weight(r, c) = u(rng);
            l.bias = VectorXd::Zero(fan_out);
            l.activation = acts[i];
            layers.push_back(std::move(l));
        }
        return DenseNet(std::move(layers), frozen_prefix_len);
    }

    static DenseNet glorot(std::initializer_list<Index> dims, std::initializer_list<Activation> acts, Rng& rng,
                           std::size_t frozen_prefix_len = 0) {
        std::vector<Index> d(dims);
        std::vector<Activation> a(acts);
        return glorot(std::span<const Index>(d), std::span<const Activation>(a), rng, frozen_prefix_len);
    }

    bool empty() const { return layers_.empty(); }
    Index input_size() const { return layers_.front().in(); }
    Index output_size() const { return layers_.back().out(); }
    std::size_t layer_count() const { return layers_.size(); }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& mutable_layers() { return layers_; }
    std::size_t frozen_prefix_len() const { return frozen_; }

    void set_frozen_prefix_len(std::size_t n) {
        if (n > layers_.size()) throw ConfigError("frozen prefix longer than the network");
        frozen_ = n;
    }

    VectorXd forward(const VectorXd& x) const { return forward_prefix(x, layers_.size()); }

    // Output of the first n layers (n == layer_count() gives forward()).
    VectorXd forward_prefix(const VectorXd& x, std::size_t n) const {
        check_input(x);
        VectorXd h = x;
        for (std::size_t i = 0; i < n && i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            h = l.weight * h + l.bias;
            detail::activate(l.activation, h);
            if (!h.allFinite()) throw NumericError("non-finite activation at layer " + std::to_string(i));
        }
        return h;
    }

    ForwardTrace trace(const VectorXd& x) const {
        check_input(x);
        ForwardTrace t;
        t.inputs.reserve(layers_.size());
        t.pre.reserve(layers_.size());
        VectorXd h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            t.inputs.push_back(h);
            VectorXd z = l.weight * h + l.bias;
            if (!z.allFinite()) throw NumericError("non-finite activation at layer " + std::to_string(i));
            t.pre.push_back(z);
            detail::activate(l.activation, z);
            h = std::move(z);
        }
        t.output = std::move(h);
        return t;
    }

    // Back-propagates dL/d(output). Gradients for trainable layers are
    // accumulated into grads[offset...] in trainable_params() order.
    // Returns dL/d(input).
    VectorXd backward(const ForwardTrace& t, const VectorXd& dout, GradSet* grads = nullptr,
                      std::size_t offset = 0) const {
        if (dout.size() != output_size()) throw ConfigError("backward: gradient length does not match output");
        VectorXd g = dout;
        for (std::size_t k = layers_.size(); k-- > 0;) {
            const auto& l = layers_[k];
            VectorXd delta = g.cwiseProduct(detail::activation_derivative(l.activation, t.pre[k]));
            if (!delta.allFinite()) throw NumericError("non-finite gradient at layer " + std::to_string(k));
            if (grads && k >= frozen_) {
                const std::size_t slot = offset + 2 * (k - frozen_);
                Eigen::Map<MatrixXd> dw((*grads)[slot].data(), l.out(), l.in());
                dw.noalias() += delta * t.inputs[k].transpose();
                (*grads)[slot + 1] += delta;
            }
            g = l.weight.transpose() * delta;
        }
        return g;
    }

    // Weight then bias of every non-frozen layer.
    std::vector<ParamView> trainable_params() {
        std::vector<ParamView> p;
        for (std::size_t k = frozen_; k < layers_.size(); ++k) {
            p.push_back({layers_[k].weight.data(), layers_[k].weight.size()});
            p.push_back({layers_[k].bias.data(), layers_[k].bias.size()});
        }
        return p;
    }

    std::size_t trainable_tensor_count() const { return 2 * (layers_.size() - frozen_); }

    GradSet zero_grads() const {
        GradSet g;
        for (std::size_t k = frozen_; k < layers_.size(); ++k) {
            g.push_back(VectorXd::Zero(layers_[k].weight.size()));
            g.push_back(VectorXd::Zero(layers_[k].bias.size()));
        }
        return g;
    }

    friend bool operator==(const DenseNet& a, const DenseNet& b) {
        if (a.frozen_ != b.frozen_ || a.layers_.size() != b.layers_.size()) return false;
        for (std::size_t i = 0; i < a.layers_.size(); ++i) {
            const auto& x = a.layers_[i];
            const auto& y = b.layers_[i];
            if (x.activation != y.activation || x.weight.rows() != y.weight.rows() ||
                x.weight.cols() != y.weight.cols())
                return false;
            if (std::memcmp(x.weight.data(), y.weight.data(), sizeof(double) * x.weight.size()) != 0) return false;
            if (std::memcmp(x.bias.data(), y.bias.data(), sizeof(double) * x.bias.size()) != 0) return false;
        }
        return true;
    }

private:
    void check_input(const VectorXd& x) const {
        if (layers_.empty()) throw ConfigError("forward on an empty network");
        if (x.size() != input_size())
            throw ConfigError("input length " + std::to_string(x.size()) + " does not match network input " +
                              std::to_string(input_size()));
    }

    std::vector<Layer> layers_;
    std::size_t frozen_ = 0;
};

// ---------------------------------------------------------------------------
// Loss primitives

inline double euclidean_distance(const VectorXd& a, const VectorXd& b) {
    if (a.size() != b.size()) throw ConfigError("euclidean_distance: length mismatch");
    return (a - b).norm();
}

// d/da of ||a - b||; zero at coincidence.
inline VectorXd distance_gradient(const VectorXd& a, const VectorXd& b) {
    VectorXd v = a - b;
    const double d = v.norm();
    if (d == 0.0) return VectorXd::Zero(v.size());
    return v / d;
}

// (1 - Y) d^2 + Y max(0, m - d)^2. Y = 1 marks a pair that should be far apart.
inline double contrastive_loss(double d, int y, double m) {
    const double hinge = std::max(0.0, m - d);
    return (1 - y) * d * d + y * hinge * hinge;
}

inline double contrastive_loss_grad(double d, int y, double m) {
    const double hinge = std::max(0.0, m - d);
    return (1 - y) * 2.0 * d - y * 2.0 * hinge;
}

inline double hinge_sq_loss(double d, double margin) {
    const double h = std::max(0.0, margin - d);
    return h * h;
}

inline double hinge_sq_grad(double d, double margin) { return -2.0 * std::max(0.0, margin - d); }

inline double mse_loss(const VectorXd& a, const VectorXd& b) {
    if (a.size() != b.size()) throw ConfigError("mse_loss: length mismatch");
    if (a.size() == 0) return 0.0;
    return (a - b).squaredNorm() / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Batches and single-network loss tails

struct Batch {
    MatrixXd inputs;   // [n x d]
    MatrixXd targets;  // [n x t]; empty means "reconstruct the input"

    Index size() const { return inputs.rows(); }

    void validate() const {
        if (inputs.rows() < 1) throw ConfigError("batch must have at least one row");
        if (!inputs.allFinite()) throw NumericError("batch contains non-finite inputs");
        if (targets.size() > 0 && targets.rows() != inputs.rows())
            throw ConfigError("batch targets row count does not match inputs");
    }
};

// Per-row loss on the network output. Writes dL/d(output) when dout is non-null.
struct LossTail {
    std::string name;
    std::function<double(const VectorXd& out, const Batch& batch, Index row, VectorXd* dout)> eval;
};

inline LossTail mse_tail() {
    return {"mse", [](const VectorXd& out, const Batch& b, Index row, VectorXd* dout) {
                VectorXd target = b.targets.size() > 0 ? VectorXd(b.targets.row(row).transpose())
                                                       : VectorXd(b.inputs.row(row).transpose());
                if (target.size() != out.size()) throw ConfigError("mse tail: target length mismatch");
                VectorXd diff = out - target;
                const double n = static_cast<double>(out.size());
                if (dout) *dout = 2.0 * diff / n;
                return diff.squaredNorm() / n;
            }};
}

// Binary cross-entropy on a single logit; targets(row, 0) in {0, 1}.
inline LossTail logistic_tail() {
    return {"logistic", [](const VectorXd& out, const Batch& b, Index row, VectorXd* dout) {
                const double z = out[0];
                const double y = b.targets(row, 0);
                const double p = 1.0 / (1.0 + std::exp(-z));
                if (dout) {
                    *dout = VectorXd::Zero(out.size());
                    (*dout)[0] = p - y;
                }
                // log(1 + e^z) - y z, stable in both tails
                const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
                return softplus - y * z;
            }};
}

// Softmax cross-entropy; targets(row, 0) is the class index.
inline LossTail softmax_tail() {
    return {"softmax", [](const VectorXd& out, const Batch& b, Index row, VectorXd* dout) {
                const auto cls = static_cast<Index>(b.targets(row, 0));
                if (cls < 0 || cls >= out.size()) throw ConfigError("softmax tail: class index out of range");
                const double mx = out.maxCoeff();
                VectorXd e = (out.array() - mx).exp().matrix();
                const double s = e.sum();
                if (dout) {
                    *dout = e / s;
                    (*dout)[cls] -= 1.0;
                }
                return std::log(s) + mx - out[cls];
            }};
}

inline double batch_loss(const DenseNet& net, const LossTail& tail, const Batch& batch) {
    batch.validate();
    double total = 0.0;
    for (Index r = 0; r < batch.size(); ++r)
        total += tail.eval(net.forward(batch.inputs.row(r).transpose()), batch, r, nullptr);
    return total / static_cast<double>(batch.size());
}

// Mean gradient of the tail over the batch, aligned with net.trainable_params().
// Frozen layers get no entries.
inline GradSet backprop_grads(const DenseNet& net, const LossTail& tail, const Batch& batch,
                              double* loss_out = nullptr) {
    batch.validate();
    GradSet g = net.zero_grads();
    double total = 0.0;
    VectorXd dout;
    for (Index r = 0; r < batch.size(); ++r) {
        auto t = net.trace(batch.inputs.row(r).transpose());
        total += tail.eval(t.output, batch, r, &dout);
        net.backward(t, dout, &g);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& v : g) v *= inv;
    if (loss_out) *loss_out = total * inv;
    return g;
}

// ---------------------------------------------------------------------------
// Objectives and gradient verification

// A scalar objective over an arbitrary parameter list. evaluate() returns the
// loss and, when given a GradSet, fills it (aligned with params, pre-zeroed).
struct Objective {
    std::vector<ParamView> params;
    std::function<double(GradSet*)> evaluate;
};

inline Objective make_objective(DenseNet& net, LossTail tail, Batch batch) {
    Objective obj;
    obj.params = net.trainable_params();
    obj.evaluate = [&net, tail = std::move(tail), batch = std::move(batch)](GradSet* g) {
        double loss = 0.0;
        if (!g) return batch_loss(net, tail, batch);
        *g = backprop_grads(net, tail, batch, &loss);
        return loss;
    };
    return obj;
}

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

// Max over all scalar parameters of |analytic - central difference| / max(|a|, |cd|, 1e-12).
// An optional hook lets tests tamper with the analytic gradient.
inline double grad_check(const Objective& obj, double eps = 1e-5,
                         const std::function<void(GradSet&)>& tamper = nullptr) {
    if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
    GradSet analytic = zero_grads(obj.params);
    obj.evaluate(&analytic);
    if (tamper) tamper(analytic);
    double worst = 0.0;
    for (std::size_t t = 0; t < obj.params.size(); ++t) {
        auto p = obj.params[t];
        for (Index i = 0; i < p.size; ++i) {
            const double saved = p.data[i];
            p.data[i] = saved + eps;
            const double up = obj.evaluate(nullptr);
            p.data[i] = saved - eps;
            const double down = obj.evaluate(nullptr);
            p.data[i] = saved;
            worst = std::max(worst, relative_error(analytic[t][i], (up - down) / (2.0 * eps)));
        }
    }
    return worst;
}

// Smallest |pre-activation| over relu units for the given inputs; used to keep
// finite differences away from kinks.
inline double relu_kink_margin(const DenseNet& net, const MatrixXd& inputs) {
    double margin = std::numeric_limits<double>::infinity();
    for (Index r = 0; r < inputs.rows(); ++r) {
        auto t = net.trace(inputs.row(r).transpose());
        for (std::size_t k = 0; k < net.layer_count(); ++k)
            if (net.layers()[k].activation == Activation::relu)
                margin = std::min(margin, t.pre[k].cwiseAbs().minCoeff());
    }
    return margin;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::sgd;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step = 0;
    std::vector<VectorXd> first_moment;
    std::vector<VectorXd> second_moment;
};

class Optimizer {
public:
    explicit Optimizer(OptimizerState s) : s_(std::move(s)) {}

    static Optimizer sgd(double lr) {
        OptimizerState s;
        s.kind = OptimizerKind::sgd;
        s.lr = lr;
        return Optimizer(std::move(s));
    }

    static Optimizer adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8) {
        OptimizerState s;
        s.kind = OptimizerKind::adam;
        s.lr = lr;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.epsilon = epsilon;
        return Optimizer(std::move(s));
    }

    const OptimizerState& state() const { return s_; }

    void step(std::span<const ParamView> params, const GradSet& grads) {
        if (params.size() != grads.size()) throw ConfigError("optimizer: parameter/gradient count mismatch");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].size != grads[i].size()) throw ConfigError("optimizer: parameter/gradient shape mismatch");
        ++s_.step;
        if (s_.kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i].map() -= s_.lr * grads[i];
            return;
        }
        if (s_.first_moment.empty()) {
            for (const auto& p : params) {
                s_.first_moment.push_back(VectorXd::Zero(p.size));
                s_.second_moment.push_back(VectorXd::Zero(p.size));
            }
        }
        if (s_.first_moment.size() != params.size()) throw ConfigError("optimizer: accumulator count mismatch");
        const double t = static_cast<double>(s_.step);
        const double c1 = 1.0 - std::pow(s_.beta1, t);
        const double c2 = 1.0 - std::pow(s_.beta2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& m = s_.first_moment[i];
            auto& v = s_.second_moment[i];
            if (m.size() != params[i].size) throw ConfigError("optimizer: accumulator shape mismatch");
            m = s_.beta1 * m + (1.0 - s_.beta1) * grads[i];
            v = s_.beta2 * v + (1.0 - s_.beta2) * grads[i].cwiseProduct(grads[i]);
            auto p = params[i].map();
            p.array() -= s_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + s_.epsilon);
        }
    }

private:
    OptimizerState s_;
};

inline std::vector<Index> shuffled_indices(Index n, Rng& rng) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    // Fisher-Yates with an explicit draw so the permutation is library independent.
    for (Index i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<Index> pick(0, i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    return idx;
}

struct FitOptions {
    int epochs = 100;
    Index batch_size = 32;
    std::string stage = "fit";
};

// Minibatch training of a single net against a loss tail; returns the mean
// training loss of each epoch. A non-finite loss aborts with the epoch index.
inline std::vector<double> fit(DenseNet& net, const LossTail& tail, const Batch& data, Optimizer& opt,
                               const FitOptions& o, Rng& rng) {
    data.validate();
    if (o.epochs < 0 || o.batch_size < 1) throw ConfigError(o.stage + ": invalid epochs or batch size");
    const Index n = data.size();
    std::vector<double> history;
    auto params = net.trainable_params();
    Batch mb;
    for (int epoch = 0; epoch < o.epochs; ++epoch) {
        const auto order = shuffled_indices(n, rng);
        double total = 0.0;
        for (Index start = 0; start < n; start += o.batch_size) {
            const Index len = std::min(o.batch_size, n - start);
            mb.inputs.resize(len, data.inputs.cols());
            mb.targets.resize(data.targets.size() > 0 ? len : 0, data.targets.cols());
            for (Index r = 0; r < len; ++r) {
                const Index src = order[static_cast<std::size_t>(start + r)];
                mb.inputs.row(r) = data.inputs.row(src);
                if (data.targets.size() > 0) mb.targets.row(r) = data.targets.row(src);
            }
            double loss = 0.0;
            GradSet g;
            try {
                g = backprop_grads(net, tail, mb, &loss);
            } catch (const NumericError& e) {
                throw NumericError(o.stage + ": epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!std::isfinite(loss)) throw NumericError(o.stage + ": non-finite loss at epoch " + std::to_string(epoch));
            opt.step(params, g);
            total += loss * static_cast<double>(len);
        }
        history.push_back(total / static_cast<double>(n));
    }
    return history;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   magic   "DFIDNET1" (8 bytes)
//   u32     layer count L
//   u32     frozen prefix length
//   L x     { u32 in, u32 out, u32 activation tag }
//   L x     { f64 weight[out][in] row-major, f64 bias[out] }
//
// All integers and doubles little-endian.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("checkpoint truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

constexpr char kCheckpointMagic[8] = {'D', 'F', 'I', 'D', 'N', 'E', 'T', '1'};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const DenseNet& net) {
    os.write(detail::kCheckpointMagic, 8);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.layer_count()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.frozen_prefix_len()));
    for (const auto& l : net.layers()) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.in()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.out()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.activation));
    }
    for (const auto& l : net.layers()) {
        for (Index r = 0; r < l.out(); ++r)
            for (Index c = 0; c < l.in(); ++c) detail::write_le<double>(os, l.weight(r, c));
        for (Index r = 0; r < l.out(); ++r) detail::write_le<double>(os, l.bias[r]);
    }
    if (!os) throw IoError("failed writing checkpoint");
}

inline DenseNet read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw IoError("not a network checkpoint (bad magic)");
    const auto count = detail::read_le<std::uint32_t>(is);
    const auto frozen = detail::read_le<std::uint32_t>(is);
    if (count == 0 || count > 1024) throw IoError("checkpoint has implausible layer count");
    std::vector<Layer> layers(count);
    for (auto& l : layers) {
        const auto in = detail::read_le<std::uint32_t>(is);
        const auto out = detail::read_le<std::uint32_t>(is);
        const auto tag = detail::read_le<std::uint32_t>(is);
        if (tag > 2) throw IoError("checkpoint has unknown activation tag");
        l.weight.resize(out, in);
        l.bias.resize(out);
        l.activation = static_cast<Activation>(tag);
    }
    for (auto& l : layers) {
        for (Index r = 0; r < l.out(); ++r)
            for (Index c = 0; c < l.in(); ++c) l.weight(r, c) = detail::read_le<double>(is);
        for (Index r = 0; r < l.out(); ++r) l.bias[r] = detail::read_le<double>(is);
    }
    try {
        return DenseNet(std::move(layers), frozen);
    } catch (const ConfigError& e) {
        throw IoError(std::string("inconsistent checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const DenseNet& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_checkpoint(os, net);
}

inline DenseNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    return read_checkpoint(is);
}

}  // namespace dfid::nn
