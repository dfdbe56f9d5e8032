#pragma once
// Identity-aware feature extractor trained by teacher-student distillation.
//
// Teacher: a small authentic/deepfake classifier pretrained on its own pool;
// its penultimate layer, mapped through a fixed random adapter, is the
// distillation target. Student: a net whose first layer comes from an
// identity-classification pass and stays frozen; the rest is tuned with
//   alpha (L1 + L2) + beta L3
// on (authentic, deepfake) pairs of the same identity.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dfid/dataset_io.hpp"
#include "dfid/io.hpp"
#include "dfid/nn_core.hpp"
#include "dfid/probe.hpp"
#include "dfid/synth_data.hpp"

namespace dfid::features {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using synth::FaceSample;

// Per-coordinate input standardization used while training; folded into the
// first layer afterwards so the stored nets take raw inputs.
struct Standardizer {
    VectorXd mean;
    VectorXd sd;

    MatrixXd apply(const MatrixXd& x) const {
        return ((x.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix();
    }

    void fold_into(nn::Layer& first) const {
        first.weight = first.weight * sd.cwiseInverse().asDiagonal();
        first.bias -= first.weight * mean;
    }
};

inline Standardizer standardizer(const MatrixXd& x) {
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    s.sd = ((x.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
    for (Index j = 0; j < s.sd.size(); ++j)
        if (s.sd[j] < 1e-12) s.sd[j] = 1.0;
    return s;
}

// ---------------------------------------------------------------------------
// Teacher

struct TeacherConfig {
    std::vector<Index> hidden{32, 16};  // last entry is the penultimate feature width
    Index feature_len = 16;             // adapter output length F
    int epochs = 150;
    double lr = 3e-3;
    Index batch_size = 32;
    double heldout_fraction = 0.2;
    double accuracy_floor = 0.90;
};

struct TeacherNet {
    nn::DenseNet net;      // ... -> penultimate (tanh) -> 1 logit; fully frozen after pretraining
    MatrixXd adapter;      // [F x penultimate], fixed
    double heldout_accuracy = 0;

    std::size_t penultimate_depth() const { return net.layer_count() - 1; }
    Index penultimate_len() const { return net.layers()[penultimate_depth() - 1].out(); }

    VectorXd penultimate(const VectorXd& x) const { return net.forward_prefix(x, penultimate_depth()); }
    VectorXd features(const VectorXd& x) const { return adapter * penultimate(x); }
    double logit(const VectorXd& x) const { return net.forward(x)[0]; }
};

inline TeacherNet pretrain_teacher(const std::vector<FaceSample>& pool, const TeacherConfig& cfg, std::uint64_t seed) {
    if (pool.size() < 20) throw ConfigError("pretrain_teacher: pool too small");
    std::size_t n_auth = 0;
    for (const auto& s : pool) n_auth += s.authentic();
    const std::size_t n_fake = pool.size() - n_auth;
    if (n_auth == 0 || n_fake == 0) throw ConfigError("pretrain_teacher: pool needs both classes");
    const double imbalance = std::abs(static_cast<double>(n_auth) - static_cast<double>(n_fake)) /
                             static_cast<double>(std::max(n_auth, n_fake));
    if (imbalance > 0.10) throw ConfigError("pretrain_teacher: pool classes unbalanced by more than 10%");
    if (cfg.hidden.empty()) throw ConfigError("pretrain_teacher: need at least one hidden layer");

    const Index dim = pool.front().x.size();
    const Index n = static_cast<Index>(pool.size());
    Rng rng(derive_seed(seed, SeedTag::teacher));
    const auto order = nn::shuffled_indices(n, rng);
    const Index n_hold = std::max<Index>(1, static_cast<Index>(cfg.heldout_fraction * static_cast<double>(n)));
    const Index n_train = n - n_hold;
    nn::Batch train, hold;
    train.inputs.resize(n_train, dim);
    train.targets.resize(n_train, 1);
    hold.inputs.resize(n_hold, dim);
    hold.targets.resize(n_hold, 1);
    for (Index r = 0; r < n; ++r) {
        const auto& s = pool[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
        auto& b = r < n_train ? train : hold;
        const Index row = r < n_train ? r : r - n_train;
        b.inputs.row(row) = s.x.transpose();
        b.targets(row, 0) = s.authentic() ? 1.0 : 0.0;
    }

    std::vector<Index> dims{dim};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(1);
    std::vector<nn::Activation> acts(dims.size() - 1, nn::Activation::tanh);
    acts.back() = nn::Activation::linear;
    TeacherNet t;
    t.net = nn::DenseNet::glorot(std::span<const Index>(dims), std::span<const nn::Activation>(acts), rng);
    const auto st = standardizer(train.inputs);
    train.inputs = st.apply(train.inputs);
    auto opt = nn::Optimizer::adam(cfg.lr);
    nn::fit(t.net, nn::logistic_tail(), train, opt, {cfg.epochs, cfg.batch_size, "pretrain_teacher"}, rng);
    st.fold_into(t.net.mutable_layers().front());

    Index hits = 0;
    for (Index r = 0; r < n_hold; ++r)
        hits += (t.logit(hold.inputs.row(r).transpose()) > 0) == (hold.targets(r, 0) > 0.5);
    t.heldout_accuracy = static_cast<double>(hits) / static_cast<double>(n_hold);
    if (t.heldout_accuracy < cfg.accuracy_floor)
        throw NumericError("pretrain_teacher: held-out accuracy " + io::fmt(t.heldout_accuracy) + " below floor " +
                           io::fmt(cfg.accuracy_floor));
    t.net.set_frozen_prefix_len(t.net.layer_count());

    t.adapter = standard_normal_matrix(cfg.feature_len, t.penultimate_len(), rng) /
                std::sqrt(static_cast<double>(t.penultimate_len()));
    return t;
}

// Teacher file: teacher checkpoint followed by the adapter as a one-layer
// linear checkpoint; accuracy goes to a JSON sidecar.
inline void save_teacher(const TeacherNet& t, const io::fs::path& path) {
    if (path.has_parent_path()) io::ensure_dir(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    nn::write_checkpoint(os, t.net);
    nn::Layer l;
    l.weight = t.adapter;
    l.bias = VectorXd::Zero(t.adapter.rows());
    nn::write_checkpoint(os, nn::DenseNet({l}, 1));
    if (!os) throw IoError("write failed on " + path.string());
    nlohmann::json side = {{"heldout_accuracy", t.heldout_accuracy}};
    io::write_file(path.string() + ".json", side.dump(1) + "\n");
}

inline TeacherNet load_teacher(const io::fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    TeacherNet t;
    t.net = nn::read_checkpoint(is);
    auto adapter = nn::read_checkpoint(is);
    if (t.net.layer_count() < 2 || t.net.output_size() != 1 || adapter.layer_count() != 1 ||
        adapter.input_size() != t.penultimate_len())
        throw IoError(path.string() + ": not a teacher checkpoint");
    t.adapter = adapter.layers()[0].weight;
    t.net.set_frozen_prefix_len(t.net.layer_count());
    try {
        t.heldout_accuracy = nlohmann::json::parse(io::read_file(path.string() + ".json")).at("heldout_accuracy").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ".json: " + e.what());
    }
    return t;
}

// ---------------------------------------------------------------------------
// Student

struct StudentConfig {
    Index backbone = 48;  // frozen first layer width
    Index tail = 0;       // optional tunable hidden width; 0 means a linear head straight to F
    Index feature_len = 16;
    int backbone_epochs = 2;
    double backbone_lr = 3e-3;
};

struct StudentMeta {
    double init_l12 = 0;          // mean L1 + L2 at initialization
    double phase1_l12 = 0;        // after the last alpha > 0 phase
    double phase1_distance = 0;   // mean student authentic/deepfake distance after that phase
    double final_l12 = 0;
    double final_distance = 0;
    double init_distance = 0;
};

struct StudentNet {
    nn::DenseNet net;
    StudentMeta meta;

    Index feature_len() const { return net.output_size(); }
    VectorXd extract(const VectorXd& f) const { return net.forward(f); }
};

// Identity-classification pass; the first layer becomes the frozen backbone.
inline StudentNet init_student(const std::vector<FaceSample>& authentic, int identities, const StudentConfig& cfg,
                               std::uint64_t seed) {
    if (authentic.empty()) throw ConfigError("init_student: no samples");
    const Index dim = authentic.front().x.size();
    Rng rng(derive_seed(seed, SeedTag::student));
    nn::Batch b;
    b.inputs.resize(static_cast<Index>(authentic.size()), dim);
    b.targets.resize(static_cast<Index>(authentic.size()), 1);
    for (std::size_t i = 0; i < authentic.size(); ++i) {
        if (authentic[i].identity < 0 || authentic[i].identity >= identities)
            throw ConfigError("init_student: identity out of range");
        b.inputs.row(static_cast<Index>(i)) = authentic[i].x.transpose();
        b.targets(static_cast<Index>(i), 0) = authentic[i].identity;
    }
    const auto st = standardizer(b.inputs);
    b.inputs = st.apply(b.inputs);

    auto cls = nn::DenseNet::glorot({dim, cfg.backbone, static_cast<Index>(identities)},
                                    {nn::Activation::tanh, nn::Activation::linear}, rng);
    auto opt = nn::Optimizer::adam(cfg.backbone_lr);
    nn::fit(cls, nn::softmax_tail(), b, opt, {cfg.backbone_epochs, 32, "student backbone"}, rng);
    st.fold_into(cls.mutable_layers()[0]);

    auto head = cfg.tail > 0 ? nn::DenseNet::glorot({cfg.backbone, cfg.tail, cfg.feature_len},
                                                    {nn::Activation::tanh, nn::Activation::linear}, rng)
                             : nn::DenseNet::glorot({cfg.backbone, cfg.feature_len}, {nn::Activation::linear}, rng);
    std::vector<nn::Layer> layers{cls.layers()[0]};
    layers.insert(layers.end(), head.layers().begin(), head.layers().end());
    StudentNet s;
    s.net = nn::DenseNet(std::move(layers), 1);
    return s;
}

// ---------------------------------------------------------------------------
// Distillation losses

struct DistillLosses {
    double l1 = 0;
    double l2 = 0;
    double l3 = 0;
};

inline void check_lengths(const TeacherNet& t, const StudentNet& s) {
    if (t.adapter.rows() != s.feature_len())
        throw ConfigError("teacher adapter length " + std::to_string(t.adapter.rows()) +
                          " does not match student feature length " + std::to_string(s.feature_len()));
}

inline DistillLosses distill_losses_from_features(const VectorXd& t_auth, const VectorXd& t_df, const VectorXd& s_auth,
                                                  const VectorXd& s_df, double m_h) {
    if (t_auth.size() != s_auth.size() || t_df.size() != s_df.size() || s_auth.size() != s_df.size())
        throw ConfigError("distill_losses: feature length mismatch");
    DistillLosses l;
    l.l1 = (t_auth - s_auth).squaredNorm();
    l.l2 = (t_df - s_df).squaredNorm();
    l.l3 = nn::hinge_sq_loss((s_auth - s_df).norm(), m_h);
    return l;
}

inline DistillLosses distill_losses(const TeacherNet& t, const StudentNet& s, const VectorXd& f_auth,
                                    const VectorXd& f_df, double m_h) {
    check_lengths(t, s);
    return distill_losses_from_features(t.features(f_auth), t.features(f_df), s.extract(f_auth), s.extract(f_df), m_h);
}

struct PairSet {
    MatrixXd auth;       // [n x D]
    MatrixXd fake;       // [n x D]
    MatrixXd t_auth;     // teacher features, [n x F]
    MatrixXd t_fake;

    Index size() const { return auth.rows(); }
};

inline PairSet make_pairs(const TeacherNet& t, const std::vector<FaceSample>& auth, const std::vector<FaceSample>& fake) {
    if (auth.size() != fake.size() || auth.empty()) throw ConfigError("make_pairs: need equally many, nonzero pairs");
    const Index n = static_cast<Index>(auth.size()), dim = auth.front().x.size();
    PairSet p;
    p.auth.resize(n, dim);
    p.fake.resize(n, dim);
    p.t_auth.resize(n, t.adapter.rows());
    p.t_fake.resize(n, t.adapter.rows());
    for (Index i = 0; i < n; ++i) {
        const auto& a = auth[static_cast<std::size_t>(i)];
        const auto& d = fake[static_cast<std::size_t>(i)];
        if (!a.authentic() || d.authentic()) throw ConfigError("make_pairs: pair must be (authentic, deepfake)");
        if (a.identity != d.identity) throw ConfigError("make_pairs: pair spans two identities");
        p.auth.row(i) = a.x.transpose();
        p.fake.row(i) = d.x.transpose();
        p.t_auth.row(i) = t.features(a.x).transpose();
        p.t_fake.row(i) = t.features(d.x).transpose();
    }
    return p;
}

// Batch-mean of alpha (L1 + L2) + beta L3 over the given rows, with the
// gradient for the student's trainable tensors when g is non-null.
inline double composite_loss(const nn::DenseNet& student, const PairSet& p, const std::vector<Index>& rows,
                             double alpha, double beta, double m_h, nn::GradSet* g, DistillLosses* parts = nullptr) {
    if (g) *g = student.zero_grads();
    double total = 0;
    DistillLosses sum;
    for (Index r : rows) {
        auto ta = student.trace(p.auth.row(r).transpose());
        auto td = student.trace(p.fake.row(r).transpose());
        const VectorXd t_a = p.t_auth.row(r).transpose(), t_d = p.t_fake.row(r).transpose();
        auto l = distill_losses_from_features(t_a, t_d, ta.output, td.output, m_h);
        sum.l1 += l.l1;
        sum.l2 += l.l2;
        sum.l3 += l.l3;
        total += alpha * (l.l1 + l.l2) + beta * l.l3;
        if (g) {
            const double d = (ta.output - td.output).norm();
            const VectorXd dd = nn::distance_gradient(ta.output, td.output);
            const double h = beta * nn::hinge_sq_grad(d, m_h);
            VectorXd ga = alpha * 2.0 * (ta.output - t_a) + h * dd;
            VectorXd gd = alpha * 2.0 * (td.output - t_d) - h * dd;
            student.backward(ta, ga, g);
            student.backward(td, gd, g);
        }
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    if (g)
        for (auto& v : *g) v *= inv;
    if (parts) *parts = {sum.l1 * inv, sum.l2 * inv, sum.l3 * inv};
    return total * inv;
}

inline nn::Objective make_distill_objective(StudentNet& s, const PairSet& p, double alpha, double beta, double m_h) {
    nn::Objective obj;
    obj.params = s.net.trainable_params();
    std::vector<Index> rows(static_cast<std::size_t>(p.size()));
    std::iota(rows.begin(), rows.end(), Index{0});
    obj.evaluate = [&s, &p, rows, alpha, beta, m_h](nn::GradSet* g) {
        return composite_loss(s.net, p, rows, alpha, beta, m_h, g);
    };
    return obj;
}

struct Phase {
    int epochs = 0;
    double alpha = 0;
    double beta = 0;
};

struct DistillConfig {
    std::vector<Phase> schedule{{150, 1.0, 0.0}, {150, 0.0, 1.0}};
    double m_h = 5.0;
    double lr = 1e-3;
    Index batch_size = 16;

    int total_epochs() const {
        int n = 0;
        for (const auto& p : schedule) n += p.epochs;
        return n;
    }

    void validate() const {
        if (!(m_h > 0)) throw ConfigError("distill: m_h must be positive");
        if (schedule.empty()) throw ConfigError("distill: empty schedule");
        for (const auto& p : schedule) {
            if (p.epochs < 0) throw ConfigError("distill: negative phase length");
            if (p.alpha < 0 || p.alpha > 1 || p.beta < 0 || p.beta > 1)
                throw ConfigError("distill: alpha and beta must lie in [0, 1]");
        }
        if (!(lr > 0) || batch_size < 1) throw ConfigError("distill: invalid lr or batch size");
    }
};

// "150:1,0;150:0,1" -> two phases. Phases are contiguous by construction.
inline std::vector<Phase> parse_schedule(const std::string& text) {
    std::vector<Phase> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ';')) {
        if (part.empty()) continue;
        const auto colon = part.find(':');
        const auto comma = part.find(',', colon == std::string::npos ? 0 : colon);
        if (colon == std::string::npos || comma == std::string::npos)
            throw ConfigError("schedule phase '" + part + "' is not EPOCHS:ALPHA,BETA");
        try {
            Phase p;
            p.epochs = static_cast<int>(io::parse_int(part.substr(0, colon), "schedule"));
            p.alpha = io::parse_double(part.substr(colon + 1, comma - colon - 1), "schedule");
            p.beta = io::parse_double(part.substr(comma + 1), "schedule");
            out.push_back(p);
        } catch (const IoError& e) {
            throw ConfigError(e.what());
        }
    }
    if (out.empty()) throw ConfigError("empty distillation schedule");
    return out;
}

inline std::string format_schedule(const std::vector<Phase>& s) {
    std::string out;
    for (const auto& p : s) {
        if (!out.empty()) out += ';';
        out += std::to_string(p.epochs) + ':' + io::fmt(p.alpha) + ',' + io::fmt(p.beta);
    }
    return out;
}

inline double mean_student_distance(const nn::DenseNet& net, const PairSet& p) {
    double total = 0;
    for (Index r = 0; r < p.size(); ++r)
        total += (net.forward(p.auth.row(r).transpose()) - net.forward(p.fake.row(r).transpose())).norm();
    return total / static_cast<double>(p.size());
}

inline StudentNet train_student(const PairSet& pairs, StudentNet student, const DistillConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (pairs.size() < 100) throw ConfigError("train_student: need at least 100 pairs");
    if (pairs.t_auth.cols() != student.feature_len())
        throw ConfigError("train_student: teacher features and student output differ in length");
    Rng rng(derive_seed(seed, SeedTag::student, 1));
    std::vector<Index> all(static_cast<std::size_t>(pairs.size()));
    std::iota(all.begin(), all.end(), Index{0});
    DistillLosses parts;
    composite_loss(student.net, pairs, all, 1, 0, cfg.m_h, nullptr, &parts);
    student.meta.init_l12 = parts.l1 + parts.l2;
    student.meta.init_distance = mean_student_distance(student.net, pairs);
    student.meta.phase1_l12 = student.meta.init_l12;
    student.meta.phase1_distance = student.meta.init_distance;

    auto params = student.net.trainable_params();
    auto opt = nn::Optimizer::adam(cfg.lr);
    nn::GradSet g;
    int epoch = 0;
    for (std::size_t ph = 0; ph < cfg.schedule.size(); ++ph) {
        const auto& phase = cfg.schedule[ph];
        for (int e = 0; e < phase.epochs; ++e, ++epoch) {
            const auto order = nn::shuffled_indices(pairs.size(), rng);
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
                std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                        order.begin() + static_cast<std::ptrdiff_t>(
                                                            std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
                double loss = 0;
                try {
                    loss = composite_loss(student.net, pairs, rows, phase.alpha, phase.beta, cfg.m_h, &g);
                } catch (const NumericError& err) {
                    throw NumericError("train_student: phase " + std::to_string(ph) + " epoch " + std::to_string(epoch) +
                                       ": " + err.what());
                }
                if (!std::isfinite(loss))
                    throw NumericError("train_student: non-finite loss in phase " + std::to_string(ph) + " epoch " +
                                       std::to_string(epoch));
                opt.step(params, g);
            }
        }
        if (phase.alpha > 0) {
            composite_loss(student.net, pairs, all, 1, 0, cfg.m_h, nullptr, &parts);
            student.meta.phase1_l12 = parts.l1 + parts.l2;
            student.meta.phase1_distance = mean_student_distance(student.net, pairs);
        }
    }
    composite_loss(student.net, pairs, all, 1, 0, cfg.m_h, nullptr, &parts);
    student.meta.final_l12 = parts.l1 + parts.l2;
    student.meta.final_distance = mean_student_distance(student.net, pairs);
    return student;
}

inline VectorXd extract(const StudentNet& s, const VectorXd& f) {
    if (f.size() != s.net.input_size()) throw ConfigError("extract: input dimension mismatch");
    return s.extract(f);
}

inline std::string features_to_csv(const StudentNet& s, const std::vector<FaceSample>& samples) {
    std::string out = "sample_id,identity,label";
    for (Index j = 0; j < s.feature_len(); ++j) out += ",f" + std::to_string(j);
    out += '\n';
    for (const auto& f : samples) {
        const VectorXd v = extract(s, f.x);
        out += synth::sample_id(f) + ',' + std::to_string(f.identity) + ',' + std::to_string(static_cast<int>(f.label));
        for (Index j = 0; j < v.size(); ++j) out += ',' + io::fmt(v[j]);
        out += '\n';
    }
    return out;
}

}  // namespace dfid::features
