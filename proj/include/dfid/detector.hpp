#pragma once
// Identity decoder, feature conditioning, decoupled Siamese head, contrastive
// training over an lr grid, and per-identity scoring.

#include <limits>
#include <memory>

#include "dfid/id_features.hpp"
#include "dfid/metrics.hpp"
#include "dfid/parallel.hpp"
#include "dfid/recon_op.hpp"

namespace dfid::detect {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using synth::FaceSample;

// ---------------------------------------------------------------------------
// Identity decoder

struct IdentityDecoder {
    MatrixXd w;  // [K x q]; row k is identity k's vector

    Index identities() const { return w.rows(); }
    Index length() const { return w.cols(); }

    VectorXd decode(int k) const {
        if (k < 0 || k >= w.rows()) throw ConfigError("identity " + std::to_string(k) + " outside the decoder");
        return w.row(k).transpose();
    }
};

inline VectorXd decode_identity(const IdentityDecoder& d, int k) { return d.decode(k); }

// ---------------------------------------------------------------------------
// Conditioning

// Which extractor outputs enter X. The identity vector is always appended
// (length q, possibly 0).
struct FeatureSpec {
    bool student = true;
    bool teacher = true;
};

struct Extractors {
    std::shared_ptr<const features::StudentNet> student;
    std::shared_ptr<const features::TeacherNet> teacher;

    Index length(const FeatureSpec& s) const {
        Index n = 0;
        if (s.student) n += student->feature_len();
        if (s.teacher) n += teacher->adapter.rows();
        return n;
    }

    VectorXd base(const FeatureSpec& s, const VectorXd& x) const {
        VectorXd out(length(s));
        Index at = 0;
        if (s.student) {
            const VectorXd f = student->extract(x);
            out.segment(at, f.size()) = f;
            at += f.size();
        }
        if (s.teacher) {
            const VectorXd f = teacher->features(x);
            out.segment(at, f.size()) = f;
        }
        return out;
    }
};

inline VectorXd condition_features(const VectorXd& student, const VectorXd& teacher, const VectorXd& id, Index f_len,
                                   Index t_len, Index q) {
    if (student.size() != f_len || teacher.size() != t_len || id.size() != q)
        throw ConfigError("condition_features: component lengths " + std::to_string(student.size()) + "/" +
                          std::to_string(teacher.size()) + "/" + std::to_string(id.size()) + " do not match " +
                          std::to_string(f_len) + "/" + std::to_string(t_len) + "/" + std::to_string(q));
    VectorXd x(f_len + t_len + q);
    x << student, teacher, id;
    return x;
}

// ---------------------------------------------------------------------------
// Siamese head

struct SiameseHead {
    nn::Layer s1;  // applied to X1
    nn::Layer s2;  // applied to X2; never shares storage with s1
    double margin = 2.0;

    Index input_len() const { return s1.in(); }
    Index output_len() const { return s1.out(); }

    static SiameseHead random(Index in, Index out, nn::Activation act, double margin, Rng& rng) {
        SiameseHead h;
        h.margin = margin;
        const double scale = std::sqrt(6.0 / static_cast<double>(in + out));
        for (nn::Layer* l : {&h.s1, &h.s2}) {
            l->weight = MatrixXd::NullaryExpr(out, in, [&] { return std::uniform_real_distribution<double>(-scale, scale)(rng); });
            l->bias = VectorXd::Zero(out);
            l->activation = act;
        }
        return h;
    }

    bool decoupled() const {
        return s1.weight.data() != s2.weight.data() && s1.bias.data() != s2.bias.data() && s1.weight != s2.weight;
    }
};

namespace detail {

inline VectorXd embed(const nn::Layer& l, const VectorXd& x) {
    VectorXd z = l.weight * x + l.bias;
    nn::detail::activate(l.activation, z);
    return z;
}

inline void activate_rows(nn::Activation a, MatrixXd& z) {
    switch (a) {
        case nn::Activation::linear: break;
        case nn::Activation::relu: z = z.cwiseMax(0.0); break;
        case nn::Activation::tanh: z = z.array().tanh().matrix(); break;
    }
}

// derivative expressed through the activated output
inline MatrixXd activation_slope(nn::Activation a, const MatrixXd& h) {
    switch (a) {
        case nn::Activation::linear: return MatrixXd::Ones(h.rows(), h.cols());
        case nn::Activation::relu: return (h.array() > 0.0).cast<double>().matrix();
        case nn::Activation::tanh: return (1.0 - h.array().square()).matrix();
    }
    return MatrixXd::Ones(h.rows(), h.cols());
}

}  // namespace detail

inline double siamese_distance(const SiameseHead& h, const VectorXd& x1, const VectorXd& x2) {
    if (x1.size() != h.input_len() || x2.size() != h.input_len())
        throw ConfigError("siamese_distance: input length " + std::to_string(x1.size()) + "/" +
                          std::to_string(x2.size()) + ", head expects " + std::to_string(h.input_len()));
    return (detail::embed(h.s1, x1) - detail::embed(h.s2, x2)).norm();
}

// ---------------------------------------------------------------------------
// Training pairs

// Base features (without the identity vector) for each side of every pair.
struct PairData {
    MatrixXd x1;               // [n x B]
    MatrixXd x2;               // [n x B]
    std::vector<int> identity;
    std::vector<int> y;        // 1: (f, R f), should be far; 0: (R f, R R f), should be close

    Index size() const { return x1.rows(); }
};

// For each authentic f of identity k: (f, R_k f) with Y = 1, then
// (R_k f, R_k R_k f) with Y = 0.
inline PairData build_training_pairs(const std::vector<FaceSample>& authentic, const recon::ReconRegistry& ops,
                                     const Extractors& ex, const FeatureSpec& spec, int threads = 1) {
    const Index n = static_cast<Index>(authentic.size());
    const Index b = ex.length(spec);
    PairData p;
    p.x1.resize(2 * n, b);
    p.x2.resize(2 * n, b);
    p.identity.resize(static_cast<std::size_t>(2 * n));
    p.y.resize(static_cast<std::size_t>(2 * n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        const auto& f = authentic[i];
        if (!f.authentic()) throw ConfigError("build_training_pairs: " + synth::sample_id(f) + " is not authentic");
        const recon::ReconOperator* op = nullptr;
        try {
            op = &ops.at(f.identity);
        } catch (const ConfigError& e) {
            throw ConfigError("build_training_pairs: sample " + synth::sample_id(f) + ": " + e.what());
        }
        const VectorXd r = op->apply(f.x);
        const VectorXd rr = op->apply(r);
        const VectorXd bf = ex.base(spec, f.x), br = ex.base(spec, r), brr = ex.base(spec, rr);
        const Index row = 2 * static_cast<Index>(i);
        p.x1.row(row) = bf.transpose();
        p.x2.row(row) = br.transpose();
        p.x1.row(row + 1) = br.transpose();
        p.x2.row(row + 1) = brr.transpose();
        p.identity[static_cast<std::size_t>(row)] = p.identity[static_cast<std::size_t>(row + 1)] = f.identity;
        p.y[static_cast<std::size_t>(row)] = 1;
        p.y[static_cast<std::size_t>(row + 1)] = 0;
    });
    return p;
}

// ---------------------------------------------------------------------------
// Contrastive objective

struct DetectorModel {
    IdentityDecoder decoder;
    SiameseHead head;
    VectorXd in_mean;   // per-coordinate standardization of the base features; empty = none
    VectorXd in_scale;

    VectorXd normalized(const VectorXd& base) const {
        if (in_mean.size() == 0) return base;
        return ((base - in_mean).array() / in_scale.array()).matrix();
    }

    MatrixXd conditioned(const MatrixXd& base, const std::vector<int>& ids, const std::vector<Index>& rows) const {
        MatrixXd x(static_cast<Index>(rows.size()), base.cols() + decoder.length());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            x.row(static_cast<Index>(r)).head(base.cols()) = normalized(base.row(rows[r]).transpose()).transpose();
            if (decoder.length() > 0)
                x.row(static_cast<Index>(r)).tail(decoder.length()) = decoder.w.row(ids[static_cast<std::size_t>(rows[r])]);
        }
        return x;
    }

    VectorXd conditioned(const VectorXd& base, int k) const {
        VectorXd x(base.size() + decoder.length());
        x << normalized(base), decoder.decode(k);
        return x;
    }

    // s1.weight, s1.bias, s2.weight, s2.bias, then the decoder when q > 0
    std::vector<nn::ParamView> params() {
        std::vector<nn::ParamView> p{{head.s1.weight.data(), head.s1.weight.size()},
                                     {head.s1.bias.data(), head.s1.bias.size()},
                                     {head.s2.weight.data(), head.s2.weight.size()},
                                     {head.s2.bias.data(), head.s2.bias.size()}};
        if (decoder.w.size() > 0) p.push_back({decoder.w.data(), decoder.w.size()});
        return p;
    }
};

// Mean contrastive loss over rows; fills the gradient (aligned with params())
// when g is non-null.
inline double contrastive_batch(const DetectorModel& m, const PairData& p, const std::vector<Index>& rows,
                                nn::GradSet* g) {
    const Index n = static_cast<Index>(rows.size());
    const MatrixXd x1 = m.conditioned(p.x1, p.identity, rows);
    const MatrixXd x2 = m.conditioned(p.x2, p.identity, rows);
    MatrixXd h1 = (x1 * m.head.s1.weight.transpose()).rowwise() + m.head.s1.bias.transpose();
    MatrixXd h2 = (x2 * m.head.s2.weight.transpose()).rowwise() + m.head.s2.bias.transpose();
    detail::activate_rows(m.head.s1.activation, h1);
    detail::activate_rows(m.head.s2.activation, h2);
    const MatrixXd diff = h1 - h2;
    double total = 0;
    MatrixXd gdiff(n, diff.cols());
    for (Index r = 0; r < n; ++r) {
        const double d = diff.row(r).norm();
        const int y = p.y[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
        total += nn::contrastive_loss(d, y, m.head.margin);
        if (g) {
            const double dl = nn::contrastive_loss_grad(d, y, m.head.margin);
            if (d > 0)
                gdiff.row(r) = (dl / d) * diff.row(r);
            else
                gdiff.row(r).setZero();
        }
    }
    const double inv = 1.0 / static_cast<double>(n);
    if (g) {
        const MatrixXd dz1 = (gdiff.array() * detail::activation_slope(m.head.s1.activation, h1).array()).matrix() * inv;
        const MatrixXd dz2 = (-gdiff.array() * detail::activation_slope(m.head.s2.activation, h2).array()).matrix() * inv;
        g->clear();
        const MatrixXd gw1 = dz1.transpose() * x1, gw2 = dz2.transpose() * x2;
        g->push_back(Eigen::Map<const VectorXd>(gw1.data(), gw1.size()));
        g->push_back(dz1.colwise().sum().transpose());
        g->push_back(Eigen::Map<const VectorXd>(gw2.data(), gw2.size()));
        g->push_back(dz2.colwise().sum().transpose());
        if (m.decoder.w.size() > 0) {
            const Index q = m.decoder.length();
            const MatrixXd dx1 = dz1 * m.head.s1.weight.rightCols(q);
            const MatrixXd dx2 = dz2 * m.head.s2.weight.rightCols(q);
            MatrixXd gd = MatrixXd::Zero(m.decoder.w.rows(), q);
            for (Index r = 0; r < n; ++r) {
                const int k = p.identity[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
                gd.row(k) += dx1.row(r) + dx2.row(r);
            }
            g->push_back(Eigen::Map<const VectorXd>(gd.data(), gd.size()));
        }
    }
    return total * inv;
}

inline double contrastive_mean(const DetectorModel& m, const PairData& p) {
    std::vector<Index> rows(static_cast<std::size_t>(p.size()));
    std::iota(rows.begin(), rows.end(), Index{0});
    return contrastive_batch(m, p, rows, nullptr);
}

inline nn::Objective make_contrastive_objective(DetectorModel& m, const PairData& p) {
    nn::Objective obj;
    obj.params = m.params();
    std::vector<Index> rows(static_cast<std::size_t>(p.size()));
    std::iota(rows.begin(), rows.end(), Index{0});
    obj.evaluate = [&m, &p, rows](nn::GradSet* g) { return contrastive_batch(m, p, rows, g); };
    return obj;
}

// ---------------------------------------------------------------------------
// Training

// "lo:hi:n" -> n evenly spaced values from lo to hi inclusive.
inline std::vector<double> parse_lr_grid(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
    if (parts.size() != 3) throw ConfigError("lr grid '" + text + "' is not LO:HI:N");
    double lo = 0, hi = 0;
    long n = 0;
    try {
        lo = io::parse_double(parts[0], "lr grid");
        hi = io::parse_double(parts[1], "lr grid");
        n = io::parse_int(parts[2], "lr grid");
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    if (!(lo > 0) || !(hi >= lo) || n < 1) throw ConfigError("lr grid '" + text + "' needs 0 < LO <= HI and N >= 1");
    std::vector<double> out;
    for (long i = 0; i < n; ++i)
        out.push_back(n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1));
    return out;
}

struct DetectorConfig {
    Index id_len = 8;        // q; 0 ablates the identity decoder
    Index head_out = 16;     // s
    double margin = 2.0;     // m
    std::vector<double> lr_grid = parse_lr_grid("1e-4:1e-3:10");
    int epochs = 40;
    Index batch_size = 32;
    nn::Activation activation = nn::Activation::tanh;
    double decoder_init_sigma = 0.1;
    bool standardize = true;  // standardize base features on the training pairs

    void validate() const {
        if (id_len < 0 || head_out < 1) throw ConfigError("detector: id_len must be >= 0 and head_out >= 1");
        if (!(margin > 0)) throw ConfigError("detector: margin must be positive");
        if (lr_grid.empty() || epochs < 1 || batch_size < 1) throw ConfigError("detector: empty lr grid or schedule");
        for (double lr : lr_grid)
            if (!(lr > 0)) throw ConfigError("detector: lr values must be positive");
    }
};

struct TrainInfo {
    double lr = 0;
    int best_epoch = 0;                  // 1-based
    double best_val_loss = 0;
    std::vector<double> best_so_far;     // running minimum across the grid, one entry per evaluated epoch
    double val_far_mean = 0;             // mean D over Y = 1 validation pairs
    double val_close_mean = 0;           // mean D over Y = 0 validation pairs
};

inline DetectorModel init_model(Index base_len, int identities, const DetectorConfig& cfg, Rng& rng) {
    DetectorModel m;
    m.decoder.w = cfg.id_len > 0 ? MatrixXd(cfg.decoder_init_sigma * standard_normal_matrix(identities, cfg.id_len, rng))
                                 : MatrixXd(identities, 0);
    m.head = SiameseHead::random(base_len + cfg.id_len, cfg.head_out, cfg.activation, cfg.margin, rng);
    return m;
}

inline std::pair<double, double> mean_distances(const DetectorModel& m, const PairData& p) {
    double far = 0, close = 0;
    Index nf = 0, nc = 0;
    for (Index r = 0; r < p.size(); ++r) {
        const int k = p.identity[static_cast<std::size_t>(r)];
        const double d = siamese_distance(m.head, m.conditioned(VectorXd(p.x1.row(r).transpose()), k),
                                          m.conditioned(VectorXd(p.x2.row(r).transpose()), k));
        if (p.y[static_cast<std::size_t>(r)] == 1) {
            far += d;
            ++nf;
        } else {
            close += d;
            ++nc;
        }
    }
    return {nf ? far / static_cast<double>(nf) : 0.0, nc ? close / static_cast<double>(nc) : 0.0};
}

// Every grid lr starts from the same initialization; the checkpoint with the
// smallest validation loss over all (lr, epoch) is kept.
inline std::pair<DetectorModel, TrainInfo> train_detector(const PairData& train, const PairData& val, int identities,
                                                          const DetectorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (train.size() < 100) throw ConfigError("train_detector: need at least 100 pairs");
    if (val.size() < 1) throw ConfigError("train_detector: empty validation set");
    Rng init_rng(derive_seed(seed, SeedTag::detector));
    DetectorModel init = init_model(train.x1.cols(), identities, cfg, init_rng);
    if (cfg.standardize) {
        MatrixXd all(2 * train.size(), train.x1.cols());
        all << train.x1, train.x2;
        init.in_mean = all.colwise().mean().transpose();
        init.in_scale = ((all.rowwise() - init.in_mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
        for (Index j = 0; j < init.in_scale.size(); ++j)
            if (init.in_scale[j] < 1e-12) init.in_scale[j] = 1.0;
    }

    DetectorModel best = init;
    TrainInfo info;
    info.best_val_loss = std::numeric_limits<double>::infinity();
    for (std::size_t li = 0; li < cfg.lr_grid.size(); ++li) {
        const double lr = cfg.lr_grid[li];
        DetectorModel m = init;
        auto params = m.params();
        auto opt = nn::Optimizer::adam(lr);
        Rng rng(derive_seed(seed, SeedTag::detector, li + 1));
        nn::GradSet g;
        for (int e = 1; e <= cfg.epochs; ++e) {
            const auto order = nn::shuffled_indices(train.size(), rng);
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
                const std::vector<Index> rows(
                    order.begin() + static_cast<std::ptrdiff_t>(start),
                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
                const double loss = contrastive_batch(m, train, rows, &g);
                if (!std::isfinite(loss))
                    throw NumericError("train_detector: non-finite loss at lr " + io::fmt(lr) + " epoch " + std::to_string(e));
                opt.step(params, g);
            }
            const double v = contrastive_mean(m, val);
            if (!std::isfinite(v))
                throw NumericError("train_detector: non-finite validation loss at lr " + io::fmt(lr) + " epoch " +
                                   std::to_string(e));
            if (v < info.best_val_loss) {
                info.best_val_loss = v;
                info.lr = lr;
                info.best_epoch = e;
                best = m;
            }
            info.best_so_far.push_back(info.best_val_loss);
        }
    }
    std::tie(info.val_far_mean, info.val_close_mean) = mean_distances(best, val);
    if (!best.head.decoupled()) throw NumericError("train_detector: Siamese heads ended up tied");
    return {best, info};
}

// ---------------------------------------------------------------------------
// Bundle, scoring and classification

struct DetectorBundle {
    Extractors extractors;
    std::shared_ptr<const recon::ReconRegistry> ops;
    FeatureSpec spec;
    DetectorModel model;
    std::vector<double> thresholds;  // per identity
    TrainInfo info;

    VectorXd conditioned(const VectorXd& x, int k) const { return model.conditioned(extractors.base(spec, x), k); }
};

// D_Sn between f and R_k(f); larger means more likely authentic.
inline double score(const DetectorBundle& b, const VectorXd& f, int k) {
    const auto& op = b.ops->at(k);
    if (k >= b.model.decoder.identities()) throw ConfigError("score: unknown identity " + std::to_string(k));
    const VectorXd r = op.apply(f);
    return siamese_distance(b.model.head, b.conditioned(f, k), b.conditioned(r, k));
}

// Deepfake-side calibration score: D_Sn between R_k f and R_k R_k f.
inline double simulated_deepfake_score(const DetectorBundle& b, const VectorXd& f, int k) {
    return score(b, b.ops->at(k).apply(f), k);
}

inline synth::Label classify(const DetectorBundle& b, const VectorXd& f, int k, double theta) {
    return score(b, f, k) > theta ? synth::Label::authentic : synth::Label::deepfake;
}

// Per-identity Youden thresholds from validation authentic faces (positives)
// against their simulated deepfakes R_k f (negatives).
inline std::vector<double> calibrate_thresholds(const DetectorBundle& b, const std::vector<FaceSample>& validation,
                                                int identities) {
    std::vector<std::vector<double>> scores(static_cast<std::size_t>(identities));
    std::vector<std::vector<int>> labels(static_cast<std::size_t>(identities));
    for (const auto& f : validation) {
        if (!f.authentic()) continue;
        auto& s = scores.at(static_cast<std::size_t>(f.identity));
        auto& l = labels.at(static_cast<std::size_t>(f.identity));
        s.push_back(score(b, f.x, f.identity));
        l.push_back(1);
        s.push_back(simulated_deepfake_score(b, f.x, f.identity));
        l.push_back(0);
    }
    std::vector<double> out(static_cast<std::size_t>(identities), 0.0);
    for (int k = 0; k < identities; ++k) {
        const auto& s = scores[static_cast<std::size_t>(k)];
        if (s.empty()) throw ConfigError("calibrate_thresholds: no validation faces for identity " + std::to_string(k));
        out[static_cast<std::size_t>(k)] = metrics::youden_threshold(std::span<const double>(s),
                                                                   std::span<const int>(labels[static_cast<std::size_t>(k)]));
    }
    return out;
}

struct ScoredSample {
    std::string sample_id;
    int identity = 0;
    int label = 0;
    double score = 0;
};

inline std::vector<ScoredSample> score_samples(const std::vector<FaceSample>& samples, int claimed,
                                               const std::function<double(const VectorXd&, int)>& fn, int threads = 1) {
    std::vector<ScoredSample> out(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        const auto& f = samples[i];
        const int k = claimed >= 0 ? claimed : f.identity;
        out[i] = {synth::sample_id(f), k, static_cast<int>(f.label), fn(f.x, k)};
    });
    return out;
}

inline std::string scores_to_csv(const std::vector<ScoredSample>& s) {
    std::string out = "sample_id,identity,label,score\n";
    for (const auto& r : s)
        out += r.sample_id + ',' + std::to_string(r.identity) + ',' + std::to_string(r.label) + ',' + io::fmt(r.score) + '\n';
    return out;
}

// ---------------------------------------------------------------------------
// Feature classifier (identity-feature ablation): authentic f against R_k f,
// no idempotence pairing, no identity vector.

struct FeatureClassifier {
    nn::DenseNet net;  // B -> hidden tanh -> 1 logit
    TrainInfo info;
};

inline FeatureClassifier train_feature_classifier(const PairData& train, const PairData& val, const DetectorConfig& cfg,
                                                  std::uint64_t seed) {
    cfg.validate();
    // Y = 1 rows hold (f, R f): x1 is an authentic face and x2 its simulated deepfake.
    auto to_batch = [](const PairData& p) {
        Index n = 0;
        for (int y : p.y) n += y;
        nn::Batch b;
        b.inputs.resize(2 * n, p.x1.cols());
        b.targets.resize(2 * n, 1);
        Index at = 0;
        for (Index r = 0; r < p.size(); ++r) {
            if (p.y[static_cast<std::size_t>(r)] != 1) continue;
            b.inputs.row(at) = p.x1.row(r);
            b.targets(at++, 0) = 1;
            b.inputs.row(at) = p.x2.row(r);
            b.targets(at++, 0) = 0;
        }
        return b;
    };
    nn::Batch tb = to_batch(train), vb = to_batch(val);
    if (tb.size() < 100) throw ConfigError("train_feature_classifier: need at least 100 samples");
    std::optional<features::Standardizer> st;
    if (cfg.standardize) {
        st = features::standardizer(tb.inputs);
        tb.inputs = st->apply(tb.inputs);
        vb.inputs = st->apply(vb.inputs);
    }
    Rng init_rng(derive_seed(seed, SeedTag::detector, 1000));
    const auto init = nn::DenseNet::glorot({tb.inputs.cols(), cfg.head_out, 1}, {nn::Activation::tanh, nn::Activation::linear},
                                           init_rng);
    FeatureClassifier best{init, {}};
    best.info.best_val_loss = std::numeric_limits<double>::infinity();
    const auto tail = nn::logistic_tail();
    for (std::size_t li = 0; li < cfg.lr_grid.size(); ++li) {
        auto net = init;
        auto opt = nn::Optimizer::adam(cfg.lr_grid[li]);
        Rng rng(derive_seed(seed, SeedTag::detector, 1001 + li));
        for (int e = 1; e <= cfg.epochs; ++e) {
            nn::fit(net, tail, tb, opt, {1, cfg.batch_size, "feature classifier"}, rng);
            const double v = nn::batch_loss(net, tail, vb);
            if (v < best.info.best_val_loss) {
                best.net = net;
                best.info.best_val_loss = v;
                best.info.lr = cfg.lr_grid[li];
                best.info.best_epoch = e;
            }
            best.info.best_so_far.push_back(best.info.best_val_loss);
        }
    }
    if (st) st->fold_into(best.net.mutable_layers().front());
    return best;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_bundle(const DetectorBundle& b, const io::fs::path& dir) {
    io::ensure_dir(dir);
    features::save_teacher(*b.extractors.teacher, dir / "teacher.ckpt");
    nn::save_checkpoint(b.extractors.student->net, (dir / "student.ckpt").string());
    recon::save_registry(*b.ops, dir / "ops");
    nn::save_checkpoint(nn::DenseNet({b.model.head.s1}), (dir / "head_s1.ckpt").string());
    nn::save_checkpoint(nn::DenseNet({b.model.head.s2}), (dir / "head_s2.ckpt").string());
    nlohmann::json j;
    j["format"] = "dfid-detector";
    j["version"] = 1;
    j["spec"] = {{"student", b.spec.student}, {"teacher", b.spec.teacher}};
    j["margin"] = b.model.head.margin;
    j["identities"] = b.model.decoder.identities();
    j["id_len"] = b.model.decoder.length();
    std::vector<std::vector<double>> rows;
    for (Index k = 0; k < b.model.decoder.identities(); ++k) {
        std::vector<double> r;
        for (Index c = 0; c < b.model.decoder.length(); ++c) r.push_back(b.model.decoder.w(k, c));
        rows.push_back(r);
    }
    j["decoder"] = rows;
    j["in_mean"] = std::vector<double>(b.model.in_mean.data(), b.model.in_mean.data() + b.model.in_mean.size());
    j["in_scale"] = std::vector<double>(b.model.in_scale.data(), b.model.in_scale.data() + b.model.in_scale.size());
    j["thresholds"] = b.thresholds;
    j["train"] = {{"lr", b.info.lr}, {"best_epoch", b.info.best_epoch}, {"best_val_loss", b.info.best_val_loss},
                  {"val_far_mean", b.info.val_far_mean}, {"val_close_mean", b.info.val_close_mean}};
    io::write_file(dir / "bundle.json", j.dump(1) + "\n");
}

inline DetectorBundle load_bundle(const io::fs::path& dir) {
    DetectorBundle b;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(dir / "bundle.json"));
        if (j.at("format") != "dfid-detector") throw IoError((dir / "bundle.json").string() + ": not a detector bundle");
        b.spec.student = j.at("spec").at("student").get<bool>();
        b.spec.teacher = j.at("spec").at("teacher").get<bool>();
        const auto k = j.at("identities").get<Index>(), q = j.at("id_len").get<Index>();
        b.model.decoder.w.resize(k, q);
        const auto& rows = j.at("decoder");
        for (Index r = 0; r < k; ++r)
            for (Index c = 0; c < q; ++c) b.model.decoder.w(r, c) = rows.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
        b.thresholds = j.at("thresholds").get<std::vector<double>>();
        const auto mean = j.at("in_mean").get<std::vector<double>>(), scale = j.at("in_scale").get<std::vector<double>>();
        if (mean.size() != scale.size()) throw IoError((dir / "bundle.json").string() + ": standardization length mismatch");
        b.model.in_mean = Eigen::Map<const VectorXd>(mean.data(), static_cast<Index>(mean.size()));
        b.model.in_scale = Eigen::Map<const VectorXd>(scale.data(), static_cast<Index>(scale.size()));
        const auto& t = j.at("train");
        b.info.lr = t.at("lr").get<double>();
        b.info.best_epoch = t.at("best_epoch").get<int>();
        b.info.best_val_loss = t.at("best_val_loss").get<double>();
        b.info.val_far_mean = t.at("val_far_mean").get<double>();
        b.info.val_close_mean = t.at("val_close_mean").get<double>();
        b.model.head.margin = j.at("margin").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / "bundle.json").string() + ": " + e.what());
    }
    auto s1 = nn::load_checkpoint((dir / "head_s1.ckpt").string());
    auto s2 = nn::load_checkpoint((dir / "head_s2.ckpt").string());
    if (s1.layer_count() != 1 || s2.layer_count() != 1) throw IoError(dir.string() + ": head checkpoints must be single-layer");
    b.model.head.s1 = s1.layers()[0];
    b.model.head.s2 = s2.layers()[0];
    auto student = std::make_shared<features::StudentNet>();
    student->net = nn::load_checkpoint((dir / "student.ckpt").string());
    b.extractors.student = student;
    b.extractors.teacher = std::make_shared<features::TeacherNet>(features::load_teacher(dir / "teacher.ckpt"));
    b.ops = std::make_shared<recon::ReconRegistry>(recon::load_registry(dir / "ops"));
    if (b.model.head.s1.in() != b.extractors.length(b.spec) + b.model.decoder.length())
        throw IoError(dir.string() + ": head input length does not match the extractors");
    return b;
}

}  // namespace dfid::detect
