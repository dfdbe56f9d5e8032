#pragma once
// Per-identity reconstruction operators and near-idempotence residuals.
//
// An operator is a bottleneck autoencoder trained on one identity's
// authentic faces. By default it learns to reproduce its input; given a
// target map it learns to emulate that map instead, which is how an operator
// is made to mimic a generator family (the map is the family's self-swap).

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfid/dataset_io.hpp"
#include "dfid/io.hpp"
#include "dfid/metrics.hpp"
#include "dfid/nn_core.hpp"
#include "dfid/parallel.hpp"
#include "dfid/synth_data.hpp"

namespace dfid::recon {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using synth::FaceSample;
using synth::GeneratorFamily;

struct ReconConfig {
    std::vector<Index> hidden{16};  // encoder widths before the bottleneck; decoder mirrors them
    Index bottleneck = 8;
    int epochs = 150;
    double lr = 3e-3;
    Index batch_size = 16;
    double heldout_fraction = 0.2;
};

struct ReconMeta {
    int epochs = 0;
    double heldout_mse = 0;
    double heldout_variance = 0;
    std::uint64_t seed = 0;
    std::string target = "identity";  // "identity" or the emulated family

    bool learned() const { return heldout_mse < 0.5 * heldout_variance; }
};

struct ReconOperator {
    int identity = -1;
    nn::DenseNet net;
    ReconMeta meta;

    Index dim() const { return net.input_size(); }

    VectorXd apply(const VectorXd& f) const {
        if (net.empty()) throw ConfigError("apply: operator for identity " + std::to_string(identity) + " is empty");
        if (f.size() != net.input_size())
            throw ConfigError("apply: input length " + std::to_string(f.size()) + " but operator dimension is " +
                              std::to_string(net.input_size()));
        return net.forward(f);
    }
};

using TargetMap = std::function<VectorXd(const VectorXd&)>;

inline nn::DenseNet make_autoencoder(Index dim, const ReconConfig& cfg, Rng& rng) {
    if (cfg.bottleneck < 1 || cfg.bottleneck >= dim) throw ConfigError("autoencoder: need 1 <= bottleneck < D");
    std::vector<Index> dims{dim};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(cfg.bottleneck);
    dims.insert(dims.end(), cfg.hidden.rbegin(), cfg.hidden.rend());
    dims.push_back(dim);
    std::vector<nn::Activation> acts(dims.size() - 1, nn::Activation::tanh);
    acts.back() = nn::Activation::linear;
    return nn::DenseNet::glorot(std::span<const Index>(dims), std::span<const nn::Activation>(acts), rng);
}

// The self-swap of a generator family on identity k.
inline TargetMap family_target(GeneratorFamily family, const synth::Population& pop, int k,
                               const synth::GeneratorParams& params) {
    const auto proto = pop.at(k);
    const auto traces = pop.traces;
    return [=](const VectorXd& x) { return synth::render(family, x, proto, proto, traces, params); };
}

inline ReconOperator train_recon(const std::vector<FaceSample>& samples, const ReconConfig& cfg, std::uint64_t seed,
                                 const TargetMap& target = {}, const std::string& target_name = "identity") {
    if (samples.size() < 50) throw ConfigError("train_recon: need at least 50 samples, got " + std::to_string(samples.size()));
    const int identity = samples.front().identity;
    for (const auto& s : samples) {
        if (!s.authentic()) throw ConfigError("train_recon: training samples must be authentic");
        if (s.identity != identity) throw ConfigError("train_recon: samples span more than one identity");
    }
    if (cfg.heldout_fraction <= 0 || cfg.heldout_fraction >= 1) throw ConfigError("train_recon: held-out fraction outside (0, 1)");
    const Index dim = samples.front().x.size();
    const Index n = static_cast<Index>(samples.size());

    Rng rng(seed);
    const auto order = nn::shuffled_indices(n, rng);
    const Index n_hold = std::max<Index>(1, static_cast<Index>(std::floor(cfg.heldout_fraction * static_cast<double>(n))));
    const Index n_train = n - n_hold;

    MatrixXd x(n, dim), t(n, dim);
    for (Index r = 0; r < n; ++r) {
        const auto& s = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
        x.row(r) = s.x.transpose();
        t.row(r) = (target ? target(s.x) : s.x).transpose();
    }
    const VectorXd center = x.topRows(n_train).colwise().mean().transpose();

    nn::Batch train;
    train.inputs = x.topRows(n_train).rowwise() - center.transpose();
    train.targets = t.topRows(n_train).rowwise() - center.transpose();

    ReconOperator op;
    op.identity = identity;
    op.net = make_autoencoder(dim, cfg, rng);
    auto opt = nn::Optimizer::adam(cfg.lr);
    nn::fit(op.net, nn::mse_tail(), train, opt, {cfg.epochs, cfg.batch_size, "train_recon identity " + std::to_string(identity)},
            rng);

    // Fold the centering into the first and last biases so the operator is a plain network on raw inputs.
    auto& layers = op.net.mutable_layers();
    layers.front().bias -= layers.front().weight * center;
    layers.back().bias += center;

    const auto hold_x = x.bottomRows(n_hold);
    const auto hold_t = t.bottomRows(n_hold);
    double mse = 0;
    for (Index r = 0; r < n_hold; ++r) mse += (op.apply(hold_x.row(r).transpose()) - hold_t.row(r).transpose()).squaredNorm();
    op.meta.heldout_mse = mse / static_cast<double>(n_hold * dim);
    const VectorXd hold_mean = hold_t.colwise().mean().transpose();
    op.meta.heldout_variance =
        (hold_t.rowwise() - hold_mean.transpose()).squaredNorm() / static_cast<double>(n_hold * dim);
    op.meta.epochs = cfg.epochs;
    op.meta.seed = seed;
    op.meta.target = target_name;
    return op;
}

// ---------------------------------------------------------------------------
// Registry: one operator per identity

struct ReconRegistry {
    std::string target = "identity";
    std::vector<ReconOperator> ops;  // ops[k].identity == k

    int size() const { return static_cast<int>(ops.size()); }

    const ReconOperator& at(int k) const {
        if (k < 0 || k >= size() || ops[static_cast<std::size_t>(k)].net.empty())
            throw ConfigError("no reconstruction operator for identity " + std::to_string(k));
        return ops[static_cast<std::size_t>(k)];
    }
};

inline std::map<int, std::vector<FaceSample>> by_identity(const std::vector<FaceSample>& samples) {
    std::map<int, std::vector<FaceSample>> out;
    for (const auto& s : samples) out[s.identity].push_back(s);
    return out;
}

// family == nullopt trains plain reconstruction operators.
inline ReconRegistry train_registry(const std::vector<FaceSample>& recon_train, const synth::Population& pop,
                                    std::optional<GeneratorFamily> family, const synth::GeneratorParams& params,
                                    const ReconConfig& cfg, std::uint64_t seed, int threads = 1) {
    auto groups = by_identity(recon_train);
    ReconRegistry reg;
    reg.target = family ? std::string(1, synth::to_char(*family)) : "identity";
    reg.ops.resize(static_cast<std::size_t>(pop.size()));
    for (int k = 0; k < pop.size(); ++k)
        if (!groups.count(k)) throw ConfigError("train_registry: no reconstruction samples for identity " + std::to_string(k));
    const std::uint64_t fam_tag = family ? static_cast<std::uint64_t>(synth::to_char(*family)) : 0;
    parallel_for(static_cast<std::size_t>(pop.size()), threads, [&](std::size_t k) {
        const int id = static_cast<int>(k);
        TargetMap target = family ? family_target(*family, pop, id, params) : TargetMap{};
        reg.ops[k] = train_recon(groups.at(id), cfg,
                                 derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::recon), fam_tag, k}), target,
                                 reg.target);
    });
    return reg;
}

inline void save_registry(const ReconRegistry& reg, const io::fs::path& dir) {
    io::ensure_dir(dir);
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& op : reg.ops) {
        if (op.net.empty()) continue;
        const auto file = "recon_" + std::to_string(op.identity) + ".ckpt";
        nn::save_checkpoint(op.net, (dir / file).string());
        ids.push_back({{"identity", op.identity},
                       {"checkpoint", file},
                       {"epochs", op.meta.epochs},
                       {"heldout_mse", op.meta.heldout_mse},
                       {"heldout_variance", op.meta.heldout_variance},
                       {"seed", op.meta.seed}});
    }
    nlohmann::json m = {{"format", "dfid-recon"}, {"version", 1}, {"target", reg.target}, {"operators", ids}};
    io::write_file(dir / "recon_manifest.json", m.dump(1) + "\n");
}

inline ReconRegistry load_registry(const io::fs::path& dir) {
    ReconRegistry reg;
    try {
        const auto m = nlohmann::json::parse(io::read_file(dir / "recon_manifest.json"));
        if (m.at("format") != "dfid-recon") throw IoError("recon_manifest.json: wrong format tag");
        reg.target = m.at("target").get<std::string>();
        for (const auto& e : m.at("operators")) {
            ReconOperator op;
            op.identity = e.at("identity").get<int>();
            op.net = nn::load_checkpoint((dir / e.at("checkpoint").get<std::string>()).string());
            op.meta.epochs = e.at("epochs").get<int>();
            op.meta.heldout_mse = e.at("heldout_mse").get<double>();
            op.meta.heldout_variance = e.at("heldout_variance").get<double>();
            op.meta.seed = e.at("seed").get<std::uint64_t>();
            op.meta.target = reg.target;
            if (op.identity < 0) throw IoError("recon_manifest.json: negative identity");
            if (static_cast<std::size_t>(op.identity) >= reg.ops.size()) reg.ops.resize(static_cast<std::size_t>(op.identity) + 1);
            reg.ops[static_cast<std::size_t>(op.identity)] = std::move(op);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(dir.string() + "/recon_manifest.json: " + e.what());
    }
    return reg;
}

// ---------------------------------------------------------------------------
// Residuals

struct ResidualRecord {
    std::string sample_id;
    int identity = 0;
    char family_df = 'A';
    double e0_norm = 0;
    double e1_norm = 0;
};

// Optional representation applied before measuring distances (feature-space residuals).
using FeatureMap = std::function<VectorXd(const VectorXd&)>;

// processed[j] is R_df(f_j); e0 = |R(f) - f|, e1 = |R(R_df(f)) - R_df(f)|.
inline std::vector<ResidualRecord> compute_residuals(const ReconRegistry& reg, const std::vector<FaceSample>& authentic,
                                                     const std::vector<std::optional<VectorXd>>& processed,
                                                     char family_df, const FeatureMap& phi = {}) {
    if (processed.size() != authentic.size()) throw ConfigError("compute_residuals: processed list length mismatch");
    auto rep = [&](const VectorXd& v) { return phi ? phi(v) : v; };
    std::vector<ResidualRecord> out;
    out.reserve(authentic.size());
    for (std::size_t j = 0; j < authentic.size(); ++j) {
        const auto& f = authentic[j];
        if (!processed[j])
            throw ConfigError("compute_residuals: sample " + synth::sample_id(f) + " has no processed version");
        const auto& op = reg.at(f.identity);
        const VectorXd& g = *processed[j];
        ResidualRecord r;
        r.sample_id = synth::sample_id(f);
        r.identity = f.identity;
        r.family_df = family_df;
        r.e0_norm = (rep(op.apply(f.x)) - rep(f.x)).norm();
        r.e1_norm = (rep(op.apply(g)) - rep(g)).norm();
        if (!std::isfinite(r.e0_norm) || !std::isfinite(r.e1_norm))
            throw NumericError("compute_residuals: non-finite residual for sample " + r.sample_id);
        out.push_back(std::move(r));
    }
    return out;
}

// Pairs each authentic test face of identity k with the deepfakes of k made
// by the given family, in file order; surplus faces on either side are dropped.
inline std::pair<std::vector<FaceSample>, std::vector<std::optional<VectorXd>>> pair_with_deepfakes(
    const std::vector<FaceSample>& test, GeneratorFamily family) {
    std::map<int, std::vector<const FaceSample*>> auth, fakes;
    for (const auto& s : test) {
        if (s.authentic())
            auth[s.identity].push_back(&s);
        else if (s.provenance->family == family)
            fakes[s.identity].push_back(&s);
    }
    std::pair<std::vector<FaceSample>, std::vector<std::optional<VectorXd>>> out;
    for (const auto& [k, list] : auth) {
        const auto& df = fakes[k];
        for (std::size_t j = 0; j < list.size() && j < df.size(); ++j) {
            out.first.push_back(*list[j]);
            out.second.emplace_back(df[j]->x);
        }
    }
    return out;
}

struct ResidualCdfTable {
    std::vector<double> thresholds;
    std::vector<double> fraction_first;   // e0 below threshold
    std::vector<double> fraction_second;  // e1 below threshold
};

inline ResidualCdfTable residual_cdf_stats(const std::vector<ResidualRecord>& records, const std::vector<double>& thresholds) {
    if (records.empty()) throw ConfigError("residual_cdf_stats: no records");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (!(thresholds[i] > thresholds[i - 1])) throw ConfigError("residual_cdf_stats: thresholds must ascend");
    ResidualCdfTable t;
    t.thresholds = thresholds;
    const double n = static_cast<double>(records.size());
    for (double th : thresholds) {
        double a = 0, b = 0;
        for (const auto& r : records) {
            a += r.e0_norm < th;
            b += r.e1_norm < th;
        }
        t.fraction_first.push_back(a / n);
        t.fraction_second.push_back(b / n);
    }
    return t;
}

inline std::vector<double> e0_quantiles(const std::vector<ResidualRecord>& records, const std::vector<double>& levels) {
    std::vector<double> e0;
    for (const auto& r : records) e0.push_back(r.e0_norm);
    std::sort(e0.begin(), e0.end());
    std::vector<double> out;
    for (double p : levels) out.push_back(metrics::quantile_sorted(e0, p));
    return out;
}

inline std::vector<double> default_thresholds(const std::vector<ResidualRecord>& records) {
    return e0_quantiles(records, {0.1, 0.2, 0.3});
}

inline double near_idem_fraction(const std::vector<ResidualRecord>& records, double tau) {
    if (tau < 0) throw ConfigError("near_idem_fraction: tau must be nonnegative");
    if (records.empty()) return 0.0;
    double hits = 0;
    for (const auto& r : records) hits += r.e1_norm < tau;
    return hits / static_cast<double>(records.size());
}

// Fraction of (e0, e1) pairings across all records with e1 < e0, ties 0.5.
inline double idempotence_separation(const std::vector<ResidualRecord>& records) {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& r : records) {
        s.push_back(r.e0_norm);
        l.push_back(1);
        s.push_back(r.e1_norm);
        l.push_back(0);
    }
    return metrics::auc(s, l);
}

inline std::string residuals_to_csv(const std::vector<ResidualRecord>& records) {
    std::string out = "sample_id,identity,family_df,e0_norm,e1_norm\n";
    for (const auto& r : records)
        out += r.sample_id + ',' + std::to_string(r.identity) + ',' + r.family_df + ',' + io::fmt(r.e0_norm) + ',' +
               io::fmt(r.e1_norm) + '\n';
    return out;
}

inline nlohmann::json cdf_to_json(const ResidualCdfTable& t) {
    return {{"thresholds", t.thresholds}, {"fraction_first", t.fraction_first}, {"fraction_second", t.fraction_second}};
}

struct ResidualSummary {
    std::size_t n = 0;
    double median_e0 = 0;
    double median_e1 = 0;
    double tau = 0;  // e0's 20th percentile
    double near_idem = 0;
    double separation = 0;
    ResidualCdfTable cdf;
};

inline ResidualSummary summarize(const std::vector<ResidualRecord>& records) {
    ResidualSummary s;
    s.n = records.size();
    std::vector<double> e0, e1;
    for (const auto& r : records) {
        e0.push_back(r.e0_norm);
        e1.push_back(r.e1_norm);
    }
    s.median_e0 = metrics::quantile(e0, 0.5);
    s.median_e1 = metrics::quantile(e1, 0.5);
    s.tau = e0_quantiles(records, {0.2}).front();
    s.near_idem = near_idem_fraction(records, s.tau);
    s.separation = idempotence_separation(records);
    s.cdf = residual_cdf_stats(records, default_thresholds(records));
    return s;
}

inline nlohmann::json summary_to_json(const ResidualSummary& s) {
    return {{"n", s.n},
            {"median_e0", s.median_e0},
            {"median_e1", s.median_e1},
            {"tau", s.tau},
            {"near_idem_fraction", s.near_idem},
            {"separation", s.separation},
            {"cdf", cdf_to_json(s.cdf)}};
}

}  // namespace dfid::recon
