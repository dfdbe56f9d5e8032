#pragma once
// Gaussian identity-conditioning model: each identity k draws its own
// authentic/deepfake feature means around population priors, and we compare
// the Bayes error of per-identity thresholds against a single pooled one,
// both in closed form and by Monte Carlo.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <thread>
#include <vector>

#include "dfid/error.hpp"
#include "dfid/random.hpp"

namespace dfid::theory {

struct PopulationSpec {
    double u0 = 0.0;        // prior mean of authentic feature means
    double u1 = 1.0;        // prior mean of deepfake feature means
    double sigma = 1.0;     // observation std
    double sigma_mu = 0.0;  // prior std of the per-identity means
    int k = 5;              // identity count
    // Balanced classes and unit costs are fixed by the model.
    static constexpr double prior_h0 = 0.5;
    static constexpr double prior_h1 = 0.5;

    void validate() const {
        if (!(sigma > 0.0)) throw ConfigError("theory: sigma must be positive");
        if (!(sigma_mu >= 0.0)) throw ConfigError("theory: sigma_mu must be non-negative");
        if (k < 1) throw ConfigError("theory: need at least one identity");
        if (!(u1 > u0)) throw ConfigError("theory: require u1 > u0");
    }

    double pooled_threshold() const { return 0.5 * (u0 + u1); }
};

struct IdentityHypotheses {
    int k = 0;
    double mu0 = 0.0;
    double mu1 = 0.0;
    double threshold = 0.0;  // (mu0 + mu1) / 2
    double d = 0.0;          // (mu1 - mu0) / (2 sigma)
    double alpha = 0.0;      // [(u0 - mu0) + (u1 - mu1)] / (2 sigma)
};

inline IdentityHypotheses make_hypotheses(int k, double mu0, double mu1, const PopulationSpec& spec) {
    IdentityHypotheses h;
    h.k = k;
    h.mu0 = mu0;
    h.mu1 = mu1;
    h.threshold = 0.5 * (mu0 + mu1);
    h.d = (mu1 - mu0) / (2.0 * spec.sigma);
    h.alpha = ((spec.u0 - mu0) + (spec.u1 - mu1)) / (2.0 * spec.sigma);
    return h;
}

struct StdNormal {
    double cdf;
    double pdf;
    double second_deriv;  // Phi''(x) = -x phi(x)
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

inline StdNormal std_normal(double x) {
    const double pdf = normal_pdf(x);
    return {normal_cdf(x), pdf, -x * pdf};
}

inline std::vector<IdentityHypotheses> sample_identities(const PopulationSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<IdentityHypotheses> out;
    out.reserve(static_cast<std::size_t>(spec.k));
    for (int k = 0; k < spec.k; ++k) {
        const double z0 = normal(rng);
        const double z1 = normal(rng);
        out.push_back(make_hypotheses(k, spec.u0 + spec.sigma_mu * z0, spec.u1 + spec.sigma_mu * z1, spec));
    }
    return out;
}

namespace detail {
inline void require_nonempty(const std::vector<IdentityHypotheses>& h) {
    if (h.empty()) throw ConfigError("theory: no identities");
}
}  // namespace detail

// Per-identity midpoint thresholds. The verbatim rule always decides "deepfake"
// above the midpoint, giving Phi(-d_k) even when a draw has mu1 < mu0;
// sign_aware flips the direction for such draws, giving Phi(-|d_k|).
inline double pe_ind_closed(const std::vector<IdentityHypotheses>& hyps, const PopulationSpec& spec,
                            bool sign_aware = false) {
    detail::require_nonempty(hyps);
    (void)spec;
    double s = 0.0;
    for (const auto& h : hyps) s += normal_cdf(-(sign_aware ? std::abs(h.d) : h.d));
    return s / static_cast<double>(hyps.size());
}

inline double pe_com_closed(const std::vector<IdentityHypotheses>& hyps, const PopulationSpec& spec) {
    detail::require_nonempty(hyps);
    const double t = spec.pooled_threshold();
    double s = 0.0;
    for (const auto& h : hyps)
        s += 1.0 - normal_cdf((t - h.mu0) / spec.sigma) + normal_cdf((t - h.mu1) / spec.sigma);
    return s / (2.0 * static_cast<double>(hyps.size()));
}

// Second-order expansion of the pooled error around d_k.
inline double pe_taylor(const std::vector<IdentityHypotheses>& hyps, const PopulationSpec& spec) {
    detail::require_nonempty(hyps);
    double corr = 0.0;
    for (const auto& h : hyps) corr += -std_normal(h.d).second_deriv * h.alpha * h.alpha;
    return pe_ind_closed(hyps, spec) + corr / (2.0 * static_cast<double>(hyps.size()));
}

enum class DecisionRule { per_identity, pooled };

struct MonteCarloEstimate {
    double estimate = 0.0;
    double standard_error = 0.0;
    std::int64_t n = 0;
};

inline double binomial_se(double p, std::int64_t n) {
    return std::sqrt(std::max(0.0, p * (1.0 - p)) / static_cast<double>(n));
}

namespace detail {

inline bool decide_h1(double x, const IdentityHypotheses& h, const PopulationSpec& spec, DecisionRule rule,
                      bool sign_aware) {
    if (rule == DecisionRule::pooled) return x > spec.pooled_threshold();
    if (sign_aware && h.mu1 < h.mu0) return x < h.threshold;
    return x > h.threshold;
}

}  // namespace detail

// Empirical error of a threshold rule. Each trial picks an identity uniformly,
// a hypothesis with probability 1/2, and draws x ~ N(mu_h, sigma^2). When
// `groups` holds several identity sets, trial t uses groups[t % groups.size()].
inline MonteCarloEstimate pe_monte_carlo(const std::vector<std::vector<IdentityHypotheses>>& groups,
                                         const PopulationSpec& spec, DecisionRule rule, std::int64_t n,
                                         std::uint64_t seed, bool sign_aware = false) {
    if (n < 1000) throw ConfigError("monte carlo: need at least 1000 samples");
    if (groups.empty()) throw ConfigError("monte carlo: no identities");
    for (const auto& g : groups) detail::require_nonempty(g);
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::int64_t errors = 0;
    for (std::int64_t t = 0; t < n; ++t) {
        const auto& hyps = groups[static_cast<std::size_t>(t % static_cast<std::int64_t>(groups.size()))];
        std::uniform_int_distribution<std::size_t> pick(0, hyps.size() - 1);
        const auto& h = hyps[pick(rng)];
        const bool is_h1 = coin(rng);
        const double x = (is_h1 ? h.mu1 : h.mu0) + spec.sigma * normal(rng);
        if (detail::decide_h1(x, h, spec, rule, sign_aware) != is_h1) ++errors;
    }
    MonteCarloEstimate e;
    e.n = n;
    e.estimate = static_cast<double>(errors) / static_cast<double>(n);
    e.standard_error = binomial_se(e.estimate, n);
    return e;
}

inline MonteCarloEstimate pe_monte_carlo(const std::vector<IdentityHypotheses>& hyps, const PopulationSpec& spec,
                                         DecisionRule rule, std::int64_t n, std::uint64_t seed,
                                         bool sign_aware = false) {
    return pe_monte_carlo(std::vector<std::vector<IdentityHypotheses>>{hyps}, spec, rule, n, seed, sign_aware);
}

struct TheoryReport {
    double pe_ind_closed = 0.0;
    double pe_com_closed = 0.0;
    double pe_taylor = 0.0;
    double pe_ind_mc = 0.0;
    double pe_com_mc = 0.0;
    double se_ind = 0.0;
    double se_com = 0.0;
    std::int64_t n_samples = 0;
    bool sign_aware = false;
    std::vector<IdentityHypotheses> identities;
};

inline TheoryReport evaluate(const PopulationSpec& spec, std::int64_t mc_n, std::uint64_t seed,
                             bool sign_aware = false) {
    TheoryReport r;
    r.sign_aware = sign_aware;
    r.identities = sample_identities(spec, derive_seed(seed, SeedTag::theory));
    r.pe_ind_closed = pe_ind_closed(r.identities, spec, sign_aware);
    r.pe_com_closed = pe_com_closed(r.identities, spec);
    r.pe_taylor = pe_taylor(r.identities, spec);
    if (mc_n > 0) {
        auto ind = pe_monte_carlo(r.identities, spec, DecisionRule::per_identity, mc_n,
                                  derive_seed(seed, SeedTag::monte_carlo, 0), sign_aware);
        auto com = pe_monte_carlo(r.identities, spec, DecisionRule::pooled, mc_n,
                                  derive_seed(seed, SeedTag::monte_carlo, 1), sign_aware);
        r.pe_ind_mc = ind.estimate;
        r.se_ind = ind.standard_error;
        r.pe_com_mc = com.estimate;
        r.se_com = com.standard_error;
        r.n_samples = mc_n;
    }
    return r;
}

struct SweepGrid {
    std::vector<double> sigma_mu;
    std::vector<double> delta_u;  // u1 - u0, absolute units
    double u0 = 0.0;
    double sigma = 1.0;
    int k = 5;
    int reps = 100;
    std::int64_t mc_n = 0;  // 0 disables the Monte Carlo validation columns
    std::uint64_t seed = 0;
    bool sign_aware = false;
    int threads = 1;
};

struct SweepRow {
    double sigma_mu = 0.0;
    double delta_u = 0.0;
    double pe_ind = 0.0;
    double pe_com = 0.0;
    double gap = 0.0;
    double pe_ind_mc = 0.0;
    double pe_com_mc = 0.0;
    double se_ind = 0.0;
    double se_com = 0.0;
};

// Rep r always draws from derive_seed(seed, theory, r), so every grid cell sees
// the same standard-normal draws scaled by its own sigma_mu.
inline SweepRow sweep_cell(const SweepGrid& g, double delta, double smu) {
    PopulationSpec spec{g.u0, g.u0 + delta, g.sigma, smu, g.k};
    spec.validate();
    SweepRow row;
    row.sigma_mu = smu;
    row.delta_u = delta;
    std::vector<std::vector<IdentityHypotheses>> groups;
    groups.reserve(static_cast<std::size_t>(g.reps));
    for (int r = 0; r < g.reps; ++r) {
        auto hyps = sample_identities(spec, derive_seed(g.seed, SeedTag::theory, static_cast<std::uint64_t>(r)));
        row.pe_ind += pe_ind_closed(hyps, spec, g.sign_aware);
        row.pe_com += pe_com_closed(hyps, spec);
        if (g.mc_n > 0) groups.push_back(std::move(hyps));
    }
    row.pe_ind /= g.reps;
    row.pe_com /= g.reps;
    row.gap = row.pe_com - row.pe_ind;
    if (g.mc_n > 0) {
        const auto cell = static_cast<std::uint64_t>(std::llround(delta * 1e6)) * 1000003ULL +
                          static_cast<std::uint64_t>(std::llround(smu * 1e6));
        auto ind = pe_monte_carlo(groups, spec, DecisionRule::per_identity, g.mc_n,
                                  derive_seed(g.seed, {static_cast<std::uint64_t>(SeedTag::monte_carlo), cell, 0}),
                                  g.sign_aware);
        auto com = pe_monte_carlo(groups, spec, DecisionRule::pooled, g.mc_n,
                                  derive_seed(g.seed, {static_cast<std::uint64_t>(SeedTag::monte_carlo), cell, 1}),
                                  g.sign_aware);
        row.pe_ind_mc = ind.estimate;
        row.se_ind = ind.standard_error;
        row.pe_com_mc = com.estimate;
        row.se_com = com.standard_error;
    }
    return row;
}

inline std::vector<SweepRow> sweep(const SweepGrid& g) {
    if (g.reps < 100) throw ConfigError("sweep: need at least 100 reps");
    if (g.sigma_mu.empty() || g.delta_u.empty()) throw ConfigError("sweep: empty grid");
    std::vector<double> deltas = g.delta_u, smus = g.sigma_mu;
    std::sort(deltas.begin(), deltas.end());
    std::sort(smus.begin(), smus.end());
    std::vector<SweepRow> rows(deltas.size() * smus.size());
    const std::size_t workers = static_cast<std::size_t>(std::max(1, g.threads));
    auto run = [&](std::size_t w) {
        for (std::size_t i = w; i < rows.size(); i += workers)
            rows[i] = sweep_cell(g, deltas[i / smus.size()], smus[i % smus.size()]);
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    }
    return rows;
}

}  // namespace dfid::theory
