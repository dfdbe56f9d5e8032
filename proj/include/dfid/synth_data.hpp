#pragma once
// Synthetic identity-structured "face" vectors and two toy face-swap
// generator families.
//
// Geometry: R^D is split into two small trace subspaces (one per generator
// family) and a face subspace. Identity prototypes and their pose bases live
// in the face subspace; the trace subspaces only carry a small per-identity
// offset plus sensor noise. A generator re-renders the source pose on the
// target identity, attenuates the source's off-manifold residual, and writes
// its family pattern into its own trace subspace.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfid/error.hpp"
#include "dfid/random.hpp"

namespace dfid::synth {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Numeric values match the binary label convention of the contrastive loss.
enum class Label : int { deepfake = 0, authentic = 1 };

enum class GeneratorFamily : char { A = 'A', B = 'B' };

inline char to_char(GeneratorFamily f) { return static_cast<char>(f); }

inline GeneratorFamily family_from_string(const std::string& s) {
    if (s == "A" || s == "a") return GeneratorFamily::A;
    if (s == "B" || s == "b") return GeneratorFamily::B;
    throw ConfigError("unknown generator family '" + s + "'");
}

struct Provenance {
    int source_identity = -1;
    GeneratorFamily family = GeneratorFamily::A;
};

struct FaceSample {
    VectorXd x;
    int identity = 0;
    int session = 0;
    int index = 0;  // position within (identity, session)
    Label label = Label::authentic;
    std::optional<Provenance> provenance;  // set iff deepfake

    bool authentic() const { return label == Label::authentic; }
};

struct TraceBasis {
    MatrixXd family_a;  // [D x t], orthonormal
    MatrixXd family_b;  // [D x t], orthonormal, orthogonal to family_a
    MatrixXd face;      // [D x (D - 2t)], orthonormal complement

    const MatrixXd& of(GeneratorFamily f) const { return f == GeneratorFamily::A ? family_a : family_b; }
};

struct IdentityPrototype {
    int index = 0;
    VectorXd mean;
    MatrixXd pose_basis;  // [D x p], orthonormal columns inside the face subspace
    std::uint64_t texture_seed = 0;
};

struct PopulationParams {
    double mean_scale = 1.0;          // std of prototype means inside the face subspace
    double trace_prior_sigma = 0.05;  // std of prototype means inside the trace subspaces
    double min_separation = 1.0;      // required pairwise distance between means
    int rejection_budget = 1000;
};

struct Population {
    Index dim = 0;
    Index pose_dim = 0;
    TraceBasis traces;
    std::vector<IdentityPrototype> identities;

    int size() const { return static_cast<int>(identities.size()); }

    const IdentityPrototype& at(int k) const {
        if (k < 0 || k >= size()) throw ConfigError("identity index " + std::to_string(k) + " out of range");
        return identities[static_cast<std::size_t>(k)];
    }
};

// Modified Gram-Schmidt on the columns of m, in place.
inline void orthonormalize_columns(MatrixXd& m) {
    for (Index c = 0; c < m.cols(); ++c) {
        for (int pass = 0; pass < 2; ++pass)
            for (Index j = 0; j < c; ++j) m.col(c) -= m.col(j).dot(m.col(c)) * m.col(j);
        const double n = m.col(c).norm();
        if (n < 1e-12) throw NumericError("orthonormalize: degenerate column");
        m.col(c) /= n;
    }
}

inline Index trace_subspace_dim(Index dim, Index pose_dim) { return std::min<Index>(4, (dim - pose_dim) / 3); }

// The trace subspaces are a property of the generator families, not of a
// population, so they come from a fixed seed.
inline TraceBasis make_trace_basis(Index dim, Index pose_dim) {
    constexpr std::uint64_t kFamilySeed = 0x7A11C0DEULL;
    const Index t = trace_subspace_dim(dim, pose_dim);
    Rng rng(derive_seed(kFamilySeed, {static_cast<std::uint64_t>(dim)}));
    MatrixXd full = standard_normal_matrix(dim, dim, rng);
    orthonormalize_columns(full);
    TraceBasis b;
    b.family_a = full.leftCols(t);
    b.family_b = full.middleCols(t, t);
    b.face = full.rightCols(dim - 2 * t);
    return b;
}

inline Population gen_population(int k, Index dim, Index pose_dim, std::uint64_t seed,
                                 const PopulationParams& params = {}) {
    if (k < 2) throw ConfigError("population: need at least 2 identities");
    if (dim < 8) throw ConfigError("population: dimension must be at least 8");
    if (pose_dim < 1 || pose_dim >= dim) throw ConfigError("population: need 1 <= p < D");
    Population pop;
    pop.dim = dim;
    pop.pose_dim = pose_dim;
    pop.traces = make_trace_basis(dim, pose_dim);
    const auto& face = pop.traces.face;
    if (face.cols() <= pose_dim) throw ConfigError("population: face subspace too small for the pose basis");
    const Index t = pop.traces.family_a.cols();

    Rng rng(derive_seed(seed, SeedTag::population));
    int rejections = 0;
    while (static_cast<int>(pop.identities.size()) < k) {
        VectorXd mean = face * (params.mean_scale * standard_normal_vector(face.cols(), rng));
        if (t > 0) {
            mean += pop.traces.family_a * (params.trace_prior_sigma * standard_normal_vector(t, rng));
            mean += pop.traces.family_b * (params.trace_prior_sigma * standard_normal_vector(t, rng));
        }
        bool separated = true;
        for (const auto& other : pop.identities)
            separated = separated && (other.mean - mean).norm() > params.min_separation;
        if (!separated) {
            if (++rejections > params.rejection_budget)
                throw NumericError("population: rejection budget exhausted before reaching " + std::to_string(k) +
                                   " separated identities");
            continue;
        }
        MatrixXd pose = face * standard_normal_matrix(face.cols(), pose_dim, rng);
        orthonormalize_columns(pose);
        IdentityPrototype proto;
        proto.index = static_cast<int>(pop.identities.size());
        proto.mean = std::move(mean);
        proto.pose_basis = std::move(pose);
        proto.texture_seed = rng();
        pop.identities.push_back(std::move(proto));
    }
    return pop;
}

// One authentic face with a given pose latent z.
inline FaceSample sample_face(const IdentityPrototype& proto, const VectorXd& z, double noise_sigma, Rng& rng) {
    FaceSample s;
    s.x = proto.mean;
    if (proto.pose_basis.cols() > 0) s.x += proto.pose_basis * z;
    if (noise_sigma > 0) s.x += noise_sigma * standard_normal_vector(proto.mean.size(), rng);
    s.identity = proto.index;
    s.label = Label::authentic;
    return s;
}

// x = mean + pose_basis z + eps, z ~ N(0, I_p), eps ~ N(0, noise^2 I_D).
// Sessions are assigned round-robin starting at first_session.
inline std::vector<FaceSample> gen_authentic(const IdentityPrototype& proto, int n, int sessions, double noise_sigma,
                                             std::uint64_t seed, int first_session = 1) {
    if (n < 1 || sessions < 1) throw ConfigError("gen_authentic: need n >= 1 and sessions >= 1");
    Rng rng(seed);
    std::vector<FaceSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        FaceSample s = sample_face(proto, standard_normal_vector(proto.pose_basis.cols(), rng), noise_sigma, rng);
        s.session = first_session + i % sessions;
        s.index = i / sessions;
        out.push_back(std::move(s));
    }
    return out;
}

struct GeneratorParams {
    double residual_keep = 0.2;        // fraction of the source's off-pose residual carried over
    double signature_amplitude = 0.5;  // per-coordinate level written into the family trace subspace
    double smoothing = 0.0;            // convex shrinkage toward the target mean
    double renoise_sigma = 0.0;        // fresh isotropic noise added after rendering
    double trace_scale = 1.0;          // 0 turns the generator into a pure identity transfer

    static GeneratorParams defaults(GeneratorFamily f) {
        GeneratorParams p;
        if (f == GeneratorFamily::B) {
            p.residual_keep = 0.6;
            p.signature_amplitude = 0.6;
            p.smoothing = 0.15;
        }
        return p;
    }
};

// Deterministic part of a family-F rendering of x (a face of `source`) onto
// `target`. Applied with source == target this is the family's reconstruction
// operator.
inline VectorXd render(GeneratorFamily family, const VectorXd& x, const IdentityPrototype& source,
                       const IdentityPrototype& target, const TraceBasis& traces, const GeneratorParams& p) {
    if (x.size() != source.mean.size()) throw ConfigError("render: dimension mismatch");
    const double s = std::clamp(p.trace_scale, 0.0, 1.0);
    const double keep = 1.0 - s * (1.0 - p.residual_keep);
    VectorXd dev = x - source.mean;
    VectorXd coeff = source.pose_basis.transpose() * dev;
    VectorXd residual = dev - source.pose_basis * coeff;
    VectorXd out = target.mean + target.pose_basis * coeff + keep * residual;

    const MatrixXd& q = traces.of(family);
    if (q.cols() > 0) {
        VectorXd cur = q.transpose() * (out - target.mean);
        VectorXd want = (1.0 - s) * cur + VectorXd::Constant(q.cols(), s * p.signature_amplitude);
        out += q * (want - cur);
    }
    const double shrink = s * p.smoothing;
    if (shrink > 0) out = target.mean + (1.0 - shrink) * (out - target.mean);
    return out;
}

inline VectorXd apply_generator(GeneratorFamily family, const VectorXd& x, const IdentityPrototype& source,
                                const IdentityPrototype& target, const TraceBasis& traces,
                                const GeneratorParams& p, std::uint64_t seed) {
    VectorXd out = render(family, x, source, target, traces, p);
    const double renoise = std::clamp(p.trace_scale, 0.0, 1.0) * p.renoise_sigma;
    if (renoise > 0) {
        Rng rng(seed);
        out += renoise * standard_normal_vector(out.size(), rng);
    }
    return out;
}

inline FaceSample make_deepfake(GeneratorFamily family, const FaceSample& source, const Population& pop, int target,
                                const GeneratorParams& params, std::uint64_t seed) {
    if (source.identity == target) throw ConfigError("make_deepfake: source and target identity must differ");
    FaceSample out;
    out.x = apply_generator(family, source.x, pop.at(source.identity), pop.at(target), pop.traces, params, seed);
    out.identity = target;
    out.session = source.session;
    out.index = source.index;
    out.label = Label::deepfake;
    out.provenance = Provenance{source.identity, family};
    return out;
}

// ---------------------------------------------------------------------------
// Session-based splits

struct SplitPlan {
    int recon = 5;
    int train = 4;
    int val = 1;

    int total() const { return recon + train + val; }
};

struct DatasetSplit {
    std::vector<std::size_t> recon_train;
    std::vector<std::size_t> detector_train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

// Per identity, the first train+val sessions (in ascending id order) feed the
// detector and the last `recon` of the planned sessions feed the
// reconstruction operator. The validation session(s) are chosen by a seeded
// permutation of the detector sessions, offset by `rotation`, so rotations
// 0..train+val-1 cycle through every detector session. Sessions beyond the
// plan go to test. Deepfakes follow their session, except that a deepfake in a
// reconstruction session is rejected.
inline DatasetSplit split_sessions(const std::vector<FaceSample>& samples, const SplitPlan& plan, std::uint64_t seed,
                                   int rotation = 0) {
    if (plan.recon < 0 || plan.train < 1 || plan.val < 1) throw ConfigError("split: invalid plan");
    std::map<int, std::set<int>> sessions;
    for (const auto& s : samples)
        if (s.authentic()) sessions[s.identity].insert(s.session);

    struct Assignment {
        std::set<int> recon, train, val;
    };
    std::map<int, Assignment> assign;
    for (const auto& [id, ss] : sessions) {
        if (static_cast<int>(ss.size()) < plan.total())
            throw ConfigError("split: identity " + std::to_string(id) + " has " + std::to_string(ss.size()) +
                              " sessions, plan needs " + std::to_string(plan.total()));
        std::vector<int> ordered(ss.begin(), ss.end());
        ordered.resize(static_cast<std::size_t>(plan.total()));
        std::vector<int> detector(ordered.begin(), ordered.begin() + plan.train + plan.val);
        Rng rng(derive_seed(seed, SeedTag::split, static_cast<std::uint64_t>(id)));
        std::vector<int> perm(detector.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
        for (std::size_t i = perm.size() - 1; i > 0; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i);
            std::swap(perm[i], perm[pick(rng)]);
        }
        Assignment a;
        const int n = static_cast<int>(detector.size());
        for (int v = 0; v < plan.val; ++v)
            a.val.insert(detector[static_cast<std::size_t>(perm[static_cast<std::size_t>(((rotation + v) % n + n) % n)])]);
        for (int d : detector)
            if (!a.val.count(d)) a.train.insert(d);
        for (std::size_t i = detector.size(); i < ordered.size(); ++i) a.recon.insert(ordered[i]);
        assign[id] = std::move(a);
    }

    DatasetSplit split;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        auto it = assign.find(s.identity);
        if (it == assign.end()) {
            split.test.push_back(i);
            continue;
        }
        const auto& a = it->second;
        if (a.recon.count(s.session)) {
            if (!s.authentic())
                throw ConfigError("split: deepfake sample in reconstruction session " + std::to_string(s.session) +
                                  " of identity " + std::to_string(s.identity));
            split.recon_train.push_back(i);
        }
        else if (a.train.count(s.session))
            split.detector_train.push_back(i);
        else if (a.val.count(s.session))
            split.validation.push_back(i);
        else
            split.test.push_back(i);
    }
    return split;
}

// ---------------------------------------------------------------------------
// Whole-dataset generation

struct DatasetPlan {
    int identities = 10;
    Index dim = 32;
    Index pose_dim = 4;
    double noise_sigma = 0.25;
    int per_session = 30;           // authentic samples per training-source session
    SplitPlan split;
    int test_sessions = 5;          // sessions of the independent test source
    int per_test_session = 20;
    int test_deepfakes = 100;       // per identity and family
    int teacher_pool = 100;         // authentic and deepfake samples per identity
    int extractor_pool = 100;       // authentic/deepfake pairs per identity
    PopulationParams population;
    GeneratorParams gen_a = GeneratorParams::defaults(GeneratorFamily::A);
    GeneratorParams gen_b = GeneratorParams::defaults(GeneratorFamily::B);

    const GeneratorParams& gen(GeneratorFamily f) const { return f == GeneratorFamily::A ? gen_a : gen_b; }
};

struct Dataset {
    DatasetPlan plan;
    std::uint64_t seed = 0;
    Population population;
    std::vector<FaceSample> train_source;    // authentic, sessions 1..split.total()
    std::vector<FaceSample> test;            // authentic test-source sessions + deepfakes of both families
    std::vector<FaceSample> teacher_pool;    // authentic + family-A deepfakes, disjoint from everything else
    std::vector<FaceSample> extractor_auth;  // pair j = (extractor_auth[j], extractor_fake[j])
    std::vector<FaceSample> extractor_fake;
};

namespace detail {

// Picks a source face of an identity other than `target` from `pool`.
inline const FaceSample& pick_source(const std::vector<FaceSample>& pool, int target, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        const auto& s = pool[pick(rng)];
        if (s.identity != target && s.authentic()) return s;
    }
    throw ConfigError("no source face of another identity available");
}

}  // namespace detail

inline Dataset build_dataset(const DatasetPlan& plan, std::uint64_t seed) {
    Dataset ds;
    ds.plan = plan;
    ds.seed = seed;
    ds.population = gen_population(plan.identities, plan.dim, plan.pose_dim, seed, plan.population);
    const auto& pop = ds.population;
    const int train_sessions = plan.split.total();

    std::vector<FaceSample> test_auth, pool_auth;
    for (const auto& proto : pop.identities) {
        const auto k = static_cast<std::uint64_t>(proto.index);
        auto a = gen_authentic(proto, plan.per_session * train_sessions, train_sessions, plan.noise_sigma,
                               derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::authentic), k, 0}));
        ds.train_source.insert(ds.train_source.end(), a.begin(), a.end());
        auto t = gen_authentic(proto, plan.per_test_session * plan.test_sessions, plan.test_sessions,
                               plan.noise_sigma, derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::test), k}),
                               train_sessions + 1);
        test_auth.insert(test_auth.end(), t.begin(), t.end());
        auto p = gen_authentic(proto, 2 * plan.teacher_pool, 1, plan.noise_sigma,
                               derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::pool), k, 0}), 1001);
        pool_auth.insert(pool_auth.end(), p.begin(), p.end());
    }

    std::sort(ds.train_source.begin(), ds.train_source.end(), [](const FaceSample& a, const FaceSample& b) {
        return std::tie(a.identity, a.session, a.index) < std::tie(b.identity, b.session, b.index);
    });

    // Test: authentic test-source faces, then deepfakes whose sources are
    // test-source faces of other identities.
    ds.test = test_auth;
    for (GeneratorFamily fam : {GeneratorFamily::A, GeneratorFamily::B}) {
        for (const auto& proto : pop.identities) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::deepfake), static_cast<std::uint64_t>(proto.index),
                                       static_cast<std::uint64_t>(to_char(fam))}));
            for (int j = 0; j < plan.test_deepfakes; ++j) {
                const auto& src = detail::pick_source(test_auth, proto.index, rng);
                auto df = make_deepfake(fam, src, pop, proto.index, plan.gen(fam), rng());
                df.session = train_sessions + 1 + j % plan.test_sessions;
                df.index = j / plan.test_sessions;
                ds.test.push_back(std::move(df));
            }
        }
    }

    // Teacher pool: first half of each identity's pool faces stay authentic,
    // the second half serve as sources for family-A deepfakes of other identities.
    for (const auto& s : pool_auth)
        if (s.index < plan.teacher_pool) ds.teacher_pool.push_back(s);
    std::vector<FaceSample> pool_sources;
    for (const auto& s : pool_auth)
        if (s.index >= plan.teacher_pool) pool_sources.push_back(s);
    for (const auto& proto : pop.identities) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::teacher), static_cast<std::uint64_t>(proto.index)}));
        for (int j = 0; j < plan.teacher_pool; ++j) {
            auto df = make_deepfake(GeneratorFamily::A, detail::pick_source(pool_sources, proto.index, rng), pop,
                                    proto.index, plan.gen_a, rng());
            df.session = 1001;
            df.index = j;
            ds.teacher_pool.push_back(std::move(df));
        }
    }

    // Extractor pairs: an authentic face of identity i and a family-A deepfake
    // of i whose source face (another identity) was drawn with the same pose
    // latent, so the two differ in identity-consistent traces rather than pose.
    for (const auto& proto : pop.identities) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(SeedTag::student), static_cast<std::uint64_t>(proto.index)}));
        std::uniform_int_distribution<int> other(0, pop.size() - 2);
        for (int j = 0; j < plan.extractor_pool; ++j) {
            const VectorXd z = standard_normal_vector(plan.pose_dim, rng);
            int m = other(rng);
            if (m >= proto.index) ++m;
            FaceSample a = sample_face(proto, z, plan.noise_sigma, rng);
            FaceSample src = sample_face(pop.at(m), z, plan.noise_sigma, rng);
            a.session = src.session = 2001;
            a.index = src.index = j;
            auto df = make_deepfake(GeneratorFamily::A, src, pop, proto.index, plan.gen_a, rng());
            ds.extractor_auth.push_back(std::move(a));
            ds.extractor_fake.push_back(std::move(df));
        }
    }
    return ds;
}

}  // namespace dfid::synth
