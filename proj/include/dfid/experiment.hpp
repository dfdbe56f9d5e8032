#pragma once
// Key-value experiment config, the per-seed pipeline and report emission.

#include <map>
#include <set>

#include "dfid/dataset_io.hpp"
#include "dfid/detector.hpp"
#include "dfid/theory_sim.hpp"

namespace dfid::eval {

using Eigen::Index;
using Eigen::VectorXd;
using nlohmann::json;
using synth::FaceSample;
using synth::GeneratorFamily;

inline const std::vector<std::string>& known_modes() {
    static const std::vector<std::string> m{"proposed", "ablate_idempotence_only", "ablate_idfeatures_only",
                                            "ablate_identity", "mismatch_matrix", "theory"};
    return m;
}

struct TheorySettings {
    theory::PopulationSpec spec;         // worked configuration for theory_report.json
    std::int64_t mc_n = 1000000;
    std::vector<double> sweep_sigma_mu{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<double> sweep_delta_u{0.5, 1.0, 1.5};
    int sweep_reps = 10000;
    std::int64_t sweep_mc_n = 0;
    bool sign_aware = true;
};

struct ExperimentConfig {
    std::vector<std::string> modes{"proposed"};
    std::vector<std::uint64_t> seeds{1};
    synth::DatasetPlan plan;
    recon::ReconConfig recon;
    GeneratorFamily recon_family = GeneratorFamily::A;
    GeneratorFamily test_family = GeneratorFamily::A;
    features::TeacherConfig teacher;
    features::StudentConfig student;
    features::DistillConfig distill;
    detect::DetectorConfig detector;
    int folds = 4;
    bool export_vectors = true;
    TheorySettings theory;
    int threads = 1;

    void validate() const {
        if (modes.empty()) throw ConfigError("config: no modes");
        for (const auto& m : modes)
            if (std::find(known_modes().begin(), known_modes().end(), m) == known_modes().end())
                throw ConfigError("config: unknown mode '" + m + "'");
        if (seeds.empty()) throw ConfigError("config: no seeds");
        if (folds < 1 || folds > plan.split.train + plan.split.val)
            throw ConfigError("config: folds must lie in [1, split.train + split.val]");
        distill.validate();
        detector.validate();
        theory.spec.validate();
    }
};

// ---------------------------------------------------------------------------
// Key-value config

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, sep);) {
        auto t = trim(part);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

inline double to_double(const std::string& v, const std::string& key) {
    try {
        return io::parse_double(v, key);
    } catch (const IoError&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
    }
}

inline long to_int(const std::string& v, const std::string& key) {
    try {
        return io::parse_int(v, key);
    } catch (const IoError&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
    }
}

inline bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

inline std::string join(const std::vector<double>& v) {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : ",") + io::fmt(x);
    return out;
}

template <typename T>
std::string join_int(const std::vector<T>& v) {
    std::string out;
    for (auto x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
    return out;
}

}  // namespace detail

struct KeyBinding {
    std::string key;
    std::string help;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

template <typename Ref>
KeyBinding real(std::string key, std::string help, Ref ref) {
    auto k = key;
    return {std::move(key), std::move(help),
            [ref, k](ExperimentConfig& c, const std::string& v) { ref(c) = to_double(v, k); },
            [ref](const ExperimentConfig& c) { return io::fmt(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
KeyBinding integer(std::string key, std::string help, Ref ref) {
    auto k = key;
    return {std::move(key), std::move(help),
            [ref, k](ExperimentConfig& c, const std::string& v) {
                ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(to_int(v, k));
            },
            [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
KeyBinding boolean(std::string key, std::string help, Ref ref) {
    auto k = key;
    return {std::move(key), std::move(help),
            [ref, k](ExperimentConfig& c, const std::string& v) { ref(c) = to_bool(v, k); },
            [ref](const ExperimentConfig& c) { return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); }};
}

template <typename Ref>
KeyBinding real_list(std::string key, std::string help, Ref ref) {
    auto k = key;
    return {std::move(key), std::move(help),
            [ref, k](ExperimentConfig& c, const std::string& v) {
                std::vector<double> out;
                for (const auto& p : split(v, ',')) out.push_back(to_double(p, k));
                if (out.empty()) throw ConfigError("config key '" + k + "' is empty");
                ref(c) = out;
            },
            [ref](const ExperimentConfig& c) { return join(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
KeyBinding index_list(std::string key, std::string help, Ref ref) {
    auto k = key;
    return {std::move(key), std::move(help),
            [ref, k](ExperimentConfig& c, const std::string& v) {
                std::vector<Index> out;
                for (const auto& p : split(v, ',')) {
                    const long n = to_int(p, k);
                    if (n < 1) throw ConfigError("config key '" + k + "': widths must be positive");
                    out.push_back(static_cast<Index>(n));
                }
                ref(c) = out;
            },
            [ref](const ExperimentConfig& c) { return join_int(ref(const_cast<ExperimentConfig&>(c))); }};
}

inline KeyBinding family(std::string key, std::string help, GeneratorFamily ExperimentConfig::*field) {
    return {std::move(key), std::move(help),
            [field](ExperimentConfig& c, const std::string& v) { c.*field = synth::family_from_string(v); },
            [field](const ExperimentConfig& c) { return std::string(1, synth::to_char(c.*field)); }};
}

inline void add_generator(std::vector<KeyBinding>& out, const std::string& prefix, GeneratorFamily f) {
    auto gen = [f](ExperimentConfig& c) -> synth::GeneratorParams& { return f == GeneratorFamily::A ? c.plan.gen_a : c.plan.gen_b; };
    out.push_back(real(prefix + ".residual_keep", "fraction of the source face's off-pose residual kept by the swap",
                       [gen](ExperimentConfig& c) -> double& { return gen(c).residual_keep; }));
    out.push_back(real(prefix + ".signature_amplitude", "per-coordinate level written into the family's trace subspace",
                       [gen](ExperimentConfig& c) -> double& { return gen(c).signature_amplitude; }));
    out.push_back(real(prefix + ".smoothing", "shrinkage of the rendered face toward the target identity mean",
                       [gen](ExperimentConfig& c) -> double& { return gen(c).smoothing; }));
    out.push_back(real(prefix + ".renoise_sigma", "std of fresh isotropic noise added after rendering",
                       [gen](ExperimentConfig& c) -> double& { return gen(c).renoise_sigma; }));
    out.push_back(real(prefix + ".trace_scale", "0 turns the generator into a pure identity transfer, 1 is the full family trace",
                       [gen](ExperimentConfig& c) -> double& { return gen(c).trace_scale; }));
}

}  // namespace detail

inline const std::vector<KeyBinding>& config_keys() {
    using namespace detail;
    using C = ExperimentConfig;
    static const std::vector<KeyBinding> keys = [] {
        std::vector<KeyBinding> k;
        k.push_back({"mode", "comma-separated list of: " + [] {
                         std::string s;
                         for (const auto& m : known_modes()) s += (s.empty() ? "" : ", ") + m;
                         return s;
                     }(),
                     [](C& c, const std::string& v) { c.modes = split(v, ','); },
                     [](const C& c) {
                         std::string s;
                         for (const auto& m : c.modes) s += (s.empty() ? "" : ",") + m;
                         return s;
                     }});
        k.push_back({"seeds", "comma-separated master seeds; --seed replaces the list with one seed",
                     [](C& c, const std::string& v) {
                         c.seeds.clear();
                         for (const auto& p : split(v, ',')) {
                             const long s = to_int(p, "seeds");
                             if (s < 0) throw ConfigError("config key 'seeds': seeds must be non-negative");
                             c.seeds.push_back(static_cast<std::uint64_t>(s));
                         }
                     },
                     [](const C& c) { return join_int(c.seeds); }});
        k.push_back(integer("folds", "session rotations of the validation session (1 to split.train + split.val)",
                            [](C& c) -> int& { return c.folds; }));
        k.push_back(boolean("export_vectors", "write vectors.csv with the first seed's test-set features",
                            [](C& c) -> bool& { return c.export_vectors; }));

        k.push_back(integer("dataset.identities", "number of identities K", [](C& c) -> int& { return c.plan.identities; }));
        k.push_back(integer("dataset.dim", "face vector dimension D", [](C& c) -> Index& { return c.plan.dim; }));
        k.push_back(integer("dataset.pose_dim", "pose subspace dimension", [](C& c) -> Index& { return c.plan.pose_dim; }));
        k.push_back(real("dataset.noise_sigma", "per-coordinate observation noise std", [](C& c) -> double& { return c.plan.noise_sigma; }));
        k.push_back(integer("dataset.per_session", "authentic faces per identity and training session",
                            [](C& c) -> int& { return c.plan.per_session; }));
        k.push_back(integer("dataset.test_sessions", "independent test sessions per identity",
                            [](C& c) -> int& { return c.plan.test_sessions; }));
        k.push_back(integer("dataset.per_test_session", "authentic faces per identity and test session",
                            [](C& c) -> int& { return c.plan.per_test_session; }));
        k.push_back(integer("dataset.test_deepfakes", "test deepfakes per identity and generator family",
                            [](C& c) -> int& { return c.plan.test_deepfakes; }));
        k.push_back(integer("dataset.teacher_pool", "authentic (and as many deepfake) teacher faces per identity",
                            [](C& c) -> int& { return c.plan.teacher_pool; }));
        k.push_back(integer("dataset.extractor_pool", "authentic/deepfake distillation pairs per identity",
                            [](C& c) -> int& { return c.plan.extractor_pool; }));
        k.push_back(integer("split.recon", "training sessions per identity reserved for reconstruction operators",
                            [](C& c) -> int& { return c.plan.split.recon; }));
        k.push_back(integer("split.train", "training sessions per identity for the detector",
                            [](C& c) -> int& { return c.plan.split.train; }));
        k.push_back(integer("split.val", "validation sessions per identity", [](C& c) -> int& { return c.plan.split.val; }));
        k.push_back(real("population.mean_scale", "std of identity means in the face subspace",
                         [](C& c) -> double& { return c.plan.population.mean_scale; }));
        k.push_back(real("population.trace_prior_sigma", "std of identity-mean offsets inside the trace subspaces",
                         [](C& c) -> double& { return c.plan.population.trace_prior_sigma; }));
        k.push_back(real("population.min_separation", "minimum distance between identity means",
                         [](C& c) -> double& { return c.plan.population.min_separation; }));
        k.push_back(integer("population.rejection_budget", "redraws allowed per identity to meet the separation",
                            [](C& c) -> int& { return c.plan.population.rejection_budget; }));
        add_generator(k, "gen_a", GeneratorFamily::A);
        add_generator(k, "gen_b", GeneratorFamily::B);

        k.push_back(family("recon.family", "generator family the reconstruction operators emulate (A or B)", &C::recon_family));
        k.push_back(family("test.family", "generator family of the test deepfakes (A or B)", &C::test_family));
        k.push_back(index_list("recon.hidden", "encoder widths before the bottleneck (mirrored in the decoder)",
                               [](C& c) -> std::vector<Index>& { return c.recon.hidden; }));
        k.push_back(integer("recon.bottleneck", "autoencoder bottleneck width", [](C& c) -> Index& { return c.recon.bottleneck; }));
        k.push_back(integer("recon.epochs", "reconstruction training epochs", [](C& c) -> int& { return c.recon.epochs; }));
        k.push_back(real("recon.lr", "reconstruction Adam learning rate", [](C& c) -> double& { return c.recon.lr; }));
        k.push_back(integer("recon.batch_size", "reconstruction minibatch size", [](C& c) -> Index& { return c.recon.batch_size; }));
        k.push_back(real("recon.heldout_fraction", "fraction of each identity's recon faces held out for MSE",
                         [](C& c) -> double& { return c.recon.heldout_fraction; }));

        k.push_back(index_list("teacher.hidden", "teacher hidden widths; the last is the penultimate feature width",
                               [](C& c) -> std::vector<Index>& { return c.teacher.hidden; }));
        k.push_back(integer("teacher.feature_len", "teacher adapter output length (must equal student.feature_len)",
                            [](C& c) -> Index& { return c.teacher.feature_len; }));
        k.push_back(integer("teacher.epochs", "teacher pretraining epochs", [](C& c) -> int& { return c.teacher.epochs; }));
        k.push_back(real("teacher.lr", "teacher Adam learning rate", [](C& c) -> double& { return c.teacher.lr; }));
        k.push_back(integer("teacher.batch_size", "teacher minibatch size", [](C& c) -> Index& { return c.teacher.batch_size; }));
        k.push_back(real("teacher.heldout_fraction", "fraction of the teacher pool held out for the accuracy check",
                         [](C& c) -> double& { return c.teacher.heldout_fraction; }));
        k.push_back(real("teacher.accuracy_floor", "minimum held-out teacher accuracy; below it pretraining fails",
                         [](C& c) -> double& { return c.teacher.accuracy_floor; }));

        k.push_back(integer("student.backbone", "width of the frozen identity-pretrained first layer",
                            [](C& c) -> Index& { return c.student.backbone; }));
        k.push_back(integer("student.tail", "optional tunable hidden width between backbone and head (0 = none)",
                            [](C& c) -> Index& { return c.student.tail; }));
        k.push_back(integer("student.feature_len", "student feature length F", [](C& c) -> Index& { return c.student.feature_len; }));
        k.push_back(integer("student.backbone_epochs", "identity-classification epochs for the backbone",
                            [](C& c) -> int& { return c.student.backbone_epochs; }));
        k.push_back(real("student.backbone_lr", "backbone pretraining learning rate",
                         [](C& c) -> double& { return c.student.backbone_lr; }));
        k.push_back({"distill.schedule", "phases as EPOCHS:ALPHA,BETA separated by ';'",
                     [](C& c, const std::string& v) { c.distill.schedule = features::parse_schedule(v); },
                     [](const C& c) { return features::format_schedule(c.distill.schedule); }});
        k.push_back(real("distill.m_h", "hinge margin of the trace-contrast loss", [](C& c) -> double& { return c.distill.m_h; }));
        k.push_back(real("distill.lr", "distillation Adam learning rate", [](C& c) -> double& { return c.distill.lr; }));
        k.push_back(integer("distill.batch_size", "distillation minibatch size", [](C& c) -> Index& { return c.distill.batch_size; }));

        k.push_back(integer("detector.id_len", "identity vector length q (0 removes the identity decoder)",
                            [](C& c) -> Index& { return c.detector.id_len; }));
        k.push_back(integer("detector.head_out", "Siamese output length s", [](C& c) -> Index& { return c.detector.head_out; }));
        k.push_back(real("detector.margin", "contrastive margin m", [](C& c) -> double& { return c.detector.margin; }));
        k.push_back({"detector.lr_grid", "learning-rate grid LO:HI:N (N evenly spaced values)",
                     [](C& c, const std::string& v) { c.detector.lr_grid = detect::parse_lr_grid(v); },
                     [](const C& c) {
                         const auto& g = c.detector.lr_grid;
                         return io::fmt(g.front()) + ':' + io::fmt(g.back()) + ':' + std::to_string(g.size());
                     }});
        k.push_back(integer("detector.epochs", "epochs per grid learning rate", [](C& c) -> int& { return c.detector.epochs; }));
        k.push_back(integer("detector.batch_size", "detector minibatch size", [](C& c) -> Index& { return c.detector.batch_size; }));
        k.push_back({"detector.activation", "Siamese layer activation: linear, relu or tanh",
                     [](C& c, const std::string& v) { c.detector.activation = nn::activation_from_string(v); },
                     [](const C& c) { return std::string(nn::to_string(c.detector.activation)); }});
        k.push_back(boolean("detector.standardize", "standardize extractor features on the training pairs before the head",
                            [](C& c) -> bool& { return c.detector.standardize; }));
        k.push_back(real("detector.decoder_init_sigma", "std of the identity decoder's initial entries",
                         [](C& c) -> double& { return c.detector.decoder_init_sigma; }));

        k.push_back(real("theory.u0", "prior mean of authentic feature means", [](C& c) -> double& { return c.theory.spec.u0; }));
        k.push_back(real("theory.u1", "prior mean of deepfake feature means", [](C& c) -> double& { return c.theory.spec.u1; }));
        k.push_back(real("theory.sigma", "observation std", [](C& c) -> double& { return c.theory.spec.sigma; }));
        k.push_back(real("theory.sigma_mu", "std of per-identity means", [](C& c) -> double& { return c.theory.spec.sigma_mu; }));
        k.push_back(integer("theory.k", "identities in the theory model", [](C& c) -> int& { return c.theory.spec.k; }));
        k.push_back(integer("theory.mc_n", "Monte Carlo draws for theory_report.json (0 skips)",
                            [](C& c) -> std::int64_t& { return c.theory.mc_n; }));
        k.push_back(real_list("theory.sweep_sigma_mu", "sigma_mu values of the sweep",
                              [](C& c) -> std::vector<double>& { return c.theory.sweep_sigma_mu; }));
        k.push_back(real_list("theory.sweep_delta_u", "u1 - u0 values of the sweep",
                              [](C& c) -> std::vector<double>& { return c.theory.sweep_delta_u; }));
        k.push_back(integer("theory.sweep_reps", "identity draws averaged per sweep cell (>= 100)",
                            [](C& c) -> int& { return c.theory.sweep_reps; }));
        k.push_back(integer("theory.sweep_mc_n", "Monte Carlo draws per sweep cell (0 leaves the MC columns at 0)",
                            [](C& c) -> std::int64_t& { return c.theory.sweep_mc_n; }));
        k.push_back(boolean("theory.sign_aware", "per-identity rule decides on the correct side when mu1 < mu0",
                            [](C& c) -> bool& { return c.theory.sign_aware; }));
        return k;
    }();
    return keys;
}

// "key = value" lines; '#' starts a comment. Unknown or repeated keys are errors.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::set<std::string> seen;
    std::stringstream ss(text);
    int line_no = 0;
    for (std::string line; std::getline(ss, line);) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto t = detail::trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        auto key = detail::trim(t.substr(0, eq));
        auto value = detail::trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(line_no) + ": repeated key '" + key + "'");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

inline void apply_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
    for (const auto& b : config_keys())
        if (b.key == key) {
            b.set(c, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

inline ExperimentConfig config_from_text(const std::string& text) {
    ExperimentConfig c;
    for (const auto& [k, v] : parse_key_values(text)) apply_key(c, k, v);
    if (c.teacher.feature_len != c.student.feature_len)
        throw ConfigError("teacher.feature_len and student.feature_len must match");
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const io::fs::path& path) { return config_from_text(io::read_file(path)); }

inline std::string config_to_text(const ExperimentConfig& c) {
    std::string out;
    for (const auto& b : config_keys()) out += b.key + " = " + b.get(c) + "\n";
    return out;
}

inline json config_to_json(const ExperimentConfig& c) {
    json j = json::object();
    for (const auto& b : config_keys()) j[b.key] = b.get(c);
    return j;
}

// ---------------------------------------------------------------------------
// Per-seed pipeline

struct SeedArtifacts {
    std::uint64_t seed = 0;
    synth::Dataset ds;
    std::vector<FaceSample> recon_train;
    std::shared_ptr<const recon::ReconRegistry> ops;
    detect::Extractors extractors;
};

inline std::vector<FaceSample> pick(const std::vector<FaceSample>& all, const std::vector<std::size_t>& idx) {
    std::vector<FaceSample> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all[i]);
    return out;
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        throw NumericError(name + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(name + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError(name + ": " + e.what());
    }
}

inline SeedArtifacts build_artifacts(const ExperimentConfig& c, std::uint64_t seed, bool need_detector = true) {
    SeedArtifacts a;
    a.seed = seed;
    a.ds = stage("synth", [&] { return synth::build_dataset(c.plan, seed); });
    const auto split = stage("split", [&] { return synth::split_sessions(a.ds.train_source, c.plan.split, seed); });
    a.recon_train = pick(a.ds.train_source, split.recon_train);
    a.ops = stage("train-recon", [&] {
        return std::make_shared<const recon::ReconRegistry>(recon::train_registry(
            a.recon_train, a.ds.population, c.recon_family, c.plan.gen(c.recon_family), c.recon, seed, c.threads));
    });
    if (!need_detector) return a;
    auto teacher = stage("pretrain-teacher", [&] { return features::pretrain_teacher(a.ds.teacher_pool, c.teacher, seed); });
    auto student = stage("train-extractor", [&] {
        auto s0 = features::init_student(a.ds.extractor_auth, c.plan.identities, c.student, seed);
        return features::train_student(features::make_pairs(teacher, a.ds.extractor_auth, a.ds.extractor_fake), s0,
                                       c.distill, seed);
    });
    a.extractors.teacher = std::make_shared<const features::TeacherNet>(std::move(teacher));
    a.extractors.student = std::make_shared<const features::StudentNet>(std::move(student));
    return a;
}

// Authentic test faces of every identity plus deepfakes of the given family.
inline std::vector<FaceSample> test_set(const synth::Dataset& ds, GeneratorFamily f) {
    std::vector<FaceSample> out;
    for (const auto& s : ds.test)
        if (s.authentic() || s.provenance->family == f) out.push_back(s);
    return out;
}

struct FoldResult {
    std::vector<double> identity_auc;     // per identity
    std::vector<double> scores;           // aligned with the test set
    std::vector<double> thresholds;       // per identity (Siamese modes)
    double balanced_accuracy = 0;         // mean over identities at the thresholds
    detect::TrainInfo info;
};

struct ModeResult {
    std::string mode;
    std::uint64_t seed = 0;
    std::vector<FoldResult> folds;
    std::vector<double> identity_auc;     // fold mean per identity
    metrics::AucSummary summary;
    double fold_auc_sd = 0;               // SD of the fold-level mean AUCs
    std::vector<double> mean_scores;      // fold mean per test sample
};

inline std::pair<std::vector<double>, double> per_identity_auc(const std::vector<FaceSample>& test,
                                                               const std::vector<double>& scores, int identities,
                                                               const std::vector<double>* thresholds) {
    std::vector<double> aucs;
    double bal = 0;
    for (int k = 0; k < identities; ++k) {
        std::vector<double> s;
        std::vector<int> l;
        for (std::size_t i = 0; i < test.size(); ++i)
            if (test[i].identity == k) {
                s.push_back(scores[i]);
                l.push_back(test[i].authentic() ? 1 : 0);
            }
        aucs.push_back(metrics::auc(s, l));
        if (thresholds) {
            double tp = 0, tn = 0, np = 0, nn_ = 0;
            for (std::size_t i = 0; i < s.size(); ++i) {
                const bool pred = s[i] > (*thresholds)[static_cast<std::size_t>(k)];
                if (l[i]) {
                    ++np;
                    tp += pred;
                } else {
                    ++nn_;
                    tn += !pred;
                }
            }
            bal += 0.5 * (tp / np + tn / nn_);
        }
    }
    return {aucs, bal / identities};
}

inline FoldResult run_fold(const ExperimentConfig& c, const SeedArtifacts& a, const std::string& mode, int rotation,
                           const std::vector<FaceSample>& test) {
    const auto split = synth::split_sessions(a.ds.train_source, c.plan.split, a.seed, rotation);
    const auto train = pick(a.ds.train_source, split.detector_train);
    const auto val = pick(a.ds.train_source, split.validation);
    const std::uint64_t fold_seed = derive_seed(a.seed, SeedTag::fold, static_cast<std::uint64_t>(rotation));
    FoldResult r;
    detect::FeatureSpec spec;
    detect::DetectorConfig dc = c.detector;
    if (mode == "ablate_idempotence_only") spec.student = false;
    if (mode == "ablate_identity") dc.id_len = 0;
    const int identities = c.plan.identities;

    if (mode == "ablate_idfeatures_only") {
        const auto tp = detect::build_training_pairs(train, *a.ops, a.extractors, spec);
        const auto vp = detect::build_training_pairs(val, *a.ops, a.extractors, spec);
        const auto cls = stage("train-detector", [&] { return detect::train_feature_classifier(tp, vp, dc, fold_seed); });
        r.info = cls.info;
        r.scores.resize(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) r.scores[i] = cls.net.forward(a.extractors.base(spec, test[i].x))[0];
        r.identity_auc = per_identity_auc(test, r.scores, identities, nullptr).first;
        return r;
    }

    const auto tp = detect::build_training_pairs(train, *a.ops, a.extractors, spec);
    const auto vp = detect::build_training_pairs(val, *a.ops, a.extractors, spec);
    auto [model, info] = stage("train-detector", [&] { return detect::train_detector(tp, vp, identities, dc, fold_seed); });
    detect::DetectorBundle b{a.extractors, a.ops, spec, std::move(model), {}, info};
    b.thresholds = detect::calibrate_thresholds(b, val, identities);
    r.info = info;
    r.thresholds = b.thresholds;
    r.scores.resize(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) r.scores[i] = detect::score(b, test[i].x, test[i].identity);
    std::tie(r.identity_auc, r.balanced_accuracy) = per_identity_auc(test, r.scores, identities, &r.thresholds);
    return r;
}

inline ModeResult run_mode(const ExperimentConfig& c, const SeedArtifacts& a, const std::string& mode) {
    ModeResult m;
    m.mode = mode;
    m.seed = a.seed;
    const auto test = test_set(a.ds, c.test_family);
    m.folds.resize(static_cast<std::size_t>(c.folds));
    parallel_for(m.folds.size(), c.threads, [&](std::size_t f) { m.folds[f] = run_fold(c, a, mode, static_cast<int>(f), test); });
    const auto k = static_cast<std::size_t>(c.plan.identities);
    m.identity_auc.assign(k, 0.0);
    m.mean_scores.assign(test.size(), 0.0);
    std::vector<double> fold_means;
    for (const auto& f : m.folds) {
        double s = 0;
        for (std::size_t i = 0; i < k; ++i) {
            m.identity_auc[i] += f.identity_auc[i] / static_cast<double>(c.folds);
            s += f.identity_auc[i];
        }
        fold_means.push_back(s / static_cast<double>(k));
        for (std::size_t i = 0; i < test.size(); ++i) m.mean_scores[i] += f.scores[i] / static_cast<double>(c.folds);
    }
    m.summary = metrics::auc_summary(m.identity_auc);
    m.fold_auc_sd = fold_means.size() > 1 ? metrics::auc_summary(fold_means).sd : 0.0;
    return m;
}

// ---------------------------------------------------------------------------
// Mismatch matrix

struct MismatchCell {
    std::string name;  // attack family / reconstruction family
    recon::ResidualSummary summary;
};

inline std::vector<MismatchCell> mismatch_matrix(const ExperimentConfig& c, const SeedArtifacts& a) {
    std::map<char, recon::ReconRegistry> regs;
    for (GeneratorFamily f : {GeneratorFamily::A, GeneratorFamily::B})
        regs[synth::to_char(f)] = stage("train-recon", [&] {
            return recon::train_registry(a.recon_train, a.ds.population, f, c.plan.gen(f), c.recon, a.seed, c.threads);
        });
    std::vector<MismatchCell> out;
    for (const auto& [attack, rec] : std::vector<std::pair<char, char>>{{'A', 'A'}, {'B', 'B'}, {'B', 'A'}, {'A', 'B'}}) {
        const auto fam = synth::family_from_string(std::string(1, attack));
        const auto [auth, proc] = recon::pair_with_deepfakes(a.ds.test, fam);
        const auto records = recon::compute_residuals(regs.at(rec), auth, proc, attack);
        out.push_back({std::string(1, attack) + "/" + std::string(1, rec), recon::summarize(records)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Outputs

inline json summary_to_json(const metrics::AucSummary& s) {
    return {{"n", s.n},       {"mean", s.mean},   {"sd", s.sd},     {"median", s.median},
            {"q1", s.q1},     {"q3", s.q3},       {"iqr", s.iqr},   {"trimmed_mean", s.trimmed_mean},
            {"trimmed_per_tail", s.trimmed_per_tail}, {"min", s.min}, {"max", s.max}, {"values", s.values}};
}

inline std::string roc_to_csv(const metrics::RocCurve& r) {
    std::string out = "fpr,tpr,threshold\n";
    for (const auto& p : r.points) out += io::fmt(p.fpr) + ',' + io::fmt(p.tpr) + ',' + io::fmt(p.threshold) + '\n';
    return out;
}

// sample_id, identity, session, label, generator, then the feature columns;
// rows ordered by (identity, session, index).
inline std::string export_vectors(std::vector<std::pair<FaceSample, VectorXd>> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return synth::sample_order(a.first, b.first); });
    const Index f = rows.empty() ? 0 : rows.front().second.size();
    std::string out = "sample_id,identity,session,label,generator";
    for (Index j = 0; j < f; ++j) out += ",v" + std::to_string(j);
    out += '\n';
    for (const auto& [s, v] : rows) {
        if (v.size() != f) throw ConfigError("export_vectors: ragged feature rows");
        out += synth::sample_id(s) + ',' + std::to_string(s.identity) + ',' + std::to_string(s.session) + ',' +
               std::to_string(static_cast<int>(s.label)) + ',' +
               (s.provenance ? std::string(1, synth::to_char(s.provenance->family)) : std::string("none"));
        for (Index j = 0; j < v.size(); ++j) out += ',' + io::fmt(v[j]);
        out += '\n';
    }
    return out;
}

inline void write_vectors(const io::fs::path& path, const std::vector<std::pair<FaceSample, VectorXd>>& rows) {
    io::write_file(path, export_vectors(rows));
}

inline json theory_report_json(const theory::TheoryReport& r, const theory::PopulationSpec& s) {
    json ids = json::array();
    for (const auto& h : r.identities)
        ids.push_back({{"k", h.k}, {"mu0", h.mu0}, {"mu1", h.mu1}, {"d", h.d}, {"alpha", h.alpha}});
    return {{"schema", 1},
            {"spec", {{"u0", s.u0}, {"u1", s.u1}, {"sigma", s.sigma}, {"sigma_mu", s.sigma_mu}, {"k", s.k}}},
            {"sign_aware", r.sign_aware},
            {"pe_ind_closed", r.pe_ind_closed},
            {"pe_com_closed", r.pe_com_closed},
            {"pe_taylor", r.pe_taylor},
            {"pe_ind_mc", r.pe_ind_mc},
            {"pe_com_mc", r.pe_com_mc},
            {"se_ind", r.se_ind},
            {"se_com", r.se_com},
            {"n_samples", r.n_samples},
            {"identities", ids}};
}

inline std::string sweep_to_csv(const std::vector<theory::SweepRow>& rows) {
    std::string out = "sigma_mu,delta_u,pe_ind,pe_com,gap,pe_ind_mc,pe_com_mc,se_ind,se_com\n";
    for (const auto& r : rows)
        out += io::fmt(r.sigma_mu) + ',' + io::fmt(r.delta_u) + ',' + io::fmt(r.pe_ind) + ',' + io::fmt(r.pe_com) + ',' +
               io::fmt(r.gap) + ',' + io::fmt(r.pe_ind_mc) + ',' + io::fmt(r.pe_com_mc) + ',' + io::fmt(r.se_ind) + ',' +
               io::fmt(r.se_com) + '\n';
    return out;
}

// theory_report.json and sweep.csv
inline json run_theory(const ExperimentConfig& c, std::uint64_t seed, const io::fs::path& out) {
    const auto& t = c.theory;
    const auto rep = theory::evaluate(t.spec, t.mc_n, seed, t.sign_aware);
    theory::SweepGrid g;
    g.sigma_mu = t.sweep_sigma_mu;
    g.delta_u = t.sweep_delta_u;
    g.u0 = t.spec.u0;
    g.sigma = t.spec.sigma;
    g.k = t.spec.k;
    g.reps = t.sweep_reps;
    g.mc_n = t.sweep_mc_n;
    g.seed = seed;
    g.sign_aware = t.sign_aware;
    g.threads = c.threads;
    const auto rows = theory::sweep(g);
    const json j = theory_report_json(rep, t.spec);
    io::ensure_dir(out);
    io::write_file(out / "theory_report.json", j.dump(1) + "\n");
    io::write_file(out / "sweep.csv", sweep_to_csv(rows));
    return j;
}

struct ExperimentOutcome {
    json report;
    std::map<std::string, std::vector<ModeResult>> modes;         // detection modes, one entry per seed
    std::vector<std::vector<MismatchCell>> mismatch;             // one entry per seed
};

inline bool is_detection_mode(const std::string& m) { return m != "mismatch_matrix" && m != "theory"; }

// Runs every configured mode for every seed and writes the report files into out.
inline ExperimentOutcome run_experiment(const ExperimentConfig& c, const io::fs::path& out) {
    c.validate();
    io::ensure_dir(out);
    ExperimentOutcome o;
    json report = {{"schema", 1}, {"config", config_to_json(c)}, {"modes", json::object()}};
    const bool need_detector = std::any_of(c.modes.begin(), c.modes.end(), is_detection_mode);
    const bool need_mismatch = std::find(c.modes.begin(), c.modes.end(), "mismatch_matrix") != c.modes.end();
    json residual = {{"schema", 1}, {"recon_family", std::string(1, synth::to_char(c.recon_family))},
                     {"test_family", std::string(1, synth::to_char(c.test_family))}, {"seeds", json::array()}};

    for (std::size_t si = 0; si < c.seeds.size(); ++si) {
        const auto seed = c.seeds[si];
        if (!need_detector && !need_mismatch) break;
        const auto a = build_artifacts(c, seed, need_detector);

        const auto [auth, proc] = recon::pair_with_deepfakes(a.ds.test, c.test_family);
        const auto records = recon::compute_residuals(*a.ops, auth, proc, synth::to_char(c.test_family));
        json rs = {{"seed", seed}, {"summary", recon::summary_to_json(recon::summarize(records))}};

        if (need_mismatch) {
            auto cells = mismatch_matrix(c, a);
            json m = json::object();
            for (const auto& cell : cells) m[cell.name] = recon::summary_to_json(cell.summary);
            rs["mismatch"] = m;
            o.mismatch.push_back(std::move(cells));
        }
        residual["seeds"].push_back(rs);

        const auto test = test_set(a.ds, c.test_family);
        for (const auto& mode : c.modes) {
            if (!is_detection_mode(mode)) continue;
            auto r = run_mode(c, a, mode);
            if (si == 0 && mode == c.modes.front()) {
                for (int k = 0; k < c.plan.identities; ++k) {
                    std::vector<double> s;
                    std::vector<int> l;
                    for (std::size_t i = 0; i < test.size(); ++i)
                        if (test[i].identity == k) {
                            s.push_back(r.mean_scores[i]);
                            l.push_back(test[i].authentic() ? 1 : 0);
                        }
                    io::write_file(out / ("roc_identity_" + std::to_string(k) + ".csv"), roc_to_csv(metrics::roc_curve(s, l)));
                }
            }
            o.modes[mode].push_back(std::move(r));
        }

        if (si == 0 && need_detector && c.export_vectors) {
            std::vector<std::pair<FaceSample, VectorXd>> rows;
            for (const auto& s : test) rows.emplace_back(s, a.extractors.base({}, s.x));
            write_vectors(out / "vectors.csv", rows);
        }
    }

    for (const auto& [mode, results] : o.modes) {
        json per_seed = json::array();
        std::vector<double> means;
        for (const auto& r : results) {
            json folds = json::array();
            for (const auto& f : r.folds)
                folds.push_back({{"identity_auc", f.identity_auc},
                                 {"thresholds", f.thresholds},
                                 {"balanced_accuracy", f.thresholds.empty() ? json(nullptr) : json(f.balanced_accuracy)},
                                 {"lr", f.info.lr},
                                 {"best_epoch", f.info.best_epoch},
                                 {"best_val_loss", f.info.best_val_loss},
                                 {"val_far_mean", f.info.val_far_mean},
                                 {"val_close_mean", f.info.val_close_mean}});
            per_seed.push_back({{"seed", r.seed}, {"summary", summary_to_json(r.summary)}, {"fold_auc_sd", r.fold_auc_sd},
                                {"folds", folds}});
            means.push_back(r.summary.mean);
        }
        double mean = 0;
        for (double v : means) mean += v / static_cast<double>(means.size());
        report["modes"][mode] = {{"per_seed", per_seed}, {"mean_auc", mean},
                                 {"seed_sd", means.size() > 1 ? metrics::auc_summary(means).sd : 0.0}};
    }

    if (need_mismatch) {
        json mm = json::object();
        for (const std::string name : {"A/A", "B/B", "B/A", "A/B"}) {
            double frac = 0, sep = 0;
            for (const auto& cells : o.mismatch)
                for (const auto& cell : cells)
                    if (cell.name == name) {
                        frac += cell.summary.near_idem / static_cast<double>(o.mismatch.size());
                        sep += cell.summary.separation / static_cast<double>(o.mismatch.size());
                    }
            mm[name] = {{"near_idem_fraction", frac}, {"separation", sep}};
        }
        const double aa = mm["A/A"]["near_idem_fraction"], bb = mm["B/B"]["near_idem_fraction"], ba = mm["B/A"]["near_idem_fraction"];
        mm["ordering_holds"] = aa >= bb && bb > ba;
        report["modes"]["mismatch_matrix"] = mm;
    }
    if (std::find(c.modes.begin(), c.modes.end(), "theory") != c.modes.end())
        report["modes"]["theory"] = run_theory(c, c.seeds.front(), out);

    if (need_detector || need_mismatch) io::write_file(out / "residual_report.json", residual.dump(1) + "\n");
    io::write_file(out / "report.json", report.dump(1) + "\n");
    o.report = std::move(report);
    return o;
}

}  // namespace dfid::eval
