#pragma once
// On-disk dataset layout: one CSV per split plus population.json (the
// prototypes, needed to rebuild generator operators) and manifest.json
// (seed and every generation parameter).

#include <algorithm>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "dfid/io.hpp"
#include "dfid/synth_data.hpp"

namespace dfid::synth {

using nlohmann::json;

inline std::string sample_id(const FaceSample& s) {
    std::string id = std::to_string(s.identity) + "-" + std::to_string(s.session) + "-" + std::to_string(s.index);
    if (s.provenance) id += std::string("-") + to_char(s.provenance->family);
    return id;
}

inline bool sample_order(const FaceSample& a, const FaceSample& b) {
    auto key = [](const FaceSample& s) {
        int fam = s.provenance ? static_cast<int>(to_char(s.provenance->family)) : 0;
        return std::make_tuple(s.identity, s.session, s.index, fam);
    };
    return key(a) < key(b);
}

inline std::string samples_to_csv(const std::vector<FaceSample>& samples, Index dim) {
    std::string out = "identity,session,label,generator,source_identity";
    for (Index j = 0; j < dim; ++j) out += ",x" + std::to_string(j);
    out += '\n';
    for (const auto& s : samples) {
        if (s.x.size() != dim) throw ConfigError("samples_to_csv: sample dimension mismatch");
        out += std::to_string(s.identity) + ',' + std::to_string(s.session) + ',' +
               std::to_string(static_cast<int>(s.label)) + ',';
        if (s.provenance) {
            out += to_char(s.provenance->family);
            out += ',' + std::to_string(s.provenance->source_identity);
        } else {
            out += ",-1";
        }
        for (Index j = 0; j < dim; ++j) out += ',' + io::fmt(s.x[j]);
        out += '\n';
    }
    return out;
}

inline void write_samples_csv(const io::fs::path& path, const std::vector<FaceSample>& samples, Index dim) {
    io::write_file(path, samples_to_csv(samples, dim));
}

// The file carries no per-row index column, so indices are recovered by
// counting rows per (identity, session, generator) in file order.
inline std::vector<FaceSample> read_samples_csv(const io::fs::path& path) {
    const auto lines = io::read_lines(path);
    const std::string what = path.string();
    if (lines.empty()) throw IoError(what + ": empty file");
    const auto header = io::split_csv(lines[0]);
    if (header.size() < 6 || header[0] != "identity" || header[1] != "session" || header[2] != "label" ||
        header[3] != "generator" || header[4] != "source_identity")
        throw IoError(what + ": unexpected header");
    const Index dim = static_cast<Index>(header.size()) - 5;
    std::map<std::tuple<int, int, char>, int> counters;
    std::vector<FaceSample> out;
    out.reserve(lines.size() - 1);
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto f = io::split_csv(lines[r]);
        if (static_cast<Index>(f.size()) != dim + 5)
            throw IoError(what + ": row " + std::to_string(r) + " has " + std::to_string(f.size()) + " fields");
        FaceSample s;
        s.identity = static_cast<int>(io::parse_int(f[0], what));
        s.session = static_cast<int>(io::parse_int(f[1], what));
        const auto label = io::parse_int(f[2], what);
        if (label != 0 && label != 1) throw IoError(what + ": label must be 0 or 1");
        s.label = static_cast<Label>(label);
        char gen = 0;
        if (s.label == Label::deepfake) {
            if (f[3].size() != 1) throw IoError(what + ": deepfake row without generator family");
            try {
                s.provenance = Provenance{static_cast<int>(io::parse_int(f[4], what)), family_from_string(std::string(f[3]))};
            } catch (const ConfigError& e) {
                throw IoError(what + ": " + e.what());
            }
            gen = f[3][0];
        } else if (!f[3].empty()) {
            throw IoError(what + ": authentic row with a generator family");
        }
        s.index = counters[{s.identity, s.session, gen}]++;
        s.x.resize(dim);
        for (Index j = 0; j < dim; ++j) s.x[j] = io::parse_double(f[static_cast<std::size_t>(j + 5)], what);
        out.push_back(std::move(s));
    }
    return out;
}

inline json population_to_json(const Population& pop) {
    json ids = json::array();
    for (const auto& p : pop.identities) {
        json mean = json::array(), basis = json::array();
        for (Index i = 0; i < p.mean.size(); ++i) mean.push_back(p.mean[i]);
        for (Index r = 0; r < p.pose_basis.rows(); ++r)
            for (Index c = 0; c < p.pose_basis.cols(); ++c) basis.push_back(p.pose_basis(r, c));
        ids.push_back({{"index", p.index}, {"mean", mean}, {"pose_basis", basis}, {"texture_seed", p.texture_seed}});
    }
    return {{"dim", pop.dim}, {"pose_dim", pop.pose_dim}, {"identities", ids}};
}

inline Population population_from_json(const json& j) {
    try {
        Population pop;
        pop.dim = j.at("dim").get<Index>();
        pop.pose_dim = j.at("pose_dim").get<Index>();
        pop.traces = make_trace_basis(pop.dim, pop.pose_dim);
        for (const auto& e : j.at("identities")) {
            IdentityPrototype p;
            p.index = e.at("index").get<int>();
            const auto mean = e.at("mean").get<std::vector<double>>();
            const auto basis = e.at("pose_basis").get<std::vector<double>>();
            if (static_cast<Index>(mean.size()) != pop.dim ||
                static_cast<Index>(basis.size()) != pop.dim * pop.pose_dim)
                throw IoError("population.json: prototype size mismatch");
            p.mean = Eigen::Map<const VectorXd>(mean.data(), pop.dim);
            p.pose_basis.resize(pop.dim, pop.pose_dim);
            for (Index r = 0; r < pop.dim; ++r)
                for (Index c = 0; c < pop.pose_dim; ++c)
                    p.pose_basis(r, c) = basis[static_cast<std::size_t>(r * pop.pose_dim + c)];
            p.texture_seed = e.at("texture_seed").get<std::uint64_t>();
            if (p.index != pop.size()) throw IoError("population.json: identities out of order");
            pop.identities.push_back(std::move(p));
        }
        return pop;
    } catch (const json::exception& e) {
        throw IoError(std::string("population.json: ") + e.what());
    }
}

inline json generator_to_json(const GeneratorParams& g) {
    return {{"residual_keep", g.residual_keep},
            {"signature_amplitude", g.signature_amplitude},
            {"smoothing", g.smoothing},
            {"renoise_sigma", g.renoise_sigma},
            {"trace_scale", g.trace_scale}};
}

inline GeneratorParams generator_from_json(const json& j) {
    GeneratorParams g;
    g.residual_keep = j.at("residual_keep").get<double>();
    g.signature_amplitude = j.at("signature_amplitude").get<double>();
    g.smoothing = j.at("smoothing").get<double>();
    g.renoise_sigma = j.at("renoise_sigma").get<double>();
    g.trace_scale = j.at("trace_scale").get<double>();
    return g;
}

inline json plan_to_json(const DatasetPlan& p) {
    return {{"identities", p.identities},
            {"dim", p.dim},
            {"pose_dim", p.pose_dim},
            {"noise_sigma", p.noise_sigma},
            {"per_session", p.per_session},
            {"split", {{"recon", p.split.recon}, {"train", p.split.train}, {"val", p.split.val}}},
            {"test_sessions", p.test_sessions},
            {"per_test_session", p.per_test_session},
            {"test_deepfakes", p.test_deepfakes},
            {"teacher_pool", p.teacher_pool},
            {"extractor_pool", p.extractor_pool},
            {"population",
             {{"mean_scale", p.population.mean_scale},
              {"trace_prior_sigma", p.population.trace_prior_sigma},
              {"min_separation", p.population.min_separation},
              {"rejection_budget", p.population.rejection_budget}}},
            {"generator_a", generator_to_json(p.gen_a)},
            {"generator_b", generator_to_json(p.gen_b)}};
}

inline DatasetPlan plan_from_json(const json& j) {
    DatasetPlan p;
    p.identities = j.at("identities").get<int>();
    p.dim = j.at("dim").get<Index>();
    p.pose_dim = j.at("pose_dim").get<Index>();
    p.noise_sigma = j.at("noise_sigma").get<double>();
    p.per_session = j.at("per_session").get<int>();
    p.split.recon = j.at("split").at("recon").get<int>();
    p.split.train = j.at("split").at("train").get<int>();
    p.split.val = j.at("split").at("val").get<int>();
    p.test_sessions = j.at("test_sessions").get<int>();
    p.per_test_session = j.at("per_test_session").get<int>();
    p.test_deepfakes = j.at("test_deepfakes").get<int>();
    p.teacher_pool = j.at("teacher_pool").get<int>();
    p.extractor_pool = j.at("extractor_pool").get<int>();
    const auto& pp = j.at("population");
    p.population.mean_scale = pp.at("mean_scale").get<double>();
    p.population.trace_prior_sigma = pp.at("trace_prior_sigma").get<double>();
    p.population.min_separation = pp.at("min_separation").get<double>();
    p.population.rejection_budget = pp.at("rejection_budget").get<int>();
    p.gen_a = generator_from_json(j.at("generator_a"));
    p.gen_b = generator_from_json(j.at("generator_b"));
    return p;
}

namespace detail {

inline std::vector<FaceSample> pick(const std::vector<FaceSample>& all, const std::vector<std::size_t>& idx) {
    std::vector<FaceSample> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all[i]);
    return out;
}

}  // namespace detail

// Writes the rotation-0 split of the training source plus the independent
// test source and the two pretraining pools.
inline void save_dataset(const Dataset& ds, const io::fs::path& dir) {
    io::ensure_dir(dir);
    const Index dim = ds.plan.dim;
    const auto split = split_sessions(ds.train_source, ds.plan.split, ds.seed, 0);
    write_samples_csv(dir / "recon_train.csv", detail::pick(ds.train_source, split.recon_train), dim);
    write_samples_csv(dir / "detector_train.csv", detail::pick(ds.train_source, split.detector_train), dim);
    write_samples_csv(dir / "validation.csv", detail::pick(ds.train_source, split.validation), dim);
    write_samples_csv(dir / "test.csv", ds.test, dim);
    write_samples_csv(dir / "teacher_pool.csv", ds.teacher_pool, dim);
    std::vector<FaceSample> pairs;
    for (std::size_t j = 0; j < ds.extractor_auth.size(); ++j) {
        pairs.push_back(ds.extractor_auth[j]);
        pairs.push_back(ds.extractor_fake[j]);
    }
    write_samples_csv(dir / "extractor_pool.csv", pairs, dim);
    io::write_file(dir / "population.json", population_to_json(ds.population).dump(1) + "\n");
    json manifest = {{"format", "dfid-dataset"}, {"version", 1}, {"seed", ds.seed}, {"plan", plan_to_json(ds.plan)}};
    io::write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

inline Dataset load_dataset(const io::fs::path& dir) {
    Dataset ds;
    try {
        const json manifest = json::parse(io::read_file(dir / "manifest.json"));
        if (manifest.at("format") != "dfid-dataset") throw IoError("manifest.json: not a dfid dataset");
        ds.seed = manifest.at("seed").get<std::uint64_t>();
        ds.plan = plan_from_json(manifest.at("plan"));
        ds.population = population_from_json(json::parse(io::read_file(dir / "population.json")));
    } catch (const json::exception& e) {
        throw IoError(dir.string() + ": " + e.what());
    }
    for (const char* name : {"recon_train.csv", "detector_train.csv", "validation.csv"}) {
        auto part = read_samples_csv(dir / name);
        ds.train_source.insert(ds.train_source.end(), part.begin(), part.end());
    }
    std::sort(ds.train_source.begin(), ds.train_source.end(), sample_order);
    ds.test = read_samples_csv(dir / "test.csv");
    ds.teacher_pool = read_samples_csv(dir / "teacher_pool.csv");
    const auto pairs = read_samples_csv(dir / "extractor_pool.csv");
    if (pairs.size() % 2) throw IoError("extractor_pool.csv: odd row count");
    for (std::size_t j = 0; j < pairs.size(); j += 2) {
        if (!pairs[j].authentic() || pairs[j + 1].authentic() || pairs[j].identity != pairs[j + 1].identity)
            throw IoError("extractor_pool.csv: rows are not (authentic, deepfake) pairs of one identity");
        ds.extractor_auth.push_back(pairs[j]);
        ds.extractor_fake.push_back(pairs[j + 1]);
    }
    if (ds.population.dim != ds.plan.dim) throw IoError("population.json disagrees with manifest dimension");
    return ds;
}

}  // namespace dfid::synth
