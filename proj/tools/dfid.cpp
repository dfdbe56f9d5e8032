// dfid command-line front end.

#include <CLI11.hpp>
#include <iostream>
#include <optional>

#include "dfid/experiment.hpp"

using namespace dfid;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 1;
};

eval::ExperimentConfig load(const Globals& g) {
    auto c = g.config.empty() ? eval::ExperimentConfig{} : eval::load_config(g.config);
    if (g.seed) c.seeds = {*g.seed};
    c.threads = g.threads;
    c.validate();
    return c;
}

std::uint64_t seed_of(const Globals& g, const eval::ExperimentConfig& c) { return g.seed ? *g.seed : c.seeds.front(); }

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dfid: identity-conditioned deepfake detection toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    std::uint64_t seed_value = 0;
    app.add_option("--config", g.config, "key-value config file (see README)");
    auto* seed_opt = app.add_option("--seed", seed_value, "master seed (replaces the config's seed list)");
    app.add_option("--out", g.out, "output file or directory");
    app.add_option("--threads", g.threads, "worker threads (0 = hardware concurrency)")->check(CLI::NonNegativeNumber);

    std::function<void()> action;

    auto* theory_cmd = app.add_subcommand("theory", "closed-form and Monte Carlo Bayes errors plus the sweep");
    theory_cmd->callback([&] {
        action = [&] {
            const auto c = load(g);
            const auto out = out_dir(g, "theory_out");
            const auto j = eval::run_theory(c, seed_of(g, c), out);
            std::cout << "pe_ind " << io::fmt(j["pe_ind_closed"].get<double>()) << " pe_com "
                      << io::fmt(j["pe_com_closed"].get<double>()) << " -> " << out.string() << "\n";
        };
    });

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset directory");
    synth_cmd->callback([&] {
        action = [&] {
            const auto c = load(g);
            const auto out = out_dir(g, "dataset");
            const auto ds = synth::build_dataset(c.plan, seed_of(g, c));
            synth::save_dataset(ds, out);
            std::cout << "wrote " << ds.train_source.size() << " training and " << ds.test.size() << " test samples to "
                      << out.string() << "\n";
        };
    });

    std::string dataset, family = "A";
    auto* recon_cmd = app.add_subcommand("train-recon", "train per-identity reconstruction operators");
    recon_cmd->add_option("--dataset", dataset, "dataset directory")->required();
    recon_cmd->add_option("--family", family, "generator family to emulate: A, B or none");
    recon_cmd->callback([&] {
        action = [&] {
            const auto c = load(g);
            const auto ds = synth::load_dataset(dataset);
            const auto samples = synth::read_samples_csv(fs::path(dataset) / "recon_train.csv");
            std::optional<synth::GeneratorFamily> f;
            if (family != "none") f = synth::family_from_string(family);
            const auto params = f ? c.plan.gen(*f) : synth::GeneratorParams{};
            const auto reg = recon::train_registry(samples, ds.population, f, params, c.recon, seed_of(g, c), c.threads);
            const auto out = out_dir(g, "ops");
            recon::save_registry(reg, out);
            std::cout << "trained " << reg.ops.size() << " operators -> " << out.string() << "\n";
        };
    });

    std::string teacher_path, schedule;
    int distill_epochs = 0;
    double m_h = 0;
    auto* extractor_cmd = app.add_subcommand("train-extractor", "pretrain the teacher (if needed) and distill the student");
    extractor_cmd->add_option("--dataset", dataset, "dataset directory")->required();
    extractor_cmd->add_option("--teacher", teacher_path, "teacher checkpoint; pretrained and written here if missing")->required();
    extractor_cmd->add_option("--epochs", distill_epochs, "total distillation epochs, split evenly into the two phases");
    extractor_cmd->add_option("--mh", m_h, "hinge margin m_h");
    extractor_cmd->add_option("--schedule", schedule, "phases EPOCHS:ALPHA,BETA;... (overrides --epochs)");
    extractor_cmd->callback([&] {
        action = [&] {
            auto c = load(g);
            const auto seed = seed_of(g, c);
            if (!schedule.empty())
                c.distill.schedule = features::parse_schedule(schedule);
            else if (distill_epochs > 0)
                c.distill.schedule = {{distill_epochs / 2, 1, 0}, {distill_epochs - distill_epochs / 2, 0, 1}};
            if (m_h != 0) c.distill.m_h = m_h;
            c.distill.validate();
            const auto ds = synth::load_dataset(dataset);
            features::TeacherNet teacher;
            if (fs::exists(teacher_path)) {
                teacher = features::load_teacher(teacher_path);
            } else {
                teacher = features::pretrain_teacher(ds.teacher_pool, c.teacher, seed);
                features::save_teacher(teacher, teacher_path);
                std::cout << "teacher held-out accuracy " << io::fmt(teacher.heldout_accuracy) << " -> " << teacher_path << "\n";
            }
            auto s0 = features::init_student(ds.extractor_auth, ds.plan.identities, c.student, seed);
            features::check_lengths(teacher, s0);
            const auto student = features::train_student(features::make_pairs(teacher, ds.extractor_auth, ds.extractor_fake),
                                                         s0, c.distill, seed);
            const auto out = out_dir(g, "student.ckpt");
            if (out.has_parent_path()) io::ensure_dir(out.parent_path());
            nn::save_checkpoint(student.net, out.string());
            const auto& m = student.meta;
            nlohmann::json meta = {{"init_l12", m.init_l12},         {"phase1_l12", m.phase1_l12},
                                   {"final_l12", m.final_l12},       {"init_distance", m.init_distance},
                                   {"phase1_distance", m.phase1_distance}, {"final_distance", m.final_distance},
                                   {"schedule", features::format_schedule(c.distill.schedule)}, {"m_h", c.distill.m_h}};
            io::write_file(out.string() + ".json", meta.dump(1) + "\n");
            std::cout << "student L1+L2 " << io::fmt(m.init_l12) << " -> " << io::fmt(m.phase1_l12) << ", distance "
                      << io::fmt(m.phase1_distance) << " -> " << io::fmt(m.final_distance) << " -> " << out.string() << "\n";
        };
    });

    std::string student_path, ops_dir, lr_grid;
    double margin = 0;
    int folds = 0;
    auto* detector_cmd = app.add_subcommand("train-detector", "train the identity-conditioned Siamese detector per fold");
    detector_cmd->add_option("--dataset", dataset, "dataset directory")->required();
    detector_cmd->add_option("--student", student_path, "student checkpoint")->required();
    detector_cmd->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    detector_cmd->add_option("--ops", ops_dir, "reconstruction operator directory")->required();
    detector_cmd->add_option("--m", margin, "contrastive margin m");
    detector_cmd->add_option("--lr-grid", lr_grid, "learning-rate grid LO:HI:N");
    detector_cmd->add_option("--folds", folds, "validation-session rotations");
    detector_cmd->callback([&] {
        action = [&] {
            auto c = load(g);
            const auto seed = seed_of(g, c);
            if (margin != 0) c.detector.margin = margin;
            if (!lr_grid.empty()) c.detector.lr_grid = detect::parse_lr_grid(lr_grid);
            if (folds != 0) c.folds = folds;
            c.validate();
            const auto ds = synth::load_dataset(dataset);
            detect::Extractors ex;
            auto student = std::make_shared<features::StudentNet>();
            student->net = nn::load_checkpoint(student_path);
            ex.student = student;
            ex.teacher = std::make_shared<const features::TeacherNet>(features::load_teacher(teacher_path));
            auto ops = std::make_shared<const recon::ReconRegistry>(recon::load_registry(ops_dir));
            const auto out = out_dir(g, "bundle");
            nlohmann::json summary = {{"folds", nlohmann::json::array()}};
            for (int r = 0; r < c.folds; ++r) {
                const auto split = synth::split_sessions(ds.train_source, ds.plan.split, ds.seed, r);
                const auto train = eval::pick(ds.train_source, split.detector_train);
                const auto val = eval::pick(ds.train_source, split.validation);
                const detect::FeatureSpec spec;
                const auto tp = detect::build_training_pairs(train, *ops, ex, spec, c.threads);
                const auto vp = detect::build_training_pairs(val, *ops, ex, spec, c.threads);
                const auto fold_seed = derive_seed(seed, SeedTag::fold, static_cast<std::uint64_t>(r));
                auto [model, info] = detect::train_detector(tp, vp, ds.plan.identities, c.detector, fold_seed);
                detect::DetectorBundle b{ex, ops, spec, std::move(model), {}, info};
                b.thresholds = detect::calibrate_thresholds(b, val, ds.plan.identities);
                detect::save_bundle(b, out / ("fold_" + std::to_string(r)));
                summary["folds"].push_back({{"fold", r}, {"lr", info.lr}, {"best_epoch", info.best_epoch},
                                            {"best_val_loss", info.best_val_loss}});
                std::cout << "fold " << r << ": lr " << io::fmt(info.lr) << " epoch " << info.best_epoch << " val loss "
                          << io::fmt(info.best_val_loss) << "\n";
            }
            io::write_file(out / "train_summary.json", summary.dump(1) + "\n");
        };
    });

    auto* residuals_cmd = app.add_subcommand("residuals", "near-idempotence residuals of the test set");
    residuals_cmd->add_option("--dataset", dataset, "dataset directory")->required();
    residuals_cmd->add_option("--ops", ops_dir, "reconstruction operator directory")->required();
    residuals_cmd->add_option("--family", family, "deepfake family paired with each authentic face (A or B)");
    residuals_cmd->callback([&] {
        action = [&] {
            const auto ds = synth::load_dataset(dataset);
            const auto reg = recon::load_registry(ops_dir);
            const auto f = synth::family_from_string(family);
            const auto [auth, proc] = recon::pair_with_deepfakes(ds.test, f);
            const auto records = recon::compute_residuals(reg, auth, proc, synth::to_char(f));
            const auto out = out_dir(g, "residuals");
            io::ensure_dir(out);
            io::write_file(out / "residuals.csv", recon::residuals_to_csv(records));
            const auto s = recon::summarize(records);
            io::write_file(out / "residual_report.json", recon::summary_to_json(s).dump(1) + "\n");
            std::cout << "median e0 " << io::fmt(s.median_e0) << " median e1 " << io::fmt(s.median_e1)
                      << " near-idempotent " << io::fmt(s.near_idem) << "\n";
        };
    });

    auto* eval_cmd = app.add_subcommand("eval", "run the configured experiment modes end to end");
    eval_cmd->callback([&] {
        action = [&] {
            const auto c = load(g);
            const auto out = out_dir(g, "eval_out");
            const auto o = eval::run_experiment(c, out);
            for (const auto& [mode, v] : o.report["modes"].items())
                if (v.contains("mean_auc"))
                    std::cout << mode << ": mean AUC " << io::fmt(v["mean_auc"].get<double>()) << "\n";
            std::cout << "report -> " << (out / "report.json").string() << "\n";
        };
    });

    std::string report_in;
    auto* report_cmd = app.add_subcommand("report", "render report.json as a Markdown table");
    report_cmd->add_option("--in", report_in, "eval output directory or report.json")->required();
    report_cmd->callback([&] {
        action = [&] {
            fs::path in = report_in;
            if (fs::is_directory(in)) in /= "report.json";
            nlohmann::json r;
            try {
                r = nlohmann::json::parse(io::read_file(in));
            } catch (const nlohmann::json::exception& e) {
                throw IoError(in.string() + ": " + e.what());
            }
            std::string md = "| mode | seeds | mean AUC | seed SD | median | IQR | trimmed mean |\n|---|---|---|---|---|---|---|\n";
            for (const auto& [mode, v] : r.at("modes").items()) {
                if (!v.contains("per_seed")) continue;
                double median = 0, iqr = 0, trimmed = 0;
                const auto& ps = v["per_seed"];
                for (const auto& s : ps) {
                    median += s["summary"]["median"].get<double>() / static_cast<double>(ps.size());
                    iqr += s["summary"]["iqr"].get<double>() / static_cast<double>(ps.size());
                    trimmed += s["summary"]["trimmed_mean"].get<double>() / static_cast<double>(ps.size());
                }
                md += "| " + mode + " | " + std::to_string(ps.size()) + " | " + io::fmt(v["mean_auc"].get<double>()) + " | " +
                      io::fmt(v["seed_sd"].get<double>()) + " | " + io::fmt(median) + " | " + io::fmt(iqr) + " | " +
                      io::fmt(trimmed) + " |\n";
            }
            if (r["modes"].contains("mismatch_matrix")) {
                md += "\n| category | near-idempotent fraction | separation |\n|---|---|---|\n";
                for (const std::string name : {"A/A", "B/B", "B/A", "A/B"}) {
                    const auto& cell = r["modes"]["mismatch_matrix"][name];
                    md += "| " + name + " | " + io::fmt(cell["near_idem_fraction"].get<double>()) + " | " +
                          io::fmt(cell["separation"].get<double>()) + " |\n";
                }
            }
            if (g.out.empty())
                std::cout << md;
            else
                io::write_file(g.out, md);
        };
    });

    std::string bundle_dir, input;
    int identity = -1;
    auto* score_cmd = app.add_subcommand("score", "score samples with a trained bundle");
    score_cmd->add_option("--bundle", bundle_dir, "bundle directory (or a train-detector output; fold_0 is used)")->required();
    score_cmd->add_option("--input", input, "samples CSV")->required();
    score_cmd->add_option("--identity", identity, "claimed identity for every row (default: each row's identity)");
    score_cmd->callback([&] {
        action = [&] {
            const auto c = load(g);
            fs::path dir = bundle_dir;
            if (!fs::exists(dir / "bundle.json") && fs::exists(dir / "fold_0" / "bundle.json")) dir /= "fold_0";
            const auto b = detect::load_bundle(dir);
            const auto samples = synth::read_samples_csv(input);
            const auto scored = detect::score_samples(
                samples, identity, [&](const Eigen::VectorXd& x, int k) { return detect::score(b, x, k); }, c.threads);
            const auto csv = detect::scores_to_csv(scored);
            if (g.out.empty())
                std::cout << csv;
            else
                io::write_file(g.out, csv);
        };
    });

    auto* extract_cmd = app.add_subcommand("extract", "write student features for a dataset's test set or a samples CSV");
    extract_cmd->add_option("--student", student_path, "student checkpoint")->required();
    extract_cmd->add_option("--dataset", dataset, "dataset directory (uses test.csv)");
    extract_cmd->add_option("--input", input, "samples CSV (overrides --dataset)");
    extract_cmd->callback([&] {
        action = [&] {
            features::StudentNet s;
            s.net = nn::load_checkpoint(student_path);
            if (input.empty()) require(dataset, "--dataset or --input");
            const auto samples = synth::read_samples_csv(input.empty() ? fs::path(dataset) / "test.csv" : fs::path(input));
            const auto csv = features::features_to_csv(s, samples);
            if (g.out.empty())
                std::cout << csv;
            else
                io::write_file(g.out, csv);
        };
    });

    auto* keys_cmd = app.add_subcommand("config", "print every config key with its default value");
    keys_cmd->callback([&] {
        action = [&] {
            const auto c = load(g);
            for (const auto& k : eval::config_keys()) std::cout << "# " << k.help << "\n" << k.key << " = " << k.get(c) << "\n";
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ExitCode::config);
    }
    if (seed_opt->count() > 0) g.seed = seed_value;
    try {
        action();
    } catch (const Error& e) {
        std::cerr << "dfid: " << e.what() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << "dfid: " << e.what() << "\n";
        return static_cast<int>(ExitCode::io);
    }
    return 0;
}
