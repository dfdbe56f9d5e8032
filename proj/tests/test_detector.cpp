#include <gtest/gtest.h>

#include <filesystem>

#include "dfid/experiment.hpp"

using namespace dfid;
using namespace dfid::detect;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using synth::FaceSample;

namespace {

struct Fixture {
    eval::ExperimentConfig cfg;
    eval::SeedArtifacts a;
    std::vector<FaceSample> train, val, test;
    PairData tp, vp;
    DetectorBundle bundle;

    explicit Fixture(std::uint64_t seed, double trace_scale = 1.0) {
        if (trace_scale < 1.0) {
            cfg.plan.gen_a.trace_scale = trace_scale;
            cfg.teacher.accuracy_floor = 0;
        }
        a = eval::build_artifacts(cfg, seed);
        const auto split = synth::split_sessions(a.ds.train_source, cfg.plan.split, seed);
        train = eval::pick(a.ds.train_source, split.detector_train);
        val = eval::pick(a.ds.train_source, split.validation);
        test = eval::test_set(a.ds, synth::GeneratorFamily::A);
        tp = build_training_pairs(train, *a.ops, a.extractors, {});
        vp = build_training_pairs(val, *a.ops, a.extractors, {});
        auto [m, info] = train_detector(tp, vp, cfg.plan.identities, cfg.detector, seed);
        bundle = DetectorBundle{a.extractors, a.ops, {}, m, {}, info};
        bundle.thresholds = calibrate_thresholds(bundle, val, cfg.plan.identities);
    }

    std::vector<double> scores() const {
        std::vector<double> s;
        for (const auto& f : test) s.push_back(score(bundle, f.x, f.identity));
        return s;
    }

    double mean_auc() const {
        const auto aucs = eval::per_identity_auc(test, scores(), cfg.plan.identities, nullptr).first;
        return std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(aucs.size());
    }
};

const Fixture& fixture() {
    static const Fixture f(1);
    return f;
}

// small synthetic pair set for gradient checks
PairData random_pairs(Index n, Index b, int identities, Rng& rng) {
    PairData p;
    p.x1 = standard_normal_matrix(n, b, rng);
    p.x2 = standard_normal_matrix(n, b, rng);
    for (Index r = 0; r < n; ++r) {
        p.identity.push_back(static_cast<int>(r % identities));
        p.y.push_back(static_cast<int>(r % 2));
    }
    return p;
}

}  // namespace

TEST(Decoder, RowsAndRange) {
    IdentityDecoder d{MatrixXd::Zero(3, 4)};
    EXPECT_EQ(decode_identity(d, 2), VectorXd::Zero(4));
    EXPECT_THROW(d.decode(3), ConfigError);
    EXPECT_THROW(d.decode(-1), ConfigError);
    IdentityDecoder empty{MatrixXd(3, 0)};
    EXPECT_EQ(empty.decode(1).size(), 0);
}

TEST(Decoder, InitDeterministic) {
    DetectorConfig c;
    Rng r1(5), r2(5);
    const auto a = init_model(10, 4, c, r1), b = init_model(10, 4, c, r2);
    EXPECT_EQ(a.decoder.w, b.decoder.w);
    EXPECT_EQ(a.head.s1.weight, b.head.s1.weight);
    EXPECT_TRUE(a.head.decoupled());
    c.id_len = 0;
    Rng r3(5);
    EXPECT_EQ(init_model(10, 4, c, r3).head.input_len(), 10);
}

TEST(Condition, LayoutAndLength) {
    VectorXd s = VectorXd::Constant(16, 1.0), t = VectorXd::Constant(16, 2.0), id = VectorXd::Constant(8, 3.0);
    const VectorXd x = condition_features(s, t, id, 16, 16, 8);
    ASSERT_EQ(x.size(), 40);
    EXPECT_EQ(x[0], 1.0);
    EXPECT_EQ(x[16], 2.0);
    EXPECT_EQ(x[39], 3.0);
    EXPECT_EQ(condition_features(VectorXd::Zero(2), VectorXd::Zero(1), VectorXd::Zero(0), 2, 1, 0), VectorXd::Zero(3));
    EXPECT_THROW(condition_features(s, t, id, 16, 16, 7), ConfigError);
}

TEST(Siamese, TiedAndZeroHeads) {
    Rng rng(2);
    auto h = SiameseHead::random(6, 4, nn::Activation::tanh, 2.0, rng);
    const VectorXd x = standard_normal_vector(6, rng), y = standard_normal_vector(6, rng);
    auto tied = h;
    tied.s2 = tied.s1;
    EXPECT_EQ(siamese_distance(tied, x, x), 0.0);
    auto zero = h;
    zero.s1.weight.setZero();
    zero.s2.weight.setZero();
    EXPECT_EQ(siamese_distance(zero, x, y), 0.0);
    // decoupled heads are not symmetric in their arguments
    EXPECT_NE(siamese_distance(h, x, y), siamese_distance(h, y, x));
    EXPECT_THROW(siamese_distance(h, VectorXd::Zero(5), y), ConfigError);
}

TEST(Contrastive, GradCheckTwentySeeds) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const PairData p = random_pairs(6, 5, 3, rng);
        DetectorConfig c;
        c.id_len = 2;
        c.head_out = 4;
        c.decoder_init_sigma = 0.5;
        DetectorModel m = init_model(5, 3, c, rng);
        m.in_mean = standard_normal_vector(5, rng);
        m.in_scale = VectorXd::Constant(5, 1.5);
        double widest = 0;
        for (Index r = 0; r < p.size(); ++r) {
            const int k = p.identity[static_cast<std::size_t>(r)];
            widest = std::max(widest, siamese_distance(m.head, m.conditioned(VectorXd(p.x1.row(r).transpose()), k),
                                                       m.conditioned(VectorXd(p.x2.row(r).transpose()), k)));
        }
        m.head.margin = widest + 1.0;  // keep every hinge away from its kink
        EXPECT_LT(nn::grad_check(make_contrastive_objective(m, p)), 1e-4) << "seed " << seed;
    }
}

TEST(Contrastive, TamperedGradientCaught) {
    Rng rng(3);
    const PairData p = random_pairs(6, 5, 3, rng);
    DetectorModel m = init_model(5, 3, DetectorConfig{}, rng);
    m.head.margin = 50;
    EXPECT_GT(nn::grad_check(make_contrastive_objective(m, p), 1e-5, [](nn::GradSet& g) { g.back()[0] += 0.1; }), 1e-2);
}

TEST(Contrastive, LabelSemantics) {
    const double m = 2.0, h = 1e-6;
    for (double d : {0.1, 0.5, 1.0, 1.9}) {
        const double far = (nn::contrastive_loss(d + h, 1, m) - nn::contrastive_loss(d - h, 1, m)) / (2 * h);
        const double close = (nn::contrastive_loss(d + h, 0, m) - nn::contrastive_loss(d - h, 0, m)) / (2 * h);
        EXPECT_LT(far, 0) << d;
        EXPECT_GT(close, 0) << d;
    }
    EXPECT_EQ(nn::contrastive_loss(2.5, 1, m), 0.0);
    EXPECT_DOUBLE_EQ(nn::contrastive_loss(0.5, 1, m), 2.25);
}

TEST(Pairs, TwoPerFaceAndIdempotentOperator) {
    const auto& f = fixture();
    EXPECT_EQ(f.tp.size(), 2 * static_cast<Index>(f.train.size()));
    for (Index r = 0; r < 6; ++r) EXPECT_EQ(f.tp.y[static_cast<std::size_t>(r)], r % 2 == 0 ? 1 : 0);
    // second pair of each face starts where the first ends
    EXPECT_EQ(f.tp.x1.row(1), f.tp.x2.row(0));

    // an exactly idempotent operator (here a constant map) gives X1 == X2 on the Y = 0 pairs
    recon::ReconRegistry proj = *f.a.ops;
    for (auto& op : proj.ops) {
        for (auto& l : op.net.mutable_layers()) {
            l.weight.setZero();
            l.bias.setZero();
        }
    }
    const auto p = build_training_pairs(std::vector<FaceSample>(f.train.begin(), f.train.begin() + 4), proj,
                                        f.a.extractors, {});
    for (Index r = 1; r < p.size(); r += 2) EXPECT_EQ(p.x1.row(r), p.x2.row(r));

    std::vector<FaceSample> fake{f.a.ds.extractor_fake.front()};
    EXPECT_THROW(build_training_pairs(fake, *f.a.ops, f.a.extractors, {}), ConfigError);
}

TEST(LrGrid, Parse) {
    const auto g = parse_lr_grid("1e-4:1e-3:10");
    ASSERT_EQ(g.size(), 10u);
    EXPECT_DOUBLE_EQ(g.front(), 1e-4);
    EXPECT_DOUBLE_EQ(g.back(), 1e-3);
    EXPECT_DOUBLE_EQ(g[1], 2e-4);
    EXPECT_EQ(parse_lr_grid("0.01:0.01:1"), std::vector<double>{0.01});
    for (const char* bad : {"1e-4:1e-3", "0:1:3", "1e-3:1e-4:3", "a:b:c", "1:2:0"})
        EXPECT_THROW(parse_lr_grid(bad), ConfigError) << bad;
}

TEST(Training, PostConditions) {
    const auto& f = fixture();
    EXPECT_TRUE(f.bundle.model.head.decoupled());
    const auto& b = f.bundle.info.best_so_far;
    ASSERT_EQ(b.size(), f.cfg.detector.lr_grid.size() * static_cast<std::size_t>(f.cfg.detector.epochs));
    for (std::size_t i = 1; i < b.size(); ++i) EXPECT_LE(b[i], b[i - 1]);
    EXPECT_EQ(b.back(), f.bundle.info.best_val_loss);
    EXPECT_GT(f.bundle.info.val_far_mean, f.bundle.info.val_close_mean);
}

TEST(Training, Deterministic) {
    const auto& f = fixture();
    DetectorConfig c = f.cfg.detector;
    c.epochs = 3;
    c.lr_grid = {1e-3};
    const auto a = train_detector(f.tp, f.vp, f.cfg.plan.identities, c, 9);
    const auto b = train_detector(f.tp, f.vp, f.cfg.plan.identities, c, 9);
    EXPECT_EQ(a.first.head.s1.weight, b.first.head.s1.weight);
    EXPECT_EQ(a.first.decoder.w, b.first.decoder.w);
    EXPECT_EQ(a.second.best_val_loss, b.second.best_val_loss);
}

TEST(Training, Rejections) {
    const auto& f = fixture();
    PairData small = f.tp;
    small.x1.conservativeResize(50, Eigen::NoChange);
    EXPECT_THROW(train_detector(small, f.vp, f.cfg.plan.identities, f.cfg.detector, 1), ConfigError);
    DetectorConfig c = f.cfg.detector;
    c.margin = 0;
    EXPECT_THROW(train_detector(f.tp, f.vp, f.cfg.plan.identities, c, 1), ConfigError);
    c = f.cfg.detector;
    c.lr_grid = {1e6};
    c.epochs = 3;
    PairData bad = f.tp;
    bad.x1(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(train_detector(bad, f.vp, f.cfg.plan.identities, c, 1), NumericError);
}

TEST(Scoring, AuthenticScoresHigher) {
    const auto& f = fixture();
    const auto s = f.scores();
    double auth = 0, fake = 0, na = 0, nf = 0;
    for (std::size_t i = 0; i < s.size(); ++i) (f.test[i].authentic() ? (auth += s[i], na) : (fake += s[i], nf)) += 1;
    EXPECT_GT(auth / na, fake / nf);
    EXPECT_EQ(score(f.bundle, f.test[0].x, f.test[0].identity), s[0]);
    EXPECT_THROW(score(f.bundle, f.test[0].x, 99), ConfigError);
}

TEST(Scoring, ClassifyExtremes) {
    const auto& f = fixture();
    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(classify(f.bundle, f.test[i].x, f.test[i].identity, -inf), synth::Label::authentic);
        EXPECT_EQ(classify(f.bundle, f.test[i].x, f.test[i].identity, inf), synth::Label::deepfake);
    }
}

TEST(Scoring, YoudenBalancedAccuracy) {
    const auto& f = fixture();
    const auto [aucs, bal] = eval::per_identity_auc(f.test, f.scores(), f.cfg.plan.identities, &f.bundle.thresholds);
    EXPECT_GE(bal, 0.85);
    EXPECT_GE(f.mean_auc(), 0.9);
}

TEST(Scoring, CsvHeader) {
    const auto& f = fixture();
    std::vector<FaceSample> two(f.test.begin(), f.test.begin() + 2);
    const auto rows = score_samples(two, -1, [&](const VectorXd& x, int k) { return score(f.bundle, x, k); });
    const auto csv = scores_to_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "sample_id,identity,label,score");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Bundle, SaveLoadRoundTrip) {
    const auto& f = fixture();
    const auto dir = std::filesystem::temp_directory_path() / "dfid_test_bundle";
    std::filesystem::remove_all(dir);
    save_bundle(f.bundle, dir);
    const auto b = load_bundle(dir);
    EXPECT_EQ(b.thresholds, f.bundle.thresholds);
    EXPECT_EQ(b.model.decoder.w, f.bundle.model.decoder.w);
    for (std::size_t i = 0; i < 20; ++i)
        EXPECT_NEAR(score(b, f.test[i].x, f.test[i].identity), score(f.bundle, f.test[i].x, f.test[i].identity), 1e-12);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_bundle(dir), IoError);
}

TEST(FeatureClassifier, SeparatesAuthenticFromReconstructed) {
    const auto& f = fixture();
    DetectorConfig c = f.cfg.detector;
    c.lr_grid = {1e-3};
    const auto cls = train_feature_classifier(f.tp, f.vp, c, 1);
    std::vector<double> s;
    for (const auto& x : f.test) s.push_back(cls.net.forward(f.a.extractors.base({}, x.x))[0]);
    const auto aucs = eval::per_identity_auc(f.test, s, f.cfg.plan.identities, nullptr).first;
    EXPECT_GT(std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(aucs.size()), 0.8);
}

// Shrinking the generator trace drags AUC toward chance; at zero the swap is a
// pure identity transfer and there is nothing for R to undo.
TEST(Scoring, NoTraceNoDetection) {
    const double full = fixture().mean_auc();
    const double half = Fixture(1, 0.5).mean_auc();
    const double none = Fixture(1, 0.0).mean_auc();
    RecordProperty("auc_full", std::to_string(full));
    RecordProperty("auc_half", std::to_string(half));
    RecordProperty("auc_none", std::to_string(none));
    EXPECT_LE(half, full);
    EXPECT_LT(none, half);
    EXPECT_LT(std::abs(none - 0.5), 0.1) << none;
}

// The decoder should not hurt: mean AUC with q > 0 at least matches q = 0,
// single fold per seed over five seeds.
TEST(Scoring, IdentityConditioningGain) {
    double with = 0, without = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        eval::ExperimentConfig c;
        const auto a = eval::build_artifacts(c, seed);
        const auto test = eval::test_set(a.ds, synth::GeneratorFamily::A);
        const auto p = eval::run_fold(c, a, "proposed", 0, test);
        const auto q = eval::run_fold(c, a, "ablate_identity", 0, test);
        with += std::accumulate(p.identity_auc.begin(), p.identity_auc.end(), 0.0) / 10.0;
        without += std::accumulate(q.identity_auc.begin(), q.identity_auc.end(), 0.0) / 10.0;
    }
    EXPECT_GE(with / 5, without / 5) << "with " << with / 5 << " without " << without / 5;
}
