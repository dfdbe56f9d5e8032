#include <gtest/gtest.h>

#include <filesystem>

#include "dfid/id_features.hpp"
#include "dfid/probe.hpp"

using namespace dfid;
using namespace dfid::features;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using synth::FaceSample;
using synth::GeneratorFamily;

namespace {

struct Trained {
    synth::Dataset ds;
    TeacherNet teacher;
    StudentNet initial, student;
    PairSet pairs;

    Trained() : ds(synth::build_dataset(synth::DatasetPlan{}, 1)) {
        teacher = pretrain_teacher(ds.teacher_pool, {}, 1);
        initial = init_student(ds.extractor_auth, ds.plan.identities, {}, 1);
        pairs = make_pairs(teacher, ds.extractor_auth, ds.extractor_fake);
        student = train_student(pairs, initial, {}, 1);
    }
};

const Trained& trained() {
    static const Trained t;
    return t;
}

// Even/odd split probe on test faces.
template <typename Label>
double probe(const std::vector<FaceSample>& v, const StudentNet& s, Label label, int classes) {
    const Index n = static_cast<Index>(v.size()), f = s.feature_len();
    MatrixXd tr((n + 1) / 2, f), te(n / 2, f);
    std::vector<int> ytr, yte;
    for (Index i = 0; i < n; ++i) {
        const auto& x = v[static_cast<std::size_t>(i)];
        if (i % 2 == 0) {
            tr.row(i / 2) = s.extract(x.x).transpose();
            ytr.push_back(label(x));
        } else {
            te.row(i / 2) = s.extract(x.x).transpose();
            yte.push_back(label(x));
        }
    }
    return nn::linear_probe(tr, ytr, te, yte, classes, 1).test_accuracy;
}

std::vector<FaceSample> test_authentic() {
    std::vector<FaceSample> out;
    for (const auto& s : trained().ds.test)
        if (s.authentic()) out.push_back(s);
    return out;
}

std::vector<FaceSample> test_authentic_and_a() {
    auto out = test_authentic();
    for (const auto& s : trained().ds.test)
        if (!s.authentic() && s.provenance->family == GeneratorFamily::A) out.push_back(s);
    return out;
}

bool same_net(const nn::DenseNet& a, const nn::DenseNet& b) {
    if (a.layer_count() != b.layer_count()) return false;
    for (std::size_t k = 0; k < a.layer_count(); ++k)
        if (a.layers()[k].weight != b.layers()[k].weight || a.layers()[k].bias != b.layers()[k].bias) return false;
    return true;
}

}  // namespace

TEST(DistillLosses, UnitCase) {
    VectorXd t = VectorXd::Zero(2);
    auto l = distill_losses_from_features(t, t, VectorXd::Ones(2), VectorXd::Ones(2) + VectorXd::Unit(2, 0), 2.0);
    // student auth (1,1), deepfake (2,1): distance 1
    EXPECT_DOUBLE_EQ(l.l1, 2.0);
    EXPECT_DOUBLE_EQ(l.l2, 5.0);
    EXPECT_DOUBLE_EQ(l.l3, 1.0);
    auto m = distill_losses_from_features(t, t, VectorXd::Ones(2), VectorXd::Ones(2), 2.0);
    EXPECT_DOUBLE_EQ(m.l1, 2.0);
    EXPECT_DOUBLE_EQ(m.l2, 2.0);
    EXPECT_DOUBLE_EQ(m.l3, 4.0);
}

TEST(DistillLosses, SaturatedHingeIsZero) {
    VectorXd a = VectorXd::Zero(3), b = VectorXd::Constant(3, 4.0);
    EXPECT_EQ(distill_losses_from_features(a, b, a, b, 5.0).l3, 0.0);
    EXPECT_GT(distill_losses_from_features(a, b, a, b, 7.0).l3, 0.0);
}

TEST(DistillLosses, CopiedTeacherGivesZeroDistillation) {
    const auto& tr = trained();
    StudentNet s;
    std::vector<nn::Layer> layers(tr.teacher.net.layers().begin(), tr.teacher.net.layers().end() - 1);
    nn::Layer adapter;
    adapter.weight = tr.teacher.adapter;
    adapter.bias = VectorXd::Zero(tr.teacher.adapter.rows());
    layers.push_back(adapter);
    s.net = nn::DenseNet(std::move(layers), 1);
    for (std::size_t i = 0; i < 5; ++i) {
        auto l = distill_losses(tr.teacher, s, tr.ds.extractor_auth[i].x, tr.ds.extractor_fake[i].x, 5.0);
        EXPECT_EQ(l.l1, 0.0);
        EXPECT_EQ(l.l2, 0.0);
    }
}

TEST(DistillLosses, LengthMismatchIsConfigError) {
    const auto& tr = trained();
    StudentConfig c;
    c.feature_len = 8;
    auto s = init_student(tr.ds.extractor_auth, tr.ds.plan.identities, c, 2);
    EXPECT_THROW(distill_losses(tr.teacher, s, tr.ds.extractor_auth[0].x, tr.ds.extractor_fake[0].x, 5.0),
                 ConfigError);
    EXPECT_THROW(train_student(tr.pairs, s, {}, 2), ConfigError);
    EXPECT_THROW(distill_losses_from_features(VectorXd::Zero(2), VectorXd::Zero(2), VectorXd::Zero(3),
                                              VectorXd::Zero(3), 1.0),
                 ConfigError);
}

TEST(CompositeLoss, GradientMatchesFiniteDifferences) {
    const auto& tr = trained();
    // alpha > 0 throughout: with alpha = 0 the output bias cancels in the
    // student distance, its gradient is exactly zero and the relative error
    // degenerates to 1 on pure roundoff
    const double weights[][2] = {{1, 0}, {0.05, 1}, {0.5, 0.5}, {0.3, 0.9}};
    double worst = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto s = tr.initial;
        // perturb the trainable head so every seed probes a different point
        Rng rng(seed);
        for (auto p : s.net.trainable_params())
            for (Index i = 0; i < p.size; ++i) p.data[i] += 0.3 * std::normal_distribution<double>()(rng);
        PairSet p;
        const Index lo = static_cast<Index>(seed * 7 % 190);
        p.auth = tr.pairs.auth.middleRows(lo, 6);
        p.fake = tr.pairs.fake.middleRows(lo, 6);
        p.t_auth = tr.pairs.t_auth.middleRows(lo, 6);
        p.t_fake = tr.pairs.t_fake.middleRows(lo, 6);
        const auto& w = weights[seed % 4];
        // margin just above the largest pair distance keeps every pair on the
        // hinge's smooth branch without inflating the loss (and its roundoff)
        double m_h = 0;
        for (Index r = 0; r < p.size(); ++r)
            m_h = std::max(m_h, (s.extract(p.auth.row(r).transpose()) - s.extract(p.fake.row(r).transpose())).norm());
        worst = std::max(worst, nn::grad_check(make_distill_objective(s, p, w[0], w[1], m_h + 1.0)));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(CompositeLoss, TamperedGradientIsCaught) {
    const auto& tr = trained();
    auto s = tr.initial;
    PairSet p;
    p.auth = tr.pairs.auth.topRows(4);
    p.fake = tr.pairs.fake.topRows(4);
    p.t_auth = tr.pairs.t_auth.topRows(4);
    p.t_fake = tr.pairs.t_fake.topRows(4);
    auto err = nn::grad_check(make_distill_objective(s, p, 1, 1, 50.0), 1e-5,
                              [](nn::GradSet& g) { g[0][0] += 1.0; });
    EXPECT_GT(err, 1e-2);
}

TEST(Schedule, ParseAndFormat) {
    auto s = parse_schedule("150:1,0;150:0,1");
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].epochs, 150);
    EXPECT_EQ(s[0].alpha, 1.0);
    EXPECT_EQ(s[1].beta, 1.0);
    EXPECT_EQ(format_schedule(s), "150:1,0;150:0,1");
    EXPECT_THROW(parse_schedule(""), ConfigError);
    EXPECT_THROW(parse_schedule("150"), ConfigError);
    EXPECT_THROW(parse_schedule("x:1,0"), ConfigError);
    DistillConfig c;
    c.schedule = parse_schedule("10:1.5,0");
    EXPECT_THROW(c.validate(), ConfigError);
    c.schedule = parse_schedule("10:1,0");
    c.m_h = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(DistillConfig{}.total_epochs(), 300);
}

TEST(Teacher, MeetsFloorAndSeparates) {
    const auto& tr = trained();
    EXPECT_GE(tr.teacher.heldout_accuracy, 0.90);
    EXPECT_EQ(tr.teacher.net.frozen_prefix_len(), tr.teacher.net.layer_count());
    auto t = tr.teacher.net;
    EXPECT_TRUE(t.trainable_params().empty());
}

TEST(Teacher, FailsWithoutSignal) {
    auto plan = synth::DatasetPlan{};
    plan.gen_a.signature_amplitude = 0;
    plan.gen_a.residual_keep = 1;
    plan.gen_a.trace_scale = 0;
    auto ds = synth::build_dataset(plan, 4);
    EXPECT_THROW(pretrain_teacher(ds.teacher_pool, {}, 4), NumericError);
}

TEST(Teacher, RejectsUnbalancedPool) {
    const auto& tr = trained();
    std::vector<FaceSample> pool;
    for (const auto& s : tr.ds.teacher_pool)
        if (s.authentic() || pool.size() % 3 == 0) pool.push_back(s);
    EXPECT_THROW(pretrain_teacher(pool, {}, 1), ConfigError);
}

TEST(Teacher, SaveLoadRoundTrip) {
    const auto& tr = trained();
    auto dir = std::filesystem::temp_directory_path() / "dfid_teacher_test";
    save_teacher(tr.teacher, dir / "teacher.ckpt");
    auto back = load_teacher(dir / "teacher.ckpt");
    EXPECT_TRUE(same_net(back.net, tr.teacher.net));
    EXPECT_EQ(back.adapter, tr.teacher.adapter);
    EXPECT_EQ(back.heldout_accuracy, tr.teacher.heldout_accuracy);
    std::filesystem::remove_all(dir);
}

TEST(Student, FrozenPrefixSurvivesBothPhases) {
    const auto& tr = trained();
    ASSERT_GE(tr.student.net.frozen_prefix_len(), 1u);
    EXPECT_EQ(tr.student.net.layers()[0].weight, tr.initial.net.layers()[0].weight);
    EXPECT_EQ(tr.student.net.layers()[0].bias, tr.initial.net.layers()[0].bias);
    EXPECT_NE(tr.student.net.layers().back().weight, tr.initial.net.layers().back().weight);
    EXPECT_EQ(tr.student.feature_len(), 16);
}

TEST(Student, PhasePostConditions) {
    const auto& m = trained().student.meta;
    EXPECT_LE(m.phase1_l12 * 5.0, m.init_l12);
    EXPECT_GE(m.final_distance, 2.0 * m.phase1_distance);
}

TEST(Student, DistillOnlyConvergesTowardTeacher) {
    const auto& tr = trained();
    DistillConfig c;
    c.schedule = {{300, 1, 0}};
    auto s = train_student(tr.pairs, tr.initial, c, 1);
    EXPECT_LT(s.meta.final_l12, 0.15 * s.meta.init_l12);
    EXPECT_EQ(s.meta.final_l12, s.meta.phase1_l12);
}

TEST(Student, DeterministicUnderSeed) {
    const auto& tr = trained();
    DistillConfig c;
    c.schedule = {{5, 1, 0}, {5, 0, 1}};
    auto a = train_student(tr.pairs, tr.initial, c, 9);
    auto b = train_student(tr.pairs, tr.initial, c, 9);
    auto d = train_student(tr.pairs, tr.initial, c, 10);
    EXPECT_TRUE(same_net(a.net, b.net));
    EXPECT_FALSE(same_net(a.net, d.net));
}

TEST(Student, DivergenceNamesPhaseAndEpoch) {
    const auto& tr = trained();
    PairSet p = tr.pairs;
    p.t_auth *= 1e200;
    p.t_fake *= 1e200;
    DistillConfig c;
    c.schedule = {{3, 1, 0}};
    c.lr = 1e3;
    try {
        train_student(p, tr.initial, c, 1);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("phase 0"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(Student, NeedsHundredPairs) {
    const auto& tr = trained();
    PairSet p;
    p.auth = tr.pairs.auth.topRows(50);
    p.fake = tr.pairs.fake.topRows(50);
    p.t_auth = tr.pairs.t_auth.topRows(50);
    p.t_fake = tr.pairs.t_fake.topRows(50);
    EXPECT_THROW(train_student(p, tr.initial, {}, 1), ConfigError);
}

TEST(MakePairs, RejectsMismatchedPairs) {
    const auto& tr = trained();
    auto auth = tr.ds.extractor_auth, fake = tr.ds.extractor_fake;
    std::swap(auth[0], fake[0]);
    EXPECT_THROW(make_pairs(tr.teacher, auth, fake), ConfigError);
    auth = tr.ds.extractor_auth;
    fake = tr.ds.extractor_fake;
    fake[0].identity = (fake[0].identity + 1) % 10;
    EXPECT_THROW(make_pairs(tr.teacher, auth, fake), ConfigError);
    fake.pop_back();
    EXPECT_THROW(make_pairs(tr.teacher, auth, fake), ConfigError);
}

TEST(Extract, DeterministicAndChecksDimension) {
    const auto& tr = trained();
    const auto& x = tr.ds.test[0].x;
    EXPECT_EQ(extract(tr.student, x), extract(tr.student, x));
    EXPECT_THROW(extract(tr.student, VectorXd::Zero(5)), ConfigError);
}

TEST(Extract, IdentityProbe) {
    auto acc = probe(test_authentic(), trained().student, [](const FaceSample& s) { return s.identity; }, 10);
    EXPECT_GE(acc, 0.95);
}

TEST(Extract, TraceProbe) {
    auto acc = probe(test_authentic_and_a(), trained().student,
                     [](const FaceSample& s) { return static_cast<int>(s.authentic()); }, 2);
    EXPECT_GE(acc, 0.85);
}

TEST(Extract, DeepfakeFartherThanSameIdentityAuthentic) {
    const auto& tr = trained();
    const auto& s = tr.student;
    double df = 0, aa = 0;
    const Index n = tr.pairs.size();
    for (Index i = 0; i < n; ++i) {
        const VectorXd a = s.extract(tr.pairs.auth.row(i).transpose());
        df += (a - s.extract(tr.pairs.fake.row(i).transpose())).norm();
        // another authentic face of the same identity
        for (Index j = i + 1; j < n; ++j)
            if (tr.ds.extractor_auth[static_cast<std::size_t>(j)].identity ==
                tr.ds.extractor_auth[static_cast<std::size_t>(i)].identity) {
                aa += (a - s.extract(tr.pairs.auth.row(j).transpose())).norm();
                break;
            }
    }
    EXPECT_GT(df, aa);
}

TEST(Extract, FeaturesCsvHeader) {
    const auto& tr = trained();
    std::vector<FaceSample> two(tr.ds.test.begin(), tr.ds.test.begin() + 2);
    auto csv = features_to_csv(tr.student, two);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "sample_id,identity,label,f0,f1,f2,f3,f4,f5,f6,f7,f8,f9,f10,f11,f12,f13,f14,f15");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
