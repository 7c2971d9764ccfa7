#include <doctest.h>

#include <cmath>

#include "elm/distillation.hpp"
#include "elm/proxy_tasks.hpp"
#include "gradcheck.hpp"

using namespace elm;
using namespace elm::distill;
using nn::Matrix;

namespace {

nn::TransformerConfig small_config(int layers, int hidden, std::uint64_t seed) {
    nn::TransformerConfig c;
    c.layers = layers;
    c.hidden = hidden;
    c.ffn = 2 * hidden;
    c.heads = 2;
    c.vocab_size = 16;
    c.max_seq_len = 6;
    c.seed = seed;
    return c;
}

std::vector<std::vector<int>> random_sequences(int n, int len, int vocab, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<int>> out(n, std::vector<int>(len));
    for (auto& s : out) {
        for (int& t : s) t = static_cast<int>(rng.below(vocab));
    }
    return out;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// Same quantity as layer_loss written as explicit loops.
double loop_layer_loss(const nn::LayerActivations& s, const nn::LayerActivations& t, const Matrix& w, int heads) {
    const double batch = static_cast<double>(s.attention_scores.size()) / heads;
    double att = 0.0;
    for (std::size_t i = 0; i < s.attention_scores.size(); ++i) {
        for (Eigen::Index r = 0; r < s.attention_scores[i].rows(); ++r) {
            for (Eigen::Index c = 0; c < s.attention_scores[i].cols(); ++c) {
                const double d = s.attention_scores[i](r, c) - t.attention_scores[i](r, c);
                att += d * d;
            }
        }
    }
    double hid = 0.0;
    for (Eigen::Index r = 0; r < s.hidden.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.hidden.cols(); ++c) {
            double v = 0.0;
            for (Eigen::Index k = 0; k < s.hidden.cols(); ++k) v += s.hidden(r, k) * w(k, c);
            const double d = v - t.hidden(r, c);
            hid += d * d;
        }
    }
    return att / (heads * batch) + hid / batch;
}

nn::LayerActivations random_acts(int batch, int heads, int len, int d, Rng& rng) {
    nn::LayerActivations a;
    for (int i = 0; i < batch * heads; ++i) a.attention_scores.push_back(random_matrix(len, len, rng));
    a.hidden = random_matrix(static_cast<Eigen::Index>(batch) * len, d, rng);
    return a;
}

}  // namespace

TEST_CASE("layer loss: all-ones attention difference gives 4") {
    nn::LayerActivations s, t;
    t.attention_scores = {Matrix::Zero(2, 2)};
    s.attention_scores = {Matrix::Ones(2, 2)};
    s.hidden = Matrix::Zero(2, 3);
    t.hidden = Matrix::Zero(2, 3);
    CHECK(layer_loss(s, t, Matrix::Identity(3, 3), 1) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("layer loss matches an elementwise loop") {
    Rng rng(3);
    for (int heads : {1, 2, 4}) {
        const auto s = random_acts(3, heads, 5, 4, rng);
        const auto t = random_acts(3, heads, 5, 6, rng);
        const Matrix w = random_matrix(4, 6, rng);
        const double a = layer_loss(s, t, w, heads);
        const double b = loop_layer_loss(s, t, w, heads);
        CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)));
    }
}

TEST_CASE("layer loss rejects mismatched shapes") {
    Rng rng(4);
    const auto s = random_acts(2, 2, 4, 3, rng);
    SUBCASE("head count") {
        const auto t = random_acts(2, 1, 4, 3, rng);
        CHECK_THROWS_AS(layer_loss(s, t, Matrix::Identity(3, 3), 2), std::invalid_argument);
    }
    SUBCASE("sequence length") {
        const auto t = random_acts(2, 2, 5, 3, rng);
        CHECK_THROWS_AS(layer_loss(s, t, Matrix::Identity(3, 3), 2), std::invalid_argument);
    }
    SUBCASE("projection shape") {
        const auto t = random_acts(2, 2, 4, 5, rng);
        CHECK_THROWS_AS(layer_loss(s, t, Matrix::Identity(3, 3), 2), std::invalid_argument);
    }
}

TEST_CASE("projection gradient equals 2 H^T (H W - H_T) per batch element") {
    Rng rng(5);
    const auto s = random_acts(1, 2, 4, 3, rng);
    const auto t = random_acts(1, 2, 4, 5, rng);
    const Matrix w = random_matrix(3, 5, rng);
    LayerLossGrad g;
    layer_loss(s, t, w, 2, &g);
    const Matrix expected = 2.0 * s.hidden.transpose() * (s.hidden * w - t.hidden);
    CHECK((g.projection - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("self-distillation of a clone is zero") {
    const auto cfg = small_config(3, 8, 21);
    auto teacher = nn::Encoder::initialize(cfg);
    test::perturb(teacher.params, 0.1, 22);
    const auto student = teacher;
    const auto seqs = random_sequences(4, 6, cfg.vocab_size, 23);
    const auto batch = nn::Batch::from_sequences(seqs);
    const auto tc = nn::forward(teacher, batch);
    std::vector<nn::LayerActivations> acts;
    for (int l = 0; l < cfg.layers; ++l) acts.push_back(tc.activations(l));
    const LayerMapping identity(std::vector<std::optional<int>>{1, 2, 3});
    const ProjectionSet w(3, Matrix::Identity(8, 8));
    CHECK(distillation_loss(student, w, identity, batch, acts) < 1e-10);
}

TEST_CASE("distillation objective gradients match finite differences") {
    const auto tcfg = small_config(4, 8, 31);
    auto teacher = nn::Encoder::initialize(tcfg);
    test::perturb(teacher.params, 0.2, 32);
    auto scfg = small_config(3, 6, 33);
    auto student = nn::Encoder::initialize(scfg);
    test::perturb(student.params, 0.2, 34);
    const auto seqs = random_sequences(2, 5, tcfg.vocab_size, 35);
    const auto batch = nn::Batch::from_sequences(seqs);
    const auto tc = nn::forward(teacher, batch);
    std::vector<nn::LayerActivations> acts;
    for (int l = 0; l < tcfg.layers; ++l) acts.push_back(tc.activations(l));
    const LayerMapping mapping(std::vector<std::optional<int>>{2, std::nullopt, 4});
    auto w = make_projections(mapping, 6, 8, 36);
    for (auto& m : w) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] *= 20.0;
    }
    DistillGrads grads;
    distillation_loss(student, w, mapping, batch, acts, &grads);
    CHECK(grads.projections[1].size() == 0);

    auto tensors = test::encoder_tensors(student.params, grads.student);
    tensors.push_back({"proj.w0", &w[0], &grads.projections[0]});
    tensors.push_back({"proj.w2", &w[2], &grads.projections[2]});
    const auto report = test::check_gradients(
        tensors, [&] { return distillation_loss(student, w, mapping, batch, acts); }, 120, 1e-4, 37);
    INFO(report.worst);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("None entries contribute nothing and get no projection") {
    const LayerMapping mapping(std::vector<std::optional<int>>{std::nullopt, std::nullopt, 5, 10});
    const auto w = make_projections(mapping, 16, 32, 1);
    CHECK(w[0].size() == 0);
    CHECK(w[1].size() == 0);
    CHECK(w[2].rows() == 16);
    CHECK(w[2].cols() == 32);
    CHECK(w[3].rows() == 16);

    // Only the mapped layer's term is active: the loss equals that single layer_loss.
    const auto tcfg = small_config(4, 8, 41);
    const auto teacher = nn::Encoder::initialize(tcfg);
    const auto student = nn::Encoder::initialize(small_config(3, 8, 42));
    const auto seqs = random_sequences(3, 6, tcfg.vocab_size, 43);
    const auto batch = nn::Batch::from_sequences(seqs);
    const auto tc = nn::forward(teacher, batch);
    const auto sc = nn::forward(student, batch);
    std::vector<nn::LayerActivations> acts;
    for (int l = 0; l < tcfg.layers; ++l) acts.push_back(tc.activations(l));
    const LayerMapping only_last(std::vector<std::optional<int>>{std::nullopt, std::nullopt, 3});
    const auto p = make_projections(only_last, 8, 8, 44);
    const double single = layer_loss(sc.activations(2), tc.activations(2), p[2], tcfg.heads);
    CHECK(distillation_loss(student, p, only_last, batch, acts) == doctest::Approx(single).epsilon(1e-14));

    DistillGrads g;
    distillation_loss(student, p, only_last, batch, acts, &g);
    CHECK(g.projections[0].size() == 0);
    CHECK(g.projections[1].size() == 0);
}

TEST_CASE("distill trains, leaves the teacher untouched and is deterministic") {
    proxy::CorpusSpec cs;
    cs.num_sequences = 200;
    cs.seq_len = 8;
    cs.vocab_size = 16;
    cs.motif_len = 3;
    const auto corpus = proxy::generate_corpus(cs);
    auto tcfg = small_config(4, 8, 51);
    tcfg.max_seq_len = 8;
    const auto teacher = nn::Encoder::initialize(tcfg);
    const auto before = nn::serialize(teacher);
    const TeacherTargets targets(teacher, corpus.sequences);
    auto scfg = small_config(2, 8, 0);
    scfg.max_seq_len = 8;
    DistillConfig dc;
    dc.steps = 120;
    dc.batch_size = 8;
    dc.learning_rate = 5e-3;
    dc.seed = 52;
    const LayerMapping mapping(std::vector<std::optional<int>>{2, 4});
    const auto a = distill::distill(targets, scfg, mapping, dc);
    CHECK(nn::serialize(teacher) == before);
    REQUIRE(a.loss_curve.size() == 120);
    const auto [first, last] = decile_means(a.loss_curve);
    CHECK(first >= last);

    const auto b = distill::distill(targets, scfg, mapping, dc);
    CHECK(a.loss_curve == b.loss_curve);
    CHECK(nn::serialize(a.student) == nn::serialize(b.student));

    SUBCASE("bad mappings are rejected") {
        CHECK_THROWS_AS(distill::distill(targets, scfg, LayerMapping(std::vector<std::optional<int>>{2}), dc),
                        std::invalid_argument);
        CHECK_THROWS_AS(distill::distill(targets, scfg, LayerMapping(std::vector<std::optional<int>>{2, std::nullopt}), dc),
                        std::invalid_argument);
        CHECK_THROWS_AS(distill::distill(targets, scfg, LayerMapping(std::vector<std::optional<int>>{2, 9}), dc),
                        std::invalid_argument);
        auto other_heads = scfg;
        other_heads.heads = 1;
        CHECK_THROWS_AS(distill::distill(targets, other_heads, mapping, dc), std::invalid_argument);
    }
}

TEST_CASE("masked-token pretraining beats chance") {
    proxy::CorpusSpec cs;
    cs.num_sequences = 400;
    cs.seq_len = 8;
    cs.vocab_size = 16;
    cs.motif_len = 3;
    cs.num_motifs = 4;
    cs.motif_prob = 0.8;
    const auto corpus = proxy::generate_corpus(cs);
    auto cfg = small_config(2, 16, 61);
    cfg.max_seq_len = 8;
    PretrainConfig pc;
    pc.steps = 300;
    pc.batch_size = 16;
    pc.learning_rate = 5e-3;
    pc.seed = 62;
    std::vector<double> curve;
    const auto teacher = pretrain_teacher(cfg, corpus.sequences, pc, &curve);
    const double acc = masked_accuracy(teacher, corpus.sequences, 0.15, 63);
    CHECK(acc >= 3.0 / cs.vocab_size);
    const auto [first, last] = decile_means(curve);
    CHECK(last < first);

    pc.steps = 0;
    const auto untrained = pretrain_teacher(cfg, corpus.sequences, pc);
    CHECK(masked_accuracy(untrained, corpus.sequences, 0.15, 63) < 3.0 / cs.vocab_size);
}
