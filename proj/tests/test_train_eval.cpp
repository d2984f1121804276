#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "cxrnet/checkpoint.hpp"
#include "cxrnet/metrics.hpp"
#include "cxrnet/model.hpp"
#include "cxrnet/train.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using cxr::Extent;
using cxr::Mode;
using cxr::Tensor;
using testing_support::TempDir;

namespace {

cxr::ModelConfig tiny_config(int input = 8) {
    cxr::ModelConfig c;
    c.input_size = input;
    c.block_filters = {2, 3};
    c.dense_widths = {4};
    c.dropout = 0.0;
    return c;
}

struct SynthSplit {
    TempDir dir{"train_eval"};
    cxr::DatasetIndex index;
};

std::unique_ptr<SynthSplit> make_synth_split(int per_class, int size, std::uint64_t seed) {
    auto s = std::make_unique<SynthSplit>();
    cxr::synth_dataset(per_class, size, seed, s->dir.str());
    s->index = cxr::split(cxr::scan_directory(s->dir.str()), {0.8, 0.1, 0.1}, seed);
    return s;
}

cxr::Preprocessor pre_for(int size) {
    cxr::Preprocessor p;
    p.target_size = size;
    p.clahe_params = {4, 4, 2.0};
    return p;
}

cxr::ErrorKind kind_of(auto&& f) {
    try {
        f();
    } catch (const cxr::Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an error";
    return cxr::ErrorKind::io;
}

}  // namespace

// ---------------------------------------------------------------------------
// model structure

TEST(Model, DefaultParameterCount) {
    const cxr::ModelConfig cfg;
    EXPECT_EQ(cxr::count_parameters(cfg), 1438401);
    cxr::Rng rng(1);
    cxr::Model<float> m(cfg, rng);
    EXPECT_EQ(m.parameter_count(), 1438401);
    EXPECT_GE(m.parameter_count(), 1000000);
    EXPECT_LE(m.parameter_count(), 3000000);
}

TEST(Model, DefaultGeometry) {
    const auto geo = cxr::block_geometry(cxr::ModelConfig{});
    ASSERT_EQ(geo.size(), 5u);
    const int conv[] = {150, 75, 37, 18, 9}, pooled[] = {75, 37, 18, 9, 4};
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(geo[i].conv_extent, conv[i]);
        EXPECT_EQ(geo[i].pooled_extent, pooled[i]);
    }
}

TEST(Model, CountFormulaMatchesInstantiatedModels) {
    cxr::Rng rng(2);
    for (auto flavor : {cxr::ConvFlavor::standard, cxr::ConvFlavor::separable})
        for (bool bn : {true, false})
            for (auto pad : {cxr::Padding::same, cxr::Padding::valid}) {
                cxr::ModelConfig c = cxr::toy_model_config(64);
                c.conv_flavor = flavor;
                c.batchnorm = bn;
                c.padding = pad;
                cxr::Model<float> m(c, rng);
                EXPECT_EQ(m.parameter_count(), cxr::count_parameters(c));
            }
}

TEST(Model, SingleBlockSingleFilter) {
    cxr::ModelConfig c;
    c.input_size = 8;
    c.block_filters = {1};
    c.dense_widths = {};
    cxr::Rng rng(3);
    cxr::Model<float> m(c, rng);
    const auto p = m.predict_proba(Tensor<float>({1, 1, 8, 8}, 0.5f));
    EXPECT_EQ(p.shape(), (cxr::Shape{1}));
}

TEST(Model, FreshProbabilitiesInOpenInterval) {
    cxr::Rng rng(4);
    cxr::Model<float> m(cxr::toy_model_config(32), rng);
    const auto x = oracle::random_tensor<float>({4, 1, 32, 32}, rng, 0, 1);
    const auto probs = m.predict_proba(x);
    for (float p : probs.span()) {
        EXPECT_TRUE(std::isfinite(p));
        EXPECT_GT(p, 0.0f);
        EXPECT_LT(p, 1.0f);
    }
}

TEST(Model, IdenticalInputsIdenticalProbabilities) {
    cxr::Rng rng(5);
    cxr::Model<float> m(cxr::toy_model_config(32), rng);
    const auto one = oracle::random_tensor<float>({1, 1, 32, 32}, rng, 0, 1);
    Tensor<float> batch({3, 1, 32, 32});
    for (int b = 0; b < 3; ++b) std::copy(one.span().begin(), one.span().end(), batch.data() + b * 1024);
    const auto p = m.predict_proba(batch);
    EXPECT_EQ(p[0], p[1]);
    EXPECT_EQ(p[1], p[2]);
}

TEST(Model, ClassifyThreshold) {
    EXPECT_EQ(cxr::classify(0.7), cxr::Label::pneumonia);
    EXPECT_EQ(cxr::classify(0.3), cxr::Label::normal);
    EXPECT_EQ(cxr::classify(0.5), cxr::Label::normal);
    EXPECT_STREQ(cxr::label_name(cxr::classify(0.500001)), "Pneumonia");
}

TEST(Model, SpatialCollapseIsParameterError) {
    cxr::ModelConfig c;
    c.input_size = 16;  // 16 -> 8 -> 4 -> 2 -> 1 -> collapse
    EXPECT_EQ(kind_of([&] { cxr::block_geometry(c); }), cxr::ErrorKind::parameter);
    c.input_size = 4;
    c.block_filters = {4};
    c.padding = cxr::Padding::valid;
    c.kernel = 5;
    EXPECT_EQ(kind_of([&] { cxr::count_parameters(c); }), cxr::ErrorKind::parameter);
}

TEST(Model, WrongInputShapeIsShapeError) {
    cxr::Rng rng(6);
    cxr::Model<float> m(cxr::toy_model_config(32), rng);
    EXPECT_EQ(kind_of([&] { m.forward(Tensor<float>({1, 1, 31, 32}), Mode::infer); }), cxr::ErrorKind::shape);
}

TEST(Model, EndToEndGradientCheck) {
    cxr::Rng rng(7);
    for (auto flavor : {cxr::ConvFlavor::standard, cxr::ConvFlavor::separable}) {
        auto cfg = tiny_config();
        cfg.conv_flavor = flavor;
        cxr::Model<double> m(cfg, rng);
        Tensor<double> x = oracle::random_tensor<double>({3, 1, 8, 8}, rng, 0, 1);
        Tensor<double> labels({3}, std::vector<double>{1, 0, 1});
        auto loss = [&] { return cxr::bce_loss(labels, cxr::sigmoid(m.forward(x, Mode::train))).loss; };
        const auto probs = cxr::sigmoid(m.forward(x, Mode::train));
        m.backward(cxr::sigmoid_backward(cxr::bce_loss(labels, probs).grad, probs));
        const Tensor<double> gx = m.input_grad();
        std::vector<Tensor<double>> grads;
        for (const auto& p : m.parameters()) grads.push_back(*p.grad);
        const auto params = m.parameters();
        for (std::size_t i = 0; i < params.size(); ++i)
            EXPECT_LT(oracle::finite_difference_check(*params[i].value, grads[i], loss).max_rel_error, 1e-4)
                << params[i].name;
        EXPECT_LT(oracle::finite_difference_check(x, gx, loss).max_rel_error, 1e-4);
    }
}

// ---------------------------------------------------------------------------
// training

TEST(Train, OverfitsEightSamples) {
    cxr::Rng rng(8);
    cxr::Model<float> m(cxr::toy_model_config(64), rng);
    cxr::Batch<float> batch{Tensor<float>({8, 1, 64, 64}), Tensor<float>({8}), {}};
    for (int i = 0; i < 8; ++i) {
        const auto s = cxr::synth_image(64, 8, static_cast<std::uint64_t>(i), i % 2 == 1);
        const auto t = cxr::normalize<float>(s.image);
        std::copy(t.span().begin(), t.span().end(), batch.inputs.data() + i * 64 * 64);
        batch.labels[static_cast<std::size_t>(i)] = static_cast<float>(i % 2);
    }
    cxr::AdamState<float> adam;
    cxr::Rng drop(9);
    double loss = 1e9;
    int steps = 0;
    while (steps < 500 && loss >= 0.05) {
        loss = cxr::train_step(m, adam, batch, drop).loss;
        ++steps;
    }
    EXPECT_LT(loss, 0.05) << "after " << steps << " steps";
}

TEST(Train, DefaultModelLossDecreases) {
    cxr::Rng rng(10);
    cxr::Model<float> m(cxr::ModelConfig{}, rng);
    cxr::Batch<float> batch{Tensor<float>({2, 1, 150, 150}), Tensor<float>({2}, std::vector<float>{0, 1}), {}};
    for (int i = 0; i < 2; ++i) {
        const auto t = cxr::normalize<float>(cxr::synth_image(150, 3, 0, i == 1).image);
        std::copy(t.span().begin(), t.span().end(), batch.inputs.data() + i * 150 * 150);
    }
    cxr::AdamState<float> adam;
    cxr::Rng drop(11);
    double first = 0, best = 1e9;
    for (int step = 0; step < 15; ++step) {
        const double l = cxr::train_step(m, adam, batch, drop).loss;
        if (step == 0) first = l;
        best = std::min(best, l);
    }
    m.forward(batch.inputs, Mode::infer);
    EXPECT_LT(best, first);
    const auto probs = m.predict_proba(batch.inputs);
    EXPECT_LT(cxr::bce_loss(batch.labels, probs).loss, first);
}

TEST(Train, ScriptedValidatorDrivesSchedule) {
    auto s = make_synth_split(6, 16, 1);
    cxr::ModelConfig cfg = tiny_config(16);
    cxr::Rng rng(12);
    cxr::Model<float> m(cfg, rng);
    cxr::Loader<float> train(s->index, cxr::Split::train, pre_for(16), 4, true, false, 1);
    int calls = 0;
    cxr::Validator<float> flat = [&](cxr::Model<float>&) {
        ++calls;
        cxr::EvalReport r;
        r.loss = 0.5;
        return r;
    };
    cxr::TrainHyper hyper;
    hyper.epochs = 20;
    const auto h = cxr::train(m, train, flat, hyper);
    ASSERT_EQ(h.epochs.size(), 7u);
    EXPECT_TRUE(h.stopped_early);
    EXPECT_EQ(calls, 7);
    for (int e = 0; e < 3; ++e) EXPECT_DOUBLE_EQ(h.epochs[e].lr, 1e-4);
    for (int e = 3; e < 7; ++e) EXPECT_DOUBLE_EQ(h.epochs[e].lr, 1e-5);
    EXPECT_EQ(h.best_epoch, 1);
}

TEST(Train, DeterministicHistoryAndWeights) {
    auto s = make_synth_split(10, 32, 2);
    auto run = [&] {
        cxr::Rng rng(13);
        cxr::ModelConfig cfg = cxr::toy_model_config(32);
        cxr::Model<float> m(cfg, rng);
        cxr::Loader<float> train(s->index, cxr::Split::train, pre_for(32), 8, true, true, 2);
        cxr::Loader<float> val(s->index, cxr::Split::val, pre_for(32), 8, false, false, 2);
        cxr::TrainHyper hyper;
        hyper.epochs = 2;
        hyper.seed = 2;
        const auto h = cxr::train<float>(m, train, [&](cxr::Model<float>& mm) { return cxr::evaluate(mm, val); },
                                         hyper);
        return std::pair{cxr::history_text(h), m.snapshot()};
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Train, PoisonedWeightsReportEpochAndBatch) {
    auto s = make_synth_split(6, 16, 3);
    cxr::Rng rng(14);
    cxr::Model<float> m(tiny_config(16), rng);
    m.block(0).conv.kernels[0] = std::numeric_limits<float>::quiet_NaN();
    cxr::Loader<float> train(s->index, cxr::Split::train, pre_for(16), 4, false, false, 3);
    try {
        cxr::train<float>(m, train, [](cxr::Model<float>&) { return cxr::EvalReport{}; }, cxr::TrainHyper{});
        FAIL();
    } catch (const cxr::Error& e) {
        EXPECT_EQ(e.kind(), cxr::ErrorKind::numerical);
        EXPECT_NE(std::string(e.what()).find("epoch 1 batch 1"), std::string::npos) << e.what();
    }
}

TEST(Train, BestCheckpointWrittenAndRestored) {
    auto s = make_synth_split(6, 16, 4);
    cxr::Rng rng(15);
    cxr::Model<float> m(tiny_config(16), rng);
    cxr::Loader<float> train(s->index, cxr::Split::train, pre_for(16), 4, true, false, 4);
    const double losses[] = {0.6, 0.4, 0.5};
    int epoch = 0;
    std::vector<std::vector<Tensor<float>>> seen;
    cxr::Validator<float> v = [&](cxr::Model<float>& mm) {
        seen.push_back(mm.snapshot());
        cxr::EvalReport r;
        r.loss = losses[epoch++];
        return r;
    };
    cxr::TrainHyper hyper;
    hyper.epochs = 3;
    cxr::TrainOptions opts;
    opts.checkpoint_path = s->dir / "best.ckpt";
    const auto h = cxr::train(m, train, v, hyper, opts);
    EXPECT_EQ(h.best_epoch, 2);
    EXPECT_EQ(m.snapshot(), seen[1]);
    auto loaded = cxr::load_checkpoint<float>(*opts.checkpoint_path);
    EXPECT_EQ(loaded.snapshot(), seen[1]);
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir d("ckpt");
    cxr::Rng rng(16);
    cxr::Model<float> m(cxr::toy_model_config(32), rng);
    for (auto& [name, t] : m.state_tensors())
        for (auto& v : t->span()) v = static_cast<float>(rng.normal());
    cxr::RunConfig run;
    run.seed = 99;
    run.clahe_clip = 3.5;
    cxr::save_checkpoint(m, d / "m.ckpt", run);
    auto loaded = cxr::load_checkpoint_full<float>(d / "m.ckpt");
    EXPECT_EQ(loaded.model.snapshot(), m.snapshot());
    EXPECT_EQ(loaded.run.seed, 99u);
    EXPECT_EQ(loaded.run.clahe_clip, 3.5);
    EXPECT_EQ(loaded.run.model.block_filters, m.config().block_filters);
}

TEST(Checkpoint, CorruptionIsDetected) {
    cxr::Rng rng(17);
    cxr::Model<float> m(tiny_config(16), rng);
    const auto bytes = cxr::checkpoint_bytes(m);
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
        std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_EQ(kind_of([&] { cxr::parse_checkpoint<float>(truncated); }), cxr::ErrorKind::corruption) << cut;
    }
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_EQ(kind_of([&] { cxr::parse_checkpoint<float>(bad_magic); }), cxr::ErrorKind::corruption);
    auto grown = bytes;
    grown.insert(grown.end() - 8, 0);
    EXPECT_EQ(kind_of([&] { cxr::parse_checkpoint<float>(grown); }), cxr::ErrorKind::corruption);
}

TEST(Checkpoint, ReloadReproducesEvalReport) {
    auto s = make_synth_split(10, 32, 5);
    cxr::Rng rng(18);
    cxr::Model<float> m(cxr::toy_model_config(32), rng);
    cxr::Loader<float> train(s->index, cxr::Split::train, pre_for(32), 8, true, true, 5);
    cxr::AdamState<float> adam;
    cxr::Rng drop(1);
    auto cursor = train.epoch(1);
    while (auto b = cursor.next()) cxr::train_step(m, adam, *b, drop);  // move BN stats off their defaults
    cxr::Loader<float> test(s->index, cxr::Split::test, pre_for(32), 8, false, false, 5);
    const auto before = cxr::evaluate(m, test);
    auto reloaded = cxr::parse_checkpoint<float>(cxr::checkpoint_bytes(m)).model;
    const auto after = cxr::evaluate(reloaded, test);
    EXPECT_EQ(cxr::report_key_values(before), cxr::report_key_values(after));
    EXPECT_EQ(before.loss, after.loss);
    EXPECT_EQ(before.auc, after.auc);
}

// ---------------------------------------------------------------------------
// metrics

TEST(Metrics, ReferenceConfusionCounts) {
    const auto r = cxr::metrics_from_counts(377, 191, 43, 13);
    EXPECT_NEAR(100 * r.accuracy, 91.03, 0.005);
    EXPECT_NEAR(100 * r.precision, 89.76, 0.005);
    EXPECT_NEAR(100 * r.recall, 96.67, 0.005);
    EXPECT_NEAR(100 * r.f1, 93.09, 0.005);
    const auto text = cxr::format_report(r);
    for (const char* s : {"91.03%", "89.76%", "96.67%", "93.09%"}) EXPECT_NE(text.find(s), std::string::npos) << s;
}

TEST(Metrics, AllCorrect) {
    const std::vector<double> scores{0.9, 0.8, 0.1, 0.2};
    const std::vector<int> labels{1, 1, 0, 0};
    const auto r = cxr::evaluate_scores(scores, labels);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_EQ(r.f1, 1.0);
    EXPECT_EQ(r.auc, 1.0);
}

TEST(Metrics, NoPositivePredictions) {
    const auto r = cxr::metrics_from_counts(0, 5, 0, 3);
    EXPECT_EQ(r.precision, 0.0);
    EXPECT_TRUE(r.precision_degenerate);
    EXPECT_EQ(r.recall, 0.0);
    EXPECT_FALSE(r.recall_degenerate);
    EXPECT_TRUE(r.f1_degenerate);
    EXPECT_NE(cxr::format_report(r).find("undefined"), std::string::npos);
}

TEST(Metrics, F1IsHarmonicMean) {
    cxr::Rng rng(19);
    for (int i = 0; i < 50; ++i) {
        const auto tp = static_cast<long>(1 + rng.uniform_index(100)), tn = static_cast<long>(rng.uniform_index(100)),
                   fp = static_cast<long>(rng.uniform_index(100)), fn = static_cast<long>(rng.uniform_index(100));
        const auto r = cxr::metrics_from_counts(tp, tn, fp, fn);
        EXPECT_NEAR(r.f1, 2.0 * tp / (2.0 * tp + fp + fn), 1e-12);
        EXPECT_GE(r.accuracy, 0.0);
        EXPECT_LE(r.accuracy, 1.0);
    }
}

TEST(Auc, TiesAndSeparation) {
    const std::vector<int> labels{1, 0, 1, 0, 0};
    EXPECT_EQ(cxr::roc_auc(std::vector<double>(5, 0.3), labels).auc, 0.5);
    EXPECT_EQ(cxr::roc_auc(std::vector<double>{0.9, 0.1, 0.8, 0.2, 0.3}, labels).auc, 1.0);
}

TEST(Auc, MatchesPairwiseOracle) {
    cxr::Rng rng(20);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(99);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng.uniform_index(20)) / 20.0;  // force ties
            labels[i] = rng.bernoulli(0.5) ? 1 : 0;
        }
        labels[0] = 0;
        labels[1] = 1;
        EXPECT_NEAR(cxr::roc_auc(scores, labels).auc, oracle::pairwise_auc(scores, labels), 1e-9);
    }
}

TEST(Auc, LabelReversalComplements) {
    cxr::Rng rng(21);
    std::vector<double> scores(40);
    std::vector<int> labels(40), flipped(40);
    for (int i = 0; i < 40; ++i) {
        scores[i] = rng.uniform();
        labels[i] = i % 3 == 0;
        flipped[i] = 1 - labels[i];
    }
    EXPECT_NEAR(cxr::roc_auc(scores, labels).auc + cxr::roc_auc(scores, flipped).auc, 1.0, 1e-12);
}

TEST(Auc, CurveEndpointsAndMonotone) {
    const std::vector<double> scores{0.1, 0.4, 0.35, 0.8};
    const std::vector<int> labels{0, 0, 1, 1};
    const auto c = cxr::roc_auc(scores, labels);
    EXPECT_EQ(c.points.front().fpr, 0.0);
    EXPECT_EQ(c.points.back().tpr, 1.0);
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        EXPECT_GE(c.points[i].fpr, c.points[i - 1].fpr);
        EXPECT_GE(c.points[i].tpr, c.points[i - 1].tpr);
    }
    EXPECT_DOUBLE_EQ(c.auc, 0.75);
}

TEST(Auc, SingleClassIsUndefined) {
    const std::vector<double> scores{0.2, 0.7};
    const std::vector<int> labels{1, 1};
    EXPECT_EQ(kind_of([&] { cxr::roc_auc(scores, labels); }), cxr::ErrorKind::undefined_auc);
    const auto r = cxr::evaluate_scores(scores, labels);
    EXPECT_FALSE(r.auc_defined);
    EXPECT_NE(cxr::format_report(r).find("undefined"), std::string::npos);
}

// ---------------------------------------------------------------------------
// configuration

TEST(Config, TextRoundTrip) {
    cxr::RunConfig c;
    c.model = cxr::toy_model_config(48);
    c.model.conv_flavor = cxr::ConvFlavor::separable;
    c.lr = 3e-4;
    c.seed = 123456789012345ULL;
    c.preprocess_order = "resize,clahe";
    cxr::RunConfig back;
    cxr::apply_text(back, cxr::to_text(c));
    EXPECT_EQ(cxr::to_text(back), cxr::to_text(c));
    EXPECT_EQ(back.model.block_filters, (std::vector<int>{8, 16, 32}));
    EXPECT_EQ(back.lr, 3e-4);
}

TEST(Config, RejectsUnknownAndMalformed) {
    cxr::RunConfig c;
    EXPECT_EQ(kind_of([&] { cxr::apply_text(c, "learning_rate=1\n"); }), cxr::ErrorKind::parameter);
    EXPECT_EQ(kind_of([&] { cxr::apply_text(c, "lr=fast\n"); }), cxr::ErrorKind::parameter);
    EXPECT_EQ(kind_of([&] { cxr::apply_text(c, "just words\n"); }), cxr::ErrorKind::parameter);
    EXPECT_NO_THROW(cxr::apply_text(c, "# comment\n\nlr = 0.001\n"));
    EXPECT_EQ(c.lr, 0.001);
}

TEST(Config, ValidateRanges) {
    cxr::RunConfig c;
    EXPECT_NO_THROW(cxr::validate(c));
    c.rotation_range = 30;
    EXPECT_THROW(cxr::validate(c), cxr::Error);
    c = {};
    c.split_val = 0.3;
    EXPECT_THROW(cxr::validate(c), cxr::Error);
}
