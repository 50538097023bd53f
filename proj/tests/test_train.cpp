#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "matrrec/checkpoint.hpp"
#include "matrrec/train.hpp"
#include "support/corpora.hpp"
#include "support/model_checks.hpp"

namespace {

namespace train = matrrec::train;
namespace mt = matrrec::testing;
using matrrec::ForwardContext;
using matrrec::Tensor;
using Td = Tensor<double>;

double ce(const Td& logits, std::vector<std::int32_t> targets) {
    return train::cross_entropy_loss(logits, std::span<const std::int32_t>(targets)).item();
}

TEST(CrossEntropy, UniformLogits) { EXPECT_NEAR(ce(Td::zeros({1, 1, 10}), {4}), std::log(10.0), 1e-12); }

TEST(CrossEntropy, Saturation) {
    std::vector<double> v(10, 0.0);
    v[2] = 30.0;
    EXPECT_LT(ce(Td({1, 10}, v), {3}), 1e-9);
}

TEST(CrossEntropy, MeanOverValidPositionsOnly) {
    std::vector<double> v(30, 0.0);
    v[10 + 6] = 60.0;  // second row: target 7 dominant
    // third row ignored
    const double loss = ce(Td({1, 3, 10}, v), {1, 7, 0});
    EXPECT_NEAR(loss, (std::log(10.0) + 0.0) / 2.0, 1e-12);
    EXPECT_NEAR(loss, 1.1513, 5e-5);
    EXPECT_THROW(ce(Td::zeros({2, 10}), {0, 0}), matrrec::ContractError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
    auto logits = Td({1, 3}, {0.5, -1.0, 2.0}, true);
    auto loss = train::cross_entropy_loss(logits, std::span<const std::int32_t>(std::vector<std::int32_t>{2}));
    matrrec::backward(loss);
    const double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
    EXPECT_NEAR(logits.grad()[0], std::exp(0.5) / z, 1e-12);
    EXPECT_NEAR(logits.grad()[1], std::exp(-1.0) / z - 1.0, 1e-12);
    EXPECT_NEAR(logits.grad()[2], std::exp(2.0) / z, 1e-12);
}

std::vector<matrrec::NamedTensor<double>> one_param(Td t) { return {{"w", t}}; }

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    auto w = Td({3}, {1, -2, 3}, true);
    w.mutable_grad();  // zero-filled buffer
    train::AdamState<double> st;
    train::adam_step(one_param(w), st, {});
    EXPECT_EQ(std::vector<double>(w.values().begin(), w.values().end()), (std::vector<double>{1, -2, 3}));
    EXPECT_EQ(st.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
    auto w = Td({3}, {0, 0, 0}, true);
    auto g = w.mutable_grad();
    g[0] = 0.3;
    g[1] = -5.0;
    g[2] = 1e-3;
    train::TrainConfig cfg;
    cfg.lr = 0.01;
    train::AdamState<double> st;
    train::adam_step(one_param(w), st, cfg);
    EXPECT_NEAR(w[0], -0.01, 1e-9);
    EXPECT_NEAR(w[1], 0.01, 1e-9);
    EXPECT_NEAR(w[2], -0.01, 1e-6);
}

TEST(Adam, MatchesHandRolledRecurrence) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    auto w = Td({4}, {0.1, 0.2, 0.3, 0.4}, true);
    std::vector<double> ref(w.values().begin(), w.values().end()), m(4, 0), v(4, 0);
    train::TrainConfig cfg;
    cfg.lr = 0.05;
    train::AdamState<double> st;
    for (int step = 1; step <= 5; ++step) {
        auto g = w.mutable_grad();
        for (std::size_t i = 0; i < 4; ++i) {
            g[i] = n(rng);
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.9, step));
            const double vh = v[i] / (1 - std::pow(0.999, step));
            ref[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
        }
        train::adam_step(one_param(w), st, cfg);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], ref[i], 1e-12);
    }
}

TEST(TrainConfig, Validation) {
    train::TrainConfig c;
    c.lr = 0;
    EXPECT_THROW(c.validate(), matrrec::ConfigError);
    c = {};
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), matrrec::ConfigError);
}

TEST(TrainBatch, InitialLossNearLogVocab) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto sc = mt::cyclic_split(200, 64, 12, seed, 0.5);
        matrrec::MaTrRecConfig c;
        c.vocab_size = sc.corpus.n_items();
        c.seed = seed;
        auto model = matrrec::build_model<float>(c);
        auto batch = matrrec::data::make_batches(sc.split.train, c.max_len, 64).front();
        std::mt19937_64 rng(seed);
        const double loss = train::train_batch(model, batch, rng);
        EXPECT_NEAR(loss, std::log(double(c.vocab_size)), 0.05 * std::log(double(c.vocab_size)));
    }
}

TEST(TrainBatch, SmallStepDecreasesLossOnFrozenBatch) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto sc = mt::cyclic_split(30, 16, 10, seed, 0.3);
        auto cfg = mt::tiny_config(sc.corpus.n_items(), 10, seed);
        auto model = matrrec::build_model<double>(cfg);
        auto batch = matrrec::data::make_batches(sc.split.train, cfg.max_len, 16).front();
        ForwardContext ctx{};
        auto loss_now = [&] {
            auto logits = model.forward(batch.items, batch.rows, batch.cols, batch.lengths, ctx);
            return train::cross_entropy_loss(logits, std::span<const std::int32_t>(batch.targets));
        };
        auto before = loss_now();
        model.zero_grad();
        matrrec::backward(before);
        train::TrainConfig tc;
        tc.lr = 1e-4;
        train::AdamState<double> st;
        train::adam_step(model.parameters(), st, tc);
        EXPECT_LT(loss_now().item(), before.item()) << seed;
    }
}

TEST(TrainBatch, NonFiniteLossIsDivergence) {
    auto sc = mt::cyclic_split(10, 4, 8, 1);
    auto model = matrrec::build_model<float>(mt::tiny_config(10));
    auto w = *model.W_h;
    w.mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
    auto batch = matrrec::data::make_batches(sc.split.train, 20, 4).front();
    std::mt19937_64 rng(1);
    EXPECT_THROW(train::train_batch(model, batch, rng), train::DivergenceError);
}

TEST(Fit, ZeroEpochsLeavesModelAtInitialization) {
    auto sc = mt::cyclic_split(10, 8, 8, 1);
    auto model = matrrec::build_model<float>(mt::tiny_config(10));
    const auto init = model.snapshot();
    train::TrainConfig tc;
    tc.max_epochs = 0;
    auto report = train::fit(model, sc.split, tc);
    EXPECT_TRUE(report.epochs.empty());
    EXPECT_EQ(report.best_epoch, 0u);
    EXPECT_EQ(report.stopping_reason, "max_epochs");
    EXPECT_EQ(model.snapshot(), init);
}

TEST(Fit, ConstantMetricStopsAfterPatience) {
    auto sc = mt::cyclic_split(10, 8, 8, 2);
    auto model = matrrec::build_model<float>(mt::tiny_config(10));
    train::TrainConfig tc;
    tc.lr = 1e-30;  // updates vanish in 32-bit, so validation metrics never move
    tc.patience = 3;
    tc.batch_size = 8;
    auto report = train::fit(model, sc.split, tc);
    EXPECT_EQ(report.stopping_reason, "patience");
    EXPECT_EQ(report.best_epoch, 1u);
    EXPECT_EQ(report.epochs.size(), 1u + 3u);
}

TEST(Fit, DeterministicAndRestoresBestEpoch) {
    auto sc = mt::cyclic_split(15, 24, 12, 3, 0.1);
    auto cfg = mt::tiny_config(sc.corpus.n_items(), 20, 4);
    cfg.dropout = 0.2;
    train::TrainConfig tc;
    tc.lr = 5e-3;
    tc.batch_size = 8;
    tc.max_epochs = 6;
    tc.patience = 2;
    auto m1 = matrrec::build_model<float>(cfg);
    auto m2 = matrrec::build_model<float>(cfg);
    auto r1 = train::fit(m1, sc.split, tc);
    auto r2 = train::fit(m2, sc.split, tc);
    EXPECT_EQ(r1.to_json(false), r2.to_json(false));
    EXPECT_EQ(matrrec::serialize_checkpoint(m1), matrrec::serialize_checkpoint(m2));

    double best = -1;
    for (const auto& e : r1.epochs) best = std::max(best, e.valid_ndcg10);
    EXPECT_EQ(r1.best_ndcg10, best);
    EXPECT_EQ(r1.epochs[r1.best_epoch - 1].valid_ndcg10, best);
    EXPECT_GT(r1.peak_graph_bytes, 0u);

    // restored weights reproduce the best validation score, also through a checkpoint
    auto loaded = matrrec::deserialize_checkpoint<float>(matrrec::serialize_checkpoint(m1)).model;
    auto ranks = matrrec::eval::full_rank(loaded, sc.split.valid);
    EXPECT_EQ(matrrec::eval::ndcg_at_k(ranks, 10), r1.best_ndcg10);
}

TEST(Fit, EmptySplitIsContractError) {
    auto model = matrrec::build_model<float>(mt::tiny_config(10));
    EXPECT_THROW(train::fit(model, matrrec::data::Split{}, {}), matrrec::ContractError);
}

}  // namespace
