#include <random>

#include <gtest/gtest.h>

#include "matrrec/checkpoint.hpp"
#include "matrrec/model.hpp"
#include "matrrec/train.hpp"
#include "support/model_checks.hpp"

namespace {

using matrrec::AblationFlags;
using matrrec::ForwardContext;
using matrrec::MaTrRecConfig;
using matrrec::build_model;
using matrrec::param_count;
namespace mt = matrrec::testing;

MaTrRecConfig small_config(std::size_t vocab = 10) {
    MaTrRecConfig c;
    c.d_model = 16;
    c.d_state = 8;
    c.max_len = 12;
    c.vocab_size = vocab;
    c.seed = 7;
    return c;
}

template <typename T>
std::vector<T> flat_params(const matrrec::MaTrRecModel<T>& m) {
    std::vector<T> out;
    for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

TEST(Config, ValidationListsEveryProblem) {
    MaTrRecConfig c;
    c.vocab_size = 0;
    c.n_heads = 3;
    c.dropout = 1.0;
    try {
        c.validate();
        FAIL();
    } catch (const matrrec::ConfigError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("vocab_size"), std::string::npos);
        EXPECT_NE(msg.find("n_heads"), std::string::npos);
        EXPECT_NE(msg.find("dropout"), std::string::npos);
    }
}

TEST(Config, CanonicalTextRoundTrips) {
    auto c = small_config();
    c.dropout = 0.123456789;
    c.ablation.remove_ffn = true;
    c.tie_weights = true;
    auto back = MaTrRecConfig::from_canonical_text(c.canonical_text());
    EXPECT_EQ(back, c);
    EXPECT_EQ(back.hash(), c.hash());
}

TEST(Ablation, ApplyRules) {
    auto c = small_config();
    EXPECT_EQ(matrrec::apply_ablation(c, {}), c);
    AblationFlags f;
    f.remove_dropout = true;
    EXPECT_EQ(matrrec::apply_ablation(c, f).dropout, 0.0);
    f = {};
    f.mamba_only = f.attention_only = true;
    EXPECT_THROW(matrrec::apply_ablation(c, f), matrrec::ConfigError);
}

TEST(ParamCount, MatchesClosedFormForEveryVariant) {
    auto base = small_config();
    for (const auto& [name, cfg] : mt::ablation_variants(base))
        EXPECT_EQ(param_count(build_model<float>(cfg)), mt::expected_param_count(cfg)) << name;
    auto tied = base;
    tied.tie_weights = true;
    EXPECT_EQ(param_count(build_model<float>(tied)), mt::expected_param_count(tied));
    for (AblationFlags f : {AblationFlags{.mamba_only = true}, AblationFlags{.attention_only = true}}) {
        auto cfg = matrrec::apply_ablation(base, f);
        EXPECT_EQ(param_count(build_model<float>(cfg)), mt::expected_param_count(cfg));
    }
}

TEST(ParamCount, AblationDeltas) {
    auto base = small_config();
    const std::size_t d = base.d_model;
    for (std::size_t layers : {1, 2}) {
        base.n_layers = layers;
        const auto full = param_count(build_model<float>(base));
        auto no_ffn = matrrec::apply_ablation(base, {.remove_ffn = true});
        EXPECT_EQ(full - param_count(build_model<float>(no_ffn)), layers * (4 * d * d + 4 * d + 4 * d * d + d));
        auto pe = matrrec::apply_ablation(base, {.add_positional_encoding = true});
        EXPECT_EQ(param_count(build_model<float>(pe)) - full, base.max_len * d);
    }
    base.n_layers = 1;
    const auto one = param_count(build_model<float>(base));
    base.n_layers = 2;
    EXPECT_GT(param_count(build_model<float>(base)), one);
}

TEST(ParamCount, EmbeddingContributionExcludesPadding) {
    auto a = small_config(10), b = small_config(11);
    a.tie_weights = b.tie_weights = true;
    // one more item adds a row of D plus one output bias
    EXPECT_EQ(param_count(build_model<float>(b)) - param_count(build_model<float>(a)), a.d_model + 1);
}

TEST(Build, SameSeedIsBitIdentical) {
    auto c = small_config();
    EXPECT_EQ(flat_params(build_model<float>(c)), flat_params(build_model<float>(c)));
    c.seed = 8;
    EXPECT_NE(flat_params(build_model<float>(c)), flat_params(build_model<float>(small_config())));
}

TEST(Forward, LogitShapes) {
    auto c = small_config(10);
    auto m = build_model<float>(c);
    std::mt19937_64 rng(1);
    auto b = mt::random_batch(2, 5, 10, rng);
    ForwardContext ctx{};
    EXPECT_EQ(m.forward(b.ids, 2, 5, b.lengths, ctx).shape(), (matrrec::Shape{2, 5, 10}));
    EXPECT_EQ(m.forward_last(b.ids, 2, 5, b.lengths, ctx).shape(), (matrrec::Shape{2, 10}));
    std::vector<std::int32_t> long_ids(13, 1);
    std::vector<std::size_t> len{13};
    EXPECT_THROW(m.forward(long_ids, 1, 13, len, ctx), matrrec::DimensionError);
}

TEST(Forward, LastPositionMatchesFullForward) {
    auto c = small_config(10);
    auto m = build_model<double>(c);
    std::mt19937_64 rng(2);
    auto b = mt::random_batch(3, 6, 10, rng);
    ForwardContext ctx{};
    auto full = m.forward(b.ids, 3, 6, b.lengths, ctx);
    auto last = m.forward_last(b.ids, 3, 6, b.lengths, ctx);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t v = 0; v < 10; ++v)
            EXPECT_EQ(last[r * 10 + v], full[(r * 6 + b.lengths[r] - 1) * 10 + v]);
}

TEST(Forward, PaddingDoesNotLeakIntoRealPositions) {
    auto m = build_model<double>(small_config(10));
    ForwardContext ctx{};
    const std::vector<std::int32_t> short_row{3, 5, 2};
    const std::vector<std::int32_t> padded{3, 5, 2, 0, 0};
    const std::vector<std::size_t> l3{3}, l5{3};
    auto a = m.forward(short_row, 1, 3, l3, ctx);
    auto b = m.forward(padded, 1, 5, l5, ctx);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Forward, CausalForDefaultAndEveryAblation) {
    auto base = small_config(20);
    for (const auto& [name, cfg] : mt::ablation_variants(base))
        for (std::uint64_t seed = 0; seed < 5; ++seed) EXPECT_TRUE(mt::causal_case<double>(cfg, seed)) << name;
}

TEST(Forward, EveryAblationChangesOutput) {
    auto base = small_config(10);
    std::mt19937_64 rng(3);
    auto b = mt::random_batch(2, 6, 10, rng);
    auto run = [&](const MaTrRecConfig& c) {
        auto m = build_model<double>(c);
        std::mt19937_64 drop(11);
        ForwardContext ctx{true, &drop};
        auto y = m.forward(b.ids, 2, 6, b.lengths, ctx);
        return std::vector<double>(y.values().begin(), y.values().end());
    };
    const auto reference = run(base);
    for (const auto& [name, cfg] : mt::ablation_variants(base)) {
        if (name == "default") continue;
        EXPECT_NE(run(cfg), reference) << name;
    }
}

TEST(Forward, PositionTableMattersWithoutMamba) {
    auto c = matrrec::apply_ablation(small_config(10), {.attention_only = true});
    auto pe = matrrec::apply_ablation(c, {.add_positional_encoding = true});
    auto m = build_model<double>(c);
    auto mp = build_model<double>(pe);
    // share every common weight so only the position table differs
    auto src = m.parameters();
    auto dst = mp.parameters();
    for (auto& d : dst)
        for (const auto& s : src)
            if (s.name == d.name) {
                auto t = d.tensor;
                std::copy(s.tensor.values().begin(), s.tensor.values().end(), t.mutable_values().begin());
            }
    const std::vector<std::int32_t> ids{4, 1, 7, 7, 2};
    const std::vector<std::size_t> len{5};
    ForwardContext ctx{};
    auto a = m.forward(ids, 1, 5, len, ctx);
    auto b = mp.forward(ids, 1, 5, len, ctx);
    EXPECT_NE(std::vector<double>(a.values().begin(), a.values().end()),
              std::vector<double>(b.values().begin(), b.values().end()));
}

TEST(Gradient, EndToEndMatchesFiniteDifferences) { EXPECT_LT(mt::model_gradient_error(0), 1e-4); }

TEST(Gradient, EveryParameterReceivesGradient) {
    auto base = small_config(10);
    std::mt19937_64 rng(4);
    auto b = mt::random_batch(2, 6, 10, rng);
    for (const auto& [name, cfg] : mt::ablation_variants(base)) {
        auto m = build_model<float>(cfg);
        std::mt19937_64 drop(1);
        ForwardContext ctx{true, &drop};
        auto logits = m.forward(b.ids, 2, 6, b.lengths, ctx);
        matrrec::backward(matrrec::train::cross_entropy_loss(logits, std::span<const std::int32_t>(b.targets)));
        for (const auto& p : m.parameters()) EXPECT_TRUE(p.tensor.has_grad()) << name << " " << p.name;
    }
}

// 32 fixed sequences with distinct first items, so every prefix identifies its sequence.
TEST(Learning, OverfitsThirtyTwoSequences) {
    MaTrRecConfig c;
    c.d_model = 32;
    c.d_state = 16;
    c.dropout = 0.0;
    c.max_len = 8;
    c.vocab_size = 40;
    c.seed = 5;
    auto m = build_model<float>(c);
    std::mt19937_64 rng(99);
    std::vector<std::int32_t> firsts(c.vocab_size);
    std::iota(firsts.begin(), firsts.end(), 1);
    std::shuffle(firsts.begin(), firsts.end(), rng);
    std::uniform_int_distribution<std::int32_t> item(1, static_cast<std::int32_t>(c.vocab_size));
    std::vector<std::int32_t> ids(32 * 8), targets(32 * 8, 0);
    for (std::size_t r = 0; r < 32; ++r) {
        ids[r * 8] = firsts[r];
        for (std::size_t t = 1; t < 8; ++t) ids[r * 8 + t] = item(rng);
        for (std::size_t t = 0; t < 7; ++t) targets[r * 8 + t] = ids[r * 8 + t + 1];
    }
    const std::vector<std::size_t> lengths(32, 8);
    matrrec::train::TrainConfig tc;
    tc.lr = 1e-2;
    matrrec::train::AdamState<float> state;
    const auto params = m.parameters();
    ForwardContext ctx{};
    double first = 0, last = 0;
    for (int step = 0; step < 200; ++step) {
        m.zero_grad();
        auto loss = matrrec::train::cross_entropy_loss(m.forward(ids, 32, 8, lengths, ctx),
                                                       std::span<const std::int32_t>(targets));
        last = loss.item();
        if (step == 0) first = last;
        matrrec::backward(loss);
        matrrec::train::adam_step(params, state, tc);
    }
    EXPECT_GT(first, 3.0);
    EXPECT_LT(last, 0.1);
}

TEST(Checkpoint, BitExactRoundTrip) {
    auto c = small_config(10);
    c.ablation.add_positional_encoding = true;
    auto m = build_model<float>(c);
    auto bytes = matrrec::serialize_checkpoint(m, {{"dataset", "toy"}});
    auto loaded = matrrec::deserialize_checkpoint<float>(bytes);
    EXPECT_EQ(loaded.model.config, c);
    EXPECT_EQ(loaded.meta.at("dataset"), "toy");
    EXPECT_EQ(flat_params(loaded.model), flat_params(m));
    EXPECT_EQ(matrrec::serialize_checkpoint(loaded.model, {{"dataset", "toy"}}), bytes);
    std::mt19937_64 rng(5);
    auto b = mt::random_batch(2, 6, 10, rng);
    ForwardContext ctx{};
    auto y1 = m.forward(b.ids, 2, 6, b.lengths, ctx);
    auto y2 = loaded.model.forward(b.ids, 2, 6, b.lengths, ctx);
    for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(Checkpoint, CorruptInputIsArtifactError) {
    auto bytes = matrrec::serialize_checkpoint(build_model<float>(small_config(10)));
    EXPECT_THROW(matrrec::deserialize_checkpoint<float>(bytes.substr(0, bytes.size() / 2)), matrrec::ArtifactError);
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(matrrec::deserialize_checkpoint<float>(bad), matrrec::ArtifactError);
}

}  // namespace
