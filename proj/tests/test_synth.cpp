#include <gtest/gtest.h>

#include "matrrec/synth.hpp"

namespace {

namespace synth = matrrec::synth;
using synth::HorizonSpec;
using synth::Variant;

HorizonSpec spec(std::size_t d, double noise = 0.0) {
    HorizonSpec s;
    s.copy_distance = d;
    s.seq_len = 16;
    s.n_items = 12;
    s.n_train_users = 40;
    s.n_eval_users = 20;
    s.noise = noise;
    return s;
}

/// Reassembles each evaluation user's full sequence from its test example.
std::vector<std::vector<std::int32_t>> eval_sequences(const matrrec::data::Split& split) {
    std::vector<std::vector<std::int32_t>> out;
    for (const auto& ex : split.test) {
        auto s = ex.prefix;
        s.push_back(ex.target);
        out.push_back(std::move(s));
    }
    return out;
}

TEST(Horizon, NoiselessSequencesRepeatAtTheCopyDistance) {
    for (std::size_t d : {1, 3, 7}) {
        const auto s = spec(d);
        const auto split = synth::generate_horizon(s, d);
        EXPECT_EQ(split.test.size(), s.n_eval_users);
        EXPECT_EQ(split.valid.size(), s.n_eval_users);
        EXPECT_EQ(split.train.size(), s.n_train_users + s.n_eval_users);
        for (std::size_t u = 0; u < s.n_train_users; ++u) EXPECT_EQ(split.train[u].items.size(), s.seq_len);
        for (const auto& seq : eval_sequences(split)) {
            ASSERT_EQ(seq.size(), s.seq_len);
            for (std::size_t t = d; t < seq.size(); ++t) EXPECT_EQ(seq[t], seq[t - d]);
            for (auto v : seq) {
                EXPECT_GE(v, 1);
                EXPECT_LE(v, static_cast<std::int32_t>(s.n_items));
            }
        }
    }
}

TEST(Horizon, NoiseBreaksCopies) {
    auto s = spec(2, 1.0);
    s.n_eval_users = 200;
    std::size_t copies = 0, total = 0;
    for (const auto& seq : eval_sequences(synth::generate_horizon(s, 1)))
        for (std::size_t t = 2; t < seq.size(); ++t, ++total) copies += seq[t] == seq[t - 2];
    // fully noisy positions copy only by chance, about 1 in n_items
    EXPECT_LT(static_cast<double>(copies) / static_cast<double>(total), 2.0 / static_cast<double>(s.n_items));
}

TEST(Horizon, SeededAndValidated) {
    const auto a = synth::generate_horizon(spec(3), 5), b = synth::generate_horizon(spec(3), 5);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    EXPECT_NE(synth::generate_horizon(spec(3), 6).train, a.train);
    EXPECT_THROW(synth::generate_horizon(spec(0), 1), matrrec::ConfigError);
    EXPECT_THROW(synth::generate_horizon(spec(16), 1), matrrec::ConfigError);
    EXPECT_THROW(synth::generate_horizon(spec(2, 1.5), 1), matrrec::ConfigError);
    EXPECT_EQ(spec(20).name(), "copy20");
}

TEST(Horizon, VariantsSetExactlyOneSwitch) {
    matrrec::MaTrRecConfig base;
    EXPECT_EQ(synth::variant_config(base, Variant::hybrid).ablation, matrrec::AblationFlags{});
    EXPECT_TRUE(synth::variant_config(base, Variant::mamba_only).ablation.mamba_only);
    EXPECT_FALSE(synth::variant_config(base, Variant::mamba_only).ablation.attention_only);
    EXPECT_TRUE(synth::variant_config(base, Variant::attention_only).ablation.attention_only);
}

TEST(Horizon, WarningOnlyWhenHybridTrailsTheBetterComponent) {
    synth::SuiteOptions opts;
    opts.specs = {spec(1), spec(4)};
    synth::HorizonReport rep;
    auto add = [&](const char* s, const char* v, double r10) {
        synth::HorizonRow row;
        row.spec = s;
        row.variant = v;
        row.recall10 = r10;
        rep.rows.push_back(row);
    };
    add("copy1", "hybrid", 0.50);
    add("copy1", "mamba_only", 0.51);  // within tolerance
    add("copy1", "attention_only", 0.20);
    add("copy4", "hybrid", 0.30);
    add("copy4", "mamba_only", 0.10);
    add("copy4", "attention_only", 0.40);
    const auto w = synth::horizon_warnings(rep, opts);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_EQ(w[0].rfind("copy4:", 0), 0u);
}

matrrec::MaTrRecConfig small_model() {
    matrrec::MaTrRecConfig c;
    c.d_model = 16;
    c.d_state = 8;
    c.dropout = 0.0;
    c.max_len = 16;
    return c;
}

matrrec::train::TrainConfig small_training(std::size_t epochs) {
    matrrec::train::TrainConfig tc;
    tc.lr = 1e-2;
    tc.batch_size = 16;
    tc.max_epochs = epochs;
    tc.patience = epochs;
    tc.exclude_seen = false;
    return tc;
}

TEST(HorizonSuite, ShortRangeCopyIsLearnedByEveryVariant) {
    synth::SuiteOptions opts;
    opts.specs = {spec(1)};
    opts.seeds = {1};
    const auto rep = synth::run_horizon_suite(opts, small_model(), small_training(15));
    ASSERT_EQ(rep.rows.size(), 3u);
    for (const auto& r : rep.rows) EXPECT_GE(r.recall1, 0.95) << r.variant;
}

TEST(HorizonSuite, TableIsDeterministicAndOrdered) {
    synth::SuiteOptions opts;
    opts.specs = {spec(1), spec(3)};
    opts.seeds = {1, 2};
    std::size_t streamed = 0;
    const auto a = synth::run_horizon_suite(opts, small_model(), small_training(1),
                                            [&](const synth::HorizonRow&) { ++streamed; });
    const auto b = synth::run_horizon_suite(opts, small_model(), small_training(1));
    EXPECT_EQ(streamed, 12u);
    EXPECT_EQ(a.to_csv(false), b.to_csv(false));
    EXPECT_EQ(a.warnings, b.warnings);
    EXPECT_EQ(a.rows[0].spec, "copy1");
    EXPECT_EQ(a.rows[0].variant, "hybrid");
    EXPECT_EQ(a.rows[1].seed, 2u);
    EXPECT_EQ(a.rows[2].variant, "mamba_only");
    EXPECT_EQ(a.rows.back().spec, "copy3");
    const auto csv = a.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), synth::HorizonReport::csv_header());
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
}

}  // namespace
