#ifndef MATRREC_SYNTH_HPP
#define MATRREC_SYNTH_HPP

#include <map>
#include <sstream>

#include "matrrec/eval.hpp"
#include "matrrec/train.hpp"

namespace matrrec::synth {

/// Copy task: after a random opening block, each item repeats the one
/// emitted `copy_distance` steps earlier.
struct HorizonSpec {
    std::size_t copy_distance = 1;
    std::size_t seq_len = 30;
    std::size_t n_items = 30;
    std::size_t n_train_users = 128;
    std::size_t n_eval_users = 64;
    double noise = 0.0;

    void validate() const {
        if (copy_distance == 0 || copy_distance >= seq_len)
            throw ConfigError("horizon: copy_distance must lie in [1, seq_len)");
        if (n_items < 2) throw ConfigError("horizon: n_items must be at least 2");
        if (n_eval_users == 0) throw ConfigError("horizon: n_eval_users must be positive");
        if (!(noise >= 0 && noise <= 1)) throw ConfigError("horizon: noise must lie in [0, 1]");
    }

    std::string name() const { return "copy" + std::to_string(copy_distance); }
};

/// Training users contribute whole sequences to training; evaluation users
/// are split leave-one-out. Items are 1-based indices directly.
inline data::Split generate_horizon(const HorizonSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int32_t> any_item(1, static_cast<std::int32_t>(spec.n_items));
    std::bernoulli_distribution flip(spec.noise);
    auto sequence = [&] {
        std::vector<std::int32_t> s;
        for (std::size_t t = 0; t < spec.seq_len; ++t) {
            std::int32_t item = t < spec.copy_distance ? any_item(rng) : s[t - spec.copy_distance];
            if (t >= spec.copy_distance && spec.noise > 0 && flip(rng)) item = any_item(rng);
            s.push_back(item);
        }
        return s;
    };
    std::vector<data::UserSequence> eval_users;
    data::Split split;
    for (std::size_t u = 0; u < spec.n_train_users; ++u) split.train.push_back({u, sequence()});
    for (std::size_t u = 0; u < spec.n_eval_users; ++u) eval_users.push_back({spec.n_train_users + u, sequence()});
    auto held = data::leave_one_out_split(eval_users);
    split.train.insert(split.train.end(), held.train.begin(), held.train.end());
    split.valid = std::move(held.valid);
    split.test = std::move(held.test);
    return split;
}

enum class Variant { hybrid, mamba_only, attention_only };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::hybrid: return "hybrid";
        case Variant::mamba_only: return "mamba_only";
        case Variant::attention_only: return "attention_only";
    }
    return "?";
}

inline MaTrRecConfig variant_config(MaTrRecConfig base, Variant v) {
    base.ablation.mamba_only = v == Variant::mamba_only;
    base.ablation.attention_only = v == Variant::attention_only;
    return base;
}

struct HorizonRow {
    std::string spec;
    std::size_t copy_distance = 0;
    std::string variant;
    std::uint64_t seed = 0;
    double recall1 = 0, recall10 = 0, ndcg10 = 0;
    std::size_t epochs = 0;
    double seconds = 0;
};

struct HorizonReport {
    std::vector<HorizonRow> rows;
    std::vector<std::string> warnings;  // soft expectations that did not hold

    static std::string csv_header() {
        return "spec,copy_distance,variant,seed,recall@1,recall@10,ndcg@10,epochs,seconds";
    }

    /// `with_timing` false writes 0 for seconds so reruns compare byte for byte.
    std::string to_csv(bool with_timing = true) const {
        std::ostringstream os;
        os << csv_header() << '\n';
        os.setf(std::ios::fixed);
        for (const auto& r : rows) {
            os.precision(6);
            os << r.spec << ',' << r.copy_distance << ',' << r.variant << ',' << r.seed << ',' << r.recall1 << ','
               << r.recall10 << ',' << r.ndcg10 << ',' << r.epochs << ',';
            os.precision(3);
            os << (with_timing ? r.seconds : 0.0) << '\n';
        }
        return os.str();
    }

    /// Mean recall@10 per (spec, variant).
    std::map<std::pair<std::string, std::string>, double> mean_recall10() const {
        std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> acc;
        for (const auto& r : rows) {
            auto& [s, n] = acc[{r.spec, r.variant}];
            s += r.recall10;
            ++n;
        }
        std::map<std::pair<std::string, std::string>, double> out;
        for (const auto& [key, sn] : acc) out[key] = sn.first / static_cast<double>(sn.second);
        return out;
    }
};

struct SuiteOptions {
    std::vector<HorizonSpec> specs;
    std::vector<Variant> variants{Variant::hybrid, Variant::mamba_only, Variant::attention_only};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    double tolerance = 0.02;  // hybrid may trail the best single component by this much
};

/// One message per spec where the hybrid's mean recall@10 trails the better
/// single-component variant by more than the tolerance.
inline std::vector<std::string> horizon_warnings(const HorizonReport& report, const SuiteOptions& opts) {
    std::vector<std::string> out;
    const auto means = report.mean_recall10();
    for (const auto& spec : opts.specs) {
        const auto name = spec.name();
        auto get = [&](Variant v) {
            auto it = means.find({name, variant_name(v)});
            return it == means.end() ? -1.0 : it->second;
        };
        const double hybrid = get(Variant::hybrid);
        const double best_single = std::max(get(Variant::mamba_only), get(Variant::attention_only));
        if (hybrid < 0 || best_single < 0) continue;
        if (hybrid < best_single - opts.tolerance) {
            std::ostringstream os;
            os.precision(4);
            os << name << ": hybrid recall@10 " << hybrid << " trails best single component " << best_single
               << " by more than " << opts.tolerance;
            out.push_back(os.str());
        }
    }
    return out;
}

using RowCallback = std::function<void(const HorizonRow&)>;

/// Trains every (spec, variant, seed) cell with a shared budget. Rows come out
/// in that nesting order, and the table is produced whether or not the soft
/// expectation holds.
inline HorizonReport run_horizon_suite(const SuiteOptions& opts, const MaTrRecConfig& base,
                                       const train::TrainConfig& tc, const RowCallback& on_row = {}) {
    HorizonReport report;
    for (const auto& spec : opts.specs) {
        for (auto v : opts.variants) {
            for (auto seed : opts.seeds) {
                auto split = generate_horizon(spec, seed);
                auto cfg = variant_config(base, v);
                cfg.vocab_size = spec.n_items;
                cfg.max_len = std::max(cfg.max_len, spec.seq_len);
                cfg.seed = seed;
                auto model = build_model<float>(cfg);
                auto tcs = tc;
                tcs.seed = seed;
                auto tr = train::fit(model, split, tcs);
                const eval::RankOptions ro{tc.eval_batch_size, tc.exclude_seen};
                auto m = eval::evaluate(model, split.test, {1}, ro);
                HorizonRow row;
                row.spec = spec.name();
                row.copy_distance = spec.copy_distance;
                row.variant = variant_name(v);
                row.seed = seed;
                row.recall1 = m.recall_at(1);
                row.recall10 = m.recall_at(10);
                row.ndcg10 = m.ndcg_at(10);
                row.epochs = tr.epochs.size();
                row.seconds = tr.seconds + m.seconds;
                if (on_row) on_row(row);
                report.rows.push_back(std::move(row));
            }
        }
    }
    report.warnings = horizon_warnings(report, opts);
    return report;
}

}  // namespace matrrec::synth

#endif  // MATRREC_SYNTH_HPP
