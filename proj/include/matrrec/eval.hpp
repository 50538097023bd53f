#ifndef MATRREC_EVAL_HPP
#define MATRREC_EVAL_HPP

#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "matrrec/data.hpp"
#include "matrrec/model.hpp"

namespace matrrec::eval {

/// 1-based rank of each example's target among its eligible items.
struct RankingResult {
    std::vector<std::size_t> ranks;
    std::vector<std::size_t> eligible;
};

/// scores[c] scores item c+1. Rank = 1 + number of eligible items scored
/// strictly higher, plus equal-scored eligible items with a smaller index.
/// `excluded` (size |V|+1, may be empty) removes items; the target always stays eligible.
template <typename T>
std::size_t rank_of_target(std::span<const T> scores, std::int32_t target, std::span<const std::uint8_t> excluded,
                           std::size_t* eligible_out = nullptr) {
    if (target < 1 || static_cast<std::size_t>(target) > scores.size()) {
        throw ContractError("rank_of_target: target " + std::to_string(target) + " outside catalog");
    }
    const T ts = scores[static_cast<std::size_t>(target - 1)];
    std::size_t rank = 1, eligible = 0;
    for (std::size_t c = 0; c < scores.size(); ++c) {
        const auto item = static_cast<std::int32_t>(c + 1);
        if (item != target && !excluded.empty() && excluded[c + 1]) continue;
        ++eligible;
        if (item == target) continue;
        if (scores[c] > ts || (scores[c] == ts && item < target)) ++rank;
    }
    if (eligible_out) *eligible_out = eligible;
    return rank;
}

struct RankOptions {
    std::size_t batch_size = 4096;
    bool exclude_seen = true;
};

/// Scores the whole catalog from each prefix's last real position and ranks the target.
template <typename T>
RankingResult full_rank(const MaTrRecModel<T>& model, const std::vector<data::EvalExample>& examples,
                        const RankOptions& opts = {}) {
    NoGradGuard no_grad;
    const std::size_t v = model.config.vocab_size;
    RankingResult out;
    out.ranks.resize(examples.size());
    out.eligible.resize(examples.size());
    std::vector<std::uint8_t> excluded(v + 1, 0);
    ForwardContext ctx{false, nullptr};
    for (const auto& batch : data::make_eval_batches(examples, model.config.max_len, opts.batch_size)) {
        auto logits = model.forward_last(batch.items, batch.rows, batch.cols, batch.lengths, ctx);
        for (std::size_t r = 0; r < batch.rows; ++r) {
            const auto& ex = examples[batch.source[r]];
            if (opts.exclude_seen)
                for (auto it : ex.prefix) excluded[static_cast<std::size_t>(it)] = 1;
            auto row = logits.values().subspan(r * v, v);
            std::span<const std::uint8_t> ex_span;
            if (opts.exclude_seen) ex_span = excluded;
            out.ranks[batch.source[r]] = rank_of_target<T>(row, ex.target, ex_span, &out.eligible[batch.source[r]]);
            if (opts.exclude_seen)
                for (auto it : ex.prefix) excluded[static_cast<std::size_t>(it)] = 0;
        }
    }
    return out;
}

inline void check_results(const RankingResult& results, std::size_t k, const char* what) {
    if (results.ranks.empty()) throw ContractError(std::string(what) + ": empty ranking results");
    if (k == 0) throw ContractError(std::string(what) + ": k must be at least 1");
}

/// Fraction of users whose single relevant item ranks within the top k.
inline double recall_at_k(const RankingResult& results, std::size_t k) {
    check_results(results, k, "recall_at_k");
    std::size_t hits = 0;
    for (auto r : results.ranks) hits += r <= k;
    return static_cast<double>(hits) / static_cast<double>(results.ranks.size());
}

/// Hits over users, computed independently of recall_at_k.
inline double hit_rate_at_k(const RankingResult& results, std::size_t k) {
    check_results(results, k, "hit_rate_at_k");
    double hits = 0;
    for (auto r : results.ranks)
        if (r <= k) hits += 1.0;
    return hits / static_cast<double>(results.ranks.size());
}

/// Mean over users of 1/log2(rank+1) for ranks within k; the ideal DCG is 1.
inline double ndcg_at_k(const RankingResult& results, std::size_t k) {
    check_results(results, k, "ndcg_at_k");
    double total = 0;
    for (auto r : results.ranks)
        if (r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    return total / static_cast<double>(results.ranks.size());
}

struct MetricsReport {
    std::map<std::size_t, double> recall;
    std::map<std::size_t, double> ndcg;
    std::size_t n_users = 0;
    std::string dataset;
    std::string config_hash;
    std::uint64_t seed = 0;
    double seconds = 0;

    double recall_at(std::size_t k) const { return recall.at(k); }
    double ndcg_at(std::size_t k) const { return ndcg.at(k); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        for (const auto& [k, val] : recall) j["recall@" + std::to_string(k)] = val;
        for (const auto& [k, val] : ndcg) j["ndcg@" + std::to_string(k)] = val;
        j["n_users"] = n_users;
        j["dataset"] = dataset;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        j["seconds"] = seconds;
        return j;
    }

    static std::string csv_header() {
        return "dataset,config_hash,seed,recall@5,recall@10,recall@20,ndcg@10,seconds";
    }

    std::string csv_row() const {
        std::ostringstream os;
        os.precision(6);
        os << std::fixed;
        os << dataset << ',' << config_hash << ',' << seed << ',' << recall.at(5) << ',' << recall.at(10) << ','
           << recall.at(20) << ',' << ndcg.at(10) << ',' << std::setprecision(3) << seconds;
        return os.str();
    }
};

/// Ranks every example and reports recall@k and ndcg@k for k in ks plus the
/// standard {5,10,20} recall and ndcg@10.
template <typename T>
MetricsReport evaluate(const MaTrRecModel<T>& model, const std::vector<data::EvalExample>& examples,
                       std::vector<std::size_t> ks = {5, 10, 20}, const RankOptions& opts = {}) {
    const auto start = std::chrono::steady_clock::now();
    auto results = full_rank(model, examples, opts);
    for (std::size_t k : {5, 10, 20}) ks.push_back(k);
    MetricsReport rep;
    for (auto k : ks) {
        rep.recall[k] = recall_at_k(results, k);
        rep.ndcg[k] = ndcg_at_k(results, k);
    }
    rep.n_users = examples.size();
    rep.config_hash = hex64(model.config.hash());
    rep.seed = model.config.seed;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

}  // namespace matrrec::eval

#endif  // MATRREC_EVAL_HPP
