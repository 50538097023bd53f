#ifndef MATRREC_TRAIN_HPP
#define MATRREC_TRAIN_HPP

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>

#include <nlohmann/json.hpp>

#include "matrrec/data.hpp"
#include "matrrec/eval.hpp"
#include "matrrec/model.hpp"

namespace matrrec::train {

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 2048;
    std::size_t eval_batch_size = 4096;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
    double clip_norm = 0.0;    // 0 disables global-norm clipping
    double target_loss = 0.0;  // stop once an epoch's mean loss falls below this; 0 disables
    bool exclude_seen = true;
    std::uint64_t seed = 42;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("train: lr must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train: betas in [0, 1)");
        if (!(eps > 0)) throw ConfigError("train: eps must be positive");
        if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("train: batch sizes must be positive");
    }
};

/// Per-parameter first and second moments plus the shared step counter.
template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::size_t t = 0;
};

/// One bias-corrected Adam update over every tensor in `params`, using the
/// gradients they currently hold. Tensors without a gradient buffer are skipped.
template <typename T>
void adam_step(const std::vector<NamedTensor<T>>& params, AdamState<T>& state, const TrainConfig& cfg) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.tensor.numel(), T{0});
            state.v.emplace_back(p.tensor.numel(), T{0});
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameter list");
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T step = static_cast<T>(cfg.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto tensor = params[i].tensor;
        if (!tensor.has_grad()) continue;
        auto g = tensor.grad();
        auto w = tensor.mutable_values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != w.size()) throw ContractError("adam_step: moment shape mismatch for " + params[i].name);
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
        }
    }
}

/// Mean next-item cross-entropy over positions whose target is non-zero.
/// Item id t maps to logit column t-1.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    std::vector<std::int32_t> classes(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) classes[i] = targets[i] - 1;
    return ops::cross_entropy(logits, std::span<const std::int32_t>(classes));
}

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double loss = 0;
    double valid_recall10 = 0;
    double valid_ndcg10 = 0;
    double seconds = 0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0: no epoch ran
    double best_ndcg10 = 0;
    std::string stopping_reason = "max_epochs";
    double seconds = 0;
    std::size_t param_count = 0;
    std::size_t peak_graph_bytes = 0;  // largest recorded tape during training

    /// `with_timing` false drops wall-clock fields, leaving a deterministic document.
    nlohmann::json to_json(bool with_timing = true) const {
        nlohmann::json j;
        j["best_epoch"] = best_epoch;
        j["best_valid_ndcg@10"] = best_ndcg10;
        j["stopping_reason"] = stopping_reason;
        j["param_count"] = param_count;
        j["peak_graph_bytes"] = peak_graph_bytes;
        if (with_timing) j["seconds"] = seconds;
        auto& arr = j["epochs"] = nlohmann::json::array();
        for (const auto& e : epochs) {
            nlohmann::json r{{"epoch", e.epoch},
                             {"loss", e.loss},
                             {"valid_recall@10", e.valid_recall10},
                             {"valid_ndcg@10", e.valid_ndcg10}};
            if (with_timing) r["seconds"] = e.seconds;
            arr.push_back(std::move(r));
        }
        return j;
    }
};

template <typename T>
void clip_gradients(const std::vector<NamedTensor<T>>& params, double max_norm) {
    double sq = 0;
    for (const auto& p : params)
        for (T g : p.tensor.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0) return;
    const T f = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
        auto t = p.tensor;
        if (!t.has_grad()) continue;
        for (auto& g : t.mutable_grad()) g *= f;
    }
}

/// Loss and backward on one batch; gradients accumulate into the parameters.
template <typename T>
double train_batch(const MaTrRecModel<T>& model, const data::Batch& batch, std::mt19937_64& rng,
                   std::size_t* graph_bytes = nullptr) {
    ForwardContext ctx{true, &rng};
    Tensor<T> logits;
    try {
        logits = model.forward(batch.items, batch.rows, batch.cols, batch.lengths, ctx);
    } catch (const NumericError& e) {
        throw DivergenceError(e.what());
    }
    auto loss = cross_entropy_loss(logits, std::span<const std::int32_t>(batch.targets));
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw DivergenceError("training loss is not finite (" + std::to_string(value) + ")");
    auto tape = backward(loss);
    if (graph_bytes) *graph_bytes = tape.value_bytes();
    return value;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Shuffled mini-batch Adam with validation NDCG@10 early stopping. The best
/// epoch's parameters are restored before returning.
template <typename T>
TrainReport fit(MaTrRecModel<T>& model, const data::Split& split, const TrainConfig& cfg,
                const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (split.train.empty()) throw ContractError("fit: empty training split");
    const auto start = std::chrono::steady_clock::now();
    TrainReport report;
    report.param_count = param_count(model);
    std::mt19937_64 rng(cfg.seed);
    AdamState<T> state;
    const auto params = model.parameters();
    auto best = model.snapshot();
    double best_ndcg = -1;
    std::size_t since_best = 0;
    const eval::RankOptions rank_opts{cfg.eval_batch_size, cfg.exclude_seen};

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        double loss_sum = 0;
        std::size_t positions = 0;
        for (const auto& batch : data::make_batches(split.train, model.config.max_len, cfg.batch_size, &rng)) {
            std::size_t valid = 0;
            for (auto t : batch.targets) valid += t != 0;
            if (valid == 0) continue;
            model.zero_grad();
            std::size_t bytes = 0;
            const double loss = train_batch(model, batch, rng, &bytes);
            report.peak_graph_bytes = std::max(report.peak_graph_bytes, bytes);
            if (cfg.clip_norm > 0) clip_gradients(params, cfg.clip_norm);
            adam_step(params, state, cfg);
            for (const auto& p : params)
                for (T w : p.tensor.values())
                    if (!std::isfinite(static_cast<double>(w)))
                        throw DivergenceError("parameter " + p.name + " became non-finite at epoch " +
                                              std::to_string(epoch));
            loss_sum += loss * static_cast<double>(valid);
            positions += valid;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = positions ? loss_sum / static_cast<double>(positions) : 0.0;
        if (!split.valid.empty()) {
            auto ranks = eval::full_rank(model, split.valid, rank_opts);
            rec.valid_recall10 = eval::recall_at_k(ranks, 10);
            rec.valid_ndcg10 = eval::ndcg_at_k(ranks, 10);
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (rec.valid_ndcg10 > best_ndcg) {
            best_ndcg = rec.valid_ndcg10;
            report.best_epoch = epoch;
            best = model.snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            report.stopping_reason = "patience";
            break;
        }
        if (cfg.target_loss > 0 && rec.loss < cfg.target_loss) {
            report.stopping_reason = "target_loss";
            break;
        }
    }
    if (report.best_epoch > 0) {
        model.restore(best);
        report.best_ndcg10 = best_ndcg;
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace matrrec::train

#endif  // MATRREC_TRAIN_HPP
