#ifndef MATRREC_CLI_HPP
#define MATRREC_CLI_HPP

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "matrrec/checkpoint.hpp"
#include "matrrec/data.hpp"
#include "matrrec/eval.hpp"
#include "matrrec/run_config.hpp"
#include "matrrec/synth.hpp"
#include "matrrec/train.hpp"

namespace matrrec::cli {

enum ExitCode : int { ok = 0, other = 1, format = 2, divergence = 3, mismatch = 4 };

/// Two artifacts that do not belong together.
class MismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kUsage =
    "usage: matrrec <command> [--config file.json] [--key value ...]\n"
    "commands:\n"
    "  preprocess  TSV -> dataset cache, prints corpus statistics\n"
    "  train       fit a model, write checkpoint and reports\n"
    "  evaluate    score a checkpoint on the test split\n"
    "  ablate      train the default model and one variant per ablation switch\n"
    "  sweep       train once per value of --sweep.axis (dropout|max_len)\n"
    "  synth       copy-task horizon suite over hybrid and single-component models\n"
    "keys may be abbreviated to a unique dotted suffix, e.g. --dropout 0.4 --max-len 50\n";

struct Dataset {
    data::SequenceCorpus corpus;
    std::uint64_t hash = 0;
    std::string name;
};

inline Dataset load_dataset(const RunConfig& rc) {
    const auto source = rc.get<std::string>("data.source");
    Dataset d;
    d.name = rc.get<std::string>("data.name");
    if (source == "cache") {
        const auto path = rc.get<std::string>("data.cache");
        if (path.empty()) throw UsageError("data.cache is required when data.source is cache");
        auto cache = data::load_cache(path);
        d.corpus = std::move(cache.corpus);
        d.hash = cache.data_hash;
        if (d.name.empty()) d.name = std::filesystem::path(path).stem().string();
    } else if (source == "tsv") {
        const auto path = rc.get<std::string>("data.tsv");
        if (path.empty()) throw UsageError("data.tsv is required when data.source is tsv");
        auto cache = data::preprocess(path, rc.get<std::size_t>("data.min_count"));
        d.corpus = std::move(cache.corpus);
        d.hash = cache.data_hash;
        if (d.name.empty()) d.name = std::filesystem::path(path).stem().string();
    } else if (source == "synthetic") {
        const auto spec = rc.synthetic_spec();
        const auto seed = rc.get<std::uint64_t>("seed");
        d.corpus = data::build_sequences(data::generate_synthetic(spec, seed).records);
        d.hash = fnv1a(spec.canonical_text() + ";seed=" + std::to_string(seed));
        if (d.name.empty()) d.name = "synthetic";
    } else {
        throw UsageError("data.source must be cache, tsv or synthetic");
    }
    if (d.corpus.n_items() == 0) throw data::FormatError(0, "dataset has no items");
    return d;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    io::write_file(path.string(), text);
}

inline std::string fixed(double v, int precision = 6) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

/// Bytes for weights, gradients and both Adam moments, plus the largest tape.
inline std::size_t memory_estimate(const train::TrainReport& r) {
    return 4 * r.param_count * sizeof(float) + r.peak_graph_bytes;
}

struct Outcome {
    train::TrainReport train;
    eval::MetricsReport test;
    MaTrRecModel<float> model;
};

inline Outcome train_and_evaluate(const RunConfig& rc, MaTrRecConfig mc, const Dataset& ds, const data::Split& split,
                                  std::ostream& log) {
    mc.vocab_size = ds.corpus.n_items();
    const auto tc = rc.train_config();
    auto model = build_model<float>(mc);
    auto report = train::fit(model, split, tc, [&](const train::EpochRecord& e) {
        log << "epoch " << e.epoch << " loss " << fixed(e.loss, 4) << " valid ndcg@10 " << fixed(e.valid_ndcg10, 4)
            << '\n';
    });
    const eval::RankOptions ro{tc.eval_batch_size, rc.get<bool>("eval.exclude_seen")};
    auto metrics = eval::evaluate(model, split.test, rc.get<std::vector<std::size_t>>("eval.ks"), ro);
    metrics.dataset = ds.name;
    metrics.config_hash = rc.hash_hex();
    if (!rc.get<bool>("report.timing")) {
        report.seconds = 0;
        for (auto& e : report.epochs) e.seconds = 0;
        metrics.seconds = 0;
    }
    return {std::move(report), std::move(metrics), std::move(model)};
}

inline data::Split split_of(const Dataset& ds) {
    auto split = data::leave_one_out_split(ds.corpus.sequences);
    if (split.test.empty()) throw data::FormatError(0, "no user has the 3 interactions a split needs");
    return split;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_preprocess(const RunConfig& rc, std::ostream& out) {
    const auto tsv = rc.get<std::string>("data.tsv");
    if (tsv.empty()) throw UsageError("preprocess needs --data.tsv");
    auto cache_path = rc.get<std::string>("data.cache");
    if (cache_path.empty()) cache_path = (rc.out_dir() / "dataset.mtrd").string();
    const auto cache = data::preprocess(tsv, rc.get<std::size_t>("data.min_count"));
    write_text(cache_path, data::serialize_cache(cache));
    const auto s = data::corpus_stats(cache.corpus);
    out << "users " << s.users << "\nitems " << s.items << "\ninteractions " << s.interactions << "\navg_len_user "
        << fixed(s.avg_len_user, 2) << "\navg_len_item " << fixed(s.avg_len_item, 2) << "\nsparsity "
        << fixed(100.0 * s.sparsity, 2) << "%\ndata_hash " << hex64(cache.data_hash) << "\ncache " << cache_path
        << '\n';
    return ok;
}

inline int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& log) {
    const auto ds = load_dataset(rc);
    const auto split = split_of(ds);
    auto res = train_and_evaluate(rc, rc.model_config(), ds, split, log);
    const bool timing = rc.get<bool>("report.timing");
    const auto ckpt = rc.checkpoint_path();
    const std::map<std::string, std::string> meta{
        {"run_hash", rc.hash_hex()}, {"data_hash", hex64(ds.hash)}, {"dataset", ds.name}};
    std::filesystem::create_directories(rc.out_dir());
    if (auto p = std::filesystem::path(ckpt); p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    save_checkpoint(ckpt, res.model, meta);

    auto test = res.test.to_json();
    if (!timing) test.erase("seconds");
    const nlohmann::json report{{"run_hash", rc.hash_hex()},
                                {"data_hash", hex64(ds.hash)},
                                {"dataset", ds.name},
                                {"config", rc.hashed_values()},
                                {"train", res.train.to_json(timing)},
                                {"test", test}};
    write_text(rc.out_dir() / "train_report.json", report.dump(2) + "\n");
    const std::string csv = eval::MetricsReport::csv_header() + "\n" + res.test.csv_row() + "\n";
    write_text(rc.out_dir() / "metrics.csv", csv);
    out << csv;
    log << "stopped: " << res.train.stopping_reason << ", best epoch " << res.train.best_epoch << ", checkpoint "
        << ckpt << '\n';
    return ok;
}

inline int cmd_evaluate(const RunConfig& rc, std::ostream& out) {
    const auto ckpt = load_checkpoint<float>(rc.checkpoint_path());
    const auto ds = load_dataset(rc);
    const auto want = ckpt.meta.count("data_hash") ? ckpt.meta.at("data_hash") : std::string("(none)");
    if (want != hex64(ds.hash)) {
        throw MismatchError("checkpoint was trained on data " + want + " but the dataset hashes to " + hex64(ds.hash));
    }
    if (ckpt.model.config.vocab_size != ds.corpus.n_items()) {
        throw MismatchError("checkpoint vocabulary does not match the dataset");
    }
    const auto split = split_of(ds);
    const eval::RankOptions ro{rc.get<std::size_t>("train.eval_batch_size"), rc.get<bool>("eval.exclude_seen")};
    auto m = eval::evaluate(ckpt.model, split.test, rc.get<std::vector<std::size_t>>("eval.ks"), ro);
    m.dataset = ds.name;
    m.config_hash = ckpt.meta.count("run_hash") ? ckpt.meta.at("run_hash") : hex64(ckpt.model.config.hash());
    if (!rc.get<bool>("report.timing")) m.seconds = 0;
    auto j = m.to_json();
    j["data_hash"] = hex64(ds.hash);
    write_text(rc.out_dir() / "eval.json", j.dump(2) + "\n");
    out << eval::MetricsReport::csv_header() << '\n' << m.csv_row() << '\n';
    return ok;
}

/// Default model followed by one row per ablation switch.
inline std::vector<std::pair<std::string, MaTrRecConfig>> ablation_rows(const MaTrRecConfig& base) {
    std::vector<std::pair<std::string, MaTrRecConfig>> rows{{"default", base}};
    auto with = [&](const char* name, auto edit) {
        auto c = base;
        edit(c);
        rows.emplace_back(name, c);
    };
    with("add_pe", [](MaTrRecConfig& c) { c.ablation.add_positional_encoding = true; });
    with("remove_ffn", [](MaTrRecConfig& c) { c.ablation.remove_ffn = true; });
    with("remove_residual", [](MaTrRecConfig& c) { c.ablation.remove_residual = true; });
    with("remove_dropout", [](MaTrRecConfig& c) {
        c.ablation.remove_dropout = true;
        c.dropout = 0.0;
    });
    with("heads_2", [](MaTrRecConfig& c) { c.n_heads = 2; });
    with("layers_2", [](MaTrRecConfig& c) { c.n_layers = 2; });
    return rows;
}

inline std::string metric_columns(const eval::MetricsReport& m) {
    return fixed(m.recall_at(5)) + "," + fixed(m.recall_at(10)) + "," + fixed(m.recall_at(20)) + "," +
           fixed(m.ndcg_at(10));
}

inline int cmd_ablate(const RunConfig& rc, std::ostream& out, std::ostream& log) {
    const auto ds = load_dataset(rc);
    const auto split = split_of(ds);
    std::string csv = "run_hash,variant,param_count,recall@5,recall@10,recall@20,ndcg@10,best_epoch,epochs,seconds\n";
    for (const auto& [name, mc] : ablation_rows(rc.model_config())) {
        log << "== " << name << '\n';
        const auto res = train_and_evaluate(rc, mc, ds, split, log);
        csv += rc.hash_hex() + "," + name + "," + std::to_string(res.train.param_count) + "," +
               metric_columns(res.test) + "," + std::to_string(res.train.best_epoch) + "," +
               std::to_string(res.train.epochs.size()) + "," + fixed(res.train.seconds, 3) + "\n";
    }
    write_text(rc.out_dir() / "ablation.csv", csv);
    out << csv;
    return ok;
}

inline int cmd_sweep(const RunConfig& rc, std::ostream& out, std::ostream& log) {
    const auto axis = rc.get<std::string>("sweep.axis");
    if (axis != "dropout" && axis != "max_len") throw UsageError("sweep.axis must be dropout or max_len");
    const auto values = rc.at("sweep.values");
    if (values.empty()) throw UsageError("sweep needs a non-empty --sweep.values list");
    const auto ds = load_dataset(rc);
    const auto split = split_of(ds);
    std::string csv =
        "run_hash,axis,value,recall@5,recall@10,recall@20,ndcg@10,epochs,train_seconds,seconds_per_epoch,"
        "param_count,memory_estimate_bytes\n";
    for (const auto& v : values) {
        auto cell = rc;
        cell.set_json("model." + axis, v);
        log << "== " << axis << " " << v.dump() << '\n';
        const auto res = train_and_evaluate(cell, cell.model_config(), ds, split, log);
        const auto n = res.train.epochs.size();
        csv += cell.hash_hex() + "," + axis + "," + cell.at("model." + axis).dump() + "," + metric_columns(res.test) +
               "," + std::to_string(n) + "," + fixed(res.train.seconds, 3) + "," +
               fixed(n ? res.train.seconds / static_cast<double>(n) : 0.0, 4) + "," +
               std::to_string(res.train.param_count) + "," + std::to_string(memory_estimate(res.train)) + "\n";
    }
    write_text(rc.out_dir() / ("sweep_" + axis + ".csv"), csv);
    out << csv;
    return ok;
}

inline int cmd_synth(const RunConfig& rc, std::ostream& out, std::ostream& log) {
    const auto opts = rc.suite_options();
    const auto report = synth::run_horizon_suite(opts, rc.model_config(), rc.train_config(), [&](const auto& r) {
        log << r.spec << ' ' << r.variant << " seed " << r.seed << " recall@10 " << fixed(r.recall10, 4) << '\n';
    });
    const auto csv = report.to_csv(rc.get<bool>("report.timing"));
    nlohmann::json summary{{"run_hash", rc.hash_hex()}, {"warnings", report.warnings}};
    for (const auto& [key, mean] : report.mean_recall10()) summary["mean_recall@10"][key.first][key.second] = mean;
    write_text(rc.out_dir() / "horizon.csv", csv);
    write_text(rc.out_dir() / "horizon.json", summary.dump(2) + "\n");
    out << csv;
    for (const auto& w : report.warnings) log << "warning: " << w << '\n';
    return ok;
}

/// Entry point shared by the tool and tests. Returns the process exit code.
inline int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    if (argv.empty() || argv[0] == "--help" || argv[0] == "-h" || argv[0] == "help") {
        (argv.empty() ? err : out) << kUsage;
        return argv.empty() ? other : ok;
    }
    const auto& command = argv[0];
    try {
        RunConfig rc;
        rc.merge_args({argv.begin() + 1, argv.end()});
        if (command == "preprocess") return cmd_preprocess(rc, out);
        if (command == "train") return cmd_train(rc, out, err);
        if (command == "evaluate") return cmd_evaluate(rc, out);
        if (command == "ablate") return cmd_ablate(rc, out, err);
        if (command == "sweep") return cmd_sweep(rc, out, err);
        if (command == "synth") return cmd_synth(rc, out, err);
        err << "unknown command '" << command << "'\n" << kUsage;
        return other;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return other;
    } catch (const data::FormatError& e) {
        err << "format error: " << e.what() << '\n';
        return format;
    } catch (const train::DivergenceError& e) {
        err << "training diverged: " << e.what() << '\n';
        return divergence;
    } catch (const MismatchError& e) {
        err << "artifact mismatch: " << e.what() << '\n';
        return mismatch;
    } catch (const ArtifactError& e) {
        err << "unreadable artifact: " << e.what() << '\n';
        return format;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return other;
    } catch (const nlohmann::json::exception& e) {
        err << "config error: " << e.what() << '\n';
        return other;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return other;
    }
}

}  // namespace matrrec::cli

#endif  // MATRREC_CLI_HPP
