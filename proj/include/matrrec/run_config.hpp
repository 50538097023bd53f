#ifndef MATRREC_RUN_CONFIG_HPP
#define MATRREC_RUN_CONFIG_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matrrec/data.hpp"
#include "matrrec/hash.hpp"
#include "matrrec/model.hpp"
#include "matrrec/synth.hpp"
#include "matrrec/train.hpp"

namespace matrrec {

/// Bad command line: unknown or ambiguous key, wrong value type, missing argument.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every setting of a run as flat dotted keys. A JSON file supplies a base,
/// `--key value` flags override it. Flags may name a key by any trailing run of
/// its dotted components when that suffix is unique (`--max-len` for
/// `model.max_len`); dashes and underscores are interchangeable.
class RunConfig {
public:
    RunConfig() : values_(defaults()) {}

    static nlohmann::json defaults() {
        const MaTrRecConfig m;
        const train::TrainConfig t;
        return {
            {"data.source", "cache"},  // cache | tsv | synthetic
            {"data.tsv", ""},
            {"data.cache", ""},
            {"data.name", ""},
            {"data.min_count", 5},
            {"data.synthetic.pattern", "cyclic"},
            {"data.synthetic.order", 1},
            {"data.synthetic.n_items", 20},
            {"data.synthetic.n_users", 64},
            {"data.synthetic.seq_len", 20},
            {"data.synthetic.noise", 0.0},
            {"model.d_model", m.d_model},
            {"model.n_layers", m.n_layers},
            {"model.n_heads", m.n_heads},
            {"model.n_mamba_blocks", m.n_mamba_blocks},
            {"model.d_state", m.d_state},
            {"model.conv_kernel", m.conv_kernel},
            {"model.expand", m.expand},
            {"model.dropout", m.dropout},
            {"model.max_len", m.max_len},
            {"model.tie_weights", m.tie_weights},
            {"model.add_pe", false},
            {"model.remove_ffn", false},
            {"model.remove_residual", false},
            {"model.remove_dropout", false},
            {"model.mamba_only", false},
            {"model.attention_only", false},
            {"train.lr", t.lr},
            {"train.beta1", t.beta1},
            {"train.beta2", t.beta2},
            {"train.eps", t.eps},
            {"train.batch_size", t.batch_size},
            {"train.eval_batch_size", t.eval_batch_size},
            {"train.max_epochs", t.max_epochs},
            {"train.patience", t.patience},
            {"train.clip_norm", t.clip_norm},
            {"train.target_loss", t.target_loss},
            {"train.exclude_seen", t.exclude_seen},
            {"eval.ks", {5, 10, 20}},
            {"eval.exclude_seen", true},
            {"sweep.axis", "dropout"},
            {"sweep.values", nlohmann::json::array()},
            {"synth.copy_distances", {1, 20}},
            {"synth.seq_len", 40},
            {"synth.n_items", 30},
            {"synth.n_train_users", 128},
            {"synth.n_eval_users", 64},
            {"synth.noise", 0.0},
            {"synth.seeds", {1, 2, 3}},
            {"synth.tolerance", 0.02},
            {"report.timing", true},
            {"seed", 42},
            {"out_dir", "out"},
            {"checkpoint", ""},
        };
    }

    /// Nested objects in the file are flattened into dotted keys.
    void merge_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError("cannot open config file " + path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw data::FormatError(0, "config " + path + ": " + e.what());
        }
        if (!j.is_object()) throw data::FormatError(0, "config " + path + ": top level must be an object");
        merge_object(j, "");
    }

    /// Parses `--key value` pairs after the command word; `--config` is applied first.
    void merge_args(const std::vector<std::string>& args) {
        std::vector<std::pair<std::string, std::string>> pairs;
        for (std::size_t i = 0; i < args.size(); ++i) {
            const auto& a = args[i];
            if (a.rfind("--", 0) != 0 || a.size() == 2) throw UsageError("expected --key, got '" + a + "'");
            std::string key = a.substr(2), value;
            if (auto eq = key.find('='); eq != std::string::npos) {
                value = key.substr(eq + 1);
                key.resize(eq);
            } else {
                if (i + 1 >= args.size()) throw UsageError("missing value for --" + key);
                value = args[++i];
            }
            pairs.emplace_back(key, value);
        }
        for (const auto& [k, v] : pairs)
            if (k == "config") merge_file(v);
        for (const auto& [k, v] : pairs)
            if (k != "config") set_text(resolve(k), v);
    }

    /// Full key for a (possibly abbreviated) flag name.
    std::string resolve(std::string name) const {
        std::replace(name.begin(), name.end(), '-', '_');
        if (values_.contains(name)) return name;
        std::vector<std::string> hits;
        for (const auto& [k, v] : values_.items()) {
            if (k.size() > name.size() && k.compare(k.size() - name.size(), name.size(), name) == 0 &&
                k[k.size() - name.size() - 1] == '.') {
                hits.push_back(k);
            }
        }
        if (hits.empty()) throw UsageError("unknown option --" + name);
        if (hits.size() > 1) {
            std::string msg = "ambiguous option --" + name + " (";
            for (std::size_t i = 0; i < hits.size(); ++i) msg += (i ? ", " : "") + hits[i];
            throw UsageError(msg + ")");
        }
        return hits.front();
    }

    void set_json(const std::string& key, const nlohmann::json& v) {
        if (!values_.contains(key)) throw UsageError("unknown config key " + key);
        const auto& cur = values_[key];
        const bool ok = (cur.is_boolean() && v.is_boolean()) || (cur.is_string() && v.is_string()) ||
                        (cur.is_number_integer() && v.is_number_integer() && v.get<std::int64_t>() >= 0) ||
                        (cur.is_number_float() && v.is_number()) || (cur.is_array() && v.is_array());
        if (!ok) throw UsageError("config key " + key + " expects a value like " + cur.dump() + ", got " + v.dump());
        if (cur.is_number_float()) values_[key] = v.get<double>();
        else if (cur.is_number_integer()) values_[key] = v.get<std::uint64_t>();
        else values_[key] = v;
    }

    /// Text is read according to the type of the key's default.
    void set_text(const std::string& key, const std::string& text) {
        const auto& cur = values_.at(key);
        nlohmann::json v;
        if (cur.is_string()) {
            v = text;
        } else if (cur.is_array()) {
            std::string t = text;
            if (t.empty() || t.front() != '[') t = "[" + t + "]";
            v = nlohmann::json::parse(t, nullptr, false);
            if (v.is_discarded()) throw UsageError("--" + key + ": cannot read list '" + text + "'");
        } else {
            v = nlohmann::json::parse(text, nullptr, false);
            if (v.is_discarded()) throw UsageError("--" + key + ": cannot read value '" + text + "'");
        }
        set_json(key, v);
    }

    const nlohmann::json& values() const { return values_; }
    const nlohmann::json& at(const std::string& key) const { return values_.at(key); }
    template <typename V>
    V get(const std::string& key) const {
        return values_.at(key).get<V>();
    }

    /// Content hash over every setting that influences results (paths of
    /// outputs are left out).
    std::uint64_t hash() const { return fnv1a(hashed_values().dump()); }

    nlohmann::json hashed_values() const {
        auto j = values_;
        j.erase("out_dir");
        j.erase("checkpoint");
        j.erase("report.timing");
        return j;
    }
    std::string hash_hex() const { return hex64(hash()); }

    MaTrRecConfig model_config() const {
        MaTrRecConfig c;
        c.d_model = get<std::size_t>("model.d_model");
        c.n_layers = get<std::size_t>("model.n_layers");
        c.n_heads = get<std::size_t>("model.n_heads");
        c.n_mamba_blocks = get<std::size_t>("model.n_mamba_blocks");
        c.d_state = get<std::size_t>("model.d_state");
        c.conv_kernel = get<std::size_t>("model.conv_kernel");
        c.expand = get<std::size_t>("model.expand");
        c.dropout = get<double>("model.dropout");
        c.max_len = get<std::size_t>("model.max_len");
        c.tie_weights = get<bool>("model.tie_weights");
        c.ablation.add_positional_encoding = get<bool>("model.add_pe");
        c.ablation.remove_ffn = get<bool>("model.remove_ffn");
        c.ablation.remove_residual = get<bool>("model.remove_residual");
        c.ablation.remove_dropout = get<bool>("model.remove_dropout");
        c.ablation.mamba_only = get<bool>("model.mamba_only");
        c.ablation.attention_only = get<bool>("model.attention_only");
        if (c.ablation.remove_dropout) c.dropout = 0.0;
        c.seed = get<std::uint64_t>("seed");
        return c;
    }

    train::TrainConfig train_config() const {
        train::TrainConfig t;
        t.lr = get<double>("train.lr");
        t.beta1 = get<double>("train.beta1");
        t.beta2 = get<double>("train.beta2");
        t.eps = get<double>("train.eps");
        t.batch_size = get<std::size_t>("train.batch_size");
        t.eval_batch_size = get<std::size_t>("train.eval_batch_size");
        t.max_epochs = get<std::size_t>("train.max_epochs");
        t.patience = get<std::size_t>("train.patience");
        t.clip_norm = get<double>("train.clip_norm");
        t.target_loss = get<double>("train.target_loss");
        t.exclude_seen = get<bool>("train.exclude_seen");
        t.seed = get<std::uint64_t>("seed");
        t.validate();
        return t;
    }

    data::SyntheticSpec synthetic_spec() const {
        data::SyntheticSpec s;
        const auto pattern = get<std::string>("data.synthetic.pattern");
        if (pattern == "cyclic") s.pattern = data::Pattern::cyclic;
        else if (pattern == "markov") s.pattern = data::Pattern::markov;
        else throw UsageError("data.synthetic.pattern must be cyclic or markov");
        s.order = get<std::size_t>("data.synthetic.order");
        s.n_items = get<std::size_t>("data.synthetic.n_items");
        s.n_users = get<std::size_t>("data.synthetic.n_users");
        s.seq_len = get<std::size_t>("data.synthetic.seq_len");
        s.noise = get<double>("data.synthetic.noise");
        return s;
    }

    synth::SuiteOptions suite_options() const {
        synth::SuiteOptions o;
        for (auto d : get<std::vector<std::size_t>>("synth.copy_distances")) {
            synth::HorizonSpec h;
            h.copy_distance = d;
            h.seq_len = get<std::size_t>("synth.seq_len");
            h.n_items = get<std::size_t>("synth.n_items");
            h.n_train_users = get<std::size_t>("synth.n_train_users");
            h.n_eval_users = get<std::size_t>("synth.n_eval_users");
            h.noise = get<double>("synth.noise");
            h.validate();
            o.specs.push_back(h);
        }
        o.seeds = get<std::vector<std::uint64_t>>("synth.seeds");
        o.tolerance = get<double>("synth.tolerance");
        if (o.specs.empty() || o.seeds.empty()) throw UsageError("synth needs copy distances and seeds");
        return o;
    }

    std::filesystem::path out_dir() const { return get<std::string>("out_dir"); }
    std::string checkpoint_path() const {
        const auto c = get<std::string>("checkpoint");
        return c.empty() ? (out_dir() / "model.mtrc").string() : c;
    }

private:
    void merge_object(const nlohmann::json& obj, const std::string& prefix) {
        for (const auto& [k, v] : obj.items()) {
            const std::string key = prefix + k;
            if (v.is_object() && !values_.contains(key)) merge_object(v, key + ".");
            else set_json(key, v);
        }
    }

    nlohmann::json values_;
};

}  // namespace matrrec

#endif  // MATRREC_RUN_CONFIG_HPP
