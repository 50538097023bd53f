#ifndef MATRREC_DATA_HPP
#define MATRREC_DATA_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "matrrec/binary_io.hpp"
#include "matrrec/hash.hpp"
#include "matrrec/tensor.hpp"

namespace matrrec::data {

/// Malformed input. `line` is 1-based (the header is line 1); 0 means file-level.
class FormatError : public std::runtime_error {
public:
    FormatError(std::size_t line, const std::string& what)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct InteractionRecord {
    std::string user;
    std::string item;
    std::int64_t timestamp = 0;

    bool operator==(const InteractionRecord&) const = default;
};

inline constexpr const char* kTsvHeader = "user_id\titem_id\ttimestamp";

// ---------------------------------------------------------------------------
// Parsing

inline std::vector<InteractionRecord> parse_interactions(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError(0, "missing header `user_id\\titem_id\\ttimestamp`");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kTsvHeader) throw FormatError(1, "expected header `user_id\\titem_id\\ttimestamp`");

    std::vector<InteractionRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string_view> fields;
        std::string_view rest(line);
        while (true) {
            auto tab = rest.find('\t');
            fields.push_back(rest.substr(0, tab));
            if (tab == std::string_view::npos) break;
            rest.remove_prefix(tab + 1);
        }
        if (fields.size() != 3) {
            throw FormatError(lineno, "expected 3 tab-separated fields, found " + std::to_string(fields.size()));
        }
        if (fields[0].empty() || fields[1].empty()) throw FormatError(lineno, "empty user or item id");
        std::int64_t ts = 0;
        auto ts_field = fields[2];
        auto [ptr, ec] = std::from_chars(ts_field.data(), ts_field.data() + ts_field.size(), ts);
        if (ec != std::errc() || ptr != ts_field.data() + ts_field.size()) {
            throw FormatError(lineno, "timestamp `" + std::string(ts_field) + "` is not an integer");
        }
        if (ts < 0) throw FormatError(lineno, "negative timestamp");
        out.push_back({std::string(fields[0]), std::string(fields[1]), ts});
    }
    return out;
}

inline std::vector<InteractionRecord> parse_interactions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(0, "cannot open " + path);
    return parse_interactions(in);
}

// ---------------------------------------------------------------------------
// k-core filtering

/// Repeatedly drops users and items with fewer than `min_count` interactions
/// until every survivor meets the threshold. Record order is preserved.
inline std::vector<InteractionRecord> five_core_filter(std::vector<InteractionRecord> records,
                                                       std::size_t min_count = 5) {
    while (true) {
        std::unordered_map<std::string, std::size_t> users, items;
        for (const auto& r : records) {
            ++users[r.user];
            ++items[r.item];
        }
        std::vector<InteractionRecord> kept;
        kept.reserve(records.size());
        for (auto& r : records) {
            if (users[r.user] >= min_count && items[r.item] >= min_count) kept.push_back(std::move(r));
        }
        const bool stable = kept.size() == records.size();
        records = std::move(kept);
        if (stable) return records;
    }
}

// ---------------------------------------------------------------------------
// Sequences

struct UserSequence {
    std::size_t user_index = 0;
    std::vector<std::int32_t> items;  // 1-based item indices, chronological

    bool operator==(const UserSequence&) const = default;
};

struct SequenceCorpus {
    std::vector<UserSequence> sequences;
    std::vector<std::string> item_ids;  // index 0 is the padding slot
    std::vector<std::string> user_ids;

    std::size_t n_items() const { return item_ids.empty() ? 0 : item_ids.size() - 1; }
    std::size_t n_users() const { return user_ids.size(); }
    std::size_t n_interactions() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.items.size();
        return n;
    }

    bool operator==(const SequenceCorpus&) const = default;
};

/// Dense 1-based item indices by first appearance; per-user stable sort by timestamp.
inline SequenceCorpus build_sequences(const std::vector<InteractionRecord>& records) {
    SequenceCorpus corpus;
    corpus.item_ids.emplace_back();
    std::unordered_map<std::string, std::int32_t> item_index;
    std::unordered_map<std::string, std::size_t> user_index;
    std::vector<std::vector<std::pair<std::int64_t, std::int32_t>>> events;
    for (const auto& r : records) {
        auto [it, fresh] = item_index.try_emplace(r.item, static_cast<std::int32_t>(corpus.item_ids.size()));
        if (fresh) corpus.item_ids.push_back(r.item);
        auto [ut, ufresh] = user_index.try_emplace(r.user, corpus.user_ids.size());
        if (ufresh) {
            corpus.user_ids.push_back(r.user);
            events.emplace_back();
        }
        events[ut->second].emplace_back(r.timestamp, it->second);
    }
    for (std::size_t u = 0; u < events.size(); ++u) {
        auto& ev = events[u];
        std::stable_sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        UserSequence seq{u, {}};
        seq.items.reserve(ev.size());
        for (const auto& e : ev) seq.items.push_back(e.second);
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

struct CorpusStats {
    std::size_t users = 0, items = 0, interactions = 0;
    double avg_len_user = 0, avg_len_item = 0, sparsity = 0;
};

inline CorpusStats corpus_stats(const SequenceCorpus& c) {
    CorpusStats s;
    s.users = c.n_users();
    s.items = c.n_items();
    s.interactions = c.n_interactions();
    if (s.users) s.avg_len_user = double(s.interactions) / double(s.users);
    if (s.items) s.avg_len_item = double(s.interactions) / double(s.items);
    if (s.users && s.items) s.sparsity = 1.0 - double(s.interactions) / (double(s.users) * double(s.items));
    return s;
}

// ---------------------------------------------------------------------------
// Leave-one-out split

struct EvalExample {
    std::size_t user_index = 0;
    std::vector<std::int32_t> prefix;
    std::int32_t target = 0;

    bool operator==(const EvalExample&) const = default;
};

struct Split {
    std::vector<UserSequence> train;
    std::vector<EvalExample> valid;
    std::vector<EvalExample> test;
    std::size_t skipped_short = 0;  // users with fewer than 3 items
};

/// Last item -> test target, second-to-last -> validation target, the rest -> training.
inline Split leave_one_out_split(const std::vector<UserSequence>& sequences) {
    Split split;
    for (const auto& s : sequences) {
        const auto& it = s.items;
        if (it.size() < 3) {
            ++split.skipped_short;
            continue;
        }
        const std::size_t n = it.size();
        split.train.push_back({s.user_index, std::vector<std::int32_t>(it.begin(), it.end() - 2)});
        split.valid.push_back({s.user_index, std::vector<std::int32_t>(it.begin(), it.end() - 2), it[n - 2]});
        split.test.push_back({s.user_index, std::vector<std::int32_t>(it.begin(), it.end() - 1), it[n - 1]});
    }
    return split;
}

// ---------------------------------------------------------------------------
// Batching

/// Right-padded id matrix [rows, cols]. cols is the longest (truncated) row,
/// never more than the configured maximum length.
struct Batch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int32_t> items;    // [rows*cols], 0 = padding
    std::vector<std::size_t> lengths;   // true lengths
    std::vector<std::int32_t> targets;  // next item per position, 0 = no loss
    std::vector<std::size_t> source;    // index into the originating list

    std::int32_t item(std::size_t r, std::size_t t) const { return items[r * cols + t]; }
    std::int32_t target(std::size_t r, std::size_t t) const { return targets[r * cols + t]; }
};

namespace detail {
inline Batch pack(const std::vector<const std::vector<std::int32_t>*>& seqs, const std::vector<std::size_t>& source,
                  std::size_t max_len) {
    Batch b;
    b.rows = seqs.size();
    for (const auto* s : seqs) b.cols = std::max(b.cols, std::min(s->size(), max_len));
    b.cols = std::max<std::size_t>(b.cols, 1);
    b.items.assign(b.rows * b.cols, 0);
    b.targets.assign(b.rows * b.cols, 0);
    b.lengths.resize(b.rows);
    b.source = source;
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& s = *seqs[r];
        const std::size_t len = std::min(s.size(), max_len);
        const std::size_t off = s.size() - len;  // keep the most recent items
        b.lengths[r] = len;
        for (std::size_t t = 0; t < len; ++t) {
            b.items[r * b.cols + t] = s[off + t];
            if (t + 1 < len) b.targets[r * b.cols + t] = s[off + t + 1];
        }
    }
    return b;
}
}  // namespace detail

/// Training batches over `sequences`. With a generator the order is shuffled;
/// without one it follows the input order.
inline std::vector<Batch> make_batches(const std::vector<UserSequence>& sequences, std::size_t max_len,
                                       std::size_t batch_size, std::mt19937_64* rng = nullptr) {
    if (max_len == 0) throw ConfigError("make_batches: max_len must be positive");
    if (batch_size == 0) throw ConfigError("make_batches: batch_size must be positive");
    std::vector<std::size_t> order(sequences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (rng) std::shuffle(order.begin(), order.end(), *rng);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<const std::vector<std::int32_t>*> seqs;
        std::vector<std::size_t> src;
        for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
            if (sequences[order[i]].items.empty()) continue;
            seqs.push_back(&sequences[order[i]].items);
            src.push_back(order[i]);
        }
        if (!seqs.empty()) out.push_back(detail::pack(seqs, src, max_len));
    }
    return out;
}

/// Evaluation batches in fixed order; `source` indexes into `examples`.
inline std::vector<Batch> make_eval_batches(const std::vector<EvalExample>& examples, std::size_t max_len,
                                            std::size_t batch_size) {
    if (max_len == 0 || batch_size == 0) throw ConfigError("make_eval_batches: sizes must be positive");
    std::vector<Batch> out;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        std::vector<const std::vector<std::int32_t>*> seqs;
        std::vector<std::size_t> src;
        for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
            if (examples[i].prefix.empty()) throw ContractError("make_eval_batches: empty prefix");
            seqs.push_back(&examples[i].prefix);
            src.push_back(i);
        }
        out.push_back(detail::pack(seqs, src, max_len));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class Pattern { cyclic, markov };

struct SyntheticSpec {
    std::size_t n_items = 20;
    std::size_t n_users = 64;
    Pattern pattern = Pattern::cyclic;
    std::size_t order = 1;  // markov context length
    std::size_t seq_len = 20;
    double noise = 0.0;

    std::string canonical_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "n_items=" << n_items << ";n_users=" << n_users
           << ";pattern=" << (pattern == Pattern::cyclic ? "cyclic" : "markov") << ";order=" << order
           << ";seq_len=" << seq_len << ";noise=" << noise;
        return os.str();
    }
};

/// Row-stochastic table: probs[context * n_items + (next-1)], context encodes
/// the last `order` items base n_items (oldest most significant).
struct MarkovTable {
    std::size_t n_items = 0;
    std::size_t order = 1;
    std::vector<double> probs;

    std::size_t n_contexts() const { return probs.size() / n_items; }
    std::size_t context_of(std::span<const std::int32_t> last) const {
        std::size_t c = 0;
        for (auto v : last) c = c * n_items + static_cast<std::size_t>(v - 1);
        return c;
    }
};

inline MarkovTable make_markov_table(std::size_t n_items, std::size_t order, std::mt19937_64& rng) {
    MarkovTable t{n_items, order, {}};
    std::size_t contexts = 1;
    for (std::size_t i = 0; i < order; ++i) contexts *= n_items;
    t.probs.resize(contexts * n_items);
    std::gamma_distribution<double> g(0.5, 1.0);
    for (std::size_t c = 0; c < contexts; ++c) {
        double z = 0;
        for (std::size_t j = 0; j < n_items; ++j) z += t.probs[c * n_items + j] = g(rng) + 1e-12;
        for (std::size_t j = 0; j < n_items; ++j) t.probs[c * n_items + j] /= z;
    }
    return t;
}

struct SyntheticCorpus {
    std::vector<InteractionRecord> records;
    MarkovTable table;  // empty for cyclic
};

/// Users "u<i>", items "<k>" for k in 1..n_items, timestamps 0..seq_len-1.
inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.n_items < 2) throw ConfigError("generate_synthetic: n_items must be at least 2");
    if (spec.pattern == Pattern::markov && spec.order == 0) throw ConfigError("generate_synthetic: order >= 1");
    std::mt19937_64 rng(seed);
    SyntheticCorpus out;
    if (spec.pattern == Pattern::markov) out.table = make_markov_table(spec.n_items, spec.order, rng);
    std::uniform_int_distribution<std::int32_t> any_item(1, static_cast<std::int32_t>(spec.n_items));
    std::bernoulli_distribution flip(spec.noise);
    for (std::size_t u = 0; u < spec.n_users; ++u) {
        std::vector<std::int32_t> seq;
        const std::size_t phase = std::uniform_int_distribution<std::size_t>(0, spec.n_items - 1)(rng);
        for (std::size_t t = 0; t < spec.seq_len; ++t) {
            std::int32_t item;
            if (spec.pattern == Pattern::cyclic) {
                item = static_cast<std::int32_t>((t + phase) % spec.n_items) + 1;
            } else if (seq.size() < spec.order) {
                item = any_item(rng);
            } else {
                const auto ctx = out.table.context_of(std::span<const std::int32_t>(seq).last(spec.order));
                std::discrete_distribution<std::int32_t> next(out.table.probs.begin() + ctx * spec.n_items,
                                                              out.table.probs.begin() + (ctx + 1) * spec.n_items);
                item = next(rng) + 1;
            }
            if (spec.noise > 0 && flip(rng)) item = any_item(rng);
            seq.push_back(item);
            out.records.push_back({"u" + std::to_string(u), std::to_string(item), static_cast<std::int64_t>(t)});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Processed-dataset cache

inline constexpr char kCacheMagic[4] = {'M', 'T', 'R', 'D'};
inline constexpr std::uint32_t kCacheVersion = 1;

struct DatasetCache {
    std::uint64_t data_hash = 0;  // identifies the source bytes and preprocessing settings
    SequenceCorpus corpus;
};

/// Hash of raw input bytes combined with the preprocessing parameters.
inline std::uint64_t source_hash(std::string_view raw_bytes, std::size_t min_count) {
    return fnv1a("|min_count=" + std::to_string(min_count) + "|cache_v" + std::to_string(kCacheVersion),
                 fnv1a(raw_bytes));
}

inline std::string serialize_cache(const DatasetCache& cache) {
    std::string out(kCacheMagic, 4);
    io::put_u32(out, kCacheVersion);
    io::put_u64(out, cache.data_hash);
    const auto& c = cache.corpus;
    io::put_u64(out, c.user_ids.size());
    for (const auto& s : c.user_ids) io::put_str(out, s);
    io::put_u64(out, c.item_ids.size());
    for (const auto& s : c.item_ids) io::put_str(out, s);
    io::put_u64(out, c.sequences.size());
    for (const auto& s : c.sequences) {
        io::put_u64(out, s.user_index);
        io::put_u64(out, s.items.size());
        for (auto v : s.items) io::put_u32(out, static_cast<std::uint32_t>(v));
    }
    return out;
}

inline DatasetCache deserialize_cache(std::string_view bytes) {
    io::Reader r(bytes);
    if (r.raw(4) != std::string_view(kCacheMagic, 4)) throw ArtifactError("not a dataset cache (bad magic)");
    if (auto v = r.u32(); v != kCacheVersion) throw ArtifactError("stale dataset cache version " + std::to_string(v));
    DatasetCache cache;
    cache.data_hash = r.u64();
    auto& c = cache.corpus;
    c.user_ids.resize(r.u64());
    for (auto& s : c.user_ids) s = r.str();
    c.item_ids.resize(r.u64());
    for (auto& s : c.item_ids) s = r.str();
    c.sequences.resize(r.u64());
    for (auto& s : c.sequences) {
        s.user_index = r.u64();
        s.items.resize(r.u64());
        for (auto& v : s.items) {
            v = static_cast<std::int32_t>(r.u32());
            if (v < 1 || static_cast<std::size_t>(v) > c.n_items()) throw ArtifactError("cache item index out of range");
        }
    }
    if (!r.done()) throw ArtifactError("trailing bytes in dataset cache");
    return cache;
}

inline void save_cache(const std::string& path, const DatasetCache& cache) {
    io::write_file(path, serialize_cache(cache));
}

inline DatasetCache load_cache(const std::string& path) { return deserialize_cache(io::read_file(path)); }

/// parse -> 5-core filter -> sequences, stamped with the source hash.
inline DatasetCache preprocess(const std::string& tsv_path, std::size_t min_count = 5) {
    std::string raw;
    try {
        raw = io::read_file(tsv_path);
    } catch (const ArtifactError& e) {
        throw FormatError(0, e.what());
    }
    std::istringstream in(raw);
    auto records = five_core_filter(parse_interactions(in), min_count);
    return {source_hash(raw, min_count), build_sequences(records)};
}

}  // namespace matrrec::data

#endif  // MATRREC_DATA_HPP
