#ifndef MATRREC_MODEL_HPP
#define MATRREC_MODEL_HPP

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "matrrec/hash.hpp"
#include "matrrec/layers.hpp"

namespace matrrec {

/// Structural ablation switches. mamba_only and attention_only are mutually exclusive.
struct AblationFlags {
    bool add_positional_encoding = false;
    bool remove_ffn = false;
    bool remove_residual = false;
    bool remove_dropout = false;
    bool mamba_only = false;
    bool attention_only = false;

    bool operator==(const AblationFlags&) const = default;
    bool any() const {
        return add_positional_encoding || remove_ffn || remove_residual || remove_dropout || mamba_only ||
               attention_only;
    }
};

struct MaTrRecConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    std::size_t n_mamba_blocks = 2;
    std::size_t d_state = 32;
    std::size_t conv_kernel = 4;
    std::size_t expand = 2;
    double dropout = 0.4;
    std::size_t max_len = 50;
    std::size_t vocab_size = 0;
    bool tie_weights = false;
    AblationFlags ablation{};
    std::uint64_t seed = 42;

    bool operator==(const MaTrRecConfig&) const = default;

    /// Throws ConfigError listing every violated constraint.
    void validate() const {
        std::vector<std::string> problems;
        if (d_model == 0) problems.emplace_back("d_model must be positive");
        if (n_layers == 0) problems.emplace_back("n_layers must be positive");
        if (n_heads == 0) problems.emplace_back("n_heads must be positive");
        if (n_heads != 0 && d_model % n_heads != 0) problems.emplace_back("n_heads must divide d_model");
        if (d_state == 0) problems.emplace_back("d_state must be positive");
        if (conv_kernel == 0) problems.emplace_back("conv_kernel must be positive");
        if (expand == 0) problems.emplace_back("expand must be positive");
        if (max_len == 0) problems.emplace_back("max_len must be positive");
        if (vocab_size == 0) problems.emplace_back("vocab_size must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) problems.emplace_back("dropout must lie in [0, 1)");
        if (ablation.mamba_only && ablation.attention_only) {
            problems.emplace_back("mamba_only and attention_only are mutually exclusive");
        }
        if (ablation.mamba_only && n_mamba_blocks == 0) problems.emplace_back("mamba_only needs n_mamba_blocks > 0");
        if (!problems.empty()) {
            std::string msg = "invalid model config:";
            for (const auto& p : problems) msg += " " + p + ";";
            throw ConfigError(msg);
        }
    }

    /// Stable key=value text, one entry per line. Used in checkpoints and hashing.
    std::string canonical_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "d_model=" << d_model << '\n'
           << "n_layers=" << n_layers << '\n'
           << "n_heads=" << n_heads << '\n'
           << "n_mamba_blocks=" << n_mamba_blocks << '\n'
           << "d_state=" << d_state << '\n'
           << "conv_kernel=" << conv_kernel << '\n'
           << "expand=" << expand << '\n'
           << "dropout=" << dropout << '\n'
           << "max_len=" << max_len << '\n'
           << "vocab_size=" << vocab_size << '\n'
           << "tie_weights=" << tie_weights << '\n'
           << "add_positional_encoding=" << ablation.add_positional_encoding << '\n'
           << "remove_ffn=" << ablation.remove_ffn << '\n'
           << "remove_residual=" << ablation.remove_residual << '\n'
           << "remove_dropout=" << ablation.remove_dropout << '\n'
           << "mamba_only=" << ablation.mamba_only << '\n'
           << "attention_only=" << ablation.attention_only << '\n'
           << "seed=" << seed << '\n';
        return os.str();
    }

    std::uint64_t hash() const { return fnv1a(canonical_text()); }

    static MaTrRecConfig from_canonical_text(const std::string& text) {
        MaTrRecConfig c;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 1);
            auto u = [&] { return static_cast<std::size_t>(std::stoull(val)); };
            auto b = [&] { return val == "1"; };
            if (key == "d_model") c.d_model = u();
            else if (key == "n_layers") c.n_layers = u();
            else if (key == "n_heads") c.n_heads = u();
            else if (key == "n_mamba_blocks") c.n_mamba_blocks = u();
            else if (key == "d_state") c.d_state = u();
            else if (key == "conv_kernel") c.conv_kernel = u();
            else if (key == "expand") c.expand = u();
            else if (key == "dropout") c.dropout = std::stod(val);
            else if (key == "max_len") c.max_len = u();
            else if (key == "vocab_size") c.vocab_size = u();
            else if (key == "tie_weights") c.tie_weights = b();
            else if (key == "add_positional_encoding") c.ablation.add_positional_encoding = b();
            else if (key == "remove_ffn") c.ablation.remove_ffn = b();
            else if (key == "remove_residual") c.ablation.remove_residual = b();
            else if (key == "remove_dropout") c.ablation.remove_dropout = b();
            else if (key == "mamba_only") c.ablation.mamba_only = b();
            else if (key == "attention_only") c.ablation.attention_only = b();
            else if (key == "seed") c.seed = std::stoull(val);
        }
        return c;
    }
};

/// Applies ablation switches to a config. remove_dropout forces dropout to 0.
inline MaTrRecConfig apply_ablation(MaTrRecConfig config, const AblationFlags& flags) {
    if (flags.mamba_only && flags.attention_only) {
        throw ConfigError("apply_ablation: mamba_only and attention_only are mutually exclusive");
    }
    auto& a = config.ablation;
    a.add_positional_encoding = a.add_positional_encoding || flags.add_positional_encoding;
    a.remove_ffn = a.remove_ffn || flags.remove_ffn;
    a.remove_residual = a.remove_residual || flags.remove_residual;
    a.remove_dropout = a.remove_dropout || flags.remove_dropout;
    a.mamba_only = a.mamba_only || flags.mamba_only;
    a.attention_only = a.attention_only || flags.attention_only;
    if (a.remove_dropout) config.dropout = 0.0;
    config.validate();
    return config;
}

/// One repetition of the stack: Mamba blocks, attention, FFN, each followed by a post-norm.
/// A removed FFN keeps its norm, which then normalizes the attention output alone.
template <typename T>
struct EncoderGroup {
    std::vector<MambaBlockParams<T>> mamba;
    std::vector<NormParams<T>> mamba_norms;
    std::optional<AttentionParams<T>> attention;
    std::optional<NormParams<T>> attention_norm;
    std::optional<FfnParams<T>> ffn;
    NormParams<T> ffn_norm;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
class MaTrRecModel {
public:
    MaTrRecConfig config;
    EmbeddingTable<T> embedding;
    std::optional<Tensor<T>> positions;  // [N, D] learned, only with add_positional_encoding
    std::vector<EncoderGroup<T>> groups;
    std::optional<Tensor<T>> W_h;  // [D, |V|]; absent when tied to the embedding
    Tensor<T> b_h;                 // [|V|]

    /// Every learnable tensor in declaration order. Handles share storage with the model.
    std::vector<NamedTensor<T>> parameters() const {
        std::vector<NamedTensor<T>> out;
        out.push_back({"embedding.table", embedding.table});
        out.push_back({"embedding.norm.gamma", embedding.norm.gamma});
        out.push_back({"embedding.norm.beta", embedding.norm.beta});
        if (positions) out.push_back({"positions", *positions});
        for (std::size_t l = 0; l < groups.size(); ++l) {
            const auto& g = groups[l];
            const std::string pre = "layer" + std::to_string(l) + ".";
            for (std::size_t m = 0; m < g.mamba.size(); ++m) {
                const auto& p = g.mamba[m];
                const std::string mp = pre + "mamba" + std::to_string(m) + ".";
                out.push_back({mp + "in_proj", p.in_proj});
                out.push_back({mp + "conv_kernel", p.conv_kernel});
                out.push_back({mp + "conv_bias", p.conv_bias});
                out.push_back({mp + "x_proj", p.x_proj});
                out.push_back({mp + "dt_proj", p.dt_proj});
                out.push_back({mp + "dt_bias", p.dt_bias});
                out.push_back({mp + "A_log", p.A_log});
                out.push_back({mp + "D_skip", p.D_skip});
                out.push_back({mp + "out_proj", p.out_proj});
                out.push_back({mp + "norm.gamma", g.mamba_norms[m].gamma});
                out.push_back({mp + "norm.beta", g.mamba_norms[m].beta});
            }
            if (g.attention) {
                out.push_back({pre + "attention.W_Q", g.attention->W_Q});
                out.push_back({pre + "attention.W_K", g.attention->W_K});
                out.push_back({pre + "attention.W_V", g.attention->W_V});
                out.push_back({pre + "attention.W_O", g.attention->W_O});
                out.push_back({pre + "attention.norm.gamma", g.attention_norm->gamma});
                out.push_back({pre + "attention.norm.beta", g.attention_norm->beta});
            }
            if (g.ffn) {
                out.push_back({pre + "ffn.W1", g.ffn->W1});
                out.push_back({pre + "ffn.b1", g.ffn->b1});
                out.push_back({pre + "ffn.W2", g.ffn->W2});
                out.push_back({pre + "ffn.b2", g.ffn->b2});
            }
            out.push_back({pre + "ffn.norm.gamma", g.ffn_norm.gamma});
            out.push_back({pre + "ffn.norm.beta", g.ffn_norm.beta});
        }
        if (W_h) out.push_back({"head.W_h", *W_h});
        out.push_back({"head.b_h", b_h});
        return out;
    }

    void zero_grad() const {
        for (auto& p : parameters()) {
            auto t = p.tensor;
            t.zero_grad();
        }
    }

    /// Hidden states [B,L,D] for right-padded ids [B,L].
    Tensor<T> encode(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                     std::span<const std::size_t> lengths, const ForwardContext& ctx) const {
        if (len > config.max_len) {
            throw DimensionError("forward: sequence length " + std::to_string(len) + " exceeds max_len " +
                                 std::to_string(config.max_len));
        }
        const double p = config.dropout;
        const bool residual = !config.ablation.remove_residual;
        auto x = layers::embed_sequence(ids, batch, len, embedding, p, ctx);
        if (positions) x = ops::add(x, ops::slice_first(*positions, 0, len));
        for (const auto& g : groups) {
            for (std::size_t m = 0; m < g.mamba.size(); ++m) {
                x = layers::residual_norm(x, layers::mamba_block(x, g.mamba[m]), g.mamba_norms[m], p, ctx, residual);
            }
            if (g.attention) {
                x = layers::residual_norm(x, layers::multi_head_attention(x, *g.attention, lengths),
                                          *g.attention_norm, p, ctx, residual);
            }
            if (g.ffn) {
                x = layers::residual_norm(x, layers::feed_forward(x, *g.ffn), g.ffn_norm, p, ctx, residual);
            } else {
                x = ops::layer_norm(x, g.ffn_norm.gamma, g.ffn_norm.beta);
            }
        }
        return x;
    }

    /// Output projection [D, |V|]; column c scores item c+1.
    Tensor<T> head_weight() const {
        if (W_h) return *W_h;
        std::vector<std::int32_t> ids(config.vocab_size);
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(i + 1);
        auto rows = ops::embedding_lookup(embedding.table, std::span<const std::int32_t>(ids), Shape{ids.size()});
        return ops::transpose_last2(rows);
    }

    Tensor<T> scores(const Tensor<T>& hidden) const { return layers::predict_scores(hidden, head_weight(), b_h); }

    /// Logits [B,L,|V|] at every position.
    Tensor<T> forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                      std::span<const std::size_t> lengths, const ForwardContext& ctx) const {
        return scores(encode(ids, batch, len, lengths, ctx));
    }

    /// Logits [B,|V|] at each row's last real position.
    Tensor<T> forward_last(std::span<const std::int32_t> ids, std::size_t batch, std::size_t len,
                           std::span<const std::size_t> lengths, const ForwardContext& ctx) const {
        auto h = encode(ids, batch, len, lengths, ctx);
        std::vector<std::size_t> last(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            if (lengths[b] == 0) throw ContractError("forward_last: empty sequence");
            last[b] = lengths[b] - 1;
        }
        return scores(ops::gather_positions(h, std::span<const std::size_t>(last)));
    }

    /// Deep copy of every parameter value (for best-epoch snapshots).
    std::vector<std::vector<T>> snapshot() const {
        std::vector<std::vector<T>> out;
        for (const auto& p : parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
        return out;
    }

    void restore(const std::vector<std::vector<T>>& snap) const {
        auto params = parameters();
        if (snap.size() != params.size()) throw ContractError("restore: snapshot does not match model");
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto dst = params[i].tensor.mutable_values();
            if (dst.size() != snap[i].size()) throw ContractError("restore: tensor size mismatch");
            std::copy(snap[i].begin(), snap[i].end(), dst.begin());
        }
    }
};

/// Deterministic initialization from config.seed; removed sublayers allocate nothing.
template <typename T>
MaTrRecModel<T> build_model(const MaTrRecConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const std::size_t d = config.d_model;
    MaTrRecModel<T> m;
    m.config = config;
    m.embedding = layers::init_embedding<T>(config.vocab_size, d, rng);
    if (config.ablation.add_positional_encoding) {
        m.positions = layers::normal_param<T>({config.max_len, d}, 0.02, rng);
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        EncoderGroup<T> g;
        if (!config.ablation.attention_only) {
            for (std::size_t b = 0; b < config.n_mamba_blocks; ++b) {
                g.mamba.push_back(layers::init_mamba<T>(d, config.d_state, config.conv_kernel, config.expand, rng));
                g.mamba_norms.push_back(layers::init_norm<T>(d));
            }
        }
        if (!config.ablation.mamba_only) {
            g.attention = layers::init_attention<T>(d, config.n_heads, rng);
            g.attention_norm = layers::init_norm<T>(d);
        }
        if (!config.ablation.remove_ffn) g.ffn = layers::init_ffn<T>(d, rng);
        g.ffn_norm = layers::init_norm<T>(d);
        m.groups.push_back(std::move(g));
    }
    if (!config.tie_weights) m.W_h = layers::normal_param<T>({d, config.vocab_size}, 0.02, rng);
    m.b_h = Tensor<T>::zeros({config.vocab_size}, true);
    return m;
}

/// Learnable scalars, excluding the frozen padding row of the embedding.
template <typename T>
std::size_t param_count(const MaTrRecModel<T>& model) {
    std::size_t n = 0;
    for (const auto& p : model.parameters()) n += p.tensor.numel();
    return n - model.config.d_model;
}

}  // namespace matrrec

#endif  // MATRREC_MODEL_HPP
