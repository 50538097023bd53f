#ifndef MATRREC_CHECKPOINT_HPP
#define MATRREC_CHECKPOINT_HPP

#include <map>

#include "matrrec/binary_io.hpp"
#include "matrrec/model.hpp"

namespace matrrec {

namespace io {
inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace io

/// Layout: magic "MTRC", u32 version, u64-prefixed header text (model config
/// key=value lines followed by caller metadata), u64 tensor count, then per
/// tensor: name, u32 rank, u64 extents, f32 values. All integers little-endian.
template <typename T>
std::string serialize_checkpoint(const MaTrRecModel<T>& model, const std::map<std::string, std::string>& meta = {}) {
    std::string out(io::kCheckpointMagic, 4);
    io::put_u32(out, io::kCheckpointVersion);
    std::string header = model.config.canonical_text();
    for (const auto& [k, v] : meta) header += "meta." + k + "=" + v + "\n";
    io::put_str(out, header);
    auto params = model.parameters();
    io::put_u64(out, params.size());
    for (const auto& p : params) {
        io::put_str(out, p.name);
        io::put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto e : p.tensor.shape()) io::put_u64(out, e);
        for (T v : p.tensor.values()) io::put_f32(out, static_cast<float>(v));
    }
    return out;
}

template <typename T>
struct LoadedCheckpoint {
    MaTrRecModel<T> model;
    std::map<std::string, std::string> meta;
};

template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(std::string_view bytes) {
    io::Reader r(bytes);
    if (r.raw(4) != std::string_view(io::kCheckpointMagic, 4)) throw ArtifactError("not a checkpoint (bad magic)");
    if (auto v = r.u32(); v != io::kCheckpointVersion) {
        throw ArtifactError("unsupported checkpoint version " + std::to_string(v));
    }
    const std::string header = r.str();
    LoadedCheckpoint<T> out{build_model<T>(MaTrRecConfig::from_canonical_text(header)), {}};
    std::istringstream hs(header);
    std::string line;
    while (std::getline(hs, line)) {
        if (line.rfind("meta.", 0) != 0) continue;
        auto eq = line.find('=');
        out.meta[line.substr(5, eq - 5)] = line.substr(eq + 1);
    }
    auto params = out.model.parameters();
    if (r.u64() != params.size()) throw ArtifactError("checkpoint tensor count does not match its config");
    for (auto& p : params) {
        if (r.str() != p.name) throw ArtifactError("checkpoint tensor order mismatch at " + p.name);
        const auto rank = r.u32();
        Shape s(rank);
        for (auto& e : s) e = r.u64();
        if (s != p.tensor.shape()) throw ArtifactError("checkpoint shape mismatch for " + p.name);
        auto dst = p.tensor.mutable_values();
        for (auto& v : dst) v = static_cast<T>(r.f32());
    }
    if (!r.done()) throw ArtifactError("trailing bytes in checkpoint");
    return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const MaTrRecModel<T>& model,
                     const std::map<std::string, std::string>& meta = {}) {
    io::write_file(path, serialize_checkpoint(model, meta));
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    return deserialize_checkpoint<T>(io::read_file(path));
}

}  // namespace matrrec

#endif  // MATRREC_CHECKPOINT_HPP
