#pragma once

#include "filab/tensor.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace filab {

enum class NormKind { rms, layer };
enum class PosKind { learned_absolute };

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_model = 64;
    std::size_t d_head = 16;
    std::size_t d_mlp = 256;
    std::size_t vocab_size = 76;
    std::size_t max_seq = 128;
    NormKind norm_kind = NormKind::rms;
    PosKind pos_kind = PosKind::learned_absolute;

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1) {
            throw ShapeError("model config: all counts must be >= 1");
        }
        if (max_seq < 2) {
            throw ShapeError("model config: max_seq must be >= 2");
        }
        if (n_heads * d_head != d_model) {
            throw ShapeError("model config: n_heads * d_head must equal d_model");
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"d_model", c.d_model},
                       {"d_head", c.d_head},
                       {"d_mlp", c.d_mlp},
                       {"vocab_size", c.vocab_size},
                       {"max_seq", c.max_seq},
                       {"norm_kind", c.norm_kind == NormKind::rms ? "rms" : "layer"},
                       {"pos_kind", "learned-absolute"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.d_head = j.at("d_head").get<std::size_t>();
        c.d_mlp = j.at("d_mlp").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq = j.at("max_seq").get<std::size_t>();
        const auto norm = j.value("norm_kind", std::string("rms"));
        if (norm == "rms") {
            c.norm_kind = NormKind::rms;
        } else if (norm == "layer") {
            c.norm_kind = NormKind::layer;
        } else {
            throw FormatError("model config: unknown norm_kind '" + norm + "'");
        }
        if (j.value("pos_kind", std::string("learned-absolute")) != "learned-absolute") {
            throw FormatError("model config: unsupported pos_kind");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

/// Attention and MLP weights of one layer. Per-head projections are stored as
/// column blocks (query/key/value) or row blocks (output) of full-width
/// matrices so head h owns columns [h*d_head, (h+1)*d_head).
struct LayerWeights {
    Matrix wq;     // [d_model x d_model]
    Matrix wk;     // [d_model x d_model]
    Matrix wv;     // [d_model x d_model]
    Matrix wo;     // [d_model x d_model]
    Matrix w_in;   // [d_model x d_mlp]
    Matrix w_out;  // [d_mlp x d_model]
    Matrix norm1;  // [1 x d_model]
    Matrix norm2;  // [1 x d_model]

    bool operator==(const LayerWeights&) const = default;
};

struct Model {
    ModelConfig config;
    Matrix embed;       // [vocab x d_model]
    Matrix pos;         // [max_seq x d_model]
    std::vector<LayerWeights> layers;
    Matrix final_norm;  // [1 x d_model]
    Matrix unembed;     // [d_model x vocab]

    bool operator==(const Model&) const = default;
};

/// Visits every trainable tensor with its canonical name. Order is fixed and
/// is the order optimizer state is laid out in.
template <typename ModelT, typename Fn>
void for_each_param(ModelT& m, Fn&& fn) {
    fn(std::string("embed"), m.embed);
    fn(std::string("pos"), m.pos);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& L = m.layers[l];
        const std::string p = "L" + std::to_string(l) + ".";
        fn(p + "attn.q", L.wq);
        fn(p + "attn.k", L.wk);
        fn(p + "attn.v", L.wv);
        fn(p + "attn.o", L.wo);
        fn(p + "mlp.in", L.w_in);
        fn(p + "mlp.out", L.w_out);
        fn(p + "norm1", L.norm1);
        fn(p + "norm2", L.norm2);
    }
    fn(std::string("final_norm"), m.final_norm);
    fn(std::string("unembed"), m.unembed);
}

/// Every tensor zero, norm gains included.
inline Model zero_model(const ModelConfig& c) {
    c.validate();
    Model m;
    m.config = c;
    m.embed = Matrix(c.vocab_size, c.d_model);
    m.pos = Matrix(c.max_seq, c.d_model);
    m.layers.resize(c.n_layers);
    for (auto& L : m.layers) {
        L.wq = Matrix(c.d_model, c.d_model);
        L.wk = Matrix(c.d_model, c.d_model);
        L.wv = Matrix(c.d_model, c.d_model);
        L.wo = Matrix(c.d_model, c.d_model);
        L.w_in = Matrix(c.d_model, c.d_mlp);
        L.w_out = Matrix(c.d_mlp, c.d_model);
        L.norm1 = Matrix(1, c.d_model);
        L.norm2 = Matrix(1, c.d_model);
    }
    m.final_norm = Matrix(1, c.d_model);
    m.unembed = Matrix(c.d_model, c.vocab_size);
    return m;
}

/// Gaussian initialization (std 0.02, residual-output projections scaled by
/// 1/sqrt(2 n_layers)); norm gains start at one.
inline Model init_model(const ModelConfig& c, std::uint64_t seed) {
    Model m = zero_model(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    const float base = 0.02f;
    const float resid_scale = base / std::sqrt(2.0f * static_cast<float>(c.n_layers));
    auto fill = [&](Matrix& t, float sd) {
        for (auto& x : t.data) {
            x = sd * normal(rng);
        }
    };
    fill(m.embed, base);
    fill(m.pos, base);
    for (auto& L : m.layers) {
        fill(L.wq, base);
        fill(L.wk, base);
        fill(L.wv, base);
        fill(L.wo, resid_scale);
        fill(L.w_in, base);
        fill(L.w_out, resid_scale);
        L.norm1.fill(1.0f);
        L.norm2.fill(1.0f);
    }
    m.final_norm.fill(1.0f);
    fill(m.unembed, base);
    return m;
}

namespace detail {

inline void check_shape(const std::string& name, const Matrix& t, std::size_t r, std::size_t c) {
    if (t.rows != r || t.cols != c) {
        throw ShapeError("tensor '" + name + "' has shape [" + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                         "], expected [" + std::to_string(r) + "x" + std::to_string(c) + "]");
    }
}

}  // namespace detail

/// Checks every tensor shape against the config and that all entries are finite.
inline void validate_model(const Model& m) {
    const auto& c = m.config;
    c.validate();
    if (m.layers.size() != c.n_layers) {
        throw ShapeError("model has " + std::to_string(m.layers.size()) + " layers, config says " +
                         std::to_string(c.n_layers));
    }
    detail::check_shape("embed", m.embed, c.vocab_size, c.d_model);
    detail::check_shape("pos", m.pos, c.max_seq, c.d_model);
    detail::check_shape("final_norm", m.final_norm, 1, c.d_model);
    detail::check_shape("unembed", m.unembed, c.d_model, c.vocab_size);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = m.layers[l];
        const std::string p = "L" + std::to_string(l) + ".";
        detail::check_shape(p + "attn.q", L.wq, c.d_model, c.d_model);
        detail::check_shape(p + "attn.k", L.wk, c.d_model, c.d_model);
        detail::check_shape(p + "attn.v", L.wv, c.d_model, c.d_model);
        detail::check_shape(p + "attn.o", L.wo, c.d_model, c.d_model);
        detail::check_shape(p + "mlp.in", L.w_in, c.d_model, c.d_mlp);
        detail::check_shape(p + "mlp.out", L.w_out, c.d_mlp, c.d_model);
        detail::check_shape(p + "norm1", L.norm1, 1, c.d_model);
        detail::check_shape(p + "norm2", L.norm2, 1, c.d_model);
    }
    for_each_param(m, [](const std::string& name, const Matrix& t) {
        if (!all_finite(t.data)) {
            throw FormatError("tensor '" + name + "' contains a non-finite value");
        }
    });
}

// ---------------------------------------------------------------------------
// FILAB1 weight files
//
//   "FILAB1"                      6 bytes magic
//   u32 n, n bytes                JSON model config
//   repeated until EOF:
//     u32 n, n bytes              tensor name
//     u32 rank, rank x u32 dims
//     prod(dims) x f32            little-endian values
//
// All integers little-endian. Per-head attention tensors are stored split:
// L{l}.attn.{q|k|v}.h{h} is [d_model x d_head], L{l}.attn.o.h{h} is
// [d_head x d_model]. Norm gains are rank 1.
// ---------------------------------------------------------------------------

inline constexpr char kWeightMagic[] = "FILAB1";

namespace detail {

struct NamedTensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

inline std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
    }
    return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    v = to_le(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline bool read_u32(std::istream& is, std::uint32_t& v) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        return false;
    }
    v = to_le(v);
    return true;
}

inline void write_tensor(std::ostream& os, const std::string& name, const std::vector<std::uint32_t>& dims,
                         const std::vector<float>& values) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) {
        write_u32(os, d);
    }
    for (float f : values) {
        write_u32(os, std::bit_cast<std::uint32_t>(f));
    }
}

inline std::vector<float> column_slice(const Matrix& m, std::size_t c0, std::size_t n) {
    std::vector<float> out;
    out.reserve(m.rows * n);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = c0; c < c0 + n; ++c) {
            out.push_back(m(r, c));
        }
    }
    return out;
}

inline std::vector<float> row_slice(const Matrix& m, std::size_t r0, std::size_t n) {
    return {m.data.begin() + static_cast<std::ptrdiff_t>(r0 * m.cols),
            m.data.begin() + static_cast<std::ptrdiff_t>((r0 + n) * m.cols)};
}

}  // namespace detail

inline void write_model(std::ostream& os, const Model& m) {
    validate_model(m);
    const auto& c = m.config;
    os.write(kWeightMagic, 6);
    const std::string cfg = nlohmann::json(c).dump();
    detail::write_u32(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    using u32 = std::uint32_t;
    const auto D = static_cast<u32>(c.d_model);
    const auto Dh = static_cast<u32>(c.d_head);
    detail::write_tensor(os, "embed", {static_cast<u32>(c.vocab_size), D}, m.embed.data);
    detail::write_tensor(os, "unembed", {D, static_cast<u32>(c.vocab_size)}, m.unembed.data);
    detail::write_tensor(os, "pos", {static_cast<u32>(c.max_seq), D}, m.pos.data);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = m.layers[l];
        const std::string p = "L" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const std::string hs = ".h" + std::to_string(h);
            detail::write_tensor(os, p + "attn.q" + hs, {D, Dh}, detail::column_slice(L.wq, h * c.d_head, c.d_head));
            detail::write_tensor(os, p + "attn.k" + hs, {D, Dh}, detail::column_slice(L.wk, h * c.d_head, c.d_head));
            detail::write_tensor(os, p + "attn.v" + hs, {D, Dh}, detail::column_slice(L.wv, h * c.d_head, c.d_head));
            detail::write_tensor(os, p + "attn.o" + hs, {Dh, D}, detail::row_slice(L.wo, h * c.d_head, c.d_head));
        }
        detail::write_tensor(os, p + "mlp.in", {D, static_cast<u32>(c.d_mlp)}, L.w_in.data);
        detail::write_tensor(os, p + "mlp.out", {static_cast<u32>(c.d_mlp), D}, L.w_out.data);
        detail::write_tensor(os, p + "norm1", {D}, L.norm1.data);
        detail::write_tensor(os, p + "norm2", {D}, L.norm2.data);
    }
    detail::write_tensor(os, "final_norm", {D}, m.final_norm.data);
}

inline void save_model(const Model& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw Error("cannot open '" + path + "' for writing");
    }
    write_model(os, m);
    if (!os) {
        throw Error("write to '" + path + "' failed");
    }
}

inline Model read_model(std::istream& is) {
    char magic[6];
    if (!is.read(magic, 6) || std::memcmp(magic, kWeightMagic, 6) != 0) {
        throw FormatError("weight file: bad magic (expected FILAB1)");
    }
    std::uint32_t n = 0;
    if (!detail::read_u32(is, n) || n > (1u << 20)) {
        throw FormatError("weight file: malformed config header");
    }
    std::string cfg_text(n, '\0');
    if (!is.read(cfg_text.data(), n)) {
        throw FormatError("weight file: truncated config header");
    }
    ModelConfig cfg;
    try {
        cfg = nlohmann::json::parse(cfg_text).get<ModelConfig>();
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("weight file: config is not valid JSON: ") + e.what());
    }
    cfg.validate();

    std::map<std::string, detail::NamedTensor> tensors;
    while (true) {
        std::uint32_t name_len = 0;
        if (!detail::read_u32(is, name_len)) {
            break;
        }
        if (name_len == 0 || name_len > 256) {
            throw FormatError("weight file: malformed tensor name length");
        }
        std::string name(name_len, '\0');
        std::uint32_t rank = 0;
        if (!is.read(name.data(), name_len) || !detail::read_u32(is, rank) || rank == 0 || rank > 4) {
            throw FormatError("weight file: malformed tensor header near '" + name + "'");
        }
        detail::NamedTensor t;
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d = 0;
            if (!detail::read_u32(is, d)) {
                throw FormatError("weight file: truncated dims for '" + name + "'");
            }
            t.dims.push_back(d);
            count *= d;
        }
        if (count > (1ull << 28)) {
            throw FormatError("weight file: tensor '" + name + "' is implausibly large");
        }
        t.values.resize(count);
        for (auto& v : t.values) {
            std::uint32_t bits = 0;
            if (!detail::read_u32(is, bits)) {
                throw ShapeError("weight file: tensor '" + name + "' byte length is shorter than its dims");
            }
            v = std::bit_cast<float>(bits);
        }
        if (!tensors.emplace(name, std::move(t)).second) {
            throw FormatError("weight file: duplicate tensor '" + name + "'");
        }
    }

    Model m = zero_model(cfg);
    auto take = [&](const std::string& name, std::vector<std::uint32_t> dims) -> std::vector<float> {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw FormatError("weight file: missing tensor '" + name + "'");
        }
        if (it->second.dims != dims) {
            std::string got, want;
            for (auto d : it->second.dims) got += std::to_string(d) + " ";
            for (auto d : dims) want += std::to_string(d) + " ";
            throw ShapeError("weight file: tensor '" + name + "' has dims [ " + got + "], config requires [ " + want +
                             "]");
        }
        if (!all_finite(it->second.values)) {
            throw FormatError("weight file: tensor '" + name + "' contains a non-finite value");
        }
        auto values = std::move(it->second.values);
        tensors.erase(it);
        return values;
    };

    using u32 = std::uint32_t;
    const auto D = static_cast<u32>(cfg.d_model);
    const auto Dh = static_cast<u32>(cfg.d_head);
    m.embed.data = take("embed", {static_cast<u32>(cfg.vocab_size), D});
    m.unembed.data = take("unembed", {D, static_cast<u32>(cfg.vocab_size)});
    m.pos.data = take("pos", {static_cast<u32>(cfg.max_seq), D});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& L = m.layers[l];
        const std::string p = "L" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::string hs = ".h" + std::to_string(h);
            const std::size_t c0 = h * cfg.d_head;
            for (auto [mat, tag] : {std::pair{&L.wq, "q"}, std::pair{&L.wk, "k"}, std::pair{&L.wv, "v"}}) {
                auto vals = take(p + "attn." + tag + hs, {D, Dh});
                for (std::size_t r = 0; r < cfg.d_model; ++r) {
                    for (std::size_t c = 0; c < cfg.d_head; ++c) {
                        (*mat)(r, c0 + c) = vals[r * cfg.d_head + c];
                    }
                }
            }
            auto o = take(p + "attn.o" + hs, {Dh, D});
            std::copy(o.begin(), o.end(), L.wo.data.begin() + static_cast<std::ptrdiff_t>(c0 * cfg.d_model));
        }
        L.w_in.data = take(p + "mlp.in", {D, static_cast<u32>(cfg.d_mlp)});
        L.w_out.data = take(p + "mlp.out", {static_cast<u32>(cfg.d_mlp), D});
        L.norm1.data = take(p + "norm1", {D});
        L.norm2.data = take(p + "norm2", {D});
    }
    m.final_norm.data = take("final_norm", {D});
    if (!tensors.empty()) {
        throw FormatError("weight file: unexpected tensor '" + tensors.begin()->first + "'");
    }
    return m;
}

inline Model load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error("cannot open weight file '" + path + "'");
    }
    return read_model(is);
}

/// FNV-1a over the serialized weight file; used in run manifests.
inline std::string model_checksum(const Model& m) {
    std::ostringstream os(std::ios::binary);
    write_model(os, m);
    const std::string bytes = os.str();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace filab
