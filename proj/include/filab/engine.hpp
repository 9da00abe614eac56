#pragma once

#include "filab/model.hpp"
#include "filab/ops.hpp"
#include "filab/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace filab {

// ---------------------------------------------------------------------------
// Node references
// ---------------------------------------------------------------------------

enum class NodeKind { resid_pre, resid_post, head_output, head_query, head_key, head_value, attn_pattern, mlp_out, logits };

inline std::string to_string(NodeKind k) {
    switch (k) {
        case NodeKind::resid_pre: return "resid-pre";
        case NodeKind::resid_post: return "resid-post";
        case NodeKind::head_output: return "head-output";
        case NodeKind::head_query: return "head-query";
        case NodeKind::head_key: return "head-key";
        case NodeKind::head_value: return "head-value";
        case NodeKind::attn_pattern: return "attn-pattern";
        case NodeKind::mlp_out: return "mlp-out";
        case NodeKind::logits: return "logits";
    }
    return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
    for (auto k : {NodeKind::resid_pre, NodeKind::resid_post, NodeKind::head_output, NodeKind::head_query, NodeKind::head_key,
                   NodeKind::head_value, NodeKind::attn_pattern, NodeKind::mlp_out, NodeKind::logits}) {
        if (to_string(k) == s) return k;
    }
    throw FormatError("unknown node kind '" + s + "'");
}

/// True for kinds that address a single attention head.
inline bool is_head_kind(NodeKind k) {
    return k == NodeKind::head_output || k == NodeKind::head_query || k == NodeKind::head_key || k == NodeKind::head_value ||
           k == NodeKind::attn_pattern;
}

struct PositionFilter {
    bool all = true;
    std::vector<std::size_t> positions;

    static PositionFilter every() { return {}; }
    static PositionFilter only(std::vector<std::size_t> ps) {
        std::sort(ps.begin(), ps.end());
        ps.erase(std::unique(ps.begin(), ps.end()), ps.end());
        return {false, std::move(ps)};
    }
    [[nodiscard]] bool contains(std::size_t p) const {
        return all || std::binary_search(positions.begin(), positions.end(), p);
    }
    bool operator==(const PositionFilter&) const = default;
};

struct NodeRef {
    NodeKind kind = NodeKind::logits;
    std::optional<std::size_t> layer;
    std::optional<std::size_t> head;
    PositionFilter positions;

    static NodeRef resid_pre(std::size_t l, PositionFilter p = {}) { return {NodeKind::resid_pre, l, std::nullopt, std::move(p)}; }
    static NodeRef resid_post(std::size_t l, PositionFilter p = {}) { return {NodeKind::resid_post, l, std::nullopt, std::move(p)}; }
    static NodeRef mlp_out(std::size_t l, PositionFilter p = {}) { return {NodeKind::mlp_out, l, std::nullopt, std::move(p)}; }
    static NodeRef head_site(NodeKind k, std::size_t l, std::size_t h, PositionFilter p = {}) { return {k, l, h, std::move(p)}; }
    static NodeRef head_output(std::size_t l, std::size_t h, PositionFilter p = {}) {
        return {NodeKind::head_output, l, h, std::move(p)};
    }
    static NodeRef logits(PositionFilter p = {}) { return {NodeKind::logits, std::nullopt, std::nullopt, std::move(p)}; }

    /// Same kind, layer and head (positions ignored).
    [[nodiscard]] bool same_site(const NodeRef& o) const { return kind == o.kind && layer == o.layer && head == o.head; }

    /// Topological rank used for "downstream of" checks. Within a layer:
    /// resid-pre < q/k/v < pattern < head-output < mlp-out < resid-post.
    [[nodiscard]] double order(std::size_t n_layers) const {
        if (kind == NodeKind::logits) return static_cast<double>(n_layers) * 10.0;
        double sub = 0;
        switch (kind) {
            case NodeKind::resid_pre: sub = 0; break;
            case NodeKind::head_query:
            case NodeKind::head_key:
            case NodeKind::head_value: sub = 1; break;
            case NodeKind::attn_pattern: sub = 2; break;
            case NodeKind::head_output: sub = 3; break;
            case NodeKind::mlp_out: sub = 4; break;
            case NodeKind::resid_post: sub = 5; break;
            case NodeKind::logits: break;
        }
        return static_cast<double>(*layer) * 10.0 + sub;
    }

    [[nodiscard]] std::string describe() const {
        std::string s = to_string(kind);
        if (layer) s += " L" + std::to_string(*layer);
        if (head) s += ".H" + std::to_string(*head);
        return s;
    }

    bool operator==(const NodeRef&) const = default;
};

/// Throws RangeError unless the reference is well-formed for `c`.
inline void validate_node(const NodeRef& n, const ModelConfig& c) {
    if (n.kind == NodeKind::logits) {
        if (n.layer || n.head) throw RangeError("logits node takes no layer or head");
        return;
    }
    if (!n.layer || *n.layer >= c.n_layers) {
        throw RangeError(n.describe() + ": layer out of range (n_layers=" + std::to_string(c.n_layers) + ")");
    }
    if (is_head_kind(n.kind)) {
        if (!n.head || *n.head >= c.n_heads) {
            throw RangeError(n.describe() + ": head out of range (n_heads=" + std::to_string(c.n_heads) + ")");
        }
    } else if (n.head) {
        throw RangeError(n.describe() + ": head given for a non-head node");
    }
}

/// Column width of a node's activation matrix.
inline std::size_t node_width(NodeKind k, const ModelConfig& c, std::size_t seq_len) {
    switch (k) {
        case NodeKind::resid_pre:
        case NodeKind::resid_post:
        case NodeKind::head_output:
        case NodeKind::mlp_out: return c.d_model;
        case NodeKind::head_query:
        case NodeKind::head_key:
        case NodeKind::head_value: return c.d_head;
        case NodeKind::attn_pattern: return seq_len;
        case NodeKind::logits: return c.vocab_size;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Activation cache
// ---------------------------------------------------------------------------

struct HeadCache {
    Matrix q, k, v;  // [T x d_head]
    Matrix pattern;  // [T x T], rows are query positions
    Matrix output;   // [T x d_model], already projected through the head's W_O slice
};

struct LayerCache {
    Matrix resid_pre;   // [T x d_model]
    std::vector<HeadCache> heads;
    Matrix mlp_out;     // [T x d_model]
    Matrix resid_post;  // [T x d_model]
};

struct ActivationCache {
    TokenSeq tokens;
    std::vector<LayerCache> layers;
    Matrix logits;  // [T x vocab]

    [[nodiscard]] std::size_t seq_len() const { return tokens.size(); }

    [[nodiscard]] const Matrix& at(const NodeRef& n) const {
        if (n.kind == NodeKind::logits) return logits;
        const auto& L = layers.at(*n.layer);
        switch (n.kind) {
            case NodeKind::resid_pre: return L.resid_pre;
            case NodeKind::resid_post: return L.resid_post;
            case NodeKind::mlp_out: return L.mlp_out;
            case NodeKind::head_output: return L.heads.at(*n.head).output;
            case NodeKind::head_query: return L.heads.at(*n.head).q;
            case NodeKind::head_key: return L.heads.at(*n.head).k;
            case NodeKind::head_value: return L.heads.at(*n.head).v;
            case NodeKind::attn_pattern: return L.heads.at(*n.head).pattern;
            case NodeKind::logits: break;
        }
        return logits;
    }
};

// ---------------------------------------------------------------------------
// Intervention plans
// ---------------------------------------------------------------------------

enum class DirectiveOp { freeze, replace, zero, add };

/// Replace sources either the donor cache or an explicit tensor. Explicit
/// tensors have T rows, or a single row broadcast to every filtered position.
struct Directive {
    DirectiveOp op = DirectiveOp::replace;
    NodeRef site;
    bool from_donor = true;
    Matrix tensor;
    std::vector<float> vector;
};

struct InterventionPlan {
    std::vector<Directive> directives;

    [[nodiscard]] bool empty() const { return directives.empty(); }

    InterventionPlan& replace_from_donor(NodeRef site) {
        directives.push_back({DirectiveOp::replace, std::move(site), true, {}, {}});
        return *this;
    }
    InterventionPlan& replace_with(NodeRef site, Matrix tensor) {
        directives.push_back({DirectiveOp::replace, std::move(site), false, std::move(tensor), {}});
        return *this;
    }
    InterventionPlan& zero(NodeRef site) {
        directives.push_back({DirectiveOp::zero, std::move(site), false, {}, {}});
        return *this;
    }
    InterventionPlan& add(NodeRef site, std::vector<float> v) {
        directives.push_back({DirectiveOp::add, std::move(site), false, {}, std::move(v)});
        return *this;
    }
    InterventionPlan& freeze(NodeRef site) {
        directives.push_back({DirectiveOp::freeze, std::move(site), false, {}, {}});
        return *this;
    }
    InterventionPlan& freeze(const std::vector<NodeRef>& sites) {
        for (const auto& s : sites) freeze(s);
        return *this;
    }

    [[nodiscard]] bool uses_donor() const {
        return std::any_of(directives.begin(), directives.end(),
                           [](const Directive& d) { return d.op == DirectiveOp::replace && d.from_donor; });
    }
    [[nodiscard]] bool uses_freeze() const {
        return std::any_of(directives.begin(), directives.end(), [](const Directive& d) { return d.op == DirectiveOp::freeze; });
    }
};

// Plan (de)serialization for replay.
inline nlohmann::json to_json(const NodeRef& n) {
    nlohmann::json j{{"kind", to_string(n.kind)}};
    if (n.layer) j["layer"] = *n.layer;
    if (n.head) j["head"] = *n.head;
    if (n.positions.all) {
        j["positions"] = "all";
    } else {
        j["positions"] = n.positions.positions;
    }
    return j;
}

inline NodeRef node_from_json(const nlohmann::json& j) {
    try {
        NodeRef n;
        n.kind = node_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("layer")) n.layer = j["layer"].get<std::size_t>();
        if (j.contains("head")) n.head = j["head"].get<std::size_t>();
        if (j.contains("positions") && j["positions"].is_array()) {
            n.positions = PositionFilter::only(j["positions"].get<std::vector<std::size_t>>());
        }
        return n;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("node ref: ") + e.what());
    }
}

inline nlohmann::json plan_to_json(const InterventionPlan& plan) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : plan.directives) {
        nlohmann::json j;
        j["site"] = to_json(d.site);
        switch (d.op) {
            case DirectiveOp::freeze: j["op"] = "freeze"; break;
            case DirectiveOp::zero: j["op"] = "zero"; break;
            case DirectiveOp::add:
                j["op"] = "add";
                j["vector"] = d.vector;
                break;
            case DirectiveOp::replace:
                j["op"] = "replace";
                if (d.from_donor) {
                    j["source"] = "donor";
                } else {
                    j["source"] = "tensor";
                    j["rows"] = d.tensor.rows;
                    j["cols"] = d.tensor.cols;
                    j["data"] = d.tensor.data;
                }
                break;
        }
        arr.push_back(std::move(j));
    }
    return nlohmann::json{{"directives", arr}};
}

inline InterventionPlan plan_from_json(const nlohmann::json& j) {
    InterventionPlan plan;
    try {
        for (const auto& d : j.at("directives")) {
            const auto op = d.at("op").get<std::string>();
            NodeRef site = node_from_json(d.at("site"));
            if (op == "freeze") {
                plan.freeze(site);
            } else if (op == "zero") {
                plan.zero(site);
            } else if (op == "add") {
                plan.add(site, d.at("vector").get<std::vector<float>>());
            } else if (op == "replace") {
                if (d.at("source").get<std::string>() == "donor") {
                    plan.replace_from_donor(site);
                } else {
                    Matrix t(d.at("rows").get<std::size_t>(), d.at("cols").get<std::size_t>());
                    t.data = d.at("data").get<std::vector<float>>();
                    if (t.data.size() != t.rows * t.cols) throw FormatError("plan: tensor data length mismatch");
                    plan.replace_with(site, std::move(t));
                }
            } else {
                throw FormatError("plan: unknown op '" + op + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("plan: ") + e.what());
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Checks the token sequence against the model's vocabulary and context.
inline void validate_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw RangeError("empty token sequence");
    if (tokens.size() > c.max_seq) {
        throw RangeError("sequence too long: " + std::to_string(tokens.size()) + " > max_seq " + std::to_string(c.max_seq));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
            throw RangeError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) + " out of range");
        }
    }
    if (tokens[0] != Vocab::kBos) throw RangeError("sequence must start with <bos>");
}

namespace detail {

class PlanExecutor {
public:
    PlanExecutor(const ModelConfig& c, std::size_t T, const InterventionPlan* plan, const ActivationCache* donor,
                 const ActivationCache* clean)
        : config_(c), T_(T), plan_(plan), donor_(donor), clean_(clean) {}

    void apply(NodeKind kind, std::size_t layer, std::size_t head, Matrix& value) const {
        if (!plan_ || plan_->directives.empty()) return;
        for (auto op : {DirectiveOp::freeze, DirectiveOp::replace, DirectiveOp::zero, DirectiveOp::add}) {
            for (const auto& d : plan_->directives) {
                if (d.op != op || !matches(d.site, kind, layer, head)) continue;
                execute(d, value);
            }
        }
    }

private:
    static bool matches(const NodeRef& s, NodeKind kind, std::size_t layer, std::size_t head) {
        if (s.kind != kind) return false;
        if (kind == NodeKind::logits) return true;
        if (*s.layer != layer) return false;
        return !is_head_kind(kind) || *s.head == head;
    }

    void execute(const Directive& d, Matrix& value) const {
        const auto& pf = d.site.positions;
        switch (d.op) {
            case DirectiveOp::freeze:
                copy_rows(clean_->at(d.site), value, pf);
                break;
            case DirectiveOp::replace:
                if (d.from_donor) {
                    copy_rows(donor_->at(d.site), value, pf);
                } else if (d.tensor.rows == 1) {
                    for (std::size_t t = 0; t < T_; ++t) {
                        if (pf.contains(t)) std::copy(d.tensor.data.begin(), d.tensor.data.end(), value.row(t).begin());
                    }
                } else {
                    copy_rows(d.tensor, value, pf);
                }
                break;
            case DirectiveOp::zero:
                for (std::size_t t = 0; t < T_; ++t) {
                    if (pf.contains(t)) std::fill(value.row(t).begin(), value.row(t).end(), 0.0f);
                }
                break;
            case DirectiveOp::add:
                for (std::size_t t = 0; t < T_; ++t) {
                    if (!pf.contains(t)) continue;
                    auto r = value.row(t);
                    for (std::size_t i = 0; i < r.size(); ++i) r[i] += d.vector[i];
                }
                break;
        }
    }

    void copy_rows(const Matrix& src, Matrix& dst, const PositionFilter& pf) const {
        if (pf.all) {
            dst.data = src.data;
            return;
        }
        for (std::size_t t : pf.positions) {
            std::copy(src.row(t).begin(), src.row(t).end(), dst.row(t).begin());
        }
    }

    const ModelConfig& config_;
    std::size_t T_;
    const InterventionPlan* plan_;
    const ActivationCache* donor_;
    const ActivationCache* clean_;
};

inline void validate_plan(const ModelConfig& c, std::size_t T, const InterventionPlan& plan, const ActivationCache* donor) {
    for (const auto& d : plan.directives) {
        validate_node(d.site, c);
        for (std::size_t p : d.site.positions.positions) {
            if (p >= T) {
                throw RangeError(d.site.describe() + ": position " + std::to_string(p) + " outside sequence of length " +
                                 std::to_string(T));
            }
        }
        const std::size_t width = node_width(d.site.kind, c, T);
        if (d.op == DirectiveOp::replace) {
            if (d.from_donor) {
                if (!donor) throw Error(d.site.describe() + ": replace-from-donor without a donor cache");
            } else if ((d.tensor.rows != T && d.tensor.rows != 1) || d.tensor.cols != width) {
                throw ShapeError(d.site.describe() + ": replacement tensor is [" + std::to_string(d.tensor.rows) + "x" +
                                 std::to_string(d.tensor.cols) + "], expected [" + std::to_string(T) + "x" +
                                 std::to_string(width) + "]");
            }
        }
        if (d.op == DirectiveOp::add && d.vector.size() != width) {
            throw ShapeError(d.site.describe() + ": add vector has " + std::to_string(d.vector.size()) + " entries, expected " +
                             std::to_string(width));
        }
    }
    for (const auto& a : plan.directives) {
        if (a.op != DirectiveOp::freeze) continue;
        for (const auto& b : plan.directives) {
            if (b.op == DirectiveOp::replace && a.site.same_site(b.site)) {
                throw Error("plan: freeze and replace both target " + a.site.describe());
            }
        }
    }
    if (donor && plan.uses_donor() && donor->seq_len() != T) {
        throw ShapeError("donor cache length " + std::to_string(donor->seq_len()) + " != sequence length " + std::to_string(T));
    }
}

/// The single forward implementation behind every public entry point.
inline ActivationCache run_forward(const Model& model, std::span<const TokenId> tokens, const InterventionPlan* plan,
                                   const ActivationCache* donor, const ActivationCache* clean) {
    const auto& c = model.config;
    const std::size_t T = tokens.size();
    const std::size_t D = c.d_model;
    const std::size_t Dh = c.d_head;
    const PlanExecutor exec(c, T, plan, donor, clean);

    ActivationCache cache;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.layers.resize(c.n_layers);

    Matrix resid(T, D);
    for (std::size_t t = 0; t < T; ++t) {
        const auto e = model.embed.row(static_cast<std::size_t>(tokens[t]));
        const auto p = model.pos.row(t);
        auto r = resid.row(t);
        for (std::size_t i = 0; i < D; ++i) r[i] = e[i] + p[i];
    }

    Matrix x, x2, hidden;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& W = model.layers[l];
        auto& LC = cache.layers[l];
        exec.apply(NodeKind::resid_pre, l, 0, resid);
        LC.resid_pre = resid;

        ops::norm_rows(c.norm_kind, resid, W.norm1.data, x);
        LC.heads.resize(c.n_heads);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            auto& H = LC.heads[h];
            H.q = Matrix(T, Dh);
            H.k = Matrix(T, Dh);
            H.v = Matrix(T, Dh);
            as_eigen(H.q).noalias() = as_eigen(x) * col_block(W.wq, h * Dh, Dh);
            as_eigen(H.k).noalias() = as_eigen(x) * col_block(W.wk, h * Dh, Dh);
            as_eigen(H.v).noalias() = as_eigen(x) * col_block(W.wv, h * Dh, Dh);
            exec.apply(NodeKind::head_query, l, h, H.q);
            exec.apply(NodeKind::head_key, l, h, H.k);
            exec.apply(NodeKind::head_value, l, h, H.v);
        }
        Matrix z;
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            auto& H = LC.heads[h];
            ops::causal_attention(H.q, H.k, H.pattern);
            exec.apply(NodeKind::attn_pattern, l, h, H.pattern);
            ops::apply_pattern(H.pattern, H.v, z);
            H.output = Matrix(T, D);
            as_eigen(H.output).noalias() = as_eigen(z) * row_block(W.wo, h * Dh, Dh);
            exec.apply(NodeKind::head_output, l, h, H.output);
        }
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto& out = LC.heads[h].output.data;
            for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += out[i];
        }

        ops::norm_rows(c.norm_kind, resid, W.norm2.data, x2);
        hidden = Matrix(T, c.d_mlp);
        as_eigen(hidden).noalias() = as_eigen(x2) * as_eigen(W.w_in);
        for (auto& v : hidden.data) v = ops::gelu(v);
        LC.mlp_out = Matrix(T, D);
        as_eigen(LC.mlp_out).noalias() = as_eigen(hidden) * as_eigen(W.w_out);
        exec.apply(NodeKind::mlp_out, l, 0, LC.mlp_out);
        for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += LC.mlp_out.data[i];

        exec.apply(NodeKind::resid_post, l, 0, resid);
        LC.resid_post = resid;
    }

    ops::norm_rows(c.norm_kind, resid, model.final_norm.data, x);
    cache.logits = Matrix(T, c.vocab_size);
    as_eigen(cache.logits).noalias() = as_eigen(x) * as_eigen(model.unembed);
    exec.apply(NodeKind::logits, 0, 0, cache.logits);
    return cache;
}

}  // namespace detail

/// Runs the model and captures every activation.
inline ActivationCache forward_cached(const Model& model, std::span<const TokenId> tokens) {
    validate_tokens(model.config, tokens);
    return detail::run_forward(model, tokens, nullptr, nullptr, nullptr);
}

/// Next-token logits at every position, [T x vocab].
inline Matrix forward(const Model& model, std::span<const TokenId> tokens) {
    return forward_cached(model, tokens).logits;
}

/// Runs the model while executing `plan`. Replace-from-donor directives read
/// `donor`; Freeze directives pin sites to their values in the clean run of
/// the same tokens (`clean`, computed here when not supplied). Within one
/// site directives apply in the order Freeze, Replace, Zero, Add.
inline ActivationCache forward_intervened(const Model& model, std::span<const TokenId> tokens, const InterventionPlan& plan,
                                          const ActivationCache* donor = nullptr, const ActivationCache* clean = nullptr) {
    validate_tokens(model.config, tokens);
    detail::validate_plan(model.config, tokens.size(), plan, donor);
    std::optional<ActivationCache> own_clean;
    if (plan.uses_freeze()) {
        if (!clean) {
            own_clean = detail::run_forward(model, tokens, nullptr, nullptr, nullptr);
            clean = &*own_clean;
        } else if (clean->tokens.size() != tokens.size() || !std::equal(clean->tokens.begin(), clean->tokens.end(), tokens.begin())) {
            throw Error("freeze reference cache was computed on different tokens");
        }
    }
    return detail::run_forward(model, tokens, &plan, donor, clean);
}

}  // namespace filab
