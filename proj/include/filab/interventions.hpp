#pragma once

#include "filab/engine.hpp"
#include "filab/metrics.hpp"
#include "filab/parallel.hpp"
#include "filab/tasks.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace filab {

/// (layer, head) address of an attention head.
struct HeadRef {
    std::size_t layer = 0;
    std::size_t head = 0;
    auto operator<=>(const HeadRef&) const = default;
    [[nodiscard]] std::string name() const { return "H" + std::to_string(layer) + "." + std::to_string(head); }
};

inline std::vector<HeadRef> all_heads(const ModelConfig& c) {
    std::vector<HeadRef> out;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) out.push_back({l, h});
    }
    return out;
}

/// Parses "L.H" or "HL.H".
inline HeadRef parse_head(std::string s) {
    if (!s.empty() && s[0] == 'H') s.erase(0, 1);
    const auto dot = s.find('.');
    try {
        if (dot == std::string::npos || dot == 0 || dot + 1 == s.size()) throw std::invalid_argument(s);
        std::size_t used = 0;
        const auto l = std::stoul(s.substr(0, dot), &used);
        if (used != dot) throw std::invalid_argument(s);
        const auto h = std::stoul(s.substr(dot + 1), &used);
        if (used != s.size() - dot - 1) throw std::invalid_argument(s);
        return {l, h};
    } catch (const std::logic_error&) {
        throw FormatError("cannot parse head '" + s + "' (expected layer.head)");
    }
}

/// Comma-separated head list.
inline std::vector<HeadRef> parse_heads(const std::string& s) {
    std::vector<HeadRef> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto item = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!item.empty()) out.push_back(parse_head(item));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Parses "logits", "resid-pre:L", "mlp-out:L", "head-value:L.H", ...
/// All positions are selected.
inline NodeRef parse_node(const std::string& s) {
    const auto colon = s.find(':');
    const NodeKind kind = node_kind_from_string(s.substr(0, colon));
    NodeRef n;
    n.kind = kind;
    if (kind == NodeKind::logits) {
        if (colon != std::string::npos) throw FormatError("node '" + s + "': logits takes no layer");
        return n;
    }
    if (colon == std::string::npos) throw FormatError("node '" + s + "' needs a layer");
    const std::string rest = s.substr(colon + 1);
    if (is_head_kind(kind)) {
        const auto h = parse_head(rest);
        n.layer = h.layer;
        n.head = h.head;
    } else {
        try {
            std::size_t used = 0;
            n.layer = std::stoul(rest, &used);
            if (used != rest.size()) throw std::invalid_argument(rest);
        } catch (const std::logic_error&) {
            throw FormatError("node '" + s + "': bad layer");
        }
    }
    return n;
}

/// Clean runs of both prompts of a pair and their logit differences.
struct PairRuns {
    ActivationCache base;
    ActivationCache cont;
    double f_base = 0.0;
    double f_cont = 0.0;
};

inline double pair_logit_diff(const PromptPair& pair, const Matrix& logits) {
    return logit_diff(logits.row(pair.answer_pos()), pair.y_base, pair.y_cont);
}

/// Passes A and B: caches x_base and x_cont. Throws DegeneratePair when the
/// model does not separate the two prompts.
inline PairRuns run_pair(const Model& model, const PromptPair& pair) {
    if (pair.x_base.size() != pair.x_cont.size()) throw ShapeError("prompt pair sequences differ in length");
    PairRuns r;
    r.base = forward_cached(model, pair.x_base);
    r.cont = forward_cached(model, pair.x_cont);
    r.f_base = pair_logit_diff(pair, r.base.logits);
    r.f_cont = pair_logit_diff(pair, r.cont.logits);
    check_nondegenerate(r.f_cont, r.f_base);
    return r;
}

// ---------------------------------------------------------------------------
// Activation patching
// ---------------------------------------------------------------------------

/// Replaces `site` in the x_cont run wholesale from `donor` and recomputes
/// everything downstream; returns r' = 1 + r.
inline double activation_patch(const Model& model, const PromptPair& pair, const NodeRef& site, const PairRuns& runs,
                               const ActivationCache& donor) {
    check_nondegenerate(runs.f_cont, runs.f_base);
    InterventionPlan plan;
    plan.replace_from_donor(site);
    const auto patched = forward_intervened(model, pair.x_cont, plan, &donor);
    return activation_patch_ratio(pair_logit_diff(pair, patched.logits), runs.f_cont, runs.f_base);
}

/// Activation patch sourced from the x_base run.
inline double activation_patch(const Model& model, const PromptPair& pair, const NodeRef& site, const PairRuns& runs) {
    return activation_patch(model, pair, site, runs, runs.base);
}

inline double activation_patch(const Model& model, const PromptPair& pair, const NodeRef& site) {
    const auto runs = run_pair(model, pair);
    return activation_patch(model, pair, site, runs);
}

// ---------------------------------------------------------------------------
// Path patching
// ---------------------------------------------------------------------------

enum class MlpHandling {
    strict,   // MLP outputs frozen to their clean x_cont values in pass C
    relaxed,  // MLPs recomputed in pass C
};

struct PathPatchOptions {
    MlpHandling mlp = MlpHandling::strict;
};

namespace detail {

inline bool is_resid_kind(NodeKind k) { return k == NodeKind::resid_pre || k == NodeKind::resid_post; }

/// Receivers with an "all positions" filter are narrowed to their natural
/// position: the graded position for logits and queries; keys and values
/// keep all positions.
inline NodeRef natural_receiver(const NodeRef& receiver, std::size_t answer_pos) {
    NodeRef r = receiver;
    if (r.positions.all && (r.kind == NodeKind::logits || r.kind == NodeKind::head_query)) {
        r.positions = PositionFilter::only({answer_pos});
    }
    return r;
}

}  // namespace detail

/// Builds the pass-C plan: senders sourced from the x_base cache, every other
/// head output (and, under strict handling, every MLP output) frozen to its
/// x_cont value. A residual-stream sender is a cut through the whole graph,
/// so components above it are recomputed rather than frozen.
inline InterventionPlan path_patch_sender_plan(const ModelConfig& c, const std::vector<NodeRef>& senders, const PathPatchOptions& opts) {
    InterventionPlan plan;
    double cut = 1e300;
    for (const auto& s : senders) {
        validate_node(s, c);
        plan.replace_from_donor(s);
        if (detail::is_resid_kind(s.kind)) cut = std::min(cut, s.order(c.n_layers));
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto node = NodeRef::head_output(l, h);
            if (node.order(c.n_layers) > cut) continue;
            const bool is_sender = std::any_of(senders.begin(), senders.end(), [&](const NodeRef& s) {
                return is_head_kind(s.kind) && *s.layer == l && *s.head == h;
            });
            if (!is_sender) plan.freeze(node);
        }
        if (opts.mlp == MlpHandling::strict) {
            const auto node = NodeRef::mlp_out(l);
            if (node.order(c.n_layers) > cut) continue;
            const bool is_sender = std::any_of(senders.begin(), senders.end(), [&](const NodeRef& s) { return s.same_site(node); });
            if (!is_sender) plan.freeze(node);
        }
    }
    return plan;
}

/// Activation recorded at the receiver in pass C.
inline Matrix path_patch_receiver_value(const Model& model, const PromptPair& pair, const std::vector<NodeRef>& senders,
                                        const NodeRef& receiver, const PairRuns& runs, const PathPatchOptions& opts = {}) {
    const auto& c = model.config;
    validate_node(receiver, c);
    for (const auto& s : senders) {
        validate_node(s, c);
        if (!(receiver.order(c.n_layers) > s.order(c.n_layers))) {
            throw Error("path_patch: receiver " + receiver.describe() + " is not downstream of sender " + s.describe());
        }
    }
    const auto plan = path_patch_sender_plan(c, senders, opts);
    const auto pass_c = forward_intervened(model, pair.x_cont, plan, &runs.base, &runs.cont);
    return pass_c.at(receiver);
}

/// Three-step path patching; returns the relative logit difference r.
///   pass C: rerun x_cont with senders from x_base and all other components
///           frozen; record the receiver.
///   pass D: rerun x_cont replacing only the receiver with its pass-C value.
inline double path_patch(const Model& model, const PromptPair& pair, const std::vector<NodeRef>& senders, const NodeRef& receiver,
                         const PairRuns& runs, const PathPatchOptions& opts = {}) {
    check_nondegenerate(runs.f_cont, runs.f_base);
    const NodeRef recv = detail::natural_receiver(receiver, pair.answer_pos());
    Matrix value = path_patch_receiver_value(model, pair, senders, recv, runs, opts);
    InterventionPlan pass_d;
    pass_d.replace_with(recv, std::move(value));
    const auto out = forward_intervened(model, pair.x_cont, pass_d);
    return relative_logit_diff(pair_logit_diff(pair, out.logits), runs.f_cont, runs.f_base);
}

inline double path_patch(const Model& model, const PromptPair& pair, const std::vector<NodeRef>& senders, const NodeRef& receiver,
                         const PathPatchOptions& opts = {}) {
    const auto runs = run_pair(model, pair);
    return path_patch(model, pair, senders, receiver, runs, opts);
}

// ---------------------------------------------------------------------------
// Head ablation
// ---------------------------------------------------------------------------

enum class AblationMode { instance, zero, mean };

inline std::string to_string(AblationMode m) {
    switch (m) {
        case AblationMode::instance: return "instance";
        case AblationMode::zero: return "zero";
        case AblationMode::mean: return "mean";
    }
    return "?";
}

inline AblationMode ablation_mode_from_string(const std::string& s) {
    if (s == "instance") return AblationMode::instance;
    if (s == "zero") return AblationMode::zero;
    if (s == "mean") return AblationMode::mean;
    throw FormatError("unknown ablation mode '" + s + "'");
}

/// Per-head average output at the final answer-eliciting position.
struct MeanBank {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_samples = 0;
    std::vector<std::vector<float>> means;  // [layer * n_heads + head] -> d_model

    [[nodiscard]] const std::vector<float>& mean(const HeadRef& h) const { return means.at(h.layer * n_heads + h.head); }
};

inline constexpr std::size_t kDefaultMeanBankSamples = 100;

/// Averages each head's output at `positions[i]` over the reference prompts.
inline MeanBank build_mean_bank(const Model& model, const std::vector<TokenSeq>& prompts, const std::vector<std::size_t>& positions) {
    if (prompts.empty()) throw Error("mean bank needs at least one reference prompt");
    if (prompts.size() != positions.size()) throw ShapeError("mean bank: one position per prompt required");
    const auto& c = model.config;
    MeanBank bank{c.n_layers, c.n_heads, prompts.size(), {}};
    std::vector<std::vector<double>> acc(c.n_layers * c.n_heads, std::vector<double>(c.d_model, 0.0));
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto cache = forward_cached(model, prompts[i]);
        if (positions[i] >= prompts[i].size()) throw RangeError("mean bank: position outside prompt");
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const auto row = cache.layers[l].heads[h].output.row(positions[i]);
                auto& a = acc[l * c.n_heads + h];
                for (std::size_t d = 0; d < c.d_model; ++d) a[d] += row[d];
            }
        }
    }
    for (auto& a : acc) {
        std::vector<float> m(a.size());
        for (std::size_t d = 0; d < a.size(); ++d) m[d] = static_cast<float>(a[d] / static_cast<double>(prompts.size()));
        bank.means.push_back(std::move(m));
    }
    return bank;
}

/// Mean bank over the base prompts of standard-addition pairs (final '=').
inline MeanBank build_mean_bank(const Model& model, const std::vector<PromptPair>& pairs) {
    std::vector<TokenSeq> prompts;
    std::vector<std::size_t> positions;
    for (const auto& p : pairs) {
        prompts.push_back(p.x_base);
        positions.push_back(p.positions.final_eq);
    }
    return build_mean_bank(model, prompts, positions);
}

/// What an ablation replaces head outputs with.
struct AblationReference {
    const ActivationCache* donor = nullptr;  // instance mode
    const MeanBank* bank = nullptr;          // mean mode
    std::size_t position = 0;                // mean mode: final answer-eliciting position
};

/// Directives that ablate `heads` under `mode`.
inline InterventionPlan ablation_plan(const ModelConfig& c, const std::vector<HeadRef>& heads, AblationMode mode,
                                      const AblationReference& ref) {
    InterventionPlan plan;
    for (const auto& h : heads) {
        if (h.layer >= c.n_layers || h.head >= c.n_heads) throw RangeError("ablation: head " + h.name() + " outside model");
        switch (mode) {
            case AblationMode::instance:
                if (!ref.donor) throw Error("instance ablation requires a donor cache");
                plan.replace_from_donor(NodeRef::head_output(h.layer, h.head));
                break;
            case AblationMode::zero: plan.zero(NodeRef::head_output(h.layer, h.head)); break;
            case AblationMode::mean: {
                if (!ref.bank) throw Error("mean ablation requires a mean bank");
                Matrix row(1, c.d_model);
                row.data = ref.bank->mean(h);
                plan.replace_with(NodeRef::head_output(h.layer, h.head, PositionFilter::only({ref.position})), std::move(row));
                break;
            }
        }
    }
    return plan;
}

inline ActivationCache ablate_heads_cached(const Model& model, std::span<const TokenId> tokens, const std::vector<HeadRef>& heads,
                                           AblationMode mode, const AblationReference& ref) {
    if (mode == AblationMode::instance && ref.donor && ref.donor->seq_len() != tokens.size()) {
        throw ShapeError("instance ablation: donor length differs from prompt length");
    }
    const auto plan = ablation_plan(model.config, heads, mode, ref);
    return forward_intervened(model, tokens, plan, ref.donor);
}

/// Logits with `heads` ablated: instance replaces each head's output at every
/// position from the donor run, zero zeroes it, mean replaces it at the final
/// answer-eliciting position with the bank average.
inline Matrix ablate_heads(const Model& model, std::span<const TokenId> tokens, const std::vector<HeadRef>& heads, AblationMode mode,
                           const AblationReference& ref) {
    return ablate_heads_cached(model, tokens, heads, mode, ref).logits;
}

// ---------------------------------------------------------------------------
// Vector injection
// ---------------------------------------------------------------------------

/// Adds `vector` to the residual stream entering `layer` at `position`.
inline Matrix inject_vector(const Model& model, std::span<const TokenId> tokens, std::size_t layer, std::size_t position,
                            std::vector<float> vector) {
    if (vector.size() != model.config.d_model) {
        throw ShapeError("inject_vector: vector has " + std::to_string(vector.size()) + " entries, d_model is " +
                         std::to_string(model.config.d_model));
    }
    if (position >= tokens.size()) throw RangeError("inject_vector: position outside sequence");
    InterventionPlan plan;
    plan.add(NodeRef::resid_pre(layer, PositionFilter::only({position})), std::move(vector));
    return forward_intervened(model, tokens, plan).logits;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Mean relative logit difference per head for one receiver.
struct HeadEffectMap {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::vector<double> r;  // [layer * n_heads + head]
    std::size_t n = 0;      // pairs averaged
    std::size_t skipped = 0;
    std::string receiver;

    [[nodiscard]] double at(const HeadRef& h) const { return r.at(h.layer * n_heads + h.head); }
};

/// For every head, path_patch with that head's output (all positions) as the
/// only sender. Heads that are not upstream of the receiver score 0.
/// Degenerate pairs are skipped and counted; per-pair results are reduced in
/// pair order so the map does not depend on `threads`.
inline HeadEffectMap sweep(const Model& model, const std::vector<PromptPair>& pairs, const NodeRef& receiver,
                           const PathPatchOptions& opts = {}, std::size_t threads = 1) {
    const auto& c = model.config;
    if (pairs.empty()) throw Error("sweep: no pairs");
    validate_node(receiver, c);
    const std::size_t H = c.n_layers * c.n_heads;
    std::vector<std::vector<double>> per_pair(pairs.size());
    std::vector<char> ok(pairs.size(), 0);
    parallel_for(pairs.size(), threads, [&](std::size_t i) {
        PairRuns runs;
        try {
            runs = run_pair(model, pairs[i]);
        } catch (const DegeneratePair&) {
            return;
        }
        std::vector<double> rs(H, 0.0);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const auto sender = NodeRef::head_output(l, h);
                if (!(receiver.order(c.n_layers) > sender.order(c.n_layers))) continue;
                rs[l * c.n_heads + h] = path_patch(model, pairs[i], {sender}, receiver, runs, opts);
            }
        }
        per_pair[i] = std::move(rs);
        ok[i] = 1;
    });
    HeadEffectMap map{c.n_layers, c.n_heads, std::vector<double>(H, 0.0), 0, 0, receiver.describe()};
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (!ok[i]) {
            ++map.skipped;
            continue;
        }
        ++map.n;
        for (std::size_t j = 0; j < H; ++j) map.r[j] += per_pair[i][j];
    }
    if (map.n == 0) throw DegeneratePair("sweep: every pair was degenerate (" + std::to_string(map.skipped) + " skipped)");
    for (auto& v : map.r) v /= static_cast<double>(map.n);
    return map;
}

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

/// CSV with header "layer,head,r,n".
inline void write_effects_csv(std::ostream& os, const HeadEffectMap& m) {
    os << "layer,head,r,n\n";
    for (std::size_t l = 0; l < m.n_layers; ++l) {
        for (std::size_t h = 0; h < m.n_heads; ++h) {
            os << l << ',' << h << ',' << format_real(m.r[l * m.n_heads + h]) << ',' << m.n << '\n';
        }
    }
}

inline nlohmann::json effects_to_json(const HeadEffectMap& m) {
    nlohmann::json heads = nlohmann::json::array();
    for (std::size_t l = 0; l < m.n_layers; ++l) {
        for (std::size_t h = 0; h < m.n_heads; ++h) heads.push_back({{"layer", l}, {"head", h}, {"r", m.r[l * m.n_heads + h]}});
    }
    return {{"receiver", m.receiver}, {"n", m.n}, {"skipped", m.skipped}, {"heads", heads}};
}

}  // namespace filab
