#pragma once

#include "filab/interventions.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace filab {

enum class HeadGroup { consolidation, function_induction, previous_token, unlabeled };

inline std::string to_string(HeadGroup g) {
    switch (g) {
        case HeadGroup::consolidation: return "consolidation";
        case HeadGroup::function_induction: return "function-induction";
        case HeadGroup::previous_token: return "previous-token";
        case HeadGroup::unlabeled: return "unlabeled";
    }
    return "?";
}

inline HeadGroup head_group_from_string(const std::string& s) {
    if (s == "consolidation") return HeadGroup::consolidation;
    if (s == "function-induction") return HeadGroup::function_induction;
    if (s == "previous-token") return HeadGroup::previous_token;
    if (s == "unlabeled") return HeadGroup::unlabeled;
    throw FormatError("unknown head group '" + s + "'");
}

/// A set of attention heads with optional group labels. MLPs and embeddings
/// are never part of the knockout.
struct Circuit {
    std::set<HeadRef> heads;
    std::map<HeadRef, HeadGroup> groups;

    void add(HeadRef h, HeadGroup g = HeadGroup::unlabeled) {
        heads.insert(h);
        if (g != HeadGroup::unlabeled) groups[h] = g;
    }

    [[nodiscard]] HeadGroup group_of(const HeadRef& h) const {
        const auto it = groups.find(h);
        return it == groups.end() ? HeadGroup::unlabeled : it->second;
    }

    [[nodiscard]] std::vector<HeadRef> members(HeadGroup g) const {
        std::vector<HeadRef> out;
        for (const auto& h : heads) {
            if (group_of(h) == g) out.push_back(h);
        }
        return out;
    }

    [[nodiscard]] std::vector<HeadRef> list() const { return {heads.begin(), heads.end()}; }

    void validate(const ModelConfig& c) const {
        for (const auto& h : heads) {
            if (h.layer >= c.n_layers || h.head >= c.n_heads) throw RangeError("circuit head " + h.name() + " outside model");
        }
        for (const auto& [h, g] : groups) {
            if (!heads.count(h)) throw Error("circuit: label for " + h.name() + " which is not a member");
        }
    }

    static Circuit all_heads(const ModelConfig& c) {
        Circuit out;
        for (const auto& h : filab::all_heads(c)) out.heads.insert(h);
        return out;
    }
};

inline nlohmann::json circuit_to_json(const Circuit& c) {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : c.heads) heads.push_back({h.layer, h.head});
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [h, g] : c.groups) groups[to_string(g)].push_back({h.layer, h.head});
    return {{"heads", heads}, {"groups", groups}};
}

/// Reads {heads: [[layer, head]...], groups: {name: [[layer, head]...]}}.
/// Heads listed only under a group are added as members.
inline Circuit circuit_from_json(const nlohmann::json& j) {
    Circuit c;
    auto head_of = [](const nlohmann::json& e) {
        if (!e.is_array() || e.size() != 2) throw FormatError("circuit: head entries are [layer, head]");
        return HeadRef{e[0].get<std::size_t>(), e[1].get<std::size_t>()};
    };
    try {
        if (j.contains("heads")) {
            for (const auto& e : j.at("heads")) c.heads.insert(head_of(e));
        }
        if (j.contains("groups")) {
            for (const auto& [name, list] : j.at("groups").items()) {
                const auto g = head_group_from_string(name);
                for (const auto& e : list) {
                    const auto h = head_of(e);
                    const auto prev = c.groups.find(h);
                    if (prev != c.groups.end() && prev->second != g) throw FormatError("circuit: " + h.name() + " has two groups");
                    c.add(h, g);
                }
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("circuit: ") + e.what());
    }
    return c;
}

inline Circuit load_circuit(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path + "'");
    try {
        return circuit_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

/// How heads outside a circuit are knocked out. Instance mode takes each
/// pair's x_base run as the donor; mean mode needs a bank.
struct KnockoutPolicy {
    AblationMode mode = AblationMode::instance;
    const MeanBank* bank = nullptr;

    [[nodiscard]] std::string reference() const {
        switch (mode) {
            case AblationMode::instance: return "x_base";
            case AblationMode::zero: return "none";
            case AblationMode::mean: return "mean-bank";
        }
        return "?";
    }

    void validate() const {
        if (mode == AblationMode::mean && !bank) throw Error("knockout policy: mean mode requires a mean bank");
    }
};

/// A pair with its clean runs cached.
struct PairContext {
    const PromptPair* pair = nullptr;
    PairRuns runs;
};

/// Runs every pair; degenerate ones are dropped and counted.
inline std::vector<PairContext> prepare_pairs(const Model& model, const std::vector<PromptPair>& pairs, std::size_t& skipped,
                                              std::size_t threads = 1) {
    std::vector<std::optional<PairContext>> slots(pairs.size());
    parallel_for(pairs.size(), threads, [&](std::size_t i) {
        try {
            slots[i] = PairContext{&pairs[i], run_pair(model, pairs[i])};
        } catch (const DegeneratePair&) {
        }
    });
    std::vector<PairContext> out;
    skipped = 0;
    for (auto& s : slots) {
        if (s) {
            out.push_back(std::move(*s));
        } else {
            ++skipped;
        }
    }
    return out;
}

/// F on x_cont with `ablated` knocked out under `policy`. An empty set is a
/// plain forward pass.
inline double knockout_F(const Model& model, const PairContext& ctx, const std::vector<HeadRef>& ablated, const KnockoutPolicy& policy) {
    const auto& p = *ctx.pair;
    if (ablated.empty()) return pair_logit_diff(p, forward(model, p.x_cont));
    AblationReference ref;
    ref.donor = &ctx.runs.base;
    ref.bank = policy.bank;
    ref.position = p.positions.final_eq;
    return pair_logit_diff(p, ablate_heads(model, p.x_cont, ablated, policy.mode, ref));
}

inline std::vector<HeadRef> complement(const ModelConfig& c, const std::set<HeadRef>& keep) {
    std::vector<HeadRef> out;
    for (const auto& h : all_heads(c)) {
        if (!keep.count(h)) out.push_back(h);
    }
    return out;
}

/// F(C \ K, x_cont): heads outside C, and the heads of K, knocked out.
inline double circuit_F(const Model& model, const Circuit& circuit, const PairContext& ctx, const std::set<HeadRef>& K,
                        const KnockoutPolicy& policy) {
    std::set<HeadRef> keep;
    for (const auto& h : circuit.heads) {
        if (!K.count(h)) keep.insert(h);
    }
    return knockout_F(model, ctx, complement(model.config, keep), policy);
}

/// F(C, x) for one pair on x_cont.
inline double eval_F(const Model& model, const Circuit& circuit, const PairContext& ctx, const KnockoutPolicy& policy = {}) {
    circuit.validate(model.config);
    policy.validate();
    return circuit_F(model, circuit, ctx, {}, policy);
}

/// F(C, x) on an arbitrary prompt; `donor` is the instance-mode reference.
inline double eval_F(const Model& model, const Circuit& circuit, std::span<const TokenId> tokens, TokenId y_base, TokenId y_cont,
                     const KnockoutPolicy& policy, const ActivationCache* donor, std::size_t final_eq) {
    circuit.validate(model.config);
    policy.validate();
    const auto ablated = complement(model.config, circuit.heads);
    Matrix logits;
    if (ablated.empty()) {
        logits = forward(model, tokens);
    } else {
        logits = ablate_heads(model, tokens, ablated, policy.mode, {donor, policy.bank, final_eq});
    }
    return logit_diff(logits.row(logits.rows - 1), y_base, y_cont);
}

namespace detail {

/// Mean over pairs of fn(ctx), reduced in pair order.
template <typename Fn>
double mean_over(const std::vector<PairContext>& ctxs, std::size_t threads, Fn&& fn) {
    std::vector<double> vals(ctxs.size());
    parallel_for(ctxs.size(), threads, [&](std::size_t i) { vals[i] = fn(ctxs[i]); });
    double s = 0.0;
    for (double v : vals) s += v;
    return s / static_cast<double>(ctxs.size());
}

inline std::vector<PairContext> require_pairs(const Model& model, const std::vector<PromptPair>& pairs, std::size_t& skipped,
                                              std::size_t threads) {
    if (pairs.empty()) throw Error("circuit evaluation needs at least one pair");
    auto ctxs = prepare_pairs(model, pairs, skipped, threads);
    if (ctxs.empty()) throw DegeneratePair("every pair was degenerate (" + std::to_string(skipped) + " skipped)");
    return ctxs;
}

}  // namespace detail

struct FaithfulnessReport {
    double percent = 0.0;
    double f_base = 0.0;     // mean F(M, x_base)
    double f_cont = 0.0;     // mean F(M, x_cont)
    double f_circuit = 0.0;  // mean F(C, x_cont)
    std::size_t n = 0;
    std::size_t skipped = 0;
};

/// Mean over pairs of (F(M,x_base) - F(C,x_cont)) / (F(M,x_base) - F(M,x_cont)) * 100.
inline FaithfulnessReport eval_faithfulness(const Model& model, const Circuit& circuit, const std::vector<PromptPair>& pairs,
                                            const KnockoutPolicy& policy = {}, std::size_t threads = 1) {
    circuit.validate(model.config);
    policy.validate();
    FaithfulnessReport r;
    const auto ctxs = detail::require_pairs(model, pairs, r.skipped, threads);
    std::vector<double> pct(ctxs.size()), fc(ctxs.size());
    parallel_for(ctxs.size(), threads, [&](std::size_t i) {
        fc[i] = circuit_F(model, circuit, ctxs[i], {}, policy);
        pct[i] = faithfulness_percent(ctxs[i].runs.f_base, ctxs[i].runs.f_cont, fc[i]);
    });
    for (std::size_t i = 0; i < ctxs.size(); ++i) {
        r.percent += pct[i];
        r.f_circuit += fc[i];
        r.f_base += ctxs[i].runs.f_base;
        r.f_cont += ctxs[i].runs.f_cont;
    }
    r.n = ctxs.size();
    const double n = static_cast<double>(r.n);
    r.percent /= n;
    r.f_circuit /= n;
    r.f_base /= n;
    r.f_cont /= n;
    return r;
}

enum class CompletenessStrategy { random, greedy, group };

inline CompletenessStrategy completeness_strategy_from_string(const std::string& s) {
    if (s == "random") return CompletenessStrategy::random;
    if (s == "greedy") return CompletenessStrategy::greedy;
    if (s == "group") return CompletenessStrategy::group;
    throw FormatError("unknown completeness strategy '" + s + "'");
}

struct CompletenessPoint {
    std::string label;  // "empty", "random", "greedy", or a group name
    std::vector<HeadRef> K;
    double f_circuit = 0.0;  // mean F(C \ K, x_cont)
    double f_model = 0.0;    // mean F(M \ K, x_cont)
};

inline std::string describe_heads(const std::vector<HeadRef>& hs) {
    std::string s;
    for (const auto& h : hs) s += (s.empty() ? "" : " ") + h.name();
    return s.empty() ? "-" : s;
}

/// Points (F(C\K), F(M\K)) for sampled K subsets of C; K = {} is always
/// first. random: `trials` uniform random non-empty subsets. greedy: K grows
/// one head at a time by the largest |F(C\K) - F(M\K)|, `trials` steps at
/// most. group: K = every non-empty labeled group.
inline std::vector<CompletenessPoint> eval_completeness(const Model& model, const Circuit& circuit, const std::vector<PromptPair>& pairs,
                                                        CompletenessStrategy strategy, std::size_t trials, std::uint64_t seed,
                                                        const KnockoutPolicy& policy = {}, std::size_t threads = 1,
                                                        std::size_t* skipped_out = nullptr) {
    circuit.validate(model.config);
    policy.validate();
    if (trials < 1) throw Error("completeness: trials must be >= 1");
    if (circuit.heads.empty()) throw Error("completeness: empty circuit");
    std::size_t skipped = 0;
    const auto ctxs = detail::require_pairs(model, pairs, skipped, threads);
    if (skipped_out) *skipped_out = skipped;

    auto point = [&](std::string label, std::vector<HeadRef> K) {
        const std::set<HeadRef> ks(K.begin(), K.end());
        CompletenessPoint p{std::move(label), std::move(K), 0.0, 0.0};
        p.f_circuit = detail::mean_over(ctxs, threads, [&](const PairContext& c) { return circuit_F(model, circuit, c, ks, policy); });
        p.f_model = detail::mean_over(ctxs, threads, [&](const PairContext& c) { return knockout_F(model, c, p.K, policy); });
        return p;
    };

    std::vector<CompletenessPoint> out;
    out.push_back(point("empty", {}));
    const auto members = circuit.list();
    switch (strategy) {
        case CompletenessStrategy::random: {
            Rng rng(seed);
            for (std::size_t t = 0; t < trials; ++t) {
                std::vector<HeadRef> K;
                while (K.empty()) {
                    for (const auto& h : members) {
                        if (uniform_int(rng, 0, 1)) K.push_back(h);
                    }
                }
                out.push_back(point("random", std::move(K)));
            }
            break;
        }
        case CompletenessStrategy::greedy: {
            std::vector<HeadRef> K;
            for (std::size_t t = 0; t < trials && K.size() < members.size(); ++t) {
                std::optional<CompletenessPoint> best;
                for (const auto& h : members) {
                    if (std::find(K.begin(), K.end(), h) != K.end()) continue;
                    auto cand = K;
                    cand.push_back(h);
                    auto p = point("greedy", std::move(cand));
                    if (!best || std::abs(p.f_circuit - p.f_model) > std::abs(best->f_circuit - best->f_model)) best = std::move(p);
                }
                K = best->K;
                out.push_back(std::move(*best));
            }
            break;
        }
        case CompletenessStrategy::group: {
            for (auto g : {HeadGroup::previous_token, HeadGroup::function_induction, HeadGroup::consolidation}) {
                auto K = circuit.members(g);
                if (!K.empty()) out.push_back(point(to_string(g), std::move(K)));
            }
            break;
        }
    }
    return out;
}

struct MinimalityResult {
    HeadRef v;
    std::vector<HeadRef> K;
    double score = 0.0;          // |F(C\(K u {v})) - F(C\K)|, pair means
    double score_percent = 0.0;  // relative to |F(M,x_cont) - F(M,x_base)|
    std::size_t evaluated = 0;   // candidate K sets scored
};

inline constexpr std::size_t kMinimalityCap = 4;

/// Greedy search for the K in C \ {v} that makes v matter most. The search
/// scores K = {} first, then grows K one head at a time by best immediate
/// score up to kMinimalityCap heads or `budget` scored sets.
inline MinimalityResult eval_minimality(const Model& model, const Circuit& circuit, const std::vector<PromptPair>& pairs, const HeadRef& v,
                                        std::size_t budget, const KnockoutPolicy& policy = {}, std::size_t threads = 1,
                                        std::size_t cap = kMinimalityCap) {
    circuit.validate(model.config);
    policy.validate();
    if (!circuit.heads.count(v)) throw Error("minimality: " + v.name() + " is not in the circuit");
    if (budget < 1) throw Error("minimality: budget must be >= 1");
    std::size_t skipped = 0;
    const auto ctxs = detail::require_pairs(model, pairs, skipped, threads);
    double gap = 0.0;
    for (const auto& c : ctxs) gap += c.runs.f_cont - c.runs.f_base;
    gap = std::abs(gap / static_cast<double>(ctxs.size()));

    auto score = [&](const std::set<HeadRef>& K) {
        auto Kv = K;
        Kv.insert(v);
        const double with = detail::mean_over(ctxs, threads, [&](const PairContext& c) { return circuit_F(model, circuit, c, Kv, policy); });
        const double without = detail::mean_over(ctxs, threads, [&](const PairContext& c) { return circuit_F(model, circuit, c, K, policy); });
        return std::abs(with - without);
    };

    MinimalityResult best{v, {}, score({}), 0.0, 1};
    std::set<HeadRef> K;
    std::vector<HeadRef> pool;
    for (const auto& h : circuit.heads) {
        if (!(h == v)) pool.push_back(h);
    }
    while (K.size() < cap && best.evaluated < budget) {
        std::optional<std::pair<double, HeadRef>> step;
        for (const auto& h : pool) {
            if (K.count(h) || best.evaluated >= budget) continue;
            auto cand = K;
            cand.insert(h);
            const double s = score(cand);
            ++best.evaluated;
            if (!step || s > step->first) step = {s, h};
        }
        if (!step) break;
        K.insert(step->second);
        if (step->first > best.score) {
            best.score = step->first;
            best.K.assign(K.begin(), K.end());
        }
    }
    best.score_percent = gap > 0.0 ? best.score / gap * 100.0 : 0.0;
    return best;
}

inline nlohmann::json to_json(const FaithfulnessReport& r) {
    return {{"faithfulness_percent", r.percent}, {"f_base", r.f_base}, {"f_cont", r.f_cont},
            {"f_circuit", r.f_circuit},          {"n", r.n},           {"skipped", r.skipped}};
}

}  // namespace filab
