#pragma once

#include "filab/circuits.hpp"
#include "filab/interventions.hpp"
#include "filab/trainer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <ostream>
#include <string>
#include <vector>

namespace filab {

// ---------------------------------------------------------------------------
// Logit lens
// ---------------------------------------------------------------------------

/// logits[l][i]: candidate i decoded from resid-post of layer l.
struct LensResult {
    std::vector<TokenId> candidates;
    std::size_t position = 0;
    std::vector<std::vector<float>> logits;
};

/// Decodes resid-post of every layer at `position` through the final norm
/// and the unembedding. The last layer reproduces the model's logits.
inline LensResult logit_lens(const Model& model, const ActivationCache& cache, const std::vector<TokenId>& candidates,
                             std::size_t position) {
    const auto& c = model.config;
    if (cache.layers.size() != c.n_layers) throw ShapeError("logit_lens: cache does not match the model");
    if (position >= cache.seq_len()) throw RangeError("logit_lens: position outside the cached run");
    for (auto t : candidates) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) throw RangeError("logit_lens: candidate token " + std::to_string(t) + " not in vocab");
    }
    LensResult out{candidates, position, {}};
    Matrix x(1, c.d_model), y;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto row = cache.layers[l].resid_post.row(position);
        std::copy(row.begin(), row.end(), x.data.begin());
        ops::norm_rows(c.norm_kind, x, model.final_norm.data, y);
        std::vector<float> lg;
        for (auto t : candidates) {
            double s = 0.0;
            for (std::size_t d = 0; d < c.d_model; ++d) s += static_cast<double>(y.data[d]) * model.unembed(d, static_cast<std::size_t>(t));
            lg.push_back(static_cast<float>(s));
        }
        out.logits.push_back(std::move(lg));
    }
    return out;
}

/// One JSONL line per (layer, token): {"layer", "token", "logit"}.
inline void write_lens_jsonl(std::ostream& os, const LensResult& r, const Vocab& vocab = default_vocab()) {
    for (std::size_t l = 0; l < r.logits.size(); ++l) {
        for (std::size_t i = 0; i < r.candidates.size(); ++i) {
            os << nlohmann::json{{"layer", l}, {"token", vocab.symbol(r.candidates[i])}, {"logit", r.logits[l][i]}}.dump() << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Attention signatures
// ---------------------------------------------------------------------------

struct HeadSignature {
    HeadRef head;
    double prev_token_score = 0.0;     // answer digit -> its '='
    double fi_score = 0.0;             // final '=' -> all answer digits
    double consolidation_score = 0.0;  // current token and <bos>
};

/// Attention-mass signatures from a cached run. Answer spans use their first
/// token.
inline std::vector<HeadSignature> head_pattern_scores(const ActivationCache& cache, const PositionMap& pm) {
    if (pm.shots.empty()) throw Error("head_pattern_scores: prompt has no answered examples");
    const std::size_t T = cache.seq_len();
    if (pm.final_eq >= T) throw RangeError("head_pattern_scores: position map does not fit the cached run");
    for (const auto& s : pm.shots) {
        if (s.answer.empty() || s.answer.begin >= T || s.eq >= s.answer.begin) throw RangeError("head_pattern_scores: inconsistent shot positions");
    }
    std::vector<HeadSignature> out;
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        for (std::size_t h = 0; h < cache.layers[l].heads.size(); ++h) {
            const Matrix& P = cache.layers[l].heads[h].pattern;
            HeadSignature sig{{l, h}, 0.0, 0.0, 0.0};
            for (const auto& s : pm.shots) {
                sig.prev_token_score += P(s.answer.begin, s.eq);
                sig.fi_score += P(pm.final_eq, s.answer.begin);
            }
            sig.prev_token_score /= static_cast<double>(pm.shots.size());
            for (std::size_t t = 0; t < T; ++t) sig.consolidation_score += t == 0 ? P(0, 0) : P(t, t) + P(t, 0);
            sig.consolidation_score /= static_cast<double>(T);
            out.push_back(sig);
        }
    }
    return out;
}

/// Mean signatures over several runs.
inline std::vector<HeadSignature> mean_head_pattern_scores(const Model& model, const std::vector<PromptPair>& pairs) {
    if (pairs.empty()) throw Error("head_pattern_scores: no pairs");
    std::vector<HeadSignature> acc;
    for (const auto& p : pairs) {
        const auto sig = head_pattern_scores(forward_cached(model, p.x_cont), p.positions);
        if (acc.empty()) {
            acc = sig;
            continue;
        }
        for (std::size_t i = 0; i < sig.size(); ++i) {
            acc[i].prev_token_score += sig[i].prev_token_score;
            acc[i].fi_score += sig[i].fi_score;
            acc[i].consolidation_score += sig[i].consolidation_score;
        }
    }
    const double n = static_cast<double>(pairs.size());
    for (auto& s : acc) {
        s.prev_token_score /= n;
        s.fi_score /= n;
        s.consolidation_score /= n;
    }
    return acc;
}

struct ClassifyThresholds {
    double strong = 0.02;
    double weak = 0.01;
};

struct Classification {
    Circuit circuit;
    std::vector<HeadRef> weak;  // weak < |r| <= strong, not in the circuit
};

inline constexpr double kGroupTieEps = 1e-9;

/// Heads with |r| above the strong threshold join the circuit, labeled FI or
/// consolidation by the larger signature (ties go to FI). With value-sweep
/// effects, heads above threshold there join as previous-token when that is
/// their dominant signature.
inline Classification classify_heads(const HeadEffectMap& effects, const std::vector<HeadSignature>& sigs,
                                     const ClassifyThresholds& th = {}, const HeadEffectMap* value_effects = nullptr) {
    if (!(th.strong > 0.0) || !(th.weak > 0.0) || th.weak > th.strong) throw Error("classify_heads: thresholds must satisfy 0 < weak <= strong");
    Classification out;
    if (effects.r.empty()) return out;
    if (sigs.size() != effects.r.size()) throw ShapeError("classify_heads: signatures and effects cover different heads");
    for (std::size_t i = 0; i < effects.r.size(); ++i) {
        const auto& s = sigs[i];
        const double a = std::abs(effects.r[i]);
        if (a > th.strong) {
            const bool fi = s.fi_score + kGroupTieEps >= s.consolidation_score;
            out.circuit.add(s.head, fi ? HeadGroup::function_induction : HeadGroup::consolidation);
        } else if (a > th.weak) {
            out.weak.push_back(s.head);
        }
    }
    if (value_effects) {
        if (value_effects->r.size() != sigs.size()) throw ShapeError("classify_heads: value effects cover different heads");
        for (std::size_t i = 0; i < sigs.size(); ++i) {
            const auto& s = sigs[i];
            if (out.circuit.heads.count(s.head) || std::abs(value_effects->r[i]) <= th.strong) continue;
            const bool pt = s.prev_token_score >= std::max(s.fi_score, s.consolidation_score);
            out.circuit.add(s.head, pt ? HeadGroup::previous_token : HeadGroup::unlabeled);
            std::erase(out.weak, s.head);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Function-vector heatmaps
// ---------------------------------------------------------------------------

/// 10x10 grid; cell(x, y) = change of digit y's logit for input digit x.
struct FVGrid {
    std::array<std::array<double, 10>, 10> cell{};

    [[nodiscard]] int row_argmax(int x) const {
        const auto& r = cell[static_cast<std::size_t>(x)];
        return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
};

enum class NaivePrompt {
    identity,  // "{x-1}={x-1}\n{x}="
    addition,  // "{x-1}+0={x-1}\n{x}+0="
};

inline NaivePrompt naive_prompt_from_string(const std::string& s) {
    if (s == "identity") return NaivePrompt::identity;
    if (s == "addition") return NaivePrompt::addition;
    throw FormatError("unknown naive prompt '" + s + "'");
}

inline std::string to_string(NaivePrompt p) { return p == NaivePrompt::identity ? "identity" : "addition"; }

/// Text of the naive prompt for input digit x; x-1 wraps to 9 for x = 0.
inline std::string naive_prompt_text(NaivePrompt style, int x) {
    const std::string prev = std::to_string((x + 9) % 10);
    const std::string cur = std::to_string(x);
    if (style == NaivePrompt::identity) return prev + "=" + prev + "\n" + cur + "=";
    return prev + "+0=" + prev + "\n" + cur + "+0=";
}

/// Where a captured vector enters the naive run.
enum class FVPlacement {
    head_output,  // added to the head's own output (residual after its attention block)
    resid_pre,    // added to the residual stream entering the head's layer
};

inline FVPlacement fv_placement_from_string(const std::string& s) {
    if (s == "head-output") return FVPlacement::head_output;
    if (s == "resid-pre") return FVPlacement::resid_pre;
    throw FormatError("unknown placement '" + s + "'");
}

/// Each head's output at the final answer-eliciting position of x_cont,
/// averaged over the donor pairs.
inline std::vector<std::vector<float>> capture_head_vectors(const Model& model, const std::vector<HeadRef>& heads,
                                                            const std::vector<PromptPair>& donors) {
    if (donors.empty()) throw Error("fv_heatmap: no donor pairs");
    const auto& c = model.config;
    for (const auto& h : heads) {
        if (h.layer >= c.n_layers || h.head >= c.n_heads) throw RangeError("fv_heatmap: head " + h.name() + " outside model");
    }
    std::vector<std::vector<double>> acc(heads.size(), std::vector<double>(c.d_model, 0.0));
    for (const auto& p : donors) {
        const auto runs = run_pair(model, p);
        for (std::size_t i = 0; i < heads.size(); ++i) {
            const auto row = runs.cont.layers[heads[i].layer].heads[heads[i].head].output.row(p.positions.final_eq);
            for (std::size_t d = 0; d < c.d_model; ++d) acc[i][d] += row[d];
        }
    }
    std::vector<std::vector<float>> out;
    for (const auto& a : acc) {
        std::vector<float> v(a.size());
        for (std::size_t d = 0; d < a.size(); ++d) v[d] = static_cast<float>(a[d] / static_cast<double>(donors.size()));
        out.push_back(std::move(v));
    }
    return out;
}

/// Grid for injecting `vectors[i]` at heads[i] (all in a single run) into
/// the naive prompt of every input digit.
inline FVGrid fv_grid(const Model& model, const std::vector<HeadRef>& heads, const std::vector<std::vector<float>>& vectors,
                      NaivePrompt style, FVPlacement placement, std::size_t threads = 1) {
    if (heads.size() != vectors.size()) throw ShapeError("fv_grid: one vector per head required");
    const auto& vocab = default_vocab();
    FVGrid grid;
    parallel_for(10, threads, [&](std::size_t x) {
        const auto toks = encode(vocab, naive_prompt_text(style, static_cast<int>(x)));
        const std::size_t last = toks.size() - 1;
        InterventionPlan plan;
        for (std::size_t i = 0; i < heads.size(); ++i) {
            const auto pos = PositionFilter::only({last});
            const auto site = placement == FVPlacement::head_output ? NodeRef::head_output(heads[i].layer, heads[i].head, pos)
                                                                   : NodeRef::resid_pre(heads[i].layer, pos);
            plan.add(site, vectors[i]);
        }
        const Matrix before = forward(model, toks);
        const Matrix after = forward_intervened(model, toks, plan).logits;
        for (int y = 0; y < 10; ++y) {
            const auto id = static_cast<std::size_t>(vocab.digit(y));
            grid.cell[x][static_cast<std::size_t>(y)] = static_cast<double>(after(last, id)) - static_cast<double>(before(last, id));
        }
    });
    return grid;
}

struct FVHeatmap {
    std::vector<HeadRef> heads;
    std::vector<FVGrid> per_head;
    FVGrid aggregate;  // one run with every head's vector injected
};

inline FVHeatmap fv_heatmap(const Model& model, const std::vector<HeadRef>& heads, const std::vector<PromptPair>& donors,
                            NaivePrompt style = NaivePrompt::addition, FVPlacement placement = FVPlacement::head_output,
                            std::size_t threads = 1) {
    if (heads.empty()) throw Error("fv_heatmap: no heads");
    const auto vecs = capture_head_vectors(model, heads, donors);
    FVHeatmap out{heads, {}, {}};
    for (std::size_t i = 0; i < heads.size(); ++i) out.per_head.push_back(fv_grid(model, {heads[i]}, {vecs[i]}, style, placement, threads));
    out.aggregate = fv_grid(model, heads, vecs, style, placement, threads);
    return out;
}

/// CSV with header "x_input,y_output,delta".
inline void write_grid_csv(std::ostream& os, const FVGrid& g) {
    os << "x_input,y_output,delta\n";
    for (int x = 0; x < 10; ++x) {
        for (int y = 0; y < 10; ++y) os << x << ',' << y << ',' << format_real(g.cell[static_cast<std::size_t>(x)][static_cast<std::size_t>(y)]) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Base-8 error taxonomy
// ---------------------------------------------------------------------------

/// Which base-10 digits the model's answer adjusted.
enum class Adjustment { neither, c0_only, c1_only, both, spill };

inline Adjustment classify_adjustment(const std::string& answer, int base10_sum) {
    if (answer.size() != 2 || !std::isdigit(static_cast<unsigned char>(answer[0])) || !std::isdigit(static_cast<unsigned char>(answer[1]))) {
        return Adjustment::spill;
    }
    const bool c1 = answer[0] - '0' != base10_sum / 10;
    const bool c0 = answer[1] - '0' != base10_sum % 10;
    if (c0 && c1) return Adjustment::both;
    if (c0) return Adjustment::c0_only;
    if (c1) return Adjustment::c1_only;
    return Adjustment::neither;
}

struct Base8Row {
    int case_id = 1;
    std::array<std::size_t, 5> counts{};          // indexed by Adjustment
    std::array<std::size_t, 5> ablated_counts{};  // same prompts, FI set ablated
};

/// Query operand pairs stratified by adjustment case.
inline std::vector<std::pair<int, int>> base8_case_operands(int case_id) {
    std::vector<std::pair<int, int>> out;
    for (int a = 10; a <= 77; ++a) {
        for (int b = 10; b <= 77; ++b) {
            try {
                if (base8_adjusted(a, b).case_id == case_id) out.emplace_back(a, b);
            } catch (const DomainError&) {
            }
        }
    }
    return out;
}

/// `n` prompts per case: base-8 demonstrations followed by a query drawn
/// from that case. Answers are decoded greedily and compared digit-wise to
/// the base-10 sum. The ablated counts re-run with `fi_heads` ablated
/// (zero mode unless a mean bank is given).
inline std::vector<Base8Row> base8_error_table(const Model& model, std::size_t n, std::size_t shots, std::uint64_t seed,
                                               const std::vector<HeadRef>& fi_heads, AblationMode mode = AblationMode::zero,
                                               const MeanBank* bank = nullptr) {
    if (n < 1) throw Error("base8_error_table: n must be >= 1");
    if (mode == AblationMode::instance) throw Error("base8_error_table: instance ablation has no donor here; use zero or mean");
    if (mode == AblationMode::mean && !bank) throw Error("base8_error_table: mean mode requires a mean bank");
    const auto& vocab = default_vocab();
    TaskSpec spec;
    spec.kind = TaskKind::base_k_add;
    spec.k = 8;
    std::vector<Base8Row> rows;
    for (int cs = 1; cs <= 3; ++cs) {
        const auto pool = base8_case_operands(cs);
        Base8Row row;
        row.case_id = cs;
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cs) * 1000003u + i));
            detail::Sampler sampler{spec, rng, nullptr};
            std::vector<PromptExample> ex;
            for (std::size_t s = 0; s < shots; ++s) {
                const auto inst = sampler.draw();
                ex.push_back({inst.input, inst.cont_answer});
            }
            const auto [a, b] = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
            ex.push_back({std::to_string(a) + "+" + std::to_string(b), ""});
            const auto r = render_prompt(ex, PromptStyle::addition);
            const auto toks = encode(vocab, r.text);
            const std::size_t final_eq = r.positions.final_eq;
            const auto plain = greedy_answer(model_next_logits(model), toks, 3, model.config.max_seq);
            ++row.counts[static_cast<std::size_t>(classify_adjustment(plain, a + b))];
            NextLogits ablated = [&](const TokenSeq& t) {
                const Matrix lg = ablate_heads(model, t, fi_heads, mode, {nullptr, bank, final_eq});
                const auto last = lg.row(lg.rows - 1);
                return std::vector<float>(last.begin(), last.end());
            };
            const auto abl = greedy_answer(ablated, toks, 3, model.config.max_seq);
            ++row.ablated_counts[static_cast<std::size_t>(classify_adjustment(abl, a + b))];
        }
        rows.push_back(row);
    }
    return rows;
}

/// CSV with header "case,neither,c0_only,c1_only,both,spill,ablated_neither".
inline void write_base8_csv(std::ostream& os, const std::vector<Base8Row>& rows) {
    os << "case,neither,c0_only,c1_only,both,spill,ablated_neither\n";
    for (const auto& r : rows) {
        os << r.case_id;
        for (auto c : r.counts) os << ',' << c;
        os << ',' << r.ablated_counts[0] << '\n';
    }
}

}  // namespace filab
