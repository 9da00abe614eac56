#pragma once

#include "filab/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace filab {

enum class TaskKind { off_by_k, caesar, base_k_add, shifted_mcqa };
enum class Constraint { answer_disjoint, none, answer_overlap };

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::off_by_k: return "off-by-k";
        case TaskKind::caesar: return "caesar-rot-k";
        case TaskKind::base_k_add: return "base-k-add";
        case TaskKind::shifted_mcqa: return "shifted-mcqa";
    }
    return "?";
}

inline std::string to_string(Constraint c) {
    switch (c) {
        case Constraint::answer_disjoint: return "answer-disjoint";
        case Constraint::none: return "none";
        case Constraint::answer_overlap: return "answer-overlap";
    }
    return "?";
}

inline Constraint constraint_from_string(const std::string& s) {
    if (s == "answer-disjoint") return Constraint::answer_disjoint;
    if (s == "none") return Constraint::none;
    if (s == "answer-overlap") return Constraint::answer_overlap;
    throw FormatError("unknown constraint '" + s + "'");
}

/// Task names accepted on the command line: "off-by-k" (k from --k),
/// "off-by-<k>", "caesar", "base-k", "base-<radix>", "shifted-mcqa".
/// Returns the kind and, when the name carries it, k.
inline std::pair<TaskKind, std::optional<int>> parse_task_name(const std::string& s) {
    auto number = [&](const std::string& t) -> int {
        try {
            std::size_t used = 0;
            const int v = std::stoi(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::logic_error&) {
            throw FormatError("bad task name '" + s + "'");
        }
    };
    if (s == "off-by-k") return {TaskKind::off_by_k, std::nullopt};
    if (s.rfind("off-by-", 0) == 0) return {TaskKind::off_by_k, number(s.substr(7))};
    if (s == "caesar" || s == "caesar-rot-k") return {TaskKind::caesar, std::nullopt};
    if (s.rfind("caesar-rot-", 0) == 0) return {TaskKind::caesar, number(s.substr(11))};
    if (s == "base-k" || s == "base-k-add") return {TaskKind::base_k_add, std::nullopt};
    if (s.rfind("base-", 0) == 0) return {TaskKind::base_k_add, number(s.substr(5))};
    if (s == "shifted-mcqa" || s == "mcqa") return {TaskKind::shifted_mcqa, std::nullopt};
    throw FormatError("unknown task '" + s + "'");
}

inline PromptStyle style_of(TaskKind k) {
    switch (k) {
        case TaskKind::off_by_k:
        case TaskKind::base_k_add: return PromptStyle::addition;
        case TaskKind::caesar: return PromptStyle::cipher;
        case TaskKind::shifted_mcqa: return PromptStyle::mcqa;
    }
    return PromptStyle::addition;
}

/// One task family instance. `k` is the offset (off-by-k, caesar, mcqa
/// shift) or the radix (base-k). Operand range applies to off-by-k only.
struct TaskSpec {
    TaskKind kind = TaskKind::off_by_k;
    int k = 1;
    int lo = 0;
    int hi = 9;
    std::size_t n_shots = 4;
    Constraint constraint = Constraint::answer_disjoint;
    std::uint64_t seed = 0;

    void validate() const {
        switch (kind) {
            case TaskKind::off_by_k:
                if (lo < 0 || hi < lo) throw Error("off-by-k: operand range must satisfy 0 <= lo <= hi");
                break;
            case TaskKind::base_k_add:
                if (k < 6 || k > 9) throw Error("base-k: k must be in {6,7,8,9}");
                break;
            case TaskKind::caesar:
                if (k < -25 || k > 25) throw Error("caesar: k must be in [-25, 25]");
                break;
            case TaskKind::shifted_mcqa: break;
        }
    }

    bool operator==(const TaskSpec&) const = default;
};

inline nlohmann::json to_json(const TaskSpec& s) {
    return {{"kind", to_string(s.kind)}, {"k", s.k},
            {"lo", s.lo},
            {"hi", s.hi},
            {"n_shots", s.n_shots},
            {"constraint", to_string(s.constraint)},
            {"seed", s.seed}};
}

/// Input outside a task's domain.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Constraint could not be met within the attempt cap.
class ConstraintUnsatisfiable : public Error {
public:
    ConstraintUnsatisfiable(const std::string& what, std::size_t attempts)
        : Error(what + " (gave up after " + std::to_string(attempts) + " attempts)"), attempts(attempts) {}
    std::size_t attempts;
};

// ---------------------------------------------------------------------------
// Deterministic sampling helpers
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Seed for the i-th item of a batch sampled from `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) { return splitmix64(seed ^ splitmix64(index + 1)); }

using Rng = std::mt19937_64;

/// Uniform integer in [lo, hi]; rejection sampling so results do not depend
/// on the standard library's distribution implementation.
inline int uniform_int(Rng& rng, int lo, int hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = Rng::max() - (Rng::max() % range);
    std::uint64_t r = 0;
    do {
        r = rng();
    } while (r >= limit);
    return lo + static_cast<int>(r % range);
}

/// Uniform real in [0, 1).
inline double uniform_real(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

namespace detail {

inline int parse_uint(const std::string& s, const std::string& what) {
    if (s.empty() || s.size() > 6) throw DomainError(what + ": '" + s + "' is not a number");
    int v = 0;
    for (char ch : s) {
        if (ch < '0' || ch > '9') throw DomainError(what + ": '" + s + "' is not a number");
        v = v * 10 + (ch - '0');
    }
    return v;
}

inline std::pair<std::string, std::string> split_plus(const std::string& input) {
    const auto plus = input.find('+');
    if (plus == std::string::npos) throw DomainError("addition input '" + input + "' has no '+'");
    return {input.substr(0, plus), input.substr(plus + 1)};
}

inline int from_radix(const std::string& digits, int radix) {
    int v = 0;
    for (char ch : digits) {
        const int d = ch - '0';
        if (d < 0 || d >= radix) {
            throw DomainError("'" + digits + "' is not a base-" + std::to_string(radix) + " numeral");
        }
        v = v * radix + d;
    }
    return v;
}

inline std::string to_radix(int v, int radix) {
    if (v == 0) return "0";
    std::string s;
    while (v > 0) {
        s.insert(s.begin(), static_cast<char>('0' + v % radix));
        v /= radix;
    }
    return s;
}

inline char shift_letter(char c, int k) {
    if (c >= 'a' && c <= 'z') return static_cast<char>('a' + ((c - 'a' + k) % 26 + 26) % 26);
    if (c >= 'A' && c <= 'Z') return static_cast<char>('A' + ((c - 'A' + k) % 26 + 26) % 26);
    throw DomainError(std::string("caesar input '") + c + "' is not a letter");
}

}  // namespace detail

/// Ground truth for every task family.
///   off-by-k:     "a+b"            -> a+b+k (must be non-negative)
///   caesar:       single letter    -> letter shifted by k, cyclic, case kept
///   base-k-add:   "25+16" (radix k) -> radix-k sum written in radix k
///   shifted-mcqa: answer letter    -> letter shifted by k, cyclic over n_choices
inline std::string oracle(TaskKind kind, int k, const std::string& input, int n_choices = 4) {
    switch (kind) {
        case TaskKind::off_by_k: {
            auto [a, b] = detail::split_plus(input);
            const int v = detail::parse_uint(a, "off-by-k") + detail::parse_uint(b, "off-by-k") + k;
            if (v < 0) throw DomainError("off-by-k: answer " + std::to_string(v) + " is negative");
            return std::to_string(v);
        }
        case TaskKind::caesar: {
            if (input.size() != 1) throw DomainError("caesar: input must be a single letter");
            return std::string(1, detail::shift_letter(input[0], k));
        }
        case TaskKind::base_k_add: {
            if (k < 2 || k > 10) throw DomainError("base-k: radix must be in [2, 10]");
            auto [a, b] = detail::split_plus(input);
            detail::parse_uint(a, "base-k");
            detail::parse_uint(b, "base-k");
            return detail::to_radix(detail::from_radix(a, k) + detail::from_radix(b, k), k);
        }
        case TaskKind::shifted_mcqa: {
            if (n_choices < 1 || n_choices > 26) throw DomainError("mcqa: choice count must be in [1, 26]");
            if (input.size() != 1 || input[0] < 'A' || input[0] >= 'A' + n_choices) {
                throw DomainError("mcqa: '" + input + "' is not one of the " + std::to_string(n_choices) + " choice letters");
            }
            const int idx = ((input[0] - 'A' + k) % n_choices + n_choices) % n_choices;
            return std::string(1, static_cast<char>('A' + idx));
        }
    }
    return {};
}

/// Base answer (the standard task) for the same input.
inline std::string base_oracle(TaskKind kind, const std::string& input) {
    if (kind == TaskKind::base_k_add) {
        auto [a, b] = detail::split_plus(input);
        return std::to_string(detail::parse_uint(a, "base-10") + detail::parse_uint(b, "base-10"));
    }
    return oracle(kind, 0, input);
}

struct Base8Result {
    int answer = 0;  // base-8 digits read as a decimal-looking integer, e.g. 50
    int case_id = 1;
    bool operator==(const Base8Result&) const = default;
};

/// Two-digit base-8 addition as "base-10 addition, then adjust":
///   case 1: unit digits sum < 8       -> base-10 sum unchanged
///   case 2: 8 <= unit sum < 10        -> unit digit +2 (mod 10), tens +1
///   case 3: unit sum >= 10            -> unit digit +2
/// Operands are two-digit base-8 numerals whose sum has two digits in both
/// bases.
inline Base8Result base8_adjusted(int a, int b) {
    const auto check = [](int v) {
        if (v < 10 || v > 77 || v % 10 >= 8 || v / 10 >= 8) {
            throw DomainError("base-8: " + std::to_string(v) + " is not a two-digit base-8 numeral");
        }
    };
    check(a);
    check(b);
    const int sum10 = a + b;
    const int sum8 = detail::from_radix(std::to_string(a), 8) + detail::from_radix(std::to_string(b), 8);
    if (sum10 >= 100 || sum8 >= 64) {
        throw DomainError("base-8: " + std::to_string(a) + "+" + std::to_string(b) + " does not have a two-digit sum in both bases");
    }
    int c0 = sum10 % 10;
    int c1 = sum10 / 10;
    const int unit = a % 10 + b % 10;
    int case_id = 1;
    if (unit >= 8 && unit < 10) {
        c0 = (c0 + 2) % 10;
        c1 += 1;
        case_id = 2;
    } else if (unit >= 10) {
        c0 += 2;
        case_id = 3;
    }
    return {c1 * 10 + c0, case_id};
}

// ---------------------------------------------------------------------------
// Multiple-choice records
// ---------------------------------------------------------------------------

struct McqaRecord {
    std::string question;
    std::vector<std::string> choices;
    char answer = 'A';
    bool operator==(const McqaRecord&) const = default;
};

/// Question block as rendered before "Answer:".
inline std::string format_mcqa(const McqaRecord& r) {
    std::string s = r.question;
    for (std::size_t i = 0; i < r.choices.size(); ++i) {
        s += "\n(";
        s += static_cast<char>('A' + i);
        s += ") " + r.choices[i];
    }
    return s;
}

namespace detail {

/// Splits one CSV record (RFC 4180 quoting). Returns false at end of input.
inline bool read_csv_record(std::istream& is, std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    char ch = 0;
    while (is.get(ch)) {
        any = true;
        if (in_quotes) {
            if (ch == '"') {
                if (is.peek() == '"') {
                    field += '"';
                    is.get();
                } else {
                    in_quotes = false;
                }
            } else {
                field += ch;
            }
        } else if (ch == '"') {
            in_quotes = true;
        } else if (ch == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (ch == '\n') {
            break;
        } else if (ch != '\r') {
            field += ch;
        }
    }
    if (!any) return false;
    fields.push_back(std::move(field));
    return true;
}

}  // namespace detail

/// Reads multiple-choice questions from CSV rows
///   question,choice A,choice B,choice C,choice D,answer letter
/// without a header (the layout of the public MMLU csv files). Fields may be
/// double-quoted; blank lines are skipped.
inline std::vector<McqaRecord> load_mcqa(std::istream& is, const std::string& source = "<stream>") {
    std::vector<McqaRecord> out;
    std::vector<std::string> fields;
    std::size_t row = 0;
    while (detail::read_csv_record(is, fields)) {
        ++row;
        if (fields.size() == 1 && fields[0].empty()) continue;
        if (fields.size() != 6) {
            throw FormatError(source + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                              " columns, expected 6 (question, 4 choices, answer)");
        }
        McqaRecord r;
        r.question = fields[0];
        r.choices.assign(fields.begin() + 1, fields.begin() + 5);
        const auto& a = fields[5];
        if (a.size() != 1 || a[0] < 'A' || a[0] > 'D') {
            throw FormatError(source + ": row " + std::to_string(row) + " answer '" + a + "' is not one of A-D");
        }
        r.answer = a[0];
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<McqaRecord> load_mcqa(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path + "'");
    return load_mcqa(is, path);
}

/// Small arithmetic question bank ("What is 3+4?") used when no external
/// file is supplied.
inline std::vector<McqaRecord> synthetic_mcqa_bank(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<McqaRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int a = uniform_int(rng, 0, 9);
        const int b = uniform_int(rng, 0, 9);
        McqaRecord r;
        r.question = "What is " + std::to_string(a) + "+" + std::to_string(b) + "?";
        const int correct = uniform_int(rng, 0, 3);
        std::vector<int> used{a + b};
        r.choices.resize(4);
        for (int c = 0; c < 4; ++c) {
            if (c == correct) {
                r.choices[static_cast<std::size_t>(c)] = std::to_string(a + b);
                continue;
            }
            int v = 0;
            do {
                v = uniform_int(rng, 0, 18);
            } while (std::find(used.begin(), used.end(), v) != used.end());
            used.push_back(v);
            r.choices[static_cast<std::size_t>(c)] = std::to_string(v);
        }
        r.answer = static_cast<char>('A' + correct);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt pairs
// ---------------------------------------------------------------------------

struct TaskInstance {
    std::string input;        // text rendered before the answer-eliciting token
    std::string base_answer;  // standard-task answer
    std::string cont_answer;  // counterfactual answer
};

/// A base/contrast prompt pair. Both sequences end with the answer prefix
/// shared by the two answers, so the last position predicts the graded
/// token (the first answer token at which base and contrast differ).
struct PromptPair {
    TokenSeq x_base;
    TokenSeq x_cont;
    TokenId y_base = 0;
    TokenId y_cont = 0;
    PositionMap positions;
    TaskSpec spec;
    std::vector<TaskInstance> shots;
    TaskInstance query;
    std::string base_text;  // rendered stems (end at the answer-eliciting token)
    std::string cont_text;

    /// Position whose next-token logits are graded.
    [[nodiscard]] std::size_t answer_pos() const { return x_cont.size() - 1; }
};

namespace detail {

inline std::string mcqa_suffix(TaskKind k) { return k == TaskKind::shifted_mcqa ? ")" : ""; }

struct Sampler {
    const TaskSpec& spec;
    Rng& rng;
    const std::vector<McqaRecord>* bank;

    TaskInstance draw() {
        TaskInstance inst;
        switch (spec.kind) {
            case TaskKind::off_by_k: {
                while (true) {
                    const int a = uniform_int(rng, spec.lo, spec.hi);
                    const int b = uniform_int(rng, spec.lo, spec.hi);
                    if (a + b + spec.k < 0) continue;
                    inst.input = std::to_string(a) + "+" + std::to_string(b);
                    break;
                }
                break;
            }
            case TaskKind::caesar: {
                const int idx = uniform_int(rng, 0, 51);
                inst.input = std::string(1, static_cast<char>(idx < 26 ? 'a' + idx : 'A' + idx - 26));
                break;
            }
            case TaskKind::base_k_add: {
                const int r = spec.k;
                while (true) {
                    const int a = uniform_int(rng, 1, r - 1) * 10 + uniform_int(rng, 0, r - 1);
                    const int b = uniform_int(rng, 1, r - 1) * 10 + uniform_int(rng, 0, r - 1);
                    const int sum_k = from_radix(std::to_string(a), r) + from_radix(std::to_string(b), r);
                    if (a + b >= 100 || sum_k >= r * r) continue;
                    inst.input = std::to_string(a) + "+" + std::to_string(b);
                    break;
                }
                break;
            }
            case TaskKind::shifted_mcqa: {
                const auto& rec = (*bank)[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(bank->size()) - 1))];
                inst.input = format_mcqa(rec);
                inst.base_answer = std::string(1, rec.answer);
                inst.cont_answer = oracle(TaskKind::shifted_mcqa, spec.k, inst.base_answer, static_cast<int>(rec.choices.size()));
                return inst;
            }
        }
        inst.base_answer = base_oracle(spec.kind, inst.input);
        inst.cont_answer = oracle(spec.kind, spec.k, inst.input);
        return inst;
    }
};

}  // namespace detail

/// Attempt cap for constraint rejection sampling.
inline constexpr std::size_t kMaxSampleAttempts = 10000;

/// Independent check of a pair's answer constraint (used by tests and by
/// sample_task's own postcondition).
inline bool satisfies_constraint(const std::vector<TaskInstance>& shots, const TaskInstance& query, Constraint c) {
    bool any_equal = false;
    for (const auto& s : shots) {
        if (s.cont_answer == query.cont_answer || s.base_answer == query.base_answer) any_equal = true;
    }
    switch (c) {
        case Constraint::answer_disjoint: return !any_equal;
        case Constraint::answer_overlap: return any_equal;
        case Constraint::none: return true;
    }
    return true;
}

/// Builds both token sequences from already-sampled instances.
inline PromptPair build_pair(const TaskSpec& spec, std::vector<TaskInstance> shots, TaskInstance query, const Vocab& vocab = default_vocab()) {
    const PromptStyle style = style_of(spec.kind);
    std::vector<PromptExample> base_ex, cont_ex;
    for (const auto& s : shots) {
        base_ex.push_back({s.input, s.base_answer});
        cont_ex.push_back({s.input, s.cont_answer});
    }
    base_ex.push_back({query.input, ""});
    cont_ex.push_back({query.input, ""});
    const auto base = render_prompt(base_ex, style);
    const auto cont = render_prompt(cont_ex, style);

    // Shared answer prefix: format prefix plus any leading answer characters
    // both answers agree on (multi-digit base-k answers).
    std::size_t common = 0;
    while (common < query.base_answer.size() && common < query.cont_answer.size() &&
           query.base_answer[common] == query.cont_answer[common]) {
        ++common;
    }
    if (common == query.base_answer.size() || common == query.cont_answer.size()) {
        throw Error("degenerate pair: base answer '" + query.base_answer + "' and contrast answer '" + query.cont_answer +
                    "' have no differing graded token");
    }
    if (spec.kind == TaskKind::off_by_k && common > 0) {
        throw Error("degenerate pair: off-by-k answers share their first digit");
    }
    const std::string prefix = answer_prefix(style) + query.base_answer.substr(0, common);

    PromptPair p;
    p.spec = spec;
    p.base_text = base.text;
    p.cont_text = cont.text;
    p.x_base = encode(vocab, base.text + prefix);
    p.x_cont = encode(vocab, cont.text + prefix);
    if (p.x_base.size() != p.x_cont.size()) {
        throw Error("misaligned pair: shot answers differ in length between base and contrast");
    }
    p.y_base = vocab.id(query.base_answer[common]);
    p.y_cont = vocab.id(query.cont_answer[common]);
    p.positions = cont.positions;
    p.shots = std::move(shots);
    p.query = std::move(query);
    return p;
}

/// Samples one base/contrast pair satisfying `spec.constraint`. Shots that
/// violate the constraint, or whose two answers differ in length, are
/// redrawn individually; the query is redrawn
/// when its base and contrast answers cannot be told apart at the graded
/// token. Throws ConstraintUnsatisfiable after kMaxSampleAttempts draws.
inline PromptPair sample_task(const TaskSpec& spec, Rng& rng, const std::vector<McqaRecord>* mcqa_bank = nullptr) {
    spec.validate();
    const bool degenerate_k = spec.k == 0 || (spec.kind == TaskKind::caesar && spec.k % 26 == 0) ||
                              (spec.kind == TaskKind::shifted_mcqa && spec.k % 4 == 0);
    if (spec.kind != TaskKind::base_k_add && degenerate_k) {
        throw Error("degenerate task: k=" + std::to_string(spec.k) + " makes y_base equal y_cont");
    }
    if (spec.kind == TaskKind::shifted_mcqa && (!mcqa_bank || mcqa_bank->empty())) {
        throw Error("shifted-mcqa requires a question bank");
    }
    detail::Sampler sampler{spec, rng, mcqa_bank};
    std::size_t attempts = 0;
    auto bump = [&](const char* what) {
        if (++attempts > kMaxSampleAttempts) throw ConstraintUnsatisfiable(std::string("sample_task: ") + what, attempts - 1);
    };

    TaskInstance query;
    while (true) {
        bump("no query with distinguishable answers");
        query = sampler.draw();
        std::size_t common = 0;
        while (common < query.base_answer.size() && common < query.cont_answer.size() &&
               query.base_answer[common] == query.cont_answer[common]) {
            ++common;
        }
        const bool same = common == query.base_answer.size() || common == query.cont_answer.size();
        if (same || (spec.kind == TaskKind::off_by_k && common > 0)) continue;
        // An overlapping shot must repeat one query answer with equal-length answers.
        if (spec.constraint == Constraint::answer_overlap && query.base_answer.size() != query.cont_answer.size()) continue;
        break;
    }
    auto clashes = [&](const TaskInstance& s) {
        return s.cont_answer == query.cont_answer || s.base_answer == query.base_answer;
    };
    std::vector<TaskInstance> shots;
    shots.reserve(spec.n_shots);
    while (shots.size() < spec.n_shots) {
        bump("cannot avoid the query answer");
        auto s = sampler.draw();
        if (s.base_answer.size() != s.cont_answer.size()) continue;  // keeps x_base and x_cont aligned
        if (spec.constraint == Constraint::answer_disjoint && clashes(s)) continue;
        shots.push_back(std::move(s));
    }
    if (spec.constraint == Constraint::answer_overlap) {
        if (spec.n_shots == 0) throw ConstraintUnsatisfiable("answer-overlap needs at least one shot", 0);
        const bool has = std::any_of(shots.begin(), shots.end(), clashes);
        if (!has) {
            const auto slot = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(spec.n_shots) - 1));
            while (true) {
                bump("no shot shares the query answer");
                auto s = sampler.draw();
                if (s.base_answer.size() == s.cont_answer.size() && clashes(s)) {
                    shots[slot] = std::move(s);
                    break;
                }
            }
        }
    }
    return build_pair(spec, std::move(shots), std::move(query));
}

/// `n` pairs with per-item seeds derived from spec.seed.
inline std::vector<PromptPair> sample_suite(const TaskSpec& spec, std::size_t n, const std::vector<McqaRecord>* bank = nullptr) {
    std::vector<PromptPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(spec.seed, i));
        out.push_back(sample_task(spec, rng, bank));
    }
    return out;
}

/// JSONL line {x_base, x_cont, y_base, y_cont, meta}; prompts are text
/// without the leading <bos>.
inline nlohmann::json pair_to_json(const PromptPair& p, const Vocab& vocab = default_vocab()) {
    nlohmann::json meta = to_json(p.spec);
    meta["query_input"] = p.query.input;
    meta["base_answer"] = p.query.base_answer;
    meta["cont_answer"] = p.query.cont_answer;
    meta["final_eq"] = p.positions.final_eq;
    meta["answer_pos"] = p.answer_pos();
    return {{"x_base", decode(vocab, p.x_base)},
            {"x_cont", decode(vocab, p.x_cont)},
            {"y_base", vocab.symbol(p.y_base)},
            {"y_cont", vocab.symbol(p.y_cont)},
            {"meta", meta}};
}

}  // namespace filab
