#pragma once

#include "filab/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace filab {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

/// Input text contains a character outside the vocabulary.
class UnknownCharacter : public Error {
public:
    UnknownCharacter(std::string ch, std::size_t offset)
        : Error("unknown character '" + ch + "' at offset " + std::to_string(offset)),
          character(std::move(ch)),
          offset(offset) {}
    std::string character;
    std::size_t offset;
};

/// Fixed character-level vocabulary. Ids: <bos>=0, <pad>=1, digits 0-9 are
/// ids 2..11, then "+=\n ->():", a-z, A-Z and ".,?".
class Vocab {
public:
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kPad = 1;
    static constexpr TokenId kDigit0 = 2;

    Vocab() {
        symbols_.push_back("<bos>");
        symbols_.push_back("<pad>");
        for (char c = '0'; c <= '9'; ++c) add(c);
        for (char c : std::string_view("+=\n ->():")) add(c);
        for (char c = 'a'; c <= 'z'; ++c) add(c);
        for (char c = 'A'; c <= 'Z'; ++c) add(c);
        for (char c : std::string_view(".,?")) add(c);
    }

    [[nodiscard]] std::size_t size() const { return symbols_.size(); }

    [[nodiscard]] std::optional<TokenId> id_of(char c) const {
        const auto v = by_char_[static_cast<unsigned char>(c)];
        if (v < 0) {
            return std::nullopt;
        }
        return v;
    }

    [[nodiscard]] TokenId id(char c) const {
        auto v = id_of(c);
        if (!v) {
            throw UnknownCharacter(std::string(1, c), 0);
        }
        return *v;
    }

    [[nodiscard]] TokenId digit(int d) const {
        if (d < 0 || d > 9) {
            throw RangeError("digit out of range: " + std::to_string(d));
        }
        return kDigit0 + d;
    }

    [[nodiscard]] bool is_digit(TokenId t) const { return t >= kDigit0 && t < kDigit0 + 10; }

    /// Printable symbol for an id; special tokens render as "<bos>"/"<pad>".
    [[nodiscard]] const std::string& symbol(TokenId t) const {
        if (t < 0 || static_cast<std::size_t>(t) >= symbols_.size()) {
            throw RangeError("token id out of range: " + std::to_string(t));
        }
        return symbols_[static_cast<std::size_t>(t)];
    }

private:
    void add(char c) {
        by_char_[static_cast<unsigned char>(c)] = static_cast<TokenId>(symbols_.size());
        symbols_.emplace_back(1, c);
    }

    std::vector<std::string> symbols_;
    std::array<TokenId, 256> by_char_ = [] {
        std::array<TokenId, 256> a{};
        a.fill(-1);
        return a;
    }();
};

inline const Vocab& default_vocab() {
    static const Vocab v;
    return v;
}

namespace detail {

inline std::string utf8_char_at(std::string_view text, std::size_t i) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((lead & 0xE0) == 0xC0) {
        len = 2;
    } else if ((lead & 0xF0) == 0xE0) {
        len = 3;
    } else if ((lead & 0xF8) == 0xF0) {
        len = 4;
    }
    return std::string(text.substr(i, len));
}

}  // namespace detail

/// Character-level encoding with a single leading <bos>. Error offsets count
/// characters (UTF-8 code points), not bytes.
inline TokenSeq encode(const Vocab& vocab, std::string_view text) {
    TokenSeq out;
    out.reserve(text.size() + 1);
    out.push_back(Vocab::kBos);
    std::size_t char_index = 0;
    for (std::size_t i = 0; i < text.size(); ++char_index) {
        auto id = vocab.id_of(text[i]);
        if (!id) {
            throw UnknownCharacter(detail::utf8_char_at(text, i), char_index);
        }
        out.push_back(*id);
        ++i;
    }
    return out;
}

/// Inverse of encode; <bos> and <pad> produce no text.
inline std::string decode(const Vocab& vocab, std::span<const TokenId> ids) {
    std::string out;
    for (TokenId t : ids) {
        const auto& sym = vocab.symbol(t);  // range-checks every id
        if (t != Vocab::kBos && t != Vocab::kPad) out += sym;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

enum class PromptStyle { addition, cipher, mcqa };

/// Half-open token range [begin, end).
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;
    [[nodiscard]] std::size_t size() const { return end - begin; }
    [[nodiscard]] bool empty() const { return end == begin; }
    bool operator==(const Span&) const = default;
};

/// Token positions of one rendered example. For addition `a` and `b` are the
/// operands; for cipher and mcqa `a` covers the whole input and `b` is empty.
/// `eq` is the answer-eliciting token ('=' or '>' of "->" or ':' of
/// "Answer:"); `answer` is the graded span (empty for the query).
struct ExamplePositions {
    Span a;
    Span b;
    std::size_t eq = 0;
    Span answer;
    bool operator==(const ExamplePositions&) const = default;
};

/// Positions are token indices in the encoded sequence (<bos> is index 0).
struct PositionMap {
    std::vector<ExamplePositions> shots;  // answered in-context examples
    ExamplePositions query;               // the final, unanswered example
    std::size_t final_eq = 0;

    [[nodiscard]] std::size_t n_shots() const { return shots.size(); }
    bool operator==(const PositionMap&) const = default;
};

struct PromptExample {
    std::string input;   // "4+3", "c", or a formatted question block
    std::string answer;  // ignored for the last example
};

struct RenderedPrompt {
    std::string text;
    PositionMap positions;
};

namespace detail {

inline std::size_t tok_pos(std::size_t char_offset) { return char_offset + 1; }

}  // namespace detail

/// Renders few-shot examples; the last example's answer is omitted and the
/// text stops at its answer-eliciting token.
///   addition: "4+3=7\n1+0="
///   cipher:   " c -> e\n q ->"
///   mcqa:     "<block>\nAnswer: (B)\n<block>\nAnswer:"
inline RenderedPrompt render_prompt(std::span<const PromptExample> examples, PromptStyle style) {
    if (examples.empty()) {
        throw Error("render_prompt: empty example list");
    }
    RenderedPrompt out;
    std::string& s = out.text;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const bool last = i + 1 == examples.size();
        const auto& ex = examples[i];
        ExamplePositions pos;
        switch (style) {
            case PromptStyle::addition: {
                const auto plus = ex.input.find('+');
                if (plus == std::string::npos) {
                    throw Error("render_prompt: addition input '" + ex.input + "' has no '+'");
                }
                const std::size_t start = s.size();
                pos.a = {detail::tok_pos(start), detail::tok_pos(start + plus)};
                pos.b = {detail::tok_pos(start + plus + 1), detail::tok_pos(start + ex.input.size())};
                s += ex.input;
                pos.eq = detail::tok_pos(s.size());
                s += '=';
                break;
            }
            case PromptStyle::cipher: {
                s += ' ';
                pos.a = {detail::tok_pos(s.size()), detail::tok_pos(s.size() + ex.input.size())};
                pos.b = {pos.a.end, pos.a.end};
                s += ex.input;
                s += " -";
                pos.eq = detail::tok_pos(s.size());
                s += '>';
                if (!last) {
                    s += ' ';
                }
                break;
            }
            case PromptStyle::mcqa: {
                pos.a = {detail::tok_pos(s.size()), detail::tok_pos(s.size() + ex.input.size())};
                pos.b = {pos.a.end, pos.a.end};
                s += ex.input;
                s += "\nAnswer";
                pos.eq = detail::tok_pos(s.size());
                s += ':';
                if (!last) {
                    s += " (";
                }
                break;
            }
        }
        if (last) {
            out.positions.query = pos;
            out.positions.final_eq = pos.eq;
            break;
        }
        pos.answer = {detail::tok_pos(s.size()), detail::tok_pos(s.size() + ex.answer.size())};
        s += ex.answer;
        if (style == PromptStyle::mcqa) {
            s += ')';
        }
        s += '\n';
        out.positions.shots.push_back(pos);
    }
    return out;
}

/// Tokens emitted between the answer-eliciting token and the graded token:
/// nothing for addition, " " for cipher, " (" for mcqa.
inline std::string answer_prefix(PromptStyle style) {
    switch (style) {
        case PromptStyle::addition:
            return "";
        case PromptStyle::cipher:
            return " ";
        case PromptStyle::mcqa:
            return " (";
    }
    return "";
}

}  // namespace filab
