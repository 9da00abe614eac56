#include "filab/tasks.hpp"
#include "filab/tokenizer.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

using namespace filab;

namespace {

/// Value of a digit string in `radix`, computed by counting.
int count_up_value(const std::string& digits, int radix) {
    // Enumerate numerals in radix order until the string appears.
    std::string cur = "0";
    for (int v = 0; v < 100000; ++v) {
        if (cur == digits) return v;
        int i = static_cast<int>(cur.size()) - 1;
        while (i >= 0 && cur[static_cast<std::size_t>(i)] - '0' == radix - 1) {
            cur[static_cast<std::size_t>(i)] = '0';
            --i;
        }
        if (i < 0) {
            cur.insert(cur.begin(), '1');
        } else {
            ++cur[static_cast<std::size_t>(i)];
        }
    }
    return -1;
}

std::string count_up_numeral(int value, int radix) {
    std::string cur = "0";
    for (int v = 0; v < value; ++v) {
        int i = static_cast<int>(cur.size()) - 1;
        while (i >= 0 && cur[static_cast<std::size_t>(i)] - '0' == radix - 1) {
            cur[static_cast<std::size_t>(i)] = '0';
            --i;
        }
        if (i < 0) {
            cur.insert(cur.begin(), '1');
        } else {
            ++cur[static_cast<std::size_t>(i)];
        }
    }
    return cur;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

TEST(Vocab, LayoutAndSize) {
    const auto& v = default_vocab();
    EXPECT_EQ(v.size(), 76u);
    EXPECT_EQ(v.symbol(0), "<bos>");
    EXPECT_EQ(v.symbol(1), "<pad>");
    for (int d = 0; d < 10; ++d) EXPECT_EQ(v.digit(d), 2 + d);
    EXPECT_EQ(v.id('+'), 12);
    EXPECT_EQ(v.id('='), 13);
    EXPECT_EQ(v.id('\n'), 14);
    EXPECT_EQ(v.id('a'), 21);
    EXPECT_EQ(v.id('A'), 47);
    EXPECT_THROW((void)v.digit(10), RangeError);
    EXPECT_THROW((void)v.symbol(76), RangeError);
}

TEST(Tokenizer, EncodePrependsBosAndRoundTrips) {
    const auto& v = default_vocab();
    const std::string text = "4+3=7\n1+0=";
    const auto ids = encode(v, text);
    ASSERT_EQ(ids.size(), text.size() + 1);
    EXPECT_EQ(ids[0], Vocab::kBos);
    EXPECT_EQ(ids[1], v.digit(4));
    EXPECT_EQ(decode(v, ids), text);
    const std::string cipher = " c -> e\n Q -> S\n";
    EXPECT_EQ(decode(v, encode(v, cipher)), cipher);
}

TEST(Tokenizer, UnknownCharacterReportsCodePointOffset) {
    const auto& v = default_vocab();
    try {
        encode(v, "12é+4");
        FAIL();
    } catch (const UnknownCharacter& e) {
        EXPECT_EQ(e.character, "é");
        EXPECT_EQ(e.offset, 2u);
    }
    try {
        encode(v, "ab#");
        FAIL();
    } catch (const UnknownCharacter& e) {
        EXPECT_EQ(e.offset, 2u);
    }
}

TEST(Tokenizer, DecodeSkipsSpecials) {
    const auto& v = default_vocab();
    EXPECT_EQ(decode(v, TokenSeq{0, 1, v.digit(3), 1}), "3");
}

TEST(RenderPrompt, AdditionPositions) {
    const auto& v = default_vocab();
    const std::vector<PromptExample> ex{{"4+3", "9"}, {"12+5", "19"}, {"1+0", ""}};
    const auto r = render_prompt(ex, PromptStyle::addition);
    EXPECT_EQ(r.text, "4+3=9\n12+5=19\n1+0=");
    const auto ids = encode(v, r.text);
    ASSERT_EQ(r.positions.shots.size(), 2u);
    // Independent positions: find characters in the text.
    const auto& s1 = r.positions.shots[1];
    EXPECT_EQ(s1.a, (Span{7, 9}));
    EXPECT_EQ(s1.b, (Span{10, 11}));
    EXPECT_EQ(s1.eq, 11u);
    EXPECT_EQ(s1.answer, (Span{12, 14}));
    EXPECT_EQ(ids[s1.eq], v.id('='));
    EXPECT_EQ(r.positions.final_eq, ids.size() - 1);
    EXPECT_EQ(ids[r.positions.final_eq], v.id('='));
    EXPECT_TRUE(r.positions.query.answer.empty());
}

TEST(RenderPrompt, CipherAndMcqa) {
    const auto& v = default_vocab();
    const std::vector<PromptExample> cex{{"c", "e"}, {"q", ""}};
    const auto c = render_prompt(cex, PromptStyle::cipher);
    EXPECT_EQ(c.text, " c -> e\n q ->");
    EXPECT_EQ(encode(v, c.text)[c.positions.shots[0].answer.begin], v.id('e'));
    EXPECT_EQ(encode(v, c.text)[c.positions.final_eq], v.id('>'));
    EXPECT_EQ(answer_prefix(PromptStyle::cipher), " ");

    const std::vector<PromptExample> mex{{"Q1?\n(A) x", "B"}, {"Q2?\n(A) y", ""}};
    const auto m = render_prompt(mex, PromptStyle::mcqa);
    EXPECT_EQ(m.text, "Q1?\n(A) x\nAnswer: (B)\nQ2?\n(A) y\nAnswer:");
    EXPECT_EQ(encode(v, m.text)[m.positions.shots[0].answer.begin], v.id('B'));
    EXPECT_EQ(encode(v, m.text)[m.positions.final_eq], v.id(':'));
    EXPECT_EQ(answer_prefix(PromptStyle::mcqa), " (");
}

TEST(RenderPrompt, EmptyListRejected) {
    EXPECT_THROW(render_prompt(std::vector<PromptExample>{}, PromptStyle::addition), Error);
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

TEST(Oracle, OffByKExhaustive) {
    for (int k : {-2, -1, 1, 2}) {
        for (int a = 0; a <= 9; ++a) {
            for (int b = 0; b <= 9; ++b) {
                const std::string in = std::to_string(a) + "+" + std::to_string(b);
                if (a + b + k < 0) {
                    EXPECT_THROW(oracle(TaskKind::off_by_k, k, in), DomainError);
                } else {
                    EXPECT_EQ(oracle(TaskKind::off_by_k, k, in), std::to_string(a + b + k));
                }
            }
        }
    }
    EXPECT_EQ(oracle(TaskKind::off_by_k, 2, "4+3"), "9");
    EXPECT_THROW(oracle(TaskKind::off_by_k, 1, "4-3"), DomainError);
    EXPECT_THROW(oracle(TaskKind::off_by_k, 1, "x+3"), DomainError);
}

TEST(Oracle, CaesarInverseAndCase) {
    EXPECT_EQ(oracle(TaskKind::caesar, 2, "c"), "e");
    EXPECT_EQ(oracle(TaskKind::caesar, 3, "Z"), "C");
    EXPECT_EQ(oracle(TaskKind::caesar, -1, "a"), "z");
    for (int k = 0; k <= 26; ++k) {
        for (int i = 0; i < 52; ++i) {
            const std::string c(1, static_cast<char>(i < 26 ? 'a' + i : 'A' + i - 26));
            const auto there = oracle(TaskKind::caesar, k, c);
            EXPECT_EQ(std::isupper(static_cast<unsigned char>(there[0])) != 0, std::isupper(static_cast<unsigned char>(c[0])) != 0);
            EXPECT_EQ(oracle(TaskKind::caesar, 26 - k, there), c);
        }
    }
    EXPECT_THROW(oracle(TaskKind::caesar, 1, "3"), DomainError);
}

TEST(Oracle, BaseKAgainstCounting) {
    for (int r = 6; r <= 9; ++r) {
        for (int a = 10; a < r * 10; ++a) {
            if (a % 10 >= r) continue;
            for (int b = 10; b < r * 10; b += 3) {
                if (b % 10 >= r) continue;
                const int va = count_up_value(std::to_string(a), r);
                const int vb = count_up_value(std::to_string(b), r);
                const auto got = oracle(TaskKind::base_k_add, r, std::to_string(a) + "+" + std::to_string(b));
                ASSERT_EQ(got, count_up_numeral(va + vb, r)) << a << "+" << b << " base " << r;
            }
        }
    }
    EXPECT_EQ(base_oracle(TaskKind::base_k_add, "25+16"), "41");
    EXPECT_THROW(oracle(TaskKind::base_k_add, 8, "19+3"), DomainError);
}

TEST(Oracle, McqaCyclicShift) {
    EXPECT_EQ(oracle(TaskKind::shifted_mcqa, 1, "A"), "B");
    EXPECT_EQ(oracle(TaskKind::shifted_mcqa, 1, "D"), "A");
    EXPECT_EQ(oracle(TaskKind::shifted_mcqa, -1, "A"), "D");
    EXPECT_THROW(oracle(TaskKind::shifted_mcqa, 1, "E"), DomainError);
}

TEST(Base8, ListingMatchesTrueBase8AndCasesPartition) {
    std::map<int, int> per_case;
    int valid = 0;
    for (int a = 10; a <= 77; ++a) {
        for (int b = 10; b <= 77; ++b) {
            const bool numerals = a % 10 < 8 && b % 10 < 8 && a / 10 < 8 && b / 10 < 8;
            if (!numerals) {
                EXPECT_THROW(base8_adjusted(a, b), DomainError);
                continue;
            }
            const int s8 = count_up_value(std::to_string(a), 8) + count_up_value(std::to_string(b), 8);
            if (a + b >= 100 || s8 >= 64) {
                EXPECT_THROW(base8_adjusted(a, b), DomainError);
                continue;
            }
            ++valid;
            const auto r = base8_adjusted(a, b);
            EXPECT_EQ(std::to_string(r.answer), count_up_numeral(s8, 8)) << a << "+" << b;
            const int unit = a % 10 + b % 10;
            const int expected_case = unit < 8 ? 1 : unit < 10 ? 2 : 3;
            EXPECT_EQ(r.case_id, expected_case);
            ++per_case[r.case_id];
        }
    }
    EXPECT_EQ(per_case[1] + per_case[2] + per_case[3], valid);
    EXPECT_GT(per_case[1], 0);
    EXPECT_GT(per_case[2], 0);
    EXPECT_GT(per_case[3], 0);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

TEST(Rng, UniformIntBoundsAndDeterminism) {
    Rng a(7), b(7);
    for (int i = 0; i < 1000; ++i) {
        const int x = uniform_int(a, -3, 4);
        EXPECT_GE(x, -3);
        EXPECT_LE(x, 4);
        EXPECT_EQ(x, uniform_int(b, -3, 4));
    }
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_EQ(derive_seed(1, 5), derive_seed(1, 5));
}

TEST(SampleTask, PairStructure) {
    TaskSpec s;
    s.k = 1;
    s.n_shots = 6;
    s.seed = 3;
    const auto& v = default_vocab();
    for (const auto& p : sample_suite(s, 50)) {
        EXPECT_EQ(p.x_base.size(), p.x_cont.size());
        EXPECT_NE(p.y_base, p.y_cont);
        EXPECT_EQ(p.shots.size(), 6u);
        EXPECT_EQ(p.positions.shots.size(), 6u);
        EXPECT_EQ(p.x_cont[p.positions.final_eq], v.id('='));
        EXPECT_EQ(p.answer_pos(), p.positions.final_eq);  // addition has no prefix
        EXPECT_EQ(v.symbol(p.y_base), p.query.base_answer.substr(0, 1));
        EXPECT_EQ(v.symbol(p.y_cont), p.query.cont_answer.substr(0, 1));
        EXPECT_EQ(p.query.cont_answer, oracle(TaskKind::off_by_k, 1, p.query.input));
        EXPECT_EQ(decode(v, p.x_cont), p.cont_text);
        // Shots answered with the contrast function in x_cont, standard in x_base.
        for (std::size_t i = 0; i < p.shots.size(); ++i) {
            const auto sp = p.positions.shots[i].answer;
            std::string got;
            for (std::size_t t = sp.begin; t < sp.end; ++t) got += v.symbol(p.x_cont[t]);
            EXPECT_EQ(got, p.shots[i].cont_answer);
        }
    }
}

TEST(SampleTask, PrefixExtensionForOtherFamilies) {
    const auto& v = default_vocab();
    TaskSpec c;
    c.kind = TaskKind::caesar;
    c.k = 2;
    c.seed = 1;
    const auto cp = sample_suite(c, 5);
    for (const auto& p : cp) {
        EXPECT_EQ(p.answer_pos(), p.positions.final_eq + 1);
        EXPECT_EQ(p.x_cont.back(), v.id(' '));
    }
    TaskSpec b;
    b.kind = TaskKind::base_k_add;
    b.k = 8;
    b.seed = 2;
    for (const auto& p : sample_suite(b, 20)) {
        // graded token is the first digit where the two answers differ
        std::size_t common = p.answer_pos() - p.positions.final_eq;
        EXPECT_EQ(p.query.base_answer.substr(0, common), p.query.cont_answer.substr(0, common));
        EXPECT_NE(p.query.base_answer[common], p.query.cont_answer[common]);
    }
    const auto bank = synthetic_mcqa_bank(20, 4);
    TaskSpec m;
    m.kind = TaskKind::shifted_mcqa;
    m.k = 1;
    m.seed = 3;
    for (const auto& p : sample_suite(m, 5, &bank)) {
        EXPECT_EQ(p.answer_pos(), p.positions.final_eq + 2);
        EXPECT_EQ(v.symbol(p.y_cont), oracle(TaskKind::shifted_mcqa, 1, v.symbol(p.y_base)));
    }
}

TEST(SampleTask, DeterministicPerSeed) {
    TaskSpec s;
    s.k = 2;
    s.seed = 11;
    const auto a = sample_suite(s, 10);
    const auto b = sample_suite(s, 12);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a[i].x_cont, b[i].x_cont);
}

TEST(SampleTask, AnswerDisjointHolds) {
    TaskSpec s;
    s.k = 1;
    s.n_shots = 32;
    s.seed = 5;
    for (const auto& p : sample_suite(s, 200)) {
        for (const auto& sh : p.shots) {
            EXPECT_NE(sh.cont_answer, p.query.cont_answer);
            EXPECT_NE(sh.base_answer, p.query.base_answer);
        }
    }
}

TEST(SampleTask, AnswerOverlapHolds) {
    TaskSpec s;
    s.k = 1;
    s.n_shots = 4;
    s.constraint = Constraint::answer_overlap;
    s.seed = 5;
    for (const auto& p : sample_suite(s, 100)) EXPECT_TRUE(satisfies_constraint(p.shots, p.query, Constraint::answer_overlap));
}

TEST(SampleTask, DegenerateAndUnsatisfiable) {
    TaskSpec s;
    s.k = 0;
    Rng rng(1);
    EXPECT_THROW(sample_task(s, rng), Error);
    s.kind = TaskKind::caesar;
    s.k = 26;
    EXPECT_THROW(sample_task(s, rng), Error);

    // One operand pair only: every shot repeats the query answer.
    TaskSpec tight;
    tight.k = 1;
    tight.lo = 5;
    tight.hi = 5;
    tight.n_shots = 2;
    try {
        sample_task(tight, rng);
        FAIL();
    } catch (const ConstraintUnsatisfiable& e) {
        EXPECT_GT(e.attempts, 0u);
    }
    TaskSpec mc;
    mc.kind = TaskKind::shifted_mcqa;
    EXPECT_THROW(sample_task(mc, rng), Error);  // no bank
}

TEST(SampleTask, OffByKNeverNegativeAndFirstDigitsDiffer) {
    TaskSpec s;
    s.k = -2;
    s.n_shots = 8;
    s.seed = 9;
    for (const auto& p : sample_suite(s, 100)) {
        EXPECT_GE(std::stoi(p.query.cont_answer), 0);
        EXPECT_NE(p.query.base_answer[0], p.query.cont_answer[0]);
        for (const auto& sh : p.shots) EXPECT_GE(std::stoi(sh.cont_answer), 0);
    }
}

TEST(ParseTaskName, Forms) {
    EXPECT_EQ(parse_task_name("off-by-2").second, 2);
    EXPECT_EQ(parse_task_name("off-by--1").second, -1);
    EXPECT_EQ(parse_task_name("base-8").first, TaskKind::base_k_add);
    EXPECT_FALSE(parse_task_name("caesar").second.has_value());
    EXPECT_THROW(parse_task_name("nonsense"), FormatError);
}

TEST(PairJson, Fields) {
    TaskSpec s;
    s.seed = 1;
    const auto p = sample_suite(s, 1).front();
    const auto j = pair_to_json(p);
    EXPECT_EQ(j["x_cont"].get<std::string>(), p.cont_text);
    EXPECT_EQ(j["meta"]["cont_answer"].get<std::string>(), p.query.cont_answer);
    EXPECT_TRUE(j.contains("y_base"));
}

// ---------------------------------------------------------------------------
// MCQA CSV
// ---------------------------------------------------------------------------

TEST(Mcqa, LoadsQuotedCsv) {
    std::istringstream is("\"What, is 2+2?\",3,4,5,6,B\n\nQ2,a,b,c,d,D\n");
    const auto recs = load_mcqa(is);
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].question, "What, is 2+2?");
    EXPECT_EQ(recs[0].answer, 'B');
    EXPECT_EQ(format_mcqa(recs[1]), "Q2\n(A) a\n(B) b\n(C) c\n(D) d");
}

TEST(Mcqa, ErrorsNameTheRow) {
    std::istringstream bad_cols("Q,a,b,c,d,A\nQ,a,b,A\n");
    try {
        load_mcqa(bad_cols);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
    }
    std::istringstream bad_ans("Q,a,b,c,d,E\n");
    EXPECT_THROW(load_mcqa(bad_ans), FormatError);
}

TEST(Mcqa, SyntheticBankIsWellFormed) {
    const auto bank = synthetic_mcqa_bank(50, 2);
    for (const auto& r : bank) {
        ASSERT_EQ(r.choices.size(), 4u);
        std::set<std::string> uniq(r.choices.begin(), r.choices.end());
        EXPECT_EQ(uniq.size(), 4u);
        EXPECT_NO_THROW(encode(default_vocab(), format_mcqa(r)));
    }
}
