#include "filab/circuits.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace filab;
using filab::testing::fixture;
using filab::testing::random_model;
using filab::testing::small_config;

namespace {

class Circuits : public ::testing::Test {
protected:
    Model model = random_model(small_config(), 7);
    std::vector<PromptPair> pairs = [] {
        TaskSpec s;
        s.k = 1;
        s.n_shots = 3;
        s.seed = 4;
        return sample_suite(s, 5);
    }();
    Circuit all = Circuit::all_heads(small_config());
};

}  // namespace

TEST(CircuitJson, RoundTripWithGroups) {
    Circuit c;
    c.add({0, 1}, HeadGroup::previous_token);
    c.add({1, 0}, HeadGroup::function_induction);
    c.add({1, 1});
    const auto back = circuit_from_json(circuit_to_json(c));
    EXPECT_EQ(back.heads, c.heads);
    EXPECT_EQ(back.groups, c.groups);
    EXPECT_EQ(back.group_of({1, 1}), HeadGroup::unlabeled);
    EXPECT_EQ(back.members(HeadGroup::function_induction), (std::vector<HeadRef>{{1, 0}}));
}

TEST(CircuitJson, Errors) {
    EXPECT_THROW(circuit_from_json(nlohmann::json::parse(R"({"heads": [[1]]})")), FormatError);
    EXPECT_THROW(circuit_from_json(nlohmann::json::parse(R"({"groups": {"bogus": [[0, 0]]}})")), FormatError);
    EXPECT_THROW(circuit_from_json(nlohmann::json::parse(R"({"groups": {"consolidation": [[0, 0]], "previous-token": [[0, 0]]}})")),
                 FormatError);
    EXPECT_THROW(load_circuit("/nonexistent/c.json"), Error);
    Circuit c;
    c.add({9, 0});
    EXPECT_THROW(c.validate(small_config()), RangeError);
}

TEST(CircuitJson, ReferenceHeadListsParse) {
    struct Expect {
        const char* file;
        std::size_t consolidation, fi, pt;
    };
    for (const auto& e : {Expect{"gemma2_9b.json", 4, 6, 8}, Expect{"llama3_8b.json", 7, 3, 5}, Expect{"mistral_7b.json", 2, 7, 3}}) {
        const auto c = load_circuit(fixture(std::string("circuits/") + e.file));
        EXPECT_EQ(c.members(HeadGroup::consolidation).size(), e.consolidation) << e.file;
        EXPECT_EQ(c.members(HeadGroup::function_induction).size(), e.fi) << e.file;
        EXPECT_EQ(c.members(HeadGroup::previous_token).size(), e.pt) << e.file;
        EXPECT_EQ(c.heads.size(), e.consolidation + e.fi + e.pt) << e.file;
    }
    const auto mistral = load_circuit(fixture("circuits/mistral_7b.json"));
    EXPECT_EQ(mistral.group_of({31, 2}), HeadGroup::function_induction);
}

TEST(Faithfulness, ArithmeticOnReportedConstants) {
    EXPECT_NEAR(faithfulness_percent(7.17, -1.26, 0.56), (7.17 - 0.56) / (7.17 + 1.26) * 100.0, 1e-9);
    EXPECT_NEAR(faithfulness_percent(7.17, -1.26, 0.56), 78.4, 0.05);
    EXPECT_DOUBLE_EQ(faithfulness_percent(3.0, -1.0, 3.0), 0.0);
    EXPECT_DOUBLE_EQ(faithfulness_percent(3.0, -1.0, -1.0), 100.0);
}

TEST_F(Circuits, AllHeadsIsTheModel) {
    const auto r = eval_faithfulness(model, all, pairs);
    EXPECT_EQ(r.n, pairs.size());
    EXPECT_DOUBLE_EQ(r.percent, 100.0);
    for (const auto& p : pairs) {
        const double fm = pair_logit_diff(p, forward(model, p.x_cont));
        const auto runs = run_pair(model, p);
        const PairContext ctx{&p, runs};
        EXPECT_EQ(eval_F(model, all, ctx), fm);
        const auto zero_k = KnockoutPolicy{AblationMode::zero, nullptr};
        EXPECT_EQ(eval_F(model, all, ctx, zero_k), fm);
    }
}

TEST_F(Circuits, EmptyCircuitTakesEveryHeadFromBase) {
    const Circuit empty;
    for (const auto& p : pairs) {
        const auto runs = run_pair(model, p);
        InterventionPlan plan;
        for (const auto& h : all_heads(model.config)) plan.replace_from_donor(NodeRef::head_output(h.layer, h.head));
        const auto expected = pair_logit_diff(p, forward_intervened(model, p.x_cont, plan, &runs.base).logits);
        EXPECT_EQ(eval_F(model, empty, PairContext{&p, runs}), expected);
    }
}

TEST_F(Circuits, SelfDonorMakesEveryCircuitTheModel) {
    const auto& p = pairs[0];
    const auto cache = forward_cached(model, p.x_cont);
    const double fm = pair_logit_diff(p, cache.logits);
    Circuit c;
    c.add({0, 0});
    for (const auto& circuit : {Circuit{}, c, all}) {
        const double f = eval_F(model, circuit, p.x_cont, p.y_base, p.y_cont, {}, &cache, p.positions.final_eq);
        EXPECT_NEAR(f, fm, 1e-6);
    }
}

TEST_F(Circuits, FaithfulnessMatchesPerPairFormula) {
    Circuit c;
    c.add({1, 0});
    c.add({0, 1});
    const auto r = eval_faithfulness(model, c, pairs);
    double acc = 0.0;
    for (const auto& p : pairs) {
        const auto runs = run_pair(model, p);
        const auto ablated = ablate_heads(model, p.x_cont, {{0, 0}, {1, 1}}, AblationMode::instance, {&runs.base, nullptr, 0});
        const double fc = pair_logit_diff(p, ablated);
        acc += (runs.f_base - fc) / (runs.f_base - runs.f_cont) * 100.0;
    }
    EXPECT_NEAR(r.percent, acc / static_cast<double>(pairs.size()), 1e-9);
}

TEST_F(Circuits, FaithfulnessNeedsPairsAndBank) {
    EXPECT_THROW(eval_faithfulness(model, all, {}), Error);
    EXPECT_THROW(eval_faithfulness(model, all, pairs, {AblationMode::mean, nullptr}), Error);
    EXPECT_THROW(eval_faithfulness(zero_model(small_config()), all, pairs), DegeneratePair);
}

TEST_F(Circuits, CompletenessOfAllHeadsLiesOnDiagonal) {
    for (auto strategy : {CompletenessStrategy::random, CompletenessStrategy::greedy}) {
        const auto pts = eval_completeness(model, all, pairs, strategy, 3, 11);
        ASSERT_GE(pts.size(), 2u);
        EXPECT_EQ(pts.front().label, "empty");
        EXPECT_TRUE(pts.front().K.empty());
        for (const auto& pt : pts) EXPECT_EQ(pt.f_circuit, pt.f_model) << pt.label;
    }
}

TEST_F(Circuits, CompletenessEmptyPointIsCircuitVsModel) {
    Circuit c;
    c.add({1, 1}, HeadGroup::function_induction);
    c.add({0, 0}, HeadGroup::previous_token);
    const auto pts = eval_completeness(model, c, pairs, CompletenessStrategy::group, 1, 0);
    ASSERT_EQ(pts.size(), 3u);
    EXPECT_NEAR(pts[0].f_circuit, eval_faithfulness(model, c, pairs).f_circuit, 1e-9);
    double fm = 0.0;
    for (const auto& p : pairs) fm += run_pair(model, p).f_cont;
    EXPECT_NEAR(pts[0].f_model, fm / static_cast<double>(pairs.size()), 1e-9);
    EXPECT_EQ(pts[1].label, "previous-token");
    EXPECT_EQ(pts[2].label, "function-induction");
    EXPECT_THROW(eval_completeness(model, Circuit{}, pairs, CompletenessStrategy::random, 1, 0), Error);
    EXPECT_THROW(eval_completeness(model, c, pairs, CompletenessStrategy::random, 0, 0), Error);
}

TEST_F(Circuits, MinimalityAtEmptyKIsSingleHeadDelta) {
    Circuit c;
    c.add({0, 1});
    c.add({1, 0});
    c.add({1, 1});
    const HeadRef v{1, 0};
    const auto r = eval_minimality(model, c, pairs, v, 1);
    EXPECT_EQ(r.evaluated, 1u);
    EXPECT_TRUE(r.K.empty());
    double with = 0.0, without = 0.0, gap = 0.0;
    for (const auto& p : pairs) {
        const auto runs = run_pair(model, p);
        const AblationReference ref{&runs.base, nullptr, 0};
        without += pair_logit_diff(p, ablate_heads(model, p.x_cont, {{0, 0}}, AblationMode::instance, ref));
        with += pair_logit_diff(p, ablate_heads(model, p.x_cont, {{0, 0}, {1, 0}}, AblationMode::instance, ref));
        gap += runs.f_cont - runs.f_base;
    }
    const double n = static_cast<double>(pairs.size());
    EXPECT_NEAR(r.score, std::abs(with / n - without / n), 1e-9);
    EXPECT_NEAR(r.score_percent, r.score / std::abs(gap / n) * 100.0, 1e-9);
}

TEST_F(Circuits, MinimalitySearchNeverDecreasesScore) {
    const auto at_empty = eval_minimality(model, all, pairs, {0, 0}, 1);
    const auto searched = eval_minimality(model, all, pairs, {0, 0}, 20);
    EXPECT_GE(searched.score, at_empty.score);
    EXPECT_LE(searched.K.size(), kMinimalityCap);
    EXPECT_LE(searched.evaluated, 20u);
    for (const auto& h : searched.K) EXPECT_FALSE(h == HeadRef(0, 0));
}

TEST_F(Circuits, MinimalityErrors) {
    Circuit c;
    c.add({0, 0});
    EXPECT_THROW(eval_minimality(model, c, pairs, {1, 1}, 5), Error);
    EXPECT_THROW(eval_minimality(model, c, pairs, {0, 0}, 0), Error);
    const auto single = eval_minimality(model, c, pairs, {0, 0}, 5);
    EXPECT_TRUE(single.K.empty());
}
