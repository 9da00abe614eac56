// Discovery pipeline on a trained checkpoint: sweep heads against the
// logits, classify the strong ones, ablate the FI group and print an
// aggregate function-vector heatmap.
//
//   pipeline <model.filab> [circuit_out.json]

#include "filab/analysis.hpp"
#include "filab/circuits.hpp"
#include "filab/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace filab;

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: pipeline <model.filab> [circuit_out.json]\n";
        return 1;
    }
    try {
        const Model m = load_model(argv[1]);
        const std::size_t threads = default_threads();

        TaskSpec spec;
        spec.k = 1;
        spec.n_shots = 16;
        spec.seed = 101;
        const auto pairs = sample_suite(spec, 100);

        const auto effects = sweep(m, pairs, NodeRef::logits(), {}, threads);
        std::cout << "logits sweep (r, percent):\n";
        for (std::size_t l = 0; l < effects.n_layers; ++l) {
            for (std::size_t h = 0; h < effects.n_heads; ++h) std::printf("  %7.2f", 100.0 * effects.at({l, h}));
            std::printf("\n");
        }

        const auto cls = classify_heads(effects, mean_head_pattern_scores(m, pairs));
        const auto fi = cls.circuit.members(HeadGroup::function_induction);
        std::cout << "FI heads: " << describe_heads(fi) << "\nconsolidation heads: "
                  << describe_heads(cls.circuit.members(HeadGroup::consolidation)) << "\nweak: " << describe_heads(cls.weak) << "\n";
        if (argc > 2) std::ofstream(argv[2]) << circuit_to_json(cls.circuit).dump(2) << "\n";
        if (fi.empty()) return 0;

        spec.seed = 202;
        const auto eval_pairs = sample_suite(spec, 100);
        spec.seed = 303;
        const auto bank = build_mean_bank(m, sample_suite(spec, 100));
        const auto next = model_next_logits(m);
        const auto plain = eval_accuracy([&](const PromptPair& p) { return decode_pair_answer(next, p, m.config.max_seq); }, eval_pairs);
        std::printf("%-10s base %.2f  contrast %.2f\n", "none", plain.base_acc, plain.contrast_acc);
        for (auto mode : {AblationMode::instance, AblationMode::zero, AblationMode::mean}) {
            const auto r = eval_accuracy_ablated(m, eval_pairs, fi, mode, &bank);
            std::printf("%-10s base %.2f  contrast %.2f\n", to_string(mode).c_str(), r.base_acc, r.contrast_acc);
        }

        const auto hm = fv_heatmap(m, fi, pairs, NaivePrompt::addition, FVPlacement::head_output, threads);
        std::cout << "aggregate FV heatmap (row x, logit change of digit y):\n";
        for (int x = 0; x < 10; ++x) {
            std::printf("  x=%d", x);
            for (int y = 0; y < 10; ++y) std::printf(" %6.2f", hm.aggregate.cell[x][y]);
            std::printf("   argmax %d\n", hm.aggregate.row_argmax(x));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
