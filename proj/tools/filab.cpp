// filab command-line driver.

#include "filab/analysis.hpp"
#include "filab/circuits.hpp"
#include "filab/interventions.hpp"
#include "filab/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace filab;

namespace {

struct Common {
    std::size_t threads = default_threads();
    bool deterministic = false;
    std::string manifest_path;

    [[nodiscard]] std::size_t workers() const { return deterministic ? 1 : std::max<std::size_t>(1, threads); }
};

struct TaskArgs {
    std::string task = "off-by-1";
    std::optional<int> k;
    std::size_t shots = 8;
    std::string constraint = "answer-disjoint";
    std::string mcqa_csv;
    std::uint64_t seed = 0;

    void add(CLI::App* app, bool with_shots = true) {
        app->add_option("--task", task, "off-by-<k>, caesar, base-<radix>, shifted-mcqa")->capture_default_str();
        app->add_option("--k", k, "offset (or radix); overrides the value in --task");
        if (with_shots) app->add_option("--shots", shots, "in-context examples per prompt")->capture_default_str();
        app->add_option("--constraint", constraint, "answer-disjoint, none or answer-overlap")->capture_default_str();
        app->add_option("--mcqa-csv", mcqa_csv, "question bank (question,A,B,C,D,answer)");
        app->add_option("--seed", seed, "sampling seed")->required();
    }

    [[nodiscard]] TaskSpec spec() const {
        auto [kind, named_k] = parse_task_name(task);
        TaskSpec s;
        s.kind = kind;
        if (k) {
            s.k = *k;
        } else if (named_k) {
            s.k = *named_k;
        } else {
            throw Error("task '" + task + "' needs --k");
        }
        s.n_shots = shots;
        s.constraint = constraint_from_string(constraint);
        s.seed = seed;
        return s;
    }

    [[nodiscard]] std::vector<McqaRecord> bank() const {
        if (!mcqa_csv.empty()) return load_mcqa(mcqa_csv);
        return synthetic_mcqa_bank(64, seed ^ 0x6d637161ull);
    }
};

/// Records what a command did; written when the command returns.
struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    json args = json::object();
    json seeds = json::object();
    std::string model_checksum;
    std::vector<std::string> outputs;
};

std::ofstream open_out(const std::string& path, Manifest& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write '" + path + "'");
    m.outputs.push_back(path);
    return os;
}

Model load_checked(const std::string& path, Manifest& m) {
    Model model = load_model(path);
    m.model_checksum = model_checksum(model);
    m.args["model"] = path;
    return model;
}

std::vector<PromptPair> make_pairs(const TaskArgs& t, std::size_t n, const std::vector<McqaRecord>& bank, Manifest& m) {
    const auto spec = t.spec();
    m.seeds["task"] = spec.seed;
    m.args["task"] = to_json(spec);
    m.args["pairs"] = n;
    return sample_suite(spec, n, &bank);
}

std::vector<HeadRef> heads_from(const std::string& heads, const std::string& circuit_path, const std::string& group) {
    if (!heads.empty()) return parse_heads(heads);
    if (circuit_path.empty()) throw Error("give --heads or --circuit");
    const auto c = load_circuit(circuit_path);
    if (group.empty() || group == "all") return c.list();
    return c.members(head_group_from_string(group));
}

void write_manifest(const Manifest& m, const Common& common, double secs) {
    json j{{"command", m.command},
           {"argv", m.argv},
           {"args", m.args},
           {"seeds", m.seeds},
           {"model_checksum", m.model_checksum},
           {"outputs", m.outputs},
           {"threads", common.workers()},
           {"deterministic", common.deterministic},
           {"wall_time_s", secs}};
    std::string path = common.manifest_path;
    if (path.empty() && !m.outputs.empty()) path = m.outputs.front() + ".manifest.json";
    if (path.empty()) {
        std::cerr << j.dump() << '\n';
        return;
    }
    std::ofstream os(path);
    if (!os) throw Error("cannot write manifest '" + path + "'");
    os << j.dump(2) << '\n';
}

int run_cli(const std::vector<std::string>& argv);

/// Rewrites output paths of a recorded command into `out_dir`.
std::vector<std::string> replay_argv(const json& manifest, const std::string& out_dir) {
    auto argv = manifest.at("argv").get<std::vector<std::string>>();
    const auto outputs = manifest.at("outputs").get<std::vector<std::string>>();
    std::vector<std::string> out;
    for (std::size_t i = 0; i < argv.size(); ++i) {
        if (argv[i] == "--manifest") {
            ++i;  // dropped; the replay writes its own
            continue;
        }
        std::string a = argv[i];
        if (!out_dir.empty()) {
            for (const auto& o : outputs) {
                if (a == o) a = (fs::path(out_dir) / fs::path(o).filename()).string();
            }
        }
        out.push_back(a);
    }
    if (std::find(out.begin(), out.end(), "--deterministic") == out.end()) out.push_back("--deterministic");
    return out;
}

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"filab: function-induction lab on a tiny transformer"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--threads", common.threads, "worker threads (default FILAB_THREADS or 1)");
    app.add_flag("--deterministic", common.deterministic, "single-threaded, fixed-order reduction");
    app.add_option("--manifest", common.manifest_path, "manifest path (default <first output>.manifest.json)");

    Manifest man;
    std::function<void()> action;
    auto sub = [&](const std::string& name, const std::string& help) {
        auto* s = app.add_subcommand(name, help);
        s->fallthrough();
        return s;
    };

    // train ------------------------------------------------------------------
    auto* train_cmd = sub("train", "train the toy model");
    TrainConfig tc = default_train_config();
    std::string train_out, loss_out;
    std::uint64_t train_seed = 0;
    train_cmd->add_option("--out", train_out, "checkpoint path")->required();
    train_cmd->add_option("--seed", train_seed, "training seed")->required();
    train_cmd->add_option("--steps", tc.steps)->capture_default_str();
    train_cmd->add_option("--batch", tc.batch)->capture_default_str();
    train_cmd->add_option("--lr", tc.lr)->capture_default_str();
    train_cmd->add_option("--layers", tc.model.n_layers)->capture_default_str();
    train_cmd->add_option("--heads", tc.model.n_heads)->capture_default_str();
    train_cmd->add_option("--d-model", tc.model.d_model)->capture_default_str();
    train_cmd->add_option("--d-mlp", tc.model.d_mlp)->capture_default_str();
    train_cmd->add_option("--max-seq", tc.model.max_seq)->capture_default_str();
    train_cmd->add_option("--checkpoint-every", tc.checkpoint_every)->capture_default_str();
    train_cmd->add_option("--loss-curve", loss_out, "loss CSV (default <out>.loss.csv)");
    train_cmd->callback([&] {
        action = [&] {
            tc.seed = train_seed;
            tc.model.d_head = tc.model.d_model / std::max<std::size_t>(1, tc.model.n_heads);
            tc.checkpoint_path = train_out;
            tc.loss_curve_path = loss_out.empty() ? train_out + ".loss.csv" : loss_out;
            man.seeds["train"] = train_seed;
            man.args["config"] = {{"model", tc.model}, {"steps", tc.steps}, {"batch", tc.batch}, {"lr", tc.lr}};
            const auto res = train(tc, &std::cerr);
            man.outputs = {tc.loss_curve_path, train_out};
            man.model_checksum = model_checksum(res.model);
            const double acc = in_distribution_accuracy(res.model, tc, 500, derive_seed(train_seed, 0xacc));
            std::cout << json{{"in_distribution_accuracy", acc}, {"final_loss", res.curve.empty() ? 0.0 : res.curve.back().loss}}.dump()
                      << '\n';
        };
    });

    // gen-tasks --------------------------------------------------------------
    auto* gen_cmd = sub("gen-tasks", "sample base/contrast prompt pairs as JSONL");
    TaskArgs gen_task;
    gen_task.add(gen_cmd);
    std::size_t gen_n = 100;
    std::string gen_out;
    gen_cmd->add_option("--n", gen_n)->capture_default_str();
    gen_cmd->add_option("--out", gen_out, "JSONL path")->required();
    gen_cmd->callback([&] {
        action = [&] {
            const auto bank = gen_task.bank();
            const auto pairs = make_pairs(gen_task, gen_n, bank, man);
            auto os = open_out(gen_out, man);
            for (const auto& p : pairs) os << pair_to_json(p).dump() << '\n';
        };
    });

    // oracle -----------------------------------------------------------------
    auto* oracle_cmd = sub("oracle", "print the ground-truth answer");
    std::string oracle_task, oracle_input;
    std::optional<int> oracle_k;
    oracle_cmd->add_option("--task", oracle_task)->required();
    oracle_cmd->add_option("--k", oracle_k);
    oracle_cmd->add_option("--input", oracle_input)->required();
    oracle_cmd->callback([&] {
        action = [&] {
            auto [kind, named_k] = parse_task_name(oracle_task);
            const int k = oracle_k ? *oracle_k : named_k ? *named_k : throw Error("task '" + oracle_task + "' needs --k");
            man.args["task"] = oracle_task;
            man.args["k"] = k;
            man.args["input"] = oracle_input;
            std::cout << oracle(kind, k, oracle_input) << '\n';
        };
    });

    // eval -------------------------------------------------------------------
    auto* eval_cmd = sub("eval", "base/contrast accuracy of greedy answers");
    TaskArgs eval_task;
    eval_task.add(eval_cmd);
    std::string eval_model, eval_out;
    std::size_t eval_n = 200;
    eval_cmd->add_option("--model", eval_model)->required();
    eval_cmd->add_option("--n", eval_n)->capture_default_str();
    eval_cmd->add_option("--out", eval_out, "JSON report (default stdout)");
    eval_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(eval_model, man);
            const auto bank = eval_task.bank();
            auto spec = eval_task.spec();
            man.seeds["task"] = spec.seed;
            man.args["task"] = to_json(spec);
            const auto rep = eval_accuracy(model, spec, eval_n, eval_task.shots, &bank);
            const auto j = to_json(rep).dump();
            if (eval_out.empty()) {
                std::cout << j << '\n';
            } else {
                open_out(eval_out, man) << j << '\n';
            }
        };
    });

    // patch-sweep ------------------------------------------------------------
    auto* sweep_cmd = sub("patch-sweep", "path-patch every head to one receiver");
    TaskArgs sweep_task;
    sweep_task.add(sweep_cmd);
    std::string sweep_model, sweep_out, sweep_json, sweep_receiver = "logits", sweep_mlp = "strict";
    std::size_t sweep_pairs = 100;
    sweep_cmd->add_option("--model", sweep_model)->required();
    sweep_cmd->add_option("--pairs", sweep_pairs)->capture_default_str();
    sweep_cmd->add_option("--receiver", sweep_receiver, "logits, head-value:L.H, head-query:L.H, head-key:L.H, resid-pre:L, ...")
        ->capture_default_str();
    sweep_cmd->add_option("--mlp", sweep_mlp, "strict or relaxed")->capture_default_str();
    sweep_cmd->add_option("--out", sweep_out, "CSV layer,head,r,n")->required();
    sweep_cmd->add_option("--json", sweep_json, "also write JSON");
    sweep_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(sweep_model, man);
            const auto bank = sweep_task.bank();
            const auto pairs = make_pairs(sweep_task, sweep_pairs, bank, man);
            PathPatchOptions opts;
            if (sweep_mlp == "relaxed") {
                opts.mlp = MlpHandling::relaxed;
            } else if (sweep_mlp != "strict") {
                throw Error("--mlp must be strict or relaxed");
            }
            man.args["receiver"] = sweep_receiver;
            man.args["mlp"] = sweep_mlp;
            const auto map = sweep(model, pairs, parse_node(sweep_receiver), opts, common.workers());
            auto os = open_out(sweep_out, man);
            write_effects_csv(os, map);
            if (!sweep_json.empty()) open_out(sweep_json, man) << effects_to_json(map).dump(2) << '\n';
            std::cerr << "pairs used " << map.n << ", skipped " << map.skipped << '\n';
        };
    });

    // path-patch -------------------------------------------------------------
    auto* pp_cmd = sub("path-patch", "path patching for an explicit sender set");
    TaskArgs pp_task;
    pp_task.add(pp_cmd);
    std::string pp_model, pp_out, pp_receiver = "logits", pp_mlp = "strict";
    std::vector<std::string> pp_senders;
    std::size_t pp_pairs = 20;
    pp_cmd->add_option("--model", pp_model)->required();
    pp_cmd->add_option("--pairs", pp_pairs)->capture_default_str();
    pp_cmd->add_option("--sender", pp_senders, "sender node (repeatable), e.g. head-output:2.1")->required();
    pp_cmd->add_option("--receiver", pp_receiver)->capture_default_str();
    pp_cmd->add_option("--mlp", pp_mlp)->capture_default_str();
    pp_cmd->add_option("--out", pp_out, "CSV pair,r")->required();
    pp_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(pp_model, man);
            const auto bank = pp_task.bank();
            const auto pairs = make_pairs(pp_task, pp_pairs, bank, man);
            std::vector<NodeRef> senders;
            for (const auto& s : pp_senders) senders.push_back(parse_node(s));
            PathPatchOptions opts;
            opts.mlp = pp_mlp == "relaxed" ? MlpHandling::relaxed : MlpHandling::strict;
            man.args["senders"] = pp_senders;
            man.args["receiver"] = pp_receiver;
            const NodeRef recv = parse_node(pp_receiver);
            std::vector<std::optional<double>> rs(pairs.size());
            parallel_for(pairs.size(), common.workers(), [&](std::size_t i) {
                try {
                    rs[i] = path_patch(model, pairs[i], senders, recv, opts);
                } catch (const DegeneratePair&) {
                }
            });
            auto os = open_out(pp_out, man);
            os << "pair,r\n";
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < rs.size(); ++i) {
                if (!rs[i]) continue;
                os << i << ',' << format_real(*rs[i]) << '\n';
                sum += *rs[i];
                ++n;
            }
            if (n == 0) throw DegeneratePair("every pair was degenerate");
            std::cout << json{{"mean_r", sum / static_cast<double>(n)}, {"n", n}, {"skipped", rs.size() - n}}.dump() << '\n';
        };
    });

    // ablate -----------------------------------------------------------------
    auto* abl_cmd = sub("ablate", "accuracy with a head set ablated");
    TaskArgs abl_task;
    abl_task.add(abl_cmd);
    std::string abl_model, abl_out, abl_heads, abl_circuit, abl_group = "function-induction", abl_mode = "instance";
    std::size_t abl_pairs = 100, abl_bank_n = kDefaultMeanBankSamples;
    abl_cmd->add_option("--model", abl_model)->required();
    abl_cmd->add_option("--pairs", abl_pairs)->capture_default_str();
    abl_cmd->add_option("--heads", abl_heads, "comma-separated layer.head list");
    abl_cmd->add_option("--circuit", abl_circuit, "circuit JSON");
    abl_cmd->add_option("--group", abl_group, "group of --circuit to ablate, or 'all'")->capture_default_str();
    abl_cmd->add_option("--mode", abl_mode, "instance, zero or mean")->capture_default_str();
    abl_cmd->add_option("--bank-size", abl_bank_n, "mean-bank prompts")->capture_default_str();
    abl_cmd->add_option("--out", abl_out, "JSON report")->required();
    abl_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(abl_model, man);
            const auto bank = abl_task.bank();
            const auto pairs = make_pairs(abl_task, abl_pairs, bank, man);
            const auto heads = heads_from(abl_heads, abl_circuit, abl_group);
            const auto mode = ablation_mode_from_string(abl_mode);
            std::optional<MeanBank> mb;
            if (mode == AblationMode::mean) {
                TaskSpec std_spec = abl_task.spec();
                std_spec.seed = derive_seed(std_spec.seed, 0x6d65616eull);
                mb = build_mean_bank(model, sample_suite(std_spec, abl_bank_n, &bank));
            }
            man.args["heads"] = describe_heads(heads);
            man.args["mode"] = abl_mode;
            const auto before = eval_accuracy(
                [&](const PromptPair& p) { return decode_pair_answer(model_next_logits(model), p, model.config.max_seq); }, pairs);
            const auto after = eval_accuracy_ablated(model, pairs, heads, mode, mb ? &*mb : nullptr);
            open_out(abl_out, man) << json{{"heads", describe_heads(heads)}, {"mode", abl_mode}, {"clean", to_json(before)}, {"ablated", to_json(after)}}.dump(2)
                                   << '\n';
        };
    });

    // circuit-eval -----------------------------------------------------------
    auto* ce_cmd = sub("circuit-eval", "faithfulness, completeness or minimality of a circuit");
    TaskArgs ce_task;
    ce_task.add(ce_cmd);
    std::string ce_model, ce_circuit, ce_out, ce_metric = "faithfulness", ce_strategy = "group", ce_mode = "instance", ce_head;
    std::size_t ce_pairs = 50, ce_trials = 8, ce_budget = 64;
    ce_cmd->add_option("--model", ce_model)->required();
    ce_cmd->add_option("--circuit", ce_circuit, "circuit JSON")->required();
    ce_cmd->add_option("--pairs", ce_pairs)->capture_default_str();
    ce_cmd->add_option("--metric", ce_metric, "faithfulness, completeness or minimality")->capture_default_str();
    ce_cmd->add_option("--strategy", ce_strategy, "random, greedy or group")->capture_default_str();
    ce_cmd->add_option("--trials", ce_trials)->capture_default_str();
    ce_cmd->add_option("--head", ce_head, "minimality: head v (default every member)");
    ce_cmd->add_option("--budget", ce_budget)->capture_default_str();
    ce_cmd->add_option("--mode", ce_mode, "knockout: instance or zero")->capture_default_str();
    ce_cmd->add_option("--out", ce_out, "CSV")->required();
    ce_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(ce_model, man);
            const auto bank = ce_task.bank();
            const auto pairs = make_pairs(ce_task, ce_pairs, bank, man);
            const auto circuit = load_circuit(ce_circuit);
            KnockoutPolicy policy;
            policy.mode = ablation_mode_from_string(ce_mode);
            std::optional<MeanBank> mb;
            if (policy.mode == AblationMode::mean) {
                TaskSpec std_spec = ce_task.spec();
                std_spec.seed = derive_seed(std_spec.seed, 0x6d65616eull);
                mb = build_mean_bank(model, sample_suite(std_spec, kDefaultMeanBankSamples, &bank));
                policy.bank = &*mb;
            }
            man.args["circuit"] = ce_circuit;
            man.args["metric"] = ce_metric;
            man.args["mode"] = ce_mode;
            auto os = open_out(ce_out, man);
            if (ce_metric == "faithfulness") {
                const auto r = eval_faithfulness(model, circuit, pairs, policy, common.workers());
                os << "faithfulness_percent,f_base,f_cont,f_circuit,n,skipped\n"
                   << format_real(r.percent) << ',' << format_real(r.f_base) << ',' << format_real(r.f_cont) << ','
                   << format_real(r.f_circuit) << ',' << r.n << ',' << r.skipped << '\n';
            } else if (ce_metric == "completeness") {
                man.args["strategy"] = ce_strategy;
                man.seeds["completeness"] = ce_task.seed;
                const auto pts = eval_completeness(model, circuit, pairs, completeness_strategy_from_string(ce_strategy), ce_trials,
                                                   derive_seed(ce_task.seed, 0xc0), policy, common.workers());
                os << "label,K,f_circuit,f_model\n";
                for (const auto& p : pts) os << p.label << ',' << describe_heads(p.K) << ',' << format_real(p.f_circuit) << ',' << format_real(p.f_model) << '\n';
            } else if (ce_metric == "minimality") {
                std::vector<HeadRef> vs = ce_head.empty() ? circuit.list() : std::vector<HeadRef>{parse_head(ce_head)};
                os << "head,K,score,score_percent,evaluated\n";
                for (const auto& v : vs) {
                    const auto r = eval_minimality(model, circuit, pairs, v, ce_budget, policy, common.workers());
                    os << v.name() << ',' << describe_heads(r.K) << ',' << format_real(r.score) << ',' << format_real(r.score_percent) << ','
                       << r.evaluated << '\n';
                }
            } else {
                throw Error("--metric must be faithfulness, completeness or minimality");
            }
        };
    });

    // logit-lens -------------------------------------------------------------
    auto* lens_cmd = sub("logit-lens", "per-layer logits of y_base and y_cont");
    TaskArgs lens_task;
    lens_task.add(lens_cmd);
    std::string lens_model, lens_out, lens_prompt = "cont";
    std::size_t lens_pairs = 1;
    lens_cmd->add_option("--model", lens_model)->required();
    lens_cmd->add_option("--pairs", lens_pairs)->capture_default_str();
    lens_cmd->add_option("--prompt", lens_prompt, "base or cont")->capture_default_str();
    lens_cmd->add_option("--out", lens_out, "JSONL layer,token,logit")->required();
    lens_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(lens_model, man);
            const auto bank = lens_task.bank();
            const auto pairs = make_pairs(lens_task, lens_pairs, bank, man);
            man.args["prompt"] = lens_prompt;
            auto os = open_out(lens_out, man);
            for (std::size_t i = 0; i < pairs.size(); ++i) {
                const auto& p = pairs[i];
                const auto cache = forward_cached(model, lens_prompt == "base" ? p.x_base : p.x_cont);
                const auto r = logit_lens(model, cache, {p.y_base, p.y_cont}, p.answer_pos());
                for (std::size_t l = 0; l < r.logits.size(); ++l) {
                    for (std::size_t c = 0; c < r.candidates.size(); ++c) {
                        os << json{{"pair", i}, {"layer", l}, {"token", default_vocab().symbol(r.candidates[c])}, {"role", c == 0 ? "y_base" : "y_cont"},
                                   {"logit", r.logits[l][c]}}
                                  .dump()
                           << '\n';
                    }
                }
            }
        };
    });

    // fv-heatmap -------------------------------------------------------------
    auto* fv_cmd = sub("fv-heatmap", "function-vector heatmap of heads on naive prompts");
    TaskArgs fv_task;
    fv_task.add(fv_cmd);
    std::string fv_model, fv_out, fv_heads, fv_circuit, fv_group = "function-induction", fv_naive = "addition", fv_place = "head-output",
                                                         fv_per_head_dir;
    std::size_t fv_donors = 20;
    fv_cmd->add_option("--model", fv_model)->required();
    fv_cmd->add_option("--heads", fv_heads);
    fv_cmd->add_option("--circuit", fv_circuit);
    fv_cmd->add_option("--group", fv_group)->capture_default_str();
    fv_cmd->add_option("--donors", fv_donors, "donor pairs averaged")->capture_default_str();
    fv_cmd->add_option("--naive", fv_naive, "identity or addition")->capture_default_str();
    fv_cmd->add_option("--placement", fv_place, "head-output or resid-pre")->capture_default_str();
    fv_cmd->add_option("--out", fv_out, "aggregate grid CSV")->required();
    fv_cmd->add_option("--per-head-dir", fv_per_head_dir, "directory for per-head grids");
    fv_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(fv_model, man);
            const auto bank = fv_task.bank();
            const auto pairs = make_pairs(fv_task, fv_donors, bank, man);
            const auto heads = heads_from(fv_heads, fv_circuit, fv_group);
            man.args["heads"] = describe_heads(heads);
            man.args["naive"] = fv_naive;
            man.args["placement"] = fv_place;
            const auto hm = fv_heatmap(model, heads, pairs, naive_prompt_from_string(fv_naive), fv_placement_from_string(fv_place),
                                       common.workers());
            auto os = open_out(fv_out, man);
            write_grid_csv(os, hm.aggregate);
            if (!fv_per_head_dir.empty()) {
                fs::create_directories(fv_per_head_dir);
                for (std::size_t i = 0; i < heads.size(); ++i) {
                    auto hs = open_out((fs::path(fv_per_head_dir) / (heads[i].name() + ".csv")).string(), man);
                    write_grid_csv(hs, hm.per_head[i]);
                }
            }
        };
    });

    // base8-table ------------------------------------------------------------
    auto* b8_cmd = sub("base8-table", "digit-adjustment counts for base-8 prompts");
    std::string b8_model, b8_out, b8_heads, b8_circuit, b8_group = "function-induction", b8_mode = "zero";
    std::size_t b8_n = 100, b8_shots = 8;
    std::uint64_t b8_seed = 0;
    b8_cmd->add_option("--model", b8_model)->required();
    b8_cmd->add_option("--n", b8_n, "prompts per case")->capture_default_str();
    b8_cmd->add_option("--shots", b8_shots)->capture_default_str();
    b8_cmd->add_option("--seed", b8_seed)->required();
    b8_cmd->add_option("--heads", b8_heads);
    b8_cmd->add_option("--circuit", b8_circuit);
    b8_cmd->add_option("--group", b8_group)->capture_default_str();
    b8_cmd->add_option("--mode", b8_mode, "zero or mean")->capture_default_str();
    b8_cmd->add_option("--out", b8_out, "CSV")->required();
    b8_cmd->callback([&] {
        action = [&] {
            const Model model = load_checked(b8_model, man);
            const auto heads = heads_from(b8_heads, b8_circuit, b8_group);
            const auto mode = ablation_mode_from_string(b8_mode);
            std::optional<MeanBank> mb;
            if (mode == AblationMode::mean) {
                TaskSpec std_spec;
                std_spec.k = 1;
                std_spec.seed = derive_seed(b8_seed, 0x6d65616eull);
                mb = build_mean_bank(model, sample_suite(std_spec, kDefaultMeanBankSamples));
            }
            man.seeds["base8"] = b8_seed;
            man.args["n"] = b8_n;
            man.args["heads"] = describe_heads(heads);
            const auto rows = base8_error_table(model, b8_n, b8_shots, b8_seed, heads, mode, mb ? &*mb : nullptr);
            auto os = open_out(b8_out, man);
            write_base8_csv(os, rows);
        };
    });

    // replay -----------------------------------------------------------------
    auto* replay_cmd = sub("replay", "re-run a manifest deterministically");
    std::string replay_manifest, replay_dir;
    replay_cmd->add_option("manifest", replay_manifest)->required();
    replay_cmd->add_option("--out-dir", replay_dir, "write outputs here instead of the recorded paths");
    int replay_code = 0;
    replay_cmd->callback([&] {
        action = [&] {
            std::ifstream is(replay_manifest);
            if (!is) throw Error("cannot open '" + replay_manifest + "'");
            const json m = json::parse(is);
            if (!replay_dir.empty()) fs::create_directories(replay_dir);
            auto argv = replay_argv(m, replay_dir);
            argv.insert(argv.begin(), args.front());
            replay_code = run_cli(argv);
        };
    });

    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    man.command = command;
    man.argv.assign(args.begin() + 1, args.end());
    const auto t0 = std::chrono::steady_clock::now();
    try {
        action();
        if (command == "replay") return replay_code;
        write_manifest(man, common, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run_cli(args);
}
