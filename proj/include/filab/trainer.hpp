#pragma once

#include "filab/engine.hpp"
#include "filab/interventions.hpp"
#include "filab/model.hpp"
#include "filab/ops.hpp"
#include "filab/tasks.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace filab {

struct MixtureEntry {
    TaskSpec spec;
    double weight = 1.0;
};

struct TrainConfig {
    ModelConfig model;
    double lr = 1e-3;
    double lr_min = 1e-4;  // cosine floor
    std::size_t warmup = 200;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global L2 norm; 0 disables
    std::size_t batch = 32;
    std::size_t steps = 12000;
    std::size_t min_shots = 1;
    std::size_t max_shots = 17;
    std::uint64_t seed = 0;
    std::vector<MixtureEntry> mixture;
    std::size_t log_every = 500;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    std::string checkpoint_path;       // empty: no checkpoints
    std::string loss_curve_path;       // empty: not written

    void validate() const {
        model.validate();
        if (mixture.empty()) throw Error("train config: empty mixture");
        for (const auto& m : mixture) {
            if (!(m.weight > 0.0) || !std::isfinite(m.weight)) throw Error("train config: mixture weights must be positive");
            m.spec.validate();
        }
        if (batch < 1) throw Error("train config: batch must be >= 1");
        if (min_shots < 1 || max_shots < min_shots) throw Error("train config: need 1 <= min_shots <= max_shots");
        if (!(lr > 0.0)) throw Error("train config: lr must be positive");
    }
};

/// Off-by-k addition with k in {-2..2}; k = 0 carries the largest share.
inline std::vector<MixtureEntry> default_mixture() {
    std::vector<MixtureEntry> m;
    for (int k = -2; k <= 2; ++k) {
        TaskSpec s;
        s.kind = TaskKind::off_by_k;
        s.k = k;
        s.constraint = Constraint::none;
        m.push_back({s, k == 0 ? 0.4 : 0.15});
    }
    return m;
}

inline TrainConfig default_train_config() {
    TrainConfig c;
    c.mixture = default_mixture();
    return c;
}

/// One training sequence. mask[t] = 1 when tokens[t] is a graded target
/// (predicted from position t-1).
struct TrainSequence {
    TokenSeq tokens;
    std::vector<std::uint8_t> mask;
    std::size_t mixture_index = 0;
};

namespace detail {

inline std::size_t pick_weighted(const std::vector<MixtureEntry>& mix, Rng& rng) {
    double total = 0.0;
    for (const auto& m : mix) total += m.weight;
    const double u = uniform_real(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < mix.size(); ++i) {
        acc += mix[i].weight;
        if (u < acc) return i;
    }
    return mix.size() - 1;
}

}  // namespace detail

/// A fully answered k-consistent prompt with `n_shots` examples drawn for
/// `spec`. Every answer is graded together with the character that ends it
/// ('\n', or ')' for mcqa) so greedy decoding learns where to stop.
inline TrainSequence render_training_sequence(const TaskSpec& spec, std::size_t n_shots, Rng& rng,
                                              const std::vector<McqaRecord>* bank = nullptr, const Vocab& vocab = default_vocab()) {
    if (spec.kind == TaskKind::shifted_mcqa && (!bank || bank->empty())) throw Error("shifted-mcqa requires a question bank");
    detail::Sampler sampler{spec, rng, bank};
    const PromptStyle style = style_of(spec.kind);
    std::vector<PromptExample> ex;
    for (std::size_t i = 0; i < n_shots; ++i) {
        const auto inst = sampler.draw();
        ex.push_back({inst.input, inst.cont_answer});
    }
    // render_prompt leaves the last example unanswered; append it here.
    const auto r = render_prompt(ex, style);
    std::string text = r.text + answer_prefix(style);
    const std::size_t last_begin = detail::tok_pos(text.size());
    text += ex.back().answer;
    const std::size_t last_end = detail::tok_pos(text.size());
    text += detail::mcqa_suffix(spec.kind) + "\n";

    TrainSequence s;
    s.tokens = encode(vocab, text);
    s.mask.assign(s.tokens.size(), 0);
    auto mark = [&](Span sp) {
        for (std::size_t t = sp.begin; t < sp.end; ++t) s.mask[t] = 1;
        s.mask[sp.end] = 1;  // terminator
    };
    for (const auto& sh : r.positions.shots) mark(sh.answer);
    mark({last_begin, last_end});
    return s;
}

/// `n` sequences; the mixture entry and shot count are drawn per sequence
/// from derived seeds, so item i does not depend on n.
inline std::vector<TrainSequence> build_dataset(const std::vector<MixtureEntry>& mixture, std::size_t n, std::uint64_t seed,
                                                std::size_t min_shots, std::size_t max_shots, std::size_t max_seq,
                                                const std::vector<McqaRecord>* bank = nullptr) {
    if (mixture.empty()) throw Error("build_dataset: empty mixture");
    for (const auto& m : mixture) {
        if (!(m.weight > 0.0)) throw Error("build_dataset: mixture weights must be positive");
    }
    std::vector<TrainSequence> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        const std::size_t mi = detail::pick_weighted(mixture, rng);
        const auto shots = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(min_shots), static_cast<int>(max_shots)));
        auto s = render_training_sequence(mixture[mi].spec, shots, rng, bank);
        if (s.tokens.size() > max_seq) {
            throw Error("build_dataset: sequence of " + std::to_string(s.tokens.size()) + " tokens for " +
                        to_json(mixture[mi].spec).dump() + " with " + std::to_string(shots) + " shots exceeds max_seq " +
                        std::to_string(max_seq));
        }
        s.mixture_index = mi;
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<TrainSequence> build_dataset(const TrainConfig& c, std::size_t n, std::uint64_t seed,
                                                const std::vector<McqaRecord>* bank = nullptr) {
    return build_dataset(c.mixture, n, seed, c.min_shots, c.max_shots, c.model.max_seq, bank);
}

// ---------------------------------------------------------------------------
// Forward/backward for training
// ---------------------------------------------------------------------------

namespace detail {

using EMat = RowMajor;

inline CMapMat cmap(const Matrix& m) { return as_eigen(m); }

struct NormCache {
    EMat xhat;
    Eigen::VectorXf rstd;
};

inline void norm_forward(NormKind kind, const EMat& x, const Matrix& gain, EMat& y, NormCache& nc) {
    const Eigen::Index T = x.rows(), D = x.cols();
    nc.xhat.resize(T, D);
    nc.rstd.resize(T);
    for (Eigen::Index t = 0; t < T; ++t) {
        float mean = 0.0f;
        if (kind == NormKind::layer) mean = x.row(t).mean();
        float ss = 0.0f;
        for (Eigen::Index i = 0; i < D; ++i) {
            const float c = x(t, i) - mean;
            ss += c * c;
        }
        const float rstd = 1.0f / std::sqrt(ss / static_cast<float>(D) + ops::kNormEps);
        nc.rstd(t) = rstd;
        for (Eigen::Index i = 0; i < D; ++i) nc.xhat(t, i) = (x(t, i) - mean) * rstd;
    }
    y = nc.xhat.array().rowwise() * cmap(gain).row(0).array();
}

/// dx for y = xhat * g; accumulates dg.
inline EMat norm_backward(NormKind kind, const EMat& dy, const Matrix& gain, const NormCache& nc, Matrix& dgain) {
    const Eigen::Index T = dy.rows(), D = dy.cols();
    as_eigen(dgain).row(0) += (dy.array() * nc.xhat.array()).colwise().sum().matrix();
    EMat dxhat = dy.array().rowwise() * cmap(gain).row(0).array();
    EMat dx(T, D);
    for (Eigen::Index t = 0; t < T; ++t) {
        const float proj = dxhat.row(t).dot(nc.xhat.row(t)) / static_cast<float>(D);
        const float mean_d = kind == NormKind::layer ? dxhat.row(t).mean() : 0.0f;
        dx.row(t) = nc.rstd(t) * (dxhat.row(t).array() - mean_d - nc.xhat.row(t).array() * proj).matrix();
    }
    return dx;
}

struct LayerTape {
    EMat x1, q, k, v, z, x2, hpre, hact;
    NormCache n1, n2;
    std::vector<EMat> pattern;  // per head, T x T
};

struct SeqTape {
    std::vector<LayerTape> layers;
    EMat xf;
    NormCache nf;
    EMat logits;
};

inline EMat forward_train(const Model& m, std::span<const TokenId> tokens, SeqTape& tape) {
    const auto& c = m.config;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const auto D = static_cast<Eigen::Index>(c.d_model);
    const auto Dh = static_cast<Eigen::Index>(c.d_head);
    const float scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));
    EMat resid(T, D);
    for (Eigen::Index t = 0; t < T; ++t) {
        resid.row(t) = cmap(m.embed).row(tokens[static_cast<std::size_t>(t)]) + cmap(m.pos).row(t);
    }
    tape.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& W = m.layers[l];
        auto& L = tape.layers[l];
        norm_forward(c.norm_kind, resid, W.norm1, L.x1, L.n1);
        L.q.noalias() = L.x1 * cmap(W.wq);
        L.k.noalias() = L.x1 * cmap(W.wk);
        L.v.noalias() = L.x1 * cmap(W.wv);
        L.z.setZero(T, D);
        L.pattern.resize(c.n_heads);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * Dh;
            EMat& P = L.pattern[h];
            P.noalias() = (L.q.middleCols(c0, Dh) * L.k.middleCols(c0, Dh).transpose()) * scale;
            for (Eigen::Index t = 0; t < T; ++t) {
                float mx = -INFINITY;
                for (Eigen::Index s = 0; s <= t; ++s) mx = std::max(mx, P(t, s));
                float sum = 0.0f;
                for (Eigen::Index s = 0; s <= t; ++s) {
                    P(t, s) = std::exp(P(t, s) - mx);
                    sum += P(t, s);
                }
                const float inv = 1.0f / sum;
                for (Eigen::Index s = 0; s <= t; ++s) P(t, s) *= inv;
                for (Eigen::Index s = t + 1; s < T; ++s) P(t, s) = 0.0f;
            }
            L.z.middleCols(c0, Dh).noalias() = P * L.v.middleCols(c0, Dh);
        }
        resid.noalias() += L.z * cmap(W.wo);
        norm_forward(c.norm_kind, resid, W.norm2, L.x2, L.n2);
        L.hpre.noalias() = L.x2 * cmap(W.w_in);
        L.hact = L.hpre.unaryExpr([](float x) { return ops::gelu(x); });
        resid.noalias() += L.hact * cmap(W.w_out);
    }
    norm_forward(c.norm_kind, resid, m.final_norm, tape.xf, tape.nf);
    tape.logits.noalias() = tape.xf * cmap(m.unembed);
    return tape.logits;
}

/// Accumulates gradients of sum_t weight[t] * CE(logits[t], target[t]).
/// Returns the weighted loss.
inline double backward_train(const Model& m, std::span<const TokenId> tokens, std::span<const float> weight, const SeqTape& tape,
                             Model& g) {
    const auto& c = m.config;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    const auto V = static_cast<Eigen::Index>(c.vocab_size);
    const auto Dh = static_cast<Eigen::Index>(c.d_head);
    const float scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));
    double loss = 0.0;
    EMat dlogits = EMat::Zero(T, V);
    for (Eigen::Index t = 0; t + 1 < T; ++t) {
        const float w = weight[static_cast<std::size_t>(t)];
        if (w == 0.0f) continue;
        const auto target = tokens[static_cast<std::size_t>(t + 1)];
        const auto row = tape.logits.row(t);
        const float mx = row.maxCoeff();
        Eigen::RowVectorXf e = (row.array() - mx).exp();
        const float sum = e.sum();
        loss += w * (std::log(static_cast<double>(sum)) + mx - row(target));
        dlogits.row(t) = e / sum * w;
        dlogits(t, target) -= w;
    }
    as_eigen(g.unembed).noalias() += tape.xf.transpose() * dlogits;
    EMat dxf = dlogits * cmap(m.unembed).transpose();
    EMat dr = norm_backward(c.norm_kind, dxf, m.final_norm, tape.nf, g.final_norm);

    for (std::size_t li = c.n_layers; li-- > 0;) {
        const auto& W = m.layers[li];
        auto& G = g.layers[li];
        const auto& L = tape.layers[li];
        // MLP
        as_eigen(G.w_out).noalias() += L.hact.transpose() * dr;
        EMat dh = dr * cmap(W.w_out).transpose();
        dh.array() *= L.hpre.unaryExpr([](float x) { return ops::gelu_grad(x); }).array();
        as_eigen(G.w_in).noalias() += L.x2.transpose() * dh;
        EMat dx2 = dh * cmap(W.w_in).transpose();
        dr += norm_backward(c.norm_kind, dx2, W.norm2, L.n2, G.norm2);
        // attention
        as_eigen(G.wo).noalias() += L.z.transpose() * dr;
        EMat dz = dr * cmap(W.wo).transpose();
        EMat dq(T, dz.cols()), dk(T, dz.cols()), dv(T, dz.cols());
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * Dh;
            const EMat& P = L.pattern[h];
            EMat dP = dz.middleCols(c0, Dh) * L.v.middleCols(c0, Dh).transpose();
            dv.middleCols(c0, Dh).noalias() = P.transpose() * dz.middleCols(c0, Dh);
            EMat dS(T, T);
            for (Eigen::Index t = 0; t < T; ++t) {
                float dot = 0.0f;
                for (Eigen::Index s = 0; s <= t; ++s) dot += dP(t, s) * P(t, s);
                for (Eigen::Index s = 0; s <= t; ++s) dS(t, s) = P(t, s) * (dP(t, s) - dot) * scale;
                for (Eigen::Index s = t + 1; s < T; ++s) dS(t, s) = 0.0f;
            }
            dq.middleCols(c0, Dh).noalias() = dS * L.k.middleCols(c0, Dh);
            dk.middleCols(c0, Dh).noalias() = dS.transpose() * L.q.middleCols(c0, Dh);
        }
        as_eigen(G.wq).noalias() += L.x1.transpose() * dq;
        as_eigen(G.wk).noalias() += L.x1.transpose() * dk;
        as_eigen(G.wv).noalias() += L.x1.transpose() * dv;
        EMat dx1 = dq * cmap(W.wq).transpose();
        dx1.noalias() += dk * cmap(W.wk).transpose();
        dx1.noalias() += dv * cmap(W.wv).transpose();
        dr += norm_backward(c.norm_kind, dx1, W.norm1, L.n1, G.norm1);
    }
    for (Eigen::Index t = 0; t < T; ++t) {
        as_eigen(g.embed).row(tokens[static_cast<std::size_t>(t)]) += dr.row(t);
        as_eigen(g.pos).row(t) += dr.row(t);
    }
    return loss;
}

}  // namespace detail

/// Masked mean cross-entropy over a batch and its gradient (written to
/// `grad`, which is reset first).
inline double loss_and_grad(const Model& m, const std::vector<TrainSequence>& batch, Model& grad) {
    grad = zero_model(m.config);
    std::size_t n_targets = 0;
    for (const auto& s : batch) {
        for (std::size_t t = 1; t < s.mask.size(); ++t) n_targets += s.mask[t];
    }
    if (n_targets == 0) throw Error("loss_and_grad: batch has no graded targets");
    const float w = 1.0f / static_cast<float>(n_targets);
    double loss = 0.0;
    detail::SeqTape tape;
    std::vector<float> weight;
    for (const auto& s : batch) {
        validate_tokens(m.config, s.tokens);
        weight.assign(s.tokens.size(), 0.0f);
        for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) weight[t] = s.mask[t + 1] ? w : 0.0f;
        detail::forward_train(m, s.tokens, tape);
        loss += detail::backward_train(m, s.tokens, weight, tape, grad);
    }
    return loss;
}

/// Same quantity from the engine forward (used to cross-check the trainer).
inline double batch_loss(const Model& m, const std::vector<TrainSequence>& batch) {
    double loss = 0.0;
    std::size_t n = 0;
    for (const auto& s : batch) {
        const Matrix logits = forward(m, s.tokens);
        for (std::size_t t = 1; t < s.tokens.size(); ++t) {
            if (!s.mask[t]) continue;
            const auto row = logits.row(t - 1);
            const float mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (float v : row) sum += std::exp(static_cast<double>(v - mx));
            loss += std::log(sum) + mx - row[static_cast<std::size_t>(s.tokens[t])];
            ++n;
        }
    }
    return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Optimizer and loop
// ---------------------------------------------------------------------------

class Adam {
public:
    Adam(const Model& shape, double beta1, double beta2, double eps)
        : m_(zero_model(shape.config)), v_(zero_model(shape.config)), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(Model& model, Model& grad, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        std::vector<Matrix*> ps, gs, ms, vs;
        for_each_param(model, [&](const std::string&, Matrix& t) { ps.push_back(&t); });
        for_each_param(grad, [&](const std::string&, Matrix& t) { gs.push_back(&t); });
        for_each_param(m_, [&](const std::string&, Matrix& t) { ms.push_back(&t); });
        for_each_param(v_, [&](const std::string&, Matrix& t) { vs.push_back(&t); });
        const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
        const auto step = static_cast<float>(lr / c1);
        const auto rc2 = static_cast<float>(1.0 / std::sqrt(c2));
        const auto eps = static_cast<float>(eps_);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto& p = ps[i]->data;
            const auto& g = gs[i]->data;
            auto& m = ms[i]->data;
            auto& v = vs[i]->data;
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = b1 * m[j] + (1.0f - b1) * g[j];
                v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (std::sqrt(v[j]) * rc2 + eps);
            }
        }
    }

private:
    Model m_, v_;
    double b1_, b2_, eps_;
    std::size_t t_ = 0;
};

inline double grad_norm(Model& grad) {
    double ss = 0.0;
    for_each_param(grad, [&](const std::string&, Matrix& t) {
        for (float x : t.data) ss += static_cast<double>(x) * x;
    });
    return std::sqrt(ss);
}

inline double lr_at(const TrainConfig& c, std::size_t step) {
    if (step < c.warmup) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup);
    if (c.steps <= c.warmup) return c.lr;
    const double p = static_cast<double>(step - c.warmup) / static_cast<double>(c.steps - c.warmup);
    return c.lr_min + 0.5 * (c.lr - c.lr_min) * (1.0 + std::cos(3.14159265358979323846 * p));
}

class Divergence : public Error {
public:
    Divergence(std::size_t step, double loss)
        : Error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"), step(step) {}
    std::size_t step;
};

struct LossPoint {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<LossPoint> curve;
};

/// Mini-batch Adam on freshly sampled sequences; batch i is drawn from
/// derive_seed(seed, i), so a run is fully determined by the config.
inline TrainResult train(const TrainConfig& cfg, std::ostream* log = nullptr, const std::vector<McqaRecord>* bank = nullptr) {
    cfg.validate();
    TrainResult res{init_model(cfg.model, cfg.seed), {}};
    Adam opt(res.model, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Model grad;
    std::optional<std::ofstream> curve;
    if (!cfg.loss_curve_path.empty()) {
        curve.emplace(cfg.loss_curve_path);
        if (!*curve) throw Error("cannot write '" + cfg.loss_curve_path + "'");
        *curve << "step,loss,lr\n";
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = build_dataset(cfg, cfg.batch, derive_seed(cfg.seed ^ 0x7472616eull, step), bank);
        const double loss = loss_and_grad(res.model, batch, grad);
        if (!std::isfinite(loss)) throw Divergence(step, loss);
        if (cfg.grad_clip > 0.0) {
            const double norm = grad_norm(grad);
            if (!std::isfinite(norm)) throw Divergence(step, norm);
            if (norm > cfg.grad_clip) {
                const auto s = static_cast<float>(cfg.grad_clip / norm);
                for_each_param(grad, [&](const std::string&, Matrix& t) {
                    for (auto& x : t.data) x *= s;
                });
            }
        }
        const double lr = lr_at(cfg, step);
        opt.step(res.model, grad, lr);
        res.curve.push_back({step, loss, lr});
        if (curve) *curve << step << ',' << format_real(loss) << ',' << format_real(lr) << '\n';
        if (log && cfg.log_every && step % cfg.log_every == 0) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            *log << "step " << step << " loss " << loss << " lr " << lr << " (" << secs << " s)" << std::endl;
        }
        if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0) {
            save_model(res.model, cfg.checkpoint_path);
        }
    }
    if (!cfg.checkpoint_path.empty()) save_model(res.model, cfg.checkpoint_path);
    return res;
}

// ---------------------------------------------------------------------------
// Accuracy harness
// ---------------------------------------------------------------------------

/// Next-token logits for the last position of a sequence.
using NextLogits = std::function<std::vector<float>(const TokenSeq&)>;

inline NextLogits model_next_logits(const Model& m) {
    return [&m](const TokenSeq& toks) {
        const Matrix lg = forward(m, toks);
        const auto row = lg.row(lg.rows - 1);
        return std::vector<float>(row.begin(), row.end());
    };
}

/// Greedy continuation: appends argmax tokens while they are answer
/// characters (digits, letters), at most `max_new` of them.
inline std::string greedy_answer(const NextLogits& next, TokenSeq prompt, std::size_t max_new, std::size_t max_seq,
                                 const Vocab& vocab = default_vocab()) {
    std::string out;
    for (std::size_t i = 0; i < max_new && prompt.size() < max_seq; ++i) {
        const auto lg = next(prompt);
        const auto best = static_cast<TokenId>(std::max_element(lg.begin(), lg.end()) - lg.begin());
        const auto& sym = vocab.symbol(best);
        if (sym.size() != 1 || !std::isalnum(static_cast<unsigned char>(sym[0]))) break;
        out += sym;
        prompt.push_back(best);
    }
    return out;
}

struct EvalReport {
    double base_acc = 0.0;
    double contrast_acc = 0.0;
    double other_frac = 0.0;
    std::size_t n = 0;
    std::size_t shots = 0;
};

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"base_acc", r.base_acc}, {"contrast_acc", r.contrast_acc}, {"other_frac", r.other_frac}, {"n", r.n}, {"shots", r.shots}};
}

/// Predicts the full answer text for a pair (decoding from x_cont).
using AnswerFn = std::function<std::string(const PromptPair&)>;

/// Buckets each prediction as base answer, contrast answer, or neither.
inline EvalReport eval_accuracy(const AnswerFn& answer, const std::vector<PromptPair>& pairs) {
    if (pairs.empty()) throw Error("eval_accuracy: n must be >= 1");
    std::size_t nb = 0, nc = 0, no = 0;
    for (const auto& p : pairs) {
        const auto a = answer(p);
        if (a == p.query.cont_answer) {
            ++nc;
        } else if (a == p.query.base_answer) {
            ++nb;
        } else {
            ++no;
        }
    }
    const double n = static_cast<double>(pairs.size());
    return {static_cast<double>(nb) / n, static_cast<double>(nc) / n, static_cast<double>(no) / n, pairs.size(),
            pairs.front().spec.n_shots};
}

/// Decodes the query answer: the shared prefix already in x_cont followed by
/// greedy tokens.
inline std::string decode_pair_answer(const NextLogits& next, const PromptPair& p, std::size_t max_seq) {
    std::size_t common = 0;
    const auto& qb = p.query.base_answer;
    const auto& qc = p.query.cont_answer;
    while (common < qb.size() && common < qc.size() && qb[common] == qc[common]) ++common;
    const std::size_t max_len = std::max(qb.size(), qc.size()) + 1;
    return qb.substr(0, common) + greedy_answer(next, p.x_cont, max_len - common, max_seq);
}

inline EvalReport eval_accuracy(const Model& m, TaskSpec spec, std::size_t n, std::size_t shots,
                                const std::vector<McqaRecord>* bank = nullptr) {
    if (n < 1) throw Error("eval_accuracy: n must be >= 1");
    spec.n_shots = shots;
    const auto pairs = sample_suite(spec, n, bank);
    const auto next = model_next_logits(m);
    return eval_accuracy([&](const PromptPair& p) { return decode_pair_answer(next, p, m.config.max_seq); }, pairs);
}

/// Accuracy with `heads` ablated during decoding. Instance mode uses the
/// x_base run extended with the same generated tokens as donor.
inline EvalReport eval_accuracy_ablated(const Model& m, const std::vector<PromptPair>& pairs, const std::vector<HeadRef>& heads,
                                        AblationMode mode, const MeanBank* bank = nullptr) {
    return eval_accuracy(
        [&](const PromptPair& p) {
            const std::size_t prompt_len = p.x_cont.size();
            NextLogits next = [&](const TokenSeq& toks) {
                AblationReference ref;
                ref.bank = bank;
                ref.position = p.positions.final_eq;
                std::optional<ActivationCache> donor;
                if (mode == AblationMode::instance) {
                    TokenSeq d = p.x_base;
                    d.insert(d.end(), toks.begin() + static_cast<std::ptrdiff_t>(prompt_len), toks.end());
                    donor = forward_cached(m, d);
                    ref.donor = &*donor;
                }
                const Matrix lg = ablate_heads(m, toks, heads, mode, ref);
                const auto row = lg.row(lg.rows - 1);
                return std::vector<float>(row.begin(), row.end());
            };
            return decode_pair_answer(next, p, m.config.max_seq);
        },
        pairs);
}

/// Fraction of freshly sampled training-distribution sequences whose final
/// answer is decoded exactly.
inline double in_distribution_accuracy(const Model& m, const TrainConfig& cfg, std::size_t n, std::uint64_t seed,
                                       const Vocab& vocab = default_vocab()) {
    const auto data = build_dataset(cfg, n, seed);
    const auto next = model_next_logits(m);
    std::size_t ok = 0;
    for (const auto& s : data) {
        // last graded run is the final answer plus its terminator
        std::size_t end = s.tokens.size() - 1;
        while (!s.mask[end]) --end;
        std::size_t begin = end;
        while (begin > 0 && s.mask[begin - 1]) --begin;
        TokenSeq prompt(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(begin));
        const std::string want = decode(vocab, std::span<const TokenId>(s.tokens).subspan(begin, end - begin));
        if (greedy_answer(next, prompt, want.size() + 1, m.config.max_seq, vocab) == want) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(n);
}

}  // namespace filab
