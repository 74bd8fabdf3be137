// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "specopd/concurrency.hpp"
#include "specopd/optim.hpp"
#include "specopd/replay.hpp"
#include "specopd/rollout_io.hpp"

namespace specopd {

enum class KlMode { dual, all_forward, all_reverse };
enum class RolloutRefresh { per_epoch, once };

struct TrainConfig {
    int block_size{16}; // K
    double gamma{0.8};
    double lambda_acc{1.0};
    double lambda_rej{1.0};
    double lr{3e-4};
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    double weight_decay{0.0};
    double warmup_ratio{0.05};
    int epochs{8};
    uint64_t seed{0};
    SamplingSpec rollout_sampling{0.6, 0.95, 20, 0};
    RolloutRefresh rollout_refresh{RolloutRefresh::per_epoch};
    int max_response_len{256};
    int batch_rollouts{8}; // rollouts per optimizer step

    void validate() const {
        require(block_size >= 1, "TrainConfig: block_size must be >= 1");
        require(gamma > 0.0 && gamma <= 1.0, "TrainConfig: gamma must be in (0,1]");
        require(lambda_acc >= 0.0 && lambda_rej >= 0.0 && lambda_acc + lambda_rej > 0.0,
                "TrainConfig: lambdas must be non-negative and not both zero");
        require(warmup_ratio >= 0.0 && warmup_ratio < 1.0,
                "TrainConfig: warmup_ratio must be in [0,1)");
        require(epochs >= 1 && max_response_len >= 1 && batch_rollouts >= 1,
                "TrainConfig: counts must be positive");
    }

    nlohmann::json to_json() const {
        return {{"block_size", block_size},
                {"gamma", gamma},
                {"lambda_acc", lambda_acc},
                {"lambda_rej", lambda_rej},
                {"lr", lr},
                {"beta1", beta1},
                {"beta2", beta2},
                {"eps", eps},
                {"weight_decay", weight_decay},
                {"warmup_ratio", warmup_ratio},
                {"epochs", epochs},
                {"seed", seed},
                {"sampling",
                 {{"temperature", rollout_sampling.temperature},
                  {"top_p", rollout_sampling.top_p},
                  {"top_k", rollout_sampling.top_k}}},
                {"rollout_refresh",
                 rollout_refresh == RolloutRefresh::per_epoch ? "per_epoch" : "once"},
                {"max_response_len", max_response_len},
                {"batch_rollouts", batch_rollouts}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.block_size = j.value("block_size", c.block_size);
        c.gamma = j.value("gamma", c.gamma);
        c.lambda_acc = j.value("lambda_acc", c.lambda_acc);
        c.lambda_rej = j.value("lambda_rej", c.lambda_rej);
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.eps = j.value("eps", c.eps);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
        c.epochs = j.value("epochs", c.epochs);
        c.seed = j.value("seed", c.seed);
        if (j.contains("sampling")) {
            const auto& s = j.at("sampling");
            c.rollout_sampling.temperature = s.value("temperature", 0.6);
            c.rollout_sampling.top_p = s.value("top_p", 0.95);
            c.rollout_sampling.top_k = s.value("top_k", 20);
        }
        const std::string rr = j.value("rollout_refresh", "per_epoch");
        require(rr == "per_epoch" || rr == "once", "TrainConfig: bad rollout_refresh " + rr);
        c.rollout_refresh =
            rr == "per_epoch" ? RolloutRefresh::per_epoch : RolloutRefresh::once;
        c.max_response_len = j.value("max_response_len", c.max_response_len);
        c.batch_rollouts = j.value("batch_rollouts", c.batch_rollouts);
        c.validate();
        return c;
    }
};

struct TrainLogEntry {
    int64_t step{0};
    int epoch{0};
    double l_acc{0.0};
    double l_rej{0.0};
    double combined{0.0};
    double lr{0.0};
    std::optional<double> tau_holdout;

    nlohmann::json to_json() const {
        nlohmann::json j{{"step", step},     {"epoch", epoch},       {"l_acc", l_acc},
                         {"l_rej", l_rej},   {"combined", combined}, {"lr", lr}};
        if (tau_holdout.has_value()) {
            j["tau_holdout"] = *tau_holdout;
        }
        return j;
    }
};

using TrainLog = std::vector<TrainLogEntry>;

inline void write_train_log(const TrainLog& log, std::ostream& os) {
    for (const auto& e : log) {
        os << e.to_json().dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// differentiable batch loss
// ---------------------------------------------------------------------------

template <ScalarType T>
struct TapeLossResult {
    typename Tape<T>::Var combined{};
    double l_acc{0.0};
    double l_rej{0.0};
    double z{0.0};
    size_t n_acc{0};
    size_t n_rej{0};
};

/// Builds the acceptance-aware objective for a batch of rollouts on one tape.
///
/// Per rollout: one shared plain pass over the verified context, then one
/// anchored pass per block whose logits rows split into the accepted prefix
/// (forward KL against the teacher) and the rejected suffix (reverse KL with
/// γ-decayed weights, normalized by the batch-global Z). λ_rej = 0 or an
/// empty rejected set short-circuits to the accepted term alone, and vice
/// versa.
template <ScalarType T>
TapeLossResult<T> build_opd_loss(Tape<T>& tape, TapeModel<T>& tm,
                                 std::span<const RolloutRecord> rollouts,
                                 std::span<const std::vector<ReplayEntry>> entries,
                                 double gamma, double lambda_acc, double lambda_rej,
                                 KlMode mode = KlMode::dual) {
    using Var = typename Tape<T>::Var;
    require(rollouts.size() == entries.size(), "build_opd_loss: rollouts/entries mismatch");
    const ModelConfig& cfg = tm.model().cfg;
    const bool want_rej = lambda_rej > 0.0;
    const bool want_acc = lambda_acc > 0.0;

    std::optional<Var> acc_sum, rej_sum;
    size_t n_acc = 0, n_rej = 0;
    double z = 0.0;

    auto add_to = [&](std::optional<Var>& slot, Var v) {
        slot = slot.has_value() ? tape.add(*slot, v) : v;
    };

    for (size_t ri = 0; ri < rollouts.size(); ++ri) {
        const RolloutRecord& rec = rollouts[ri];
        if (rec.blocks.empty()) {
            continue;
        }
        const int P = static_cast<int>(rec.prompt.size());
        std::vector<TokenId> full = rec.prompt;
        full.insert(full.end(), rec.y.begin(), rec.y.end());

        const int plain_rows = P + rec.blocks.back().anchor;
        typename TapeModel<T>::Pass plain;
        if (plain_rows > 0) {
            plain = tm.plain_pass(
                std::span<const TokenId>(full.data(), static_cast<size_t>(plain_rows)));
        }

        size_t entry_base = 0;
        for (const auto& blk : rec.blocks) {
            const int a = blk.anchor;
            const int K = static_cast<int>(blk.draft_tokens.size());
            const int r = blk.accepted;
            const int ctx_rows = P + a;

            std::vector<TokenId> scan_toks;
            scan_toks.push_back(full[static_cast<size_t>(P + a)]); // y[a] (x tail at a = -1)
            scan_toks.insert(scan_toks.end(), blk.draft_tokens.begin(),
                             blk.draft_tokens.end() - 1);

            Tensor<T> cond({cfg.d_model});
            if (cfg.draft_conditioning == DraftConditioning::last_hidden) {
                const int cond_y = a - 1;
                const std::vector<double>* src = nullptr;
                if (cond_y >= 0) {
                    src = &rec.hidden_y[static_cast<size_t>(cond_y)];
                } else if (cond_y == -1) {
                    src = &rec.prompt_hidden_m1;
                } else if (!rec.prompt_hidden_m2.empty()) {
                    src = &rec.prompt_hidden_m2;
                }
                if (src != nullptr && !src->empty()) {
                    for (int i = 0; i < cfg.d_model; ++i) {
                        cond.data[i] = static_cast<T>((*src)[static_cast<size_t>(i)]);
                    }
                }
            }

            auto anchored = tm.anchored_pass(scan_toks, plain, ctx_rows, cond, ctx_rows);
            Var logits = tm.logits(anchored.hidden);

            Tensor<T> teacher_rows({K, cfg.vocab_size});
            for (int k = 0; k < K; ++k) {
                const ReplayEntry& e = entries[ri][entry_base + static_cast<size_t>(k)];
                require(e.block == static_cast<int>(&blk - rec.blocks.data()) && e.k == k + 1,
                        "build_opd_loss: entries out of order");
                for (int j = 0; j < cfg.vocab_size; ++j) {
                    teacher_rows.at(k, j) = static_cast<T>(e.teacher[static_cast<size_t>(j)]);
                }
            }
            entry_base += static_cast<size_t>(K);

            if (want_acc && r > 0) {
                Var part = tape.slice_rows(logits, 0, r);
                Tensor<T> prows({r, cfg.vocab_size});
                std::copy_n(teacher_rows.data.data(), static_cast<size_t>(r) * cfg.vocab_size,
                            prows.data.data());
                Var kl = mode == KlMode::all_reverse ? tape.reverse_kl_rows(part, prows)
                                                     : tape.forward_kl_rows(part, prows);
                add_to(acc_sum, tape.sum(kl));
                n_acc += static_cast<size_t>(r);
            }
            if (want_rej && r < K) {
                Var part = tape.slice_rows(logits, r, K);
                Tensor<T> prows({K - r, cfg.vocab_size});
                std::copy_n(teacher_rows.data.data() + static_cast<size_t>(r) * cfg.vocab_size,
                            static_cast<size_t>(K - r) * cfg.vocab_size, prows.data.data());
                Var kl = mode == KlMode::all_forward ? tape.forward_kl_rows(part, prows)
                                                     : tape.reverse_kl_rows(part, prows);
                std::vector<double> w(static_cast<size_t>(K - r));
                for (int k = r + 1; k <= K; ++k) {
                    w[static_cast<size_t>(k - r - 1)] = rejection_weight(gamma, k);
                    z += w[static_cast<size_t>(k - r - 1)];
                }
                add_to(rej_sum, tape.weighted_sum(kl, std::move(w)));
                n_rej += static_cast<size_t>(K - r);
            }
        }
    }

    TapeLossResult<T> res;
    res.n_acc = n_acc;
    res.n_rej = n_rej;
    res.z = z;
    std::optional<Var> l_acc, l_rej;
    if (acc_sum.has_value() && n_acc > 0) {
        l_acc = tape.scale(*acc_sum, 1.0 / static_cast<double>(n_acc));
        res.l_acc = static_cast<double>(tape.value(*l_acc).data[0]);
    }
    if (rej_sum.has_value() && z > 0.0) {
        l_rej = tape.scale(*rej_sum, 1.0 / z);
        res.l_rej = static_cast<double>(tape.value(*l_rej).data[0]);
    }
    if (l_acc.has_value() && l_rej.has_value()) {
        res.combined = tape.scale(tape.add(tape.scale(*l_acc, lambda_acc),
                                           tape.scale(*l_rej, lambda_rej)),
                                  1.0 / (lambda_acc + lambda_rej));
    } else if (l_acc.has_value()) {
        res.combined = *l_acc;
    } else if (l_rej.has_value()) {
        res.combined = *l_rej;
    } else {
        fail("build_opd_loss: batch contributed no loss terms");
    }
    return res;
}

// ---------------------------------------------------------------------------
// trajectory generation and teacher-forced tiling
// ---------------------------------------------------------------------------

/// Autoregressive target trajectory packaged with the hidden rows needed for
/// anchored training. Blocks are left empty; tile_teacher_forced adds them.
template <ScalarType T>
RolloutRecord generate_trajectory_record(const Model<T>& target,
                                         std::span<const TokenId> prompt, int max_new_tokens,
                                         const SamplingSpec& sampling, uint64_t seed,
                                         TokenId eos_id = -1) {
    require(!prompt.empty(), "generate_trajectory_record: empty prompt");
    RolloutRecord rec;
    rec.prompt.assign(prompt.begin(), prompt.end());
    rec.seed = seed;
    rec.sampling = sampling;
    rec.target_fingerprint = target.params.fingerprint();

    Session<T> session(target);
    RngStream rng = RngStream::from_seed(seed, "traj/sample");
    auto out = session.scan(prompt);
    const int P = static_cast<int>(prompt.size());
    auto hidden_row = [&](const ScanOut<T>& o, int r) {
        std::vector<double> h(static_cast<size_t>(o.last_hidden.cols()));
        for (int j = 0; j < o.last_hidden.cols(); ++j) {
            h[static_cast<size_t>(j)] = static_cast<double>(o.last_hidden.at(r, j));
        }
        return h;
    };
    if (P >= 2) {
        rec.prompt_hidden_m2 = hidden_row(out, P - 2);
    }
    rec.prompt_hidden_m1 = hidden_row(out, P - 1);

    Dist last_logits(static_cast<size_t>(out.logits.cols()));
    for (int j = 0; j < out.logits.cols(); ++j) {
        last_logits[static_cast<size_t>(j)] =
            static_cast<double>(out.logits.at(out.logits.rows() - 1, j));
    }
    for (int t = 0; t < max_new_tokens; ++t) {
        const Dist dist = transform_logits<double>(last_logits, sampling);
        const TokenId tok = sample_from(dist, sampling, rng);
        rec.y.push_back(tok);
        rec.target_calls += 1;
        if (tok == eos_id) {
            rec.stop_reason = StopReason::eos;
            break;
        }
        if (t + 1 >= max_new_tokens) {
            rec.stop_reason = StopReason::max_len;
            break;
        }
        auto o = session.scan(std::span<const TokenId>(&tok, 1));
        rec.hidden_y.push_back(hidden_row(o, 0));
        for (int j = 0; j < o.logits.cols(); ++j) {
            last_logits[static_cast<size_t>(j)] = static_cast<double>(o.logits.at(0, j));
        }
    }
    return rec;
}

/// Replaces a record's blocks with teacher-forced blocks tiling the verified
/// response: spans [offset, offset+K), ... of y become all-accepted blocks.
/// This is the learning signal of offline distillation and of the naive
/// target-assisted baseline (zero rejected entries by construction).
inline RolloutRecord tile_teacher_forced(const RolloutRecord& src, int K, int offset) {
    require(K >= 1, "tile_teacher_forced: K must be >= 1");
    RolloutRecord rec = src;
    rec.blocks.clear();
    const int T = static_cast<int>(rec.y.size());
    const int max_pred = std::min(T, static_cast<int>(rec.hidden_y.size()) + 1);
    offset = ((offset % K) + K) % K;
    int s = 0;
    while (s < max_pred) {
        const int e = std::min(s == 0 && offset > 0 ? offset : s + K, max_pred);
        BlockRecord blk;
        blk.anchor = s - 1;
        blk.draft_tokens.assign(rec.y.begin() + s, rec.y.begin() + e);
        blk.accepted = e - s;
        blk.correction_token = -1;
        blk.terminal = e == max_pred;
        rec.blocks.push_back(std::move(blk));
        s = e;
    }
    return rec;
}

// ---------------------------------------------------------------------------
// rollout collection and held-out evaluation
// ---------------------------------------------------------------------------

template <ScalarType T>
std::vector<RolloutRecord> collect_rollouts(const Model<T>& target, const Model<T>& draft,
                                            std::span<const std::vector<TokenId>> prompts,
                                            int K, int max_new_tokens,
                                            const SamplingSpec& sampling, uint64_t seed,
                                            TokenId eos_id, int workers = default_workers()) {
    std::vector<RolloutRecord> out(prompts.size());
    const uint64_t tfp = target.params.fingerprint();
    const uint64_t dfp = draft.params.fingerprint();
    parallel_for_ordered(
        static_cast<int>(prompts.size()),
        [&](int i) {
            TransformerTarget<T> ts(target);
            TransformerDraft<T> ds(draft);
            const uint64_t s =
                RngStream::from_seed(seed, "rollout").fork(static_cast<uint64_t>(i)).key();
            out[static_cast<size_t>(i)] = speculative_decode(
                ts, ds, prompts[static_cast<size_t>(i)], K, max_new_tokens, sampling, s, eos_id);
            out[static_cast<size_t>(i)].target_fingerprint = tfp;
            out[static_cast<size_t>(i)].draft_fingerprint = dfp;
        },
        workers);
    return out;
}

/// Mean accepted length over all verification rounds of greedy decodes on a
/// prompt set (the variance-free gating metric).
template <ScalarType T>
double eval_tau(const Model<T>& target, const Model<T>& draft,
                std::span<const std::vector<TokenId>> prompts, int K, int max_new_tokens,
                TokenId eos_id, int workers = default_workers()) {
    std::vector<int64_t> acc(prompts.size(), 0), blocks(prompts.size(), 0);
    SamplingSpec greedy;
    parallel_for_ordered(
        static_cast<int>(prompts.size()),
        [&](int i) {
            TransformerTarget<T> ts(target);
            TransformerDraft<T> ds(draft);
            auto rec = speculative_decode(ts, ds, prompts[static_cast<size_t>(i)], K,
                                          max_new_tokens, greedy, 0, eos_id);
            acc[static_cast<size_t>(i)] = rec.sum_accepted();
            blocks[static_cast<size_t>(i)] = static_cast<int64_t>(rec.blocks.size());
        },
        workers);
    int64_t a = 0, b = 0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        a += acc[i];
        b += blocks[i];
    }
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

struct OpdOptions {
    KlMode mode{KlMode::dual};
    bool naive_rollout{false};  // replace blocks with teacher-forced tiling
    bool random_anchors{false}; // fresh blocks drafted at random anchors
};

namespace detail {

/// Fresh block drafted and verified at a given anchor of an existing rollout
/// (random-anchors ablation). Sessions arrive positioned at the anchor's
/// context; they are rewound before returning.
template <ScalarType T>
BlockRecord draft_and_verify_at(const Model<T>& draft_model, Session<T>& target_s,
                                Session<T>& draft_s, const RolloutRecord& rec, int anchor,
                                int K, const SamplingSpec& sampling, RngStream& dr,
                                RngStream& ar, RngStream& rr) {
    const int P = static_cast<int>(rec.prompt.size());
    const int ctx_rows = P + anchor;
    require(target_s.len() == ctx_rows && draft_s.len() == ctx_rows,
            "draft_and_verify_at: sessions not at the anchor context");

    std::vector<T> cond(static_cast<size_t>(draft_model.cfg.d_model), T(0));
    if (draft_model.cfg.draft_conditioning == DraftConditioning::last_hidden) {
        const int cond_y = anchor - 1;
        const std::vector<double>* src = nullptr;
        if (cond_y >= 0) {
            src = &rec.hidden_y[static_cast<size_t>(cond_y)];
        } else if (cond_y == -1) {
            src = &rec.prompt_hidden_m1;
        } else if (!rec.prompt_hidden_m2.empty()) {
            src = &rec.prompt_hidden_m2;
        }
        if (src != nullptr) {
            for (size_t i = 0; i < src->size(); ++i) {
                cond[i] = static_cast<T>((*src)[i]);
            }
        }
    }

    const TokenId anchor_tok =
        anchor >= 0 ? rec.y[static_cast<size_t>(anchor)] : rec.prompt.back();
    std::vector<TokenId> d;
    std::vector<Dist> q_dists;
    TokenId input = anchor_tok;
    for (int k = 0; k < K; ++k) {
        auto out = draft_s.scan_anchored(std::span<const TokenId>(&input, 1), cond);
        Dist q = transform_logits<T>(out.logits.row(0), sampling);
        const TokenId tok = sample_from(q, sampling, dr);
        d.push_back(tok);
        q_dists.push_back(std::move(q));
        input = tok;
    }
    draft_s.rewind(ctx_rows);

    std::vector<TokenId> scan_toks{anchor_tok};
    scan_toks.insert(scan_toks.end(), d.begin(), d.end());
    auto t_out = target_s.scan(scan_toks);
    std::vector<Dist> p_rows(static_cast<size_t>(K) + 1);
    for (int k = 0; k <= K; ++k) {
        p_rows[static_cast<size_t>(k)].resize(static_cast<size_t>(t_out.logits.cols()));
        for (int j = 0; j < t_out.logits.cols(); ++j) {
            p_rows[static_cast<size_t>(k)][static_cast<size_t>(j)] =
                static_cast<double>(t_out.logits.at(k, j));
        }
    }
    target_s.rewind(ctx_rows);

    VerifyResult vr;
    if (sampling.greedy()) {
        vr = verify_block_greedy(d, p_rows);
    } else {
        std::vector<Dist> p_dists(p_rows.size());
        for (size_t i = 0; i < p_rows.size(); ++i) {
            p_dists[i] = transform_logits<double>(p_rows[i], sampling);
        }
        vr = verify_block_stochastic(d, q_dists, p_dists, ar, rr);
    }

    BlockRecord blk;
    blk.anchor = anchor;
    blk.draft_tokens = std::move(d);
    blk.q_dists = std::move(q_dists);
    blk.accepted = vr.accepted;
    blk.correction_token = vr.correction;
    return blk;
}

/// Rebuilds a rollout's blocks at uniformly drawn anchors (count-matched,
/// without replacement), drafting and verifying fresh blocks there.
template <ScalarType T>
RolloutRecord reanchor_random(const Model<T>& target, const Model<T>& draft,
                              const RolloutRecord& src, const SamplingSpec& sampling,
                              uint64_t seed) {
    const int M = static_cast<int>(src.blocks.size());
    const int max_anchor =
        std::min(static_cast<int>(src.y.size()) - 1, static_cast<int>(src.hidden_y.size()));
    if (M == 0 || max_anchor < 0) {
        return src;
    }
    RngStream pick = RngStream::from_seed(seed, "reanchor/pick");
    std::vector<int> pool(static_cast<size_t>(max_anchor) + 1);
    for (int i = 0; i <= max_anchor; ++i) {
        pool[static_cast<size_t>(i)] = i;
    }
    // partial Fisher-Yates draw of min(M, pool) anchors
    const int take = std::min<int>(M, static_cast<int>(pool.size()));
    for (int i = 0; i < take; ++i) {
        const auto j = i + static_cast<int>(pick.next_below(pool.size() - static_cast<size_t>(i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    std::vector<int> anchors(pool.begin(), pool.begin() + take);
    std::sort(anchors.begin(), anchors.end());

    RngStream dr = RngStream::from_seed(seed, "reanchor/draft");
    RngStream ar = RngStream::from_seed(seed, "reanchor/accept");
    RngStream rr = RngStream::from_seed(seed, "reanchor/residual");

    RolloutRecord rec = src;
    rec.blocks.clear();
    const int P = static_cast<int>(rec.prompt.size());
    std::vector<TokenId> full = rec.prompt;
    full.insert(full.end(), rec.y.begin(), rec.y.end());
    Session<T> ts(target);
    Session<T> ds(draft);
    const int K = src.block_size > 0 ? src.block_size
                                     : static_cast<int>(src.blocks.front().draft_tokens.size());
    for (int a : anchors) {
        const int ctx_rows = P + a;
        if (ts.len() < ctx_rows) {
            ts.scan(std::span<const TokenId>(full.data() + ts.len(),
                                             static_cast<size_t>(ctx_rows - ts.len())));
        }
        if (ds.len() < ctx_rows) {
            ds.scan(std::span<const TokenId>(full.data() + ds.len(),
                                             static_cast<size_t>(ctx_rows - ds.len())));
        }
        rec.blocks.push_back(
            draft_and_verify_at(draft, ts, ds, rec, a, K, sampling, dr, ar, rr));
    }
    rec.blocks.back().terminal = true;
    return rec;
}

} // namespace detail

/// On-policy training loop: (re)collect rollouts per the refresh policy,
/// replay them, and minimize the combined objective with AdamW under a
/// cosine-with-warmup schedule. The draft must arrive warm-started.
template <ScalarType T>
TrainLog opd_train(const Model<T>& target, Model<T>& draft,
                   std::span<const std::vector<TokenId>> prompt_pool,
                   std::span<const std::vector<TokenId>> holdout_prompts,
                   const TrainConfig& cfg, TokenId eos_id, const OpdOptions& opt = {},
                   int workers = default_workers()) {
    cfg.validate();
    require(!prompt_pool.empty(), "opd_train: empty prompt pool");
    const auto trainable = draft.trainable_paths();

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(prompt_pool.size()) + cfg.batch_rollouts - 1) /
        cfg.batch_rollouts;
    CosineWarmupSchedule sched{cfg.lr, cfg.warmup_ratio, steps_per_epoch * cfg.epochs};
    AdamWConfig adam{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
    AdamWState<T> state;

    TrainLog log;
    int64_t step = 0;
    std::vector<RolloutRecord> rollouts;
    std::vector<std::vector<ReplayEntry>> entries;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool refresh = epoch == 0 || cfg.rollout_refresh == RolloutRefresh::per_epoch;
        if (refresh) {
            const uint64_t epoch_seed =
                RngStream::from_seed(cfg.seed, "opd/epoch").fork(static_cast<uint64_t>(epoch)).key();
            rollouts = collect_rollouts(target, draft, prompt_pool, cfg.block_size,
                                        cfg.max_response_len, cfg.rollout_sampling, epoch_seed,
                                        eos_id, workers);
            if (opt.naive_rollout) {
                for (size_t i = 0; i < rollouts.size(); ++i) {
                    rollouts[i] = tile_teacher_forced(rollouts[i], cfg.block_size, epoch);
                }
            } else if (opt.random_anchors) {
                std::vector<RolloutRecord> redone(rollouts.size());
                parallel_for_ordered(
                    static_cast<int>(rollouts.size()),
                    [&](int i) {
                        redone[static_cast<size_t>(i)] = detail::reanchor_random(
                            target, draft, rollouts[static_cast<size_t>(i)],
                            cfg.rollout_sampling,
                            RngStream::from_seed(epoch_seed, "reanchor")
                                .fork(static_cast<uint64_t>(i))
                                .key());
                    },
                    workers);
                rollouts = std::move(redone);
            }
            entries.assign(rollouts.size(), {});
            parallel_for_ordered(
                static_cast<int>(rollouts.size()),
                [&](int i) {
                    entries[static_cast<size_t>(i)] = collect_replay(
                        rollouts[static_cast<size_t>(i)], target, draft, cfg.gamma, false);
                },
                workers);
        }

        for (int64_t b = 0; b < steps_per_epoch; ++b) {
            const size_t lo = static_cast<size_t>(b) * cfg.batch_rollouts;
            const size_t hi = std::min(rollouts.size(), lo + cfg.batch_rollouts);
            if (lo >= hi) {
                break;
            }
            Tape<T> tape;
            TapeModel<T> tm(tape, draft);
            auto res = build_opd_loss<T>(
                tape, tm, std::span<const RolloutRecord>(rollouts.data() + lo, hi - lo),
                std::span<const std::vector<ReplayEntry>>(entries.data() + lo, hi - lo),
                cfg.gamma, cfg.lambda_acc, cfg.lambda_rej, opt.mode);
            const double loss = static_cast<double>(tape.value(res.combined).data[0]);
            require(std::isfinite(loss), "opd_train: non-finite loss, training diverged");
            tape.backward(res.combined);
            auto grads = tape.grad_map();
            adamw_step(draft.params, trainable, grads, state, adam, sched, step);

            TrainLogEntry le;
            le.step = step;
            le.epoch = epoch;
            le.l_acc = res.l_acc;
            le.l_rej = res.l_rej;
            le.combined = loss;
            le.lr = sched.lr(step);
            log.push_back(le);
            ++step;
        }

        if (!holdout_prompts.empty()) {
            log.back().tau_holdout = eval_tau(target, draft, holdout_prompts, cfg.block_size,
                                              cfg.max_response_len, eos_id, workers);
        }
    }
    return log;
}

/// Offline distillation on fixed target trajectories: teacher-forced blocks
/// tiled over each trajectory (re-tiled per epoch with a rotating offset),
/// forward KL only. The trajectories never change — this is the baseline that
/// plateaus.
template <ScalarType T>
TrainLog sft_train(const Model<T>& target, Model<T>& draft,
                   std::span<const RolloutRecord> trajectories,
                   std::span<const std::vector<TokenId>> holdout_prompts,
                   const TrainConfig& cfg, TokenId eos_id, int workers = default_workers()) {
    cfg.validate();
    require(!trajectories.empty(), "sft_train: no trajectories");
    const auto trainable = draft.trainable_paths();

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(trajectories.size()) + cfg.batch_rollouts - 1) /
        cfg.batch_rollouts;
    CosineWarmupSchedule sched{cfg.lr, cfg.warmup_ratio, steps_per_epoch * cfg.epochs};
    AdamWConfig adam{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
    AdamWState<T> state;

    TrainLog log;
    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<RolloutRecord> tiled(trajectories.size());
        std::vector<std::vector<ReplayEntry>> entries(trajectories.size());
        const uint64_t dfp = draft.params.fingerprint();
        parallel_for_ordered(
            static_cast<int>(trajectories.size()),
            [&](int i) {
                tiled[static_cast<size_t>(i)] =
                    tile_teacher_forced(trajectories[static_cast<size_t>(i)], cfg.block_size,
                                        epoch + i);
                tiled[static_cast<size_t>(i)].draft_fingerprint = dfp;
                entries[static_cast<size_t>(i)] = collect_replay(
                    tiled[static_cast<size_t>(i)], target, draft, cfg.gamma, false);
            },
            workers);

        for (int64_t b = 0; b < steps_per_epoch; ++b) {
            const size_t lo = static_cast<size_t>(b) * cfg.batch_rollouts;
            const size_t hi = std::min(tiled.size(), lo + cfg.batch_rollouts);
            if (lo >= hi) {
                break;
            }
            Tape<T> tape;
            TapeModel<T> tm(tape, draft);
            auto res = build_opd_loss<T>(
                tape, tm, std::span<const RolloutRecord>(tiled.data() + lo, hi - lo),
                std::span<const std::vector<ReplayEntry>>(entries.data() + lo, hi - lo),
                cfg.gamma, 1.0, 0.0, KlMode::dual);
            const double loss = static_cast<double>(tape.value(res.combined).data[0]);
            require(std::isfinite(loss), "sft_train: non-finite loss, training diverged");
            tape.backward(res.combined);
            auto grads = tape.grad_map();
            adamw_step(draft.params, trainable, grads, state, adam, sched, step);

            TrainLogEntry le;
            le.step = step;
            le.epoch = epoch;
            le.l_acc = res.l_acc;
            le.l_rej = 0.0;
            le.combined = loss;
            le.lr = sched.lr(step);
            log.push_back(le);
            ++step;
        }
        if (!holdout_prompts.empty()) {
            log.back().tau_holdout = eval_tau(target, draft, holdout_prompts, cfg.block_size,
                                              cfg.max_response_len, eos_id, workers);
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// target language-model training
// ---------------------------------------------------------------------------

/// Next-token cross-entropy training of a standalone model. Per-sequence
/// gradients are computed on independent tapes in parallel and reduced in
/// sequence order, so results do not depend on the worker count.
template <ScalarType T>
TrainLog lm_train(Model<T>& model, std::span<const std::vector<TokenId>> sequences,
                  const TrainConfig& cfg, int workers = default_workers()) {
    cfg.validate();
    require(!sequences.empty(), "lm_train: no sequences");
    const auto trainable = model.trainable_paths();

    std::vector<size_t> order(sequences.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    const int64_t steps_per_epoch =
        (static_cast<int64_t>(sequences.size()) + cfg.batch_rollouts - 1) / cfg.batch_rollouts;
    CosineWarmupSchedule sched{cfg.lr, cfg.warmup_ratio, steps_per_epoch * cfg.epochs};
    AdamWConfig adam{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
    AdamWState<T> state;

    TrainLog log;
    int64_t step = 0;
    RngStream shuffle_rng = RngStream::from_seed(cfg.seed, "lm/shuffle");
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = shuffle_rng.next_below(i);
            std::swap(order[i - 1], order[j]);
        }
        for (int64_t b = 0; b < steps_per_epoch; ++b) {
            const size_t lo = static_cast<size_t>(b) * cfg.batch_rollouts;
            const size_t hi = std::min(order.size(), lo + cfg.batch_rollouts);
            if (lo >= hi) {
                break;
            }
            const int nb = static_cast<int>(hi - lo);
            std::vector<std::map<std::string, Tensor<T>>> grads(static_cast<size_t>(nb));
            std::vector<double> sums(static_cast<size_t>(nb), 0.0);
            std::vector<int64_t> counts(static_cast<size_t>(nb), 0);
            parallel_for_ordered(
                nb,
                [&](int bi) {
                    const auto& seq = sequences[order[lo + static_cast<size_t>(bi)]];
                    if (seq.size() < 2) {
                        return;
                    }
                    Tape<T> tape;
                    TapeModel<T> tm(tape, model);
                    auto pass = tm.plain_pass(
                        std::span<const TokenId>(seq.data(), seq.size() - 1));
                    auto logits = tm.logits(pass.hidden);
                    std::vector<int> targets(seq.begin() + 1, seq.end());
                    auto ce = tape.cross_entropy_rows(logits, targets);
                    auto total = tape.sum(ce);
                    tape.backward(total);
                    grads[static_cast<size_t>(bi)] = tape.grad_map();
                    sums[static_cast<size_t>(bi)] =
                        static_cast<double>(tape.value(total).data[0]);
                    counts[static_cast<size_t>(bi)] = static_cast<int64_t>(targets.size());
                },
                workers);

            int64_t total_count = 0;
            double total_sum = 0.0;
            for (int bi = 0; bi < nb; ++bi) {
                total_count += counts[static_cast<size_t>(bi)];
                total_sum += sums[static_cast<size_t>(bi)];
            }
            if (total_count == 0) {
                continue;
            }
            std::map<std::string, Tensor<T>> reduced;
            for (int bi = 0; bi < nb; ++bi) {
                for (auto& [path, g] : grads[static_cast<size_t>(bi)]) {
                    auto it = reduced.find(path);
                    if (it == reduced.end()) {
                        reduced.emplace(path, g);
                    } else {
                        for (int64_t e = 0; e < g.numel(); ++e) {
                            it->second.data[e] += g.data[e];
                        }
                    }
                }
            }
            const T inv = static_cast<T>(1.0 / static_cast<double>(total_count));
            for (auto& [path, g] : reduced) {
                for (auto& v : g.data) {
                    v *= inv;
                }
            }
            const double loss = total_sum / static_cast<double>(total_count);
            require(std::isfinite(loss), "lm_train: non-finite loss, training diverged");
            adamw_step(model.params, trainable, reduced, state, adam, sched, step);

            TrainLogEntry le;
            le.step = step;
            le.epoch = epoch;
            le.l_acc = loss; // next-token NLL
            le.combined = loss;
            le.lr = sched.lr(step);
            log.push_back(le);
            ++step;
        }
    }
    return log;
}

/// Mean next-token NLL of a model on token sequences (evaluation only).
template <ScalarType T>
double eval_mean_nll(const Model<T>& model, std::span<const std::vector<TokenId>> sequences,
                     int workers = default_workers()) {
    std::vector<double> sums(sequences.size(), 0.0);
    std::vector<int64_t> counts(sequences.size(), 0);
    parallel_for_ordered(
        static_cast<int>(sequences.size()),
        [&](int i) {
            const auto& seq = sequences[static_cast<size_t>(i)];
            if (seq.size() < 2) {
                return;
            }
            Session<T> s(model);
            auto out = s.scan(std::span<const TokenId>(seq.data(), seq.size() - 1));
            double acc = 0.0;
            for (size_t t = 0; t + 1 < seq.size(); ++t) {
                const Dist p = softmax_dist<T>(out.logits.row(static_cast<int>(t)));
                acc -= flog(p[static_cast<size_t>(seq[t + 1])]);
            }
            sums[static_cast<size_t>(i)] = acc;
            counts[static_cast<size_t>(i)] = static_cast<int64_t>(seq.size()) - 1;
        },
        workers);
    double s = 0.0;
    int64_t c = 0;
    for (size_t i = 0; i < sequences.size(); ++i) {
        s += sums[i];
        c += counts[i];
    }
    return c == 0 ? 0.0 : s / static_cast<double>(c);
}

/// Offline trajectory set for SFT, one target sample per prompt.
template <ScalarType T>
std::vector<RolloutRecord> generate_trajectories(
    const Model<T>& target, std::span<const std::vector<TokenId>> prompts, int max_new_tokens,
    const SamplingSpec& sampling, uint64_t seed, TokenId eos_id,
    int workers = default_workers()) {
    std::vector<RolloutRecord> out(prompts.size());
    parallel_for_ordered(
        static_cast<int>(prompts.size()),
        [&](int i) {
            const uint64_t s =
                RngStream::from_seed(seed, "traj").fork(static_cast<uint64_t>(i)).key();
            out[static_cast<size_t>(i)] =
                generate_trajectory_record(target, prompts[static_cast<size_t>(i)],
                                           max_new_tokens, sampling, s, eos_id);
        },
        workers);
    return out;
}

// ---------------------------------------------------------------------------
// ablation variants
// ---------------------------------------------------------------------------

enum class AblationKind { all_forward, all_reverse, random_anchors, no_weight_decay,
                          naive_rollout };

inline AblationKind ablation_kind_from_string(const std::string& s) {
    if (s == "all_forward") {
        return AblationKind::all_forward;
    }
    if (s == "all_reverse") {
        return AblationKind::all_reverse;
    }
    if (s == "random_anchors") {
        return AblationKind::random_anchors;
    }
    if (s == "no_weight_decay") {
        return AblationKind::no_weight_decay;
    }
    if (s == "naive_rollout") {
        return AblationKind::naive_rollout;
    }
    fail("unknown ablation kind '" + s + "'");
}

inline std::string to_string(AblationKind k) {
    switch (k) {
    case AblationKind::all_forward: return "all_forward";
    case AblationKind::all_reverse: return "all_reverse";
    case AblationKind::random_anchors: return "random_anchors";
    case AblationKind::no_weight_decay: return "no_weight_decay";
    case AblationKind::naive_rollout: return "naive_rollout";
    }
    fail("unreachable");
}

/// One component ablation under the same training loop as opd_train.
template <ScalarType T>
TrainLog ablation_variant(AblationKind kind, const Model<T>& target, Model<T>& draft,
                          std::span<const std::vector<TokenId>> prompt_pool,
                          std::span<const std::vector<TokenId>> holdout_prompts,
                          TrainConfig cfg, TokenId eos_id, int workers = default_workers()) {
    OpdOptions opt;
    switch (kind) {
    case AblationKind::all_forward:
        opt.mode = KlMode::all_forward;
        break;
    case AblationKind::all_reverse:
        opt.mode = KlMode::all_reverse;
        break;
    case AblationKind::random_anchors:
        opt.random_anchors = true;
        break;
    case AblationKind::no_weight_decay:
        cfg.gamma = 1.0; // removes the position decay, not the optimizer decay
        break;
    case AblationKind::naive_rollout:
        opt.naive_rollout = true;
        break;
    }
    return opd_train(target, draft, prompt_pool, holdout_prompts, cfg, eos_id, opt, workers);
}

} // namespace specopd
