// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "specopd/distribution.hpp"
#include "specopd/model.hpp"

namespace specopd {

enum class StopReason : uint8_t { eos = 0, max_len = 1 };

/// One draft-verify round.
struct BlockRecord {
    int anchor{-1};                    // a_m; -1 = sequence start
    std::vector<TokenId> draft_tokens; // d_m, length K
    std::vector<Dist> q_dists;         // transformed draft distribution per position
    int accepted{0};                   // r_m in [0, K]
    TokenId correction_token{-1};      // token the target emitted after verification
    bool terminal{false};
};

/// Verified rollout with per-block records and the target hidden states needed
/// to replay drafting from every anchor.
struct RolloutRecord {
    std::vector<TokenId> prompt;
    std::vector<TokenId> y; // verified response, truncated at EOS / budget
    std::vector<BlockRecord> blocks;
    StopReason stop_reason{StopReason::max_len};

    // target last_hidden rows; hidden_y[i] belongs to verified position y[i]
    // (rows exist for every position the target has forwarded). The two
    // prompt-tail rows cover conditioning for blocks anchored at the start.
    std::vector<std::vector<double>> hidden_y;
    std::vector<double> prompt_hidden_m2; // hidden at x[P-2], empty if P == 1
    std::vector<double> prompt_hidden_m1; // hidden at x[P-1]

    uint64_t seed{0};
    int block_size{0};
    SamplingSpec sampling;
    uint64_t target_fingerprint{0};
    uint64_t draft_fingerprint{0};

    // accounting (over rounds, before EOS/budget truncation of y)
    int64_t target_calls{0};
    int64_t draft_calls{0};
    int64_t emitted_tokens{0}; // Σ r_m + M
    int64_t residual_fallbacks{0};

    int64_t sum_accepted() const {
        int64_t s = 0;
        for (const auto& b : blocks) {
            s += b.accepted;
        }
        return s;
    }

    /// Concatenation of accepted prefixes plus corrections. y is always a
    /// prefix of this stream; they are equal when no EOS/budget truncation
    /// happened inside the final block.
    std::vector<TokenId> reconstructed_stream() const {
        std::vector<TokenId> out;
        for (const auto& b : blocks) {
            out.insert(out.end(), b.draft_tokens.begin(),
                       b.draft_tokens.begin() + b.accepted);
            out.push_back(b.correction_token);
        }
        return out;
    }
};

/// Rows returned by one model scan, in engine precision (64-bit). `hidden`
/// may be empty for models that expose no hidden state (e.g. table models).
struct EngineRows {
    std::vector<std::vector<double>> logits;
    std::vector<std::vector<double>> hidden;
};

// clang-format off
template <class S>
concept TargetSessionLike = requires(S s, std::span<const TokenId> toks, int keep) {
    { s.scan(toks) } -> std::convertible_to<EngineRows>;
    { s.rewind(keep) };
    { s.len() } -> std::convertible_to<int>;
};

template <class S>
concept DraftSessionLike = TargetSessionLike<S> &&
    requires(S s, std::span<const TokenId> toks, std::span<const double> cond) {
        { s.scan_anchored(toks, cond) } -> std::convertible_to<EngineRows>;
    };
// clang-format on

// ---------------------------------------------------------------------------
// verification
// ---------------------------------------------------------------------------

struct VerifyResult {
    int accepted{0};
    TokenId correction{-1};
    bool used_fallback{false};
};

/// Greedy verification: accept the longest prefix matching the target argmax
/// at every step. `target_logits` holds K+1 rows: the distribution source for
/// each drafted position plus the bonus row. Ties break to the lowest id.
inline VerifyResult verify_block_greedy(std::span<const TokenId> d,
                                        const std::vector<Dist>& target_logits) {
    require(target_logits.size() == d.size() + 1, "verify_block_greedy: need K+1 logits rows");
    VerifyResult r;
    for (size_t k = 0; k < d.size(); ++k) {
        const int am = argmax_lowest(target_logits[k]);
        if (d[k] != am) {
            r.accepted = static_cast<int>(k);
            r.correction = am;
            return r;
        }
    }
    r.accepted = static_cast<int>(d.size());
    r.correction = argmax_lowest(target_logits.back());
    return r;
}

/// Lossless stochastic verification: accept d_k with probability
/// min(1, p_k(d_k)/q_k(d_k)); on first rejection sample the correction from
/// the residual normalize(max(0, p_k − q_k)); on full acceptance sample the
/// bonus token from the target row after the block. All distributions are
/// post-sampling-transform.
inline VerifyResult verify_block_stochastic(std::span<const TokenId> d,
                                            const std::vector<Dist>& q_dists,
                                            const std::vector<Dist>& p_dists,
                                            RngStream& accept_rng, RngStream& residual_rng) {
    require(p_dists.size() == d.size() + 1, "verify_block_stochastic: need K+1 target dists");
    require(q_dists.size() == d.size(), "verify_block_stochastic: need K draft dists");
    VerifyResult r;
    for (size_t k = 0; k < d.size(); ++k) {
        const auto t = static_cast<size_t>(d[k]);
        const double q = q_dists[k][t];
        const double p = p_dists[k][t];
        const double ratio = q > 0.0 ? std::min(1.0, p / q) : 1.0;
        if (accept_rng.next_double() < ratio) {
            continue;
        }
        r.accepted = static_cast<int>(k);
        Dist residual(p_dists[k].size());
        double mass = 0.0;
        for (size_t i = 0; i < residual.size(); ++i) {
            residual[i] = std::max(0.0, p_dists[k][i] - q_dists[k][i]);
            mass += residual[i];
        }
        if (mass <= 0.0) {
            // only reachable through numerical clamping; fall back to p itself
            r.used_fallback = true;
            r.correction = sample_index(p_dists[k], residual_rng.next_double());
            return r;
        }
        for (double& v : residual) {
            v /= mass;
        }
        r.correction = sample_index(residual, residual_rng.next_double());
        return r;
    }
    r.accepted = static_cast<int>(d.size());
    r.correction = sample_index(p_dists.back(), residual_rng.next_double());
    return r;
}

/// Closed-form marginal of the first emitted token under one stochastic
/// verification step. Equals p exactly — the losslessness oracle.
inline Dist first_token_marginal_exact(const Dist& p, const Dist& q) {
    require(p.size() == q.size(), "first_token_marginal_exact: size mismatch");
    double reject_mass = 0.0;
    Dist residual(p.size());
    double residual_mass = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double ratio = q[i] > 0.0 ? std::min(1.0, p[i] / q[i]) : 1.0;
        reject_mass += q[i] * (1.0 - ratio);
        residual[i] = std::max(0.0, p[i] - q[i]);
        residual_mass += residual[i];
    }
    Dist out(p.size(), 0.0);
    for (size_t i = 0; i < p.size(); ++i) {
        const double ratio = q[i] > 0.0 ? std::min(1.0, p[i] / q[i]) : 1.0;
        out[i] = q[i] * ratio;
        if (residual_mass > 0.0) {
            out[i] += reject_mass * residual[i] / residual_mass;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// decoding loops
// ---------------------------------------------------------------------------

/// Plain autoregressive decoding. One target scan per emitted token (the
/// prompt prefill yields the first token's distribution), same sampling
/// transform and stream discipline as the speculative path.
template <TargetSessionLike TargetS>
std::pair<std::vector<TokenId>, int64_t> autoregressive_decode(
    TargetS& target, std::span<const TokenId> prompt, int max_new_tokens,
    const SamplingSpec& sampling, uint64_t seed, TokenId eos_id = -1) {
    require(!prompt.empty(), "autoregressive_decode: prompt must be non-empty");
    require(target.len() == 0, "autoregressive_decode: session must be fresh");
    RngStream rng = RngStream::from_seed(seed, "ar/sample");
    std::vector<TokenId> y;
    if (max_new_tokens <= 0) {
        return {y, 0};
    }
    int64_t calls = 1;
    EngineRows rows = target.scan(prompt);
    while (true) {
        const Dist dist = transform_logits<double>(rows.logits.back(), sampling);
        const TokenId tok = sample_from(dist, sampling, rng);
        y.push_back(tok);
        if (tok == eos_id || static_cast<int>(y.size()) >= max_new_tokens) {
            break;
        }
        rows = target.scan(std::span<const TokenId>(&tok, 1));
        ++calls;
    }
    return {y, calls};
}

/// Target-assisted speculative decoding with anchor recording.
///
/// Per round: the draft proposes K tokens from the verified context (anchored
/// on the most recent target hidden state), the target verifies them in one
/// batched scan that also ingests the previous round's correction token, the
/// rejected suffix is rewound, and the anchor advances by r_m + 1.
template <TargetSessionLike TargetS, DraftSessionLike DraftS>
RolloutRecord speculative_decode(TargetS& target, DraftS& draft,
                                 std::span<const TokenId> prompt, int K, int max_new_tokens,
                                 const SamplingSpec& sampling, uint64_t seed,
                                 TokenId eos_id = -1) {
    require(!prompt.empty(), "speculative_decode: prompt must be non-empty");
    require(K >= 1, "speculative_decode: K must be >= 1");
    require(target.len() == 0 && draft.len() == 0, "speculative_decode: sessions must be fresh");

    RolloutRecord rec;
    rec.prompt.assign(prompt.begin(), prompt.end());
    rec.seed = seed;
    rec.block_size = K;
    rec.sampling = sampling;

    RngStream rs_draft = RngStream::from_seed(seed, "spec/draft");
    RngStream rs_accept = RngStream::from_seed(seed, "spec/accept");
    RngStream rs_residual = RngStream::from_seed(seed, "spec/residual");

    const int P = static_cast<int>(prompt.size());
    EngineRows prefill = target.scan(prompt);
    rec.target_calls = 1;
    if (P >= 2) {
        rec.prompt_hidden_m2 = prefill.hidden.empty() ? std::vector<double>{}
                                                      : prefill.hidden[static_cast<size_t>(P - 2)];
    }
    rec.prompt_hidden_m1 =
        prefill.hidden.empty() ? std::vector<double>{} : prefill.hidden.back();
    if (max_new_tokens <= 0) {
        return rec;
    }

    // draft context: everything verified except the newest token, which is
    // consumed as the first anchored input of the next block
    if (P >= 2) {
        draft.scan(prompt.subspan(0, static_cast<size_t>(P - 1)));
    }

    int anchor = -1;
    TokenId pending = prompt.back(); // newest verified token, not yet in caches
    Dist pending_dist_logits = prefill.logits.back();
    bool stopped = false;

    while (!stopped && rec.emitted_tokens < max_new_tokens) {
        // conditioning = target hidden of the token before the first anchored
        // input (the newest hidden the target has computed at this point)
        std::span<const double> cond;
        const int cond_y = anchor - 1; // index into y; -1 -> x[P-1], -2 -> x[P-2]
        if (cond_y >= 0) {
            cond = rec.hidden_y[static_cast<size_t>(cond_y)];
        } else if (cond_y == -1) {
            cond = rec.prompt_hidden_m1;
        } else if (!rec.prompt_hidden_m2.empty()) {
            cond = rec.prompt_hidden_m2;
        }

        // --- draft proposes a block ---
        const int draft_ctx = draft.len();
        std::vector<TokenId> d;
        std::vector<Dist> q_dists;
        TokenId input = pending;
        for (int k = 0; k < K; ++k) {
            EngineRows out = draft.scan_anchored(std::span<const TokenId>(&input, 1), cond);
            Dist q = transform_logits<double>(out.logits[0], sampling);
            const TokenId tok = sample_from(q, sampling, rs_draft);
            d.push_back(tok);
            q_dists.push_back(std::move(q));
            input = tok;
        }
        rec.draft_calls += K;
        draft.rewind(draft_ctx);

        // --- target verifies the block in one batched scan ---
        std::vector<TokenId> scan_tokens;
        const bool head_pending = anchor >= 0; // round 1: prompt tail already scanned
        if (head_pending) {
            scan_tokens.push_back(pending);
        }
        scan_tokens.insert(scan_tokens.end(), d.begin(), d.end());
        const int target_ctx = target.len();
        EngineRows trows = target.scan(scan_tokens);
        rec.target_calls += 1;

        // distribution sources for d_1..d_K plus the bonus row
        std::vector<Dist> p_logits(static_cast<size_t>(K) + 1);
        if (head_pending) {
            for (int k = 0; k <= K; ++k) {
                p_logits[static_cast<size_t>(k)] = trows.logits[static_cast<size_t>(k)];
            }
        } else {
            p_logits[0] = pending_dist_logits;
            for (int k = 1; k <= K; ++k) {
                p_logits[static_cast<size_t>(k)] = trows.logits[static_cast<size_t>(k - 1)];
            }
        }

        VerifyResult vr;
        if (sampling.greedy()) {
            vr = verify_block_greedy(d, p_logits);
        } else {
            std::vector<Dist> p_dists(p_logits.size());
            for (size_t i = 0; i < p_logits.size(); ++i) {
                p_dists[i] = transform_logits<double>(p_logits[i], sampling);
            }
            vr = verify_block_stochastic(d, q_dists, p_dists, rs_accept, rs_residual);
            rec.residual_fallbacks += vr.used_fallback ? 1 : 0;
        }

        // hidden rows for newly forwarded verified tokens: the pending head
        // (if scanned) then the accepted prefix
        if (!trows.hidden.empty()) {
            size_t row = 0;
            if (head_pending) {
                rec.hidden_y.push_back(trows.hidden[row++]);
            }
            for (int k = 0; k < vr.accepted; ++k) {
                rec.hidden_y.push_back(trows.hidden[row++]);
            }
        }

        // verified stream bookkeeping
        rec.emitted_tokens += vr.accepted + 1;
        bool eos_hit = false;
        for (int k = 0; k < vr.accepted && !eos_hit; ++k) {
            rec.y.push_back(d[static_cast<size_t>(k)]);
            eos_hit = d[static_cast<size_t>(k)] == eos_id;
        }
        if (!eos_hit) {
            rec.y.push_back(vr.correction);
            eos_hit = vr.correction == eos_id;
        }

        // drop the rejected suffix from the target cache
        target.rewind(target_ctx + (head_pending ? 1 : 0) + vr.accepted);
        // grow the draft's plain context: old pending plus accepted tokens
        std::vector<TokenId> ingest{pending};
        ingest.insert(ingest.end(), d.begin(), d.begin() + vr.accepted);
        draft.scan(ingest);

        const bool budget_hit = rec.emitted_tokens >= max_new_tokens;
        BlockRecord blk;
        blk.anchor = anchor;
        blk.draft_tokens = std::move(d);
        blk.q_dists = std::move(q_dists);
        blk.accepted = vr.accepted;
        blk.correction_token = vr.correction;
        blk.terminal = eos_hit || budget_hit;
        rec.blocks.push_back(std::move(blk));

        anchor = anchor + vr.accepted + 1;
        pending = vr.correction;
        stopped = eos_hit;
        if (eos_hit) {
            rec.stop_reason = StopReason::eos;
        } else if (budget_hit) {
            rec.stop_reason = StopReason::max_len;
        }
    }

    // truncate the verified stream (and its hidden rows) to the budget
    if (static_cast<int>(rec.y.size()) > max_new_tokens) {
        rec.y.resize(static_cast<size_t>(max_new_tokens));
        rec.stop_reason = StopReason::max_len;
    }
    if (rec.hidden_y.size() > rec.y.size()) {
        rec.hidden_y.resize(rec.y.size());
    }
    return rec;
}

// ---------------------------------------------------------------------------
// draft-only degeneracy demo
// ---------------------------------------------------------------------------

/// distinct-n: unique n-grams over total n-grams; 0 when fewer than n tokens.
inline double distinct_n(std::span<const TokenId> tokens, int n) {
    if (static_cast<int>(tokens.size()) < n) {
        return 0.0;
    }
    std::set<std::vector<TokenId>> grams;
    const size_t total = tokens.size() - static_cast<size_t>(n) + 1;
    for (size_t i = 0; i < total; ++i) {
        grams.insert(std::vector<TokenId>(tokens.begin() + static_cast<ptrdiff_t>(i),
                                          tokens.begin() + static_cast<ptrdiff_t>(i + n)));
    }
    return static_cast<double>(grams.size()) / static_cast<double>(total);
}

struct RepetitionReport {
    std::array<double, 4> distinct{}; // distinct-1 .. distinct-4
    int length{0};
};

inline RepetitionReport repetition_report(std::span<const TokenId> tokens) {
    RepetitionReport r;
    r.length = static_cast<int>(tokens.size());
    for (int n = 1; n <= 4; ++n) {
        r.distinct[static_cast<size_t>(n - 1)] = distinct_n(tokens, n);
    }
    return r;
}

/// Standalone drafter rollout: the drafter consumes only its own outputs,
/// with the conditioning vector frozen at the prompt's final position.
/// Diagnostic only — quantifies how degenerate draft-only generation is.
template <DraftSessionLike DraftS>
std::pair<std::vector<TokenId>, RepetitionReport> draft_only_rollout(
    DraftS& draft, std::span<const TokenId> prompt, int max_new_tokens,
    const SamplingSpec& sampling, uint64_t seed, std::span<const double> frozen_cond,
    TokenId eos_id = -1) {
    require(!prompt.empty(), "draft_only_rollout: prompt must be non-empty");
    require(draft.len() == 0, "draft_only_rollout: session must be fresh");
    RngStream rng = RngStream::from_seed(seed, "draftonly/sample");
    if (prompt.size() >= 2) {
        draft.scan(prompt.subspan(0, prompt.size() - 1));
    }
    std::vector<TokenId> y;
    TokenId input = prompt.back();
    for (int t = 0; t < max_new_tokens; ++t) {
        EngineRows out = draft.scan_anchored(std::span<const TokenId>(&input, 1), frozen_cond);
        const Dist q = transform_logits<double>(out.logits[0], sampling);
        const TokenId tok = sample_from(q, sampling, rng);
        y.push_back(tok);
        if (tok == eos_id) {
            break;
        }
        input = tok;
    }
    return {y, repetition_report(y)};
}

// ---------------------------------------------------------------------------
// transformer session adapters
// ---------------------------------------------------------------------------

namespace detail {

template <ScalarType T>
EngineRows to_engine_rows(const ScanOut<T>& o, bool with_hidden) {
    EngineRows rows;
    const int n = o.logits.rows();
    rows.logits.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto r = o.logits.row(i);
        rows.logits[static_cast<size_t>(i)].assign(r.begin(), r.end());
    }
    if (with_hidden) {
        rows.hidden.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            auto r = o.last_hidden.row(i);
            rows.hidden[static_cast<size_t>(i)].assign(r.begin(), r.end());
        }
    }
    return rows;
}

} // namespace detail

/// Engine adapter over a transformer target model.
template <ScalarType T>
class TransformerTarget {
public:
    explicit TransformerTarget(const Model<T>& m) : session_(m) {}

    EngineRows scan(std::span<const TokenId> toks) {
        return detail::to_engine_rows(session_.scan(toks), true);
    }
    void rewind(int keep) { session_.rewind(keep); }
    int len() const { return session_.len(); }
    void reset() { session_.reset(); }
    Session<T>& session() { return session_; }

private:
    Session<T> session_;
};

/// Engine adapter over a transformer draft model. Conditioning vectors arrive
/// in engine precision and are converted to the model dtype; a zero vector is
/// substituted when the model has draft_conditioning = none.
template <ScalarType T>
class TransformerDraft {
public:
    explicit TransformerDraft(const Model<T>& m)
        : session_(m), zero_(static_cast<size_t>(m.cfg.d_model), T(0)) {}

    EngineRows scan(std::span<const TokenId> toks) {
        return detail::to_engine_rows(session_.scan(toks), false);
    }

    EngineRows scan_anchored(std::span<const TokenId> toks, std::span<const double> cond) {
        const auto& cfg = session_.model().cfg;
        if (cfg.draft_conditioning != DraftConditioning::last_hidden || cond.empty()) {
            return detail::to_engine_rows(session_.scan_anchored(toks, zero_), false);
        }
        require(cond.size() == static_cast<size_t>(cfg.d_model),
                "TransformerDraft: conditioning extent mismatch");
        cond_buf_.assign(cond.size(), T(0));
        for (size_t i = 0; i < cond.size(); ++i) {
            cond_buf_[i] = static_cast<T>(cond[i]);
        }
        return detail::to_engine_rows(session_.scan_anchored(toks, cond_buf_), false);
    }

    void rewind(int keep) { session_.rewind(keep); }
    int len() const { return session_.len(); }
    void reset() { session_.reset(); }
    Session<T>& session() { return session_; }

private:
    Session<T> session_;
    std::vector<T> zero_;
    std::vector<T> cond_buf_;
};

} // namespace specopd
