// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "specopd/specdec.hpp"

namespace specopd {

enum class ReplayLabel : uint8_t { accepted = 0, rejected = 1 };

/// One drafted token replayed under both models on the identical
/// draft-generated prefix (c_m, d_{m,<k}).
struct ReplayEntry {
    int block{0};           // m, 0-based
    int k{1};               // position in block, 1-based
    TokenId token{-1};      // d_{m,k}
    Dist student;           // q_{m,k}, raw softmax under the draft model
    Dist teacher;           // p_{m,k}, raw softmax under the target model
    double student_logprob{0.0}; // log q_{m,k}(d_{m,k})
    double teacher_logprob{0.0}; // log p_{m,k}(d_{m,k})
    ReplayLabel label{ReplayLabel::accepted};
    double weight{1.0};     // γ^(k−1), used for rejected entries
    bool stale{false};      // rollout predates the current draft parameters
};

/// w_k = γ^(k−1)
inline double rejection_weight(double gamma, int k) {
    require(k >= 1, "rejection_weight: k is 1-based");
    return std::pow(gamma, k - 1);
}

/// Replays every block of a rollout: plain context under both models, then
/// the drafted block teacher-forced, producing full-vocabulary student and
/// teacher distributions at each drafted position. The teacher evaluates all
/// K positions of a block in one scan against its cached context prefix.
///
/// The rollout must have been collected under `target`'s parameters; a draft
/// fingerprint mismatch is an error unless `allow_stale` (entries are then
/// flagged stale).
template <ScalarType T>
std::vector<ReplayEntry> collect_replay(const RolloutRecord& rollout, const Model<T>& target,
                                        const Model<T>& draft, double gamma,
                                        bool allow_stale = false) {
    require(rollout.target_fingerprint == target.params.fingerprint(),
            "collect_replay: rollout/target fingerprint mismatch");
    const bool stale = rollout.draft_fingerprint != draft.params.fingerprint();
    require(!stale || allow_stale, "collect_replay: rollout/draft fingerprint mismatch");

    const int P = static_cast<int>(rollout.prompt.size());
    std::vector<TokenId> full = rollout.prompt;
    full.insert(full.end(), rollout.y.begin(), rollout.y.end());

    Session<T> tsession(target);
    Session<T> dsession(draft);
    std::vector<T> cond_buf(static_cast<size_t>(draft.cfg.d_model), T(0));

    std::vector<ReplayEntry> entries;
    for (size_t m = 0; m < rollout.blocks.size(); ++m) {
        const BlockRecord& blk = rollout.blocks[m];
        const int a = blk.anchor;
        const int K = static_cast<int>(blk.draft_tokens.size());
        const int ctx_rows = P + a; // plain rows: x ++ y[0..a−1]

        // teacher-forced inputs: anchor token then d_1..d_{K−1}
        std::vector<TokenId> scan_toks;
        scan_toks.push_back(a >= 0 ? rollout.y[static_cast<size_t>(a)] : rollout.prompt.back());
        scan_toks.insert(scan_toks.end(), blk.draft_tokens.begin(), blk.draft_tokens.end() - 1);

        // extend the shared plain context to the block's prefix, scan the
        // teacher-forced block in one pass, rewind it afterwards; row k−1
        // yields the distribution for d_k
        require(tsession.len() <= ctx_rows, "collect_replay: blocks out of order");
        if (tsession.len() < ctx_rows) {
            tsession.scan(std::span<const TokenId>(full).subspan(
                static_cast<size_t>(tsession.len()),
                static_cast<size_t>(ctx_rows - tsession.len())));
        }
        ScanOut<T> t_out = tsession.scan(std::span<const TokenId>(scan_toks));
        tsession.rewind(ctx_rows);

        // student: identical plain context; the block rows are anchored with
        // the conditioning recorded on the rollout
        require(dsession.len() <= ctx_rows, "collect_replay: draft context out of order");
        if (dsession.len() < ctx_rows) {
            dsession.scan(std::span<const TokenId>(full).subspan(
                static_cast<size_t>(dsession.len()),
                static_cast<size_t>(ctx_rows - dsession.len())));
        }
        std::span<const double> cond;
        const int cond_y = a - 1;
        if (cond_y >= 0) {
            require(static_cast<size_t>(cond_y) < rollout.hidden_y.size(),
                    "collect_replay: missing hidden row for conditioning");
            cond = rollout.hidden_y[static_cast<size_t>(cond_y)];
        } else if (cond_y == -1) {
            cond = rollout.prompt_hidden_m1;
        } else if (!rollout.prompt_hidden_m2.empty()) {
            cond = rollout.prompt_hidden_m2;
        }
        std::fill(cond_buf.begin(), cond_buf.end(), T(0));
        if (draft.cfg.draft_conditioning == DraftConditioning::last_hidden && !cond.empty()) {
            for (size_t i = 0; i < cond.size(); ++i) {
                cond_buf[i] = static_cast<T>(cond[i]);
            }
        }
        auto d_out = dsession.scan_anchored(std::span<const TokenId>(scan_toks), cond_buf);
        dsession.rewind(ctx_rows);

        for (int k = 1; k <= K; ++k) {
            ReplayEntry e;
            e.block = static_cast<int>(m);
            e.k = k;
            e.token = blk.draft_tokens[static_cast<size_t>(k - 1)];
            e.teacher = softmax_dist<T>(std::span<const T>(t_out.logits.row(k - 1)));
            e.student = softmax_dist<T>(std::span<const T>(d_out.logits.row(k - 1)));
            e.student_logprob = flog(e.student[static_cast<size_t>(e.token)]);
            e.teacher_logprob = flog(e.teacher[static_cast<size_t>(e.token)]);
            e.label = k <= blk.accepted ? ReplayLabel::accepted : ReplayLabel::rejected;
            e.weight = rejection_weight(gamma, k);
            e.stale = stale;
            entries.push_back(std::move(e));
        }
    }
    return entries;
}

// ---------------------------------------------------------------------------
// acceptance-aware dual-KL objective (value route; the differentiable route
// lives in the trainer and is checked against this one)
// ---------------------------------------------------------------------------

/// Mean forward KL D(p‖q) over accepted entries; 0 when the set is empty.
inline double loss_accepted(std::span<const ReplayEntry> entries) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& e : entries) {
        if (e.label != ReplayLabel::accepted) {
            continue;
        }
        require(is_distribution(e.teacher) && is_distribution(e.student),
                "loss_accepted: non-normalized distribution");
        sum += kl_forward(e.teacher, e.student);
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

/// Weighted reverse KL over rejected entries: (Σ w_k·D(q‖p))/Z with
/// Z = Σ w_k. Returns (0, 0) when the set is empty.
inline std::pair<double, double> loss_rejected(std::span<const ReplayEntry> entries,
                                               double gamma) {
    require(gamma > 0.0 && gamma <= 1.0, "loss_rejected: gamma must be in (0,1]");
    double wsum = 0.0, z = 0.0;
    for (const auto& e : entries) {
        if (e.label != ReplayLabel::rejected) {
            continue;
        }
        require(is_distribution(e.teacher) && is_distribution(e.student),
                "loss_rejected: non-normalized distribution");
        const double w = rejection_weight(gamma, e.k);
        wsum += w * kl_reverse(e.student, e.teacher);
        z += w;
    }
    if (z == 0.0) {
        return {0.0, 0.0};
    }
    return {wsum / z, z};
}

/// (λ_acc·L_acc + λ_rej·L_rej)/(λ_acc + λ_rej)
inline double combined_loss(double l_acc, double l_rej, double lambda_acc, double lambda_rej) {
    require(lambda_acc >= 0.0 && lambda_rej >= 0.0 && lambda_acc + lambda_rej > 0.0,
            "combined_loss: weights must be non-negative and not both zero");
    return (lambda_acc * l_acc + lambda_rej * l_rej) / (lambda_acc + lambda_rej);
}

/// Per-batch loss values with the audit breakdown.
struct LossReport {
    double l_acc{0.0};
    double l_rej{0.0};
    double z{0.0};
    double combined{0.0};
    size_t n_acc{0};
    size_t n_rej{0};
    std::vector<double> acc_terms; // per accepted entry D(p‖q)
    std::vector<double> rej_terms; // per rejected entry D(q‖p) (unweighted)
};

inline LossReport evaluate_losses(std::span<const ReplayEntry> entries, double gamma,
                                  double lambda_acc, double lambda_rej) {
    LossReport r;
    for (const auto& e : entries) {
        if (e.label == ReplayLabel::accepted) {
            r.acc_terms.push_back(kl_forward(e.teacher, e.student));
            ++r.n_acc;
        } else {
            r.rej_terms.push_back(kl_reverse(e.student, e.teacher));
            ++r.n_rej;
        }
    }
    r.l_acc = loss_accepted(entries);
    const auto [lr, z] = loss_rejected(entries, gamma);
    r.l_rej = lr;
    r.z = z;
    if (r.n_rej == 0 && r.n_acc > 0) {
        r.combined = r.l_acc;
    } else if (r.n_acc == 0 && r.n_rej > 0) {
        r.combined = r.l_rej;
    } else {
        r.combined = combined_loss(r.l_acc, r.l_rej, lambda_acc, lambda_rej);
    }
    return r;
}

// ---------------------------------------------------------------------------
// loss-decomposition identities
// ---------------------------------------------------------------------------

/// Verifies, by independent direct summation, that the target-weighted
/// cross entropy equals H(p) + D(p‖q) and that the draft-weighted
/// disagreement equals D(q‖p).
struct KlIdentityReport {
    double j_acc{0.0};      // Σ −p log q, summed directly
    double h_plus_kl{0.0};  // H(p) + D(p‖q), summed independently
    double j_rej{0.0};      // Σ q log(q/p), summed directly
    double kl_rev{0.0};     // D(q‖p)
    double err_acc{0.0};
    double err_rej{0.0};

    bool pass(double tol = 1e-9) const { return err_acc <= tol && err_rej <= tol; }
};

inline KlIdentityReport kl_identity_check(const Dist& p, const Dist& q) {
    require(p.size() == q.size(), "kl_identity_check: size mismatch");
    KlIdentityReport r;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            r.j_acc -= p[i] * flog(q[i]);
        }
        if (q[i] > 0.0) {
            r.j_rej += q[i] * (flog(q[i]) - flog(p[i]));
        }
    }
    r.h_plus_kl = entropy(p) + kl_forward(p, q);
    r.kl_rev = kl_reverse(q, p);
    r.err_acc = std::abs(r.j_acc - r.h_plus_kl);
    r.err_rej = std::abs(r.j_rej - r.kl_rev);
    return r;
}

// ---------------------------------------------------------------------------
// partition bookkeeping
// ---------------------------------------------------------------------------

struct PartitionCounts {
    int64_t n_acc{0};
    int64_t n_rej{0};
    int64_t sum_r{0};
    int64_t sum_k_minus_r{0};
};

inline PartitionCounts partition_counts(const RolloutRecord& rollout,
                                        std::span<const ReplayEntry> entries) {
    PartitionCounts c;
    for (const auto& b : rollout.blocks) {
        c.sum_r += b.accepted;
        c.sum_k_minus_r += static_cast<int64_t>(b.draft_tokens.size()) - b.accepted;
    }
    for (const auto& e : entries) {
        (e.label == ReplayLabel::accepted ? c.n_acc : c.n_rej) += 1;
    }
    return c;
}

} // namespace specopd
