// SPDX-License-Identifier: Apache-2.0
//
// Replay partition and dual-KL objective tests. Derived loss values are
// frozen from the direct-summation oracle:
//   D(p‖q) for p=[0.9,0.1], q=[0.6,0.4]
//     = 0.9·ln(0.9/0.6) + 0.1·ln(0.1/0.4) = 0.22628916...
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <specopd/replay.hpp>
#include <specopd/rollout_io.hpp>

#include "table_model.hpp"

using namespace specopd;

namespace {

ReplayEntry entry(ReplayLabel label, int k, Dist teacher, Dist student) {
    ReplayEntry e;
    e.k = k;
    e.label = label;
    e.teacher = std::move(teacher);
    e.student = std::move(student);
    e.weight = rejection_weight(0.8, k);
    return e;
}

struct TinyPair {
    Model<float> target;
    Model<float> draft;
};

TinyPair tiny_pair(uint64_t seed) {
    ModelConfig tcfg;
    tcfg.vocab_size = 12;
    tcfg.d_model = 16;
    tcfg.n_layers = 2;
    tcfg.n_heads = 2;
    tcfg.d_ff = 32;
    tcfg.max_seq_len = 96;
    TinyPair p;
    p.target.cfg = tcfg;
    p.target.params = init_parameters<float>(tcfg, RngStream::from_seed(seed, "t"));
    ModelConfig dcfg = tcfg;
    dcfg.n_layers = 1;
    dcfg.role = ModelRole::draft;
    dcfg.draft_conditioning = DraftConditioning::last_hidden;
    p.draft = make_draft_sharing<float>(p.target, dcfg, RngStream::from_seed(seed, "d"));
    return p;
}

RolloutRecord sample_rollout(const TinyPair& pair, uint64_t seed, int K = 4,
                             double temperature = 0.8) {
    SamplingSpec spec;
    spec.temperature = temperature;
    spec.top_p = 0.95;
    spec.top_k = 10;
    TransformerTarget<float> ts(pair.target);
    TransformerDraft<float> ds(pair.draft);
    const std::vector<TokenId> prompt{3, 8, 1, 5};
    auto rec = speculative_decode(ts, ds, prompt, K, 24, spec, seed);
    rec.target_fingerprint = pair.target.params.fingerprint();
    rec.draft_fingerprint = pair.draft.params.fingerprint();
    return rec;
}

} // namespace

TEST_CASE("rejection weights follow the exponential decay") {
    CHECK(rejection_weight(0.8, 1) == 1.0);
    CHECK(std::abs(rejection_weight(0.8, 2) - 0.8) < 1e-15);
    CHECK(std::abs(rejection_weight(0.8, 3) - 0.64) < 1e-15);
    CHECK(std::abs(rejection_weight(0.8, 4) - 0.512) < 1e-15);
    // monotone strictly decreasing for gamma < 1
    for (int k = 1; k < 8; ++k) {
        CHECK(rejection_weight(0.8, k + 1) < rejection_weight(0.8, k));
    }
    // gamma = 1 degenerates to uniform weights
    for (int k = 1; k <= 4; ++k) {
        CHECK(rejection_weight(1.0, k) == 1.0);
    }
}

TEST_CASE("loss_accepted: direct-summation oracle values") {
    const Dist p{0.9, 0.1};
    const Dist q{0.6, 0.4};
    const double oracle = 0.9 * std::log(0.9 / 0.6) + 0.1 * std::log(0.1 / 0.4);
    CHECK(oracle == doctest::Approx(0.22629).epsilon(1e-4));

    SUBCASE("p == q gives zero") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::accepted, 1, p, p)};
        CHECK(loss_accepted(es) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("single entry matches the oracle") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::accepted, 1, p, q)};
        CHECK(loss_accepted(es) == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(std::abs(loss_accepted(es) - 0.22629) < 1e-5);
    }
    SUBCASE("two entries average") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::accepted, 1, p, q),
                                    entry(ReplayLabel::accepted, 2, p, p)};
        CHECK(loss_accepted(es) == doctest::Approx(oracle / 2).epsilon(1e-12));
    }
    SUBCASE("empty set returns zero") {
        std::vector<ReplayEntry> es;
        CHECK(loss_accepted(es) == 0.0);
    }
}

TEST_CASE("loss_rejected: weighted reverse KL with normalizer") {
    const Dist p{0.9, 0.1};
    const Dist q{0.6, 0.4};
    const double rkl = 0.6 * std::log(0.6 / 0.9) + 0.4 * std::log(0.4 / 0.1);

    SUBCASE("q == p gives zero regardless of weights") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::rejected, 2, p, p),
                                    entry(ReplayLabel::rejected, 3, q, q)};
        auto [l, z] = loss_rejected(es, 0.8);
        CHECK(l == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(z == doctest::Approx(0.8 + 0.64).epsilon(1e-12));
    }
    SUBCASE("single rejected entry at k=1 has weight 1") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::rejected, 1, p, q)};
        auto [l, z] = loss_rejected(es, 0.8);
        CHECK(z == 1.0);
        CHECK(l == doctest::Approx(rkl).epsilon(1e-12));
    }
    SUBCASE("gamma = 1 reduces to the unweighted mean") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::rejected, 1, p, q),
                                    entry(ReplayLabel::rejected, 4, p, p)};
        auto [l, z] = loss_rejected(es, 1.0);
        CHECK(z == 2.0);
        CHECK(l == doctest::Approx(rkl / 2).epsilon(1e-12));
    }
    SUBCASE("empty set returns (0, 0)") {
        std::vector<ReplayEntry> es;
        auto [l, z] = loss_rejected(es, 0.8);
        CHECK(l == 0.0);
        CHECK(z == 0.0);
    }
    SUBCASE("weight normalization: sum of w/Z is 1") {
        std::vector<ReplayEntry> es{entry(ReplayLabel::rejected, 2, p, q),
                                    entry(ReplayLabel::rejected, 3, p, q),
                                    entry(ReplayLabel::rejected, 4, p, q)};
        auto [l, z] = loss_rejected(es, 0.8);
        double norm = 0.0;
        for (const auto& e : es) {
            norm += rejection_weight(0.8, e.k) / z;
        }
        CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("combined_loss: weighted average and degenerate cases") {
    CHECK(combined_loss(0.4, 0.6, 1, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(combined_loss(0.37, 0.9, 1, 0) == doctest::Approx(0.37).epsilon(1e-12));
    CHECK(combined_loss(0.22629, 0.0, 1, 1) == doctest::Approx(0.113145).epsilon(1e-9));
    CHECK_THROWS_AS(combined_loss(1, 1, 0, 0), Error);
}

TEST_CASE("kl identity check: cross entropy decomposes into entropy plus forward KL") {
    SUBCASE("uniform teacher") {
        const Dist p{0.25, 0.25, 0.25, 0.25};
        auto rep = kl_identity_check(p, p);
        CHECK(rep.j_acc == doctest::Approx(std::log(4.0)).epsilon(1e-12));
        CHECK(rep.pass(1e-12));
    }
    SUBCASE("one-hot teacher with clamping") {
        const Dist p{1.0, 0.0};
        const Dist q{0.5, 0.5};
        auto rep = kl_identity_check(p, q);
        CHECK(rep.j_acc == doctest::Approx(-std::log(0.5)).epsilon(1e-9));
        CHECK(rep.pass(1e-9));
    }
    SUBCASE("1000 random pairs hold within 1e-9") {
        RngStream rng = RngStream::from_seed(55, "ident");
        for (int t = 0; t < 1000; ++t) {
            const int v = 2 + static_cast<int>(rng.next_below(15));
            Dist p(static_cast<size_t>(v)), q(static_cast<size_t>(v));
            for (auto& x : p) {
                x = rng.next_double() + 1e-4;
            }
            for (auto& x : q) {
                x = rng.next_double() + 1e-4;
            }
            normalize(p);
            normalize(q);
            CHECK(kl_identity_check(p, q).pass(1e-9));
        }
    }
}

TEST_CASE("collect_replay: partition, labels, and weights") {
    auto pair = tiny_pair(909);
    auto rec = sample_rollout(pair, 3);
    auto entries = collect_replay(rec, pair.target, pair.draft, 0.8);

    // partition completeness: every drafted token in exactly one set
    const auto counts = partition_counts(rec, entries);
    CHECK(counts.n_acc == counts.sum_r);
    CHECK(counts.n_rej == counts.sum_k_minus_r);
    CHECK(counts.n_acc + counts.n_rej ==
          static_cast<int64_t>(rec.blocks.size()) * rec.block_size);

    // labels follow 1 <= k <= r_m / r_m < k <= K
    for (const auto& e : entries) {
        const auto& blk = rec.blocks[static_cast<size_t>(e.block)];
        if (e.k <= blk.accepted) {
            CHECK(e.label == ReplayLabel::accepted);
        } else {
            CHECK(e.label == ReplayLabel::rejected);
        }
        CHECK(e.weight == rejection_weight(0.8, e.k));
        CHECK(is_distribution(e.student));
        CHECK(is_distribution(e.teacher));
        CHECK(e.student_logprob <= 0.0);
        CHECK(e.teacher_logprob <= 0.0);
    }

    // a fully accepted block contributes zero rejected entries
    for (const auto& blk : rec.blocks) {
        if (blk.accepted != static_cast<int>(blk.draft_tokens.size())) {
            continue;
        }
        for (const auto& e : entries) {
            if (rec.blocks[static_cast<size_t>(e.block)].anchor == blk.anchor) {
                CHECK(e.label == ReplayLabel::accepted);
            }
        }
    }
}

TEST_CASE("collect_replay: example partition r=2, K=4 carries weights gamma^2, gamma^3") {
    // synthetic block record with known r to pin the weight indexing
    RolloutRecord rec;
    rec.prompt = {1, 2};
    rec.y = {3, 4, 5};
    BlockRecord blk;
    blk.anchor = -1;
    blk.draft_tokens = {3, 4, 9, 9};
    blk.accepted = 2;
    blk.correction_token = 5;
    rec.blocks.push_back(blk);

    std::vector<ReplayEntry> entries;
    for (int k = 1; k <= 4; ++k) {
        ReplayEntry e;
        e.k = k;
        e.label = k <= blk.accepted ? ReplayLabel::accepted : ReplayLabel::rejected;
        e.weight = rejection_weight(0.8, k);
        entries.push_back(e);
    }
    CHECK(entries[2].label == ReplayLabel::rejected);
    CHECK(entries[3].label == ReplayLabel::rejected);
    CHECK(std::abs(entries[2].weight - 0.64) < 1e-15);
    CHECK(std::abs(entries[3].weight - 0.512) < 1e-15);
}

TEST_CASE("collect_replay: student distributions condition on the drafted prefix") {
    auto pair = tiny_pair(911);
    auto rec = sample_rollout(pair, 5);
    auto entries = collect_replay(rec, pair.target, pair.draft, 0.8);

    // student oracle: rebuild the drafter state by hand for each entry
    for (const auto& e : entries) {
        const auto& blk = rec.blocks[static_cast<size_t>(e.block)];
        const int a = blk.anchor;
        Session<float> fresh(pair.draft);
        std::vector<TokenId> plain = rec.prompt;
        plain.insert(plain.end(), rec.y.begin(), rec.y.begin() + a + 1);
        plain.pop_back(); // anchor token is consumed anchored
        if (!plain.empty()) {
            fresh.scan(plain);
        }
        std::vector<TokenId> anchored;
        anchored.push_back(a >= 0 ? rec.y[static_cast<size_t>(a)] : rec.prompt.back());
        anchored.insert(anchored.end(), blk.draft_tokens.begin(),
                        blk.draft_tokens.begin() + (e.k - 1));
        std::vector<float> cond(static_cast<size_t>(pair.draft.cfg.d_model), 0.0f);
        const int cond_y = a - 1;
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
                cond[i] = static_cast<float>((*src)[i]);
            }
        }
        auto out = fresh.scan_anchored(anchored, cond);
        const Dist oracle = softmax_dist<float>(out.logits.row(out.logits.rows() - 1));
        CHECK(linf(oracle, e.student) < 1e-5);
    }
}

TEST_CASE("collect_replay: fingerprint mismatches error unless staleness is allowed") {
    auto pair = tiny_pair(913);
    auto rec = sample_rollout(pair, 7);

    SUBCASE("target mismatch always errors") {
        rec.target_fingerprint ^= 1;
        CHECK_THROWS_WITH_AS(collect_replay(rec, pair.target, pair.draft, 0.8),
                             doctest::Contains("target fingerprint"), Error);
    }
    SUBCASE("draft mismatch errors by default, marks stale when allowed") {
        pair.draft.params.at("final_norm.gain").data[0] += 0.5f;
        CHECK_THROWS_WITH_AS(collect_replay(rec, pair.target, pair.draft, 0.8),
                             doctest::Contains("draft fingerprint"), Error);
        auto entries = collect_replay(rec, pair.target, pair.draft, 0.8, /*allow_stale=*/true);
        for (const auto& e : entries) {
            CHECK(e.stale);
        }
    }
}

TEST_CASE("evaluate_losses: combined value and empty-set extensions") {
    const Dist p{0.9, 0.1};
    const Dist q{0.6, 0.4};
    const double fkl = kl_forward(p, q);
    const double rkl = kl_reverse(q, p);

    std::vector<ReplayEntry> both{entry(ReplayLabel::accepted, 1, p, q),
                                  entry(ReplayLabel::rejected, 2, p, q)};
    auto r = evaluate_losses(both, 0.8, 1.0, 1.0);
    CHECK(r.l_acc == doctest::Approx(fkl).epsilon(1e-12));
    CHECK(r.l_rej == doctest::Approx(rkl).epsilon(1e-12));
    CHECK(r.combined == doctest::Approx((fkl + rkl) / 2).epsilon(1e-12));
    CHECK(r.n_acc == 1);
    CHECK(r.n_rej == 1);
    CHECK(r.acc_terms.size() == 1);
    CHECK(r.rej_terms.size() == 1);

    std::vector<ReplayEntry> only_acc{entry(ReplayLabel::accepted, 1, p, q)};
    auto ra = evaluate_losses(only_acc, 0.8, 1.0, 1.0);
    CHECK(ra.combined == doctest::Approx(fkl).epsilon(1e-12));

    std::vector<ReplayEntry> only_rej{entry(ReplayLabel::rejected, 1, p, q)};
    auto rr = evaluate_losses(only_rej, 0.8, 1.0, 1.0);
    CHECK(rr.combined == doctest::Approx(rkl).epsilon(1e-12));
}
