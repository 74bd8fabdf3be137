// SPDX-License-Identifier: Apache-2.0
//
// Engine tests. The stochastic-verification oracles are the closed-form
// marginal (acceptance term plus rejection mass times the residual) and
// Monte Carlo frequency checks on hand-set table models.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <sstream>

#include <specopd/model.hpp>
#include <specopd/replay.hpp>
#include <specopd/rollout_io.hpp>
#include <specopd/specdec.hpp>

#include "table_model.hpp"

using namespace specopd;
using specopd::testing::TableModel;
using specopd::testing::TableSession;

namespace {

Dist logits_of(std::initializer_list<double> v) { return Dist(v); }

std::vector<TokenId> toks(std::initializer_list<int> v) {
    return std::vector<TokenId>(v.begin(), v.end());
}

ModelConfig small_cfg(int layers, ModelRole role) {
    ModelConfig c;
    c.vocab_size = 12;
    c.d_model = 16;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 96;
    c.role = role;
    if (role == ModelRole::draft) {
        c.draft_conditioning = DraftConditioning::last_hidden;
    }
    return c;
}

struct TinyPair {
    Model<float> target;
    Model<float> draft;
};

TinyPair tiny_pair(uint64_t seed) {
    TinyPair p;
    p.target.cfg = small_cfg(2, ModelRole::target);
    p.target.params = init_parameters<float>(p.target.cfg, RngStream::from_seed(seed, "t"));
    p.draft = make_draft_sharing<float>(p.target, small_cfg(1, ModelRole::draft),
                                        RngStream::from_seed(seed, "d"));
    return p;
}

} // namespace

// ---------------------------------------------------------------------------
// greedy verification
// ---------------------------------------------------------------------------

TEST_CASE("verify_block_greedy: self-agreement accepts the whole block") {
    // target argmax at every step equals the drafted token
    std::vector<Dist> rows = {logits_of({0, 5, 1}), logits_of({9, 0, 1}), logits_of({1, 0, 7}),
                              logits_of({0, 8, 0})};
    auto r = verify_block_greedy(toks({1, 0, 2}), rows);
    CHECK(r.accepted == 3);
    CHECK(r.correction == 1); // bonus from the last row
}

TEST_CASE("verify_block_greedy: immediate mismatch corrects with the argmax") {
    std::vector<Dist> rows = {logits_of({0, 5, 1}), logits_of({9, 0, 1})};
    auto r = verify_block_greedy(toks({2}), rows);
    CHECK(r.accepted == 0);
    CHECK(r.correction == 1);
}

TEST_CASE("verify_block_greedy: manual trace on a vocab-4, K=3 table") {
    // step dists argmax: 3, 1, 2; draft proposes (3, 1, 0) -> accept 2, correct to 2
    std::vector<Dist> rows = {logits_of({0.1, 0.2, 0.3, 0.9}), logits_of({0.0, 0.8, 0.1, 0.2}),
                              logits_of({0.2, 0.1, 0.9, 0.3}), logits_of({0.6, 0.1, 0.1, 0.1})};
    auto r = verify_block_greedy(toks({3, 1, 0}), rows);
    CHECK(r.accepted == 2);
    CHECK(r.correction == 2);

    // ties break to the lowest id
    std::vector<Dist> tie = {logits_of({0.5, 0.5}), logits_of({0.5, 0.5})};
    auto rt = verify_block_greedy(toks({1}), tie);
    CHECK(rt.accepted == 0);
    CHECK(rt.correction == 0);
}

// ---------------------------------------------------------------------------
// stochastic verification
// ---------------------------------------------------------------------------

TEST_CASE("verify_block_stochastic: identical distributions accept everything") {
    const Dist p{0.2, 0.5, 0.3};
    std::vector<Dist> q = {p, p};
    std::vector<Dist> pd = {p, p, p};
    RngStream ar = RngStream::from_seed(1, "a"), rr = RngStream::from_seed(1, "r");
    for (int trial = 0; trial < 200; ++trial) {
        auto r = verify_block_stochastic(toks({1, 2}), q, pd, ar, rr);
        CHECK(r.accepted == 2);
    }
}

TEST_CASE("verify_block_stochastic: acceptance probability is min(1, p/q)") {
    // p(d)=0.3, q(d)=0.6 at the drafted token -> acceptance probability 0.5
    const Dist q{0.6, 0.4};
    const Dist p{0.3, 0.7};
    std::vector<Dist> qs = {q};
    std::vector<Dist> ps = {p, p};
    RngStream ar = RngStream::from_seed(5, "a"), rr = RngStream::from_seed(5, "r");
    const int n = 200000;
    int accepted = 0;
    for (int i = 0; i < n; ++i) {
        auto r = verify_block_stochastic(toks({0}), qs, ps, ar, rr);
        accepted += r.accepted;
    }
    const double rate = static_cast<double>(accepted) / n;
    CHECK(std::abs(rate - 0.5) < 0.005);
}

TEST_CASE("first_token_marginal_exact: q == p returns p exactly") {
    const Dist p{0.1, 0.4, 0.5};
    auto out = first_token_marginal_exact(p, p);
    CHECK(linf(out, p) < 1e-15);
}

TEST_CASE("first_token_marginal_exact: crossed vocab-2 pair") {
    const Dist p{0.7, 0.3};
    const Dist q{0.3, 0.7};
    auto out = first_token_marginal_exact(p, q);
    CHECK(linf(out, p) < 1e-12);
}

TEST_CASE("first_token_marginal_exact: equals p for random pairs (losslessness theorem)") {
    RngStream rng = RngStream::from_seed(99, "marginal");
    for (int trial = 0; trial < 1000; ++trial) {
        const int v = 2 + static_cast<int>(rng.next_below(15));
        Dist p(static_cast<size_t>(v)), q(static_cast<size_t>(v));
        for (auto& x : p) {
            x = rng.next_double() + 1e-3;
        }
        for (auto& x : q) {
            x = rng.next_double() + 1e-3;
        }
        normalize(p);
        normalize(q);
        CHECK(linf(first_token_marginal_exact(p, q), p) < 1e-10);
    }
}

TEST_CASE("stochastic verification: empirical first-token law matches p (vocab 3, K=1)") {
    const Dist p{0.5, 0.2, 0.3};
    const Dist q{0.1, 0.6, 0.3};
    const auto expected = first_token_marginal_exact(p, q);
    CHECK(linf(expected, p) < 1e-12);

    RngStream dr = RngStream::from_seed(13, "d"), ar = RngStream::from_seed(13, "a"),
              rr = RngStream::from_seed(13, "r");
    const int n = 200000;
    Dist freq(3, 0.0);
    for (int i = 0; i < n; ++i) {
        const TokenId d = sample_index(q, dr.next_double());
        std::vector<Dist> qs = {q};
        std::vector<Dist> ps = {p, p};
        auto r = verify_block_stochastic(std::span<const TokenId>(&d, 1), qs, ps, ar, rr);
        const TokenId emitted = r.accepted == 1 ? d : r.correction;
        freq[static_cast<size_t>(emitted)] += 1.0 / n;
    }
    CHECK(total_variation(freq, p) < 0.01);
}

TEST_CASE("residual zero mass falls back to sampling p directly") {
    // p strictly inside q's support with p <= q everywhere except equality:
    // residual max(0, p-q) has zero mass only when p == q, which is the
    // accept-always case; force the branch with a clamped pathological pair
    const Dist q{1.0, 0.0};
    const Dist p{1.0, 0.0};
    std::vector<Dist> qs = {q};
    std::vector<Dist> ps = {p, p};
    RngStream ar = RngStream::from_seed(3, "a"), rr = RngStream::from_seed(3, "r");
    // token 1 has q=0: the engine never drafts it, but the verifier must not
    // divide by zero if handed one (ratio treated as 1)
    auto r = verify_block_stochastic(toks({1}), qs, ps, ar, rr);
    CHECK(r.accepted == 1);
}

// ---------------------------------------------------------------------------
// decoding loops on table models
// ---------------------------------------------------------------------------

TEST_CASE("speculative equals autoregressive for greedy decoding (table models)") {
    RngStream rng = RngStream::from_seed(17, "tables");
    auto target = TableModel::random(8, rng.fork("t"));
    auto draft = TableModel::random(8, rng.fork("d"));
    SamplingSpec greedy;
    for (int K : {1, 2, 4}) {
        for (uint64_t s = 0; s < 10; ++s) {
            TableSession ts(target), ds(draft), as(target);
            const auto prompt = toks({1, 3});
            auto rec = speculative_decode(ts, ds, prompt, K, 24, greedy, s);
            auto [ar, calls] = autoregressive_decode(as, prompt, 24, greedy, s);
            CHECK(rec.y == ar);
        }
    }
}

TEST_CASE("speculative decoding with the drafter equal to the target accepts everything") {
    RngStream rng = RngStream::from_seed(23, "tables");
    auto target = TableModel::random(6, rng.fork("t"));
    SamplingSpec greedy;
    TableSession ts(target), ds(target), as(target);
    auto rec = speculative_decode(ts, ds, toks({2}), 1, 16, greedy, 0);
    for (const auto& b : rec.blocks) {
        CHECK(b.accepted == 1);
    }
    auto [ar, calls] = autoregressive_decode(as, toks({2}), 16, greedy, 0);
    CHECK(rec.y == ar);
}

TEST_CASE("max_new_tokens = 0 gives an empty rollout with zero blocks") {
    RngStream rng = RngStream::from_seed(29, "tables");
    auto target = TableModel::random(6, rng.fork("t"));
    auto draft = TableModel::random(6, rng.fork("d"));
    TableSession ts(target), ds(draft);
    auto rec = speculative_decode(ts, ds, toks({1, 2}), 4, 0, SamplingSpec{}, 7);
    CHECK(rec.y.empty());
    CHECK(rec.blocks.empty());
    CHECK(rec.emitted_tokens == 0);
}

TEST_CASE("fixed seeds reproduce bit-identical rollouts") {
    RngStream rng = RngStream::from_seed(31, "tables");
    auto target = TableModel::random(8, rng.fork("t"));
    auto draft = TableModel::random(8, rng.fork("d"));
    SamplingSpec spec;
    spec.temperature = 0.9;
    spec.top_p = 0.95;
    spec.top_k = 6;
    TableSession t1(target), d1(draft), t2(target), d2(draft);
    auto r1 = speculative_decode(t1, d1, toks({4, 2}), 3, 40, spec, 1234);
    auto r2 = speculative_decode(t2, d2, toks({4, 2}), 3, 40, spec, 1234);
    CHECK(rollout_bytes(r1) == rollout_bytes(r2));

    TableSession t3(target), d3(draft);
    auto r3 = speculative_decode(t3, d3, toks({4, 2}), 3, 40, spec, 1235);
    CHECK(rollout_bytes(r1) != rollout_bytes(r3));
}

TEST_CASE("accounting identities: calls, emitted tokens, reconstruction") {
    RngStream rng = RngStream::from_seed(37, "tables");
    auto target = TableModel::random(8, rng.fork("t"));
    auto draft = TableModel::random(8, rng.fork("d"));
    SamplingSpec spec;
    spec.temperature = 0.7;
    for (uint64_t s = 0; s < 20; ++s) {
        TableSession ts(target), ds(draft);
        auto rec = speculative_decode(ts, ds, toks({1, 5, 2}), 4, 32, spec, s);
        const auto M = static_cast<int64_t>(rec.blocks.size());
        CHECK(rec.target_calls == M + 1);
        CHECK(rec.draft_calls == M * 4);
        CHECK(rec.emitted_tokens == rec.sum_accepted() + M);
        // y is a prefix of the reconstructed stream, equal when untruncated
        const auto stream = rec.reconstructed_stream();
        REQUIRE(rec.y.size() <= stream.size());
        for (size_t i = 0; i < rec.y.size(); ++i) {
            CHECK(rec.y[i] == stream[i]);
        }
        // anchors advance by r_m + 1
        int expect_anchor = -1;
        for (const auto& b : rec.blocks) {
            CHECK(b.anchor == expect_anchor);
            CHECK(b.accepted >= 0);
            CHECK(b.accepted <= static_cast<int>(b.draft_tokens.size()));
            expect_anchor = b.anchor + b.accepted + 1;
        }
    }
}

TEST_CASE("eos stops the rollout and is recorded") {
    // deterministic chain: token 0 is an absorbing EOS the target always emits
    TableModel target;
    target.logits.assign(4, std::vector<double>{10.0, 0.0, 0.0, 0.0});
    TableModel draft;
    draft.logits.assign(4, std::vector<double>{0.0, 10.0, 0.0, 0.0});
    TableSession ts(target), ds(draft);
    auto rec = speculative_decode(ts, ds, toks({2}), 2, 16, SamplingSpec{}, 0, /*eos=*/0);
    CHECK(rec.stop_reason == StopReason::eos);
    CHECK(rec.y.back() == 0);
    CHECK(rec.blocks.back().terminal);
}

// ---------------------------------------------------------------------------
// transformer end-to-end greedy losslessness
// ---------------------------------------------------------------------------

TEST_CASE("transformer speculative decoding is greedily lossless") {
    auto pair = tiny_pair(101);
    SamplingSpec greedy;
    for (int K : {1, 4}) {
        for (uint64_t s = 0; s < 4; ++s) {
            TransformerTarget<float> ts(pair.target);
            TransformerDraft<float> ds(pair.draft);
            TransformerTarget<float> as(pair.target);
            const auto prompt = toks({3, 8, 1, 5});
            auto rec = speculative_decode(ts, ds, prompt, K, 20, greedy, s);
            auto [ar, calls] = autoregressive_decode(as, prompt, 20, greedy, s);
            REQUIRE(rec.y == ar);
        }
    }
}

TEST_CASE("transformer rollout is deterministic and replays teacher dists exactly") {
    auto pair = tiny_pair(303);
    SamplingSpec spec;
    spec.temperature = 0.8;
    spec.top_p = 0.95;
    spec.top_k = 8;
    const auto prompt = toks({3, 8, 1, 5});

    TransformerTarget<float> ts(pair.target);
    TransformerDraft<float> ds(pair.draft);
    auto rec = speculative_decode(ts, ds, prompt, 3, 24, spec, 42);
    rec.target_fingerprint = pair.target.params.fingerprint();
    rec.draft_fingerprint = pair.draft.params.fingerprint();

    TransformerTarget<float> t2(pair.target);
    TransformerDraft<float> d2(pair.draft);
    auto rec2 = speculative_decode(t2, d2, prompt, 3, 24, spec, 42);
    rec2.target_fingerprint = rec.target_fingerprint;
    rec2.draft_fingerprint = rec.draft_fingerprint;
    CHECK(rollout_bytes(rec) == rollout_bytes(rec2));

    // teacher distribution oracle: fresh full-context forward at (c_m, d_{m,<k})
    auto entries = collect_replay(rec, pair.target, pair.draft, 0.8);
    for (const auto& e : entries) {
        const auto& blk = rec.blocks[static_cast<size_t>(e.block)];
        std::vector<TokenId> ctx = rec.prompt;
        ctx.insert(ctx.end(), rec.y.begin(), rec.y.begin() + (blk.anchor + 1));
        ctx.insert(ctx.end(), blk.draft_tokens.begin(),
                   blk.draft_tokens.begin() + (e.k - 1));
        Session<float> fresh(pair.target);
        auto out = fresh.scan(ctx);
        const Dist oracle = softmax_dist<float>(out.logits.row(out.logits.rows() - 1));
        CHECK(linf(oracle, e.teacher) < 1e-5);
    }
}

// ---------------------------------------------------------------------------
// draft-only rollouts and distinct-n
// ---------------------------------------------------------------------------

TEST_CASE("distinct-n definitions") {
    const auto rep = toks({1, 1, 1, 1, 1, 1});
    CHECK(distinct_n(rep, 1) == doctest::Approx(1.0 / 6));
    const auto uniq = toks({0, 1, 2, 3, 4, 5});
    for (int n = 1; n <= 4; ++n) {
        CHECK(distinct_n(uniq, n) == doctest::Approx(1.0));
    }
    CHECK(distinct_n(toks({1}), 2) == 0.0);
}

TEST_CASE("draft_only_rollout runs with a frozen conditioning vector") {
    auto pair = tiny_pair(404);
    TransformerDraft<float> ds(pair.draft);
    SamplingSpec greedy;
    std::vector<double> cond(static_cast<size_t>(pair.draft.cfg.d_model), 0.05);
    auto [tokens, rep] = draft_only_rollout(ds, toks({2, 9}), 24, greedy, 11, cond);
    CHECK(static_cast<int>(tokens.size()) == 24);
    CHECK(rep.length == 24);
    CHECK(rep.distinct[0] > 0.0);
}

// ---------------------------------------------------------------------------
// rollout serialization
// ---------------------------------------------------------------------------

TEST_CASE("rollout round trip through the binary container is bit exact") {
    auto pair = tiny_pair(77);
    SamplingSpec spec;
    spec.temperature = 0.6;
    spec.top_p = 0.9;
    spec.top_k = 5;
    TransformerTarget<float> ts(pair.target);
    TransformerDraft<float> ds(pair.draft);
    auto rec = speculative_decode(ts, ds, toks({1, 2, 3}), 3, 16, spec, 5);
    rec.target_fingerprint = pair.target.params.fingerprint();
    rec.draft_fingerprint = pair.draft.params.fingerprint();

    std::ostringstream os(std::ios::binary);
    write_rollout(os, rec);
    std::istringstream is(os.str(), std::ios::binary);
    auto loaded = read_rollout(is);
    CHECK(rollout_bytes(loaded) == os.str());
    CHECK(loaded.y == rec.y);
    CHECK(loaded.blocks.size() == rec.blocks.size());
    CHECK(loaded.hidden_y == rec.hidden_y);

    auto dbg = rollout_debug_json(rec);
    CHECK(dbg.at("y").get<std::vector<TokenId>>() == rec.y);
    CHECK(dbg.at("blocks").size() == rec.blocks.size());

    std::istringstream bad("GARBAGE...", std::ios::binary);
    CHECK_THROWS_WITH_AS(read_rollout(bad), doctest::Contains("bad magic"), Error);
}
