// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <fstream>
#include <sstream>
#include <string>

#include "specopd/specdec.hpp"

namespace specopd {

// Rollout container, little endian:
//   6-byte magic "ROLL01"
//   u64 seed, target fp, draft fp; sampling (f64 temp, f64 top_p, i32 top_k,
//   u64 seed); i32 block size; u8 stop reason; counters; prompt; y; blocks
//   (anchor, terminal, accepted, correction, tokens, q_dists); u8 hidden
//   present flag, then hidden rows as f64.
inline constexpr char kRolloutMagic[6] = {'R', 'O', 'L', 'L', '0', '1'};

namespace rollio {

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    require(static_cast<bool>(is), std::string("rollout: truncated reading ") + what);
    return v;
}

inline void put_tokens(std::ostream& os, const std::vector<TokenId>& t) {
    put<uint32_t>(os, static_cast<uint32_t>(t.size()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(TokenId)));
}

inline std::vector<TokenId> get_tokens(std::istream& is, const char* what) {
    const auto n = get<uint32_t>(is, what);
    std::vector<TokenId> t(n);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(TokenId)));
    require(static_cast<bool>(is), std::string("rollout: truncated reading ") + what);
    return t;
}

inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
    put<uint32_t>(os, static_cast<uint32_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> get_doubles(std::istream& is, const char* what) {
    const auto n = get<uint32_t>(is, what);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    require(static_cast<bool>(is), std::string("rollout: truncated reading ") + what);
    return v;
}

} // namespace rollio

inline void write_rollout(std::ostream& os, const RolloutRecord& r) {
    using namespace rollio;
    os.write(kRolloutMagic, 6);
    put<uint64_t>(os, r.seed);
    put<uint64_t>(os, r.target_fingerprint);
    put<uint64_t>(os, r.draft_fingerprint);
    put<double>(os, r.sampling.temperature);
    put<double>(os, r.sampling.top_p);
    put<int32_t>(os, r.sampling.top_k);
    put<uint64_t>(os, r.sampling.seed);
    put<int32_t>(os, r.block_size);
    put<uint8_t>(os, static_cast<uint8_t>(r.stop_reason));
    put<int64_t>(os, r.target_calls);
    put<int64_t>(os, r.draft_calls);
    put<int64_t>(os, r.emitted_tokens);
    put<int64_t>(os, r.residual_fallbacks);
    put_tokens(os, r.prompt);
    put_tokens(os, r.y);
    put<uint32_t>(os, static_cast<uint32_t>(r.blocks.size()));
    for (const auto& b : r.blocks) {
        put<int32_t>(os, b.anchor);
        put<uint8_t>(os, b.terminal ? 1 : 0);
        put<int32_t>(os, b.accepted);
        put<int32_t>(os, b.correction_token);
        put_tokens(os, b.draft_tokens);
        put<uint32_t>(os, static_cast<uint32_t>(b.q_dists.size()));
        for (const auto& q : b.q_dists) {
            put_doubles(os, q);
        }
    }
    const uint8_t has_hidden = r.hidden_y.empty() && r.prompt_hidden_m1.empty() ? 0 : 1;
    put<uint8_t>(os, has_hidden);
    if (has_hidden != 0) {
        put_doubles(os, r.prompt_hidden_m2);
        put_doubles(os, r.prompt_hidden_m1);
        put<uint32_t>(os, static_cast<uint32_t>(r.hidden_y.size()));
        for (const auto& h : r.hidden_y) {
            put_doubles(os, h);
        }
    }
}

inline RolloutRecord read_rollout(std::istream& is) {
    using namespace rollio;
    char magic[6];
    is.read(magic, 6);
    require(static_cast<bool>(is) && std::memcmp(magic, kRolloutMagic, 6) == 0,
            "rollout: bad magic");
    RolloutRecord r;
    r.seed = get<uint64_t>(is, "seed");
    r.target_fingerprint = get<uint64_t>(is, "target fp");
    r.draft_fingerprint = get<uint64_t>(is, "draft fp");
    r.sampling.temperature = get<double>(is, "temperature");
    r.sampling.top_p = get<double>(is, "top_p");
    r.sampling.top_k = get<int32_t>(is, "top_k");
    r.sampling.seed = get<uint64_t>(is, "sampling seed");
    r.block_size = get<int32_t>(is, "block size");
    r.stop_reason = static_cast<StopReason>(get<uint8_t>(is, "stop reason"));
    r.target_calls = get<int64_t>(is, "target calls");
    r.draft_calls = get<int64_t>(is, "draft calls");
    r.emitted_tokens = get<int64_t>(is, "emitted");
    r.residual_fallbacks = get<int64_t>(is, "fallbacks");
    r.prompt = get_tokens(is, "prompt");
    r.y = get_tokens(is, "y");
    const auto m = get<uint32_t>(is, "block count");
    r.blocks.resize(m);
    for (auto& b : r.blocks) {
        b.anchor = get<int32_t>(is, "anchor");
        b.terminal = get<uint8_t>(is, "terminal") != 0;
        b.accepted = get<int32_t>(is, "accepted");
        b.correction_token = get<int32_t>(is, "correction");
        b.draft_tokens = get_tokens(is, "draft tokens");
        const auto nq = get<uint32_t>(is, "q count");
        b.q_dists.resize(nq);
        for (auto& q : b.q_dists) {
            q = get_doubles(is, "q dist");
        }
    }
    if (get<uint8_t>(is, "hidden flag") != 0) {
        r.prompt_hidden_m2 = get_doubles(is, "prompt hidden -2");
        r.prompt_hidden_m1 = get_doubles(is, "prompt hidden -1");
        const auto hn = get<uint32_t>(is, "hidden rows");
        r.hidden_y.resize(hn);
        for (auto& h : r.hidden_y) {
            h = get_doubles(is, "hidden row");
        }
    }
    return r;
}

inline void save_rollout(const RolloutRecord& r, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "save_rollout: cannot open " + path);
    write_rollout(os, r);
    require(static_cast<bool>(os), "save_rollout: write failed for " + path);
}

inline RolloutRecord load_rollout(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "load_rollout: cannot open " + path);
    return read_rollout(is);
}

inline std::string rollout_bytes(const RolloutRecord& r) {
    std::ostringstream os(std::ios::binary);
    write_rollout(os, r);
    return os.str();
}

/// Debug dump. Lossy: hidden states and per-position draft distributions are
/// summarized, not embedded.
inline nlohmann::json rollout_debug_json(const RolloutRecord& r) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : r.blocks) {
        blocks.push_back({{"anchor", b.anchor},
                          {"draft_tokens", b.draft_tokens},
                          {"accepted", b.accepted},
                          {"correction_token", b.correction_token},
                          {"terminal", b.terminal},
                          {"q_dists_omitted", b.q_dists.size()}});
    }
    return {{"seed", r.seed},
            {"block_size", r.block_size},
            {"stop_reason", r.stop_reason == StopReason::eos ? "eos" : "max_len"},
            {"prompt", r.prompt},
            {"y", r.y},
            {"blocks", blocks},
            {"target_calls", r.target_calls},
            {"draft_calls", r.draft_calls},
            {"emitted_tokens", r.emitted_tokens},
            {"residual_fallbacks", r.residual_fallbacks},
            {"hidden_rows_omitted", r.hidden_y.size()},
            {"target_fingerprint", hex64(r.target_fingerprint)},
            {"draft_fingerprint", hex64(r.draft_fingerprint)}};
}

} // namespace specopd
