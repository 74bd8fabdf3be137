// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "specopd/distribution.hpp"
#include "specopd/tape.hpp"
#include "specopd/tensor.hpp"

namespace specopd {

enum class ModelRole { target, draft };
enum class DraftConditioning { none, last_hidden };

/// Architecture hyperparameters for one decoder-only transformer.
struct ModelConfig {
    int vocab_size{64};
    int d_model{128};
    int n_layers{4};
    int n_heads{4};
    int d_ff{512};
    int max_seq_len{256};
    ModelRole role{ModelRole::target};
    DraftConditioning draft_conditioning{DraftConditioning::none};

    void validate() const {
        require(vocab_size > 0 && d_model > 0 && n_layers > 0 && n_heads > 0 && d_ff > 0 &&
                    max_seq_len > 0,
                "ModelConfig: extents must be positive");
        require(d_model % n_heads == 0, "ModelConfig: d_model not divisible by n_heads");
    }

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size},
                {"d_model", d_model},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"d_ff", d_ff},
                {"max_seq_len", max_seq_len},
                {"role", role == ModelRole::target ? "target" : "draft"},
                {"draft_conditioning",
                 draft_conditioning == DraftConditioning::last_hidden ? "last_hidden" : "none"}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        const std::string role = j.value("role", "target");
        require(role == "target" || role == "draft", "ModelConfig: bad role " + role);
        c.role = role == "target" ? ModelRole::target : ModelRole::draft;
        const std::string dc = j.value("draft_conditioning", "none");
        require(dc == "none" || dc == "last_hidden", "ModelConfig: bad draft_conditioning " + dc);
        c.draft_conditioning =
            dc == "last_hidden" ? DraftConditioning::last_hidden : DraftConditioning::none;
        c.validate();
        return c;
    }

    uint64_t fingerprint() const { return fnv1a64(to_json().dump()); }

    /// First config field that differs, empty if identical. Used by
    /// checkpoint loading to produce a precise error.
    std::string first_mismatch(const ModelConfig& o) const {
        const auto a = to_json();
        const auto b = o.to_json();
        for (auto it = a.begin(); it != a.end(); ++it) {
            if (b.at(it.key()) != it.value()) {
                return it.key();
            }
        }
        return {};
    }
};

/// Parameter paths declared by a config, in fixed order.
inline std::vector<std::string> parameter_paths(const ModelConfig& cfg) {
    std::vector<std::string> out{"embed.weight", "lm_head.weight"};
    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        out.push_back(p + "attn_norm.gain");
        out.push_back(p + "attn.wq");
        out.push_back(p + "attn.wk");
        out.push_back(p + "attn.wv");
        out.push_back(p + "attn.wo");
        out.push_back(p + "ffn_norm.gain");
        out.push_back(p + "ffn.w1");
        out.push_back(p + "ffn.w2");
    }
    out.push_back("final_norm.gain");
    return out;
}

inline std::vector<int> parameter_shape(const ModelConfig& cfg, const std::string& path) {
    const int d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_ff;
    auto ends_with = [&](const char* s) {
        const std::string suf(s);
        return path.size() >= suf.size() && path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (path == "embed.weight" || path == "lm_head.weight") {
        return {v, d};
    }
    if (ends_with("norm.gain")) {
        return {d};
    }
    if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo")) {
        return {d, d};
    }
    if (ends_with("ffn.w1")) {
        return {d, f};
    }
    if (ends_with("ffn.w2")) {
        return {f, d};
    }
    fail("parameter_shape: unknown path " + path);
}

/// Named parameter map. Tensors are shared pointers so a draft model can
/// alias the target's embedding/LM-head tensors (shared and frozen).
template <ScalarType T>
struct Parameters {
    std::map<std::string, std::shared_ptr<Tensor<T>>> tensors;

    Tensor<T>& at(const std::string& path) {
        auto it = tensors.find(path);
        require(it != tensors.end(), "Parameters: missing path " + path);
        return *it->second;
    }
    const Tensor<T>& at(const std::string& path) const {
        auto it = tensors.find(path);
        require(it != tensors.end(), "Parameters: missing path " + path);
        return *it->second;
    }

    /// Fingerprint over all tensor payloads in path order.
    uint64_t fingerprint() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [path, t] : tensors) {
            h = fnv1a64(path, h);
            h = fnv1a64(t->data.data(), t->data.size() * sizeof(T), h);
        }
        return h;
    }

    void validate_against(const ModelConfig& cfg) const {
        for (const auto& path : parameter_paths(cfg)) {
            const auto& t = at(path);
            require(t.shape == parameter_shape(cfg, path),
                    "Parameters: shape mismatch for " + path);
        }
    }
};

constexpr double kInitStd = 0.08;

template <ScalarType T>
Parameters<T> init_parameters(const ModelConfig& cfg, RngStream rng) {
    cfg.validate();
    Parameters<T> p;
    for (const auto& path : parameter_paths(cfg)) {
        const auto shape = parameter_shape(cfg, path);
        if (path.find("norm.gain") != std::string::npos) {
            p.tensors[path] = std::make_shared<Tensor<T>>(Tensor<T>::full(shape, T(1)));
        } else {
            auto sub = rng.fork(path);
            p.tensors[path] =
                std::make_shared<Tensor<T>>(Tensor<T>::randn(shape, sub, static_cast<T>(kInitStd)));
        }
        p.tensors[path]->requires_grad = true;
    }
    return p;
}

template <ScalarType T>
struct Model {
    ModelConfig cfg;
    Parameters<T> params;

    /// Paths updated by training. Draft models never train the shared
    /// embedding/LM-head tensors.
    std::vector<std::string> trainable_paths() const {
        std::vector<std::string> out;
        for (const auto& path : parameter_paths(cfg)) {
            if (cfg.role == ModelRole::draft &&
                (path == "embed.weight" || path == "lm_head.weight")) {
                continue;
            }
            out.push_back(path);
        }
        return out;
    }
};

/// Draft model whose embedding/LM-head tensors alias the target's.
/// The aliased tensors are frozen for the rest of the draft's life.
template <ScalarType T>
Model<T> make_draft_sharing(const Model<T>& target, ModelConfig draft_cfg, RngStream rng) {
    draft_cfg.validate();
    require(draft_cfg.role == ModelRole::draft, "make_draft_sharing: config role must be draft");
    require(draft_cfg.vocab_size == target.cfg.vocab_size &&
                draft_cfg.d_model == target.cfg.d_model,
            "make_draft_sharing: vocab/d_model must match the target");
    require(draft_cfg.n_layers < target.cfg.n_layers,
            "make_draft_sharing: draft must be shallower than the target");
    Model<T> draft;
    draft.cfg = draft_cfg;
    draft.params = init_parameters<T>(draft_cfg, rng);
    draft.params.tensors["embed.weight"] = target.params.tensors.at("embed.weight");
    draft.params.tensors["lm_head.weight"] = target.params.tensors.at("lm_head.weight");
    return draft;
}

// ---------------------------------------------------------------------------
// inference path (KV cache, no tape)
// ---------------------------------------------------------------------------

template <ScalarType T>
struct ScanOut {
    Tensor<T> logits;      // [rows × vocab]
    Tensor<T> last_hidden; // [rows × d_model], post final norm
    int first_position{0}; // absolute position of row 0
};

/// Incremental decoding state over one model. Single-owner: one logical
/// execution at a time. Rows are processed strictly left to right, so a
/// batched scan equals repeated single-token scans bit for bit.
template <ScalarType T>
class Session {
public:
    explicit Session(const Model<T>& m) : model_(&m) {
        m.cfg.validate();
        m.params.validate_against(m.cfg);
        kcache_.assign(static_cast<size_t>(m.cfg.n_layers), {});
        vcache_.assign(static_cast<size_t>(m.cfg.n_layers), {});
    }

    const Model<T>& model() const { return *model_; }
    int len() const { return len_; }
    const std::vector<TokenId>& history() const { return history_; }

    void reset() {
        for (auto& k : kcache_) {
            k.clear();
        }
        for (auto& v : vcache_) {
            v.clear();
        }
        len_ = 0;
        history_.clear();
    }

    /// Drop cached positions beyond `keep`.
    void rewind(int keep) {
        require(keep >= 0 && keep <= len_, "Session::rewind: bad keep length");
        const size_t d = static_cast<size_t>(model_->cfg.d_model);
        for (auto& k : kcache_) {
            k.resize(static_cast<size_t>(keep) * d);
        }
        for (auto& v : vcache_) {
            v.resize(static_cast<size_t>(keep) * d);
        }
        len_ = keep;
        history_.resize(static_cast<size_t>(keep));
    }

    /// Plain causal scan; appends to the cache.
    ScanOut<T> scan(std::span<const TokenId> tokens) { return scan_impl_(tokens, {}); }

    /// Anchored scan: the conditioning vector is added to every input
    /// embedding of these rows (drafter block mode).
    ScanOut<T> scan_anchored(std::span<const TokenId> tokens, std::span<const T> conditioning) {
        require(conditioning.size() == static_cast<size_t>(model_->cfg.d_model),
                "scan_anchored: conditioning extent mismatch");
        return scan_impl_(tokens, conditioning);
    }

private:
    ScanOut<T> scan_impl_(std::span<const TokenId> tokens, std::span<const T> cond) {
        const ModelConfig& cfg = model_->cfg;
        const int n = static_cast<int>(tokens.size());
        require(len_ + n <= cfg.max_seq_len, "Session::scan: max_seq_len exceeded");
        const int d = cfg.d_model, hd = cfg.d_model / cfg.n_heads;
        const auto& P = model_->params;
        const Tensor<T>& emb = P.at("embed.weight");
        const Tensor<T>& head = P.at("lm_head.weight");

        ScanOut<T> out;
        out.logits = Tensor<T>({n, cfg.vocab_size});
        out.last_hidden = Tensor<T>({n, d});
        out.first_position = len_;

        std::vector<T> x(static_cast<size_t>(d));
        std::vector<T> norm(static_cast<size_t>(d)), q(static_cast<size_t>(d)),
            k(static_cast<size_t>(d)), v(static_cast<size_t>(d)), attn(static_cast<size_t>(d)),
            proj(static_cast<size_t>(d)), ff(static_cast<size_t>(cfg.d_ff));

        for (int r = 0; r < n; ++r) {
            const TokenId tok = tokens[static_cast<size_t>(r)];
            require(tok >= 0 && tok < cfg.vocab_size, "Session::scan: token id out of range");
            const int pos = len_;
            std::copy_n(emb.row(tok).data(), d, x.data());
            if (!cond.empty()) {
                for (int i = 0; i < d; ++i) {
                    x[static_cast<size_t>(i)] += cond[static_cast<size_t>(i)];
                }
            }
            for (int l = 0; l < cfg.n_layers; ++l) {
                const std::string lp = "layers." + std::to_string(l) + ".";
                kern::rms_norm_row<T>(x, span_(P.at(lp + "attn_norm.gain")), norm);
                kern::gemm_nn(q.data(), norm.data(), P.at(lp + "attn.wq").data.data(), 1, d, d,
                              false);
                kern::gemm_nn(k.data(), norm.data(), P.at(lp + "attn.wk").data.data(), 1, d, d,
                              false);
                kern::gemm_nn(v.data(), norm.data(), P.at(lp + "attn.wv").data.data(), 1, d, d,
                              false);
                kern::rotary_row<T>(q, cfg.n_heads, hd, pos);
                kern::rotary_row<T>(k, cfg.n_heads, hd, pos);
                auto& kc = kcache_[static_cast<size_t>(l)];
                auto& vc = vcache_[static_cast<size_t>(l)];
                kc.insert(kc.end(), k.begin(), k.end());
                vc.insert(vc.end(), v.begin(), v.end());
                attend_row_(q, kc, vc, pos + 1, cfg.n_heads, hd, attn);
                kern::gemm_nn(proj.data(), attn.data(), P.at(lp + "attn.wo").data.data(), 1, d, d,
                              false);
                for (int i = 0; i < d; ++i) {
                    x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
                }
                kern::rms_norm_row<T>(x, span_(P.at(lp + "ffn_norm.gain")), norm);
                kern::gemm_nn(ff.data(), norm.data(), P.at(lp + "ffn.w1").data.data(), 1, d,
                              cfg.d_ff, false);
                for (auto& u : ff) {
                    u = kern::silu(u);
                }
                kern::gemm_nn(proj.data(), ff.data(), P.at(lp + "ffn.w2").data.data(), 1, cfg.d_ff,
                              d, false);
                for (int i = 0; i < d; ++i) {
                    x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
                }
            }
            kern::rms_norm_row<T>(x, span_(P.at("final_norm.gain")), out.last_hidden.row(r));
            kern::gemm_nt(out.logits.row(r).data(), out.last_hidden.row(r).data(),
                          head.data.data(), 1, d, cfg.vocab_size, false);
            len_ += 1;
            history_.push_back(tok);
        }
        out.logits.check_finite("Session::scan logits");
        return out;
    }

    static std::span<const T> span_(const Tensor<T>& t) {
        return {t.data.data(), t.data.size()};
    }

    void attend_row_(const std::vector<T>& q, const std::vector<T>& kc, const std::vector<T>& vc,
                     int keys, int n_heads, int hd, std::vector<T>& out) {
        const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
        const size_t d = q.size();
        scores_.resize(static_cast<size_t>(keys));
        for (int h = 0; h < n_heads; ++h) {
            const T* qh = q.data() + static_cast<size_t>(h) * hd;
            T mx = std::numeric_limits<T>::lowest();
            for (int j = 0; j < keys; ++j) {
                const T* kj = kc.data() + static_cast<size_t>(j) * d + static_cast<size_t>(h) * hd;
                T s = 0;
                for (int e = 0; e < hd; ++e) {
                    s += qh[e] * kj[e];
                }
                scores_[static_cast<size_t>(j)] = s * inv_sqrt;
                mx = std::max(mx, scores_[static_cast<size_t>(j)]);
            }
            double sum = 0.0;
            for (int j = 0; j < keys; ++j) {
                const double e = std::exp(static_cast<double>(scores_[static_cast<size_t>(j)] - mx));
                scores_[static_cast<size_t>(j)] = static_cast<T>(e);
                sum += e;
            }
            const T invs = static_cast<T>(1.0 / sum);
            T* oh = out.data() + static_cast<size_t>(h) * hd;
            std::fill_n(oh, hd, T(0));
            for (int j = 0; j < keys; ++j) {
                const T w = scores_[static_cast<size_t>(j)] * invs;
                const T* vj = vc.data() + static_cast<size_t>(j) * d + static_cast<size_t>(h) * hd;
                for (int e = 0; e < hd; ++e) {
                    oh[e] += w * vj[e];
                }
            }
        }
    }

    const Model<T>* model_;
    std::vector<std::vector<T>> kcache_, vcache_;
    std::vector<T> scores_;
    std::vector<TokenId> history_;
    int len_{0};
};

/// Causal next-token logits for `tokens`, reusing the session cache. The
/// cached history must be a prefix of `tokens`; only the remainder is scanned.
template <ScalarType T>
ScanOut<T> target_forward(Session<T>& session, std::span<const TokenId> tokens) {
    const auto& hist = session.history();
    require(hist.size() <= tokens.size(), "target_forward: cache longer than tokens");
    for (size_t i = 0; i < hist.size(); ++i) {
        require(hist[i] == tokens[i], "target_forward: cache/prefix mismatch at position " +
                                          std::to_string(i));
    }
    return session.scan(tokens.subspan(hist.size()));
}

/// One drafted block. Proposes K tokens left to right under the decode
/// transform, conditioning every block row on `anchor_hidden`. Returns the
/// tokens and the full (transformed) draft distribution at each position.
///
/// `context_tokens` is the verified context (x, y up to and including the
/// anchor token); its final token is consumed as the first anchored input.
template <ScalarType T>
std::pair<std::vector<TokenId>, std::vector<Dist>> draft_propose_block(
    const Model<T>& draft, std::span<const TokenId> context_tokens,
    std::span<const T> anchor_hidden, int K, const SamplingSpec& sampling, RngStream& rng) {
    require(K >= 1, "draft_propose_block: K must be >= 1");
    require(!context_tokens.empty(), "draft_propose_block: empty context");
    Session<T> session(draft);
    if (context_tokens.size() > 1) {
        session.scan(context_tokens.subspan(0, context_tokens.size() - 1));
    }
    std::vector<TokenId> block;
    std::vector<Dist> dists;
    TokenId input = context_tokens.back();
    const std::vector<T> zero(static_cast<size_t>(draft.cfg.d_model), T(0));
    std::span<const T> cond =
        draft.cfg.draft_conditioning == DraftConditioning::last_hidden && !anchor_hidden.empty()
            ? anchor_hidden
            : std::span<const T>(zero);
    for (int k = 0; k < K; ++k) {
        auto outp = session.scan_anchored(std::span<const TokenId>(&input, 1), cond);
        Dist q = transform_logits<T>(outp.logits.row(0), sampling);
        const TokenId tok = sample_from(q, sampling, rng);
        block.push_back(tok);
        dists.push_back(std::move(q));
        input = tok;
    }
    return {std::move(block), std::move(dists)};
}

// ---------------------------------------------------------------------------
// tape path (training forward)
// ---------------------------------------------------------------------------

/// Builds differentiable forward passes for one model on a tape.
///
/// Parameters are registered once per tape. For draft models the shared
/// embedding/LM-head tensors are registered as constants, so their gradients
/// are never materialized (they are frozen by construction).
template <ScalarType T>
class TapeModel {
public:
    using Var = typename Tape<T>::Var;

    struct LayerKV {
        Var k; // [n × d] post-rotary
        Var v;
    };

    struct Pass {
        Var hidden;                // [n × d], post final norm
        std::vector<LayerKV> kv;   // per layer
        int first_position{0};
    };

    TapeModel(Tape<T>& tape, const Model<T>& m) : tape_(&tape), model_(&m) {
        const bool freeze_shared = m.cfg.role == ModelRole::draft;
        for (const auto& path : parameter_paths(m.cfg)) {
            const bool shared = path == "embed.weight" || path == "lm_head.weight";
            if (shared && freeze_shared) {
                pv_[path] = tape.constant(m.params.at(path));
            } else {
                pv_[path] = tape.param(path, m.params.at(path));
            }
        }
    }

    const Model<T>& model() const { return *model_; }

    /// Plain causal pass over `tokens` starting at absolute position
    /// `first_position` with an empty attention prefix.
    Pass plain_pass(std::span<const TokenId> tokens, int first_position = 0) {
        std::vector<int> allow(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) {
            allow[i] = static_cast<int>(i);
        }
        return pass_(tokens, {}, {}, 0, first_position, allow);
    }

    /// Anchored rows over block tokens attending to a bounded context prefix
    /// of a previous plain pass plus themselves (causal within the block).
    /// `ctx_len` bounds the visible context rows; `conditioning` is added to
    /// every input embedding.
    Pass anchored_pass(std::span<const TokenId> tokens, const Pass& ctx, int ctx_len,
                       const Tensor<T>& conditioning, int first_position) {
        std::vector<int> allow(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) {
            allow[i] = ctx_len + static_cast<int>(i);
        }
        return pass_(tokens, ctx_len > 0 ? &ctx : nullptr, conditioning, ctx_len, first_position,
                     allow);
    }

    /// Logits rows for (a subset of) hidden rows via the tied LM head.
    Var logits(Var hidden_rows) { return tape_->matmul_nt(hidden_rows, pv_.at("lm_head.weight")); }

    Var param_var(const std::string& path) const { return pv_.at(path); }

private:
    Pass pass_(std::span<const TokenId> tokens, const Pass* ctx, const Tensor<T>& conditioning,
               int ctx_len, int first_position, const std::vector<int>& allow) {
        const ModelConfig& cfg = model_->cfg;
        Tape<T>& tp = *tape_;
        const int n = static_cast<int>(tokens.size());
        require(n > 0, "TapeModel::pass: empty token span");

        std::vector<int> ids(tokens.begin(), tokens.end());
        Var x = tp.gather_rows(pv_.at("embed.weight"), ids);
        if (conditioning.numel() > 0) {
            Tensor<T> cond_rows({n, cfg.d_model});
            for (int r = 0; r < n; ++r) {
                std::copy_n(conditioning.data.data(), cfg.d_model, cond_rows.row(r).data());
            }
            x = tp.add(x, tp.constant(std::move(cond_rows)));
        }

        std::vector<int> positions(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            positions[static_cast<size_t>(i)] = first_position + i;
        }

        Pass out;
        out.first_position = first_position;
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string lp = "layers." + std::to_string(l) + ".";
            Var a_in = tp.rms_norm(x, pv_.at(lp + "attn_norm.gain"));
            Var q = tp.rotary(tp.matmul(a_in, pv_.at(lp + "attn.wq")), cfg.n_heads, positions);
            Var k = tp.rotary(tp.matmul(a_in, pv_.at(lp + "attn.wk")), cfg.n_heads, positions);
            Var v = tp.matmul(a_in, pv_.at(lp + "attn.wv"));
            Var k_all = k, v_all = v;
            if (ctx != nullptr) {
                Var ctx_k = tp.slice_rows(ctx->kv[static_cast<size_t>(l)].k, 0, ctx_len);
                Var ctx_v = tp.slice_rows(ctx->kv[static_cast<size_t>(l)].v, 0, ctx_len);
                k_all = tp.concat_rows(ctx_k, k);
                v_all = tp.concat_rows(ctx_v, v);
            }
            Var att = tp.attention(q, k_all, v_all, cfg.n_heads, allow);
            x = tp.add(x, tp.matmul(att, pv_.at(lp + "attn.wo")));
            Var f_in = tp.rms_norm(x, pv_.at(lp + "ffn_norm.gain"));
            Var ff = tp.matmul(tp.silu(tp.matmul(f_in, pv_.at(lp + "ffn.w1"))),
                               pv_.at(lp + "ffn.w2"));
            x = tp.add(x, ff);
            out.kv.push_back(LayerKV{k, v});
        }
        out.hidden = tp.rms_norm(x, pv_.at("final_norm.gain"));
        return out;
    }

    Tape<T>* tape_;
    const Model<T>* model_;
    std::map<std::string, Var> pv_;
};

} // namespace specopd
