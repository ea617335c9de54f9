#pragma once

#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "latentbank/backbone.hpp"

namespace latentbank {

enum class MethodId : uint8_t {
    M0_Baseline = 0,
    M1_Prefix = 1,
    M2_XAttn = 2,
    M3_KVExt = 3,
    M4_Hebbian = 4,
    M5_Gated = 5,
    M6_Slot = 6,
};

inline const std::vector<MethodId>& all_methods() {
    static const std::vector<MethodId> v{
        MethodId::M0_Baseline, MethodId::M1_Prefix, MethodId::M2_XAttn,
        MethodId::M3_KVExt,    MethodId::M4_Hebbian, MethodId::M5_Gated,
        MethodId::M6_Slot};
    return v;
}

inline std::string method_name(MethodId m) {
    switch (m) {
        case MethodId::M0_Baseline: return "m0";
        case MethodId::M1_Prefix: return "m1";
        case MethodId::M2_XAttn: return "m2";
        case MethodId::M3_KVExt: return "m3";
        case MethodId::M4_Hebbian: return "m4";
        case MethodId::M5_Gated: return "m5";
        case MethodId::M6_Slot: return "m6";
    }
    throw ContractError("unknown method id");
}

inline std::string method_label(MethodId m) {
    switch (m) {
        case MethodId::M0_Baseline: return "M0 Baseline";
        case MethodId::M1_Prefix: return "M1 Prefix";
        case MethodId::M2_XAttn: return "M2 XAttn";
        case MethodId::M3_KVExt: return "M3 KVExt";
        case MethodId::M4_Hebbian: return "M4 Hebbian";
        case MethodId::M5_Gated: return "M5 Gated";
        case MethodId::M6_Slot: return "M6 Slot";
    }
    throw ContractError("unknown method id");
}

inline bool parse_method(const std::string& name, MethodId& out) {
    for (MethodId m : all_methods())
        if (method_name(m) == name) {
            out = m;
            return true;
        }
    return false;
}

// Shared memory hyper-parameters. Zero means "derive the default": d_h = 8*d,
// prefix_m = n_p. The toy capacity ladder keeps the relative scaling of the
// full-size configuration (n_p and slot count x10, d_h x sqrt(10)).
struct MemoryHyper {
    int n_p = 64;
    double gamma = 0.95;
    int d_h = 0;
    int slots = 64;
    int top_k = 8;
    int prefix_m = 0;
    double gate_bias_init = -4.0;
    int capacity_scale = 0; // 0 custom/full, 1 or 10 for the toy ladder

    int dh(int d) const { return d_h > 0 ? d_h : 8 * d; }
    int m() const { return prefix_m > 0 ? prefix_m : n_p; }

    void validate() const {
        if (n_p < 1 || slots < 1 || top_k < 1) throw ContractError("memory hyper: extents must be >= 1");
        if (top_k > slots) throw ContractError("memory hyper: top_k > slot count");
        if (!(gamma > 0.0 && gamma < 1.0) && gamma != 1.0)
            throw ContractError("memory hyper: gamma outside (0, 1]");
        if (prefix_m > n_p) throw ContractError("memory hyper: prefix_m > n_p");
    }

    static MemoryHyper toy(int scale) {
        MemoryHyper h;
        h.capacity_scale = scale;
        if (scale == 1) {
            h.n_p = 16;
            h.d_h = 64;
            h.slots = 16;
            h.top_k = 4;
        } else if (scale == 10) {
            h.n_p = 160;
            h.d_h = 202;
            h.slots = 160;
            h.top_k = 4;
        } else {
            throw ContractError("toy capacity scale must be 1 or 10");
        }
        return h;
    }
};

enum class StateKind : uint8_t { None = 0, Bank = 1, Assoc = 2, Slots = 3 };

inline StateKind state_kind(MethodId m) {
    switch (m) {
        case MethodId::M0_Baseline: return StateKind::None;
        case MethodId::M4_Hebbian: return StateKind::Assoc;
        case MethodId::M6_Slot: return StateKind::Slots;
        default: return StateKind::Bank;
    }
}

// The only state surviving across turns and sessions. One dense tensor per
// method family: Bank n_p x d, Assoc d_h x d_h, Slots S x d.
template <typename S>
struct MemoryState {
    MethodId method = MethodId::M0_Baseline;
    StateKind kind = StateKind::None;
    Tensor<S> mem;
    uint64_t turn_counter = 0;
};

template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> value;
};

// Per-method parameter set with an explicit trainable / frozen partition.
// gamma is a frozen hyper-parameter and lives in `hyper`, never here.
template <typename S>
struct AdapterParams {
    MethodId method = MethodId::M0_Baseline;
    MemoryHyper hyper;
    std::vector<NamedParam<S>> trainable;
    std::vector<NamedParam<S>> frozen;

    const Tensor<S>& get(const std::string& name) const {
        for (const auto& p : trainable)
            if (p.name == name) return p.value;
        for (const auto& p : frozen)
            if (p.name == name) return p.value;
        throw ContractError("adapter param not found: " + name);
    }
    Tensor<S>& mutable_trainable(const std::string& name) {
        for (auto& p : trainable)
            if (p.name == name) return p.value;
        throw ContractError("trainable param not found: " + name);
    }
    bool is_trainable(const std::string& name) const {
        for (const auto& p : trainable)
            if (p.name == name) return true;
        return false;
    }
    uint64_t trainable_hash() const { return hash_list(trainable); }
    uint64_t frozen_hash() const { return hash_list(frozen); }

  private:
    static uint64_t hash_list(const std::vector<NamedParam<S>>& list) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : list) {
            h = fnv1a64(p.name.data(), p.name.size(), h);
            h = fnv1a64(p.value.data().data(), p.value.size() * sizeof(S), h);
        }
        return h;
    }
};

// ---------------------------------------------------------------------------
// initialisation
// ---------------------------------------------------------------------------

// Safe startup: projections that feed the decoder start at zero (W_P, W_Mem,
// beta) or behind a nearly-closed gate, so a fresh adapter reproduces the
// baseline. Write-side projections are fixed random maps.
template <typename S>
AdapterParams<S> init_params(MethodId method, const MemoryHyper& hyper,
                             const BackboneConfig& cfg, uint64_t seed) {
    hyper.validate();
    AdapterParams<S> p;
    p.method = method;
    p.hyper = hyper;
    const int d = cfg.d;
    const int dh = hyper.dh(d);
    Rng root = Rng(seed).stream("adapter." + method_name(method));
    // 1/sqrt(d) keeps projected memory content at the scale of encoder
    // latents; the backbone's 0.02 convention would bury it
    const S sigma = S(1) / std::sqrt(static_cast<S>(d));
    auto rand = [&](const std::string& name, int r, int c) {
        return NamedParam<S>{name, Tensor<S>::normal(r, c, sigma, root.stream(name))};
    };
    auto zero = [&](const std::string& name, int r, int c) {
        return NamedParam<S>{name, Tensor<S>::zeros(r, c)};
    };
    switch (method) {
        case MethodId::M0_Baseline:
            break;
        case MethodId::M1_Prefix:
            p.trainable.push_back({"u_p", Tensor<S>::identity(hyper.n_p)});
            p.trainable.push_back(zero("w_p", d, d));
            p.frozen.push_back(rand("wq", d, d));
            p.frozen.push_back(rand("wk", d, d));
            p.frozen.push_back(rand("wv", d, d));
            break;
        case MethodId::M2_XAttn:
            p.trainable.push_back(rand("wq_mem", d, d));
            p.trainable.push_back(rand("wk_mem", d, d));
            p.trainable.push_back(rand("wv_mem", d, d));
            p.trainable.push_back(rand("o_mem", d, d));
            p.trainable.push_back(zero("beta", 1, cfg.n_layers_dec));
            p.frozen.push_back(rand("wq", d, d));
            p.frozen.push_back(rand("wk", d, d));
            p.frozen.push_back(rand("wv", d, d));
            break;
        case MethodId::M3_KVExt:
            p.trainable.push_back(zero("w_mem", d, d));
            p.frozen.push_back(rand("wq", d, d));
            p.frozen.push_back(rand("wk", d, d));
            p.frozen.push_back(rand("wv", d, d));
            break;
        case MethodId::M4_Hebbian:
            // zero-initialising both w_qh and w_mem would deadlock gradients;
            // w_qh keeps the small N(0, 0.02) init
            p.trainable.push_back(
                {"w_qh", Tensor<S>::normal(d, dh, S(0.02), root.stream("w_qh"))});
            p.trainable.push_back(zero("w_mem", dh, d));
            p.frozen.push_back(rand("w_kh", d, dh));
            p.frozen.push_back(rand("w_vh", d, dh));
            break;
        case MethodId::M5_Gated:
            p.trainable.push_back(rand("wq_mem", d, d));
            p.trainable.push_back(rand("wk_mem", d, d));
            p.trainable.push_back(rand("wv_mem", d, d));
            p.trainable.push_back(rand("w_g", 2 * d, 1));
            p.trainable.push_back(
                {"b_g", Tensor<S>::full(1, 1, static_cast<S>(hyper.gate_bias_init))});
            p.frozen.push_back(rand("wq", d, d));
            p.frozen.push_back(rand("wk", d, d));
            p.frozen.push_back(rand("wv", d, d));
            break;
        case MethodId::M6_Slot:
            p.trainable.push_back(zero("w_mem", d, d));
            p.frozen.push_back(rand("w_a", d, d));
            p.frozen.push_back(rand("w_u", d, d));
            break;
    }
    return p;
}

template <typename S>
MemoryState<S> zero_state(MethodId method, const MemoryHyper& hyper, int d) {
    MemoryState<S> st;
    st.method = method;
    st.kind = state_kind(method);
    switch (st.kind) {
        case StateKind::None: break;
        case StateKind::Bank: st.mem = Tensor<S>(hyper.n_p, d); break;
        case StateKind::Assoc: st.mem = Tensor<S>(hyper.dh(d), hyper.dh(d)); break;
        case StateKind::Slots: st.mem = Tensor<S>(hyper.slots, d); break;
    }
    return st;
}

// ---------------------------------------------------------------------------
// write rules: plain tensor math, always outside gradient recording
// ---------------------------------------------------------------------------

// P_t = gamma P + A^T V with A = softmax(Z wq (P wk)^T / sqrt(d)), V = Z wv.
// Values come from Z_t, so new content enters even from an all-zero bank.
template <typename S>
Tensor<S> write_attention(const Tensor<S>& bank, const Tensor<S>& z, const Tensor<S>& wq,
                          const Tensor<S>& wk, const Tensor<S>& wv, S gamma) {
    if (z.cols() != wq.rows() || bank.cols() != wk.rows())
        throw DimensionError("write_attention: projection dims");
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(z.cols()));
    Tensor<S> q = ops::matmul(z, wq);
    Tensor<S> k = ops::matmul(bank, wk);
    Tensor<S> v = ops::matmul(z, wv);
    Tensor<S> a = ops::softmax_rows(ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt_d));
    return ops::add(ops::scale(bank, gamma), ops::matmul(ops::transpose(a), v));
}

// M_t = clamp(gamma M + (1/n)(Z w_kh)^T (Z w_vh)), ||M||_F <= 1 after every
// write. The re-check loop guards against a final ulp above 1.
template <typename S>
Tensor<S> write_hebbian(const Tensor<S>& assoc, const Tensor<S>& z, const Tensor<S>& wkh,
                        const Tensor<S>& wvh, S gamma) {
    if (z.cols() != wkh.rows() || assoc.rows() != wkh.cols())
        throw DimensionError("write_hebbian: projection dims");
    const S inv_n = S(1) / static_cast<S>(z.rows());
    Tensor<S> k = ops::matmul(z, wkh);
    Tensor<S> v = ops::matmul(z, wvh);
    Tensor<S> m = ops::add(ops::scale(assoc, gamma),
                           ops::scale(ops::matmul(ops::transpose(k), v), inv_n));
    for (int guard = 0; guard < 8; ++guard) {
        S norm = ops::frobenius(m);
        if (norm <= S(1)) break;
        m = ops::scale(m, S(1) / norm);
    }
    return m;
}

template <typename S>
struct SlotWriteResult {
    Tensor<S> slots;
    std::vector<uint8_t> mask; // 1 = written this turn, exactly k entries
};

// Sparse slot write: address with the mean latent, update exactly the top-k
// slots (ties break toward the lowest slot index), leave the rest untouched.
template <typename S>
SlotWriteResult<S> write_slots(const Tensor<S>& slots, const Tensor<S>& z,
                               const Tensor<S>& wa, const Tensor<S>& wu, S gamma, int k) {
    if (k < 1 || k > slots.rows()) throw ContractError("write_slots: k out of range");
    if (z.cols() != wa.rows() || wa.cols() != slots.cols())
        throw DimensionError("write_slots: projection dims");
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(z.cols()));
    Tensor<S> zbar = ops::row_mean(z);
    Tensor<S> scores = ops::scale(
        ops::matmul(ops::matmul(zbar, wa), ops::transpose(slots)), inv_sqrt_d);
    Tensor<S> a = ops::softmax_rows(scores);
    std::vector<int> order(static_cast<size_t>(slots.rows()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return a(0, x) > a(0, y); });
    SlotWriteResult<S> out;
    out.slots = slots;
    out.mask.assign(static_cast<size_t>(slots.rows()), 0);
    Tensor<S> u = ops::matmul(zbar, wu);
    for (int i = 0; i < k; ++i) {
        int s = order[static_cast<size_t>(i)];
        out.mask[static_cast<size_t>(s)] = 1;
        for (int j = 0; j < slots.cols(); ++j)
            out.slots(s, j) = gamma * slots(s, j) + (S(1) - gamma) * u(0, j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// read rules: taped, differentiable through the frozen backbone
// ---------------------------------------------------------------------------

// S_t = U_P P W_P, the soft prefix the caller prepends to the encoder input
template <typename S>
Var<S> read_prefix(Tape<S>& tape, Var<S> bank, Var<S> u_p, Var<S> w_p) {
    (void)tape;
    return ad::matmul(ad::matmul(u_p, bank), w_p);
}

// H_Mem = P W_Mem, pseudo-encoder rows appended for the frozen decoder
template <typename S>
Var<S> read_kv_extension(Tape<S>& tape, Var<S> state, Var<S> w_mem) {
    (void)tape;
    return ad::matmul(state, w_mem);
}

// memory cross-attention computed once with Z_t as decoder-state proxy
template <typename S>
Var<S> memory_cross_attention(Var<S> z, Var<S> bank, Var<S> wq, Var<S> wk, Var<S> wv) {
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(z.value().cols()));
    Var<S> q = ad::matmul(z, wq);
    Var<S> k = ad::matmul(bank, wk);
    Var<S> v = ad::matmul(bank, wv);
    Var<S> a = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
    return ad::matmul(a, v);
}

// c = XAttn(Z, P) O, blended by mean(beta); beta = 0 falls back to baseline
template <typename S>
Var<S> read_xattn_proxy(Tape<S>& tape, Var<S> z, Var<S> bank, Var<S> wq, Var<S> wk,
                        Var<S> wv, Var<S> o, Var<S> beta, int n_layers_dec) {
    (void)tape;
    if (beta.value().size() != static_cast<size_t>(n_layers_dec))
        throw DimensionError("read_xattn_proxy: beta length != decoder layers");
    Var<S> c = ad::matmul(memory_cross_attention(z, bank, wq, wk, wv), o);
    return ad::scale_by(c, ad::mean_all(beta));
}

// H_Mem = ((Z W_QH) M) W_Mem
template <typename S>
Var<S> read_hebbian(Tape<S>& tape, Var<S> z, Var<S> assoc, Var<S> w_qh, Var<S> w_mem) {
    (void)tape;
    return ad::matmul(ad::matmul(ad::matmul(z, w_qh), assoc), w_mem);
}

// g = sigmoid([z; c] w_g + b_g) per position, output g (.) c
template <typename S>
Var<S> read_gated_proxy(Tape<S>& tape, Var<S> z, Var<S> bank, Var<S> wq, Var<S> wk,
                        Var<S> wv, Var<S> w_g, Var<S> b_g) {
    (void)tape;
    Var<S> c = memory_cross_attention(z, bank, wq, wk, wv);
    Var<S> pre = ad::add_rowvec(ad::matmul(ad::concat_cols(z, c), w_g), b_g);
    Var<S> gate = ad::sigmoid(pre);
    return ad::scale_rows(c, gate);
}

// ---------------------------------------------------------------------------
// bound parameters and the per-question read path
// ---------------------------------------------------------------------------

template <typename S>
struct BoundParams {
    std::map<std::string, Var<S>> vars;
    std::vector<std::pair<std::string, Var<S>>> trainable; // tape leaves, in order

    Var<S> at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw ContractError("bound param not found: " + name);
        return it->second;
    }
};

template <typename S>
BoundParams<S> bind_params(Tape<S>& tape, const AdapterParams<S>& params, bool train) {
    BoundParams<S> b;
    for (const auto& p : params.trainable) {
        Var<S> v = tape.leaf(p.value, train);
        b.vars.emplace(p.name, v);
        if (train) b.trainable.emplace_back(p.name, v);
    }
    for (const auto& p : params.frozen) b.vars.emplace(p.name, tape.constant(p.value));
    return b;
}

// Encoder positions the decoder answers from: Read(Z_t, P_{t-1}). Memory
// extensions are appended after the n current-turn rows; M1 instead runs the
// frozen encoder over [prefix; question] and strips the prefix rows.
// `inference` selects the padding treatment of all-zero rows.
template <typename S>
Var<S> assemble_enc_positions(Tape<S>& tape, const FrozenBackbone<S>& bb,
                              const AdapterParams<S>& params, const BoundParams<S>& bound,
                              const MemoryState<S>& state, const std::vector<int>& question,
                              bool inference) {
    if (params.method != state.method)
        throw ContractError("assemble_enc_positions: state/params method mismatch");
    if (params.method == MethodId::M0_Baseline)
        return tape.constant(bb.encode(question));

    Var<S> mem = tape.constant(state.mem);
    switch (params.method) {
        case MethodId::M1_Prefix: {
            Var<S> prefix = read_prefix(tape, mem, bound.at("u_p"), bound.at("w_p"));
            Var<S> full = bb.encode_prefixed(tape, prefix, question, inference);
            const int m = prefix.value().rows();
            return ad::slice_rows(full, m, full.value().rows());
        }
        case MethodId::M2_XAttn: {
            Var<S> z = tape.constant(bb.encode(question));
            Var<S> ext = read_xattn_proxy(tape, z, mem, bound.at("wq_mem"), bound.at("wk_mem"),
                                          bound.at("wv_mem"), bound.at("o_mem"),
                                          bound.at("beta"), bb.config().n_layers_dec);
            return ad::concat_rows(z, ext);
        }
        case MethodId::M3_KVExt:
        case MethodId::M6_Slot: {
            Var<S> z = tape.constant(bb.encode(question));
            Var<S> ext = read_kv_extension(tape, mem, bound.at("w_mem"));
            return ad::concat_rows(z, ext);
        }
        case MethodId::M4_Hebbian: {
            Var<S> z = tape.constant(bb.encode(question));
            Var<S> ext = read_hebbian(tape, z, mem, bound.at("w_qh"), bound.at("w_mem"));
            return ad::concat_rows(z, ext);
        }
        case MethodId::M5_Gated: {
            Var<S> z = tape.constant(bb.encode(question));
            Var<S> ext = read_gated_proxy(tape, z, mem, bound.at("wq_mem"), bound.at("wk_mem"),
                                          bound.at("wv_mem"), bound.at("w_g"), bound.at("b_g"));
            return ad::concat_rows(z, ext);
        }
        default:
            throw ContractError("assemble_enc_positions: unsupported method");
    }
}

// Inference-only convenience: raw tensor of encoder positions.
template <typename S>
Tensor<S> enc_positions_value(const FrozenBackbone<S>& bb, const AdapterParams<S>& params,
                              const MemoryState<S>& state, const std::vector<int>& question) {
    Tape<S> tape;
    BoundParams<S> bound = bind_params(tape, params, false);
    return assemble_enc_positions(tape, bb, params, bound, state, question, true).value();
}

// Write dispatch: turn t's write consumes Z_t and P_{t-1} and produces P_t.
// Answering happens before this (Read uses P_{t-1}).
template <typename S>
MemoryState<S> step(const FrozenBackbone<S>& bb, const AdapterParams<S>& params,
                    const MemoryState<S>& state, const std::vector<int>& turn_tokens) {
    if (params.method != state.method)
        throw ContractError("step: state/params method mismatch");
    MemoryState<S> next = state;
    next.turn_counter = state.turn_counter + 1;
    if (params.method == MethodId::M0_Baseline) return next;

    Tensor<S> z = bb.encode(turn_tokens);
    const S gamma = static_cast<S>(params.hyper.gamma);
    switch (params.method) {
        case MethodId::M1_Prefix:
        case MethodId::M2_XAttn:
        case MethodId::M3_KVExt:
        case MethodId::M5_Gated:
            next.mem = write_attention(state.mem, z, params.get("wq"), params.get("wk"),
                                       params.get("wv"), gamma);
            break;
        case MethodId::M4_Hebbian:
            next.mem = write_hebbian(state.mem, z, params.get("w_kh"), params.get("w_vh"),
                                     gamma);
            break;
        case MethodId::M6_Slot:
            next.mem = write_slots(state.mem, z, params.get("w_a"), params.get("w_u"), gamma,
                                   params.hyper.top_k)
                           .slots;
            break;
        default:
            break;
    }
    next.mem.check_finite("memory state after write");
    return next;
}

// Greedy answer for a question under (params, state); the backbone masks
// all-zero appended rows, so a zero extension reproduces the baseline.
template <typename S>
std::vector<int> answer_question(const FrozenBackbone<S>& bb, const AdapterParams<S>& params,
                                 const MemoryState<S>& state, const std::vector<int>& question,
                                 int max_steps) {
    return bb.greedy_decode(enc_positions_value(bb, params, state, question), max_steps);
}

} // namespace latentbank
