#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "latentbank/autodiff.hpp"
#include "latentbank/rng.hpp"

namespace latentbank {

struct BackboneConfig {
    int vocab_size = 64;
    int d = 32;
    int n_layers_enc = 2;
    int n_layers_dec = 2;
    int n_heads = 2;
    int d_k = 0; // 0 -> d / n_heads
    int d_v = 0;
    int max_len = 64;
    uint64_t seed = 42;

    int dk() const { return d_k > 0 ? d_k : d / n_heads; }
    int dv() const { return d_v > 0 ? d_v : d / n_heads; }
    int d_ff() const { return 4 * d; }

    void validate() const {
        if (vocab_size < 1 || d < 1 || n_layers_enc < 1 || n_layers_dec < 1 ||
            n_heads < 1 || max_len < 1)
            throw ContractError("backbone config: extents must be >= 1");
        if (d % n_heads != 0) throw ContractError("backbone config: d % n_heads != 0");
        if (vocab_size <= kReservedIds)
            throw ContractError("backbone config: vocab too small for reserved ids");
    }
};

namespace detail {

template <typename S>
struct MultiHead {
    std::vector<Tensor<S>> wq, wk, wv; // per head, d x d_k / d x d_v
    Tensor<S> wo;                      // (heads * d_v) x d
};

template <typename S>
struct EncLayer {
    MultiHead<S> self_attn;
    Tensor<S> ffn1, ffn2;
};

template <typename S>
struct DecLayer {
    MultiHead<S> self_attn;
    MultiHead<S> cross_attn;
    Tensor<S> ffn1, ffn2;
};

} // namespace detail

// Seeded frozen toy encoder-decoder. Immutable after init_frozen; encode and
// decode are pure functions of the inputs. The decoder's cross-attention
// accepts extra memory-derived positions appended after the encoder rows.
//
// Inference-side attention (decode / greedy_decode, and the prefixed encode
// when asked) treats rows that are exactly all-zero as padding and masks
// them out, so appending zero rows reproduces the unextended model
// bit-for-bit. The teacher-forced loss keeps every row attendable: that is
// what lets gradients reach zero-initialised adapter projections.
template <typename S>
class FrozenBackbone {
  public:
    static constexpr S kMaskBias = S(-1e30);

    static FrozenBackbone init_frozen(const BackboneConfig& config) {
        config.validate();
        FrozenBackbone bb;
        bb.cfg_ = config;
        Rng root = Rng(config.seed).stream("backbone");
        bb.embedding_ = Tensor<S>::normal(config.vocab_size, config.d, S(0.02),
                                          root.stream("embed"));
        bb.w_out_ = Tensor<S>::normal(config.d, config.vocab_size, S(0.02),
                                      root.stream("head"));
        auto make_mha = [&](const std::string& label) {
            detail::MultiHead<S> m;
            for (int h = 0; h < config.n_heads; ++h) {
                m.wq.push_back(Tensor<S>::normal(config.d, config.dk(), S(0.02),
                                                 root.stream(label + ".q" + std::to_string(h))));
                m.wk.push_back(Tensor<S>::normal(config.d, config.dk(), S(0.02),
                                                 root.stream(label + ".k" + std::to_string(h))));
                m.wv.push_back(Tensor<S>::normal(config.d, config.dv(), S(0.02),
                                                 root.stream(label + ".v" + std::to_string(h))));
            }
            m.wo = Tensor<S>::normal(config.n_heads * config.dv(), config.d, S(0.02),
                                     root.stream(label + ".o"));
            return m;
        };
        for (int l = 0; l < config.n_layers_enc; ++l) {
            std::string lb = "enc.l" + std::to_string(l);
            detail::EncLayer<S> layer;
            layer.self_attn = make_mha(lb + ".self");
            layer.ffn1 = Tensor<S>::normal(config.d, config.d_ff(), S(0.02),
                                           root.stream(lb + ".ffn1"));
            layer.ffn2 = Tensor<S>::normal(config.d_ff(), config.d, S(0.02),
                                           root.stream(lb + ".ffn2"));
            bb.enc_layers_.push_back(std::move(layer));
        }
        for (int l = 0; l < config.n_layers_dec; ++l) {
            std::string lb = "dec.l" + std::to_string(l);
            detail::DecLayer<S> layer;
            layer.self_attn = make_mha(lb + ".self");
            layer.cross_attn = make_mha(lb + ".cross");
            layer.ffn1 = Tensor<S>::normal(config.d, config.d_ff(), S(0.02),
                                           root.stream(lb + ".ffn1"));
            layer.ffn2 = Tensor<S>::normal(config.d_ff(), config.d, S(0.02),
                                           root.stream(lb + ".ffn2"));
            bb.dec_layers_.push_back(std::move(layer));
        }
        return bb;
    }

    const BackboneConfig& config() const { return cfg_; }

    uint64_t weight_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        auto fold = [&h](const Tensor<S>& t) { h = fnv1a64(t.data().data(), t.data().size() * sizeof(S), h); };
        fold(embedding_);
        fold(w_out_);
        auto fold_mha = [&](const detail::MultiHead<S>& m) {
            for (const auto& t : m.wq) fold(t);
            for (const auto& t : m.wk) fold(t);
            for (const auto& t : m.wv) fold(t);
            fold(m.wo);
        };
        for (const auto& l : enc_layers_) {
            fold_mha(l.self_attn);
            fold(l.ffn1);
            fold(l.ffn2);
        }
        for (const auto& l : dec_layers_) {
            fold_mha(l.self_attn);
            fold_mha(l.cross_attn);
            fold(l.ffn1);
            fold(l.ffn2);
        }
        return h;
    }

    // Token embedding plus (scaled) sinusoidal positions; positions are
    // indexed from 0 within the token block, independent of any prefix.
    Tensor<S> embed(const std::vector<int>& tokens) const {
        if (tokens.empty()) throw ContractError("embed: empty token sequence");
        if (static_cast<int>(tokens.size()) > cfg_.max_len)
            throw ContractError("embed: input longer than max_len");
        Tensor<S> out(static_cast<int>(tokens.size()), cfg_.d);
        for (size_t i = 0; i < tokens.size(); ++i) {
            int id = tokens[i];
            if (id < 0 || id >= cfg_.vocab_size)
                throw ContractError("embed: token id " + std::to_string(id) + " out of vocab");
            const S* src = embedding_.row_ptr(id);
            S* dst = out.row_ptr(static_cast<int>(i));
            for (int j = 0; j < cfg_.d; ++j)
                dst[j] = src[j] + positional(static_cast<int>(i), j);
        }
        return out;
    }

    // Z_t = E(x_t); bidirectional self-attention over the whole input.
    Tensor<S> encode(const std::vector<int>& tokens) const {
        Tape<S> tape;
        Var<S> x = tape.constant(embed(tokens));
        return encoder_stack(tape, x, nullptr).value();
    }

    // Encoder run on an existing tape with m soft-prefix rows prepended.
    // Returns the full (m+n) x d latent; callers strip the first m rows.
    // Prefix rows carry no positional encoding and, when mask_zero_rows is
    // set, all-zero prefix rows are hidden from self-attention.
    Var<S> encode_prefixed(Tape<S>& tape, Var<S> prefix, const std::vector<int>& tokens,
                           bool mask_zero_rows) const {
        if (prefix.value().cols() != cfg_.d)
            throw DimensionError("encode_prefixed: prefix width != d");
        Var<S> x = ad::concat_rows(prefix, tape.constant(embed(tokens)));
        Tensor<S> bias;
        const Tensor<S>* bias_ptr = nullptr;
        if (mask_zero_rows) {
            bias = zero_row_bias(x.value().rows(), x.value());
            if (!bias.empty()) bias_ptr = &bias;
        }
        return encoder_stack(tape, x, bias_ptr);
    }

    // All-position next-token logits for a teacher-forced decoder pass.
    Var<S> decoder_logits(Tape<S>& tape, Var<S> enc_positions,
                          const std::vector<int>& dec_tokens, bool mask_zero_src) const {
        if (enc_positions.value().rows() < 1)
            throw ContractError("decode: empty encoder positions");
        if (enc_positions.value().cols() != cfg_.d)
            throw DimensionError("decode: encoder positions width != d");
        const int n = static_cast<int>(dec_tokens.size());
        Var<S> x = tape.constant(embed(dec_tokens));
        Tensor<S> causal = causal_bias(n);
        Tensor<S> src_bias;
        const Tensor<S>* src_bias_ptr = nullptr;
        if (mask_zero_src) {
            src_bias = zero_row_bias(n, enc_positions.value());
            if (!src_bias.empty()) src_bias_ptr = &src_bias;
        }
        const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(cfg_.dk()));
        for (const auto& layer : dec_layers_) {
            Var<S> h = ad::rmsnorm_rows(x, kNormEps);
            x = ad::add(x, attention(tape, h, h, layer.self_attn, &causal, inv_sqrt_dk));
            h = ad::rmsnorm_rows(x, kNormEps);
            x = ad::add(x, attention(tape, h, enc_positions, layer.cross_attn, src_bias_ptr,
                                     inv_sqrt_dk));
            h = ad::rmsnorm_rows(x, kNormEps);
            x = ad::add(x, feed_forward(tape, h, layer));
        }
        Var<S> final = ad::rmsnorm_rows(x, kNormEps);
        return ad::matmul(final, tape.constant(w_out_));
    }

    // Next-token logits given a target prefix; inference path (masks
    // all-zero encoder rows).
    Tensor<S> decode(const Tensor<S>& enc_positions,
                     const std::vector<int>& target_prefix) const {
        Tape<S> tape;
        Var<S> enc = tape.constant(enc_positions);
        std::vector<int> dec_tokens;
        dec_tokens.reserve(target_prefix.size() + 1);
        dec_tokens.push_back(kPadId);
        dec_tokens.insert(dec_tokens.end(), target_prefix.begin(), target_prefix.end());
        Var<S> logits = decoder_logits(tape, enc, dec_tokens, true);
        return ops::slice_rows(logits.value(), logits.value().rows() - 1,
                               logits.value().rows());
    }

    // Argmax decoding until the end token or max_steps; ties break toward
    // the lowest token id.
    std::vector<int> greedy_decode(const Tensor<S>& enc_positions, int max_steps) const {
        if (max_steps < 1) throw ContractError("greedy_decode: max_steps < 1");
        std::vector<int> out;
        for (int step = 0; step < max_steps; ++step) {
            Tensor<S> logits = decode(enc_positions, out);
            int best = 0;
            for (int j = 1; j < logits.cols(); ++j)
                if (logits(0, j) > logits(0, best)) best = j;
            if (best == kEndId) break;
            out.push_back(best);
            if (static_cast<int>(out.size()) + 1 >= cfg_.max_len) break;
        }
        return out;
    }

    // Mean token cross-entropy of the gold answer under teacher forcing;
    // differentiable w.r.t. enc_positions. Keeps zero rows attendable
    // (training path). Only answer tokens are targets: with short answers a
    // stop-token target would dominate the loss and pull every method toward
    // empty answers.
    Var<S> teacher_forced_loss(Tape<S>& tape, Var<S> enc_positions,
                               const std::vector<int>& gold) const {
        if (gold.empty()) throw ContractError("teacher_forced_loss: empty gold");
        std::vector<int> dec_tokens;
        dec_tokens.reserve(gold.size());
        dec_tokens.push_back(kPadId);
        dec_tokens.insert(dec_tokens.end(), gold.begin(), gold.end() - 1);
        Var<S> logits = decoder_logits(tape, enc_positions, dec_tokens, false);
        return ad::cross_entropy_rows(logits, gold);
    }

  private:
    static constexpr S kNormEps = S(1e-6);
    static constexpr S kPeScale = S(0.02); // matches the N(0, 0.02) embedding scale

    S positional(int pos, int j) const {
        double exponent = static_cast<double>(2 * (j / 2)) / cfg_.d;
        double freq = std::pow(10000.0, exponent);
        double v = (j % 2 == 0) ? std::sin(pos / freq) : std::cos(pos / freq);
        return kPeScale * static_cast<S>(v);
    }

    static Tensor<S> causal_bias(int n) {
        Tensor<S> b(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) b(i, j) = kMaskBias;
        return b;
    }

    // bias masking columns whose source row is exactly all-zero; empty when
    // nothing is masked
    static Tensor<S> zero_row_bias(int q_len, const Tensor<S>& src) {
        std::vector<int> zero_cols;
        for (int r = 0; r < src.rows(); ++r) {
            bool all_zero = true;
            for (int c = 0; c < src.cols(); ++c)
                if (src(r, c) != S(0)) {
                    all_zero = false;
                    break;
                }
            if (all_zero) zero_cols.push_back(r);
        }
        if (zero_cols.empty()) return Tensor<S>();
        Tensor<S> b(q_len, src.rows());
        for (int c : zero_cols)
            for (int i = 0; i < q_len; ++i) b(i, c) = kMaskBias;
        return b;
    }

    Var<S> attention(Tape<S>& tape, Var<S> q_in, Var<S> kv_in,
                     const detail::MultiHead<S>& w, const Tensor<S>* bias,
                     S inv_sqrt_dk) const {
        Var<S> bias_var;
        if (bias) bias_var = tape.constant(*bias);
        Var<S> cat;
        for (int h = 0; h < cfg_.n_heads; ++h) {
            Var<S> q = ad::matmul(q_in, tape.constant(w.wq[static_cast<size_t>(h)]));
            Var<S> k = ad::matmul(kv_in, tape.constant(w.wk[static_cast<size_t>(h)]));
            Var<S> v = ad::matmul(kv_in, tape.constant(w.wv[static_cast<size_t>(h)]));
            Var<S> scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_dk);
            if (bias) scores = ad::add(scores, bias_var);
            Var<S> head = ad::matmul(ad::softmax_rows(scores), v);
            cat = cat.valid() ? ad::concat_cols(cat, head) : head;
        }
        return ad::matmul(cat, tape.constant(w.wo));
    }

    template <typename Layer>
    Var<S> feed_forward(Tape<S>& tape, Var<S> h, const Layer& layer) const {
        Var<S> a = ad::relu(ad::matmul(h, tape.constant(layer.ffn1)));
        return ad::matmul(a, tape.constant(layer.ffn2));
    }

    Var<S> encoder_stack(Tape<S>& tape, Var<S> x, const Tensor<S>* self_bias) const {
        const S inv_sqrt_dk = S(1) / std::sqrt(static_cast<S>(cfg_.dk()));
        for (const auto& layer : enc_layers_) {
            Var<S> h = ad::rmsnorm_rows(x, kNormEps);
            x = ad::add(x, attention(tape, h, h, layer.self_attn, self_bias, inv_sqrt_dk));
            h = ad::rmsnorm_rows(x, kNormEps);
            x = ad::add(x, feed_forward(tape, h, layer));
        }
        return ad::rmsnorm_rows(x, kNormEps);
    }

    BackboneConfig cfg_;
    Tensor<S> embedding_;
    Tensor<S> w_out_;
    std::vector<detail::EncLayer<S>> enc_layers_;
    std::vector<detail::DecLayer<S>> dec_layers_;
};

} // namespace latentbank
