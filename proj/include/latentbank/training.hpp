#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "latentbank/adapters.hpp"
#include "latentbank/corpus.hpp"

namespace latentbank {

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-2;
    int warmup_steps = 200;
    double grad_clip = 1.0;
    int epochs = 10;
    int batch = 2;
    int grad_accum = 8;
    int tbptt_window = 8;
    uint64_t seed = 42;
    // AdamW constants; the usual defaults
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (lr <= 0 || weight_decay < 0 || warmup_steps < 0 || grad_clip <= 0 ||
            epochs < 1 || batch < 1 || grad_accum < 1 || tbptt_window < 1)
            throw ContractError("train config: fields must be positive");
    }

    double lr_at(int64_t step) const {
        if (warmup_steps <= 0) return lr;
        double scale = std::min(1.0, static_cast<double>(step) / warmup_steps);
        return lr * scale;
    }
};

// Consecutive windows of at most k turns: [0,k), [k,2k), ...
inline std::vector<std::pair<int, int>> tbptt_segment(int n_turns, int k) {
    if (k < 1) throw ContractError("tbptt_segment: k must be >= 1");
    std::vector<std::pair<int, int>> out;
    for (int start = 0; start < n_turns; start += k)
        out.emplace_back(start, std::min(start + k, n_turns));
    return out;
}

// Scale all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm; returns the pre-clip norm.
template <typename S>
double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
    double ss = 0.0;
    for (const auto& g : grads) {
        if (!g.all_finite()) throw NumericError("clip_global_norm: non-finite gradient");
        for (S v : g.data()) ss += static_cast<double>(v) * static_cast<double>(v);
    }
    double norm = std::sqrt(ss);
    if (norm > max_norm) {
        S scale = static_cast<S>(max_norm / norm);
        for (auto& g : grads)
            for (auto& v : g.data()) v *= scale;
    }
    return norm;
}

// AdamW moments for the trainable parameter list, in list order. Decoupled
// weight decay applies to the trainable read-side parameters only (they are
// the only thing the optimizer ever sees).
template <typename S>
struct OptimizerState {
    std::vector<Tensor<S>> m, v;
    int64_t step = 0;

    static OptimizerState init(const AdapterParams<S>& params) {
        OptimizerState st;
        for (const auto& p : params.trainable) {
            st.m.emplace_back(p.value.rows(), p.value.cols());
            st.v.emplace_back(p.value.rows(), p.value.cols());
        }
        return st;
    }
};

// One bias-corrected AdamW update; grads align with params.trainable.
template <typename S>
void optimizer_step(OptimizerState<S>& opt, AdapterParams<S>& params,
                    const std::vector<Tensor<S>>& grads, const TrainConfig& cfg) {
    if (grads.size() != params.trainable.size())
        throw DimensionError("optimizer_step: gradient count mismatch");
    opt.step += 1;
    const double lr_t = cfg.lr_at(opt.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (size_t i = 0; i < grads.size(); ++i) {
        Tensor<S>& p = params.trainable[i].value;
        const Tensor<S>& g = grads[i];
        if (!g.same_shape(p)) throw DimensionError("optimizer_step: gradient shape mismatch");
        if (!g.all_finite()) throw NumericError("optimizer_step: non-finite gradient");
        Tensor<S>& m = opt.m[i];
        Tensor<S>& v = opt.v[i];
        for (size_t k = 0; k < p.size(); ++k) {
            double gk = static_cast<double>(g.data()[k]);
            double mk = cfg.beta1 * static_cast<double>(m.data()[k]) + (1.0 - cfg.beta1) * gk;
            double vk = cfg.beta2 * static_cast<double>(v.data()[k]) + (1.0 - cfg.beta2) * gk * gk;
            m.data()[k] = static_cast<S>(mk);
            v.data()[k] = static_cast<S>(vk);
            double update = (mk / bc1) / (std::sqrt(vk / bc2) + cfg.adam_eps);
            double pk = static_cast<double>(p.data()[k]);
            pk -= lr_t * (update + cfg.weight_decay * pk);
            p.data()[k] = static_cast<S>(pk);
        }
    }
}

struct TraceRow {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

inline std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::string out = "step,loss,lr,grad_norm\n";
    char line[128];
    for (const auto& r : trace) {
        std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(r.step), r.loss, r.lr, r.grad_norm);
        out += line;
    }
    return out;
}

template <typename S>
struct TrainResult {
    AdapterParams<S> params;
    std::vector<TraceRow> trace;
};

// Type-1 supervised training. Writes are detached (plain tensor updates, no
// tape), so gradients reach theta_Mem only through the read path of each
// answer loss. All of a conversation's QA probes happen at end-of-
// conversation on the tape of the final TBPTT window; earlier windows only
// advance state. A micro-batch is `batch` conversations; an optimizer step
// fires every grad_accum micro-batches.
template <typename S>
TrainResult<S> type1_train(const FrozenBackbone<S>& backbone, MethodId method,
                           const std::vector<TokenizedConversation>& corpus,
                           const MemoryHyper& hyper, const TrainConfig& cfg) {
    cfg.validate();
    const uint64_t backbone_hash_before = backbone.weight_hash();
    TrainResult<S> out;
    out.params = init_params<S>(method, hyper, backbone.config(), cfg.seed);
    if (method == MethodId::M0_Baseline) return out; // nothing trainable

    const uint64_t frozen_hash_before = out.params.frozen_hash();
    OptimizerState<S> opt = OptimizerState<S>::init(out.params);

    std::vector<Tensor<S>> grad_sum;
    for (const auto& p : out.params.trainable)
        grad_sum.emplace_back(p.value.rows(), p.value.cols());
    double loss_sum = 0.0;
    int loss_count = 0;
    int micro_batches = 0;
    int convs_in_micro = 0;

    auto flush_step = [&]() {
        for (auto& g : grad_sum)
            for (auto& v : g.data()) v /= static_cast<S>(std::max(1, loss_count));
        double norm = clip_global_norm(grad_sum, cfg.grad_clip);
        optimizer_step(opt, out.params, grad_sum, cfg);
        out.trace.push_back({opt.step, loss_sum / std::max(1, loss_count),
                             cfg.lr_at(opt.step), norm});
        for (auto& g : grad_sum)
            std::fill(g.data().begin(), g.data().end(), S(0));
        loss_sum = 0.0;
        loss_count = 0;
        micro_batches = 0;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& conv : corpus) {
            if (conv.qa.empty()) continue;
            MemoryState<S> state = zero_state<S>(method, hyper, backbone.config().d);
            auto segments = tbptt_segment(conv.total_turns(), cfg.tbptt_window);
            for (size_t si = 0; si < segments.size(); ++si) {
                for (int t = segments[si].first; t < segments[si].second; ++t)
                    state = step(backbone, out.params,
                                 state, conv.turn_tokens[static_cast<size_t>(t)]);
                if (si + 1 < segments.size()) continue;
                // final window: probe every QA against the full state
                Tape<S> tape;
                BoundParams<S> bound = bind_params(tape, out.params, true);
                Var<S> total;
                for (const auto& qa : conv.qa) {
                    Var<S> enc = assemble_enc_positions(tape, backbone, out.params, bound,
                                                        state, qa.question, false);
                    Var<S> loss = backbone.teacher_forced_loss(tape, enc, qa.answer);
                    total = total.valid() ? ad::add(total, loss) : loss;
                }
                Var<S> mean_loss =
                    ad::scale(total, S(1) / static_cast<S>(conv.qa.size()));
                double loss_value = static_cast<double>(mean_loss.value().scalar());
                if (!std::isfinite(loss_value))
                    throw TrainingDiverged(static_cast<int>(opt.step) + 1,
                                           method_name(method));
                tape.backward(mean_loss);
                for (size_t pi = 0; pi < bound.trainable.size(); ++pi)
                    grad_sum[pi] = ops::add(grad_sum[pi],
                                            tape.grad(bound.trainable[pi].second));
                loss_sum += loss_value;
                ++loss_count;
            }
            if (++convs_in_micro >= cfg.batch) {
                convs_in_micro = 0;
                if (++micro_batches >= cfg.grad_accum && loss_count > 0) flush_step();
            }
        }
    }
    if (loss_count > 0) flush_step();

    if (backbone.weight_hash() != backbone_hash_before)
        throw ContractError("type1_train: backbone weights changed");
    if (out.params.frozen_hash() != frozen_hash_before)
        throw ContractError("type1_train: frozen write-side projections changed");
    return out;
}

// Type-2 conversational accumulation: sequential writes with theta_Mem
// fixed, no gradient computation anywhere.
template <typename S>
MemoryState<S> type2_accumulate(const FrozenBackbone<S>& backbone,
                                const AdapterParams<S>& params, MemoryState<S> state,
                                const std::vector<std::vector<int>>& session_turns) {
    for (const auto& turn : session_turns) state = step(backbone, params, state, turn);
    return state;
}

} // namespace latentbank
