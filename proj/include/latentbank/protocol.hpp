#pragma once

#include <optional>

#include "latentbank/bank_io.hpp"
#include "latentbank/evaluation.hpp"
#include "latentbank/training.hpp"

namespace latentbank {

struct ProtocolConfig {
    double eps = kDefaultEvalEps;
    LagBuckets buckets;
    int max_answer_steps = 4;
    int knowledge_conversations = 10; // K_s probing is the expensive part
    int capacity_scale = 0;
    uint64_t seed = 42;
};

template <typename S>
struct MethodUnderTest {
    AdapterParams<S> params;
    std::optional<MemoryState<S>> initial_state; // zero state when absent
};

// The forgetting-curve protocol. Every question is answered twice under the
// equal-input principle: once with the accumulated state, once with the
// state forced to zero; both arms see exactly the same question tokens.
// M0 is always evaluated and anchors the tax/benefit columns.
template <typename S>
EvalReport run_protocol(const FrozenBackbone<S>& backbone,
                        const std::vector<MethodUnderTest<S>>& methods,
                        const std::vector<TokenizedConversation>& corpus,
                        const Tokenizer& tok, const ProtocolConfig& pc) {
    EvalReport report;
    report.eps = pc.eps;
    report.buckets = pc.buckets;
    report.capacity_scale = pc.capacity_scale;
    report.seed = pc.seed;

    // M0 runs first so its mean F1 anchors every later tax/benefit row
    std::vector<MethodUnderTest<S>> run_list;
    for (const auto& m : methods)
        if (m.params.method == MethodId::M0_Baseline) run_list.push_back(m);
    if (run_list.empty()) {
        MethodUnderTest<S> m0;
        m0.params.method = MethodId::M0_Baseline;
        run_list.push_back(std::move(m0));
    }
    for (const auto& m : methods)
        if (m.params.method != MethodId::M0_Baseline) run_list.push_back(m);

    double f1_base_mean = 0.0;
    for (const auto& mut : run_list) {
        const AdapterParams<S>& params = mut.params;
        const MethodId method = params.method;
        MethodReport mr;
        mr.method = method_name(method);
        for (size_t ci = 0; ci < corpus.size(); ++ci) {
            const TokenizedConversation& conv = corpus[ci];
            MemoryState<S> state =
                mut.initial_state ? *mut.initial_state
                                  : zero_state<S>(method, params.hyper, backbone.config().d);
            std::vector<MemoryState<S>> after_session;
            int t = 0;
            for (int s = 0; s < conv.n_sessions(); ++s) {
                for (int j = 0; j < conv.session_turn_count[static_cast<size_t>(s)]; ++j, ++t)
                    state = step(backbone, params, state,
                                 conv.turn_tokens[static_cast<size_t>(t)]);
                after_session.push_back(state);
            }
            MemoryState<S> zeroed = zero_state<S>(method, params.hyper, backbone.config().d);
            for (size_t qi = 0; qi < conv.qa.size(); ++qi) {
                const TokenizedQA& qa = conv.qa[qi];
                // equal-input: both arms consume the identical question tokens
                auto mem_answer = answer_question(backbone, params, state, qa.question,
                                                  pc.max_answer_steps);
                auto zero_answer = answer_question(backbone, params, zeroed, qa.question,
                                                   pc.max_answer_steps);
                QuestionResult qr;
                qr.conversation = static_cast<int>(ci);
                qr.question = static_cast<int>(qi);
                qr.lag = evidence_lag(qa.evidence_turns, conv.total_turns());
                qr.f1_mem = token_f1(tok.decode_words(mem_answer), qa.gold_words);
                qr.f1_zero = token_f1(tok.decode_words(zero_answer), qa.gold_words);
                qr.rho = memory_recall_rate(qr.f1_mem, qr.f1_zero, pc.eps);
                mr.questions.push_back(qr);
            }
            if (static_cast<int>(ci) < pc.knowledge_conversations) {
                mr.knowledge.push_back(knowledge_curve(
                    conv, [&](size_t qi, int s) {
                        return tok.decode_words(answer_question(
                            backbone, params, after_session[static_cast<size_t>(s - 1)],
                            conv.qa[qi].question, pc.max_answer_steps));
                    }));
            }
        }
        std::vector<std::pair<double, int>> rho_lag;
        for (const auto& q : mr.questions) rho_lag.emplace_back(q.rho, q.lag);
        mr.curve = forgetting_curve(rho_lag, pc.buckets);
        if (method == MethodId::M0_Baseline) {
            double sum = 0.0;
            for (const auto& q : mr.questions) sum += q.f1_mem;
            f1_base_mean = mr.questions.empty() ? 0.0 : sum / mr.questions.size();
        }
        finalize_method_report(mr, f1_base_mean);
        report.methods.push_back(std::move(mr));
    }
    return report;
}

} // namespace latentbank
