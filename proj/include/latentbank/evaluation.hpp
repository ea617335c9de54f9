#pragma once

#include <functional>
#include <string>
#include <vector>

#include "latentbank/corpus.hpp"

namespace latentbank {

inline constexpr double kDefaultEvalEps = 1e-6;

// Five lag ranges partitioning [0, inf); the last bucket is open-ended.
struct LagBuckets {
    std::vector<int> lower_bounds = {0, 32, 64, 128, 256};

    size_t count() const { return lower_bounds.size(); }
    int lo(size_t b) const { return lower_bounds[b]; }
    int hi(size_t b) const { // -1 = unbounded
        return b + 1 < lower_bounds.size() ? lower_bounds[b + 1] : -1;
    }
    size_t bucket_of(int lag) const {
        if (lag < 0) throw ContractError("lag buckets: negative lag");
        size_t b = 0;
        while (b + 1 < lower_bounds.size() && lag >= lower_bounds[b + 1]) ++b;
        return b;
    }
};

// Bag-of-tokens F1 over normalized word multisets.
double token_f1(const std::vector<std::string>& prediction,
                const std::vector<std::string>& gold);

// l_q = T - min(E_q): turns since the oldest required support.
int evidence_lag(const QAPair& qa, int total_turns);
int evidence_lag(const std::vector<int>& evidence_turns, int total_turns);

// rho = max(0, f1_mem - f1_zero) / max(1 - f1_zero, eps)
double memory_recall_rate(double f1_mem, double f1_zero, double eps = kDefaultEvalEps);

// Weighted least-squares non-increasing fit (pool-adjacent-violators).
std::vector<double> isotonic_fit_nonincreasing(const std::vector<double>& values,
                                               const std::vector<double>& weights);

struct CurvePoint {
    int bucket = 0;
    int lag_lo = 0;
    int lag_hi = -1; // -1 = unbounded
    int n = 0;       // sample count; 0 = empty bucket, excluded from the fit
    double raw_rho = 0.0;
    double smooth_rho = 0.0;
};

// Bucket means weighted by sample counts, then isotonic smoothing. Empty
// buckets are reported with n = 0 and excluded from the fit.
std::vector<CurvePoint> forgetting_curve(const std::vector<std::pair<double, int>>& rho_lag,
                                         const LagBuckets& buckets = LagBuckets{});

struct KnowledgePoint {
    int session = 0; // 1-based, "after sessions 1..s"
    bool defined = false;
    double k = 0.0;
    int n_questions = 0;
};

struct KnowledgeCurve {
    std::vector<KnowledgePoint> points;
    bool delta_defined = false;
    double delta_k = 0.0; // K over the last defined point minus the first defined
};

// Probe every QA whose evidence sessions are all <= s after each session s.
// `answer` maps (qa index, session) to predicted words for that probe.
KnowledgeCurve knowledge_curve(
    const TokenizedConversation& conv,
    const std::function<std::vector<std::string>(size_t qa_index, int session)>& answer);

// Tax = f1_base - f1_zero (positive = the adapter alone hurts);
// Benefit = f1_mem - f1_base.
double adapter_tax(double f1_base, double f1_zero_adapter);
double net_benefit(double f1_mem, double f1_base);

// Snap to a 2^-40 grid. Report aggregates pass through this so that the
// tax/benefit/gain identity holds exactly in doubles.
double snap(double x);

struct QuestionResult {
    int conversation = 0;
    int question = 0;
    int lag = 0;
    double f1_mem = 0.0;
    double f1_zero = 0.0;
    double rho = 0.0;
};

struct MethodReport {
    std::string method;
    std::vector<CurvePoint> curve;
    std::vector<KnowledgeCurve> knowledge; // one per evaluated conversation
    bool delta_k_defined = false;
    double delta_k_mean = 0.0;
    double f1_mem_mean = 0.0;
    double f1_zero_mean = 0.0;
    double f1_base_mean = 0.0;
    double tax = 0.0;
    double benefit = 0.0;
    double memory_gain = 0.0; // f1_mem_mean - f1_zero_mean, == tax + benefit
    std::vector<QuestionResult> questions;
};

struct EvalReport {
    double eps = kDefaultEvalEps;
    LagBuckets buckets;
    int capacity_scale = 0;
    uint64_t seed = 0;
    std::vector<MethodReport> methods;

    const MethodReport& method(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return m;
        throw ContractError("report: method not present: " + name);
    }
};

// Aggregate per-question results into the report row for one method, using
// the baseline mean for tax/benefit.
void finalize_method_report(MethodReport& report, double f1_base_mean);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void write_report(const EvalReport& report, const std::string& path);
EvalReport read_report(const std::string& path);

// CSV columns: method,bucket_lo,bucket_hi,n,raw_rho,smooth_rho
std::string curves_to_csv(const EvalReport& report);
void write_curves_csv(const EvalReport& report, const std::string& path);

} // namespace latentbank
