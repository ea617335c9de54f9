#include "latentbank/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace latentbank {

using nlohmann::json;

double token_f1(const std::vector<std::string>& prediction,
                const std::vector<std::string>& gold) {
    if (gold.empty()) throw ContractError("token_f1: empty gold");
    if (prediction.empty()) return 0.0;
    std::map<std::string, int> gold_count;
    for (const auto& w : gold) ++gold_count[w];
    int overlap = 0;
    for (const auto& w : prediction) {
        auto it = gold_count.find(w);
        if (it != gold_count.end() && it->second > 0) {
            ++overlap;
            --it->second;
        }
    }
    if (overlap == 0) return 0.0;
    double precision = static_cast<double>(overlap) / static_cast<double>(prediction.size());
    double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

int evidence_lag(const std::vector<int>& evidence_turns, int total_turns) {
    if (evidence_turns.empty()) throw ContractError("evidence_lag: empty evidence set");
    int oldest = *std::min_element(evidence_turns.begin(), evidence_turns.end());
    if (oldest >= total_turns || oldest < 0)
        throw ContractError("evidence_lag: evidence beyond conversation length");
    return total_turns - oldest;
}

int evidence_lag(const QAPair& qa, int total_turns) {
    return evidence_lag(qa.evidence_turns, total_turns);
}

double memory_recall_rate(double f1_mem, double f1_zero, double eps) {
    if (eps <= 0.0) throw ContractError("memory_recall_rate: eps must be positive");
    double gain = std::max(0.0, f1_mem - f1_zero);
    double headroom = std::max(1.0 - f1_zero, eps);
    return gain / headroom;
}

std::vector<double> isotonic_fit_nonincreasing(const std::vector<double>& values,
                                               const std::vector<double>& weights) {
    if (values.empty()) throw ContractError("isotonic fit: empty input");
    if (values.size() != weights.size())
        throw DimensionError("isotonic fit: values/weights length mismatch");
    for (double w : weights)
        if (!(w > 0.0)) throw ContractError("isotonic fit: weights must be positive");

    struct Block {
        double mean, weight;
        size_t span;
    };
    std::vector<Block> blocks;
    for (size_t i = 0; i < values.size(); ++i) {
        blocks.push_back({values[i], weights[i], 1});
        // pool while the non-increasing constraint is violated
        while (blocks.size() > 1 &&
               blocks[blocks.size() - 2].mean < blocks.back().mean) {
            Block b = blocks.back();
            blocks.pop_back();
            Block& a = blocks.back();
            double w = a.weight + b.weight;
            a.mean = (a.mean * a.weight + b.mean * b.weight) / w;
            a.weight = w;
            a.span += b.span;
        }
    }
    std::vector<double> out;
    out.reserve(values.size());
    for (const Block& b : blocks)
        for (size_t i = 0; i < b.span; ++i) out.push_back(b.mean);
    return out;
}

std::vector<CurvePoint> forgetting_curve(const std::vector<std::pair<double, int>>& rho_lag,
                                         const LagBuckets& buckets) {
    std::vector<double> sums(buckets.count(), 0.0);
    std::vector<int> counts(buckets.count(), 0);
    for (const auto& [rho, lag] : rho_lag) {
        size_t b = buckets.bucket_of(lag);
        sums[b] += rho;
        ++counts[b];
    }
    std::vector<double> present_values, present_weights;
    for (size_t b = 0; b < buckets.count(); ++b)
        if (counts[b] > 0) {
            present_values.push_back(sums[b] / counts[b]);
            present_weights.push_back(static_cast<double>(counts[b]));
        }
    std::vector<double> smooth;
    if (!present_values.empty())
        smooth = isotonic_fit_nonincreasing(present_values, present_weights);

    std::vector<CurvePoint> out;
    size_t si = 0;
    for (size_t b = 0; b < buckets.count(); ++b) {
        CurvePoint p;
        p.bucket = static_cast<int>(b);
        p.lag_lo = buckets.lo(b);
        p.lag_hi = buckets.hi(b);
        p.n = counts[b];
        if (counts[b] > 0) {
            p.raw_rho = sums[b] / counts[b];
            p.smooth_rho = smooth[si++];
        }
        out.push_back(p);
    }
    return out;
}

KnowledgeCurve knowledge_curve(
    const TokenizedConversation& conv,
    const std::function<std::vector<std::string>(size_t, int)>& answer) {
    KnowledgeCurve out;
    const int n_sessions = conv.n_sessions();
    for (int s = 1; s <= n_sessions; ++s) {
        KnowledgePoint pt;
        pt.session = s;
        double sum = 0.0;
        int n = 0;
        for (size_t qi = 0; qi < conv.qa.size(); ++qi) {
            const TokenizedQA& qa = conv.qa[qi];
            bool answerable = !qa.evidence_sessions.empty();
            for (int es : qa.evidence_sessions)
                if (es >= s) answerable = false; // sessions are 0-based, s counts 1..n
            if (!answerable) continue;
            sum += token_f1(answer(qi, s), qa.gold_words);
            ++n;
        }
        if (n > 0) {
            pt.defined = true;
            pt.k = sum / n;
            pt.n_questions = n;
        }
        out.points.push_back(pt);
    }
    const KnowledgePoint* first = nullptr;
    const KnowledgePoint* last = nullptr;
    for (const auto& p : out.points)
        if (p.defined) {
            if (!first) first = &p;
            last = &p;
        }
    if (first && last) {
        out.delta_defined = true;
        out.delta_k = last->k - first->k;
    }
    return out;
}

double adapter_tax(double f1_base, double f1_zero_adapter) {
    return f1_base - f1_zero_adapter;
}

double net_benefit(double f1_mem, double f1_base) { return f1_mem - f1_base; }

double snap(double x) { return std::ldexp(std::nearbyint(std::ldexp(x, 40)), -40); }

void finalize_method_report(MethodReport& report, double f1_base_mean) {
    double mem = 0.0, zero = 0.0;
    std::vector<std::pair<double, int>> rho_lag;
    for (const auto& q : report.questions) {
        mem += q.f1_mem;
        zero += q.f1_zero;
        rho_lag.emplace_back(q.rho, q.lag);
    }
    const double n = report.questions.empty() ? 1.0 : static_cast<double>(report.questions.size());
    report.f1_mem_mean = snap(mem / n);
    report.f1_zero_mean = snap(zero / n);
    report.f1_base_mean = snap(f1_base_mean);
    report.tax = adapter_tax(report.f1_base_mean, report.f1_zero_mean);
    report.benefit = net_benefit(report.f1_mem_mean, report.f1_base_mean);
    report.memory_gain = report.f1_mem_mean - report.f1_zero_mean;

    double dk_sum = 0.0;
    int dk_n = 0;
    for (const auto& kc : report.knowledge)
        if (kc.delta_defined) {
            dk_sum += kc.delta_k;
            ++dk_n;
        }
    report.delta_k_defined = dk_n > 0;
    report.delta_k_mean = dk_n > 0 ? dk_sum / dk_n : 0.0;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace {

json curve_to_json(const std::vector<CurvePoint>& curve) {
    json out = json::array();
    for (const auto& p : curve)
        out.push_back({{"bucket", p.bucket},
                       {"lag_lo", p.lag_lo},
                       {"lag_hi", p.lag_hi},
                       {"n", p.n},
                       {"raw_rho", p.raw_rho},
                       {"smooth_rho", p.smooth_rho}});
    return out;
}

std::vector<CurvePoint> curve_from_json(const json& j) {
    std::vector<CurvePoint> out;
    for (const auto& e : j) {
        CurvePoint p;
        p.bucket = e.at("bucket").get<int>();
        p.lag_lo = e.at("lag_lo").get<int>();
        p.lag_hi = e.at("lag_hi").get<int>();
        p.n = e.at("n").get<int>();
        p.raw_rho = e.at("raw_rho").get<double>();
        p.smooth_rho = e.at("smooth_rho").get<double>();
        out.push_back(p);
    }
    return out;
}

json knowledge_to_json(const KnowledgeCurve& kc) {
    json pts = json::array();
    for (const auto& p : kc.points)
        pts.push_back({{"session", p.session},
                       {"defined", p.defined},
                       {"k", p.k},
                       {"n_questions", p.n_questions}});
    return {{"points", pts}, {"delta_defined", kc.delta_defined}, {"delta_k", kc.delta_k}};
}

KnowledgeCurve knowledge_from_json(const json& j) {
    KnowledgeCurve kc;
    for (const auto& e : j.at("points")) {
        KnowledgePoint p;
        p.session = e.at("session").get<int>();
        p.defined = e.at("defined").get<bool>();
        p.k = e.at("k").get<double>();
        p.n_questions = e.at("n_questions").get<int>();
        kc.points.push_back(p);
    }
    kc.delta_defined = j.at("delta_defined").get<bool>();
    kc.delta_k = j.at("delta_k").get<double>();
    return kc;
}

} // namespace

std::string report_to_json(const EvalReport& report) {
    json methods = json::array();
    for (const auto& m : report.methods) {
        json questions = json::array();
        for (const auto& q : m.questions)
            questions.push_back({{"conversation", q.conversation},
                                 {"question", q.question},
                                 {"lag", q.lag},
                                 {"f1_mem", q.f1_mem},
                                 {"f1_zero", q.f1_zero},
                                 {"rho", q.rho}});
        json knowledge = json::array();
        for (const auto& kc : m.knowledge) knowledge.push_back(knowledge_to_json(kc));
        methods.push_back({{"method", m.method},
                           {"curve", curve_to_json(m.curve)},
                           {"knowledge", knowledge},
                           {"delta_k_defined", m.delta_k_defined},
                           {"delta_k_mean", m.delta_k_mean},
                           {"f1_mem_mean", m.f1_mem_mean},
                           {"f1_zero_mean", m.f1_zero_mean},
                           {"f1_base_mean", m.f1_base_mean},
                           {"tax", m.tax},
                           {"benefit", m.benefit},
                           {"memory_gain", m.memory_gain},
                           {"questions", questions}});
    }
    json out = {{"config",
                 {{"eps", report.eps},
                  {"bucket_lower_bounds", report.buckets.lower_bounds},
                  {"capacity_scale", report.capacity_scale},
                  {"seed", report.seed}}},
                {"methods", methods}};
    return out.dump(2);
}

EvalReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("report parse error: ") + e.what());
    }
    EvalReport report;
    const json& cfg = j.at("config");
    report.eps = cfg.at("eps").get<double>();
    report.buckets.lower_bounds = cfg.at("bucket_lower_bounds").get<std::vector<int>>();
    report.capacity_scale = cfg.at("capacity_scale").get<int>();
    report.seed = cfg.at("seed").get<uint64_t>();
    for (const auto& m : j.at("methods")) {
        MethodReport mr;
        mr.method = m.at("method").get<std::string>();
        mr.curve = curve_from_json(m.at("curve"));
        for (const auto& kc : m.at("knowledge")) mr.knowledge.push_back(knowledge_from_json(kc));
        mr.delta_k_defined = m.at("delta_k_defined").get<bool>();
        mr.delta_k_mean = m.at("delta_k_mean").get<double>();
        mr.f1_mem_mean = m.at("f1_mem_mean").get<double>();
        mr.f1_zero_mean = m.at("f1_zero_mean").get<double>();
        mr.f1_base_mean = m.at("f1_base_mean").get<double>();
        mr.tax = m.at("tax").get<double>();
        mr.benefit = m.at("benefit").get<double>();
        mr.memory_gain = m.at("memory_gain").get<double>();
        for (const auto& q : m.at("questions")) {
            QuestionResult qr;
            qr.conversation = q.at("conversation").get<int>();
            qr.question = q.at("question").get<int>();
            qr.lag = q.at("lag").get<int>();
            qr.f1_mem = q.at("f1_mem").get<double>();
            qr.f1_zero = q.at("f1_zero").get<double>();
            qr.rho = q.at("rho").get<double>();
            mr.questions.push_back(qr);
        }
        report.methods.push_back(std::move(mr));
    }
    return report;
}

namespace {

void atomic_write(const std::string& path, const std::string& text) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw IoError("cannot write file: " + tmp);
        out << text;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename temp file onto " + path);
}

} // namespace

void write_report(const EvalReport& report, const std::string& path) {
    atomic_write(path, report_to_json(report) + "\n");
}

EvalReport read_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return report_from_json(buf.str());
}

std::string curves_to_csv(const EvalReport& report) {
    std::ostringstream out;
    out << "method,bucket_lo,bucket_hi,n,raw_rho,smooth_rho\n";
    char line[160];
    for (const auto& m : report.methods)
        for (const auto& p : m.curve) {
            std::snprintf(line, sizeof line, "%s,%d,%d,%d,%.17g,%.17g\n", m.method.c_str(),
                          p.lag_lo, p.lag_hi, p.n, p.raw_rho, p.smooth_rho);
            out << line;
        }
    return out.str();
}

void write_curves_csv(const EvalReport& report, const std::string& path) {
    atomic_write(path, curves_to_csv(report));
}

} // namespace latentbank
