#include "latentbank/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace latentbank {

using nlohmann::json;

// ---------------------------------------------------------------------------
// conversation validation
// ---------------------------------------------------------------------------

void Conversation::validate(const std::string& where) const {
    int expected = 0;
    for (size_t si = 0; si < sessions.size(); ++si) {
        for (size_t ti = 0; ti < sessions[si].size(); ++ti) {
            const Turn& t = sessions[si][ti];
            std::string at = where + ".sessions[" + std::to_string(si) + "].turns[" +
                             std::to_string(ti) + "]";
            if (t.text.empty()) throw CorpusError(at + ".text", "empty turn text");
            if (t.global_index != expected)
                throw CorpusError(at, "turn indices must be strictly increasing from 0");
            if (t.session_index != static_cast<int>(si))
                throw CorpusError(at, "session index inconsistent with position");
            ++expected;
        }
    }
    const int total = expected;
    for (size_t qi = 0; qi < qa.size(); ++qi) {
        const QAPair& q = qa[qi];
        std::string at = where + ".qa[" + std::to_string(qi) + "]";
        if (q.evidence_turns.empty())
            throw CorpusError(at + ".evidence_turns", "evidence set must be nonempty");
        for (size_t ei = 0; ei < q.evidence_turns.size(); ++ei) {
            int e = q.evidence_turns[ei];
            if (e < 0 || e >= total)
                throw CorpusError(at + ".evidence_turns[" + std::to_string(ei) + "]",
                                  "dangling evidence index " + std::to_string(e) +
                                      " (conversation has " + std::to_string(total) +
                                      " turns)");
        }
        for (size_t ei = 0; ei < q.evidence_sessions.size(); ++ei) {
            int e = q.evidence_sessions[ei];
            if (e < 0 || e >= static_cast<int>(sessions.size()))
                throw CorpusError(at + ".evidence_sessions[" + std::to_string(ei) + "]",
                                  "dangling session index");
        }
        if (q.answer.empty()) throw CorpusError(at + ".answer", "empty answer");
        if (q.question.empty()) throw CorpusError(at + ".question", "empty question");
    }
}

// ---------------------------------------------------------------------------
// tokenizer
// ---------------------------------------------------------------------------

std::vector<std::string> normalize_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Tokenizer Tokenizer::build(const std::vector<Conversation>& corpus, int vocab_size,
                           uint64_t seed) {
    (void)seed; // frequency + lexicographic tie-break is already deterministic
    if (corpus.empty())
        throw CorpusError("corpus", "cannot build tokenizer from empty corpus");
    if (vocab_size <= kReservedIds)
        throw ContractError("tokenizer: vocab_size must exceed reserved ids");
    std::map<std::string, int64_t> freq;
    auto count = [&](const std::string& text) {
        for (const auto& w : normalize_tokens(text)) ++freq[w];
    };
    for (const auto& conv : corpus) {
        for (const auto& s : conv.sessions)
            for (const auto& t : s) count(t.text);
        for (const auto& q : conv.qa) {
            count(q.question);
            count(q.answer);
        }
    }
    std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Tokenizer tok;
    tok.id_to_word_.resize(static_cast<size_t>(kReservedIds));
    tok.id_to_word_[static_cast<size_t>(kPadId)] = "<pad>";
    tok.id_to_word_[static_cast<size_t>(kEndId)] = "<end>";
    tok.id_to_word_[static_cast<size_t>(kUnkId)] = "<unk>";
    const size_t keep = static_cast<size_t>(vocab_size - kReservedIds);
    for (size_t i = 0; i < ranked.size() && i < keep; ++i)
        tok.id_to_word_.push_back(ranked[i].first);
    return tok;
}

Tokenizer Tokenizer::from_words(std::vector<std::string> id_to_word) {
    if (static_cast<int>(id_to_word.size()) <= kReservedIds)
        throw ContractError("tokenizer: word list shorter than reserved ids");
    Tokenizer tok;
    tok.id_to_word_ = std::move(id_to_word);
    return tok;
}

void save_tokenizer(const Tokenizer& tok, const std::string& path) {
    json j = {{"words", tok.words()}};
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write tokenizer file: " + tmp);
        out << j.dump(2) << '\n';
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename temp tokenizer file onto " + path);
}

Tokenizer load_tokenizer(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open tokenizer file: " + path);
    json j;
    try {
        in >> j;
        return Tokenizer::from_words(j.at("words").get<std::vector<std::string>>());
    } catch (const json::exception& e) {
        throw IoError("tokenizer parse error in " + path + ": " + e.what());
    }
}

int Tokenizer::id_of(const std::string& word) const {
    for (size_t i = kReservedIds; i < id_to_word_.size(); ++i)
        if (id_to_word_[i] == word) return static_cast<int>(i);
    return kUnkId;
}

const std::string& Tokenizer::word_of(int id) const {
    if (id < 0 || id >= vocab_size()) throw ContractError("tokenizer: id out of range");
    return id_to_word_[static_cast<size_t>(id)];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& w : normalize_tokens(text)) out.push_back(id_of(w));
    return out;
}

std::vector<std::string> Tokenizer::decode_words(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (int id : ids)
        if (id >= kReservedIds && id < vocab_size()) out.push_back(word_of(id));
    return out;
}

uint64_t Tokenizer::vocab_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& w : id_to_word_) {
        h = fnv1a64(w.data(), w.size(), h);
        h = fnv1a64("|", 1, h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& noun_list() {
    static const std::vector<std::string> v{"color", "city",  "team", "drink", "hobby",
                                            "pet",   "car",   "song", "game",  "food",
                                            "sport", "book"};
    return v;
}

const std::vector<std::string>& value_list() {
    static const std::vector<std::string> v{
        "red",    "blue",   "green", "amber",   "paris",  "tokyo", "lisbon", "cairo",
        "tigers", "eagles", "tea",   "coffee",  "chess",  "sailing", "falcon", "husky",
        "mango",  "pasta",  "jazz",  "opera",   "tennis", "rugby", "atlas",  "ember"};
    return v;
}

const std::vector<std::string>& filler_list() {
    static const std::vector<std::string> v{"the",     "weather", "seems",    "fine",
                                            "today",   "we",      "talked",   "about",
                                            "nothing", "much",    "just",     "another",
                                            "ordinary", "day",    "went",     "walking"};
    return v;
}

std::string filler_sentence(Rng& rng) {
    const auto& words = filler_list();
    int len = 3 + static_cast<int>(rng.below(4));
    std::string out;
    for (int i = 0; i < len; ++i) {
        if (i) out.push_back(' ');
        out += words[static_cast<size_t>(rng.below(words.size()))];
    }
    return out;
}

// largest-remainder apportionment of n into shares
std::vector<int> apportion(const std::vector<double>& shares, int n) {
    double total = 0.0;
    for (double s : shares) total += s;
    if (total <= 0.0) throw ContractError("lag distribution has no mass");
    std::vector<int> counts(shares.size(), 0);
    std::vector<std::pair<double, size_t>> rema;
    int assigned = 0;
    for (size_t i = 0; i < shares.size(); ++i) {
        double exact = shares[i] / total * n;
        counts[i] = static_cast<int>(exact);
        assigned += counts[i];
        rema.emplace_back(exact - counts[i], i);
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int i = 0; i < n - assigned; ++i) ++counts[rema[static_cast<size_t>(i)].second];
    return counts;
}

} // namespace

Conversation generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n_sessions < 1 || spec.turns_per_session < 1 || spec.n_facts < 1)
        throw ContractError("synthetic spec: extents must be >= 1");
    if (spec.distractor_ratio < 0.0 || spec.distractor_ratio > 1.0)
        throw ContractError("synthetic spec: distractor_ratio outside [0, 1]");
    if (spec.lag_bucket_bounds.size() != spec.lag_distribution.size())
        throw ContractError("synthetic spec: lag distribution size != bucket count");
    const int total = spec.total_turns();
    const int fact_turn_budget =
        total - static_cast<int>(spec.distractor_ratio * total + 0.5);
    if (spec.n_facts > fact_turn_budget || spec.n_facts > total)
        throw ContractError("synthetic spec: more facts than the fact-turn budget (" +
                            std::to_string(spec.n_facts) + " > " +
                            std::to_string(fact_turn_budget) + ")");
    if (spec.n_facts > static_cast<int>(noun_list().size()))
        throw ContractError("synthetic spec: more facts than distinct nouns");

    Rng rng = Rng(spec.seed).stream("synthetic");

    // lag of a fact stated at global turn g (probed at end) is total - g;
    // feasible lags are 1..total
    std::vector<int> bucket_counts = apportion(spec.lag_distribution, spec.n_facts);
    std::set<int> used;
    std::vector<int> first_statement; // per fact
    Rng lag_rng = rng.stream("lags");
    for (size_t b = 0; b < bucket_counts.size(); ++b) {
        int lo = std::max(1, spec.lag_bucket_bounds[b]);
        int hi = (b + 1 < bucket_counts.size())
                     ? std::min(total, spec.lag_bucket_bounds[b + 1])
                     : total;
        for (int c = 0; c < bucket_counts[b]; ++c) {
            int lag = -1;
            for (int attempt = 0; attempt < 64 && lo < hi; ++attempt) {
                int cand = lo + static_cast<int>(
                                    lag_rng.below(static_cast<uint64_t>(hi - lo)));
                if (!used.count(total - cand)) {
                    lag = cand;
                    break;
                }
            }
            if (lag < 0) { // bucket nearly full: take the first free slot in range
                for (int cand = lo; cand < hi; ++cand)
                    if (!used.count(total - cand)) {
                        lag = cand;
                        break;
                    }
            }
            if (lag < 0)
                throw ContractError(
                    "synthetic spec: lag bucket cannot hold the requested count");
            used.insert(total - lag);
            first_statement.push_back(total - lag);
        }
    }

    // assign nouns (unique per conversation) and values
    std::vector<std::string> nouns = noun_list();
    Rng pick = rng.stream("facts");
    for (size_t i = nouns.size(); i > 1; --i)
        std::swap(nouns[i - 1], nouns[static_cast<size_t>(pick.below(i))]);
    std::vector<std::pair<std::string, std::string>> facts;
    for (int f = 0; f < spec.n_facts; ++f)
        facts.emplace_back(nouns[static_cast<size_t>(f)],
                           value_list()[static_cast<size_t>(pick.below(value_list().size()))]);

    // the rest of the fact-turn budget restates earlier facts
    std::map<int, int> statement_of; // global turn -> fact id
    for (int f = 0; f < spec.n_facts; ++f)
        statement_of[first_statement[static_cast<size_t>(f)]] = f;
    const int restatements = fact_turn_budget - spec.n_facts;
    Rng restate = rng.stream("restate");
    std::vector<int> free_slots;
    for (int g = 0; g < total; ++g)
        if (!statement_of.count(g)) free_slots.push_back(g);
    for (size_t i = free_slots.size(); i > 1; --i)
        std::swap(free_slots[i - 1], free_slots[static_cast<size_t>(restate.below(i))]);
    int placed = 0;
    for (int slot : free_slots) {
        if (placed >= restatements) break;
        std::vector<int> eligible;
        for (int f = 0; f < spec.n_facts; ++f)
            if (first_statement[static_cast<size_t>(f)] < slot) eligible.push_back(f);
        if (eligible.empty()) continue;
        statement_of[slot] = eligible[static_cast<size_t>(restate.below(eligible.size()))];
        ++placed;
    }

    Conversation conv;
    conv.sessions.resize(static_cast<size_t>(spec.n_sessions));
    Rng filler = rng.stream("filler");
    for (int g = 0; g < total; ++g) {
        Turn t;
        t.global_index = g;
        t.session_index = g / spec.turns_per_session;
        auto it = statement_of.find(g);
        if (it != statement_of.end()) {
            const auto& [noun, value] = facts[static_cast<size_t>(it->second)];
            t.speaker = "user";
            t.text = "my " + noun + " is " + value;
        } else {
            t.speaker = (g % 2 == 0) ? "user" : "assistant";
            t.text = filler_sentence(filler);
        }
        conv.sessions[static_cast<size_t>(t.session_index)].push_back(std::move(t));
    }

    for (int f = 0; f < spec.n_facts; ++f) {
        QAPair q;
        q.question = "what is my " + facts[static_cast<size_t>(f)].first;
        q.answer = facts[static_cast<size_t>(f)].second;
        for (const auto& [g, fid] : statement_of)
            if (fid == f) {
                q.evidence_turns.push_back(g);
                int sess = g / spec.turns_per_session;
                if (q.evidence_sessions.empty() || q.evidence_sessions.back() != sess)
                    q.evidence_sessions.push_back(sess);
            }
        conv.qa.push_back(std::move(q));
    }

    conv.validate("synthetic");
    return conv;
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

std::pair<std::vector<Conversation>, std::vector<Conversation>>
split(const std::vector<Conversation>& conversations, double train_fraction, uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ContractError("split: train_fraction outside (0, 1)");
    const size_t n = conversations.size();
    size_t train_n = static_cast<size_t>(static_cast<double>(n) * train_fraction + 0.5);
    if (n < 2 || train_n == 0 || train_n >= n)
        throw ContractError("split: too few conversations for the requested fraction");
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng(seed).stream("split");
    for (size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.below(i))]);
    std::pair<std::vector<Conversation>, std::vector<Conversation>> out;
    for (size_t i = 0; i < n; ++i)
        (i < train_n ? out.first : out.second).push_back(conversations[order[i]]);
    return out;
}

// ---------------------------------------------------------------------------
// JSON I/O
// ---------------------------------------------------------------------------

namespace {

json conversation_to_json(const Conversation& conv) {
    json sessions = json::array();
    for (const auto& s : conv.sessions) {
        json turns = json::array();
        for (const auto& t : s) turns.push_back({{"speaker", t.speaker}, {"text", t.text}});
        sessions.push_back({{"turns", turns}});
    }
    json qa = json::array();
    for (const auto& q : conv.qa)
        qa.push_back({{"question", q.question},
                      {"answer", q.answer},
                      {"evidence_turns", q.evidence_turns},
                      {"evidence_sessions", q.evidence_sessions}});
    return {{"sessions", sessions}, {"qa", qa}};
}

template <typename T>
T require_field(const json& j, const std::string& where, const std::string& key) {
    if (!j.contains(key)) throw CorpusError(where + "." + key, "missing field");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw CorpusError(where + "." + key, std::string("bad field type: ") + e.what());
    }
}

Conversation conversation_from_json(const json& j, const std::string& where) {
    Conversation conv;
    json sessions = require_field<json>(j, where, "sessions");
    if (!sessions.is_array()) throw CorpusError(where + ".sessions", "expected array");
    int global = 0;
    for (size_t si = 0; si < sessions.size(); ++si) {
        std::string swhere = where + ".sessions[" + std::to_string(si) + "]";
        json turns = require_field<json>(sessions[si], swhere, "turns");
        if (!turns.is_array()) throw CorpusError(swhere + ".turns", "expected array");
        std::vector<Turn> session;
        for (size_t ti = 0; ti < turns.size(); ++ti) {
            std::string twhere = swhere + ".turns[" + std::to_string(ti) + "]";
            Turn t;
            t.speaker = require_field<std::string>(turns[ti], twhere, "speaker");
            t.text = require_field<std::string>(turns[ti], twhere, "text");
            t.global_index = global++;
            t.session_index = static_cast<int>(si);
            session.push_back(std::move(t));
        }
        conv.sessions.push_back(std::move(session));
    }
    if (j.contains("qa")) {
        const json& qa = j.at("qa");
        if (!qa.is_array()) throw CorpusError(where + ".qa", "expected array");
        for (size_t qi = 0; qi < qa.size(); ++qi) {
            std::string qwhere = where + ".qa[" + std::to_string(qi) + "]";
            QAPair q;
            q.question = require_field<std::string>(qa[qi], qwhere, "question");
            q.answer = require_field<std::string>(qa[qi], qwhere, "answer");
            q.evidence_turns =
                require_field<std::vector<int>>(qa[qi], qwhere, "evidence_turns");
            if (qa[qi].contains("evidence_sessions"))
                q.evidence_sessions =
                    require_field<std::vector<int>>(qa[qi], qwhere, "evidence_sessions");
            conv.qa.push_back(std::move(q));
        }
    }
    conv.validate(where);
    return conv;
}

} // namespace

std::string conversations_to_json_string(const std::vector<Conversation>& conversations) {
    json out = json::array();
    for (const auto& c : conversations) out.push_back(conversation_to_json(c));
    return out.dump(2);
}

std::vector<Conversation> conversations_from_json_string(const std::string& text) {
    json parsed;
    try {
        parsed = json::parse(text);
    } catch (const json::exception& e) {
        throw CorpusError("corpus", std::string("parse error: ") + e.what());
    }
    if (!parsed.is_array()) throw CorpusError("corpus", "top level must be an array");
    std::vector<Conversation> out;
    for (size_t i = 0; i < parsed.size(); ++i)
        out.push_back(
            conversation_from_json(parsed[i], "conversations[" + std::to_string(i) + "]"));
    return out;
}

std::vector<Conversation> load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return conversations_from_json_string(buf.str());
}

void save_json(const std::vector<Conversation>& conversations, const std::string& path) {
    std::string text = conversations_to_json_string(conversations);
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write corpus file: " + tmp);
        out << text << '\n';
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename temp corpus file onto " + path);
}

// ---------------------------------------------------------------------------
// tokenized view
// ---------------------------------------------------------------------------

TokenizedConversation tokenize_conversation(const Conversation& conv, const Tokenizer& tok) {
    TokenizedConversation out;
    for (const auto& s : conv.sessions) {
        out.session_turn_count.push_back(static_cast<int>(s.size()));
        for (const auto& t : s) {
            std::vector<int> ids = tok.encode(t.text);
            if (ids.empty()) ids.push_back(kUnkId);
            out.turn_tokens.push_back(std::move(ids));
            out.turn_session.push_back(t.session_index);
        }
    }
    for (const auto& q : conv.qa) {
        TokenizedQA tq;
        tq.question = tok.encode(q.question);
        if (tq.question.empty()) tq.question.push_back(kUnkId);
        tq.answer = tok.encode(q.answer);
        if (tq.answer.empty()) tq.answer.push_back(kUnkId);
        tq.gold_words = normalize_tokens(q.answer);
        tq.evidence_turns = q.evidence_turns;
        tq.evidence_sessions = q.evidence_sessions;
        out.qa.push_back(std::move(tq));
    }
    return out;
}

} // namespace latentbank
