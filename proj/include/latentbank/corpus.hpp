#pragma once

#include <string>
#include <vector>

#include "latentbank/common.hpp"
#include "latentbank/rng.hpp"

namespace latentbank {

struct Turn {
    int global_index = 0;
    int session_index = 0;
    std::string speaker;
    std::string text;
};

struct QAPair {
    std::string question;
    std::string answer;
    std::vector<int> evidence_turns;    // global indices, nonempty
    std::vector<int> evidence_sessions; // session indices
};

// Sessions of turns plus QA pairs with evidence annotations. Turn indices are
// global and strictly increasing across session boundaries.
struct Conversation {
    std::vector<std::vector<Turn>> sessions;
    std::vector<QAPair> qa;

    int total_turns() const {
        int n = 0;
        for (const auto& s : sessions) n += static_cast<int>(s.size());
        return n;
    }
    std::vector<const Turn*> turns_in_order() const {
        std::vector<const Turn*> out;
        for (const auto& s : sessions)
            for (const auto& t : s) out.push_back(&t);
        return out;
    }
    void validate(const std::string& where) const;
};

// Whitespace split after lowercasing and punctuation stripping; shared by the
// tokenizer and the token-F1 metric so both arms see the same tokens.
std::vector<std::string> normalize_tokens(const std::string& text);

// Frequency-built word vocabulary with reserved pad/end/unk ids.
class Tokenizer {
  public:
    static Tokenizer build(const std::vector<Conversation>& corpus, int vocab_size,
                           uint64_t seed);
    static Tokenizer from_words(std::vector<std::string> id_to_word);

    int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
    int id_of(const std::string& word) const;
    const std::string& word_of(int id) const;
    std::vector<int> encode(const std::string& text) const;
    std::vector<std::string> decode_words(const std::vector<int>& ids) const;
    uint64_t vocab_hash() const;
    const std::vector<std::string>& words() const { return id_to_word_; }

  private:
    std::vector<std::string> id_to_word_;
};

void save_tokenizer(const Tokenizer& tok, const std::string& path);
Tokenizer load_tokenizer(const std::string& path);

// Desk-scale stand-in corpus: key-value facts planted at lag-controlled
// positions, filler turns in between, and single-token QA probes whose
// evidence annotations are exactly the statement turns.
struct SyntheticSpec {
    int n_sessions = 10;
    int turns_per_session = 8;
    int n_facts = 20;
    double distractor_ratio = 0.5;
    std::vector<int> lag_bucket_bounds = {0, 32, 64, 128, 256};
    std::vector<double> lag_distribution = {0.4, 0.3, 0.3, 0.0, 0.0};
    uint64_t seed = 42;

    int total_turns() const { return n_sessions * turns_per_session; }
};

Conversation generate_synthetic(const SyntheticSpec& spec);

// Deterministic split at conversation granularity.
std::pair<std::vector<Conversation>, std::vector<Conversation>>
split(const std::vector<Conversation>& conversations, double train_fraction, uint64_t seed);

std::vector<Conversation> load_json(const std::string& path);
void save_json(const std::vector<Conversation>& conversations, const std::string& path);
std::vector<Conversation> conversations_from_json_string(const std::string& text);
std::string conversations_to_json_string(const std::vector<Conversation>& conversations);

// Token-level view used by training and evaluation.
struct TokenizedQA {
    std::vector<int> question;
    std::vector<int> answer;
    std::vector<std::string> gold_words;
    std::vector<int> evidence_turns;
    std::vector<int> evidence_sessions;
};

struct TokenizedConversation {
    std::vector<std::vector<int>> turn_tokens;   // by global index
    std::vector<int> turn_session;               // session of each turn
    std::vector<int> session_turn_count;         // turns per session
    std::vector<TokenizedQA> qa;
    int total_turns() const { return static_cast<int>(turn_tokens.size()); }
    int n_sessions() const { return static_cast<int>(session_turn_count.size()); }
};

TokenizedConversation tokenize_conversation(const Conversation& conv, const Tokenizer& tok);

} // namespace latentbank
