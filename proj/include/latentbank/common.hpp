#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace latentbank {

// Shape or contract mismatch between tensors / operations.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition/postcondition violation (non-scalar loss, empty gold, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value where finiteness is required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File / serialization problems.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corpus schema violations; `where` is a path-to-field string.
struct CorpusError : std::runtime_error {
    CorpusError(const std::string& where, const std::string& msg)
        : std::runtime_error(where + ": " + msg), where_(where) {}
    const std::string& where() const { return where_; }

  private:
    std::string where_;
};

// NaN loss during optimisation; carries the failing step and method name.
struct TrainingDiverged : std::runtime_error {
    TrainingDiverged(int step, const std::string& method)
        : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                             " (method " + method + ")"),
          step(step), method(method) {}
    int step;
    std::string method;
};

// Reserved token ids, shared by tokenizer and backbone. Pad doubles as the
// decoder start token.
inline constexpr int kPadId = 0;
inline constexpr int kEndId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kReservedIds = 3;

// FNV-1a over raw bytes; used for frozen-weight conservation checks.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

} // namespace latentbank
