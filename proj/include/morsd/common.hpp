#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace morsd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input file or record does not match the expected schema.
class SchemaError : public Error {
public:
    SchemaError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

namespace text {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && is_space(s[i])) ++i;
        std::size_t j = i;
        while (j < s.size() && !is_space(s[j])) ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline bool ends_with_sentence_punct(std::string_view s) {
    s = trim(s);
    if (s.empty()) return false;
    char c = s.back();
    return c == '.' || c == '?' || c == '!';
}

inline bool is_terminal_punct(char c) {
    return c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?';
}

inline std::string_view strip_terminal_punct(std::string_view s) {
    s = trim(s);
    while (!s.empty() && is_terminal_punct(s.back())) s.remove_suffix(1);
    return trim(s);
}

/// Replaces the single occurrence of `slot` in `tmpl`; returns false if the
/// slot is missing.
inline bool replace_slot(std::string& tmpl, std::string_view slot, std::string_view value) {
    auto pos = tmpl.find(slot);
    if (pos == std::string::npos) return false;
    tmpl.replace(pos, slot.size(), value);
    return true;
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
    if (needle.empty()) return 0;
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string_view::npos;
         pos = hay.find(needle, pos + needle.size()))
        ++n;
    return n;
}

}  // namespace text

// Deterministic seeding. std::mt19937_64's output sequence is fixed by the
// standard, so seeded streams replay identically across platforms.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key, std::uint64_t salt = 0) {
    return splitmix64(splitmix64(seed ^ fnv1a64(key)) + salt);
}

/// Maps a 64-bit draw to [0, 1).
inline double unit_interval(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Runs fn(i) for i in [0, count) on up to `max_in_flight` threads. Results
/// land at their own index, so ordering never depends on completion order.
/// The first exception thrown by any task is rethrown after all workers join.
template <typename Result>
std::vector<Result> parallel_map(std::size_t count, std::size_t max_in_flight,
                                 const std::function<Result(std::size_t)>& fn) {
    std::vector<Result> out(count);
    if (count == 0) return out;
    std::size_t workers = std::clamp<std::size_t>(max_in_flight, 1, count);
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) out[i] = fn(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mu;
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    if (failed.load()) return;
                    std::size_t i = next.fetch_add(1);
                    if (i >= count) return;
                    try {
                        out[i] = fn(i);
                    } catch (...) {
                        std::lock_guard lock(error_mu);
                        if (!first_error) first_error = std::current_exception();
                        failed.store(true);
                        return;
                    }
                }
            });
        }
    }
    if (first_error) std::rethrow_exception(first_error);
    return out;
}

}  // namespace morsd
