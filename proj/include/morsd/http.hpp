#pragma once

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <random>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "morsd/common.hpp"

namespace morsd {

class HttpError : public Error {
public:
    HttpError(int status, const std::string& what) : Error(what), status_(status) {}
    /// HTTP status of the last attempt, 0 for transport failures.
    int status() const noexcept { return status_; }

private:
    int status_;
};

/// Environment variable holding the bearer token for every endpoint.
inline constexpr const char* kApiKeyEnv = "MORSD_API_KEY";

struct ParsedUrl {
    std::string scheme;
    std::string origin;  // scheme://host[:port]
    std::string path;    // always starts with '/'
};

inline ParsedUrl parse_url(std::string_view url) {
    auto sep = url.find("://");
    if (sep == std::string_view::npos) throw Error("not an absolute URL: " + std::string(url));
    ParsedUrl u;
    u.scheme = std::string(url.substr(0, sep));
    auto path_start = url.find('/', sep + 3);
    u.origin = std::string(url.substr(0, path_start));
    u.path = path_start == std::string_view::npos ? "/" : std::string(url.substr(path_start));
    return u;
}

inline bool is_stub_url(std::string_view url) { return url.starts_with("stub:"); }

/// Exponential backoff with full jitter over [delay*(1-jitter), delay].
struct RetryPolicy {
    int budget = 5;
    std::chrono::milliseconds base_delay{250};
    std::chrono::milliseconds max_delay{8000};
    double jitter = 0.5;

    static bool retryable(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

    std::chrono::milliseconds delay(int attempt) const {
        double d = static_cast<double>(base_delay.count());
        for (int i = 0; i < attempt && d < static_cast<double>(max_delay.count()); ++i) d *= 2.0;
        d = std::min(d, static_cast<double>(max_delay.count()));
        thread_local std::mt19937_64 rng{std::random_device{}()};
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return std::chrono::milliseconds(static_cast<long long>(d * (1.0 - jitter * u)));
    }
};

using LogSink = std::function<void(const std::string&)>;

inline LogSink stderr_log() {
    return [](const std::string& msg) {
        static std::mutex mu;
        std::lock_guard lock(mu);
        std::cerr << msg << '\n';
    };
}

struct JsonResponse {
    nlohmann::json body;
    int retries = 0;
};

/// POSTs JSON to OpenAI-compatible endpoints. Safe to share across threads;
/// each call opens its own connection.
class JsonHttpClient {
public:
    explicit JsonHttpClient(RetryPolicy policy = {}, LogSink log = stderr_log())
        : policy_(policy), log_(std::move(log)) {
        if (const char* key = std::getenv(kApiKeyEnv)) api_key_ = key;
    }

    void set_timeout(std::chrono::seconds t) { timeout_ = t; }
    const RetryPolicy& policy() const { return policy_; }

    JsonResponse post(const std::string& url, const nlohmann::json& body) const {
        auto u = parse_url(url);
        std::string payload = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        int last_status = 0;
        std::string last_error;
        for (int attempt = 0;; ++attempt) {
            httplib::Client cli(u.origin);
            cli.set_connection_timeout(timeout_);
            cli.set_read_timeout(timeout_);
            cli.set_write_timeout(timeout_);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = cli.Post(u.path, headers, payload, "application/json");
            if (res && res->status >= 200 && res->status < 300) {
                JsonResponse out;
                out.retries = attempt;
                try {
                    out.body = nlohmann::json::parse(res->body);
                } catch (const nlohmann::json::parse_error& e) {
                    throw HttpError(res->status, "invalid JSON from " + url + ": " + e.what());
                }
                if (attempt > 0 && log_)
                    log_("request to " + url + " succeeded after " + std::to_string(attempt) + " retries");
                return out;
            }
            last_status = res ? res->status : 0;
            last_error = res ? res->body : httplib::to_string(res.error());
            if (!RetryPolicy::retryable(last_status) || attempt >= policy_.budget) break;
            auto wait = policy_.delay(attempt);
            if (log_)
                log_("request to " + url + " failed (status " + std::to_string(last_status) + "), retry " +
                     std::to_string(attempt + 1) + "/" + std::to_string(policy_.budget) + " in " +
                     std::to_string(wait.count()) + "ms");
            std::this_thread::sleep_for(wait);
        }
        throw HttpError(last_status, "request to " + url + " failed with status " + std::to_string(last_status) +
                                         ": " + last_error.substr(0, 200));
    }

private:
    RetryPolicy policy_;
    LogSink log_;
    std::string api_key_;
    std::chrono::seconds timeout_{120};
};

}  // namespace morsd
