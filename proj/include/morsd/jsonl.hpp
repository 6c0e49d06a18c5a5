#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "morsd/common.hpp"

namespace morsd {

using json = nlohmann::json;

/// Key of the optional metadata object written as the first line of every
/// stage output. Readers skip it.
inline constexpr const char* kHeaderKey = "_header";

inline std::string dump_line(const json& j) {
    return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

/// Calls fn(line_number, record) for every non-blank line. Line numbers are
/// 1-based and count blank and header lines.
inline void read_jsonl(const std::filesystem::path& path,
                       const std::function<void(std::size_t, const json&)>& fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw SchemaError(line_no, std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object()) throw SchemaError(line_no, "record is not a JSON object");
        if (j.contains(kHeaderKey)) continue;
        fn(line_no, j);
    }
}

/// Returns the header object of a stage file, or null if it has none.
inline json read_jsonl_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string line;
    if (!in || !std::getline(in, line)) return nullptr;
    try {
        json j = json::parse(line);
        if (j.is_object() && j.contains(kHeaderKey)) return j[kHeaderKey];
    } catch (const json::parse_error&) {
    }
    return nullptr;
}

template <typename T>
T require_field(const json& j, const char* key, std::size_t line_no) {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(line_no, std::string("missing field \"") + key + "\"");
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw SchemaError(line_no, std::string("field \"") + key + "\" has the wrong type");
    }
}

/// Writes to `<path>.tmp` and renames onto `path` on commit(). If the writer
/// is destroyed uncommitted, the temporary is removed and `path` is untouched.
class AtomicFile {
public:
    explicit AtomicFile(std::filesystem::path path)
        : path_(std::move(path)), tmp_(path_.string() + ".tmp") {
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        out_.open(tmp_, std::ios::binary | std::ios::trunc);
        if (!out_) throw Error("cannot write " + tmp_.string());
    }
    AtomicFile(const AtomicFile&) = delete;
    AtomicFile& operator=(const AtomicFile&) = delete;
    ~AtomicFile() {
        if (!committed_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

    std::ofstream& stream() { return out_; }

    void write_line(const json& j) { out_ << dump_line(j) << '\n'; }

    void commit() {
        out_.flush();
        if (!out_) throw Error("write failed for " + tmp_.string());
        out_.close();
        std::filesystem::rename(tmp_, path_);
        committed_ = true;
    }

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_;
    std::ofstream out_;
    bool committed_ = false;
};

inline void write_jsonl_atomic(const std::filesystem::path& path, const std::vector<json>& records,
                               const json& header = nullptr) {
    AtomicFile f(path);
    if (!header.is_null()) f.write_line(json{{kHeaderKey, header}});
    for (const auto& r : records) f.write_line(r);
    f.commit();
}

inline void write_json_atomic(const std::filesystem::path& path, const json& doc) {
    AtomicFile f(path);
    f.stream() << doc.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    f.commit();
}

}  // namespace morsd
