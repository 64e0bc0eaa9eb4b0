#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uedkl/common.hpp"
#include "uedkl/rng.hpp"

namespace uedkl {

struct DatasetRecord {
    std::string payload;
    std::string label;

    bool operator==(const DatasetRecord& o) const {
        return payload == o.payload && label == o.label;
    }
};

struct IngestResult {
    std::vector<DatasetRecord> records;  // in file order
    size_t skipped = 0;                  // malformed lines tolerated (≤ 1%)
};

// ---------------------------------------------------------------------------
// CSV (RFC 4180 quoting)
// ---------------------------------------------------------------------------

namespace dataset_detail {

// Splits one logical CSV record into fields; `pos` points at the start of the
// record inside `text` and is advanced past its trailing newline. Quoted
// fields may contain commas, doubled quotes, and embedded newlines.
inline std::vector<std::string> csv_record(const std::string& text, size_t& pos) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    while (pos < text.size()) {
        const char c = text[pos];
        if (quoted) {
            if (c == '"') {
                if (pos + 1 < text.size() && text[pos + 1] == '"') {
                    cur.push_back('"');
                    pos += 2;
                } else {
                    quoted = false;
                    ++pos;
                }
            } else {
                cur.push_back(c);
                ++pos;
            }
        } else if (c == '"') {
            quoted = true;
            ++pos;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
            ++pos;
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
            ++pos;
            break;
        } else {
            cur.push_back(c);
            ++pos;
        }
    }
    if (quoted) throw IoError("csv: unterminated quoted field");
    fields.push_back(std::move(cur));
    return fields;
}

inline std::string csv_escape(const std::string& field) {
    const bool needs = field.find_first_of(",\"\r\n") != std::string::npos;
    if (!needs) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline std::string read_whole_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("dataset: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace dataset_detail

inline IngestResult ingest_csv(const std::string& path) {
    const std::string text = dataset_detail::read_whole_file(path);
    size_t pos = 0;
    if (pos >= text.size()) throw IoError("csv: '" + path + "' is empty");
    const std::vector<std::string> header = dataset_detail::csv_record(text, pos);
    int payload_col = -1, label_col = -1;
    for (size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "payload") payload_col = static_cast<int>(i);
        if (header[i] == "label") label_col = static_cast<int>(i);
    }
    if (payload_col < 0 || label_col < 0)
        throw IoError("csv: '" + path + "' header must name payload and label columns");

    IngestResult out;
    size_t lines = 0;
    while (pos < text.size()) {
        const size_t record_start = pos;
        std::vector<std::string> fields = dataset_detail::csv_record(text, pos);
        if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
        ++lines;
        const size_t need = static_cast<size_t>(std::max(payload_col, label_col)) + 1;
        if (fields.size() < need || fields[static_cast<size_t>(label_col)].empty()) {
            ++out.skipped;
            (void)record_start;
            continue;
        }
        out.records.push_back({fields[static_cast<size_t>(payload_col)],
                               fields[static_cast<size_t>(label_col)]});
    }
    if (lines > 0 && out.skipped * 100 > lines)
        throw IoError("csv: '" + path + "' has " + std::to_string(out.skipped) + " of " +
                      std::to_string(lines) + " lines malformed (over the 1% budget)");
    return out;
}

inline void write_csv(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("csv: cannot write '" + path + "'");
    out << "payload,label\n";
    for (const DatasetRecord& r : records)
        out << dataset_detail::csv_escape(r.payload) << ","
            << dataset_detail::csv_escape(r.label) << "\n";
    if (!out) throw IoError("csv: write failure on '" + path + "'");
}

// ---------------------------------------------------------------------------
// JSON lines
// ---------------------------------------------------------------------------

inline IngestResult ingest_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("dataset: cannot open '" + path + "'");
    IngestResult out;
    std::string line;
    size_t lines = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++lines;
        nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
        if (row.is_discarded() || !row.is_object() || !row.contains("payload") ||
            !row.contains("label") || !row["payload"].is_string() || !row["label"].is_string()) {
            ++out.skipped;
            continue;
        }
        out.records.push_back(
            {row["payload"].get<std::string>(), row["label"].get<std::string>()});
    }
    if (lines > 0 && out.skipped * 100 > lines)
        throw IoError("jsonl: '" + path + "' has " + std::to_string(out.skipped) + " of " +
                      std::to_string(lines) + " lines malformed (over the 1% budget)");
    return out;
}

// Dispatches on an explicit format name or, when empty, the file extension.
inline IngestResult ingest(const std::string& path, std::string format = "") {
    if (format.empty()) {
        const size_t dot = path.rfind('.');
        format = dot == std::string::npos ? "" : path.substr(dot + 1);
    }
    if (format == "csv") return ingest_csv(path);
    if (format == "jsonl") return ingest_jsonl(path);
    throw ConfigError("ingest: unsupported format '" + format + "' (expected csv or jsonl)");
}

// Sorted distinct labels over a record set.
inline std::vector<std::string> label_table(const std::vector<DatasetRecord>& records) {
    std::set<std::string> seen;
    for (const DatasetRecord& r : records) seen.insert(r.label);
    return {seen.begin(), seen.end()};
}

// ---------------------------------------------------------------------------
// Stratified splitting
// ---------------------------------------------------------------------------

struct SplitResult {
    std::vector<DatasetRecord> train, val, test, unseen;
};

// Unseen classes are removed wholesale; the remainder is shuffled per class
// and divided train/val/test by the configured ratios (floor for train and
// val, remainder to test). Every non-unseen class must have at least 10
// records.
inline SplitResult split_records(const std::vector<DatasetRecord>& records, double train_ratio,
                                 double val_ratio, double test_ratio, uint64_t seed,
                                 const std::vector<std::string>& unseen_classes) {
    const double sum = train_ratio + val_ratio + test_ratio;
    if (train_ratio <= 0.0 || val_ratio < 0.0 || test_ratio < 0.0 ||
        std::fabs(sum - 1.0) > 1e-9)
        throw ConfigError("split: ratios must be nonnegative and sum to 1");
    std::set<std::string> unseen_set(unseen_classes.begin(), unseen_classes.end());
    std::set<std::string> present;
    for (const DatasetRecord& r : records) present.insert(r.label);
    for (const std::string& u : unseen_set)
        if (!present.count(u))
            throw ConfigError("split: unseen class '" + u + "' has no records");

    // std::map iteration gives deterministic (sorted) class order.
    std::map<std::string, std::vector<DatasetRecord>> by_class;
    SplitResult out;
    for (const DatasetRecord& r : records) {
        if (unseen_set.count(r.label))
            out.unseen.push_back(r);
        else
            by_class[r.label].push_back(r);
    }
    if (by_class.empty()) throw ConfigError("split: no records outside the unseen classes");

    Rng rng(seed);
    for (auto& [label, group] : by_class) {
        if (group.size() < 10)
            throw ConfigError("split: class '" + label + "' has only " +
                              std::to_string(group.size()) + " records (minimum 10)");
        rng.shuffle(group);
        const size_t n = group.size();
        const size_t n_train = static_cast<size_t>(std::floor(static_cast<double>(n) * train_ratio));
        const size_t n_val = static_cast<size_t>(std::floor(static_cast<double>(n) * val_ratio));
        for (size_t i = 0; i < n; ++i) {
            if (i < n_train)
                out.train.push_back(group[i]);
            else if (i < n_train + n_val)
                out.val.push_back(group[i]);
            else
                out.test.push_back(group[i]);
        }
    }
    // Mix classes within each split (training reshuffles anyway; this keeps
    // files readable and batches balanced even for a single-epoch run).
    rng.shuffle(out.train);
    rng.shuffle(out.val);
    rng.shuffle(out.test);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace synth_detail {

inline const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names = {"normal", "sqli", "xss", "path_traversal",
                                                   "code_injection"};
    return names;
}

inline std::string rand_ident(Rng& rng) {
    static const char* pool[] = {"session", "token",  "cart",   "order", "account", "profile",
                                 "report",  "filter", "widget", "theme", "locale",  "basket"};
    std::string s = pool[rng.uniform_int(12)];
    s += std::to_string(rng.uniform_int(90) + 10);
    return s;
}

inline std::string rand_value(Rng& rng) {
    static const char* pool[] = {"alpha", "beta", "gamma", "delta", "omega", "zeta"};
    return std::string(pool[rng.uniform_int(6)]) + std::to_string(rng.uniform_int(1000));
}

inline std::string rand_page(Rng& rng) {
    static const char* pool[] = {"home", "index", "list", "view", "search", "detail"};
    return pool[rng.uniform_int(6)];
}

// Percent-encodes a random sample of non-alphanumeric characters; applied at
// most twice so normalization (which unescapes repeatedly) always recovers
// the original text.
inline std::string percent_noise(const std::string& s, Rng& rng) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (char c : s) {
        const unsigned char u = static_cast<unsigned char>(c);
        const bool alnum = (u >= '0' && u <= '9') || (u >= 'a' && u <= 'z') ||
                           (u >= 'A' && u <= 'Z');
        if (!alnum && rng.uniform() < 0.4) {
            out.push_back('%');
            out.push_back(hex[u >> 4]);
            out.push_back(hex[u & 0xF]);
        } else {
            out.push_back(c);
        }
    }
    return out;
}

inline std::string normal_payload(Rng& rng) {
    std::ostringstream s;
    s << "GET /" << rand_page(rng) << "?id=" << rng.uniform_int(100000)
      << "&" << rand_ident(rng) << "=" << rand_value(rng);
    if (rng.uniform() < 0.5) s << "&sort=" << (rng.uniform() < 0.5 ? "asc" : "desc");
    if (rng.uniform() < 0.3) s << "&lang=en";
    return s.str();
}

inline std::string sqli_marker(Rng& rng) {
    switch (rng.uniform_int(4)) {
        case 0: return "' OR '1'='1' --";
        case 1: return "UNION SELECT username, password FROM users";
        case 2: return "1; DROP TABLE " + rand_ident(rng) + " --";
        default: return "' AND SLEEP(5) --";
    }
}

inline std::string xss_marker(Rng& rng) {
    switch (rng.uniform_int(4)) {
        case 0: return "<script>alert('" + rand_value(rng) + "')</script>";
        case 1: return "<img src=x onerror=alert(document.cookie)>";
        case 2: return "<iframe src=javascript:alert(1)></iframe>";
        default: return "<svg onload=alert('" + rand_value(rng) + "')>";
    }
}

inline std::string traversal_marker(Rng& rng) {
    std::string depth;
    const uint64_t k = 2 + rng.uniform_int(4);
    for (uint64_t i = 0; i < k; ++i) depth += "../";
    switch (rng.uniform_int(3)) {
        case 0: return depth + "etc/passwd";
        case 1: return depth + "etc/shadow";
        default: return depth + "windows/system32/config/sam";
    }
}

inline std::string injection_marker(Rng& rng) {
    switch (rng.uniform_int(4)) {
        case 0: {
            std::ostringstream s;
            s << "eval(chr(" << 97 + rng.uniform_int(26) << ").chr(" << 97 + rng.uniform_int(26)
              << ").chr(" << 97 + rng.uniform_int(26) << "))";
            return s.str();
        }
        case 1: return "print(eval(base64_decode('" + rand_value(rng) + "')))";
        case 2: return "passthru('uname -a');assert(1)";
        default: {
            std::ostringstream s;
            s << "print(" << 100 + rng.uniform_int(900) << "-" << rng.uniform_int(100)
              << ");exec('id')";
            return s.str();
        }
    }
}

inline std::string marker_for(size_t class_index, Rng& rng) {
    switch (class_index) {
        case 1: return sqli_marker(rng);
        case 2: return xss_marker(rng);
        case 3: return traversal_marker(rng);
        default: return injection_marker(rng);
    }
}

}  // namespace synth_detail

// Template-driven five-class corpus. Attack payloads embed class-specific
// marker fragments inside benign query scaffolding; a small fraction carry
// markers of a second attack class (deliberately ambiguous items that keep
// the problem from being trivially separable and give uncertainty something
// to flag). Deterministic for a given seed; records emitted class by class.
inline std::vector<DatasetRecord> synth_generate(uint64_t seed, int n_per_class) {
    if (n_per_class < 1) throw ConfigError("synth: n_per_class must be at least 1");
    using namespace synth_detail;
    Rng rng(seed);
    std::vector<DatasetRecord> out;
    out.reserve(static_cast<size_t>(n_per_class) * class_names().size());
    for (size_t ci = 0; ci < class_names().size(); ++ci) {
        for (int i = 0; i < n_per_class; ++i) {
            std::string payload;
            if (ci == 0) {
                payload = normal_payload(rng);
            } else {
                const std::string param = rand_ident(rng);
                std::string attack = marker_for(ci, rng);
                if (rng.uniform() < 0.06) {
                    // Ambiguous item: splice in a second attack class's marker.
                    // The foreign marker leads half the time, so token order
                    // cannot break the tie and these items stay genuinely hard.
                    size_t other = 1 + rng.uniform_int(4);
                    if (other == ci) other = 1 + (other % 4);
                    const std::string foreign = marker_for(other, rng);
                    attack = rng.uniform() < 0.5 ? attack + " " + foreign
                                                 : foreign + " " + attack;
                }
                payload = "GET /" + rand_page(rng) + "?" + param + "=" + attack;
                if (rng.uniform() < 0.4) payload += "&" + rand_ident(rng) + "=" + rand_value(rng);
            }
            if (rng.uniform() < 0.3) payload = percent_noise(payload, rng);
            if (rng.uniform() < 0.05) payload = percent_noise(payload, rng);
            out.push_back({payload, class_names()[ci]});
        }
    }
    return out;
}

}  // namespace uedkl
