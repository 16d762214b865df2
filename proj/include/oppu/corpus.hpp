// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "oppu/errors.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Data model: users own a time-ordered behavior history plus held-out
// queries. Optional text fields use the empty string as "absent".
// ---------------------------------------------------------------------------
struct BehaviorItem {
    std::string item_id;
    std::string input_text;   // x_u
    std::string output_text;  // y_u
    int64_t timestamp = 0;    // epoch seconds

    bool aligned() const { return !input_text.empty() && !output_text.empty(); }
};

/// The text a history item contributes to retrieval, profiles and
/// unsupervised training: "input\noutput" when both halves exist.
inline std::string item_text(const BehaviorItem& it) {
    if (!it.input_text.empty() && !it.output_text.empty())
        return it.input_text + "\n" + it.output_text;
    return it.input_text.empty() ? it.output_text : it.input_text;
}

struct Query {
    std::string query_id;
    std::string input_text;   // q_u
    std::string gold_output;  // r_u
    int64_t timestamp = 0;    // time t
};

struct User {
    std::string user_id;
    std::vector<BehaviorItem> history;  // sorted non-decreasing by timestamp
    std::vector<Query> queries;
    std::string profile_text;  // externally supplied s_u, may be empty
};

enum class TaskId { lamp1, lamp2n, lamp2m, lamp3, lamp4, lamp5, lamp7, synthetic };
enum class TaskKind { classification, regression_as_classification, generation };

struct TaskSpec {
    TaskId task_id = TaskId::synthetic;
    TaskKind kind = TaskKind::classification;
    std::vector<std::string> label_set;
    bool history_aligned = true;

    void validate() const {
        if (kind != TaskKind::generation && label_set.empty())
            throw ArgumentError("TaskSpec: classification tasks need a label set");
    }
};

inline const char* task_name(TaskId id) {
    switch (id) {
        case TaskId::lamp1: return "LaMP-1";
        case TaskId::lamp2n: return "LaMP-2N";
        case TaskId::lamp2m: return "LaMP-2M";
        case TaskId::lamp3: return "LaMP-3";
        case TaskId::lamp4: return "LaMP-4";
        case TaskId::lamp5: return "LaMP-5";
        case TaskId::lamp7: return "LaMP-7";
        case TaskId::synthetic: return "synthetic";
    }
    return "?";
}

inline TaskId task_id_from_name(const std::string& s) {
    if (s == "LaMP-1" || s == "lamp1") return TaskId::lamp1;
    if (s == "LaMP-2N" || s == "lamp2n") return TaskId::lamp2n;
    if (s == "LaMP-2M" || s == "lamp2m") return TaskId::lamp2m;
    if (s == "LaMP-3" || s == "lamp3") return TaskId::lamp3;
    if (s == "LaMP-4" || s == "lamp4") return TaskId::lamp4;
    if (s == "LaMP-5" || s == "lamp5") return TaskId::lamp5;
    if (s == "LaMP-7" || s == "lamp7") return TaskId::lamp7;
    if (s == "synthetic") return TaskId::synthetic;
    throw ConfigError("unknown task id: " + s);
}

inline const std::vector<std::string>& lamp2n_categories() {
    static const std::vector<std::string> v = {
        "travel", "education", "parents", "style & beauty", "entertainment",
        "food & drink", "science & technology", "business", "sports",
        "healthy living", "women", "politics", "crime", "culture & arts", "religion"};
    return v;
}

inline const std::vector<std::string>& lamp2m_tags() {
    static const std::vector<std::string> v = {
        "sci-fi", "based on a book", "comedy", "action", "twist ending",
        "dystopia", "dark comedy", "classic", "psychology", "fantasy",
        "romance", "thought-provoking", "social commentary", "violence", "true story"};
    return v;
}

/// Built-in task descriptors. The synthetic task takes its label set from the
/// dataset generator (see synthetic.hpp); this default covers four labels.
inline TaskSpec task_spec(TaskId id) {
    TaskSpec t;
    t.task_id = id;
    switch (id) {
        case TaskId::lamp1:
            t.kind = TaskKind::classification;
            t.label_set = {"1", "2"};
            t.history_aligned = false;  // publication titles only
            break;
        case TaskId::lamp2n:
            t.kind = TaskKind::classification;
            t.label_set = lamp2n_categories();
            t.history_aligned = true;
            break;
        case TaskId::lamp2m:
            t.kind = TaskKind::classification;
            t.label_set = lamp2m_tags();
            t.history_aligned = true;
            break;
        case TaskId::lamp3:
            t.kind = TaskKind::regression_as_classification;
            t.label_set = {"1", "2", "3", "4", "5"};
            t.history_aligned = true;
            break;
        case TaskId::lamp4:
        case TaskId::lamp5:
            t.kind = TaskKind::generation;
            t.history_aligned = true;
            break;
        case TaskId::lamp7:
            t.kind = TaskKind::generation;
            t.history_aligned = false;  // historical tweets only
            break;
        case TaskId::synthetic:
            t.kind = TaskKind::classification;
            t.label_set = {"A", "B", "C", "D"};
            t.history_aligned = true;
            break;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Ingestion: line-delimited JSON records, one user per line.
// ---------------------------------------------------------------------------
inline std::vector<User> load_dataset(const std::string& path, const TaskSpec& task) {
    task.validate();
    std::ifstream f(path);
    if (!f) throw NotFoundError("dataset not found: " + path);

    std::vector<User> users;
    std::set<std::string> seen;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        bool blank = true;
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c))) { blank = false; break; }
        if (blank) continue;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
        }
        auto fail = [&](const std::string& msg) {
            throw ParseError("line " + std::to_string(line_no) + ": " + msg);
        };

        User u;
        if (!j.contains("user_id") || !j["user_id"].is_string()) fail("missing user_id");
        u.user_id = j["user_id"].get<std::string>();
        if (u.user_id.empty()) fail("empty user_id");
        if (!seen.insert(u.user_id).second)
            throw ConflictError("line " + std::to_string(line_no) + ": duplicate user_id " + u.user_id);

        if (j.contains("profile_text") && j["profile_text"].is_string())
            u.profile_text = j["profile_text"].get<std::string>();

        size_t idx = 0;
        for (const auto& rec : j.value("profile", nlohmann::json::array())) {
            BehaviorItem it;
            it.item_id = rec.contains("id") ? rec["id"].get<std::string>()
                                            : u.user_id + "-h" + std::to_string(idx);
            it.input_text = rec.value("input", "");
            it.output_text = rec.value("output", "");
            if (it.input_text.empty() && it.output_text.empty())
                fail("history item " + it.item_id + " has neither input nor output");
            if (rec.contains("timestamp")) {
                it.timestamp = rec["timestamp"].get<int64_t>();
                if (it.timestamp < 0) fail("history item " + it.item_id + " has negative timestamp");
            } else {
                it.timestamp = static_cast<int64_t>(idx);  // file order as temporal order
            }
            u.history.push_back(std::move(it));
            ++idx;
        }
        idx = 0;
        for (const auto& rec : j.value("queries", nlohmann::json::array())) {
            Query q;
            q.query_id = rec.contains("id") ? rec["id"].get<std::string>()
                                            : u.user_id + "-q" + std::to_string(idx);
            q.input_text = rec.value("input", "");
            q.gold_output = rec.value("output", "");
            if (q.input_text.empty()) fail("query " + q.query_id + " has empty input");
            q.timestamp = rec.value("timestamp", static_cast<int64_t>(idx));
            if (q.timestamp < 0) fail("query " + q.query_id + " has negative timestamp");
            u.queries.push_back(std::move(q));
            ++idx;
        }
        std::stable_sort(u.history.begin(), u.history.end(),
                         [](const BehaviorItem& a, const BehaviorItem& b) {
                             return a.timestamp < b.timestamp;
                         });
        users.push_back(std::move(u));
    }
    return users;
}

inline void save_dataset(const std::vector<User>& users, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    for (const auto& u : users) {
        nlohmann::json j;
        j["user_id"] = u.user_id;
        if (!u.profile_text.empty()) j["profile_text"] = u.profile_text;
        auto items = nlohmann::json::array();
        for (const auto& it : u.history) {
            nlohmann::json r;
            r["id"] = it.item_id;
            if (!it.input_text.empty()) r["input"] = it.input_text;
            if (!it.output_text.empty()) r["output"] = it.output_text;
            r["timestamp"] = it.timestamp;
            items.push_back(std::move(r));
        }
        j["profile"] = std::move(items);
        auto queries = nlohmann::json::array();
        for (const auto& q : u.queries) {
            nlohmann::json r;
            r["id"] = q.query_id;
            r["input"] = q.input_text;
            if (!q.gold_output.empty()) r["output"] = q.gold_output;
            r["timestamp"] = q.timestamp;
            queries.push_back(std::move(r));
        }
        j["queries"] = std::move(queries);
        f << j.dump() << "\n";
    }
    if (!f.good()) throw Error("write failed: " + path);
}

/// Held-out split: the `test_count` users with the longest histories become
/// the test set (ties broken by user_id ascending); everyone else trains the
/// shared base.
inline std::pair<std::vector<User>, std::vector<User>> split_heldout(
    const std::vector<User>& users, size_t test_count) {
    if (test_count > users.size())
        throw ArgumentError("split_heldout: test_count exceeds population");
    std::vector<size_t> order(users.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (users[a].history.size() != users[b].history.size())
            return users[a].history.size() > users[b].history.size();
        return users[a].user_id < users[b].user_id;
    });
    std::set<size_t> test_idx(order.begin(), order.begin() + static_cast<ptrdiff_t>(test_count));
    std::vector<User> train, test;
    for (size_t i = 0; i < test_count; ++i) test.push_back(users[order[i]]);
    for (size_t i = 0; i < users.size(); ++i)
        if (!test_idx.count(i)) train.push_back(users[i]);
    return {std::move(train), std::move(test)};
}

}  // namespace oppu
