// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oppu/adapters.hpp"
#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/model.hpp"
#include "oppu/personal.hpp"
#include "oppu/prompting.hpp"
#include "oppu/retrieval.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------
inline double accuracy(const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds) {
    if (preds.size() != golds.size() || preds.empty())
        throw ArgumentError("accuracy: length mismatch or empty input");
    size_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == golds[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Macro-F1 averaged over the full label set; classes absent from both
/// predictions and golds contribute an F1 of zero.
inline double f1_macro(const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds,
                       const std::vector<std::string>& label_set) {
    if (preds.size() != golds.size() || preds.empty())
        throw ArgumentError("f1_macro: length mismatch or empty input");
    if (label_set.empty()) throw ArgumentError("f1_macro: empty label set");
    double sum = 0.0;
    for (const auto& label : label_set) {
        int64_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            bool p = preds[i] == label, g = golds[i] == label;
            if (p && g) ++tp;
            else if (p) ++fp;
            else if (g) ++fn;
        }
        double precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        double recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        double f1 = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        sum += f1;
    }
    return sum / static_cast<double>(label_set.size());
}

inline double mae(const std::vector<double>& preds, const std::vector<double>& golds) {
    if (preds.size() != golds.size() || preds.empty())
        throw ArgumentError("mae: length mismatch or empty input");
    double sum = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) sum += std::abs(preds[i] - golds[i]);
    return sum / static_cast<double>(preds.size());
}

inline double rmse(const std::vector<double>& preds, const std::vector<double>& golds) {
    if (preds.size() != golds.size() || preds.empty())
        throw ArgumentError("rmse: length mismatch or empty input");
    double sum = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        double d = preds[i] - golds[i];
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(preds.size()));
}

namespace detail {

inline std::vector<std::string> rouge_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(lowercase(cur));
                cur.clear();
            }
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) out.push_back(lowercase(cur));
    return out;
}

inline double f1_from_counts(double match, double cand_len, double ref_len) {
    if (match <= 0.0 || cand_len <= 0.0 || ref_len <= 0.0) return 0.0;
    double p = match / cand_len, r = match / ref_len;
    return 2.0 * p * r / (p + r);
}

}  // namespace detail

/// Unigram-overlap F1 over lowercase whitespace tokens (clipped counts).
inline double rouge1(const std::string& candidate, const std::string& reference) {
    auto ref = detail::rouge_tokens(reference);
    if (ref.empty()) throw ArgumentError("rouge1: empty reference");
    auto cand = detail::rouge_tokens(candidate);
    if (cand.empty()) return 0.0;
    std::map<std::string, int> ref_counts;
    for (const auto& t : ref) ++ref_counts[t];
    double match = 0.0;
    for (const auto& t : cand) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            match += 1.0;
            --it->second;
        }
    }
    return detail::f1_from_counts(match, static_cast<double>(cand.size()),
                                  static_cast<double>(ref.size()));
}

/// Longest-common-subsequence F1 over lowercase whitespace tokens.
inline double rougeL(const std::string& candidate, const std::string& reference) {
    auto ref = detail::rouge_tokens(reference);
    if (ref.empty()) throw ArgumentError("rougeL: empty reference");
    auto cand = detail::rouge_tokens(candidate);
    if (cand.empty()) return 0.0;
    size_t n = cand.size(), m = ref.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (cand[i - 1] == ref[j - 1]) cur[j] = prev[j - 1] + 1;
            else cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return detail::f1_from_counts(static_cast<double>(prev[m]), static_cast<double>(n),
                                  static_cast<double>(m));
}

// ---------------------------------------------------------------------------
// Prediction parsing: map free-form generations onto metric inputs. Total
// functions with documented fallbacks.
// ---------------------------------------------------------------------------

/// Classification: case-insensitive exact match on the first output line,
/// else the label sharing the most tokens with it, else the
/// lexicographically first label.
inline std::string parse_label(const std::string& raw, const std::vector<std::string>& label_set) {
    if (label_set.empty()) throw ArgumentError("parse_label: empty label set");
    std::string line = lowercase(first_line(raw));
    for (const auto& label : label_set)
        if (lowercase(label) == line) return label;

    auto line_tokens = word_tokens(line);
    std::set<std::string> line_set(line_tokens.begin(), line_tokens.end());
    std::string best;
    int best_overlap = -1;
    std::vector<std::string> sorted_labels = label_set;
    std::sort(sorted_labels.begin(), sorted_labels.end());
    for (const auto& label : sorted_labels) {
        int overlap = 0;
        for (const auto& t : word_tokens(lowercase(label)))
            if (line_set.count(t)) ++overlap;
        if (overlap > best_overlap) {
            best = label;
            best_overlap = overlap;
        }
    }
    return best;  // zero overlap everywhere falls out as the first label
}

/// Rating: first integer in [1,5], else the first number rounded and clamped
/// into [1,5], else 3.
inline int parse_rating(const std::string& raw) {
    bool have_first = false;
    double first_value = 0.0;
    size_t i = 0;
    while (i < raw.size()) {
        unsigned char c = static_cast<unsigned char>(raw[i]);
        if (std::isdigit(c)) {
            size_t start = i;
            while (i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i]))) ++i;
            bool is_integer = true;
            size_t end = i;
            if (i < raw.size() && raw[i] == '.' && i + 1 < raw.size() &&
                std::isdigit(static_cast<unsigned char>(raw[i + 1]))) {
                is_integer = false;
                ++i;
                while (i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i]))) ++i;
                end = i;
            }
            double value = std::strtod(raw.substr(start, end - start).c_str(), nullptr);
            if (is_integer && value >= 1.0 && value <= 5.0) return static_cast<int>(value);
            if (!have_first) {
                have_first = true;
                first_value = value;
            }
        } else {
            ++i;
        }
    }
    if (have_first) {
        long r = std::lround(first_value);
        return static_cast<int>(std::clamp<long>(r, 1, 5));
    }
    return 3;
}

// ---------------------------------------------------------------------------
// Behavior-shift protocol: rank history items by TF-IDF cosine relevance to
// the query and keep the n least relevant ones. (The published protocol uses
// embedding-model features; the bag-of-words stand-in preserves the
// rank-by-relevance shape.)
// ---------------------------------------------------------------------------
namespace detail {

inline std::map<std::string, double> tfidf_vector(const std::vector<std::string>& tokens,
                                                  const std::map<std::string, int>& df,
                                                  size_t n_docs) {
    std::map<std::string, double> tf;
    for (const auto& t : tokens) tf[t] += 1.0;
    for (auto& [term, v] : tf) {
        auto it = df.find(term);
        int d = it == df.end() ? 0 : it->second;
        v *= std::log((1.0 + static_cast<double>(n_docs)) / (1.0 + d)) + 1.0;
    }
    return tf;
}

inline double cosine(const std::map<std::string, double>& a,
                     const std::map<std::string, double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [t, v] : a) {
        na += v * v;
        auto it = b.find(t);
        if (it != b.end()) dot += v * it->second;
    }
    for (const auto& [t, v] : b) nb += v * v;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

inline std::vector<BehaviorItem> select_irrelevant_history(const User& user, const Query& query,
                                                           size_t n) {
    if (n > user.history.size())
        throw ArgumentError("select_irrelevant_history: n exceeds history size");
    std::map<std::string, int> df;
    std::vector<std::vector<std::string>> docs;
    docs.reserve(user.history.size());
    for (const auto& it : user.history) {
        docs.push_back(word_tokens(item_text(it)));
        std::set<std::string> seen(docs.back().begin(), docs.back().end());
        for (const auto& t : seen) ++df[t];
    }
    auto qvec = detail::tfidf_vector(word_tokens(query.input_text), df, user.history.size());

    std::vector<std::pair<double, size_t>> ranked;
    ranked.reserve(user.history.size());
    for (size_t i = 0; i < user.history.size(); ++i) {
        auto ivec = detail::tfidf_vector(docs[i], df, user.history.size());
        ranked.emplace_back(detail::cosine(ivec, qvec), i);
    }
    std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return user.history[a.second].item_id < user.history[b.second].item_id;
    });
    std::vector<BehaviorItem> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) out.push_back(user.history[ranked[i].second]);
    return out;
}

// ---------------------------------------------------------------------------
// Activity buckets
// ---------------------------------------------------------------------------
struct ActivityBucket {
    int64_t lo = 0, hi = 0;  // [lo, hi)
    std::vector<User> users;
};

/// Partition users by history length into [e_i, e_{i+1}) intervals. Users
/// outside every interval are dropped. A positive subsample size draws that
/// many users per bucket (seeded, order-stable).
inline std::vector<ActivityBucket> bucket_users_by_activity(const std::vector<User>& users,
                                                            const std::vector<int64_t>& edges,
                                                            size_t subsample = 0,
                                                            uint64_t seed = 0) {
    if (edges.size() < 2) throw ArgumentError("bucket_users_by_activity: need at least two edges");
    for (size_t i = 1; i < edges.size(); ++i)
        if (edges[i] <= edges[i - 1])
            throw ArgumentError("bucket_users_by_activity: edges must be strictly increasing");
    std::vector<ActivityBucket> buckets(edges.size() - 1);
    for (size_t i = 0; i + 1 < edges.size(); ++i) {
        buckets[i].lo = edges[i];
        buckets[i].hi = edges[i + 1];
    }
    for (const auto& u : users) {
        auto len = static_cast<int64_t>(u.history.size());
        for (auto& b : buckets) {
            if (len >= b.lo && len < b.hi) {
                b.users.push_back(u);
                break;
            }
        }
    }
    if (subsample > 0) {
        for (auto& b : buckets) {
            if (b.users.size() <= subsample) continue;
            std::vector<size_t> idx(b.users.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            Rng rng(seed ^ fnv1a64(&b.lo, sizeof(b.lo)));
            rng.shuffle(idx);
            idx.resize(subsample);
            std::sort(idx.begin(), idx.end());
            std::vector<User> keep;
            keep.reserve(subsample);
            for (size_t i : idx) keep.push_back(std::move(b.users[i]));
            b.users = std::move(keep);
        }
    }
    return buckets;
}

// ---------------------------------------------------------------------------
// Evaluation grid: the Non-Personalized / RAG / PAG / personalized comparison
// axes as a list of cells.
// ---------------------------------------------------------------------------
struct GridCell {
    std::string name;
    Setting setting = Setting::B;
    int k = 0;
    bool personalized = false;
    AdapterMethod method = AdapterMethod::lora;
};

struct QueryRecord {
    std::string user_id, query_id, prediction, gold;
};

struct MetricsReport {
    std::string task;
    GridCell cell;
    std::map<std::string, double> metrics;
    std::vector<QueryRecord> records;
};

/// Returns the adapter for (user, setting, method), or null when absent.
using AdapterProvider =
    std::function<const Adapter*(const std::string&, Setting, AdapterMethod)>;

/// Restricts the retrieval pool per query (behavior-shift protocol); the
/// default is the user's full history.
using PoolProvider = std::function<std::vector<BehaviorItem>(const User&, const Query&)>;

struct EvalOptions {
    int max_new_tokens = 16;
    AdapterProvider adapters;  // required for personalized cells
    PoolProvider pool;         // optional
};

inline MetricsReport evaluate_cell(const std::map<Setting, BaseModel>& bases,
                                   const std::vector<User>& users, const TaskSpec& task,
                                   const GridCell& cell, const EvalOptions& opt) {
    task.validate();
    auto base_it = bases.find(cell.setting);
    if (base_it == bases.end())
        throw ConfigError(std::string("evaluate_cell: no base model for setting ") +
                          setting_name(cell.setting));
    const BaseModel& base = base_it->second;
    PromptTemplate tmpl = task_template(task.task_id);

    MetricsReport report;
    report.task = task_name(task.task_id);
    report.cell = cell;

    std::vector<std::string> pred_labels, gold_labels;
    std::vector<double> pred_nums, gold_nums;
    std::vector<double> r1s, rls;

    for (const auto& user : users) {
        const Adapter* adapter = nullptr;
        if (cell.personalized) {
            if (!opt.adapters)
                throw ConfigError("evaluate_cell: personalized cell without adapter provider");
            adapter = opt.adapters(user.user_id, cell.setting, cell.method);
            if (!adapter)
                throw ConfigError("evaluate_cell: no adapter for user " + user.user_id +
                                  " in cell " + cell.name);
        }
        std::string profile;
        if (cell.setting == Setting::P && !user.history.empty())
            profile = user.profile_text.empty() ? build_profile(user.history, task)
                                                : user.profile_text;
        int n_virtual = adapter && adapter->method == AdapterMethod::prompt_tuning
                            ? adapter->num_virtual_tokens
                            : 0;
        size_t budget = 0;
        int reserve = n_virtual + opt.max_new_tokens + 8;
        if (base.config.context_length > reserve)
            budget = static_cast<size_t>(base.config.context_length - reserve);

        for (const auto& q : user.queries) {
            if (q.gold_output.empty())
                throw ArgumentError("evaluate_cell: query " + q.query_id + " has no gold output");
            std::vector<BehaviorItem> pool = opt.pool ? opt.pool(user, q) : user.history;
            RetrievalResult retrieved;
            if (cell.setting != Setting::B && cell.k > 0)
                retrieved = retrieve(q.input_text, pool, cell.k, q.timestamp);
            PromptSetting ps{cell.setting, cell.k,
                             cell.setting == Setting::P ? ProfileSource::builder
                                                        : ProfileSource::none};
            std::string prompt =
                construct_prompt(ps, q, &retrieved,
                                 cell.setting == Setting::P ? &profile : nullptr, tmpl, budget);
            std::string out = generate(base, adapter, prompt, opt.max_new_tokens);

            std::string prediction;
            switch (task.kind) {
                case TaskKind::classification:
                    prediction = parse_label(out, task.label_set);
                    pred_labels.push_back(prediction);
                    gold_labels.push_back(trim(q.gold_output));
                    break;
                case TaskKind::regression_as_classification: {
                    int r = parse_rating(out);
                    prediction = std::to_string(r);
                    pred_nums.push_back(static_cast<double>(r));
                    gold_nums.push_back(static_cast<double>(parse_rating(q.gold_output)));
                    break;
                }
                case TaskKind::generation:
                    prediction = out;
                    r1s.push_back(rouge1(out, q.gold_output));
                    rls.push_back(rougeL(out, q.gold_output));
                    break;
            }
            report.records.push_back({user.user_id, q.query_id, prediction, q.gold_output});
        }
    }

    switch (task.kind) {
        case TaskKind::classification:
            report.metrics["accuracy"] = accuracy(pred_labels, gold_labels);
            report.metrics["f1"] = f1_macro(pred_labels, gold_labels, task.label_set);
            break;
        case TaskKind::regression_as_classification:
            report.metrics["mae"] = mae(pred_nums, gold_nums);
            report.metrics["rmse"] = rmse(pred_nums, gold_nums);
            break;
        case TaskKind::generation: {
            double s1 = 0.0, sl = 0.0;
            for (double v : r1s) s1 += v;
            for (double v : rls) sl += v;
            report.metrics["rouge1"] = r1s.empty() ? 0.0 : s1 / static_cast<double>(r1s.size());
            report.metrics["rougeL"] = rls.empty() ? 0.0 : sl / static_cast<double>(rls.size());
            break;
        }
    }
    return report;
}

inline std::vector<MetricsReport> run_grid(const std::map<Setting, BaseModel>& bases,
                                           const std::vector<User>& users, const TaskSpec& task,
                                           const std::vector<GridCell>& cells,
                                           const EvalOptions& opt) {
    std::vector<MetricsReport> reports;
    reports.reserve(cells.size());
    for (const auto& cell : cells) reports.push_back(evaluate_cell(bases, users, task, cell, opt));
    return reports;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------
inline void write_metrics_csv(const std::vector<MetricsReport>& reports, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f << "task,setting,method,k,metric,value\n";
    for (const auto& r : reports) {
        std::string method = r.cell.personalized ? method_name(r.cell.method) : "none";
        for (const auto& [metric, value] : r.metrics)
            f << csv_field(r.task) << "," << setting_name(r.cell.setting) << "," << method << ","
              << r.cell.k << "," << metric << "," << format_metric(value) << "\n";
    }
    if (!f.good()) throw Error("write failed: " + path);
}

inline void write_audit_csv(const MetricsReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f << "user_id,query_id,prediction,gold\n";
    for (const auto& rec : report.records)
        f << csv_field(rec.user_id) << "," << csv_field(rec.query_id) << ","
          << csv_field(rec.prediction) << "," << csv_field(rec.gold) << "\n";
    if (!f.good()) throw Error("write failed: " + path);
}

/// Square similarity matrix with user-id header row and column.
inline void write_similarity_csv(const std::vector<std::string>& user_ids, const DMat& matrix,
                                 const std::string& path) {
    if (matrix.rows != static_cast<int64_t>(user_ids.size()) || matrix.rows != matrix.cols)
        throw ArgumentError("write_similarity_csv: matrix/id size mismatch");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f << "user_id";
    for (const auto& id : user_ids) f << "," << csv_field(id);
    f << "\n";
    for (size_t i = 0; i < user_ids.size(); ++i) {
        f << csv_field(user_ids[i]);
        for (size_t j = 0; j < user_ids.size(); ++j)
            f << "," << format_metric(matrix.at(static_cast<int64_t>(i), static_cast<int64_t>(j)));
        f << "\n";
    }
    if (!f.good()) throw Error("write failed: " + path);
}

/// Pairwise adapter similarity over a user list (symmetric, unit diagonal).
inline DMat similarity_matrix(const std::vector<std::string>& user_ids,
                              const std::function<const Adapter*(const std::string&)>& lookup) {
    DMat m(static_cast<int64_t>(user_ids.size()), static_cast<int64_t>(user_ids.size()));
    for (size_t i = 0; i < user_ids.size(); ++i) {
        const Adapter* a = lookup(user_ids[i]);
        if (!a) throw NotFoundError("similarity_matrix: no adapter for " + user_ids[i]);
        for (size_t j = 0; j < user_ids.size(); ++j) {
            const Adapter* b = lookup(user_ids[j]);
            if (!b) throw NotFoundError("similarity_matrix: no adapter for " + user_ids[j]);
            m.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) = adapter_similarity(*a, *b);
        }
    }
    return m;
}

}  // namespace oppu
