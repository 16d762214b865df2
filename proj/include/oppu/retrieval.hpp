// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/util.hpp"

namespace oppu {

inline constexpr double kBm25K1 = 1.2;
inline constexpr double kBm25B = 0.75;

// ---------------------------------------------------------------------------
// Okapi BM25 over one user's behavior history. Per-user corpora are tiny, so
// the idf uses the smoothed ln(1 + .) form: the classic variant goes negative
// once a term appears in more than half the documents, which would invert
// ranking semantics here.
// ---------------------------------------------------------------------------
struct HistoryIndex {
    std::vector<BehaviorItem> items;
    std::vector<std::map<std::string, int>> term_freqs;  // per item
    std::vector<int> lengths;                            // per item, in tokens
    std::map<std::string, int> doc_freq;
    double avg_length = 0.0;
    size_t size() const { return items.size(); }
};

inline HistoryIndex build_index(const std::vector<BehaviorItem>& items) {
    HistoryIndex idx;
    idx.items = items;
    idx.term_freqs.resize(items.size());
    idx.lengths.resize(items.size(), 0);
    int64_t total_len = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        auto terms = word_tokens(item_text(items[i]));
        idx.lengths[i] = static_cast<int>(terms.size());
        total_len += static_cast<int64_t>(terms.size());
        auto& tf = idx.term_freqs[i];
        for (auto& t : terms) ++tf[t];
        for (const auto& [term, n] : tf) ++idx.doc_freq[term];
    }
    idx.avg_length = items.empty() ? 0.0
                                   : static_cast<double>(total_len) / static_cast<double>(items.size());
    return idx;
}

inline double bm25_idf(int df, size_t n_docs) {
    return std::log(1.0 + (static_cast<double>(n_docs) - df + 0.5) / (df + 0.5));
}

/// Score of one indexed item against a term list. The sum runs over the list
/// as given, so a query term repeated twice contributes twice.
inline double bm25_score(const std::vector<std::string>& query_terms, size_t item_index,
                         const HistoryIndex& idx, double k1 = kBm25K1, double b = kBm25B) {
    if (item_index >= idx.size()) throw ArgumentError("bm25_score: item not indexed");
    const auto& tf_map = idx.term_freqs[item_index];
    double len_norm = idx.avg_length > 0.0
                          ? static_cast<double>(idx.lengths[item_index]) / idx.avg_length
                          : 0.0;
    double score = 0.0;
    for (const auto& term : query_terms) {
        auto it = tf_map.find(term);
        if (it == tf_map.end()) continue;
        double tf = static_cast<double>(it->second);
        auto df_it = idx.doc_freq.find(term);
        double idf = bm25_idf(df_it == idx.doc_freq.end() ? 0 : df_it->second, idx.size());
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm));
    }
    return score;
}

struct ScoredItem {
    BehaviorItem item;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<ScoredItem> items;  // descending by score
    size_t size() const { return items.size(); }
    bool empty() const { return items.empty(); }
};

/// Top-k history items strictly older than `before`, ranked by BM25 score.
/// Ties break toward the more recent item, then by item_id ascending. k = 0
/// is the non-retrieval setting and returns an empty result.
inline RetrievalResult retrieve(const std::string& query,
                                const std::vector<BehaviorItem>& history, int k,
                                int64_t before) {
    if (k < 0) throw ArgumentError("retrieve: k must be >= 0");
    RetrievalResult out;
    if (k == 0) return out;

    std::vector<BehaviorItem> eligible;
    for (const auto& it : history)
        if (it.timestamp < before) eligible.push_back(it);
    if (eligible.empty()) return out;

    HistoryIndex idx = build_index(eligible);
    auto terms = word_tokens(query);
    std::vector<size_t> order(eligible.size());
    std::vector<double> scores(eligible.size());
    for (size_t i = 0; i < eligible.size(); ++i) {
        order[i] = i;
        scores[i] = bm25_score(terms, i, idx);
    }
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        if (eligible[a].timestamp != eligible[b].timestamp)
            return eligible[a].timestamp > eligible[b].timestamp;
        return eligible[a].item_id < eligible[b].item_id;
    });
    size_t take = std::min(static_cast<size_t>(k), eligible.size());
    out.items.reserve(take);
    for (size_t i = 0; i < take; ++i)
        out.items.push_back({eligible[order[i]], scores[order[i]]});
    return out;
}

}  // namespace oppu
