// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Synthetic datasets for the desk-scale experiments. Every user maps signal
// words to labels; history items and held-out queries share signals but use
// distinct case numbers, so retrieval has to key on the signal word.
// ---------------------------------------------------------------------------
struct SyntheticSpec {
    std::vector<std::string> labels = {"A", "B"};
    std::vector<std::string> signals = {"red", "blue"};
    int items_per_user = 200;
    int queries_per_user = 25;
    uint64_t seed = 1;
};

inline TaskSpec synthetic_task(const std::vector<std::string>& labels) {
    TaskSpec t;
    t.task_id = TaskId::synthetic;
    t.kind = TaskKind::classification;
    t.label_set = labels;
    t.history_aligned = true;
    return t;
}

/// One user with an explicit signal -> label mapping. Signals rotate through
/// the history so every mapping entry is evenly covered.
inline User make_mapped_user(const std::string& user_id,
                             const std::map<std::string, std::string>& mapping,
                             int items, int queries, uint64_t seed) {
    if (mapping.empty()) throw ArgumentError("make_mapped_user: empty mapping");
    std::vector<std::string> signals;
    for (const auto& [s, l] : mapping) signals.push_back(s);
    Rng rng(seed ^ fnv1a64_str(user_id));

    User u;
    u.user_id = user_id;
    for (int i = 0; i < items; ++i) {
        const std::string& sig = signals[static_cast<size_t>(i) % signals.size()];
        BehaviorItem it;
        it.item_id = user_id + "-h" + std::to_string(i);
        it.input_text = "signal " + sig + " case " + std::to_string(100 + i);
        it.output_text = mapping.at(sig);
        it.timestamp = 1000 + i;
        u.history.push_back(std::move(it));
    }
    for (int i = 0; i < queries; ++i) {
        const std::string& sig = signals[rng.index(signals.size())];
        Query q;
        q.query_id = user_id + "-q" + std::to_string(i);
        q.input_text = "signal " + sig + " case " + std::to_string(9000 + i);
        q.gold_output = mapping.at(sig);
        q.timestamp = 100000 + i;
        u.queries.push_back(std::move(q));
    }
    return u;
}

/// Two users with exactly opposite signal -> label mappings (the swap-test
/// pair). Requires exactly two labels.
inline std::vector<User> make_swap_pair(const SyntheticSpec& spec) {
    if (spec.labels.size() < 2) throw ArgumentError("make_swap_pair: need two labels");
    std::map<std::string, std::string> fwd, rev;
    for (size_t i = 0; i < spec.signals.size(); ++i) {
        fwd[spec.signals[i]] = spec.labels[i % 2];
        rev[spec.signals[i]] = spec.labels[(i + 1) % 2];
    }
    return {make_mapped_user("swap-1", fwd, spec.items_per_user, spec.queries_per_user, spec.seed),
            make_mapped_user("swap-2", rev, spec.items_per_user, spec.queries_per_user, spec.seed)};
}

/// Held-out users with independently seeded random mappings; they teach the
/// base the task format without committing it to any one user's preferences.
inline std::vector<User> make_heldout_users(int n, const SyntheticSpec& spec) {
    std::vector<User> out;
    Rng rng(spec.seed ^ 0xba5e0ull);
    for (int i = 0; i < n; ++i) {
        std::map<std::string, std::string> mapping;
        for (const auto& sig : spec.signals)
            mapping[sig] = spec.labels[rng.index(spec.labels.size())];
        out.push_back(make_mapped_user("held-" + std::to_string(i), mapping,
                                       spec.items_per_user, spec.queries_per_user,
                                       spec.seed + static_cast<uint64_t>(i) + 17));
    }
    return out;
}

/// Users for the behavior-shift protocol: many signals, labels assigned
/// cyclically with a per-user offset so different signals mostly disagree.
inline std::vector<User> make_shift_users(int n_users, const SyntheticSpec& spec) {
    std::vector<User> out;
    for (int uidx = 0; uidx < n_users; ++uidx) {
        std::map<std::string, std::string> mapping;
        for (size_t i = 0; i < spec.signals.size(); ++i)
            mapping[spec.signals[i]] =
                spec.labels[(i + static_cast<size_t>(uidx)) % spec.labels.size()];
        out.push_back(make_mapped_user("shift-" + std::to_string(uidx), mapping,
                                       spec.items_per_user, spec.queries_per_user,
                                       spec.seed + static_cast<uint64_t>(uidx) + 71));
    }
    return out;
}

/// Default word pool for multi-signal datasets.
inline std::vector<std::string> signal_pool(size_t n) {
    static const std::vector<std::string> pool = {
        "amber", "birch", "coral", "dune",  "ember", "fjord", "grove", "heath",
        "iris",  "jade",  "kelp",  "larch", "moss",  "nectar", "onyx", "pearl"};
    if (n > pool.size()) throw ArgumentError("signal_pool: not enough distinct signals");
    return {pool.begin(), pool.begin() + static_cast<ptrdiff_t>(n)};
}

}  // namespace oppu
