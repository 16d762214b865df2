// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/retrieval.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Prompt construction: phi_t (task only), phi_r (retrieval-augmented) and
// phi_p (profile-augmented) share one layout,
//
//   {USER PROFILE}\n{RETRIEVED HISTORY}\n{instruction + query}
//
// with empty slots omitted entirely. The instruction blocks are fixed task
// templates; tests diff them against the copies shipped under templates/.
// ---------------------------------------------------------------------------

enum class ProfileSource { none, dataset, builder };

struct PromptSetting {
    Setting setting = Setting::B;
    int k = 0;
    ProfileSource profile_source = ProfileSource::none;
};

struct PromptTemplate {
    TaskId task_id = TaskId::synthetic;
    std::string instruction_text;          // template with literal {SLOT} markers
    std::vector<std::string> query_slots;  // slot markers in fill order
};

inline PromptTemplate task_template(TaskId id) {
    PromptTemplate t;
    t.task_id = id;
    switch (id) {
        case TaskId::lamp1:
            t.instruction_text =
                "Identify the most relevant reference for the listed publication by the "
                "researcher. Select the reference paper that is most closely related to the "
                "researcher's work. Please respond with only the number that corresponds to the "
                "reference.\npaper title: {QUERY PAPER TITLE}\nreference: [1] - {OPTION1} [2] - "
                "{OPTION2}\nanswer:";
            t.query_slots = {"{QUERY PAPER TITLE}", "{OPTION1}", "{OPTION2}"};
            break;
        case TaskId::lamp2n:
            t.instruction_text =
                "Which category does this article relate to among the following categories? "
                "Just answer with the category name without further explanation. categories: "
                "[travel, education, parents, style & beauty, entertainment, food & drink, "
                "science & technology, business, sports, healthy living, women, politics, "
                "crime, culture & arts, religion]\narticle: {QUERY ARTICLE} category:";
            t.query_slots = {"{QUERY ARTICLE}"};
            break;
        case TaskId::lamp2m:
            t.instruction_text =
                "Which tag does this movie relate to among the following tags? Just answer "
                "with the tag name without further explanation. tags: [sci-fi, based on a "
                "book, comedy, action, twist ending, dystopia, dark comedy, classic, "
                "psychology, fantasy, romance, thought-provoking, social commentary, violence, "
                "true story]\ndescription: {QUERY DESCRIPTION} tag:";
            t.query_slots = {"{QUERY DESCRIPTION}"};
            break;
        case TaskId::lamp3:
            t.instruction_text =
                "What is the score of the following review on a scale of 1 to 5? just answer "
                "with 1, 2, 3, 4, or 5 without further explanation.\nreview: {QUERY REVIEW} "
                "score:";
            t.query_slots = {"{QUERY REVIEW}"};
            break;
        case TaskId::lamp4:
            t.instruction_text =
                "Generate a headline for the following article.\narticle: {QUERY ARTICLE} "
                "headline:";
            t.query_slots = {"{QUERY ARTICLE}"};
            break;
        case TaskId::lamp5:
            t.instruction_text =
                "Generate a title for the following abstract of a paper.\nabstract: {QUERY "
                "ABSTRACT} title:";
            t.query_slots = {"{QUERY ABSTRACT}"};
            break;
        case TaskId::lamp7:
            t.instruction_text =
                "Following the given pattern, paraphrase the following text into tweet without "
                "any explanation before or after it.\ntext: {QUERY TEXT} tweet:";
            t.query_slots = {"{QUERY TEXT}"};
            break;
        case TaskId::synthetic:
            t.instruction_text =
                "Answer with exactly one label for the following input.\ninput: {QUERY INPUT} "
                "label:";
            t.query_slots = {"{QUERY INPUT}"};
            break;
    }
    return t;
}

/// Per-item rendering inside {RETRIEVED HISTORY}; absent halves are omitted.
inline std::string render_history_item(const BehaviorItem& it) {
    std::string out;
    if (!it.input_text.empty()) out += "input: " + it.input_text;
    if (!it.output_text.empty()) {
        if (!out.empty()) out += "\n";
        out += "output: " + it.output_text;
    }
    return out;
}

/// Fill the template's query slots. Multi-slot tasks (LaMP-1) carry their
/// fields tab-separated inside Query::input_text; missing fields render
/// empty.
inline std::string render_instruction(const PromptTemplate& tmpl, const Query& query) {
    std::vector<std::string> values;
    if (tmpl.query_slots.size() > 1) values = split(query.input_text, '\t');
    else values.push_back(query.input_text);
    std::string text = tmpl.instruction_text;
    for (size_t i = 0; i < tmpl.query_slots.size(); ++i) {
        const std::string& slot = tmpl.query_slots[i];
        const std::string value = i < values.size() ? values[i] : std::string();
        auto pos = text.find(slot);
        if (pos == std::string::npos) throw StateError("template missing slot " + slot);
        text.replace(pos, slot.size(), value);
    }
    return text;
}

inline std::string construct_prompt(const PromptSetting& setting, const Query& query,
                                    const RetrievalResult* retrieved,
                                    const std::string* profile, const PromptTemplate& tmpl,
                                    size_t max_bytes = 0) {
    if (setting.setting == Setting::P && (profile == nullptr || profile->empty()))
        throw ArgumentError("construct_prompt: profile setting requires a profile");
    if (setting.setting != Setting::B && setting.k > 0 && retrieved == nullptr)
        throw ArgumentError("construct_prompt: retrieval setting requires a retrieval result");

    std::string instruction = render_instruction(tmpl, query);
    size_t use_items = 0;
    if (retrieved != nullptr && setting.setting != Setting::B)
        use_items = std::min(retrieved->size(), static_cast<size_t>(std::max(setting.k, 0)));

    for (;;) {
        std::string out;
        if (setting.setting == Setting::P && profile && !profile->empty()) out += *profile + "\n";
        if (use_items > 0) {
            for (size_t i = 0; i < use_items; ++i)
                out += render_history_item(retrieved->items[i].item) + "\n";
        }
        out += instruction;
        if (max_bytes == 0 || out.size() <= max_bytes || use_items == 0) return out;
        --use_items;  // drop the least relevant retrieved item and retry
    }
}

// ---------------------------------------------------------------------------
// Deterministic extractive profile builder, standing in for the
// instruction-tuned profile generator. Output format follows the tasks'
// answer forms: "most popular tag/category: <mode>" for labeled
// classification, positive/negative score modes for ratings, and the user's
// five highest-document-frequency content words otherwise.
// ---------------------------------------------------------------------------
namespace detail {

inline const std::set<std::string>& profile_stopwords() {
    static const std::set<std::string> v = {"the", "and", "for", "with", "that", "this",
                                            "from", "are", "was", "has", "have", "not",
                                            "you", "your", "its", "about", "into"};
    return v;
}

inline std::string mode_label(const std::vector<std::string>& labels) {
    std::map<std::string, int> counts;
    for (const auto& l : labels) ++counts[l];
    std::string best;
    int best_n = 0;
    for (const auto& [label, n] : counts) {
        if (n > best_n) {  // ties keep the lexicographically smaller key
            best = label;
            best_n = n;
        }
    }
    return best;
}

inline std::string content_word_profile(const std::vector<BehaviorItem>& history) {
    std::map<std::string, int> df;
    for (const auto& it : history) {
        std::set<std::string> seen;
        for (const auto& w : word_tokens(item_text(it))) {
            if (w.size() < 3 || profile_stopwords().count(w)) continue;
            if (seen.insert(w).second) ++df[w];
        }
    }
    std::vector<std::pair<std::string, int>> ranked(df.begin(), df.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::string out = "most common words:";
    size_t take = std::min<size_t>(5, ranked.size());
    for (size_t i = 0; i < take; ++i) out += (i == 0 ? " " : ", ") + ranked[i].first;
    return out;
}

}  // namespace detail

inline std::string build_profile(const std::vector<BehaviorItem>& history, const TaskSpec& task) {
    if (history.empty()) throw ArgumentError("build_profile: empty history");

    if (task.kind == TaskKind::regression_as_classification) {
        std::vector<int> positive, negative;
        for (const auto& it : history) {
            std::string v = trim(it.output_text);
            if (v.empty()) continue;
            char* end = nullptr;
            long score = std::strtol(v.c_str(), &end, 10);
            if (end == v.c_str()) continue;
            if (score >= 4) positive.push_back(static_cast<int>(score));
            if (score <= 2) negative.push_back(static_cast<int>(score));
        }
        auto band_mode = [](const std::vector<int>& band) -> std::string {
            if (band.empty()) return "none";
            std::map<int, int> counts;
            for (int v : band) ++counts[v];
            int best = 0, best_n = 0;
            for (const auto& [v, n] : counts) {
                if (n > best_n) {
                    best = v;
                    best_n = n;
                }
            }
            return std::to_string(best);
        };
        return "most common positive score: " + band_mode(positive) +
               ", most common negative score: " + band_mode(negative);
    }

    if (task.kind == TaskKind::classification) {
        std::vector<std::string> labels;
        for (const auto& it : history)
            if (!it.output_text.empty()) labels.push_back(trim(it.output_text));
        if (!labels.empty()) {
            const char* unit = task.task_id == TaskId::lamp2m   ? "tag"
                               : task.task_id == TaskId::lamp2n ? "category"
                                                                : "label";
            return std::string("most popular ") + unit + ": " + detail::mode_label(labels);
        }
        // classification history without labels (e.g. publication lists)
        return detail::content_word_profile(history);
    }

    return detail::content_word_profile(history);
}

/// Write each task's instruction template to `<dir>/<task>.txt` so the
/// shipped data files can be diffed against the built-in strings.
inline void write_template_files(const std::string& dir) {
    for (TaskId id : {TaskId::lamp1, TaskId::lamp2n, TaskId::lamp2m, TaskId::lamp3,
                      TaskId::lamp4, TaskId::lamp5, TaskId::lamp7, TaskId::synthetic}) {
        std::ofstream f(dir + "/" + task_name(id) + ".txt", std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write template file in " + dir);
        f << task_template(id).instruction_text;
    }
}

}  // namespace oppu
