// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "oppu/adapters.hpp"
#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/model.hpp"
#include "oppu/optim.hpp"
#include "oppu/personal.hpp"
#include "oppu/prompting.hpp"
#include "oppu/retrieval.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// TrainConfig: hyperparameters for both training stages. The defaults are
// desk-scale; lamp_paper_defaults() reproduces the published per-task table
// (rank 8, lr 1e-5, 2-3 epochs, L2 regularization as decoupled weight decay).
// ---------------------------------------------------------------------------
struct TrainConfig {
    int rank = 8;
    int epochs = 3;
    double learning_rate = 1e-2;
    double l2_reg = 0.0;
    int batch_size = 4;
    Setting setting = Setting::B;
    int k = 0;
    AdapterMethod method = AdapterMethod::lora;
    uint64_t seed = 0;
    int num_virtual_tokens = 16;  // prompt tuning only

    void validate() const {
        if (epochs < 0) throw ArgumentError("TrainConfig: epochs must be >= 0");
        if (learning_rate <= 0.0) throw ArgumentError("TrainConfig: learning_rate must be > 0");
        if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be >= 1");
        if (k < 0) throw ArgumentError("TrainConfig: k must be >= 0");
    }
};

inline TrainConfig lamp_paper_defaults(TaskId task) {
    TrainConfig c;
    c.rank = 8;
    c.learning_rate = 1e-5;
    switch (task) {
        case TaskId::lamp1:
        case TaskId::lamp2n:
            c.epochs = 3; c.l2_reg = 1e-2; c.batch_size = 16; break;
        case TaskId::lamp2m:
            c.epochs = 3; c.l2_reg = 1e-2; c.batch_size = 4; break;
        case TaskId::lamp3:
            c.epochs = 3; c.l2_reg = 1e-2; c.batch_size = 3; break;
        case TaskId::lamp4:
        case TaskId::lamp7:
            c.epochs = 2; c.l2_reg = 1e-1; c.batch_size = 8; break;
        case TaskId::lamp5:
            c.epochs = 2; c.l2_reg = 1e-1; c.batch_size = 4; break;
        case TaskId::synthetic:
            break;  // desk defaults
    }
    return c;
}

struct TrainingExample {
    std::string prompt_text;
    std::string target_text;
    bool loss_on_target_only = true;
};

// ---------------------------------------------------------------------------
// Per-user training data. Task-aligned histories supervise (phi(x_u), y_u)
// pairs with retrieval restricted to strictly earlier items; non-aligned
// histories fall back to next-token prediction on the raw item text.
// ---------------------------------------------------------------------------
inline std::vector<TrainingExample> build_user_examples(const User& user, Setting setting,
                                                        int k, const TaskSpec& task,
                                                        size_t prompt_budget = 0) {
    if (user.history.empty()) throw ArgumentError("build_user_examples: empty history");
    std::vector<TrainingExample> out;

    if (!task.history_aligned) {
        for (const auto& it : user.history) {
            std::string text = item_text(it);
            if (text.empty()) continue;
            out.push_back({"", std::move(text), true});
        }
        return out;
    }

    PromptTemplate tmpl = task_template(task.task_id);
    PromptSetting ps{setting, k,
                     setting == Setting::P ? ProfileSource::builder : ProfileSource::none};
    std::string profile;
    if (setting == Setting::P)
        profile = user.profile_text.empty() ? build_profile(user.history, task) : user.profile_text;

    for (const auto& it : user.history) {
        if (!it.aligned()) continue;
        Query anchor{it.item_id, it.input_text, it.output_text, it.timestamp};
        RetrievalResult retrieved;
        if (setting != Setting::B && k > 0)
            retrieved = retrieve(it.input_text, user.history, k, it.timestamp);
        std::string prompt = construct_prompt(ps, anchor, &retrieved,
                                              setting == Setting::P ? &profile : nullptr, tmpl,
                                              prompt_budget);
        out.push_back({std::move(prompt), it.output_text, true});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Example encoding: [BOS] prompt target [EOS]; row i predicts token i+1 and
// the loss mask covers exactly the target-plus-EOS predictions (which is the
// whole sequence when the prompt is empty). Over-length sequences keep their
// tail.
// ---------------------------------------------------------------------------
struct EncodedExample {
    TokenSequence ids;
    std::vector<int> next;
    std::vector<uint8_t> mask;
};

inline EncodedExample encode_example(const TrainingExample& ex, size_t context_limit) {
    if (ex.target_text.empty()) throw ArgumentError("encode_example: empty target");
    TokenSequence prompt_ids = tokenize(ex.prompt_text);
    TokenSequence target_ids = tokenize(ex.target_text);

    EncodedExample e;
    e.ids.push_back(kBosId);
    e.ids.insert(e.ids.end(), prompt_ids.begin(), prompt_ids.end());
    e.ids.insert(e.ids.end(), target_ids.begin(), target_ids.end());
    e.ids.push_back(kEosId);

    size_t n = e.ids.size();
    size_t first_target = 1 + prompt_ids.size();  // index of first target token
    e.next.assign(n, kPadId);
    e.mask.assign(n, 0);
    for (size_t i = 0; i + 1 < n; ++i) {
        e.next[i] = e.ids[i + 1];
        bool target_pred = (i + 1) >= first_target;
        e.mask[i] = (target_pred || !ex.loss_on_target_only) ? 1 : 0;
    }

    if (n > context_limit) {
        size_t drop = n - context_limit;
        e.ids.erase(e.ids.begin(), e.ids.begin() + static_cast<ptrdiff_t>(drop));
        e.next.erase(e.next.begin(), e.next.begin() + static_cast<ptrdiff_t>(drop));
        e.mask.erase(e.mask.begin(), e.mask.begin() + static_cast<ptrdiff_t>(drop));
    }
    return e;
}

struct LossLogRow {
    std::string user_id;
    int epoch = 0;
    int step = 0;
    double loss = 0.0;
};
using LossLog = std::vector<LossLogRow>;

struct TrainRunResult {
    std::vector<double> epoch_mean_losses;
    int64_t steps = 0;
};

/// Shared optimization loop: AdamW on the adapter parameters only, example
/// order reshuffled each epoch from the run seed, global-norm clipping at 1.
inline TrainRunResult train_adapter_inplace(const BaseModel& base, Adapter& adapter,
                                            const std::vector<TrainingExample>& examples,
                                            const TrainConfig& cfg, LossLog* log = nullptr,
                                            const std::string& log_id = "") {
    cfg.validate();
    TrainRunResult result;
    if (cfg.epochs == 0) return result;
    if (examples.empty()) throw ArgumentError("train: no training examples");

    Optimizer optim({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.l2_reg, 1.0});
    for (const auto& [name, t] : adapter.parameters) optim.declare(name, t.numel());
    SinkFn sinks = [&](const std::string& name) { return optim.sink(name); };

    int n_virtual = 0;
    if (adapter.method == AdapterMethod::prompt_tuning)
        n_virtual = static_cast<int>(adapter.parameters.at(kPromptKey).rows());
    size_t context_limit = static_cast<size_t>(base.config.context_length - n_virtual);

    Rng order_rng(cfg.seed ^ 0x0fee1deadull);
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_loss = 0.0;
        size_t epoch_examples = 0;
        int step_in_epoch = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
            size_t batch_end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
            optim.zero_grad();
            double batch_loss = 0.0;
            for (size_t bi = pos; bi < batch_end; ++bi) {
                EncodedExample e = encode_example(examples[order[bi]], context_limit);
                ad::Graph g;
                ForwardResult r = forward_graph(base.config, base.params, &adapter, e.ids, g, sinks);
                std::vector<int> next(static_cast<size_t>(n_virtual), kPadId);
                next.insert(next.end(), e.next.begin(), e.next.end());
                std::vector<uint8_t> mask(static_cast<size_t>(n_virtual), 0);
                mask.insert(mask.end(), e.mask.begin(), e.mask.end());
                ad::NodeId loss = g.cross_entropy(r.logits, next, mask);
                g.backward(loss);
                batch_loss += g.val(loss)[0];
            }
            size_t batch_n = batch_end - pos;
            optim.scale_grads(1.0 / static_cast<double>(batch_n));
            optim.step(adapter.parameters);
            double mean_loss = batch_loss / static_cast<double>(batch_n);
            epoch_loss += batch_loss;
            epoch_examples += batch_n;
            ++step_in_epoch;
            if (log) log->push_back({log_id, epoch, step_in_epoch, mean_loss});
        }
        result.epoch_mean_losses.push_back(epoch_loss / static_cast<double>(epoch_examples));
    }
    result.steps = optim.steps_taken();
    adapter.trained_steps += result.steps;
    if (!params_all_finite(adapter.parameters))
        throw StateError("train: adapter parameters diverged to non-finite values");
    return result;
}

/// Stage two: one user's personal adapter against a frozen, setting-matched
/// base.
inline Adapter train_user_adapter(const BaseModel& base, const User& user, const TaskSpec& task,
                                  const TrainConfig& cfg, LossLog* log = nullptr) {
    cfg.validate();
    if (base.setting_tag != cfg.setting)
        throw ArgumentError(std::string("train_user_adapter: base is task-adapted for setting ") +
                            setting_name(base.setting_tag) + ", config wants " +
                            setting_name(cfg.setting));

    uint64_t user_seed = cfg.seed ^ fnv1a64_str(user.user_id);
    Adapter adapter;
    switch (cfg.method) {
        case AdapterMethod::lora: {
            LoraConfig lc;
            lc.rank = cfg.rank;
            lc.alpha = 2.0 * cfg.rank;
            lc.init_seed = user_seed;
            adapter = init_lora_adapter(base.config, lc, user.user_id, base.weights_digest);
            break;
        }
        case AdapterMethod::prompt_tuning: {
            PromptTuningConfig pc;
            pc.num_virtual_tokens = cfg.num_virtual_tokens;
            adapter = init_prompt_adapter(base.config, pc, user.user_id, base.weights_digest);
            break;
        }
        case AdapterMethod::ia3:
            adapter = init_ia3_adapter(base.config, Ia3Config{}, user.user_id, base.weights_digest);
            break;
    }
    adapter.setting = cfg.setting;
    if (cfg.epochs == 0) return adapter;

    int n_virtual = cfg.method == AdapterMethod::prompt_tuning ? cfg.num_virtual_tokens : 0;
    size_t prompt_budget = 0;
    if (base.config.context_length > n_virtual + 32)
        prompt_budget = static_cast<size_t>(base.config.context_length - n_virtual - 32);
    auto examples = build_user_examples(user, cfg.setting, cfg.k, task, prompt_budget);

    TrainConfig run_cfg = cfg;
    run_cfg.seed = user_seed;
    train_adapter_inplace(base, adapter, examples, run_cfg, log, user.user_id);
    return adapter;
}

/// Stage one: shared task adaptation. Trains a lora over every held-out
/// user's queries under the chosen setting, then merges it into the weights.
inline BaseModel train_task_base(const BaseModel& pretrained, const std::vector<User>& heldout,
                                 const TaskSpec& task, const TrainConfig& cfg,
                                 LossLog* log = nullptr) {
    cfg.validate();
    if (cfg.method != AdapterMethod::lora)
        throw ArgumentError("train_task_base: task adaptation uses lora");
    if (heldout.empty()) throw ArgumentError("train_task_base: empty held-out set");

    PromptTemplate tmpl = task_template(task.task_id);
    size_t prompt_budget = 0;
    if (pretrained.config.context_length > 32)
        prompt_budget = static_cast<size_t>(pretrained.config.context_length - 32);

    std::vector<TrainingExample> examples;
    for (const auto& user : heldout) {
        std::string profile;
        if (cfg.setting == Setting::P && !user.history.empty())
            profile = user.profile_text.empty() ? build_profile(user.history, task)
                                                : user.profile_text;
        for (const auto& q : user.queries) {
            if (q.gold_output.empty()) continue;
            RetrievalResult retrieved;
            if (cfg.setting != Setting::B && cfg.k > 0)
                retrieved = retrieve(q.input_text, user.history, cfg.k, q.timestamp);
            PromptSetting ps{cfg.setting, cfg.k,
                             cfg.setting == Setting::P ? ProfileSource::builder
                                                       : ProfileSource::none};
            std::string prompt =
                construct_prompt(ps, q, &retrieved,
                                 cfg.setting == Setting::P ? &profile : nullptr, tmpl,
                                 prompt_budget);
            examples.push_back({std::move(prompt), q.gold_output, true});
        }
    }

    LoraConfig lc;
    lc.rank = cfg.rank;
    lc.alpha = 2.0 * cfg.rank;
    lc.init_seed = cfg.seed ^ fnv1a64_str("base-task");
    Adapter adapter =
        init_lora_adapter(pretrained.config, lc, "base-task", pretrained.weights_digest);
    adapter.setting = cfg.setting;

    if (cfg.epochs > 0) {
        if (examples.empty())
            throw ArgumentError("train_task_base: held-out users have no supervised queries");
        train_adapter_inplace(pretrained, adapter, examples, cfg, log, "base-task");
    }

    PersonalModel pm = attach(pretrained, std::move(adapter));
    BaseModel adapted = merge(pm);
    adapted.setting_tag = cfg.setting;
    return adapted;
}

inline void write_loss_log_csv(const LossLog& log, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f << "user_id,epoch,step,loss\n";
    for (const auto& row : log)
        f << csv_field(row.user_id) << "," << row.epoch << "," << row.step << ","
          << format_metric(row.loss) << "\n";
    if (!f.good()) throw Error("write failed: " + path);
}

}  // namespace oppu
