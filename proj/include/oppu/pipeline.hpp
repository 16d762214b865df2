// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "oppu/checkpoint.hpp"
#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/evaluation.hpp"
#include "oppu/model.hpp"
#include "oppu/prompting.hpp"
#include "oppu/registry.hpp"
#include "oppu/training.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Declarative experiment configuration. One JSON file drives the whole
// corpus -> pretrain -> task-adapt -> per-user train -> evaluate pipeline.
// ---------------------------------------------------------------------------
struct PipelineConfig {
    TaskId task = TaskId::synthetic;
    std::string dataset;
    std::string out_dir;
    uint64_t seed = 42;
    int threads = 0;

    LMConfig model;
    std::vector<std::string> label_set;  // optional override (synthetic data)

    PretrainOptions pretrain;
    std::string pretrain_corpus;  // optional path; default derives from train users

    size_t heldout_test_count = 100;
    std::vector<Setting> base_settings = {Setting::B};
    TrainConfig task_adapt;
    TrainConfig user_train;
    std::vector<AdapterMethod> user_methods = {AdapterMethod::lora};

    std::vector<GridCell> grid;
    int max_new_tokens = 8;

    bool similarity_enabled = false;
    Setting similarity_setting = Setting::B;
    AdapterMethod similarity_method = AdapterMethod::lora;

    std::string canonical;  // normalized dump, content-addresses the stages
};

namespace detail {

inline TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& defaults) {
    TrainConfig c = defaults;
    c.rank = j.value("rank", c.rank);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("lr", c.learning_rate);
    c.l2_reg = j.value("l2_reg", c.l2_reg);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.k = j.value("k", c.k);
    c.num_virtual_tokens = j.value("num_virtual_tokens", c.num_virtual_tokens);
    return c;
}

inline GridCell grid_cell_from_json(const nlohmann::json& j) {
    GridCell c;
    if (!j.contains("name")) throw ConfigError("grid cell missing name");
    c.name = j.at("name").get<std::string>();
    c.setting = setting_from_name(j.value("setting", "B"));
    c.k = j.value("k", 0);
    c.personalized = j.value("personalized", false);
    if (c.personalized) c.method = method_from_name(j.value("method", "lora"));
    return c;
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        c.task = task_id_from_name(j.value("task", "synthetic"));
        c.dataset = j.value("dataset", "");
        c.out_dir = j.value("out_dir", "");
        c.seed = j.value("seed", static_cast<uint64_t>(42));
        c.threads = j.value("threads", 0);
        if (j.contains("label_set")) c.label_set = j.at("label_set").get<std::vector<std::string>>();

        if (j.contains("model")) {
            const auto& m = j.at("model");
            c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
            c.model.num_layers = m.value("num_layers", c.model.num_layers);
            c.model.num_heads = m.value("num_heads", c.model.num_heads);
            c.model.context_length = m.value("context_length", c.model.context_length);
        }
        c.model.seed = c.seed;

        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            c.pretrain.steps = p.value("steps", c.pretrain.steps);
            c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
            c.pretrain.window = p.value("window", c.pretrain.window);
            c.pretrain.lr = p.value("lr", c.pretrain.lr);
            c.pretrain_corpus = p.value("corpus", "");
        }

        c.heldout_test_count = j.value("heldout_test_count", c.heldout_test_count);
        if (j.contains("base_settings")) {
            c.base_settings.clear();
            for (const auto& s : j.at("base_settings"))
                c.base_settings.push_back(setting_from_name(s.get<std::string>()));
        }
        TrainConfig adapt_defaults;
        adapt_defaults.epochs = 2;
        adapt_defaults.learning_rate = 5e-3;
        adapt_defaults.batch_size = 8;
        c.task_adapt = detail::train_config_from_json(j.value("task_adapt", nlohmann::json::object()),
                                                      adapt_defaults);
        c.user_train = detail::train_config_from_json(j.value("user_train", nlohmann::json::object()),
                                                      TrainConfig{});
        if (j.contains("user_train") && j.at("user_train").contains("methods")) {
            c.user_methods.clear();
            for (const auto& m : j.at("user_train").at("methods"))
                c.user_methods.push_back(method_from_name(m.get<std::string>()));
        }

        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            c.max_new_tokens = e.value("max_new_tokens", c.max_new_tokens);
            for (const auto& cell : e.value("grid", nlohmann::json::array()))
                c.grid.push_back(detail::grid_cell_from_json(cell));
        }

        if (j.contains("similarity")) {
            const auto& s = j.at("similarity");
            c.similarity_enabled = s.value("enabled", true);
            c.similarity_setting = setting_from_name(s.value("setting", "B"));
            c.similarity_method = method_from_name(s.value("method", "lora"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.canonical = j.dump();
    return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config file not found: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return pipeline_config_from_json(j);
}

/// Fail-fast validation: everything checkable before any compute.
inline void validate_pipeline_config(const PipelineConfig& c) {
    if (c.dataset.empty()) throw ConfigError("config: dataset path is required");
    if (!std::filesystem::exists(c.dataset)) throw ConfigError("config: dataset not found: " + c.dataset);
    if (c.out_dir.empty()) throw ConfigError("config: out_dir is required");
    c.model.validate();
    c.task_adapt.validate();
    c.user_train.validate();
    if (c.base_settings.empty()) throw ConfigError("config: base_settings must not be empty");
    if (c.user_methods.empty()) throw ConfigError("config: user_train.methods must not be empty");
    auto has_setting = [&](Setting s) {
        return std::find(c.base_settings.begin(), c.base_settings.end(), s) != c.base_settings.end();
    };
    auto has_method = [&](AdapterMethod m) {
        return std::find(c.user_methods.begin(), c.user_methods.end(), m) != c.user_methods.end();
    };
    for (const auto& cell : c.grid) {
        if (!has_setting(cell.setting))
            throw ConfigError("config: grid cell '" + cell.name + "' uses setting " +
                              setting_name(cell.setting) + " with no base model");
        if (cell.personalized && !has_method(cell.method))
            throw ConfigError("config: grid cell '" + cell.name + "' uses untrained method " +
                              method_name(cell.method));
        if (cell.k < 0) throw ConfigError("config: grid cell '" + cell.name + "' has negative k");
    }
    if (c.similarity_enabled) {
        if (!has_setting(c.similarity_setting) || !has_method(c.similarity_method))
            throw ConfigError("config: similarity references an untrained setting/method");
    }
}

// ---------------------------------------------------------------------------
// Stage plumbing: artifacts are content-addressed by a key derived from the
// config, the seed and the upstream stage keys. A stage whose artifact and
// stamp both match is skipped; partial outputs carry a .partial suffix until
// renamed into place.
// ---------------------------------------------------------------------------
namespace detail {

inline std::string file_digest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw NotFoundError("cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
        h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    return hex64(h);
}

inline std::string stage_key(std::initializer_list<std::string> parts) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : parts) {
        h = fnv1a64_str(p, h);
        h = fnv1a64_str("|", h);
    }
    return hex64(h);
}

inline bool stamp_matches(const std::string& stamp_path, const std::string& key) {
    std::ifstream f(stamp_path);
    if (!f) return false;
    std::string stored;
    std::getline(f, stored);
    return stored == key;
}

inline void write_stamp(const std::string& stamp_path, const std::string& key) {
    std::ofstream f(stamp_path, std::ios::trunc);
    if (!f) throw Error("cannot write stamp: " + stamp_path);
    f << key << "\n";
}

inline void rename_into_place(const std::string& partial, const std::string& final_path) {
    std::filesystem::rename(partial, final_path);
}

}  // namespace detail

/// Pretraining corpus assembled from the base-training users' raw data.
inline std::string corpus_from_users(const std::vector<User>& users, const TaskSpec& task) {
    PromptTemplate tmpl = task_template(task.task_id);
    std::string out;
    for (const auto& u : users) {
        for (const auto& it : u.history) {
            if (task.history_aligned && it.aligned()) {
                Query q{it.item_id, it.input_text, it.output_text, it.timestamp};
                out += render_instruction(tmpl, q) + " " + it.output_text + "\n";
            } else {
                out += item_text(it) + "\n";
            }
        }
        for (const auto& q : u.queries) {
            if (q.gold_output.empty()) continue;
            out += render_instruction(tmpl, q) + " " + q.gold_output + "\n";
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// run_pipeline: pretrain -> task-adapt (per setting) -> per-user training
// (bounded parallel) -> evaluation grid -> reports. Each stage is resumable.
// ---------------------------------------------------------------------------
inline void run_pipeline(const PipelineConfig& cfg, std::ostream& log = std::cout) {
    namespace fs = std::filesystem;
    validate_pipeline_config(cfg);

    TaskSpec task = task_spec(cfg.task);
    if (!cfg.label_set.empty()) task.label_set = cfg.label_set;
    task.validate();

    fs::create_directories(cfg.out_dir);
    fs::create_directories(fs::path(cfg.out_dir) / "reports");
    auto out_path = [&](const std::string& name) {
        return (fs::path(cfg.out_dir) / name).string();
    };

    std::string dataset_digest = detail::file_digest(cfg.dataset);
    std::string config_digest = hex64(fnv1a64_str(cfg.canonical));

    // ----- load corpus ------------------------------------------------------
    std::vector<User> users = load_dataset(cfg.dataset, task);
    if (users.empty()) throw Error("stage load: dataset has no users");
    if (cfg.heldout_test_count > users.size())
        throw ConfigError("config: heldout_test_count exceeds user count");
    auto [train_users, test_users] = split_heldout(users, cfg.heldout_test_count);

    auto run_stage = [&](const std::string& name, const std::string& key,
                         const std::vector<std::string>& artifacts, auto&& body) {
        bool have_all = true;
        for (const auto& a : artifacts)
            if (!fs::exists(a)) have_all = false;
        std::string stamp = artifacts.empty() ? out_path(name + ".stamp") : artifacts[0] + ".stamp";
        if (have_all && detail::stamp_matches(stamp, key)) {
            log << "[pipeline] stage " << name << ": up to date\n";
            return;
        }
        log << "[pipeline] stage " << name << ": running\n";
        try {
            body();
        } catch (const std::exception& e) {
            throw Error("stage " + name + ": " + e.what());
        }
        detail::write_stamp(stamp, key);
    };

    // ----- stage: pretrain --------------------------------------------------
    std::string pretrain_key = detail::stage_key({"pretrain", config_digest, dataset_digest});
    std::string pretrained_path = out_path("base_pretrained.oppu");
    run_stage("pretrain", pretrain_key, {pretrained_path}, [&] {
        std::string corpus;
        if (!cfg.pretrain_corpus.empty()) {
            corpus = detail::read_file(cfg.pretrain_corpus);
        } else {
            corpus = corpus_from_users(train_users.empty() ? users : train_users, task);
        }
        PretrainResult r = pretrain_base(cfg.model, corpus, cfg.pretrain);
        save_base(r.model, pretrained_path + ".partial");
        detail::rename_into_place(pretrained_path + ".partial", pretrained_path);
    });
    BaseModel pretrained = load_base(pretrained_path);

    // ----- stage: task adaptation per setting -------------------------------
    std::map<Setting, BaseModel> bases;
    for (Setting s : cfg.base_settings) {
        std::string base_path = out_path(std::string("base_") + setting_name(s) + ".oppu");
        std::string key = detail::stage_key({"adapt", config_digest, pretrain_key, setting_name(s)});
        run_stage(std::string("adapt-") + setting_name(s), key, {base_path}, [&] {
            TrainConfig ac = cfg.task_adapt;
            ac.setting = s;
            ac.method = AdapterMethod::lora;
            ac.seed = cfg.seed;
            LossLog adapt_log;
            BaseModel adapted = train_task_base(pretrained, train_users, task, ac, &adapt_log);
            save_base(adapted, base_path + ".partial");
            detail::rename_into_place(base_path + ".partial", base_path);
        });
        bases.emplace(s, load_base(base_path));
    }

    // ----- stage: per-user adapters -----------------------------------------
    std::string adapters_root = out_path("adapters");
    std::string users_key = detail::stage_key({"user-train", config_digest, pretrain_key});
    std::string loss_path = out_path("reports/train_loss.csv");
    run_stage("user-train", users_key, {loss_path}, [&] {
        Registry registry = Registry::open(adapters_root);
        struct Job {
            Setting setting;
            AdapterMethod method;
            size_t user_index;
        };
        std::vector<Job> jobs;
        for (Setting s : cfg.base_settings)
            for (AdapterMethod m : cfg.user_methods)
                for (size_t ui = 0; ui < test_users.size(); ++ui) jobs.push_back({s, m, ui});

        std::vector<LossLog> logs(jobs.size());
        std::vector<Adapter> results(jobs.size());
        parallel_for(jobs.size(), cfg.threads, [&](size_t ji) {
            const Job& job = jobs[ji];
            TrainConfig uc = cfg.user_train;
            uc.setting = job.setting;
            uc.method = job.method;
            uc.seed = cfg.seed;
            results[ji] =
                train_user_adapter(bases.at(job.setting), test_users[job.user_index], task, uc,
                                   &logs[ji]);
        });
        std::mutex reg_mu;
        for (size_t ji = 0; ji < jobs.size(); ++ji) {
            std::lock_guard<std::mutex> lock(reg_mu);
            registry.register_adapter(test_users[jobs[ji].user_index].user_id, results[ji],
                                      /*overwrite=*/true);
        }
        LossLog merged;
        for (const auto& l : logs) merged.insert(merged.end(), l.begin(), l.end());
        write_loss_log_csv(merged, loss_path + ".partial");
        detail::rename_into_place(loss_path + ".partial", loss_path);
    });

    // ----- stage: evaluation grid -------------------------------------------
    std::string metrics_path = out_path("reports/metrics.csv");
    if (!cfg.grid.empty()) {
        std::string eval_key = detail::stage_key({"eval", config_digest, users_key});
        run_stage("eval", eval_key, {metrics_path}, [&] {
            Registry registry = Registry::open(adapters_root);
            std::map<std::string, Adapter> cache;
            AdapterProvider provider = [&](const std::string& uid, Setting s,
                                           AdapterMethod m) -> const Adapter* {
                std::string key = uid + "/" + setting_name(s) + "/" + method_name(m);
                auto it = cache.find(key);
                if (it == cache.end()) {
                    if (!registry.contains(uid, s, m)) return nullptr;
                    it = cache.emplace(key, registry.fetch(uid, s, m)).first;
                }
                return &it->second;
            };
            EvalOptions opt;
            opt.max_new_tokens = cfg.max_new_tokens;
            opt.adapters = provider;
            auto reports = run_grid(bases, test_users, task, cfg.grid, opt);
            write_metrics_csv(reports, metrics_path + ".partial");
            for (const auto& r : reports)
                write_audit_csv(r, out_path("reports/audit_" + r.cell.name + ".csv"));
            detail::rename_into_place(metrics_path + ".partial", metrics_path);
        });
    }

    // ----- stage: adapter similarity ----------------------------------------
    if (cfg.similarity_enabled) {
        std::string sim_path = out_path("reports/similarity.csv");
        std::string sim_key = detail::stage_key({"similarity", config_digest, users_key});
        run_stage("similarity", sim_key, {sim_path}, [&] {
            Registry registry = Registry::open(adapters_root);
            std::vector<std::string> ids;
            std::map<std::string, Adapter> loaded;
            for (const auto& u : test_users) {
                ids.push_back(u.user_id);
                loaded.emplace(u.user_id,
                               registry.fetch(u.user_id, cfg.similarity_setting, cfg.similarity_method));
            }
            DMat m = similarity_matrix(ids, [&](const std::string& id) -> const Adapter* {
                auto it = loaded.find(id);
                return it == loaded.end() ? nullptr : &it->second;
            });
            write_similarity_csv(ids, m, sim_path + ".partial");
            detail::rename_into_place(sim_path + ".partial", sim_path);
        });
    }
    log << "[pipeline] done\n";
}

}  // namespace oppu
