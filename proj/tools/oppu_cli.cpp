// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: per-user adapter training and evaluation on top of
// a shared frozen base model, driven by one JSON config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "oppu/oppu.hpp"

namespace fs = std::filesystem;

namespace {

struct CliState {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = -1;
};

oppu::PipelineConfig load_config(const CliState& st) {
    if (st.config_path.empty())
        throw oppu::ConfigError("--config is required for this command");
    oppu::PipelineConfig cfg = oppu::load_pipeline_config(st.config_path);
    if (st.seed_set) {
        cfg.seed = st.seed;
        cfg.model.seed = st.seed;
    }
    if (st.threads >= 0) cfg.threads = st.threads;
    return cfg;
}

struct LoadedData {
    oppu::TaskSpec task;
    std::vector<oppu::User> users;
    std::vector<oppu::User> train_users;
    std::vector<oppu::User> test_users;
};

LoadedData load_data(const oppu::PipelineConfig& cfg) {
    LoadedData d;
    d.task = oppu::task_spec(cfg.task);
    if (!cfg.label_set.empty()) d.task.label_set = cfg.label_set;
    d.task.validate();
    d.users = oppu::load_dataset(cfg.dataset, d.task);
    if (cfg.heldout_test_count > d.users.size())
        throw oppu::ConfigError("heldout_test_count exceeds user count");
    auto split = oppu::split_heldout(d.users, cfg.heldout_test_count);
    d.train_users = std::move(split.first);
    d.test_users = std::move(split.second);
    return d;
}

std::string base_path(const oppu::PipelineConfig& cfg, oppu::Setting s) {
    return (fs::path(cfg.out_dir) / (std::string("base_") + oppu::setting_name(s) + ".oppu"))
        .string();
}

std::string pretrained_path(const oppu::PipelineConfig& cfg) {
    return (fs::path(cfg.out_dir) / "base_pretrained.oppu").string();
}

oppu::BaseModel require_base(const oppu::PipelineConfig& cfg, oppu::Setting s) {
    std::string p = base_path(cfg, s);
    if (!fs::exists(p))
        throw oppu::NotFoundError(std::string("no task-adapted base for setting ") +
                                  oppu::setting_name(s) + " (run: oppu adapt-base --setting " +
                                  oppu::setting_name(s) + ")");
    return oppu::load_base(p);
}

const oppu::User& require_user(const LoadedData& d, const std::string& id) {
    for (const auto& u : d.users)
        if (u.user_id == id) return u;
    throw oppu::NotFoundError("unknown user: " + id);
}

int cmd_pretrain(const CliState& st) {
    auto cfg = load_config(st);
    oppu::validate_pipeline_config(cfg);
    auto d = load_data(cfg);
    fs::create_directories(cfg.out_dir);
    std::string corpus;
    if (!cfg.pretrain_corpus.empty()) {
        corpus = oppu::detail::read_file(cfg.pretrain_corpus);
    } else {
        corpus = oppu::corpus_from_users(d.train_users.empty() ? d.users : d.train_users, d.task);
    }
    auto r = oppu::pretrain_base(cfg.model, corpus, cfg.pretrain);
    oppu::save_base(r.model, pretrained_path(cfg));
    std::cout << "pretrained base " << r.model.weights_digest << " (" << r.model.num_params()
              << " params, " << cfg.pretrain.steps << " steps)\n";
    if (!r.step_losses.empty())
        std::cout << "loss " << oppu::format_metric(r.step_losses.front(), 4) << " -> "
                  << oppu::format_metric(r.step_losses.back(), 4) << "\n";
    return 0;
}

int cmd_adapt_base(const CliState& st, const std::string& setting_str) {
    auto cfg = load_config(st);
    oppu::validate_pipeline_config(cfg);
    auto d = load_data(cfg);
    oppu::Setting s = oppu::setting_from_name(setting_str);
    if (!fs::exists(pretrained_path(cfg)))
        throw oppu::NotFoundError("no pretrained base (run: oppu pretrain)");
    oppu::BaseModel pretrained = oppu::load_base(pretrained_path(cfg));
    oppu::TrainConfig ac = cfg.task_adapt;
    ac.setting = s;
    ac.method = oppu::AdapterMethod::lora;
    ac.seed = cfg.seed;
    oppu::BaseModel adapted = oppu::train_task_base(pretrained, d.train_users, d.task, ac);
    oppu::save_base(adapted, base_path(cfg, s));
    std::cout << "task-adapted base (" << oppu::setting_name(s) << ") "
              << adapted.weights_digest << "\n";
    return 0;
}

int train_one_user(const oppu::PipelineConfig& cfg, const LoadedData& d, oppu::Registry& registry,
                   const oppu::BaseModel& base, const oppu::User& user, oppu::Setting s,
                   oppu::AdapterMethod m, bool overwrite, oppu::LossLog* log) {
    oppu::TrainConfig uc = cfg.user_train;
    uc.setting = s;
    uc.method = m;
    uc.seed = cfg.seed;
    oppu::Adapter a = oppu::train_user_adapter(base, user, d.task, uc, log);
    registry.register_adapter(user.user_id, a, overwrite);
    std::cout << "trained " << user.user_id << " [" << oppu::setting_name(s) << "/"
              << oppu::method_name(m) << "] steps=" << a.trained_steps << " fraction="
              << oppu::format_metric(oppu::trainable_fraction(a, base.num_params()), 6) << "\n";
    return 0;
}

int cmd_train_user(const CliState& st, const std::string& user_id, const std::string& setting_str,
                   const std::string& method_str, bool overwrite) {
    auto cfg = load_config(st);
    oppu::validate_pipeline_config(cfg);
    auto d = load_data(cfg);
    oppu::Setting s = oppu::setting_from_name(setting_str);
    oppu::AdapterMethod m = oppu::method_from_name(method_str);
    oppu::BaseModel base = require_base(cfg, s);
    auto registry = oppu::Registry::open((fs::path(cfg.out_dir) / "adapters").string());
    return train_one_user(cfg, d, registry, base, require_user(d, user_id), s, m, overwrite,
                          nullptr);
}

int cmd_train_all(const CliState& st, const std::string& setting_str,
                  const std::string& method_str, bool overwrite) {
    auto cfg = load_config(st);
    oppu::validate_pipeline_config(cfg);
    auto d = load_data(cfg);
    std::vector<oppu::Setting> settings = cfg.base_settings;
    if (!setting_str.empty()) settings = {oppu::setting_from_name(setting_str)};
    std::vector<oppu::AdapterMethod> methods = cfg.user_methods;
    if (!method_str.empty()) methods = {oppu::method_from_name(method_str)};
    auto registry = oppu::Registry::open((fs::path(cfg.out_dir) / "adapters").string());
    for (oppu::Setting s : settings) {
        oppu::BaseModel base = require_base(cfg, s);
        for (oppu::AdapterMethod m : methods)
            for (const auto& u : d.test_users)
                train_one_user(cfg, d, registry, base, u, s, m, overwrite, nullptr);
    }
    return 0;
}

int cmd_eval(const CliState& st, const std::string& grid_path) {
    auto cfg = load_config(st);
    if (!grid_path.empty()) {
        std::ifstream f(grid_path);
        if (!f) throw oppu::ConfigError("grid file not found: " + grid_path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception& e) {
            throw oppu::ConfigError(std::string("grid parse error: ") + e.what());
        }
        cfg.grid.clear();
        for (const auto& cell : j) cfg.grid.push_back(oppu::detail::grid_cell_from_json(cell));
    }
    if (cfg.grid.empty()) throw oppu::ConfigError("eval: no grid cells configured");
    oppu::validate_pipeline_config(cfg);
    auto d = load_data(cfg);

    std::map<oppu::Setting, oppu::BaseModel> bases;
    for (const auto& cell : cfg.grid)
        if (!bases.count(cell.setting)) bases.emplace(cell.setting, require_base(cfg, cell.setting));

    auto registry = oppu::Registry::open((fs::path(cfg.out_dir) / "adapters").string());
    std::map<std::string, oppu::Adapter> cache;
    oppu::EvalOptions opt;
    opt.max_new_tokens = cfg.max_new_tokens;
    opt.adapters = [&](const std::string& uid, oppu::Setting s,
                       oppu::AdapterMethod m) -> const oppu::Adapter* {
        std::string key = uid + "/" + oppu::setting_name(s) + "/" + oppu::method_name(m);
        auto it = cache.find(key);
        if (it == cache.end()) {
            if (!registry.contains(uid, s, m)) return nullptr;
            it = cache.emplace(key, registry.fetch(uid, s, m)).first;
        }
        return &it->second;
    };
    auto reports = oppu::run_grid(bases, d.test_users, d.task, cfg.grid, opt);
    fs::create_directories(fs::path(cfg.out_dir) / "reports");
    std::string metrics = (fs::path(cfg.out_dir) / "reports" / "metrics.csv").string();
    oppu::write_metrics_csv(reports, metrics);
    for (const auto& r : reports) {
        oppu::write_audit_csv(
            r, (fs::path(cfg.out_dir) / "reports" / ("audit_" + r.cell.name + ".csv")).string());
        std::cout << r.cell.name << ":";
        for (const auto& [metric, value] : r.metrics)
            std::cout << " " << metric << "=" << oppu::format_metric(value, 4);
        std::cout << "\n";
    }
    std::cout << "wrote " << metrics << "\n";
    return 0;
}

int cmd_retrieve(const CliState& st, const std::string& user_id, const std::string& query, int k,
                 int64_t before) {
    auto cfg = load_config(st);
    auto d = load_data(cfg);
    const oppu::User& user = require_user(d, user_id);
    int64_t bound = before >= 0 ? before : std::numeric_limits<int64_t>::max();
    auto result = oppu::retrieve(query, user.history, k, bound);
    for (const auto& si : result.items)
        std::cout << si.item.item_id << "\t" << oppu::format_metric(si.score, 4) << "\t"
                  << si.item.timestamp << "\t" << oppu::item_text(si.item) << "\n";
    return 0;
}

int cmd_profile(const CliState& st, const std::string& user_id) {
    auto cfg = load_config(st);
    auto d = load_data(cfg);
    const oppu::User& user = require_user(d, user_id);
    std::string profile = user.profile_text.empty() ? oppu::build_profile(user.history, d.task)
                                                    : user.profile_text;
    std::cout << profile << "\n";
    return 0;
}

int cmd_similarity(const CliState& st, const std::string& out_file, const std::string& setting_str,
                   const std::string& method_str) {
    auto cfg = load_config(st);
    oppu::Setting s = setting_str.empty() ? cfg.similarity_setting
                                          : oppu::setting_from_name(setting_str);
    oppu::AdapterMethod m = method_str.empty() ? cfg.similarity_method
                                               : oppu::method_from_name(method_str);
    auto registry = oppu::Registry::open((fs::path(cfg.out_dir) / "adapters").string());
    std::vector<std::string> ids = registry.user_ids(s, m);
    if (ids.empty())
        throw oppu::NotFoundError(std::string("no adapters registered for ") +
                                  oppu::setting_name(s) + "/" + oppu::method_name(m));
    std::map<std::string, oppu::Adapter> loaded;
    for (const auto& id : ids) loaded.emplace(id, registry.fetch(id, s, m));
    oppu::DMat matrix = oppu::similarity_matrix(ids, [&](const std::string& id) {
        auto it = loaded.find(id);
        return it == loaded.end() ? nullptr : &it->second;
    });
    oppu::write_similarity_csv(ids, matrix, out_file);
    std::cout << "wrote " << out_file << " (" << ids.size() << " adapters)\n";
    return 0;
}

int cmd_run(const CliState& st, const std::string& config_path) {
    CliState local = st;
    if (!config_path.empty()) local.config_path = config_path;
    auto cfg = load_config(local);
    oppu::run_pipeline(cfg);
    return 0;
}

int cmd_make_synthetic(const std::string& kind, const std::string& out_file, int users, int items,
                       int queries, int signals, int labels, uint64_t seed) {
    oppu::SyntheticSpec spec;
    spec.items_per_user = items;
    spec.queries_per_user = queries;
    spec.seed = seed;
    spec.signals = oppu::signal_pool(static_cast<size_t>(signals));
    spec.labels.clear();
    for (int i = 0; i < labels; ++i) spec.labels.push_back(std::string(1, static_cast<char>('A' + i)));

    std::vector<oppu::User> all;
    if (kind == "swap") {
        auto pair = oppu::make_swap_pair(spec);
        all.insert(all.end(), pair.begin(), pair.end());
        auto held = oppu::make_heldout_users(users, spec);
        all.insert(all.end(), held.begin(), held.end());
    } else if (kind == "shift") {
        auto shift = oppu::make_shift_users(2, spec);
        all.insert(all.end(), shift.begin(), shift.end());
        auto held = oppu::make_heldout_users(users, spec);
        all.insert(all.end(), held.begin(), held.end());
    } else if (kind == "mixed") {
        auto held = oppu::make_heldout_users(users + 2, spec);
        all.insert(all.end(), held.begin(), held.end());
    } else {
        throw oppu::ConfigError("make-synthetic: kind must be swap, shift or mixed");
    }
    // held-out users get shorter histories so split_heldout picks the targets
    for (auto& u : all)
        if (u.user_id.rfind("held-", 0) == 0 && u.history.size() > 8)
            u.history.resize(u.history.size() - 8);
    oppu::save_dataset(all, out_file);
    std::cout << "wrote " << out_file << " (" << all.size() << " users, labels:";
    for (const auto& l : spec.labels) std::cout << " " << l;
    std::cout << ")\n";
    return 0;
}

int cmd_templates(const std::string& out_dir) {
    fs::create_directories(out_dir);
    oppu::write_template_files(out_dir);
    std::cout << "wrote task templates to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one personal adapter per user on a shared frozen base model"};
    app.require_subcommand(1);

    CliState st;
    app.add_option("--config", st.config_path, "experiment config (JSON)");
    auto* seed_opt = app.add_option("--seed", st.seed, "override the config seed");
    app.add_option("--threads", st.threads, "parallel training bound (0 = all cores)");

    auto* sc_pretrain = app.add_subcommand("pretrain", "train the shared base LM from scratch");

    std::string setting_str = "B", method_str = "lora", user_id, grid_path, query, out_file,
                run_config, kind = "swap";
    bool overwrite = false;
    int k = 1, users = 4, items = 60, queries = 12, signals = 2, labels = 2;
    int64_t before = -1;
    uint64_t synth_seed = 7;

    auto* sc_adapt = app.add_subcommand("adapt-base", "task-adapt the base for one setting");
    sc_adapt->add_option("--setting", setting_str, "B, R or P")->required();

    auto* sc_train = app.add_subcommand("train-user", "train one user's personal adapter");
    sc_train->add_option("--user", user_id)->required();
    sc_train->add_option("--setting", setting_str, "B, R or P")->required();
    sc_train->add_option("--method", method_str, "lora, prompt or ia3")->required();
    sc_train->add_flag("--overwrite", overwrite, "replace an existing adapter");

    std::string all_setting, all_method;
    auto* sc_train_all = app.add_subcommand("train-all", "train adapters for every test user");
    sc_train_all->add_option("--setting", all_setting, "restrict to one setting");
    sc_train_all->add_option("--method", all_method, "restrict to one method");
    sc_train_all->add_flag("--overwrite", overwrite, "replace existing adapters");

    auto* sc_eval = app.add_subcommand("eval", "run the evaluation grid");
    sc_eval->add_option("--grid", grid_path, "grid cells (JSON array); default from config");

    auto* sc_retrieve = app.add_subcommand("retrieve", "debug: BM25 over one user's history");
    sc_retrieve->add_option("--user", user_id)->required();
    sc_retrieve->add_option("--query", query)->required();
    sc_retrieve->add_option("--k", k)->required();
    sc_retrieve->add_option("--before", before, "timestamp bound (default: no bound)");

    auto* sc_profile = app.add_subcommand("profile", "print a user's profile text");
    sc_profile->add_option("--user", user_id)->required();

    auto* sc_sim = app.add_subcommand("similarity", "pairwise adapter similarity matrix");
    sc_sim->add_option("--out", out_file)->required();
    sc_sim->add_option("--setting", all_setting, "default from config");
    sc_sim->add_option("--method", all_method, "default from config");

    auto* sc_run = app.add_subcommand("run", "run the full pipeline from a config");
    sc_run->add_option("--config", run_config, "experiment config (JSON)");

    auto* sc_synth = app.add_subcommand("make-synthetic", "generate a synthetic dataset");
    sc_synth->add_option("--kind", kind, "swap, shift or mixed");
    sc_synth->add_option("--out", out_file)->required();
    sc_synth->add_option("--users", users, "held-out user count");
    sc_synth->add_option("--items", items, "history items per user");
    sc_synth->add_option("--queries", queries, "queries per user");
    sc_synth->add_option("--signals", signals, "distinct signal words");
    sc_synth->add_option("--labels", labels, "distinct labels");
    sc_synth->add_option("--synth-seed", synth_seed, "dataset seed");

    std::string templates_dir;
    auto* sc_templates = app.add_subcommand("templates", "write task template data files");
    sc_templates->add_option("--out", templates_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        st.seed_set = seed_opt->count() > 0;
        if (sc_pretrain->parsed()) return cmd_pretrain(st);
        if (sc_adapt->parsed()) return cmd_adapt_base(st, setting_str);
        if (sc_train->parsed()) return cmd_train_user(st, user_id, setting_str, method_str, overwrite);
        if (sc_train_all->parsed()) return cmd_train_all(st, all_setting, all_method, overwrite);
        if (sc_eval->parsed()) return cmd_eval(st, grid_path);
        if (sc_retrieve->parsed()) return cmd_retrieve(st, user_id, query, k, before);
        if (sc_profile->parsed()) return cmd_profile(st, user_id);
        if (sc_sim->parsed()) return cmd_similarity(st, out_file, all_setting, all_method);
        if (sc_run->parsed()) return cmd_run(st, run_config);
        if (sc_synth->parsed())
            return cmd_make_synthetic(kind, out_file, users, items, queries, signals, labels,
                                      synth_seed);
        if (sc_templates->parsed()) return cmd_templates(templates_dir);
        return 1;
    } catch (const oppu::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const oppu::ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const oppu::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const oppu::NotFoundError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const oppu::ConflictError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
}
