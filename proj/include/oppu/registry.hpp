// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "oppu/adapters.hpp"
#include "oppu/checkpoint.hpp"
#include "oppu/errors.hpp"
#include "oppu/personal.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Flat-file adapter registry: one directory per setting and method, one
// portable file per user. Writes go through a temp file plus rename, so a
// crash mid-register never leaves a corrupt indexed entry.
// ---------------------------------------------------------------------------
class Registry {
public:
    struct Entry {
        std::string user_id;
        Setting setting = Setting::B;
        AdapterMethod method = AdapterMethod::lora;
        std::string path;
        std::string base_digest;
        int64_t trained_steps = 0;
    };

    /// Opens (creating directories as needed) and validates every indexed
    /// file's checksum.
    static Registry open(const std::string& root) {
        namespace fs = std::filesystem;
        Registry reg;
        reg.root_ = root;
        fs::create_directories(root);
        for (Setting s : {Setting::B, Setting::R, Setting::P}) {
            for (AdapterMethod m :
                 {AdapterMethod::lora, AdapterMethod::prompt_tuning, AdapterMethod::ia3}) {
                fs::path dir = fs::path(root) / setting_name(s) / method_name(m);
                if (!fs::exists(dir)) continue;
                std::vector<fs::path> files;
                for (const auto& e : fs::directory_iterator(dir)) {
                    if (!e.is_regular_file()) continue;
                    std::string name = e.path().filename().string();
                    if (name.empty() || name[0] == '.') continue;  // temp leftovers
                    if (e.path().extension() != ".oppu") continue;
                    files.push_back(e.path());
                }
                std::sort(files.begin(), files.end());
                for (const auto& p : files) {
                    Adapter a = load_adapter(p.string());  // integrity-checked
                    Entry entry{a.owner, s, m, p.string(), a.base_digest, a.trained_steps};
                    std::string stem = p.stem().string();
                    if (a.owner != stem)
                        throw IntegrityError("registry: file " + p.string() + " is owned by '" +
                                             a.owner + "'");
                    reg.index_[key(entry.user_id, s, m)] = std::move(entry);
                }
            }
        }
        return reg;
    }

    const std::string& root() const { return root_; }

    /// Atomic write: temp file, integrity re-read, rename. At most one
    /// adapter per (user, setting, method); pass overwrite to replace.
    void register_adapter(const std::string& user_id, const Adapter& adapter,
                          bool overwrite = false) {
        namespace fs = std::filesystem;
        validate_id(user_id);
        if (adapter.owner != user_id)
            throw ArgumentError("register: adapter owner '" + adapter.owner +
                                "' does not match user " + user_id);
        fs::path dir = fs::path(root_) / setting_name(adapter.setting) / method_name(adapter.method);
        fs::create_directories(dir);
        fs::path final_path = dir / (user_id + ".oppu");
        std::string k = key(user_id, adapter.setting, adapter.method);
        if (!overwrite && (index_.count(k) || fs::exists(final_path)))
            throw ConflictError("register: adapter already exists for " + user_id + "/" +
                                setting_name(adapter.setting) + "/" + method_name(adapter.method) +
                                " (use overwrite)");

        fs::path tmp = dir / ("." + user_id + ".tmp");
        save_adapter(adapter, tmp.string());
        load_adapter(tmp.string());  // verify what landed on disk
        fs::rename(tmp, final_path);
        index_[k] = Entry{user_id, adapter.setting, adapter.method, final_path.string(),
                          adapter.base_digest, adapter.trained_steps};
    }

    bool contains(const std::string& user_id, Setting s, AdapterMethod m) const {
        return index_.count(key(user_id, s, m)) > 0;
    }

    Adapter fetch(const std::string& user_id, Setting s, AdapterMethod m) const {
        auto it = index_.find(key(user_id, s, m));
        if (it == index_.end())
            throw NotFoundError("registry: no adapter for " + user_id + "/" + setting_name(s) +
                                "/" + method_name(m));
        return load_adapter(it->second.path);
    }

    /// Loads and attaches; the base must digest-match the stored adapter.
    PersonalModel fetch_personal_model(const BaseModel& base, const std::string& user_id,
                                       Setting s, AdapterMethod m) const {
        return attach(base, fetch(user_id, s, m));
    }

    void remove(const std::string& user_id, Setting s, AdapterMethod m) {
        auto it = index_.find(key(user_id, s, m));
        if (it == index_.end())
            throw NotFoundError("registry: no adapter for " + user_id + "/" + setting_name(s) +
                                "/" + method_name(m));
        std::filesystem::remove(it->second.path);
        index_.erase(it);
    }

    std::vector<Entry> entries() const {
        std::vector<Entry> out;
        out.reserve(index_.size());
        for (const auto& [k, e] : index_) out.push_back(e);
        return out;
    }

    std::vector<std::string> user_ids(Setting s, AdapterMethod m) const {
        std::vector<std::string> out;
        for (const auto& [k, e] : index_)
            if (e.setting == s && e.method == m) out.push_back(e.user_id);
        return out;
    }

    /// File names double as identifiers, so ids stay filesystem-safe.
    static void validate_id(const std::string& user_id) {
        if (user_id.empty()) throw ArgumentError("registry: empty user id");
        for (char c : user_id) {
            auto u = static_cast<unsigned char>(c);
            if (!std::isalnum(u) && c != '_' && c != '-' && c != '.')
                throw ArgumentError("registry: user id contains unsafe character: " + user_id);
        }
        if (user_id[0] == '.') throw ArgumentError("registry: user id may not start with '.'");
    }

private:
    static std::string key(const std::string& user_id, Setting s, AdapterMethod m) {
        return std::string(setting_name(s)) + "/" + method_name(m) + "/" + user_id;
    }

    std::string root_;
    std::map<std::string, Entry> index_;
};

}  // namespace oppu
