// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "oppu/adapters.hpp"
#include "oppu/errors.hpp"
#include "oppu/model.hpp"
#include "oppu/tensor.hpp"
#include "oppu/util.hpp"

namespace oppu {

// ---------------------------------------------------------------------------
// Adapter/base checkpoint container.
//
//   magic "OPPU" | version u32 | meta_len u32 + UTF-8 metadata |
//   count u32 | records { name_len u32 + name | rank u32 | dims u64* |
//   data f32* row-major } | CRC-32 of everything prior
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------
namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(buf, v);
}

class Reader {
public:
    Reader(const std::string& buf, size_t limit) : buf_(buf), limit_(limit) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf_[pos_ + static_cast<size_t>(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf_[pos_ + static_cast<size_t>(i)])) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32() {
        uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    std::string bytes(size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return limit_ - pos_; }

private:
    void need(size_t n) {
        if (pos_ + n > limit_) throw TruncatedError("checkpoint: file ends inside a record");
    }
    const std::string& buf_;
    size_t limit_;
    size_t pos_ = 0;
};

inline std::string encode_container(const std::string& meta, const ParamMap& params) {
    std::string buf;
    buf += "OPPU";
    put_u32(buf, 1);
    put_u32(buf, static_cast<uint32_t>(meta.size()));
    buf += meta;
    put_u32(buf, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_u32(buf, static_cast<uint32_t>(name.size()));
        buf += name;
        put_u32(buf, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put_u64(buf, static_cast<uint64_t>(d));
        for (float v : t.data) put_f32(buf, v);
    }
    put_u32(buf, crc32(buf.data(), buf.size()));
    return buf;
}

struct DecodedContainer {
    nlohmann::json meta;
    ParamMap params;
};

inline DecodedContainer decode_container(const std::string& buf) {
    if (buf.size() < 12) throw TruncatedError("checkpoint: file too small");
    if (buf.compare(0, 4, "OPPU") != 0) throw FormatError("checkpoint: bad magic bytes");
    Reader r(buf, buf.size());
    r.bytes(4);  // magic
    uint32_t version = r.u32();
    if (version != 1)
        throw VersionError("checkpoint: unsupported format version " + std::to_string(version));

    DecodedContainer out;
    uint32_t meta_len = r.u32();
    std::string meta_text = r.bytes(meta_len);
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        uint32_t rank = r.u32();
        if (rank > 8) throw FormatError("checkpoint: implausible tensor rank");
        Tensor t;
        size_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint64_t dim = r.u64();
            if (dim > (1ull << 32)) throw FormatError("checkpoint: implausible dimension");
            t.shape.push_back(static_cast<int64_t>(dim));
            numel *= static_cast<size_t>(dim);
        }
        if (rank == 0) numel = 0;
        if (numel * 4 > r.remaining()) throw TruncatedError("checkpoint: file ends inside tensor data");
        t.data.resize(numel);
        for (size_t j = 0; j < numel; ++j) t.data[j] = r.f32();
        out.params.emplace(std::move(name), std::move(t));
    }
    if (r.remaining() < 4) throw TruncatedError("checkpoint: missing checksum");
    if (r.remaining() > 4) throw FormatError("checkpoint: trailing bytes after checksum");
    size_t payload = r.pos();
    uint32_t stored = r.u32();
    uint32_t actual = crc32(buf.data(), payload);
    if (stored != actual) throw ChecksumError("checkpoint: CRC mismatch");

    try {
        out.meta = nlohmann::json::parse(meta_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
    }
    return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f.good()) throw Error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw NotFoundError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

}  // namespace detail

inline void save_adapter(const Adapter& a, const std::string& path) {
    nlohmann::json meta = {
        {"kind", "adapter"},
        {"method", method_name(a.method)},
        {"owner", a.owner},
        {"setting", setting_name(a.setting)},
        {"base_digest", a.base_digest},
        {"trained_steps", a.trained_steps},
        {"hyper",
         {{"rank", a.lora_rank}, {"alpha", a.lora_alpha}, {"num_virtual_tokens", a.num_virtual_tokens}}},
    };
    detail::write_file(path, detail::encode_container(meta.dump(), a.parameters));
}

inline Setting setting_from_name(const std::string& s) {
    if (s == "B") return Setting::B;
    if (s == "R") return Setting::R;
    if (s == "P") return Setting::P;
    throw ArgumentError("unknown setting: " + s);
}

inline Adapter load_adapter(const std::string& path) {
    auto dec = detail::decode_container(detail::read_file(path));
    const auto& meta = dec.meta;
    if (meta.value("kind", "") != "adapter") throw FormatError("checkpoint: not an adapter file");
    Adapter a;
    a.method = method_from_name(meta.at("method").get<std::string>());
    a.owner = meta.value("owner", "");
    a.setting = setting_from_name(meta.value("setting", "B"));
    a.base_digest = meta.value("base_digest", "");
    a.trained_steps = meta.value("trained_steps", static_cast<int64_t>(0));
    const auto& hyper = meta.at("hyper");
    a.lora_rank = hyper.value("rank", 0);
    a.lora_alpha = hyper.value("alpha", 0.0);
    a.num_virtual_tokens = hyper.value("num_virtual_tokens", 0);
    a.parameters = std::move(dec.params);
    if (!params_all_finite(a.parameters)) throw IntegrityError("adapter: non-finite parameters");
    return a;
}

inline void save_base(const BaseModel& m, const std::string& path) {
    nlohmann::json meta = {
        {"kind", "base"},
        {"setting", setting_name(m.setting_tag)},
        {"digest", m.weights_digest},
        {"config",
         {{"vocab_size", m.config.vocab_size},
          {"context_length", m.config.context_length},
          {"embed_dim", m.config.embed_dim},
          {"num_layers", m.config.num_layers},
          {"num_heads", m.config.num_heads},
          {"seed", m.config.seed}}},
    };
    detail::write_file(path, detail::encode_container(meta.dump(), m.params));
}

inline BaseModel load_base(const std::string& path) {
    auto dec = detail::decode_container(detail::read_file(path));
    const auto& meta = dec.meta;
    if (meta.value("kind", "") != "base") throw FormatError("checkpoint: not a base model file");
    BaseModel m;
    const auto& c = meta.at("config");
    m.config.vocab_size = c.at("vocab_size").get<int>();
    m.config.context_length = c.at("context_length").get<int>();
    m.config.embed_dim = c.at("embed_dim").get<int>();
    m.config.num_layers = c.at("num_layers").get<int>();
    m.config.num_heads = c.at("num_heads").get<int>();
    m.config.seed = c.at("seed").get<uint64_t>();
    m.setting_tag = setting_from_name(meta.value("setting", "B"));
    m.params = std::move(dec.params);
    m.refresh_digest();
    std::string stored = meta.value("digest", "");
    if (!stored.empty() && stored != m.weights_digest)
        throw IntegrityError("base checkpoint: stored digest does not match weights");
    if (!params_all_finite(m.params)) throw IntegrityError("base checkpoint: non-finite parameters");
    return m;
}

}  // namespace oppu
