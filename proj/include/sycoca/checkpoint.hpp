// Checkpoint file: magic "SYCOCA-CKPT", u32 version, config blob, named
// f32 arrays for parameters then optimizer moments, final step count.
// All integers little-endian; loading is all-or-nothing.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sycoca/config.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/model.hpp"
#include "sycoca/optim.hpp"

namespace sycoca {

inline constexpr const char* kCkptMagic = "SYCOCA-CKPT";
inline constexpr std::uint32_t kCkptVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw FormatError("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

inline void put_array(std::string& out, const std::string& name, const Mat<float>& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 3);
    out += "f32";
    put_u32(out, 2);
    put_u64(out, static_cast<std::uint64_t>(m.rows));
    put_u64(out, static_cast<std::uint64_t>(m.cols));
    for (const float v : m.a) put_f32(out, v);
}

inline void read_array_into(Reader& r, const std::string& expect_name, Mat<float>& m) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    if (name != expect_name)
        throw FormatError("checkpoint: expected array \"" + expect_name + "\", found \"" + name +
                          "\"");
    const std::uint32_t tag_len = r.u32();
    const std::string tag = r.bytes(tag_len);
    if (tag != "f32") throw FormatError("checkpoint: unsupported dtype \"" + tag + "\"");
    const std::uint32_t rank = r.u32();
    if (rank != 2) throw FormatError("checkpoint: unsupported rank for \"" + name + "\"");
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (rows != static_cast<std::uint64_t>(m.rows) || cols != static_cast<std::uint64_t>(m.cols))
        throw FormatError("checkpoint: shape mismatch for \"" + name + "\" (file " +
                          std::to_string(rows) + "x" + std::to_string(cols) + ", config " +
                          std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")");
    for (float& v : m.a) v = r.f32();
}

}  // namespace detail

inline std::string serialize_checkpoint(Parameters<float>& params, OptimState<float>& optim,
                                        const std::string& config_text, std::uint64_t step) {
    std::string out;
    out += kCkptMagic;
    detail::put_u32(out, kCkptVersion);
    detail::put_u64(out, static_cast<std::uint64_t>(config_text.size()));
    out += config_text;

    const auto entries = param_entries(params);
    detail::put_u64(out, static_cast<std::uint64_t>(entries.size()));
    for (const auto& e : entries) detail::put_array(out, e.name, *e.mat);

    detail::put_u64(out, static_cast<std::uint64_t>(entries.size()) * 2);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        detail::put_array(out, entries[i].name + ".m", optim.m[i]);
        detail::put_array(out, entries[i].name + ".v", optim.v[i]);
    }
    detail::put_u64(out, step);
    return out;
}

inline void save_checkpoint(Parameters<float>& params, OptimState<float>& optim,
                            const std::string& config_text, std::uint64_t step,
                            const std::string& path) {
    const std::string blob = serialize_checkpoint(params, optim, config_text, step);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("failed writing checkpoint: " + path);
}

struct Checkpoint {
    RunConfig config;
    std::string config_text;
    Parameters<float> params;
    OptimState<float> optim;
    std::uint64_t step = 0;
};

inline Checkpoint parse_checkpoint(const std::string& blob) {
    detail::Reader r{blob};
    const std::string magic = r.bytes(std::strlen(kCkptMagic));
    if (magic != kCkptMagic) throw FormatError("checkpoint: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kCkptVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ck;
    const std::uint64_t blob_len = r.u64();
    ck.config_text = r.bytes(blob_len);
    ck.config = parse_config_text(ck.config_text);
    ck.params = make_parameters<float>(ck.config.model);

    const auto entries = param_entries(ck.params);
    const std::uint64_t n_arrays = r.u64();
    if (n_arrays != entries.size())
        throw FormatError("checkpoint: parameter array count mismatch (file " +
                          std::to_string(n_arrays) + ", config " +
                          std::to_string(entries.size()) + ")");
    for (const auto& e : entries) detail::read_array_into(r, e.name, *e.mat);

    ck.optim = make_optim_state(ck.params);
    const std::uint64_t n_opt = r.u64();
    if (n_opt != entries.size() * 2) throw FormatError("checkpoint: optimizer array count mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        detail::read_array_into(r, entries[i].name + ".m", ck.optim.m[i]);
        detail::read_array_into(r, entries[i].name + ".v", ck.optim.v[i]);
    }
    ck.step = r.u64();
    ck.optim.t = static_cast<long long>(ck.step);
    if (r.pos != blob.size()) throw FormatError("checkpoint: trailing bytes");
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace sycoca
