#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pic/param_store.hpp"

namespace pic {

// Checkpoint file layout:
//   magic "PIC1" | version u32 LE | record count u64 LE | records...
// record: name (u32 LE length + UTF-8) | dtype u8 (0=f32, 1=f64) |
//         rank u32 LE | extents u64 LE each | raw LE values.
// The final record is named "__meta.checksum" and holds the FNV-1a 64 hash
// of every preceding byte, split into two f64-encoded 32-bit halves.

enum class CkptError {
    BadMagic,
    BadVersion,
    Truncated,
    ChecksumMismatch,
    ConfigHashMismatch,
    ArchMismatch,
};

struct CheckpointError : std::runtime_error {
    CkptError code;
    CheckpointError(CkptError c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

struct CkptRecord {
    std::string name;
    std::uint8_t dtype = 1;
    Shape shape;
    std::vector<std::uint8_t> raw;

    std::size_t count() const { return numel(shape); }

    template <class T>
    std::vector<T> values() const {
        std::size_t esz = dtype == 0 ? 4 : 8;
        std::vector<T> out(count());
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (dtype == 0) {
                float f;
                std::memcpy(&f, raw.data() + i * esz, 4);
                out[i] = static_cast<T>(f);
            } else {
                double d;
                std::memcpy(&d, raw.data() + i * esz, 8);
                out[i] = static_cast<T>(d);
            }
        }
        return out;
    }
};

namespace detail {

constexpr char kCkptMagic[4] = {'P', 'I', 'C', '1'};
constexpr std::uint32_t kCkptVersion = 1;
inline const char* kChecksumName = "__meta.checksum";

inline void put_bytes(std::string& buf, const void* p, std::size_t n) {
    buf.append(reinterpret_cast<const char*>(p), n);
}
inline void put_u32(std::string& buf, std::uint32_t v) { put_bytes(buf, &v, 4); }
inline void put_u64(std::string& buf, std::uint64_t v) { put_bytes(buf, &v, 8); }

inline std::uint64_t fnv1a64_bytes(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// u64 quantities round-trip exactly as two f64-encoded 32-bit halves
inline std::vector<double> split_u64(std::uint64_t v) {
    return {static_cast<double>(v & 0xffffffffull), static_cast<double>(v >> 32)};
}
inline std::uint64_t join_u64(const std::vector<double>& halves) {
    return static_cast<std::uint64_t>(halves.at(0)) | (static_cast<std::uint64_t>(halves.at(1)) << 32);
}

template <class T>
inline void append_record(std::string& buf, const std::string& name, const T* data, const Shape& shape) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    put_bytes(buf, name.data(), name.size());
    std::uint8_t dtype = sizeof(T) == 4 ? 0 : 1;
    put_bytes(buf, &dtype, 1);
    put_u32(buf, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_u64(buf, static_cast<std::uint64_t>(d));
    put_bytes(buf, data, numel(shape) * sizeof(T));
}

}  // namespace detail

// Serializes parameters, moments, shadows and step counts plus caller meta
// values (f64 vectors keyed by "__meta.<key>" names).
template <class T>
inline std::string checkpoint_bytes(const ParameterStore<T>& store,
                                    const std::map<std::string, std::vector<double>>& meta = {}) {
    using namespace detail;
    std::string buf;
    put_bytes(buf, kCkptMagic, 4);
    put_u32(buf, kCkptVersion);
    std::uint64_t nrec = store.count() * 5 + meta.size() + 1;
    put_u64(buf, nrec);
    for (const auto& [name, e] : store.entries()) {
        append_record(buf, name, e.value.data.data(), e.value.shape);
        append_record(buf, name + ".m1", e.m1.data.data(), e.m1.shape);
        append_record(buf, name + ".m2", e.m2.data.data(), e.m2.shape);
        append_record(buf, name + ".polyak", e.shadow.data.data(), e.shadow.shape);
        double step = static_cast<double>(e.step);
        append_record(buf, name + ".step", &step, Shape{1});
    }
    for (const auto& [key, vals] : meta)
        append_record(buf, "__meta." + key, vals.data(), Shape{vals.size()});
    std::uint64_t sum = fnv1a64_bytes(buf);
    auto halves = split_u64(sum);
    append_record(buf, kChecksumName, halves.data(), Shape{2});
    return buf;
}

template <class T>
inline void save_checkpoint(const ParameterStore<T>& store, const std::string& path,
                            const std::map<std::string, std::vector<double>>& meta = {}) {
    std::string buf = checkpoint_bytes(store, meta);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot open checkpoint for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    check(out.good(), "failed writing checkpoint: " + path);
}

inline std::vector<CkptRecord> parse_checkpoint(const std::string& buf) {
    using namespace detail;
    auto need = [&](std::size_t off, std::size_t n) {
        if (off + n > buf.size())
            throw CheckpointError(CkptError::Truncated,
                                  "checkpoint truncated at byte " + std::to_string(off));
    };
    need(0, 8);
    if (std::memcmp(buf.data(), kCkptMagic, 4) != 0)
        throw CheckpointError(CkptError::BadMagic, "bad checkpoint magic (want PIC1)");
    std::uint32_t version;
    std::memcpy(&version, buf.data() + 4, 4);
    if (version != kCkptVersion)
        throw CheckpointError(CkptError::BadVersion, "unsupported checkpoint version " + std::to_string(version));
    need(8, 8);
    std::uint64_t nrec;
    std::memcpy(&nrec, buf.data() + 8, 8);
    std::size_t off = 16;
    std::vector<CkptRecord> records;
    records.reserve(nrec);
    std::size_t checksum_body_end = 0;
    for (std::uint64_t r = 0; r < nrec; ++r) {
        checksum_body_end = off;
        need(off, 4);
        std::uint32_t len;
        std::memcpy(&len, buf.data() + off, 4);
        off += 4;
        need(off, len);
        CkptRecord rec;
        rec.name.assign(buf.data() + off, len);
        off += len;
        need(off, 1 + 4);
        rec.dtype = static_cast<std::uint8_t>(buf[off]);
        off += 1;
        std::uint32_t rank;
        std::memcpy(&rank, buf.data() + off, 4);
        off += 4;
        need(off, 8ull * rank);
        rec.shape.resize(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint64_t ext;
            std::memcpy(&ext, buf.data() + off, 8);
            rec.shape[d] = static_cast<std::size_t>(ext);
            off += 8;
        }
        std::size_t nbytes = rec.count() * (rec.dtype == 0 ? 4 : 8);
        need(off, nbytes);
        rec.raw.assign(buf.begin() + static_cast<long>(off), buf.begin() + static_cast<long>(off + nbytes));
        off += nbytes;
        records.push_back(std::move(rec));
    }
    if (off != buf.size())
        throw CheckpointError(CkptError::Truncated,
                              "trailing bytes after last record (" + std::to_string(buf.size() - off) + ")");
    if (records.empty() || records.back().name != kChecksumName)
        throw CheckpointError(CkptError::ChecksumMismatch, "missing checksum record");
    std::uint64_t stored = join_u64(records.back().values<double>());
    std::uint64_t computed = fnv1a64_bytes(buf.substr(0, checksum_body_end));
    if (stored != computed)
        throw CheckpointError(CkptError::ChecksumMismatch, "checkpoint checksum mismatch");
    records.pop_back();
    return records;
}

inline std::vector<CkptRecord> load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(buf);
}

// Applies records onto an already-built store; architecture must match
// exactly and the first offending parameter is named.
template <class T>
inline std::map<std::string, std::vector<double>> apply_checkpoint(ParameterStore<T>& store,
                                                                   const std::vector<CkptRecord>& records) {
    std::map<std::string, const CkptRecord*> by_name;
    std::map<std::string, std::vector<double>> meta;
    for (const auto& r : records) {
        if (r.name.rfind("__meta.", 0) == 0) {
            meta[r.name.substr(7)] = r.values<double>();
            continue;
        }
        by_name[r.name] = &r;
    }
    const std::uint8_t want_dtype = sizeof(T) == 4 ? 0 : 1;
    auto fetch = [&](const std::string& name, const Shape& shape) -> const CkptRecord& {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CheckpointError(CkptError::ArchMismatch, "checkpoint missing parameter: " + name);
        const CkptRecord& r = *it->second;
        if (r.shape != shape)
            throw CheckpointError(CkptError::ArchMismatch,
                                  "parameter shape mismatch for " + name + ": checkpoint " + shape_str(r.shape) +
                                      " vs model " + shape_str(shape));
        if (r.dtype != want_dtype)
            throw CheckpointError(CkptError::ArchMismatch, "parameter dtype mismatch for " + name);
        by_name.erase(it);
        return r;
    };
    for (auto& [name, e] : store.entries()) {
        e.value.data = fetch(name, e.value.shape).template values<T>();
        e.m1.data = fetch(name + ".m1", e.m1.shape).template values<T>();
        e.m2.data = fetch(name + ".m2", e.m2.shape).template values<T>();
        e.shadow.data = fetch(name + ".polyak", e.shadow.shape).template values<T>();
        e.step = static_cast<std::uint64_t>(fetch(name + ".step", Shape{1}).template values<double>()[0]);
    }
    if (!by_name.empty())
        throw CheckpointError(CkptError::ArchMismatch,
                              "checkpoint has extra parameter: " + by_name.begin()->first);
    return meta;
}

}  // namespace pic
