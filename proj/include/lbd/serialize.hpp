#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lbd/errors.hpp"
#include "lbd/model.hpp"
#include "lbd/trigger.hpp"

// Binary containers, little-endian throughout:
//   magic(4) | version u32 | payload | fnv1a-64 checksum of everything before it
// Models use magic "LBDM", triggers "LBDT". The byte layout is documented in
// the README.

namespace lbd {

constexpr uint32_t kContainerVersion = 1;

namespace detail {

constexpr uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr uint64_t kFnvPrime = 1099511628211ULL;

inline uint64_t fnv1a64(const uint8_t* p, size_t n, uint64_t h = kFnvOffset) {
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void bytes(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(static_cast<uint32_t>(t.ndim()));
        for (int d : t.shape()) i32(d);
        for (int64_t i = 0; i < t.size(); ++i) f64(t[i]);
    }
    void finish_to(const std::string& path) {
        uint64_t sum = fnv1a64(buf_.data(), buf_.size());
        u64(sum);
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write " + path);
        f.write(reinterpret_cast<const char*>(buf_.data()),
                static_cast<std::streamsize>(buf_.size()));
        if (!f) throw IoError("write failed for " + path);
    }

private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(std::vector<uint8_t> buf, std::string path)
        : buf_(std::move(buf)), path_(std::move(path)) {}

    uint8_t u8() {
        need(1);
        return buf_[pos_++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_++]) << (8 * i);
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    Tensor tensor() {
        uint32_t nd = u32();
        if (nd == 0 || nd > 8) throw FormatError("corrupt tensor rank in " + path_);
        std::vector<int> shape(nd);
        int64_t total = 1;
        for (auto& d : shape) {
            d = i32();
            if (d <= 0 || d > (1 << 24)) throw FormatError("corrupt tensor shape in " + path_);
            total *= d;
        }
        std::vector<double> data(static_cast<size_t>(total));
        for (auto& v : data) v = f64();
        return Tensor::from_data(std::move(shape), std::move(data));
    }

private:
    void need(size_t n) {
        if (pos_ + n > buf_.size()) throw FormatError("truncated-file: " + path_);
    }
    std::vector<uint8_t> buf_;
    std::string path_;
    size_t pos_ = 0;
};

inline ByteReader open_container(const std::string& path, const char magic[4]) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f.seekg(0, std::ios::end);
    auto len = static_cast<size_t>(f.tellg());
    f.seekg(0);
    std::vector<uint8_t> buf(len);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
    if (!f) throw IoError("read failed for " + path);
    if (len < 16) throw FormatError("truncated-file: " + path);
    if (std::memcmp(buf.data(), magic, 4) != 0) throw FormatError("bad-magic: " + path);
    uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) stored |= static_cast<uint64_t>(buf[len - 8 + i]) << (8 * i);
    if (fnv1a64(buf.data(), len - 8) != stored)
        throw FormatError("checksum-mismatch: " + path);
    buf.resize(len - 8);
    ByteReader r(std::move(buf), path);
    r.u32();  // magic, already checked
    uint32_t version = r.u32();
    if (version != kContainerVersion)
        throw FormatError("version-mismatch: " + path + " has version " +
                          std::to_string(version));
    return r;
}

}  // namespace detail

inline void save_model(const ModelGraph& m, const std::string& path) {
    detail::ByteWriter w;
    w.bytes("LBDM", 4);
    w.u32(kContainerVersion);
    w.u32(static_cast<uint32_t>(m.input_shape.size()));
    for (int d : m.input_shape) w.i32(d);
    w.u32(static_cast<uint32_t>(m.layers.size()));
    for (const auto& l : m.layers) {
        w.i32(l.index);
        w.u8(static_cast<uint8_t>(l.kind));
        w.u8(static_cast<uint8_t>(l.act));
        w.i32(l.out_channels);
        w.i32(l.ksize);
        w.i32(l.stride);
        w.u8(l.frozen ? 1 : 0);
        w.u32(static_cast<uint32_t>(l.unit_mask.size()));
        if (!l.unit_mask.empty()) w.bytes(l.unit_mask.data(), l.unit_mask.size());
    }
    for (const auto& group : m.params) {
        w.u32(static_cast<uint32_t>(group.size()));
        for (const auto& t : group) w.tensor(t);
    }
    w.finish_to(path);
}

inline ModelGraph load_model(const std::string& path) {
    detail::ByteReader r = detail::open_container(path, "LBDM");
    ModelGraph m;
    uint32_t nd = r.u32();
    if (nd > 4) throw FormatError("corrupt input shape in " + path);
    m.input_shape.resize(nd);
    for (auto& d : m.input_shape) d = r.i32();
    uint32_t nl = r.u32();
    if (nl > 4096) throw FormatError("corrupt layer count in " + path);
    m.layers.resize(nl);
    for (auto& l : m.layers) {
        l.index = r.i32();
        l.kind = static_cast<LayerKind>(r.u8());
        l.act = static_cast<Activation>(r.u8());
        l.out_channels = r.i32();
        l.ksize = r.i32();
        l.stride = r.i32();
        l.frozen = r.u8() != 0;
        uint32_t mn = r.u32();
        l.unit_mask.resize(mn);
        for (auto& b : l.unit_mask) b = r.u8();
    }
    m.params.resize(nl);
    for (auto& group : m.params) {
        uint32_t nt = r.u32();
        if (nt > 2) throw FormatError("corrupt param group in " + path);
        group.resize(nt);
        for (auto& t : group) t = r.tensor();
    }
    return m;
}

inline void save_trigger(const TriggerSpec& t, const std::string& path) {
    detail::ByteWriter w;
    w.bytes("LBDT", 4);
    w.u32(kContainerVersion);
    w.i32(t.inject_layer);
    w.u64(t.seed);
    w.str(t.target_name);
    w.tensor(t.mask);
    w.tensor(t.pattern);
    w.finish_to(path);
}

inline TriggerSpec load_trigger(const std::string& path) {
    detail::ByteReader r = detail::open_container(path, "LBDT");
    TriggerSpec t;
    t.inject_layer = r.i32();
    t.seed = r.u64();
    t.target_name = r.str();
    t.mask = r.tensor();
    t.pattern = r.tensor();
    require_binary_mask(t.mask);
    return t;
}

}  // namespace lbd
