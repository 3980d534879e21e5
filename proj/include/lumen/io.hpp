#pragma once

// File formats shared by the pipeline:
//   TNS1  - raw tensor: magic, u8 dtype (0=fp32, 1=fp16), u8 rank,
//           u32 dims (little-endian), payload.
//   CKPT1 - checkpoint container: magic, u32 version, meta text block,
//           u32 entry count, then named TNS1 entries.
//   PGM   - binary P5, 8-bit, for images and label masks.
//   PPM   - binary P6 for color overlays.
// Loads validate magic and length and throw with a byte position on
// truncation, so a broken file never yields a partial object.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lumen/fp16.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

// ----------------------------- hashing -----------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("hash_file: cannot open " + path);
    std::uint64_t h = 0xCBF29CE484222325ull;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

// ----------------------------- low-level LE io -----------------------------

namespace detail {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
    os.put(static_cast<char>(v & 0xFF));
    os.put(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
    std::istream& in;
    std::size_t pos = 0;
    std::string what;

    void bytes(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw std::runtime_error(what + ": truncated at byte " + std::to_string(pos));
        pos += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint16_t u16() {
        std::uint8_t b[2];
        bytes(b, 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        std::uint8_t b[4];
        bytes(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        std::uint8_t b[8];
        bytes(b, 8);
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
};

}  // namespace detail

// ----------------------------- TNS1 -----------------------------

enum class TnsDtype : std::uint8_t { fp32 = 0, fp16 = 1 };

template <typename T>
void write_tns1(std::ostream& os, const Tensor<T>& t, TnsDtype dtype,
                std::size_t* overflow_count = nullptr) {
    os.write("TNS1", 4);
    detail::put_u8(os, static_cast<std::uint8_t>(dtype));
    detail::put_u8(os, static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    if (dtype == TnsDtype::fp32) {
        for (T v : t.data) {
            const float f = static_cast<float>(v);
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            detail::put_u32(os, u);
        }
    } else {
        for (T v : t.data) detail::put_u16(os, fp16_encode(static_cast<float>(v), overflow_count));
    }
}

template <typename T>
Tensor<T> read_tns1(std::istream& is, const std::string& what = "TNS1") {
    detail::Reader r{is, 0, what};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "TNS1", 4) != 0)
        throw std::runtime_error(what + ": bad magic at byte 0");
    const auto dtype = static_cast<TnsDtype>(r.u8());
    if (dtype != TnsDtype::fp32 && dtype != TnsDtype::fp16)
        throw std::runtime_error(what + ": unknown dtype tag at byte 4");
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    Tensor<T> t(shape);
    for (auto& v : t.data) {
        if (dtype == TnsDtype::fp32) {
            const std::uint32_t u = r.u32();
            float f;
            std::memcpy(&f, &u, 4);
            v = static_cast<T>(f);
        } else {
            v = static_cast<T>(fp16_decode(r.u16()));
        }
    }
    return t;
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t, TnsDtype dtype = TnsDtype::fp32) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_tensor: cannot open " + path);
    write_tns1(out, t, dtype);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_tensor: cannot open " + path);
    return read_tns1<T>(in, path);
}

// ----------------------------- CKPT1 -----------------------------

// Named tensors plus a free-form meta text (key = value lines). The order of
// entries is preserved so writes are reproducible.
struct CheckpointFile {
    std::string meta;
    std::vector<std::pair<std::string, Tensor<double>>> entries;

    const Tensor<double>* find(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }
};

template <typename T>
void ckpt_add(CheckpointFile& ck, const std::string& name, const Tensor<T>& t) {
    ck.entries.emplace_back(name, t.template cast<double>());
}

inline void write_ckpt1(const std::string& path, const CheckpointFile& ck, TnsDtype dtype,
                        std::size_t* overflow_count = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_ckpt1: cannot open " + path);
    os.write("CKPT1", 5);
    detail::put_u32(os, 1);  // version
    detail::put_u32(os, static_cast<std::uint32_t>(ck.meta.size()));
    os.write(ck.meta.data(), static_cast<std::streamsize>(ck.meta.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(ck.entries.size()));
    for (const auto& [name, t] : ck.entries) {
        detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        std::ostringstream blob;
        write_tns1(blob, t, dtype, overflow_count);
        const std::string payload = blob.str();
        detail::put_u64(os, payload.size());
        os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    }
    if (!os) throw std::runtime_error("write_ckpt1: write failed for " + path);
}

inline CheckpointFile read_ckpt1(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_ckpt1: cannot open " + path);
    detail::Reader r{is, 0, path};
    char magic[5];
    r.bytes(magic, 5);
    if (std::memcmp(magic, "CKPT1", 5) != 0)
        throw std::runtime_error(path + ": bad checkpoint magic at byte 0");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    CheckpointFile ck;
    const std::uint32_t meta_len = r.u32();
    ck.meta.resize(meta_len);
    if (meta_len) r.bytes(ck.meta.data(), meta_len);
    const std::uint32_t count = r.u32();
    ck.entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        if (name_len) r.bytes(name.data(), name_len);
        const std::uint64_t payload = r.u64();
        std::string blob(payload, '\0');
        if (payload) r.bytes(blob.data(), payload);
        std::istringstream bs(blob);
        ck.entries.emplace_back(name, read_tns1<double>(bs, path + ":" + name));
    }
    return ck;
}

// ----------------------------- PGM / PPM -----------------------------

// image values in [0,1] quantized to 8 bits
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& img) {
    if (img.shape.size() != 2) throw std::invalid_argument("write_pgm: want HxW tensor");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
    os << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
    for (T v : img.data) {
        const double c = std::min(1.0, std::max(0.0, static_cast<double>(v)));
        os.put(static_cast<char>(static_cast<int>(std::lround(c * 255.0))));
    }
}

template <typename T>
Tensor<T> read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255 || w == 0 || h == 0)
        throw std::runtime_error("read_pgm: unsupported header in " + path);
    is.get();  // single whitespace after header
    Tensor<T> img({h, w});
    std::vector<unsigned char> raw(w * h);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size())
        throw std::runtime_error("read_pgm: truncated payload in " + path);
    for (std::size_t i = 0; i < raw.size(); ++i) img[i] = static_cast<T>(raw[i] / 255.0);
    return img;
}

// label masks use the gray levels {0,64,128,192} for labels {0,1,2,3}
inline void write_mask_pgm(const std::string& path, const Tensor<int>& mask) {
    if (mask.shape.size() != 2) throw std::invalid_argument("write_mask_pgm: want HxW tensor");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_mask_pgm: cannot open " + path);
    os << "P5\n" << mask.shape[1] << " " << mask.shape[0] << "\n255\n";
    for (int v : mask.data) os.put(static_cast<char>(v * 64));
}

inline Tensor<int> read_mask_pgm(const std::string& path) {
    Tensor<double> gray = read_pgm<double>(path);
    Tensor<int> mask(gray.shape);
    for (std::size_t i = 0; i < gray.size(); ++i)
        mask[i] = static_cast<int>(std::lround(gray[i] * 255.0)) / 64;
    return mask;
}

// rgb in [0,1], shape (3,H,W)
template <typename T>
void write_ppm(const std::string& path, const Tensor<T>& rgb) {
    if (rgb.shape.size() != 3 || rgb.shape[0] != 3)
        throw std::invalid_argument("write_ppm: want (3,H,W) tensor");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
    const std::size_t h = rgb.shape[1], w = rgb.shape[2];
    os << "P6\n" << w << " " << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::min(1.0, std::max(0.0, static_cast<double>(rgb.at(c, y, x))));
                os.put(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
            }
}

// ----------------------------- text helpers -----------------------------

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_text_file: cannot open " + path);
    os << text;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_text_file: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace lumen
