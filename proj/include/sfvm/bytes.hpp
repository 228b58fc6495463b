// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sfvm {

using Bytes = std::vector<uint8_t>;

template <typename T>
void put_le(Bytes& out, T value) {
    for (size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<uint8_t>(static_cast<uint64_t>(value) >> (8 * i)));
    }
}

template <typename T>
void store_le(std::span<uint8_t> out, size_t offset, T value) {
    for (size_t i = 0; i < sizeof(T); ++i) {
        out[offset + i] = static_cast<uint8_t>(static_cast<uint64_t>(value) >> (8 * i));
    }
}

template <typename T>
T load_le(std::span<const uint8_t> in, size_t offset) {
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<uint64_t>(in[offset + i]) << (8 * i);
    }
    return static_cast<T>(v);
}

/// Sequential little-endian reader over a byte buffer; throws on truncation.
class ByteReader {
  public:
    explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

    template <typename T>
    T read() {
        need(sizeof(T));
        T v = load_le<T>(data_, pos_);
        pos_ += sizeof(T);
        return v;
    }

    Bytes read_bytes(size_t n) {
        need(n);
        Bytes out(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return out;
    }

    std::string read_string(size_t n) {
        Bytes b = read_bytes(n);
        return {b.begin(), b.end()};
    }

    [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }
    [[nodiscard]] size_t position() const { return pos_; }

  private:
    void need(size_t n) const {
        if (n > data_.size() - pos_) {
            throw std::runtime_error("truncated input at byte " + std::to_string(pos_));
        }
    }

    std::span<const uint8_t> data_;
    size_t pos_ = 0;
};

inline std::string to_hex(std::span<const uint8_t> data) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(data.size() * 2);
    for (uint8_t b : data) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xf]);
    }
    return out;
}

inline Bytes from_hex(std::string_view hex) {
    if (hex.starts_with("0x")) {
        hex.remove_prefix(2);
    }
    if (hex.size() % 2 != 0) {
        throw std::invalid_argument("odd-length hex string");
    }
    auto nibble = [](char c) -> uint8_t {
        if (c >= '0' && c <= '9') return static_cast<uint8_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<uint8_t>(c - 'a' + 10);
        if (c >= 'A' && c <= 'F') return static_cast<uint8_t>(c - 'A' + 10);
        throw std::invalid_argument(std::string("bad hex digit '") + c + "'");
    };
    Bytes out;
    out.reserve(hex.size() / 2);
    for (size_t i = 0; i < hex.size(); i += 2) {
        out.push_back(static_cast<uint8_t>((nibble(hex[i]) << 4) | nibble(hex[i + 1])));
    }
    return out;
}

/// Packs 64-bit words little-endian, the layout filters use for keys and values.
inline Bytes words(std::initializer_list<uint64_t> ws) {
    Bytes out;
    for (uint64_t w : ws) {
        put_le(out, w);
    }
    return out;
}

inline Bytes words(std::span<const uint64_t> ws) {
    Bytes out;
    for (uint64_t w : ws) {
        put_le(out, w);
    }
    return out;
}

// FNV-1a; used for state and log digests, never for security.
inline uint64_t fnv1a(std::span<const uint8_t> data, uint64_t seed = 0xcbf29ce484222325ULL) {
    uint64_t h = seed;
    for (uint8_t b : data) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t seed = 0xcbf29ce484222325ULL) {
    return fnv1a(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()), seed);
}

} // namespace sfvm
