// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

#include "sfvm/bytes.hpp"
#include "sfvm/syscalls.hpp"

namespace sfvm {

/// The 64-byte record a filter sees for each syscall.
struct SyscallContext {
    int32_t nr = 0;
    uint32_t arch = kAuditArchX86_64;
    uint64_t calling_address = 0;
    std::array<uint64_t, 6> args{};

    static constexpr size_t kSize = 64;

    [[nodiscard]] std::array<uint8_t, kSize> serialize() const {
        std::array<uint8_t, kSize> out{};
        std::span<uint8_t> s(out);
        store_le<uint32_t>(s, 0, static_cast<uint32_t>(nr));
        store_le<uint32_t>(s, 4, arch);
        store_le<uint64_t>(s, 8, calling_address);
        for (size_t i = 0; i < args.size(); ++i) {
            store_le<uint64_t>(s, 16 + 8 * i, args[i]);
        }
        return out;
    }

    friend bool operator==(const SyscallContext&, const SyscallContext&) = default;
};

/// One readable field of the context. Reads must cover exactly one field.
struct ContextField {
    std::string_view name;
    uint16_t offset;
    uint8_t width;
};

inline constexpr std::array<ContextField, 9> kContextFields{{
    {"nr", 0, 4},
    {"arch", 4, 4},
    {"ip", 8, 8},
    {"arg0", 16, 8},
    {"arg1", 24, 8},
    {"arg2", 32, 8},
    {"arg3", 40, 8},
    {"arg4", 48, 8},
    {"arg5", 56, 8},
}};

inline constexpr uint16_t arg_offset(size_t i) { return static_cast<uint16_t>(16 + 8 * i); }

inline std::optional<ContextField> context_field_at(int64_t offset, int64_t width) {
    for (const auto& f : kContextFields) {
        if (f.offset == offset && f.width == width) {
            return f;
        }
    }
    return std::nullopt;
}

inline std::optional<ContextField> context_field_named(std::string_view name) {
    if (name == "calling_address") {
        name = "ip";
    }
    for (const auto& f : kContextFields) {
        if (f.name == name) {
            return f;
        }
    }
    return std::nullopt;
}

} // namespace sfvm
