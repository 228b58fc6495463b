// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>

#include "sfvm/bytes.hpp"

namespace sfvm {

inline constexpr uint64_t kPageSize = 4096;

constexpr uint64_t page_of(uint64_t addr) { return addr & ~(kPageSize - 1); }

struct PageFlags {
    bool writable = true;
    bool user_accessible = true;
    bool may_write = true; // once cleared, writable can never be granted again

    friend bool operator==(const PageFlags&, const PageFlags&) = default;
};

enum class MemStatus : uint8_t { ok, segfault, protection_fault, stalled, denied };

inline const char* mem_status_name(MemStatus s) {
    switch (s) {
    case MemStatus::ok: return "ok";
    case MemStatus::segfault: return "segfault";
    case MemStatus::protection_fault: return "protection_fault";
    case MemStatus::stalled: return "stalled";
    case MemStatus::denied: return "denied";
    }
    return "?";
}

/// Sparse simulated user address space made of 4096-byte pages.
class UserMemory {
  public:
    struct Page {
        std::array<uint8_t, kPageSize> data{};
        PageFlags flags;
    };

    /// Maps zeroed pages covering [addr, addr+len). Already mapped pages keep
    /// their contents; their flags are only changed where may_write allows.
    MemStatus map(uint64_t addr, uint64_t len, PageFlags flags = {}) {
        if (len == 0) {
            return MemStatus::ok;
        }
        for (uint64_t p = page_of(addr); p < addr + len; p += kPageSize) {
            auto it = pages_.find(p);
            if (it != pages_.end() && !it->second.flags.may_write && flags.writable) {
                return MemStatus::denied;
            }
        }
        for (uint64_t p = page_of(addr); p < addr + len; p += kPageSize) {
            auto [it, fresh] = pages_.try_emplace(p);
            if (fresh || it->second.flags.may_write) {
                it->second.flags = flags;
            }
        }
        return MemStatus::ok;
    }

    void unmap(uint64_t addr, uint64_t len) {
        for (uint64_t p = page_of(addr); p < addr + len; p += kPageSize) {
            pages_.erase(p);
        }
    }

    [[nodiscard]] bool mapped(uint64_t addr, uint64_t len = 1) const {
        for (uint64_t p = page_of(addr); p < addr + len; p += kPageSize) {
            if (!pages_.contains(p)) {
                return false;
            }
        }
        return true;
    }

    [[nodiscard]] std::optional<PageFlags> flags(uint64_t addr) const {
        auto it = pages_.find(page_of(addr));
        if (it == pages_.end()) {
            return std::nullopt;
        }
        return it->second.flags;
    }

    /// Kernel-side flag update; the may_write rule still applies.
    bool set_flags(uint64_t page, PageFlags f) {
        auto it = pages_.find(page_of(page));
        if (it == pages_.end()) {
            return false;
        }
        if (!it->second.flags.may_write && f.writable) {
            return false;
        }
        if (!it->second.flags.may_write) {
            f.may_write = false;
        }
        it->second.flags = f;
        return true;
    }

    /// Kernel-side read: ignores protection, fails on unmapped pages.
    [[nodiscard]] std::optional<Bytes> read(uint64_t addr, uint64_t len) const {
        Bytes out;
        out.reserve(len);
        for (uint64_t a = addr; a < addr + len;) {
            auto it = pages_.find(page_of(a));
            if (it == pages_.end()) {
                return std::nullopt;
            }
            uint64_t in_page = a - it->first;
            uint64_t n = std::min(kPageSize - in_page, addr + len - a);
            out.insert(out.end(), it->second.data.begin() + static_cast<std::ptrdiff_t>(in_page),
                       it->second.data.begin() + static_cast<std::ptrdiff_t>(in_page + n));
            a += n;
        }
        return out;
    }

    /// Kernel-side read of a NUL-terminated string of at most `max` bytes.
    /// Stops early at an unmapped page.
    [[nodiscard]] Bytes read_string(uint64_t addr, uint64_t max, bool* hit_unmapped = nullptr) const {
        Bytes out;
        if (hit_unmapped) {
            *hit_unmapped = false;
        }
        for (uint64_t i = 0; i < max; ++i) {
            auto it = pages_.find(page_of(addr + i));
            if (it == pages_.end()) {
                if (hit_unmapped) {
                    *hit_unmapped = true;
                }
                break;
            }
            uint8_t c = it->second.data[(addr + i) - it->first];
            out.push_back(c);
            if (c == 0) {
                break;
            }
        }
        return out;
    }

    /// Kernel-side write: ignores the writable flag.
    bool write_kernel(uint64_t addr, std::span<const uint8_t> data) {
        if (!mapped(addr, data.size())) {
            return false;
        }
        copy_in(addr, data);
        return true;
    }

    /// A user-space store. All-or-nothing.
    MemStatus write_user(uint64_t addr, std::span<const uint8_t> data) {
        if (data.empty()) {
            return MemStatus::ok;
        }
        for (uint64_t p = page_of(addr); p < addr + data.size(); p += kPageSize) {
            auto it = pages_.find(p);
            if (it == pages_.end()) {
                return MemStatus::segfault;
            }
            if (!it->second.flags.writable || !it->second.flags.user_accessible) {
                return MemStatus::protection_fault;
            }
        }
        copy_in(addr, data);
        return MemStatus::ok;
    }

    /// A user-space mprotect. Granting write on a page without may_write is denied.
    MemStatus protect(uint64_t addr, uint64_t len, bool writable) {
        for (uint64_t p = page_of(addr); p < addr + len; p += kPageSize) {
            auto it = pages_.find(p);
            if (it == pages_.end()) {
                return MemStatus::segfault;
            }
            if (writable && !it->second.flags.may_write) {
                return MemStatus::denied;
            }
        }
        for (uint64_t p = page_of(addr); p < addr + len; p += kPageSize) {
            pages_[p].flags.writable = writable;
        }
        return MemStatus::ok;
    }

    [[nodiscard]] size_t page_count() const { return pages_.size(); }

    [[nodiscard]] uint64_t digest(uint64_t h = 0xcbf29ce484222325ULL) const {
        for (const auto& [addr, page] : pages_) {
            uint8_t f = static_cast<uint8_t>(page.flags.writable | page.flags.user_accessible << 1 |
                                             page.flags.may_write << 2);
            h = fnv1a(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(&addr), sizeof addr), h);
            h = fnv1a(std::span<const uint8_t>(&f, 1), h);
            h = fnv1a(page.data, h);
        }
        return h;
    }

  private:
    void copy_in(uint64_t addr, std::span<const uint8_t> data) {
        for (size_t i = 0; i < data.size();) {
            uint64_t a = addr + i;
            auto& page = pages_[page_of(a)];
            uint64_t in_page = a - page_of(a);
            size_t n = std::min<size_t>(kPageSize - in_page, data.size() - i);
            std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(i), n,
                        page.data.begin() + static_cast<std::ptrdiff_t>(in_page));
            i += n;
        }
    }

    std::map<uint64_t, Page> pages_;
};

} // namespace sfvm
