// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Argument snapshots taken at syscall entry.
//
// copy:          described argument memory is copied into a per-thread page
//                mapped read-only (may_write cleared) at a reserved address.
// write_protect: the source pages are made read-only until syscall exit;
//                writers to those pages stall.
// none:          no protection, helpers read live memory. Only useful as a
//                negative control in tests.
//
// Filters always address user memory by the original addresses; reads are
// translated through the snapshot's source ranges.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfvm/bytes.hpp"
#include "sfvm/context.hpp"
#include "sfvm/syscalls.hpp"
#include "sfvm/user_memory.hpp"
#include "sfvm/vm.hpp"

namespace sfvm {

inline constexpr uint64_t kSnapshotBytesLimit = kPageSize;
// Per-thread snapshot pages live above this address, one page per tid.
inline constexpr uint64_t kSnapshotAreaBase = 0x7ff000000000ULL;

constexpr uint64_t snapshot_base_for(uint64_t tid) { return kSnapshotAreaBase + tid * kPageSize; }

enum class ProtectionMode : uint8_t { copy, write_protect, none };

inline const char* protection_mode_name(ProtectionMode m) {
    switch (m) {
    case ProtectionMode::copy: return "copy";
    case ProtectionMode::write_protect: return "write_protect";
    case ProtectionMode::none: return "none";
    }
    return "?";
}

inline std::optional<ProtectionMode> parse_protection_mode(std::string_view s) {
    for (auto m : {ProtectionMode::copy, ProtectionMode::write_protect, ProtectionMode::none}) {
        if (s == protection_mode_name(m)) {
            return m;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Descriptors

enum class ArgKind : uint8_t { scalar, buffer, string, record };

/// A user pointer stored inside a record, pointing to a buffer or string.
struct NestedPointer {
    uint32_t offset = 0; // of the 8-byte pointer within the record
    ArgKind kind = ArgKind::buffer;
    uint32_t size = 0; // buffer size or string max

    friend bool operator==(const NestedPointer&, const NestedPointer&) = default;
};

struct ArgSpec {
    ArgKind kind = ArgKind::scalar;
    uint32_t size = 0; // buffer size, string max or record size
    std::vector<NestedPointer> pointers;

    friend bool operator==(const ArgSpec&, const ArgSpec&) = default;
};

struct ArgDescriptor {
    int32_t nr = 0;
    std::array<ArgSpec, 6> args{};

    /// Upper bound on the bytes one snapshot of this syscall can hold.
    [[nodiscard]] uint64_t max_bytes() const {
        uint64_t total = 0;
        for (const auto& a : args) {
            total += a.kind == ArgKind::scalar ? 0 : a.size;
            for (const auto& p : a.pointers) {
                total += p.size;
            }
        }
        return total;
    }
};

class DescriptorError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline std::optional<ArgKind> parse_arg_kind(std::string_view s) {
    if (s == "scalar") return ArgKind::scalar;
    if (s == "buffer") return ArgKind::buffer;
    if (s == "string") return ArgKind::string;
    if (s == "record") return ArgKind::record;
    return std::nullopt;
}

class DescriptorTable {
  public:
    void add(const ArgDescriptor& d) {
        validate(d);
        table_[d.nr] = d;
    }

    [[nodiscard]] const ArgDescriptor* find(int32_t nr) const {
        auto it = table_.find(nr);
        return it == table_.end() ? nullptr : &it->second;
    }

    [[nodiscard]] size_t size() const { return table_.size(); }

    static void validate(const ArgDescriptor& d) {
        for (const auto& a : d.args) {
            if (a.kind != ArgKind::scalar && a.size == 0) {
                throw DescriptorError("syscall " + syscall_label(d.nr) + ": non-scalar argument needs a size");
            }
            if (a.kind != ArgKind::record && !a.pointers.empty()) {
                throw DescriptorError("syscall " + syscall_label(d.nr) + ": only records may hold pointers");
            }
            for (const auto& p : a.pointers) {
                if (p.kind != ArgKind::buffer && p.kind != ArgKind::string) {
                    throw DescriptorError("syscall " + syscall_label(d.nr) +
                                          ": nested pointers must reference a buffer or string (one level only)");
                }
                if (p.size == 0 || p.offset + 8 > a.size) {
                    throw DescriptorError("syscall " + syscall_label(d.nr) + ": nested pointer outside its record");
                }
            }
        }
        if (d.max_bytes() > kSnapshotBytesLimit) {
            throw DescriptorError("syscall " + syscall_label(d.nr) + ": snapshot may need " +
                                  std::to_string(d.max_bytes()) + " bytes, limit is " +
                                  std::to_string(kSnapshotBytesLimit));
        }
    }

    /// {"syscalls":[{"nr":"open","args":[{"kind":"string","max":256}, ...]}]}
    static DescriptorTable from_json(const nlohmann::json& j) {
        DescriptorTable t;
        if (!j.is_object() || !j.contains("syscalls") || !j["syscalls"].is_array()) {
            throw DescriptorError("descriptor file needs a 'syscalls' array");
        }
        for (const auto& e : j["syscalls"]) {
            ArgDescriptor d;
            try {
                d.nr = e.at("nr").is_string() ? parse_syscall(e.at("nr").get<std::string>()) : e.at("nr").get<int32_t>();
                const auto& args = e.at("args");
                if (!args.is_array() || args.size() > 6) {
                    throw DescriptorError("'args' must be an array of at most 6 entries");
                }
                for (size_t i = 0; i < args.size(); ++i) {
                    d.args[i] = parse_arg(args[i], true);
                }
            } catch (const nlohmann::json::exception& ex) {
                throw DescriptorError(std::string("malformed descriptor entry: ") + ex.what());
            } catch (const std::invalid_argument& ex) {
                throw DescriptorError(std::string("malformed descriptor entry: ") + ex.what());
            }
            t.add(d);
        }
        return t;
    }

    static DescriptorTable load(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw DescriptorError("cannot open descriptor file " + path);
        }
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& ex) {
            throw DescriptorError(path + ": " + ex.what());
        }
        return from_json(j);
    }

    /// The bundled defaults (same content as data/descriptors.json).
    static DescriptorTable defaults() {
        DescriptorTable t;
        auto str = [](uint32_t max) { return ArgSpec{ArgKind::string, max, {}}; };
        ArgDescriptor open{syscall_number("open").value()};
        open.args[0] = str(256);
        t.add(open);
        ArgDescriptor openat{syscall_number("openat").value()};
        openat.args[1] = str(256);
        t.add(openat);
        for (const char* name : {"keyctl", "mremap", "ftruncate"}) {
            t.add(ArgDescriptor{syscall_number(name).value()});
        }
        // io_submit(ctx, nr, iocbpp): iocbpp -> iocb* -> 64-byte iocb.
        ArgDescriptor io{syscall_number("io_submit").value()};
        io.args[2] = ArgSpec{ArgKind::record, 8, {NestedPointer{0, ArgKind::buffer, 64}}};
        t.add(io);
        return t;
    }

  private:
    static ArgSpec parse_arg(const nlohmann::json& a, bool allow_pointers) {
        ArgSpec s;
        auto kind = parse_arg_kind(a.at("kind").get<std::string>());
        if (!kind) {
            throw DescriptorError("unknown argument kind '" + a.at("kind").get<std::string>() + "'");
        }
        s.kind = *kind;
        switch (s.kind) {
        case ArgKind::scalar: break;
        case ArgKind::buffer:
        case ArgKind::record: s.size = a.at("size").get<uint32_t>(); break;
        case ArgKind::string: s.size = a.at("max").get<uint32_t>(); break;
        }
        if (a.contains("fields")) {
            if (!allow_pointers || s.kind != ArgKind::record) {
                throw DescriptorError("nested pointer fields are only allowed one level deep inside a record");
            }
            for (const auto& f : a["fields"]) {
                ArgSpec inner = parse_arg(f, false);
                if (inner.kind == ArgKind::record || inner.kind == ArgKind::scalar) {
                    throw DescriptorError("nested pointer fields must reference a buffer or string (one level only)");
                }
                s.pointers.push_back(NestedPointer{f.at("offset").get<uint32_t>(), inner.kind, inner.size});
            }
        }
        return s;
    }

    std::map<int32_t, ArgDescriptor> table_;
};

// ---------------------------------------------------------------------------
// Snapshots

struct SourceRange {
    uint64_t user_addr = 0;
    uint64_t len = 0;
    uint64_t offset = 0; // into SnapshotRegion::bytes
    bool faulted = false; // source was (partly) unmapped; len covers what was copied

    friend bool operator==(const SourceRange&, const SourceRange&) = default;
};

struct SnapshotRegion {
    uint64_t base = 0;
    Bytes bytes;
    std::vector<SourceRange> source_ranges;
    ProtectionMode mode = ProtectionMode::copy;
    uint64_t thread_owner = 0;
    std::vector<uint64_t> protected_pages; // write_protect mode
    bool released = false;

    [[nodiscard]] bool covers(uint64_t addr, uint64_t len) const {
        for (const auto& r : source_ranges) {
            if (addr >= r.user_addr && addr + len <= r.user_addr + r.len) {
                return true;
            }
        }
        return false;
    }
};

/// Pages protected by live write_protect snapshots in one address space.
struct ProtectEntry {
    uint32_t refcount = 0;
    PageFlags saved;
};

struct AddressSpace {
    UserMemory mem;
    std::map<uint64_t, ProtectEntry> protected_pages;

    [[nodiscard]] bool write_would_stall(uint64_t addr, uint64_t len) const {
        for (uint64_t p = page_of(addr); p < addr + std::max<uint64_t>(len, 1); p += kPageSize) {
            if (protected_pages.contains(p)) {
                return true;
            }
        }
        return false;
    }

    /// A store from user space: stalls on write-protected snapshot pages.
    MemStatus user_write(uint64_t addr, std::span<const uint8_t> data) {
        if (write_would_stall(addr, data.size())) {
            return MemStatus::stalled;
        }
        return mem.write_user(addr, data);
    }

    MemStatus user_mprotect(uint64_t addr, uint64_t len, bool writable) {
        if (write_would_stall(addr, len)) {
            return MemStatus::stalled;
        }
        return mem.protect(addr, len, writable);
    }

    MemStatus user_map(uint64_t addr, uint64_t len, bool writable) {
        if (write_would_stall(addr, len)) {
            return MemStatus::stalled;
        }
        if (addr + len > kSnapshotAreaBase && addr < kSnapshotAreaBase + (uint64_t{1} << 32)) {
            return MemStatus::denied; // reserved for snapshot pages
        }
        return mem.map(addr, len, PageFlags{writable, true, true});
    }

    [[nodiscard]] uint64_t digest() const {
        uint64_t h = mem.digest();
        for (const auto& [p, e] : protected_pages) {
            h = fnv1a(words({p, e.refcount}), h);
        }
        return h;
    }
};

namespace snapshot_detail {

class Builder {
  public:
    Builder(const AddressSpace& as, SnapshotRegion& r) : as_(as), r_(r) {}

    void buffer(uint64_t addr, uint64_t len) {
        len = std::min(len, room());
        if (len == 0) {
            return;
        }
        SourceRange sr{addr, 0, r_.bytes.size(), false};
        for (uint64_t i = 0; i < len; ++i) {
            auto b = as_.mem.read(addr + i, 1);
            if (!b) {
                sr.faulted = true;
                break;
            }
            r_.bytes.push_back((*b)[0]);
            ++sr.len;
        }
        r_.source_ranges.push_back(sr);
    }

    void string(uint64_t addr, uint64_t max) {
        max = std::min(max, room());
        if (max == 0) {
            return;
        }
        bool unmapped = false;
        Bytes s = as_.mem.read_string(addr, max, &unmapped);
        SourceRange sr{addr, s.size(), r_.bytes.size(), unmapped};
        r_.bytes.insert(r_.bytes.end(), s.begin(), s.end());
        r_.source_ranges.push_back(sr);
    }

    // Reads a pointer out of bytes already in the snapshot.
    std::optional<uint64_t> pointer_at(const SourceRange& sr, uint32_t offset) const {
        if (offset + 8 > sr.len) {
            return std::nullopt;
        }
        return load_le<uint64_t>(r_.bytes, sr.offset + offset);
    }

  private:
    [[nodiscard]] uint64_t room() const { return kSnapshotBytesLimit - r_.bytes.size(); }

    const AddressSpace& as_;
    SnapshotRegion& r_;
};

} // namespace snapshot_detail

/// Copies the described argument memory of `ctx` and applies the protection
/// for `mode`. A missing descriptor gives an empty region.
inline SnapshotRegion take_snapshot(AddressSpace& as, const SyscallContext& ctx, const ArgDescriptor* desc,
                                    ProtectionMode mode, uint64_t tid) {
    SnapshotRegion r;
    r.mode = mode;
    r.thread_owner = tid;
    r.base = snapshot_base_for(tid);
    if (desc) {
        snapshot_detail::Builder b(as, r);
        for (size_t i = 0; i < desc->args.size(); ++i) {
            const ArgSpec& a = desc->args[i];
            switch (a.kind) {
            case ArgKind::scalar: break;
            case ArgKind::buffer: b.buffer(ctx.args[i], a.size); break;
            case ArgKind::string: b.string(ctx.args[i], a.size); break;
            case ArgKind::record: {
                b.buffer(ctx.args[i], a.size);
                const SourceRange rec = r.source_ranges.back();
                // Nested pointers come from the copied record, not live memory.
                for (const auto& p : a.pointers) {
                    if (auto target = b.pointer_at(rec, p.offset)) {
                        if (p.kind == ArgKind::string) {
                            b.string(*target, p.size);
                        } else {
                            b.buffer(*target, p.size);
                        }
                    }
                }
                break;
            }
            }
        }
    }
    switch (mode) {
    case ProtectionMode::copy: {
        // The per-thread page is reserved for good: read-only, may_write cleared.
        as.mem.map(r.base, kPageSize, PageFlags{false, true, false});
        Bytes page(kPageSize, 0);
        std::copy(r.bytes.begin(), r.bytes.end(), page.begin());
        as.mem.write_kernel(r.base, page);
        break;
    }
    case ProtectionMode::write_protect: {
        std::set<uint64_t> pages;
        for (const auto& sr : r.source_ranges) {
            for (uint64_t p = page_of(sr.user_addr); p < sr.user_addr + std::max<uint64_t>(sr.len, 1); p += kPageSize) {
                if (as.mem.mapped(p)) {
                    pages.insert(p);
                }
            }
        }
        for (uint64_t p : pages) {
            auto [it, fresh] = as.protected_pages.try_emplace(p);
            if (fresh) {
                it->second.saved = *as.mem.flags(p);
                PageFlags ro = it->second.saved;
                ro.writable = false;
                as.mem.set_flags(p, ro);
            }
            ++it->second.refcount;
            r.protected_pages.push_back(p);
        }
        break;
    }
    case ProtectionMode::none: break;
    }
    return r;
}

/// Syscall-exit counterpart. Idempotent.
inline void release_snapshot(AddressSpace& as, SnapshotRegion& r) {
    if (r.released) {
        return;
    }
    r.released = true;
    switch (r.mode) {
    case ProtectionMode::copy:
        as.mem.write_kernel(r.base, Bytes(kPageSize, 0));
        break;
    case ProtectionMode::write_protect:
        for (uint64_t p : r.protected_pages) {
            auto it = as.protected_pages.find(p);
            if (it == as.protected_pages.end()) {
                continue;
            }
            if (--it->second.refcount == 0) {
                as.mem.set_flags(p, it->second.saved);
                as.protected_pages.erase(it);
            }
        }
        break;
    case ProtectionMode::none: break;
    }
}

/// Serves a filter's user-memory read from the snapshot.
inline UserRead snapshot_read(const AddressSpace& as, const SnapshotRegion& r, uint64_t addr, uint64_t len,
                              bool stop_at_nul, bool sleepable) {
    if (r.mode == ProtectionMode::none) {
        // Unprotected live read.
        if (stop_at_nul) {
            bool unmapped = false;
            Bytes s = as.mem.read_string(addr, len, &unmapped);
            if (unmapped && (s.empty() || s.back() != 0)) {
                return UserRead{ReadStatus::fault, {}};
            }
            return UserRead{ReadStatus::ok, std::move(s)};
        }
        auto b = as.mem.read(addr, len);
        return b ? UserRead{ReadStatus::ok, std::move(*b)} : UserRead{ReadStatus::fault, {}};
    }
    for (const auto& sr : r.source_ranges) {
        if (addr < sr.user_addr || addr >= sr.user_addr + sr.len) {
            continue;
        }
        uint64_t start = sr.offset + (addr - sr.user_addr);
        uint64_t avail = sr.user_addr + sr.len - addr;
        if (stop_at_nul) {
            Bytes out;
            for (uint64_t i = 0; i < std::min(avail, len); ++i) {
                out.push_back(r.bytes[start + i]);
                if (out.back() == 0) {
                    return UserRead{ReadStatus::ok, std::move(out)};
                }
            }
            if (out.size() == len) {
                return UserRead{ReadStatus::ok, std::move(out)}; // truncated, caller flags it
            }
            continue; // string runs past this range
        }
        if (avail >= len) {
            return UserRead{ReadStatus::ok, Bytes(r.bytes.begin() + static_cast<std::ptrdiff_t>(start),
                                                  r.bytes.begin() + static_cast<std::ptrdiff_t>(start + len))};
        }
    }
    // Not in the snapshot.
    if (sleepable && as.mem.mapped(addr, len)) {
        return UserRead{ReadStatus::needs_fault_service, {}};
    }
    return UserRead{ReadStatus::fault, {}};
}

/// Sleepable filters: brings a missing range into the snapshot after the
/// simulated page fault has been serviced.
inline bool service_fault(AddressSpace& as, SnapshotRegion& r, uint64_t addr, uint64_t len) {
    auto live = as.mem.read(addr, len);
    if (!live || r.bytes.size() + len > kSnapshotBytesLimit) {
        return false;
    }
    r.source_ranges.push_back(SourceRange{addr, len, r.bytes.size(), false});
    r.bytes.insert(r.bytes.end(), live->begin(), live->end());
    if (r.mode == ProtectionMode::copy) {
        as.mem.write_kernel(r.base, r.bytes);
    }
    return true;
}

} // namespace sfvm
