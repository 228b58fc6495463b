// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Filter generators for the policy families the engine supports: plain
// allowlists in three code shapes, count and rate limits, syscall-flow
// integrity, two-phase (temporal) filtering, serialization of racy pairs and
// an argument-check cache with per-syscall tail calls.
//
// Every generator emits assembly and returns a PolicyBundle; map contents are
// carried as MapInit entries and written by install_bundle.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfvm/action.hpp"
#include "sfvm/assembler.hpp"
#include "sfvm/bundle.hpp"
#include "sfvm/bytes.hpp"
#include "sfvm/profiles.hpp"
#include "sfvm/syscalls.hpp"
#include "sfvm/verifier.hpp"

namespace sfvm {

class PolicyError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct GenOptions {
    ResolvedAction deny = make_action(ActionKind::errno_, kEperm);
    ResolvedAction allow = make_action(ActionKind::allow);
};

namespace policy_detail {

// Builds assembly text with unique labels.
class Emitter {
  public:
    Emitter& section(bool sleepable) {
        out_ += sleepable ? "section seccomp-sleepable\n" : "section seccomp\n";
        return *this;
    }
    Emitter& map(std::string_view name, std::string_view kind, uint32_t key, uint32_t value, uint32_t max) {
        out_ += "map " + std::string(name) + " " + std::string(kind) + " " + std::to_string(key) + " " +
                std::to_string(value) + " " + std::to_string(std::max<uint32_t>(max, 1)) + "\n";
        return *this;
    }
    Emitter& op(const std::string& text) {
        out_ += "    " + text + "\n";
        return *this;
    }
    Emitter& label(const std::string& l) {
        out_ += l + ":\n";
        return *this;
    }
    std::string fresh(std::string_view stem) { return std::string(stem) + "_" + std::to_string(next_++); }

    Emitter& ret(const ResolvedAction& a) {
        op("ld_imm64 r0, " + hex(a.raw));
        return op("exit");
    }

    /// r0 = lookup(map, key at r10+off); clobbers r1-r5.
    Emitter& lookup(std::string_view map, int off) {
        op("ld_imm64 r1, map:" + std::string(map));
        op("mov r2, r10");
        op("add r2, " + std::to_string(off));
        return op("call map_lookup_elem");
    }

    /// update(map, key at r10+koff, value at r10+voff, flags 0).
    Emitter& update(std::string_view map, int koff, int voff) {
        op("ld_imm64 r1, map:" + std::string(map));
        op("mov r2, r10");
        op("add r2, " + std::to_string(koff));
        op("mov r3, r10");
        op("add r3, " + std::to_string(voff));
        op("mov r4, 0");
        return op("call map_update_elem");
    }

    static std::string hex(uint64_t v) {
        static const char* digits = "0123456789abcdef";
        std::string s;
        do {
            s.insert(s.begin(), digits[v & 0xf]);
            v >>= 4;
        } while (v);
        return "0x" + s;
    }

    [[nodiscard]] const std::string& text() const { return out_; }

  private:
    std::string out_;
    int next_ = 0;
};

inline FilterProgram build(const Emitter& em, const std::string& what) {
    FilterProgram p;
    try {
        p = assemble(em.text());
    } catch (const std::exception& e) {
        throw PolicyError(what + ": generated code does not assemble: " + e.what());
    }
    auto rep = verify(p);
    if (!rep.accepted) {
        throw PolicyError(what + ": generated code rejected by the verifier: " + rep.reason);
    }
    return p;
}

inline Bytes u64s(std::initializer_list<uint64_t> ws) {
    Bytes b;
    for (uint64_t w : ws) {
        put_le<uint64_t>(b, w);
    }
    return b;
}

inline Bytes u32(uint32_t v) {
    Bytes b;
    put_le<uint32_t>(b, v);
    return b;
}

inline void add_set_entries(PolicyBundle& b, const std::string& map, const SyscallSet& s) {
    for (int32_t nr : s) {
        b.init.push_back({map, u64s({static_cast<uint64_t>(nr)}), u64s({1})});
    }
}

// Set membership of r6 by a chain of comparisons, or a balanced tree.
inline void emit_linear(Emitter& em, const std::vector<int32_t>& v, const std::string& hit, const std::string& miss) {
    for (int32_t nr : v) {
        em.op("jeq r6, " + std::to_string(nr) + ", " + hit);
    }
    em.op("ja " + miss);
}

inline void emit_tree(Emitter& em, const std::vector<int32_t>& v, size_t lo, size_t hi, const std::string& hit,
                      const std::string& miss) {
    if (hi - lo <= 3) {
        emit_linear(em, std::vector<int32_t>(v.begin() + static_cast<std::ptrdiff_t>(lo),
                                             v.begin() + static_cast<std::ptrdiff_t>(hi)),
                    hit, miss);
        return;
    }
    size_t mid = lo + (hi - lo) / 2;
    std::string right = em.fresh("ge");
    em.op("jge r6, " + std::to_string(v[mid]) + ", " + right);
    emit_tree(em, v, lo, mid, hit, miss);
    em.label(right);
    emit_tree(em, v, mid, hi, hit, miss);
}

} // namespace policy_detail

// ---------------------------------------------------------------------------
// Allow/deny lists

enum class ListStyle : uint8_t { linear, binary, hashmap };

inline const char* list_style_name(ListStyle s) {
    switch (s) {
    case ListStyle::linear: return "linear";
    case ListStyle::binary: return "binary";
    case ListStyle::hashmap: return "hashmap";
    }
    return "?";
}

inline std::optional<ListStyle> parse_list_style(std::string_view s) {
    for (auto st : {ListStyle::linear, ListStyle::binary, ListStyle::hashmap}) {
        if (s == list_style_name(st)) {
            return st;
        }
    }
    return std::nullopt;
}

/// Members of `set` get `on_hit`, everything else `on_miss`.
inline PolicyBundle gen_list(const SyscallSet& set, ListStyle style, const ResolvedAction& on_hit,
                             const ResolvedAction& on_miss, const std::string& name) {
    using namespace policy_detail;
    if (set.empty()) {
        throw PolicyError(name + ": the syscall set is empty");
    }
    std::vector<int32_t> v(set.begin(), set.end());
    Emitter em;
    em.section(false);
    PolicyBundle b;
    if (style == ListStyle::hashmap) {
        em.map("members", "hash", 8, 8, static_cast<uint32_t>(v.size()));
    }
    em.op("ld_ctx r6, nr");
    switch (style) {
    case ListStyle::linear:
        emit_linear(em, v, "hit", "miss");
        break;
    case ListStyle::binary:
        emit_tree(em, v, 0, v.size(), "hit", "miss");
        break;
    case ListStyle::hashmap:
        em.op("st_map r10, r6, -8");
        em.lookup("members", -8);
        em.op("jne r0, 0, hit");
        em.op("ja miss");
        add_set_entries(b, "members", set);
        break;
    }
    em.label("hit").ret(on_hit);
    em.label("miss").ret(on_miss);
    b.name = name;
    b.main = build(em, name);
    return b;
}

inline PolicyBundle gen_allowlist(const SyscallSet& set, ListStyle style, const GenOptions& o = {}) {
    return gen_list(set, style, o.allow, o.deny, std::string("allowlist-") + list_style_name(style));
}

inline PolicyBundle gen_denylist(const SyscallSet& set, ListStyle style, const GenOptions& o = {}) {
    return gen_list(set, style, o.deny, o.allow, std::string("denylist-") + list_style_name(style));
}

// ---------------------------------------------------------------------------
// Count limit

struct CountLimitSpec {
    int32_t nr = 0;
    std::optional<uint32_t> arg_index; // count only calls whose arg matches
    uint64_t arg_value = 0;
    uint64_t max_count = 0;
};

/// Allows the first max_count matching calls and denies every later one.
/// Non-matching calls are allowed and not counted.
inline PolicyBundle gen_count_limit(const CountLimitSpec& s, const GenOptions& o = {}) {
    using namespace policy_detail;
    if (s.arg_index && *s.arg_index > 5) {
        throw PolicyError("count limit: arg index must be 0..5");
    }
    Emitter em;
    em.section(false).map("counter", "array", 4, 8, 1);
    em.op("ld_ctx r6, nr");
    em.op("jne r6, " + std::to_string(s.nr) + ", allow");
    if (s.arg_index) {
        em.op("ld_ctx r7, arg" + std::to_string(*s.arg_index));
        em.op("ld_imm64 r8, " + Emitter::hex(s.arg_value));
        em.op("jne r7, r8, allow");
    }
    em.op("st_map r10, 0, -8");
    em.lookup("counter", -8);
    em.op("jeq r0, 0, deny");
    em.op("ld_map r7, r0, 0");
    em.op("jge r7, " + std::to_string(s.max_count) + ", deny");
    em.op("add r7, 1");
    em.op("st_map r0, r7, 0");
    em.label("allow").ret(o.allow);
    em.label("deny").ret(o.deny);
    std::string name = "count-limit-" + syscall_label(s.nr);
    return PolicyBundle::single(name, build(em, name));
}

// ---------------------------------------------------------------------------
// Rate limit (token bucket)

struct RateLimitSpec {
    int32_t nr = 0;
    uint64_t capacity = 1;      // tokens
    double refill_per_sec = 1;  // tokens per second, resolution 0.001
};

namespace policy_detail {
// One token in bucket units; with refill expressed in milli-tokens per second
// the refill per nanosecond is exactly refill_milli units.
inline constexpr uint64_t kTokenUnits = 1'000'000'000'000ULL;
} // namespace policy_detail

/// Token bucket over ktime_get_ns. The bucket starts full at the first
/// matching call. Cell layout: last refill ns, tokens (in units), started.
inline PolicyBundle gen_rate_limit(const RateLimitSpec& s, const GenOptions& o = {}) {
    using namespace policy_detail;
    if (s.capacity < 1) {
        throw PolicyError("rate limit: capacity must be at least 1");
    }
    if (!(s.refill_per_sec > 0)) {
        throw PolicyError("rate limit: refill must be positive");
    }
    auto rate = static_cast<uint64_t>(std::llround(s.refill_per_sec * 1000.0));
    if (rate == 0) {
        throw PolicyError("rate limit: refill below 0.001 tokens per second");
    }
    if (s.capacity > UINT64_MAX / kTokenUnits) {
        throw PolicyError("rate limit: capacity too large");
    }
    const uint64_t cap = s.capacity * kTokenUnits;
    const uint64_t fill_ns = (cap + rate - 1) / rate; // empty to full

    Emitter em;
    em.section(false).map("bucket", "array", 4, 24, 1);
    em.op("ld_ctx r6, nr");
    em.op("jne r6, " + std::to_string(s.nr) + ", allow");
    em.op("st_map r10, 0, -8");
    em.lookup("bucket", -8);
    em.op("jeq r0, 0, deny");
    em.op("mov r9, r0");
    em.op("call ktime_get_ns");
    em.op("mov r8, r0");
    em.op("ld_map r7, r9, 16");
    em.op("jne r7, 0, refill");
    em.op("st_map r9, 1, 16");
    em.op("st_map r9, r8, 0");
    em.op("ja full");
    em.label("refill");
    em.op("ld_map r7, r9, 0");
    em.op("st_map r9, r8, 0");
    em.op("jge r7, r8, take"); // clock did not advance
    em.op("mov r5, r8");
    em.op("sub r5, r7");
    em.op("jge r5, " + Emitter::hex(fill_ns) + ", full");
    em.op("mul r5, " + std::to_string(rate));
    em.op("ld_map r7, r9, 8");
    em.op("add r7, r5");
    em.op("ld_imm64 r4, " + Emitter::hex(cap));
    em.op("jle r7, r4, store");
    em.label("full");
    em.op("ld_imm64 r7, " + Emitter::hex(cap));
    em.label("store");
    em.op("st_map r9, r7, 8");
    em.label("take");
    em.op("ld_map r7, r9, 8");
    em.op("ld_imm64 r4, " + Emitter::hex(kTokenUnits));
    em.op("jlt r7, r4, deny");
    em.op("sub r7, r4");
    em.op("st_map r9, r7, 8");
    em.label("allow").ret(o.allow);
    em.label("deny").ret(o.deny);
    std::string name = "rate-limit-" + syscall_label(s.nr);
    return PolicyBundle::single(name, build(em, name));
}

// ---------------------------------------------------------------------------
// Syscall-flow integrity

/// Pseudo-syscall naming the state before the first filtered call.
inline constexpr int32_t kSfipStart = -1;

struct SfipSpec {
    std::vector<int32_t> syscalls;                // index -> nr
    std::vector<std::vector<bool>> matrix;        // matrix[from][to]
    std::map<int32_t, std::set<uint64_t>> origin; // nr -> valid calling addresses; absent nr is unchecked
    std::set<int32_t> start;                      // valid first calls; empty means none

    void validate() const {
        const size_t n = syscalls.size();
        if (n == 0) {
            throw PolicyError("sfip: no syscalls");
        }
        if (std::set<int32_t>(syscalls.begin(), syscalls.end()).size() != n) {
            throw PolicyError("sfip: duplicate syscall in index list");
        }
        if (matrix.size() != n ||
            std::any_of(matrix.begin(), matrix.end(), [n](const auto& row) { return row.size() != n; })) {
            throw PolicyError("sfip: transition matrix must be " + std::to_string(n) + "x" + std::to_string(n));
        }
        for (const auto& [nr, addrs] : origin) {
            if (std::find(syscalls.begin(), syscalls.end(), nr) == syscalls.end()) {
                throw PolicyError("sfip: origin entry for " + syscall_label(nr) + " outside the index list");
            }
        }
        for (int32_t nr : start) {
            if (std::find(syscalls.begin(), syscalls.end(), nr) == syscalls.end()) {
                throw PolicyError("sfip: start entry " + syscall_label(nr) + " outside the index list");
            }
        }
    }

    [[nodiscard]] bool allows(int32_t from, int32_t to) const {
        auto idx = [&](int32_t nr) -> std::optional<size_t> {
            auto it = std::find(syscalls.begin(), syscalls.end(), nr);
            if (it == syscalls.end()) {
                return std::nullopt;
            }
            return static_cast<size_t>(it - syscalls.begin());
        };
        auto t = idx(to);
        if (!t) {
            return false;
        }
        if (from == kSfipStart) {
            return start.contains(to);
        }
        auto f = idx(from);
        return f && matrix[*f][*t];
    }
};

/// The previous allowed syscall lives in a one-slot array (0 = start, else
/// nr + 1). A call is allowed when (prev, nr) is in the transition map and,
/// for syscalls with an origin set, (nr, ip) is in the origin map.
inline PolicyBundle gen_sfip(const SfipSpec& s, const GenOptions& o = {}) {
    using namespace policy_detail;
    s.validate();
    const size_t n = s.syscalls.size();
    auto state_of = [](int32_t nr) { return nr == kSfipStart ? 0ULL : static_cast<uint64_t>(nr) + 1; };

    PolicyBundle b;
    size_t transitions = s.start.size();
    size_t origins = 0;
    for (const auto& row : s.matrix) {
        transitions += static_cast<size_t>(std::count(row.begin(), row.end(), true));
    }
    for (const auto& [nr, addrs] : s.origin) {
        origins += addrs.size();
    }
    auto flags_for = [&](int32_t to) { return s.origin.contains(to) ? 3ULL : 1ULL; };
    for (int32_t to : s.start) {
        b.init.push_back({"transitions", u64s({0, state_of(to)}), u64s({flags_for(to)})});
    }
    for (size_t f = 0; f < n; ++f) {
        for (size_t t = 0; t < n; ++t) {
            if (s.matrix[f][t]) {
                b.init.push_back({"transitions", u64s({state_of(s.syscalls[f]), state_of(s.syscalls[t])}),
                                  u64s({flags_for(s.syscalls[t])})});
            }
        }
    }
    for (const auto& [nr, addrs] : s.origin) {
        for (uint64_t a : addrs) {
            b.init.push_back({"origins", u64s({static_cast<uint64_t>(nr), a}), u64s({1})});
        }
    }

    Emitter em;
    em.section(false);
    em.map("prev", "array", 4, 8, 1);
    em.map("transitions", "hash", 16, 8, static_cast<uint32_t>(transitions));
    em.map("origins", "hash", 16, 8, static_cast<uint32_t>(origins));
    em.op("ld_ctx r6, nr");
    em.op("st_map r10, 0, -8");
    em.lookup("prev", -8);
    em.op("jeq r0, 0, deny");
    em.op("mov r9, r0");
    em.op("ld_map r7, r9, 0");
    em.op("mov r8, r6");
    em.op("add r8, 1");
    em.op("st_map r10, r7, -24");
    em.op("st_map r10, r8, -16");
    em.lookup("transitions", -24);
    em.op("jeq r0, 0, deny");
    em.op("ld_map r7, r0, 0");
    em.op("jset r7, 2, origin");
    em.op("ja advance");
    em.label("origin");
    em.op("ld_ctx r7, ip");
    em.op("st_map r10, r6, -24");
    em.op("st_map r10, r7, -16");
    em.lookup("origins", -24);
    em.op("jeq r0, 0, deny");
    em.label("advance");
    em.op("st_map r9, r8, 0");
    em.ret(o.allow);
    em.label("deny").ret(o.deny);
    b.name = "sfip";
    b.main = build(em, b.name);
    return b;
}

// ---------------------------------------------------------------------------
// Temporal (two-phase) filtering

/// Phase 0 allows s_init and the marker; the marker switches to phase 1,
/// which allows s_serv only.
inline PolicyBundle gen_temporal(const PhaseProfile& p, const GenOptions& o = {}) {
    using namespace policy_detail;
    Emitter em;
    em.section(false);
    em.map("phase", "array", 4, 8, 1);
    em.map("init_set", "hash", 8, 8, static_cast<uint32_t>(p.s_init.size()));
    em.map("serv_set", "hash", 8, 8, static_cast<uint32_t>(p.s_serv.size()));
    em.op("ld_ctx r6, nr");
    em.op("st_map r10, r6, -8");
    em.op("st_map r10, 0, -16");
    em.lookup("phase", -16);
    em.op("jeq r0, 0, deny");
    em.op("ld_map r7, r0, 0");
    em.op("jne r7, 0, serving");
    em.op("jeq r6, " + std::to_string(p.phase_marker_nr) + ", flip");
    em.lookup("init_set", -8);
    em.op("jne r0, 0, allow");
    em.op("ja deny");
    em.label("flip");
    em.op("st_map r0, 1, 0");
    em.op("ja allow");
    em.label("serving");
    em.lookup("serv_set", -8);
    em.op("jne r0, 0, allow");
    em.label("deny").ret(o.deny);
    em.label("allow").ret(o.allow);
    PolicyBundle b;
    b.name = "temporal-" + p.name;
    add_set_entries(b, "init_set", p.s_init);
    add_set_entries(b, "serv_set", p.s_serv);
    b.main = build(em, b.name);
    return b;
}

/// The classic-filter model of the same profile: one stateless allowlist of
/// the union for the whole lifetime, followed by an s_serv allowlist that is
/// stacked at the phase switch. Both install as classic filters.
inline std::vector<PolicyBundle> gen_cbpf_baseline(const PhaseProfile& p, const GenOptions& o = {}) {
    auto first = gen_allowlist(p.s_union(), ListStyle::linear, o);
    first.name = "cbpf-union-" + p.name;
    auto second = gen_allowlist(p.s_serv.empty() ? SyscallSet{p.phase_marker_nr} : p.s_serv, ListStyle::linear, o);
    second.name = "cbpf-serv-" + p.name;
    return {std::move(first), std::move(second)};
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr uint32_t kMaxSerializationPartners = 4;

using SyscallPair = std::pair<int32_t, int32_t>;

/// For every nr with partners, calls wait_syscall(nr, partner) for each
/// partner in turn. Partners live in a hash map keyed by (nr, slot) so pairs
/// can be added at runtime.
inline PolicyBundle gen_serialization(const std::vector<SyscallPair>& pairs, uint32_t capacity = 64,
                                      const GenOptions& o = {}) {
    using namespace policy_detail;
    std::map<int32_t, std::vector<int32_t>> partners;
    auto add = [&](int32_t a, int32_t b) {
        auto& v = partners[a];
        if (std::find(v.begin(), v.end(), b) == v.end()) {
            v.push_back(b);
        }
        if (v.size() > kMaxSerializationPartners) {
            throw PolicyError("serialization: " + syscall_label(a) + " has more than " +
                              std::to_string(kMaxSerializationPartners) + " partners");
        }
    };
    for (const auto& [a, b] : pairs) {
        add(a, b);
        add(b, a);
    }
    PolicyBundle b;
    size_t entries = 0;
    for (const auto& [nr, ps] : partners) {
        for (size_t i = 0; i < ps.size(); ++i) {
            b.init.push_back({"partners", u64s({static_cast<uint64_t>(nr), i}), u64s({static_cast<uint64_t>(ps[i])})});
            ++entries;
        }
    }
    if (entries > capacity) {
        throw PolicyError("serialization: capacity below the number of partner entries");
    }

    Emitter em;
    em.section(true);
    em.map("partners", "hash", 16, 8, capacity);
    em.op("ld_ctx r6, nr");
    em.op("st_map r10, r6, -16");
    for (uint32_t i = 0; i < kMaxSerializationPartners; ++i) {
        em.op("st_map r10, " + std::to_string(i) + ", -8");
        em.lookup("partners", -16);
        em.op("jeq r0, 0, done");
        em.op("ld_map r2, r0, 0");
        em.op("mov r1, r6");
        em.op("call wait_syscall");
    }
    em.label("done").ret(o.allow);
    b.name = "serialization";
    b.main = build(em, b.name);
    return b;
}

// ---------------------------------------------------------------------------
// Argument-check cache with per-syscall check programs

inline constexpr size_t kDracoBlobSize = 48; // nr + arg0..arg4

struct ArgRule {
    uint32_t index = 0;
    std::vector<uint64_t> allowed;
};

struct DracoSpec {
    std::map<int32_t, std::vector<ArgRule>> checks; // nr -> rules, all must hold
    uint32_t cache_entries = 1024;
    bool cache = true;
};

/// A dispatcher tail-calls the check program of the current nr through a
/// prog_array; syscalls without a check program are denied. Each check
/// program first looks up the 48-byte (nr, arg0..arg4) record in the shared
/// cache: a hit allows at once, a miss runs the argument rules and records
/// the record when they pass.
inline PolicyBundle gen_draco(const DracoSpec& s, const GenOptions& o = {}) {
    using namespace policy_detail;
    if (s.checks.empty()) {
        throw PolicyError("draco: no syscalls");
    }
    const int32_t max_nr = s.checks.rbegin()->first;
    if (s.checks.begin()->first < 0 || max_nr > 4095) {
        throw PolicyError("draco: syscall numbers must be in 0..4095");
    }
    const auto slots = static_cast<uint32_t>(max_nr + 1);
    auto declare = [&](Emitter& em) {
        em.map("checks", "prog_array", 4, 4, slots);
        em.map("cache", "hash", kDracoBlobSize, 8, s.cache_entries);
    };

    PolicyBundle b;
    b.name = s.cache ? "draco" : "draco-nocache";
    {
        Emitter em;
        em.section(false);
        declare(em);
        em.op("ld_ctx r6, nr");
        em.op("jgt r6, " + std::to_string(max_nr) + ", deny");
        em.op("ld_imm64 r0, " + Emitter::hex(o.deny.raw)); // result when the slot is empty
        em.op("ld_imm64 r2, map:checks");
        em.op("tail_call r2, r6");
        em.label("deny").ret(o.deny);
        b.main = build(em, b.name + "/dispatch");
    }
    for (const auto& [nr, rules] : s.checks) {
        Emitter em;
        em.section(false);
        declare(em);
        for (const auto& r : rules) {
            if (r.index > 5) {
                throw PolicyError("draco: arg index must be 0..5");
            }
            if (r.allowed.empty()) {
                throw PolicyError("draco: rule for arg" + std::to_string(r.index) + " allows nothing");
            }
        }
        if (s.cache) {
            em.op("ld_ctx r6, nr");
            em.op("st_map r10, r6, -48");
            for (int i = 0; i < 5; ++i) {
                em.op("ld_ctx r7, arg" + std::to_string(i));
                em.op("st_map r10, r7, " + std::to_string(-40 + 8 * i));
            }
            em.lookup("cache", -48);
            em.op("jne r0, 0, allow");
        }
        for (size_t k = 0; k < rules.size(); ++k) {
            const auto& r = rules[k];
            std::string ok = em.fresh("rule_ok");
            em.op("ld_ctx r7, arg" + std::to_string(r.index));
            for (uint64_t v : r.allowed) {
                em.op("ld_imm64 r8, " + Emitter::hex(v));
                em.op("jeq r7, r8, " + ok);
            }
            em.op("ja deny");
            em.label(ok);
        }
        if (s.cache) {
            em.op("st_map r10, 1, -56");
            em.update("cache", -48, -56);
        }
        em.label("allow").ret(o.allow);
        em.label("deny").ret(o.deny);
        std::string name = "check_" + std::to_string(nr);
        b.aux.emplace_back(name, build(em, b.name + "/" + name));
        b.slots.push_back({"checks", static_cast<uint32_t>(nr), name});
    }
    return b;
}

} // namespace sfvm
