// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#include <catch_amalgamated.hpp>

#include "json.hpp"

#include "sfvm/arg_snapshot.hpp"
#include "sfvm/assembler.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/syscalls.hpp"

using namespace sfvm;

namespace {

Bytes text(std::string_view s) { return Bytes(s.begin(), s.end()); }

SyscallContext sc(std::string_view name, std::array<uint64_t, 6> args = {}) {
    SyscallContext c;
    c.nr = *syscall_number(name);
    c.arch = kAuditArchX86_64;
    c.args = args;
    return c;
}

// Stores the low 4 bytes read from arg0 (or the helper's error code) in
// slot 0 of map "out" and allows the call.
std::string reader(bool sleepable, bool str = false, int size = 4) {
    std::string src = sleepable ? "section seccomp-sleepable\n" : "section seccomp\n";
    src += "map out array 4 8 1\n";
    src += "mov r1, r10\nadd r1, -64\nmov r2, " + std::to_string(size) + "\nld_ctx r3, arg0\n";
    src += str ? "call safe_read_user_str\n" : "call safe_read_user\n";
    src += "mov r6, r0\njne r6, 0, store\nld_map r6, r10, -64\nlsh r6, 32\nrsh r6, 32\n";
    src += "store:\nst_map r10, 0, -8\nld_imm64 r1, map:out\nmov r2, r10\nadd r2, -8\n";
    src += "call map_lookup_elem\njeq r0, 0, done\nst_map r0, r6, 0\n";
    src += "done:\nld_imm64 r0, 0x7fff0000\nexit\n";
    return src;
}

uint32_t last_read(const Engine& e, Tid t) {
    MapId out = e.find_program(e.chain_of(t).at(0))->lp.maps.at(0);
    auto v = e.find_map(out)->lookup(Bytes(4, 0));
    return static_cast<uint32_t>(load_le<uint64_t>(*v, 0));
}

struct Rig {
    Engine e;
    Tid t;
    Tid sibling;

    explicit Rig(ProtectionMode mode, bool sleepable = false, bool str = false) : e(config(mode)) {
        t = e.spawn(kInitTid);
        sibling = e.spawn_thread(t);
        auto r = e.load_program(t, assemble(reader(sleepable, str)));
        INFO(r.report.reason);
        REQUIRE(r.status == EngineStatus::ok);
        REQUIRE(e.install_filter(t, r.handle) == EngineStatus::ok);
        REQUIRE(e.mem_map(t, 0x10000, 2 * kPageSize) == MemStatus::ok);
    }

    static EngineConfig config(ProtectionMode mode) {
        EngineConfig c;
        c.protection = mode;
        return c;
    }

    [[nodiscard]] uint32_t first_read(const EnterResult& r) const {
        REQUIRE(r.action.kind == ActionKind::allow);
        return last_read(e, t);
    }
};

uint32_t le32(std::string_view s) { return load_le<uint32_t>(text(s), 0); }

} // namespace

TEST_CASE("copy mode: later user writes are invisible to the filter", "[snapshot]") {
    Rig rig(ProtectionMode::copy);
    REQUIRE(rig.e.mem_write(rig.t, 0x10000, text("AAAA")) == MemStatus::ok);
    // open's descriptor: arg0 is a string.
    auto enter = rig.e.syscall_enter(rig.t, sc("open", {0x10000}));
    REQUIRE(enter.decided);
    CHECK(rig.first_read(enter) == le32("AAAA"));
    // Concurrent thread writes after the snapshot: allowed, but not observed.
    CHECK(rig.e.mem_write(rig.sibling, 0x10000, text("BBBB")) == MemStatus::ok);
    const auto& snap = *rig.e.task(rig.t).sys->snapshot;
    auto again = snapshot_read(rig.e.address_space(rig.t), snap, 0x10000, 4, false, false);
    REQUIRE(again.status == ReadStatus::ok);
    CHECK(again.data == text("AAAA"));
    // The per-thread snapshot page cannot be written or made writable.
    CHECK(rig.e.mem_write(rig.sibling, snap.base, text("X")) == MemStatus::protection_fault);
    CHECK(rig.e.mem_protect(rig.sibling, snap.base, kPageSize, true) == MemStatus::denied);
    CHECK(rig.e.mem_map(rig.sibling, snap.base, kPageSize, true) == MemStatus::denied);
    rig.e.syscall_exit(rig.t, enter.votes.empty() ? 0 : sc("open").nr);
    CHECK(rig.e.mem_protect(rig.sibling, snap.base, kPageSize, true) == MemStatus::denied);
}

TEST_CASE("write-protect mode stalls writers until syscall exit", "[snapshot]") {
    Rig rig(ProtectionMode::write_protect);
    REQUIRE(rig.e.mem_write(rig.t, 0x10000, text("/etc/passwd\0")) == MemStatus::ok);
    auto before = rig.e.address_space(rig.t).mem.flags(0x10000);
    auto enter = rig.e.syscall_enter(rig.t, sc("open", {0x10000}));
    REQUIRE(enter.decided);
    CHECK(rig.first_read(enter) == le32("/etc"));
    CHECK(rig.e.mem_write(rig.sibling, 0x10000, text("XXXX")) == MemStatus::stalled);
    // An unrelated byte on the same page stalls too.
    CHECK(rig.e.mem_write(rig.sibling, 0x10800, text("Z")) == MemStatus::stalled);
    // The next page is untouched.
    CHECK(rig.e.mem_write(rig.sibling, 0x11000, text("Z")) == MemStatus::ok);
    CHECK(rig.e.mem_write_would_stall(rig.sibling, 0x10000, 4));
    rig.e.syscall_exit(rig.t, sc("open").nr);
    CHECK_FALSE(rig.e.mem_write_would_stall(rig.sibling, 0x10000, 4));
    CHECK(rig.e.address_space(rig.t).mem.flags(0x10000) == before);
    CHECK(rig.e.mem_write(rig.sibling, 0x10000, text("XXXX")) == MemStatus::ok);
}

TEST_CASE("release is idempotent and restores flags exactly", "[snapshot]") {
    AddressSpace as;
    as.mem.map(0x4000, kPageSize, PageFlags{true, true, true});
    as.mem.write_kernel(0x4000, text("hello\0"));
    DescriptorTable table = DescriptorTable::defaults();
    auto ctx = sc("open", {0x4000});
    SnapshotRegion a = take_snapshot(as, ctx, table.find(ctx.nr), ProtectionMode::write_protect, 7);
    SnapshotRegion b = take_snapshot(as, ctx, table.find(ctx.nr), ProtectionMode::write_protect, 8);
    CHECK(as.write_would_stall(0x4000, 1));
    release_snapshot(as, a);
    release_snapshot(as, a);
    CHECK(as.write_would_stall(0x4000, 1)); // b still holds the page
    release_snapshot(as, b);
    CHECK_FALSE(as.write_would_stall(0x4000, 1));
    CHECK(as.mem.flags(0x4000) == PageFlags{true, true, true});
}

TEST_CASE("snapshot contents for the described arguments", "[snapshot]") {
    AddressSpace as;
    as.mem.map(0x2000, kPageSize);
    as.mem.write_kernel(0x2000, text("/etc/passwd\0trailing"));
    auto table = DescriptorTable::defaults();
    auto ctx = sc("open", {0x2000});
    auto r = take_snapshot(as, ctx, table.find(ctx.nr), ProtectionMode::copy, 3);
    CHECK(r.bytes == text(std::string_view("/etc/passwd\0", 12)));
    REQUIRE(r.source_ranges.size() == 1);
    CHECK(r.source_ranges[0].user_addr == 0x2000);
    CHECK(r.base == snapshot_base_for(3));
    auto page = as.mem.read(r.base, 12);
    REQUIRE(page);
    CHECK(*page == r.bytes);
    CHECK(as.mem.flags(r.base)->may_write == false);

    SECTION("missing descriptor gives an empty region") {
        auto c2 = sc("getpid");
        auto empty = take_snapshot(as, c2, table.find(c2.nr), ProtectionMode::copy, 4);
        CHECK(empty.bytes.empty());
        CHECK(snapshot_read(as, empty, 0x2000, 4, false, false).status == ReadStatus::fault);
    }
    SECTION("unmapped source gives a partial region with a fault marker") {
        auto c3 = sc("open", {0x9000});
        auto partial = take_snapshot(as, c3, table.find(c3.nr), ProtectionMode::copy, 5);
        REQUIRE(partial.source_ranges.size() == 1);
        CHECK(partial.source_ranges[0].faulted);
        CHECK(partial.source_ranges[0].len == 0);
    }
    SECTION("nested pointers are followed one level from the copied record") {
        as.mem.map(0x5000, kPageSize);
        Bytes rec;
        put_le<uint64_t>(rec, 0x5100);
        as.mem.write_kernel(0x2800, rec);
        as.mem.write_kernel(0x5100, text("payload!"));
        auto c4 = sc("io_submit", {0, 1, 0x2800});
        auto nested = take_snapshot(as, c4, table.find(c4.nr), ProtectionMode::copy, 6);
        REQUIRE(nested.source_ranges.size() == 2);
        CHECK(nested.source_ranges[1].user_addr == 0x5100);
        auto rd = snapshot_read(as, nested, 0x5100, 8, false, false);
        REQUIRE(rd.status == ReadStatus::ok);
        CHECK(rd.data == text("payload!"));
    }
}

TEST_CASE("uncovered reads: fault when non-sleepable, serviced when sleepable", "[snapshot]") {
    SECTION("non-sleepable") {
        Rig rig(ProtectionMode::copy);
        rig.e.mem_write(rig.t, 0x11000, text("DATA"));
        // getpid has no descriptor: nothing is snapshotted.
        auto r = rig.e.syscall_enter(rig.t, sc("getpid", {0x11000}));
        REQUIRE(r.decided);
        CHECK(static_cast<int32_t>(rig.first_read(r)) == -14);
    }
    SECTION("sleepable") {
        Rig rig(ProtectionMode::copy, true);
        rig.e.mem_write(rig.t, 0x11000, text("DATA"));
        auto r = rig.e.syscall_enter(rig.t, sc("getpid", {0x11000}));
        REQUIRE_FALSE(r.decided);
        CHECK(r.block.kind == BlockKind::fault_service);
        CHECK(rig.e.can_resume(rig.t));
        auto done = rig.e.resume(rig.t);
        REQUIRE(done.decided);
        CHECK(rig.first_read(done) == le32("DATA"));
    }
    SECTION("sleepable but unmapped still faults") {
        Rig rig(ProtectionMode::copy, true);
        auto r = rig.e.syscall_enter(rig.t, sc("getpid", {0x70000}));
        REQUIRE(r.decided);
        CHECK(static_cast<int32_t>(rig.first_read(r)) == -14);
    }
}

TEST_CASE("user-memory reads honour ptrace rules", "[snapshot][ptrace]") {
    const Credentials user{1000, 1000, false, false};
    Engine e;
    Tid t = e.spawn(kInitTid);
    e.set_credentials(t, user);
    e.set_no_new_privs(t);
    auto r = e.load_program(t, assemble(reader(false)));
    REQUIRE(r.status == EngineStatus::ok);
    REQUIRE(e.install_filter(t, r.handle) == EngineStatus::ok);
    e.mem_map(t, 0x10000, kPageSize);
    e.mem_write(t, 0x10000, text("abcd\0"));
    auto read_once = [&](Tid who) {
        auto res = e.syscall_enter(who, sc("open", {0x10000}));
        REQUIRE(res.decided);
        e.syscall_exit(who, sc("open").nr);
        return last_read(e, who);
    };
    CHECK(read_once(t) == le32("abcd"));
    e.set_dumpable(t, false);
    CHECK(static_cast<int32_t>(read_once(t)) == -14);
    e.set_dumpable(t, true);
    // A child that changed credentials is out of reach for the loader.
    Tid child = e.spawn(t);
    e.set_credentials(child, Credentials{2000, 2000, false, false});
    CHECK(static_cast<int32_t>(read_once(child)) == -14);
    // Restricted scope: same uid but not a descendant.
    e.config().ptrace_scope = PtraceScope::restricted;
    Tid sib = e.spawn(t);
    CHECK(read_once(sib) == le32("abcd")); // descendant of the loader
}

TEST_CASE("descriptor files are validated", "[snapshot][descriptors]") {
    auto ok = nlohmann::json::parse(R"({"syscalls":[
        {"nr":"open","args":[{"kind":"string","max":256}]},
        {"nr":232,"args":[{"kind":"scalar"},{"kind":"buffer","size":64}]},
        {"nr":"io_submit","args":[{"kind":"scalar"},{"kind":"scalar"},
            {"kind":"record","size":8,"fields":[{"offset":0,"kind":"buffer","size":64}]}]}
    ]})");
    auto t = DescriptorTable::from_json(ok);
    REQUIRE(t.find(2));
    CHECK(t.find(2)->args[0].kind == ArgKind::string);
    REQUIRE(t.find(232));
    CHECK(t.find(232)->args[1].size == 64);

    auto deep = nlohmann::json::parse(R"({"syscalls":[{"nr":"io_submit","args":[
        {"kind":"record","size":8,"fields":[{"offset":0,"kind":"record","size":8,
            "fields":[{"offset":0,"kind":"buffer","size":8}]}]}]}]})");
    CHECK_THROWS_AS(DescriptorTable::from_json(deep), DescriptorError);
    auto big = nlohmann::json::parse(R"({"syscalls":[{"nr":"read","args":[
        {"kind":"scalar"},{"kind":"buffer","size":4097}]}]})");
    CHECK_THROWS_AS(DescriptorTable::from_json(big), DescriptorError);
    auto bad_kind = nlohmann::json::parse(R"({"syscalls":[{"nr":"read","args":[{"kind":"blob"}]}]})");
    CHECK_THROWS_AS(DescriptorTable::from_json(bad_kind), DescriptorError);
}
