// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#include <catch_amalgamated.hpp>

#include "sfvm/assembler.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/syscalls.hpp"

using namespace sfvm;

namespace {

const Credentials kUser{1000, 1000, false, false};

std::string returning(uint32_t raw) { return "ld_imm64 r0, " + std::to_string(raw) + "\nexit\n"; }

SyscallContext sc(std::string_view name, std::array<uint64_t, 6> args = {}) {
    SyscallContext c;
    c.nr = *syscall_number(name);
    c.arch = kAuditArchX86_64;
    c.args = args;
    return c;
}

HandleId load_ok(Engine& e, Tid tid, std::string_view src) {
    auto r = e.load_program(tid, assemble(src));
    INFO(r.report.reason);
    REQUIRE(r.status == EngineStatus::ok);
    return r.handle;
}

void install_ok(Engine& e, Tid tid, std::string_view src) {
    REQUIRE(e.install_filter(tid, load_ok(e, tid, src)) == EngineStatus::ok);
}

ResolvedAction call(Engine& e, Tid tid, const SyscallContext& c) {
    auto r = e.syscall_enter(tid, c);
    REQUIRE(r.decided);
    if (e.task(tid).alive) {
        e.syscall_exit(tid, c.nr);
    }
    return r.action;
}

// Serializes mremap against ftruncate in both directions.
const char* kSerializeMremapFtruncate = R"(section seccomp-sleepable
    ld_ctx r6, nr
    jeq r6, 25, mremap
    jeq r6, 77, ftruncate
    ja done
mremap:
    mov r1, 25
    mov r2, 77
    call wait_syscall
    ja done
ftruncate:
    mov r1, 77
    mov r2, 25
    call wait_syscall
done:
    ld_imm64 r0, 0x7fff0000
    exit
)";

} // namespace

TEST_CASE("install privilege rules", "[engine][install]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    e.set_credentials(t, kUser);

    SECTION("unprivileged with no_new_privs installs and the handle is closed") {
        e.set_no_new_privs(t);
        HandleId h = load_ok(e, t, returning(0x7fff0000));
        CHECK(e.handle_open(h));
        CHECK(e.install_filter(t, h) == EngineStatus::ok);
        CHECK_FALSE(e.handle_open(h));
        CHECK(e.chain_of(t).size() == 1);
        CHECK(e.install_filter(t, h) == EngineStatus::bad_handle);
    }
    SECTION("unprivileged without no_new_privs is refused") {
        HandleId h = load_ok(e, t, returning(0x7fff0000));
        CHECK(e.install_filter(t, h) == EngineStatus::permission_denied);
        CHECK(e.chain_of(t).empty());
        CHECK(e.handle_open(h));
    }
    SECTION("privileged-only configuration requires CAP_SYS_ADMIN") {
        e.config().privileged_only = true;
        e.set_no_new_privs(t);
        HandleId h = load_ok(e, t, returning(0x7fff0000));
        CHECK(e.install_filter(t, h) == EngineStatus::permission_denied);
        install_ok(e, kInitTid, returning(0x7fff0000));
    }
    SECTION("load in a child namespace, install in the parent namespace") {
        e.set_no_new_privs(t);
        // A thread shares the fd table, so it can hand the handle back.
        Tid helper = e.spawn_thread(t);
        e.new_userns(helper);
        auto lr = e.load_program(helper, assemble(returning(0x7fff0000)));
        REQUIRE(lr.status == EngineStatus::ok);
        CHECK(e.find_program(lr.prog)->load_userns == e.task(helper).userns);
        CHECK(e.install_filter(t, lr.handle) == EngineStatus::namespace_mismatch);
        CHECK(e.handle_open(lr.handle));
        CHECK(e.install_filter(helper, lr.handle) == EngineStatus::ok);
    }
    SECTION("handles belong to the loading process") {
        Tid other = e.spawn(kInitTid);
        HandleId h = load_ok(e, other, returning(0x7fff0000));
        e.set_no_new_privs(t);
        CHECK(e.install_filter(t, h) == EngineStatus::bad_handle);
    }
    SECTION("rejected programs never load") {
        auto r = e.load_program(t, assemble("ld_ctx r0, 64, 8\nexit"));
        CHECK(r.status == EngineStatus::verification_failed);
        CHECK(r.report.reason.find("context read out of bounds") != std::string::npos);
    }
    SECTION("classic installs accept only stateless programs") {
        HandleId stateless = load_ok(e, kInitTid, returning(0x7fff0000));
        HandleId stateful = load_ok(e, kInitTid, "map m array 4 8 1\nmov r0, 0\nexit");
        CHECK(e.install_filter(kInitTid, stateful, InstallFlags::classic) == EngineStatus::invalid);
        CHECK(e.install_filter(kInitTid, stateless, InstallFlags::classic) == EngineStatus::ok);
    }
}

TEST_CASE("loading pins referenced maps", "[engine][maps]") {
    Engine e;
    auto r = e.load_program(kInitTid, assemble("map a array 4 8 4\nmap b hash 8 8 4\nmov r0, 0\nexit"));
    REQUIRE(r.status == EngineStatus::ok);
    const auto& maps = e.find_program(r.prog)->lp.maps;
    REQUIRE(maps.size() == 2);
    for (MapId m : maps) {
        CHECK(e.find_map(m)->refcount == 2); // program + open map handle
        CHECK(e.find_map(m)->open_handles == 1);
    }
    REQUIRE(e.install_filter(kInitTid, r.handle) == EngineStatus::ok);
    e.close_map_handles(kInitTid);
    for (MapId m : maps) {
        REQUIRE(e.find_map(m));
        CHECK(e.find_map(m)->refcount == 1);
        CHECK(e.find_map(m)->open_handles == 0);
    }
    CHECK(e.handles().empty());
}

TEST_CASE("maps outlive their handles and stay usable from filters", "[engine][maps]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    // Counts syscalls in slot 0 and returns ERRNO(count).
    auto r = e.load_program(t, assemble(R"(map c array 4 8 1
    st_map r10, 0, -8
    ld_imm64 r1, map:c
    mov r2, r10
    add r2, -8
    call map_lookup_elem
    jeq r0, 0, out
    ld_map r6, r0, 0
    add r6, 1
    st_map r0, r6, 0
    ld_imm64 r0, 0x50000
    or r0, r6
    exit
out:
    mov r0, 0
    exit
)"));
    REQUIRE(r.status == EngineStatus::ok);
    REQUIRE(e.install_filter(t, r.handle) == EngineStatus::ok);
    e.close_map_handles(t);
    CHECK(call(e, t, sc("getpid")).data() == 1);
    CHECK(call(e, t, sc("getpid")).data() == 2);
}

TEST_CASE("chain evaluation and precedence", "[engine][chain]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    install_ok(e, t, returning(0x7fff0000));
    CHECK(call(e, t, sc("read")).kind == ActionKind::allow);

    install_ok(e, t, returning(0x50001));
    auto a = call(e, t, sc("read"));
    CHECK(a.kind == ActionKind::errno_);
    CHECK(a.data() == 1);

    Tid u = e.spawn(kInitTid);
    install_ok(e, u, returning(0x50005));
    install_ok(e, u, returning(0x80000000));
    install_ok(e, u, returning(0x7ffc0000));
    auto r = e.syscall_enter(u, sc("read"));
    REQUIRE(r.decided);
    CHECK(r.action.kind == ActionKind::kill_process);
    CHECK(r.votes.size() == 3); // every filter ran
    CHECK_FALSE(e.task(u).alive);
}

TEST_CASE("errno ties resolve to the earliest installed filter", "[engine][chain]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    install_ok(e, t, returning(0x50003));
    install_ok(e, t, returning(0x50009));
    CHECK(call(e, t, sc("read")).data() == 3);
}

TEST_CASE("runtime faults vote with the bad-filter action", "[engine]") {
    EngineConfig cfg;
    cfg.bad_filter_action = ActionKind::errno_;
    Engine e(cfg);
    Tid t = e.spawn(kInitTid);
    // Verified but faults at runtime: 33 hops through a self-referencing slot.
    auto r = e.load_program(t, assemble(R"(map jt prog_array 4 4 1
    mov r0, 0
    mov r6, 0
    ld_imm64 r2, map:jt
    tail_call r2, r6
)"));
    REQUIRE(r.status == EngineStatus::ok);
    MapId jt = e.find_program(r.prog)->lp.maps.at(0);
    HandleId mh = r.map_handles.at("jt");
    CHECK(e.map_of_handle(mh) == jt);
    Bytes key(4, 0);
    Bytes val;
    put_le<uint32_t>(val, static_cast<uint32_t>(r.prog));
    CHECK(e.update_map_via_handle(t, mh, key, val) == MapStatus::ok);
    REQUIRE(e.install_filter(t, r.handle) == EngineStatus::ok);
    auto res = e.syscall_enter(t, sc("read"));
    REQUIRE(res.decided);
    CHECK(res.action.kind == ActionKind::errno_);
    REQUIRE(res.votes.at(0).outcome.faulted);
    CHECK(res.votes.at(0).outcome.faulted->find("tail call depth") != std::string::npos);
}

TEST_CASE("fork inherits the filter chain", "[engine][fork]") {
    Engine e;
    install_ok(e, kInitTid, returning(0x50001));
    Tid child = e.spawn(kInitTid);
    Tid grandchild = e.spawn(child);
    CHECK(call(e, grandchild, sc("read")).kind == ActionKind::errno_);

    install_ok(e, child, returning(0x80000000));
    CHECK(e.chain_of(kInitTid).size() == 1);
    CHECK(e.chain_of(child).size() == 2);
    CHECK(e.chain_of(grandchild).size() == 1);

    Tid th = e.spawn_thread(child);
    CHECK(e.task(th).tgid == child);
    CHECK(e.task(th).address_space == e.task(child).address_space);
    CHECK(e.task(grandchild).address_space != e.task(child).address_space);
}

TEST_CASE("threads share their leader's task storage cell", "[engine][task_storage]") {
    Engine e;
    Tid leader = e.spawn(kInitTid);
    // ERRNO(n) where n counts calls per process.
    install_ok(e, leader, R"(map ts task_storage 8 8 64
    ld_imm64 r1, map:ts
    mov r2, 1
    call safe_task_storage_get
    jeq r0, 0, out
    ld_map r6, r0, 0
    add r6, 1
    st_map r0, r6, 0
    ld_imm64 r0, 0x50000
    or r0, r6
    exit
out:
    mov r0, 0
    exit
)");
    Tid thread = e.spawn_thread(leader);
    Tid other = e.spawn(leader);
    CHECK(call(e, leader, sc("read")).data() == 1);
    CHECK(call(e, thread, sc("read")).data() == 2);
    CHECK(call(e, other, sc("read")).data() == 1);
    CHECK(call(e, leader, sc("read")).data() == 3);
}

TEST_CASE("syscall exit bookkeeping", "[engine][exit]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    install_ok(e, t, kSerializeMremapFtruncate);
    auto r = e.syscall_enter(t, sc("mremap"));
    REQUIRE(r.decided);
    CHECK(e.inflight(25) == 1);
    e.syscall_exit(t, 25);
    CHECK(e.inflight(25) == 0);
    CHECK_THROWS_AS(e.syscall_exit(t, 25), SimulationError);
    CHECK_THROWS_AS(e.syscall_exit(e.spawn(kInitTid), 1), SimulationError);
    e.syscall_enter(t, sc("read"));
    CHECK_THROWS_AS(e.syscall_exit(t, 25), SimulationError);
    CHECK_THROWS_AS(e.syscall_enter(t, sc("read")), SimulationError);
}

TEST_CASE("wait_syscall serializes a racy pair", "[engine][serialization]") {
    Engine e;
    install_ok(e, kInitTid, kSerializeMremapFtruncate);
    Tid a = e.spawn(kInitTid);
    Tid b = e.spawn(kInitTid);
    CHECK(e.syscall_enter(a, sc("mremap")).decided);
    auto rb = e.syscall_enter(b, sc("ftruncate"));
    CHECK_FALSE(rb.decided);
    CHECK(rb.block.kind == BlockKind::wait_syscall);
    CHECK(e.task(b).blocked());
    CHECK_FALSE(e.can_resume(b));
    CHECK(e.inflight(77) == 1);
    e.syscall_exit(a, 25);
    CHECK(e.can_resume(b));
    auto resumed = e.resume(b);
    REQUIRE(resumed.decided);
    CHECK(resumed.action.kind == ActionKind::allow);
    CHECK(resumed.votes.at(0).outcome.helper_calls[9] == 1);
    e.syscall_exit(b, 77);
    CHECK(e.inflight(77) == 0);
    CHECK(e.inflight(25) == 0);
}

TEST_CASE("live policy updates need privilege", "[engine][maps]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    e.set_credentials(t, kUser);
    e.set_no_new_privs(t);
    // Denies any nr present in the hash map.
    auto r = e.load_program(t, assemble(R"(map deny hash 8 8 16
    ld_ctx r6, nr
    st_map r10, r6, -8
    ld_imm64 r1, map:deny
    mov r2, r10
    add r2, -8
    call map_lookup_elem
    jeq r0, 0, allow
    ld_imm64 r0, 0x50001
    exit
allow:
    ld_imm64 r0, 0x7fff0000
    exit
)"));
    REQUIRE(r.status == EngineStatus::ok);
    MapId deny = e.find_program(r.prog)->lp.maps.at(0);
    REQUIRE(e.install_filter(t, r.handle) == EngineStatus::ok);
    e.close_map_handles(t);
    CHECK(call(e, t, sc("madvise")).kind == ActionKind::allow);
    Bytes key;
    put_le<uint64_t>(key, 28);
    Bytes one(8, 1);
    CHECK(e.update_map_external(t, deny, key, one) == EngineStatus::permission_denied);
    CHECK(call(e, t, sc("madvise")).kind == ActionKind::allow);
    CHECK(e.update_map_external(kInitTid, deny, key, one) == EngineStatus::ok);
    CHECK(call(e, t, sc("madvise")).kind == ActionKind::errno_);
    CHECK_FALSE(e.filter_maps(t, t, 0));
    CHECK(e.filter_maps(kInitTid, t, 0) == std::vector<MapId>{deny});
}

TEST_CASE("checkpoint and restore", "[engine][criu]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    install_ok(e, t, returning(0x7fff0000));
    install_ok(e, t, R"(map c array 4 8 1
    st_map r10, 0, -8
    ld_imm64 r1, map:c
    mov r2, r10
    add r2, -8
    call map_lookup_elem
    jeq r0, 0, out
    ld_map r6, r0, 0
    add r6, 1
    st_map r0, r6, 0
    ld_imm64 r0, 0x50000
    or r0, r6
    exit
out:
    mov r0, 0
    exit
)");
    e.close_map_handles(t);
    call(e, t, sc("read"));
    call(e, t, sc("read"));

    Tid unpriv = e.spawn(kInitTid);
    e.set_credentials(unpriv, kUser);
    CHECK_FALSE(e.checkpoint(t, unpriv));

    auto blob = e.checkpoint(t, kInitTid);
    REQUIRE(blob);
    CHECK(std::string(blob->begin(), blob->begin() + 4) == "SFCK");

    // Restore into a fresh engine: decisions continue from the saved counter.
    Engine fresh;
    Tid t2 = fresh.spawn(kInitTid, t);
    auto rr = fresh.restore(*blob, kInitTid);
    REQUIRE(rr.status == EngineStatus::ok);
    CHECK(fresh.chain_of(t2).size() == 2);
    for (int i = 0; i < 3; ++i) {
        CHECK(call(fresh, t2, sc("read")) == call(e, t, sc("read")));
    }
    // A second restore appends to the existing chain.
    REQUIRE(fresh.restore(*blob, kInitTid).status == EngineStatus::ok);
    CHECK(fresh.chain_of(t2).size() == 4);

    Engine other;
    CHECK(other.restore(*blob, kInitTid).status == EngineStatus::no_such_task);
    Bytes bad = *blob;
    bad[0] = 'X';
    CHECK(other.restore(bad, kInitTid).status == EngineStatus::invalid);
    Tid u = other.spawn(kInitTid);
    other.set_credentials(u, kUser);
    CHECK(other.restore(*blob, u).status == EngineStatus::permission_denied);
}

TEST_CASE("engine copies are independent", "[engine]") {
    Engine e;
    Tid t = e.spawn(kInitTid);
    install_ok(e, t, kSerializeMremapFtruncate);
    e.syscall_enter(t, sc("mremap"));
    Engine copy = e;
    copy.syscall_exit(t, 25);
    CHECK(e.inflight(25) == 1);
    CHECK(copy.inflight(25) == 0);
    CHECK(e.digest() != copy.digest());
    e.syscall_exit(t, 25);
    CHECK(e.digest() == copy.digest());
}
