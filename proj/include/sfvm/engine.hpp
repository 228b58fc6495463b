// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// The seccomp control plane: tasks, program load and install, chain
// evaluation, in-flight syscall counters, argument snapshots and
// checkpoint/restore.
//
// An Engine is a plain value. Copying it copies every task, map and address
// space, which is what the interleaving explorer relies on.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfvm/action.hpp"
#include "sfvm/arg_snapshot.hpp"
#include "sfvm/bytes.hpp"
#include "sfvm/context.hpp"
#include "sfvm/maps.hpp"
#include "sfvm/program.hpp"
#include "sfvm/verifier.hpp"
#include "sfvm/vm.hpp"

namespace sfvm {

using Tid = uint64_t;
using HandleId = uint64_t;
using AsId = uint64_t;

inline constexpr Tid kInitTid = 1;
inline constexpr UserNsId kInitUserNs = 0;

struct Credentials {
    uint32_t uid = 0;
    uint32_t gid = 0;
    bool cap_sys_admin = false;
    bool cap_sys_ptrace = false;

    static Credentials root() { return {0, 0, true, true}; }
    friend bool operator==(const Credentials&, const Credentials&) = default;
};

enum class PtraceScope : uint8_t { classic, restricted };

struct EngineConfig {
    bool privileged_only = false;
    ActionKind bad_filter_action = ActionKind::kill_thread;
    PtraceScope ptrace_scope = PtraceScope::classic;
    ProtectionMode protection = ProtectionMode::copy;
    std::optional<MapId> serialization_table;
    VerifierConfig verifier;
    uint64_t vm_step_limit = 1000000;
    bool trace_vm = false;
};

enum class EngineStatus : uint8_t {
    ok,
    permission_denied,  // EACCES
    namespace_mismatch, // load and install user namespaces differ
    bad_handle,         // EBADF
    invalid,            // EINVAL
    no_such_task,       // ESRCH
    verification_failed,
    busy,               // task is inside a syscall
};

inline const char* engine_status_name(EngineStatus s) {
    switch (s) {
    case EngineStatus::ok: return "ok";
    case EngineStatus::permission_denied: return "permission_denied";
    case EngineStatus::namespace_mismatch: return "namespace_mismatch";
    case EngineStatus::bad_handle: return "bad_handle";
    case EngineStatus::invalid: return "invalid";
    case EngineStatus::no_such_task: return "no_such_task";
    case EngineStatus::verification_failed: return "verification_failed";
    case EngineStatus::busy: return "busy";
    }
    return "?";
}

/// Broken event sequences (exit without enter, unknown task, ...).
class SimulationError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

enum class InstallFlags : uint8_t { classic, extended };

/// Persistent singly linked chain: forks share the prefix.
struct ChainLink {
    ProgId prog;
    std::shared_ptr<const ChainLink> prev;
    size_t length;
};
using ChainPtr = std::shared_ptr<const ChainLink>;

inline std::vector<ProgId> chain_programs(const ChainPtr& c) {
    std::vector<ProgId> out(c ? c->length : 0);
    size_t i = out.size();
    for (const ChainLink* l = c.get(); l; l = l->prev.get()) {
        out[--i] = l->prog;
    }
    return out;
}

struct FilterVote {
    size_t chain_index = 0;
    ProgId prog = 0;
    ResolvedAction action;
    VmOutcome outcome;
};

/// State of a syscall between entry and exit.
struct PendingSyscall {
    SyscallContext ctx;
    std::vector<ProgId> chain;
    size_t next_filter = 0;
    std::optional<VmState> vm;
    std::vector<FilterVote> votes;
    std::optional<SnapshotRegion> snapshot;
    std::set<int64_t> inflight_held; // nrs this invocation incremented
    std::set<uint64_t> unserviceable; // fault-service addresses that failed
    bool decided = false;
    ResolvedAction action;
};

struct Task {
    Tid tid = 0;
    Tid tgid = 0;
    Tid parent = 0;
    Credentials creds;
    bool no_new_privs = false;
    bool dumpable = true;
    UserNsId userns = kInitUserNs;
    AsId address_space = 0;
    ChainPtr chain;
    bool alive = true;
    std::optional<PendingSyscall> sys;

    [[nodiscard]] bool blocked() const { return sys && sys->vm && sys->vm->status == VmStatus::blocked; }
};

struct EnterResult {
    bool decided = false;
    ResolvedAction action;
    std::vector<FilterVote> votes;
    VmBlock block;

    [[nodiscard]] uint64_t total_steps() const {
        uint64_t n = 0;
        for (const auto& v : votes) {
            n += v.outcome.steps_executed;
        }
        return n;
    }
};

struct LoadResult {
    EngineStatus status = EngineStatus::ok;
    HandleId handle = 0;
    ProgId prog = 0;
    std::map<std::string, HandleId> map_handles; // maps created by this load
    VerifierReport report;
};

struct Handle {
    enum class Kind : uint8_t { program, map } kind;
    uint64_t object;
    Tid owner_tgid;
};

struct ProgramEntry {
    LoadedProgram lp;
    UserNsId load_userns = kInitUserNs;
    Tid loader_tid = 0;
    Tid loader_tgid = 0;
    Credentials loader_creds;
    uint32_t refs = 0; // open handles + installs + prog_array slots
};

class Engine : public HelperHost {
  public:
    explicit Engine(EngineConfig cfg = {}, DescriptorTable descriptors = DescriptorTable::defaults())
        : cfg_(std::move(cfg)), descriptors_(std::move(descriptors)) {
        Task init;
        init.tid = kInitTid;
        init.tgid = kInitTid;
        init.creds = Credentials::root();
        init.address_space = new_address_space();
        tasks_.emplace(kInitTid, std::move(init));
    }

    Engine(const Engine& o) { *this = o; }
    Engine& operator=(const Engine& o) {
        if (this != &o) {
            cfg_ = o.cfg_;
            descriptors_ = o.descriptors_;
            tasks_ = o.tasks_;
            spaces_ = o.spaces_;
            maps_ = o.maps_;
            programs_ = o.programs_;
            handles_ = o.handles_;
            inflight_ = o.inflight_;
            clock_ns_ = o.clock_ns_;
            next_as_ = o.next_as_;
            next_prog_ = o.next_prog_;
            next_handle_ = o.next_handle_;
            next_userns_ = o.next_userns_;
            current_ = nullptr;
        }
        return *this;
    }
    Engine(Engine&&) = default;
    Engine& operator=(Engine&&) = default;
    ~Engine() override = default;

    // ------------------------------------------------------------ accessors

    [[nodiscard]] const EngineConfig& config() const { return cfg_; }
    EngineConfig& config() { return cfg_; }
    [[nodiscard]] const DescriptorTable& descriptors() const { return descriptors_; }

    [[nodiscard]] bool has_task(Tid tid) const { return tasks_.contains(tid); }
    [[nodiscard]] const Task& task(Tid tid) const { return const_cast<Engine*>(this)->task_mut(tid); }
    [[nodiscard]] const std::map<Tid, Task>& tasks() const { return tasks_; }
    [[nodiscard]] const AddressSpace& address_space(Tid tid) const { return spaces_.at(task(tid).address_space); }
    AddressSpace& address_space_mut(Tid tid) { return spaces_.at(task(tid).address_space); }

    [[nodiscard]] const MapTable& maps() const { return maps_; }
    [[nodiscard]] const PolicyMap* find_map(MapId id) const { return maps_.find(id); }
    [[nodiscard]] const ProgramEntry* find_program(ProgId id) const {
        auto it = programs_.find(id);
        return it == programs_.end() ? nullptr : &it->second;
    }
    [[nodiscard]] const std::map<HandleId, Handle>& handles() const { return handles_; }
    [[nodiscard]] bool handle_open(HandleId h) const { return handles_.contains(h); }

    [[nodiscard]] int64_t inflight(int64_t nr) const {
        auto it = inflight_.find(nr);
        return it == inflight_.end() ? 0 : it->second;
    }
    [[nodiscard]] const std::map<int64_t, int64_t>& inflight_counters() const { return inflight_; }

    [[nodiscard]] uint64_t clock_ns() const { return clock_ns_; }
    void advance_clock(uint64_t dt_ns) { clock_ns_ += dt_ns; }
    void set_clock(uint64_t ns) { clock_ns_ = ns; }

    [[nodiscard]] std::vector<ProgId> chain_of(Tid tid) const { return chain_programs(task(tid).chain); }

    // ---------------------------------------------------------------- tasks

    /// fork(): a new process with a copy of the parent's address space.
    Tid spawn(Tid parent, std::optional<Tid> want = std::nullopt) {
        const Task& p = live_task(parent);
        Tid tid = pick_tid(want);
        Task c = clone_identity(p, tid);
        c.tgid = tid;
        AsId as = next_as_++;
        spaces_.emplace(as, spaces_.at(p.address_space));
        c.address_space = as;
        tasks_.emplace(tid, std::move(c));
        return tid;
    }

    /// clone(CLONE_THREAD): shares the thread group and address space.
    Tid spawn_thread(Tid parent, std::optional<Tid> want = std::nullopt) {
        const Task& p = live_task(parent);
        Tid tid = pick_tid(want);
        Task c = clone_identity(p, tid);
        c.tgid = p.tgid;
        c.address_space = p.address_space;
        tasks_.emplace(tid, std::move(c));
        return tid;
    }

    /// The task exits (or is killed from outside the filter path).
    void terminate(Tid tid) {
        Task& t = task_mut(tid);
        if (t.alive) {
            kill(t, false);
        }
    }

    void set_no_new_privs(Tid tid) { live_task(tid).no_new_privs = true; }
    void set_dumpable(Tid tid, bool d) { live_task(tid).dumpable = d; }
    void set_credentials(Tid tid, const Credentials& c) { live_task(tid).creds = c; }

    /// unshare(CLONE_NEWUSER): fresh namespace with full capabilities inside it.
    UserNsId new_userns(Tid tid) {
        Task& t = live_task(tid);
        t.userns = next_userns_++;
        t.creds.cap_sys_admin = true;
        t.creds.cap_sys_ptrace = true;
        return t.userns;
    }

    // ------------------------------------------------------------- programs

    /// Verifies and loads a program. `bind` maps declared map names to open
    /// map handles of the caller; other declared maps are created fresh.
    LoadResult load_program(Tid tid, FilterProgram prog, const std::map<std::string, HandleId>& bind = {}) {
        const Task& t = live_task(tid);
        LoadResult res;
        res.report = verify(prog, cfg_.verifier);
        if (!res.report.accepted) {
            res.status = EngineStatus::verification_failed;
            return res;
        }
        LoadedProgram lp;
        std::vector<std::pair<std::string, MapId>> created;
        for (const auto& decl : prog.map_refs) {
            auto b = bind.find(decl.name);
            if (b != bind.end()) {
                auto h = handles_.find(b->second);
                if (h == handles_.end() || h->second.kind != Handle::Kind::map || h->second.owner_tgid != t.tgid) {
                    res.status = EngineStatus::bad_handle;
                    release_created(created);
                    return res;
                }
                const PolicyMap* m = maps_.find(h->second.object);
                if (!m || !same_shape(m->decl(), decl)) {
                    res.status = EngineStatus::invalid;
                    release_created(created);
                    return res;
                }
                lp.maps.push_back(h->second.object);
                continue;
            }
            MapId id = maps_.create(decl);
            created.emplace_back(decl.name, id);
            lp.maps.push_back(id);
        }
        for (MapId id : lp.maps) {
            maps_.retain(id); // pinned by the program
        }
        for (const auto& [name, id] : created) {
            res.map_handles[name] = open_map_handle(t.tgid, id);
        }
        prog.load_userns = t.userns;
        lp.prog = std::move(prog);
        ProgId pid = next_prog_++;
        ProgramEntry e;
        e.lp = std::move(lp);
        e.load_userns = t.userns;
        e.loader_tid = t.tid;
        e.loader_tgid = t.tgid;
        e.loader_creds = t.creds;
        e.refs = 1;
        programs_.emplace(pid, std::move(e));
        HandleId h = next_handle_++;
        handles_.emplace(h, Handle{Handle::Kind::program, pid, t.tgid});
        res.handle = h;
        res.prog = pid;
        return res;
    }

    EngineStatus install_filter(Tid tid, HandleId handle, InstallFlags flags = InstallFlags::extended) {
        Task& t = live_task(tid);
        auto h = handles_.find(handle);
        if (h == handles_.end() || h->second.kind != Handle::Kind::program || h->second.owner_tgid != t.tgid) {
            return EngineStatus::bad_handle;
        }
        ProgramEntry& e = programs_.at(h->second.object);
        if (cfg_.privileged_only && !(t.creds.cap_sys_admin && t.userns == kInitUserNs)) {
            return EngineStatus::permission_denied;
        }
        if (!t.creds.cap_sys_admin && !t.no_new_privs) {
            return EngineStatus::permission_denied;
        }
        if (t.userns != e.load_userns) {
            return EngineStatus::namespace_mismatch;
        }
        if (flags == InstallFlags::classic && needs_extended(e.lp.prog)) {
            return EngineStatus::invalid;
        }
        ProgId pid = h->second.object;
        size_t len = t.chain ? t.chain->length : 0;
        t.chain = std::make_shared<const ChainLink>(ChainLink{pid, t.chain, len + 1});
        ++e.refs;
        // Tamper protection: the loader never keeps a handle to an installed filter.
        close_handle(handle);
        return EngineStatus::ok;
    }

    EngineStatus close_handle(HandleId handle) {
        auto h = handles_.find(handle);
        if (h == handles_.end()) {
            return EngineStatus::bad_handle;
        }
        Handle hd = h->second;
        handles_.erase(h);
        if (hd.kind == Handle::Kind::program) {
            unref_program(hd.object);
        } else if (PolicyMap* m = maps_.find(hd.object)) {
            if (m->open_handles > 0) {
                --m->open_handles;
            }
            maps_.release(hd.object);
        }
        return EngineStatus::ok;
    }

    /// Closes every map handle held by a thread group (the loader's close-fds step).
    void close_map_handles(Tid tid) {
        Tid tgid = live_task(tid).tgid;
        std::vector<HandleId> victims;
        for (const auto& [id, h] : handles_) {
            if (h.kind == Handle::Kind::map && h.owner_tgid == tgid) {
                victims.push_back(id);
            }
        }
        for (auto id : victims) {
            close_handle(id);
        }
    }

    [[nodiscard]] std::optional<MapId> map_of_handle(HandleId handle) const {
        auto h = handles_.find(handle);
        if (h == handles_.end() || h->second.kind != Handle::Kind::map) {
            return std::nullopt;
        }
        return h->second.object;
    }

    [[nodiscard]] std::optional<ProgId> program_of_handle(HandleId handle) const {
        auto h = handles_.find(handle);
        if (h == handles_.end() || h->second.kind != Handle::Kind::program) {
            return std::nullopt;
        }
        return h->second.object;
    }

    /// Map update through a handle the caller holds (before install).
    MapStatus update_map_via_handle(Tid tid, HandleId handle, std::span<const uint8_t> key,
                                    std::span<const uint8_t> value, uint64_t flags = kUpdateAny) {
        const Task& t = live_task(tid);
        auto h = handles_.find(handle);
        if (h == handles_.end() || h->second.kind != Handle::Kind::map || h->second.owner_tgid != t.tgid) {
            return MapStatus::invalid;
        }
        return write_map(h->second.object, key, value, flags);
    }

    /// Live policy update by a privileged process that has no handle.
    EngineStatus update_map_external(Tid requester, MapId map, std::span<const uint8_t> key,
                                     std::span<const uint8_t> value, MapStatus* status = nullptr) {
        const Task& r = live_task(requester);
        if (!(r.creds.cap_sys_admin && r.userns == kInitUserNs)) {
            return EngineStatus::permission_denied;
        }
        if (!maps_.contains(map)) {
            return EngineStatus::invalid;
        }
        MapStatus s = write_map(map, key, value, kUpdateAny);
        if (status) {
            *status = s;
        }
        return s == MapStatus::ok ? EngineStatus::ok : EngineStatus::invalid;
    }

    /// Maps referenced by the n-th filter of a task (privileged).
    [[nodiscard]] std::optional<std::vector<MapId>> filter_maps(Tid requester, Tid target, size_t n) const {
        const Task& r = task(requester);
        if (!r.creds.cap_sys_admin) {
            return std::nullopt;
        }
        auto chain = chain_of(target);
        if (n >= chain.size()) {
            return std::nullopt;
        }
        return programs_.at(chain[n]).lp.maps;
    }

    // ------------------------------------------------------------- syscalls

    EnterResult syscall_enter(Tid tid, const SyscallContext& ctx) {
        Task& t = live_task(tid);
        if (t.sys) {
            throw SimulationError("task " + std::to_string(tid) + " entered a syscall while another is in progress");
        }
        PendingSyscall ps;
        ps.ctx = ctx;
        ps.chain = chain_programs(t.chain);
        if (chain_uses_user_access(ps.chain)) {
            ps.snapshot = take_snapshot(spaces_.at(t.address_space), ctx, descriptors_.find(ctx.nr), cfg_.protection,
                                        tid);
        }
        t.sys = std::move(ps);
        return continue_filters(t);
    }

    /// True if a blocked task's wake condition holds (or it is not blocked).
    [[nodiscard]] bool can_resume(Tid tid) const {
        const Task& t = task(tid);
        if (!t.blocked()) {
            return true;
        }
        const VmBlock& b = t.sys->vm->block;
        if (b.kind == BlockKind::wait_syscall) {
            return target_clear(*t.sys, b.curr_nr, b.target_nr);
        }
        return true;
    }

    EnterResult resume(Tid tid) {
        Task& t = live_task(tid);
        if (!t.blocked()) {
            throw SimulationError("task " + std::to_string(tid) + " is not blocked");
        }
        PendingSyscall& ps = *t.sys;
        const VmBlock b = ps.vm->block;
        if (b.kind == BlockKind::fault_service) {
            AddressSpace& as = spaces_.at(t.address_space);
            if (!ps.snapshot || !service_fault(as, *ps.snapshot, b.addr, b.len)) {
                ps.unserviceable.insert(b.addr);
            }
        }
        return continue_filters(t);
    }

    void syscall_exit(Tid tid, int32_t nr) {
        Task& t = live_task(tid);
        if (!t.sys) {
            throw SimulationError("task " + std::to_string(tid) + " exited syscall " + syscall_label(nr) +
                                  " without a matching entry");
        }
        if (t.sys->ctx.nr != nr) {
            throw SimulationError("task " + std::to_string(tid) + " exited " + syscall_label(nr) + " but is inside " +
                                  syscall_label(t.sys->ctx.nr));
        }
        if (!t.sys->decided) {
            throw SimulationError("task " + std::to_string(tid) + " exited before its entry decision completed");
        }
        finish_syscall(t);
    }

    // -------------------------------------------------------- user memory

    MemStatus mem_map(Tid tid, uint64_t addr, uint64_t len, bool writable = true) {
        return spaces_.at(live_task(tid).address_space).user_map(addr, len, writable);
    }
    MemStatus mem_write(Tid tid, uint64_t addr, std::span<const uint8_t> data) {
        return spaces_.at(live_task(tid).address_space).user_write(addr, data);
    }
    MemStatus mem_protect(Tid tid, uint64_t addr, uint64_t len, bool writable) {
        return spaces_.at(live_task(tid).address_space).user_mprotect(addr, len, writable);
    }
    [[nodiscard]] bool mem_write_would_stall(Tid tid, uint64_t addr, uint64_t len) const {
        return spaces_.at(task(tid).address_space).write_would_stall(addr, len);
    }

    // ---------------------------------------------------- checkpoint/restore

    /// Serializes the filter chains of `tids` with every reachable program
    /// and the full contents of their maps.
    std::optional<Bytes> checkpoint(const std::vector<Tid>& tids, Tid requester) const;
    std::optional<Bytes> checkpoint(Tid tid, Tid requester) const { return checkpoint(std::vector<Tid>{tid}, requester); }

    struct RestoreResult {
        EngineStatus status = EngineStatus::ok;
        std::map<MapId, MapId> map_ids;   // checkpointed id -> restored id
        std::map<ProgId, ProgId> prog_ids;
    };

    /// Appends the checkpointed chains to the tasks (tid_map renames tasks).
    RestoreResult restore(std::span<const uint8_t> blob, Tid requester, const std::map<Tid, Tid>& tid_map = {});

    // ------------------------------------------------------------- digest

    /// Hash of all state that influences future behaviour.
    [[nodiscard]] uint64_t digest() const {
        uint64_t h = fnv1a(words({clock_ns_}));
        for (const auto& [tid, t] : tasks_) {
            h = fnv1a(words({tid, t.tgid, t.alive, t.no_new_privs, t.dumpable, t.userns, t.address_space,
                             t.chain ? t.chain->length : 0, t.creds.uid, t.creds.gid, t.creds.cap_sys_admin,
                             t.creds.cap_sys_ptrace}),
                      h);
            for (auto p : chain_programs(t.chain)) {
                h = fnv1a(words({p}), h);
            }
            if (t.sys) {
                h = fnv1a(words({static_cast<uint64_t>(t.sys->ctx.nr), t.sys->next_filter, t.sys->decided,
                                 t.sys->action.raw, t.sys->vm ? t.sys->vm->pc : 0,
                                 t.sys->vm ? static_cast<uint64_t>(t.sys->vm->status) : 9}),
                          h);
                for (auto n : t.sys->inflight_held) {
                    h = fnv1a(words({static_cast<uint64_t>(n)}), h);
                }
            }
        }
        for (const auto& [id, m] : maps_.all()) {
            h = fnv1a(words({id}), h);
            h = m.digest(h);
        }
        for (const auto& [nr, c] : inflight_) {
            h = fnv1a(words({static_cast<uint64_t>(nr), static_cast<uint64_t>(c)}), h);
        }
        for (const auto& [id, as] : spaces_) {
            h = fnv1a(words({id, as.digest()}), h);
        }
        return h;
    }

    // ------------------------------------------------------- HelperHost

    PolicyMap* map(MapId id) override { return maps_.find(id); }
    const LoadedProgram* program(ProgId id) override {
        auto it = programs_.find(id);
        return it == programs_.end() ? nullptr : &it->second.lp;
    }
    uint64_t now_ns() override { return clock_ns_; }
    uint64_t current_leader() override { return current_->tgid; }

    UserRead read_user(uint64_t addr, size_t len, bool stop_at_nul, bool sleepable) override {
        Task& t = *current_;
        PendingSyscall& ps = *t.sys;
        const ProgramEntry& e = programs_.at(ps.vm->prog);
        if (!may_inspect(e, t)) {
            return UserRead{ReadStatus::fault, {}};
        }
        if (!ps.snapshot) {
            return UserRead{ReadStatus::fault, {}};
        }
        bool can_service = sleepable && !ps.unserviceable.contains(addr);
        return snapshot_read(spaces_.at(t.address_space), *ps.snapshot, addr, len, stop_at_nul, can_service);
    }

    bool wait_syscall(int64_t curr_nr, int64_t target_nr) override {
        PendingSyscall& ps = *current_->sys;
        if (ps.inflight_held.insert(curr_nr).second) {
            ++inflight_[curr_nr];
        }
        return target_clear(ps, curr_nr, target_nr);
    }

  private:
    static bool same_shape(const MapDecl& a, const MapDecl& b) {
        return a.kind == b.kind && a.key_size == b.key_size && a.value_size == b.value_size &&
               a.max_entries == b.max_entries;
    }

    static bool needs_extended(const FilterProgram& p) {
        if (p.sleepable || !p.map_refs.empty()) {
            return true;
        }
        for (const auto& insn : p.instructions) {
            if (insn.opcode == Opcode::call || insn.opcode == Opcode::tail_call) {
                return true;
            }
        }
        return false;
    }

    Task& task_mut(Tid tid) {
        auto it = tasks_.find(tid);
        if (it == tasks_.end()) {
            throw SimulationError("no task " + std::to_string(tid));
        }
        return it->second;
    }

    Task& live_task(Tid tid) {
        Task& t = task_mut(tid);
        if (!t.alive) {
            throw SimulationError("task " + std::to_string(tid) + " is dead");
        }
        return t;
    }

    Tid pick_tid(std::optional<Tid> want) {
        if (want) {
            if (tasks_.contains(*want) || *want == 0) {
                throw SimulationError("task id " + std::to_string(*want) + " already in use");
            }
            return *want;
        }
        Tid tid = tasks_.empty() ? 1 : tasks_.rbegin()->first + 1;
        return tid;
    }

    static Task clone_identity(const Task& p, Tid tid) {
        Task c;
        c.tid = tid;
        c.parent = p.tid;
        c.creds = p.creds;
        c.no_new_privs = p.no_new_privs;
        c.dumpable = p.dumpable;
        c.userns = p.userns;
        c.chain = p.chain;
        return c;
    }

    AsId new_address_space() {
        AsId id = next_as_++;
        spaces_.emplace(id, AddressSpace{});
        return id;
    }

    HandleId open_map_handle(Tid tgid, MapId id) {
        HandleId h = next_handle_++;
        handles_.emplace(h, Handle{Handle::Kind::map, id, tgid});
        maps_.retain(id);
        ++maps_.find(id)->open_handles;
        return h;
    }

    void release_created(const std::vector<std::pair<std::string, MapId>>& created) {
        for (const auto& [name, id] : created) {
            maps_.retain(id);
            maps_.release(id);
        }
    }

    void unref_program(ProgId pid) {
        auto it = programs_.find(pid);
        if (it == programs_.end()) {
            return;
        }
        if (it->second.refs > 0) {
            --it->second.refs;
        }
        if (it->second.refs == 0) {
            std::vector<MapId> maps = it->second.lp.maps;
            programs_.erase(it);
            for (MapId m : maps) {
                drop_map_ref(m);
            }
        }
    }

    // Releases one reference; when a prog_array dies its slots stop pinning programs.
    void drop_map_ref(MapId id) {
        PolicyMap* m = maps_.find(id);
        if (!m) {
            return;
        }
        std::vector<ProgId> slots;
        if (m->refcount == 1 && m->kind() == MapKind::prog_array) {
            for (const auto& [k, v] : m->entries()) {
                if (ProgId p = slot_value(*m, v)) {
                    slots.push_back(p);
                }
            }
        }
        maps_.release(id);
        for (ProgId p : slots) {
            unref_program(p);
        }
    }

    static ProgId slot_value(const PolicyMap& m, std::span<const uint8_t> v) {
        return m.decl().value_size == 4 ? load_le<uint32_t>(v, 0) : load_le<uint64_t>(v, 0);
    }

    // Writes keep program references of prog_array slots accurate.
    MapStatus write_map(MapId id, std::span<const uint8_t> key, std::span<const uint8_t> value, uint64_t flags) {
        PolicyMap* m = maps_.find(id);
        if (!m) {
            return MapStatus::invalid;
        }
        if (m->kind() != MapKind::prog_array) {
            return m->update(key, value, flags);
        }
        if (value.size() != m->decl().value_size) {
            return MapStatus::bad_size;
        }
        ProgId next = slot_value(*m, value);
        if (next != 0 && !programs_.contains(next)) {
            return MapStatus::invalid;
        }
        auto old = m->lookup(key);
        MapStatus s = m->update(key, value, flags);
        if (s != MapStatus::ok) {
            return s;
        }
        if (next != 0) {
            ++programs_.at(next).refs;
        }
        if (old) {
            if (ProgId prev = slot_value(*m, *old)) {
                unref_program(prev);
            }
        }
        return s;
    }

    bool chain_uses_user_access(const std::vector<ProgId>& chain) const {
        std::set<ProgId> seen;
        std::vector<ProgId> work(chain.begin(), chain.end());
        while (!work.empty()) {
            ProgId p = work.back();
            work.pop_back();
            if (!seen.insert(p).second) {
                continue;
            }
            auto it = programs_.find(p);
            if (it == programs_.end()) {
                continue;
            }
            if (it->second.lp.prog.uses_user_access()) {
                return true;
            }
            for (MapId mid : it->second.lp.maps) {
                const PolicyMap* m = maps_.find(mid);
                if (m && m->kind() == MapKind::prog_array) {
                    for (const auto& [k, v] : m->entries()) {
                        if (ProgId q = slot_value(*m, v)) {
                            work.push_back(q);
                        }
                    }
                }
            }
        }
        return false;
    }

    bool target_clear(const PendingSyscall& ps, int64_t curr_nr, int64_t target_nr) const {
        int64_t others = inflight(target_nr);
        if (target_nr == curr_nr && ps.inflight_held.contains(curr_nr)) {
            --others;
        }
        return others <= 0;
    }

    // Non-dumpable memory is readable only by a loader with CAP_SYS_PTRACE;
    // otherwise ordinary ptrace access rules apply between loader and task.
    bool may_inspect(const ProgramEntry& e, const Task& target) const {
        const Credentials& lc = e.loader_creds;
        if (lc.cap_sys_ptrace) {
            return true;
        }
        if (!target.dumpable) {
            return false;
        }
        if (lc.uid != target.creds.uid || lc.gid != target.creds.gid) {
            return false;
        }
        if (cfg_.ptrace_scope == PtraceScope::restricted) {
            if (target.tgid == e.loader_tgid) {
                return true;
            }
            for (Tid t = target.parent; t != 0;) {
                if (t == e.loader_tid) {
                    return true;
                }
                auto it = tasks_.find(t);
                if (it == tasks_.end()) {
                    break;
                }
                t = it->second.parent;
            }
            return false;
        }
        return true;
    }

    EnterResult continue_filters(Task& t) {
        PendingSyscall& ps = *t.sys;
        VmOptions opt;
        opt.step_limit = cfg_.vm_step_limit;
        opt.bad_filter_action = cfg_.bad_filter_action;
        opt.trace = cfg_.trace_vm;
        current_ = &t;
        while (ps.next_filter < ps.chain.size()) {
            if (!ps.vm) {
                ps.vm = VmState::start(ps.chain[ps.next_filter], ps.ctx);
            }
            run_vm(*ps.vm, *this, opt);
            if (ps.vm->status == VmStatus::blocked) {
                current_ = nullptr;
                EnterResult r;
                r.block = ps.vm->block;
                return r;
            }
            FilterVote v;
            v.chain_index = ps.next_filter;
            v.prog = ps.chain[ps.next_filter];
            v.action = decode_action(ps.vm->out.raw_action);
            v.outcome = std::move(ps.vm->out);
            ps.votes.push_back(std::move(v));
            ps.vm.reset();
            ++ps.next_filter;
        }
        current_ = nullptr;
        std::vector<ResolvedAction> acts;
        acts.reserve(ps.votes.size());
        for (const auto& v : ps.votes) {
            acts.push_back(v.action);
        }
        ps.action = resolve(acts);
        ps.decided = true;
        EnterResult r;
        r.decided = true;
        r.action = ps.action;
        r.votes = ps.votes;
        if (ps.action.kind == ActionKind::kill_thread || ps.action.kind == ActionKind::kill_process) {
            kill(t, ps.action.kind == ActionKind::kill_process);
        }
        return r;
    }

    void finish_syscall(Task& t) {
        PendingSyscall& ps = *t.sys;
        for (int64_t nr : ps.inflight_held) {
            auto it = inflight_.find(nr);
            if (it != inflight_.end()) {
                it->second = std::max<int64_t>(0, it->second - 1);
            }
        }
        if (ps.snapshot) {
            release_snapshot(spaces_.at(t.address_space), *ps.snapshot);
        }
        t.sys.reset();
    }

    void kill(Task& t, bool whole_process) {
        std::vector<Tid> victims;
        for (auto& [tid, other] : tasks_) {
            if (other.alive && (tid == t.tid || (whole_process && other.tgid == t.tgid))) {
                victims.push_back(tid);
            }
        }
        for (Tid v : victims) {
            Task& x = tasks_.at(v);
            if (x.sys) {
                if (x.sys->vm) {
                    x.sys->decided = true; // abandoned mid-filter
                }
                finish_syscall(x);
            }
            x.alive = false;
        }
    }

    EngineConfig cfg_;
    DescriptorTable descriptors_;
    std::map<Tid, Task> tasks_;
    std::map<AsId, AddressSpace> spaces_;
    MapTable maps_;
    std::map<ProgId, ProgramEntry> programs_;
    std::map<HandleId, Handle> handles_;
    std::map<int64_t, int64_t> inflight_;
    uint64_t clock_ns_ = 0;
    AsId next_as_ = 1;
    ProgId next_prog_ = 1;
    HandleId next_handle_ = 3; // 0-2 are the standard streams
    UserNsId next_userns_ = 1;
    Task* current_ = nullptr; // task whose filters are running
};

// ---------------------------------------------------------------------------
// Checkpoint blob
//
//   "SFCK" u16 version=1
//   u32 map_count   { u64 old_id, u16 name_len, name, u8 kind, u32 key, u32 value, u32 max,
//                     u32 entry_count { u32 klen, key, u32 vlen, value } }
//   u32 prog_count  { u64 old_id, u64 load_userns, u32 len, program (toolchain format),
//                     u32 nmaps { u64 old_map_id } }
//   u32 task_count  { u64 tid, u32 chain_len { u64 old_prog_id } }
//
// prog_array values inside the blob hold old program ids.

inline constexpr std::string_view kCheckpointMagic = "SFCK";
inline constexpr uint16_t kCheckpointVersion = 1;

inline std::optional<Bytes> Engine::checkpoint(const std::vector<Tid>& tids, Tid requester) const {
    const Task& r = task(requester);
    if (!r.creds.cap_sys_admin) {
        return std::nullopt;
    }
    // Programs reachable from the chains, including through prog_arrays.
    std::vector<ProgId> progs;
    std::set<ProgId> seen;
    std::vector<ProgId> work;
    for (Tid t : tids) {
        for (ProgId p : chain_of(t)) {
            work.push_back(p);
        }
    }
    std::reverse(work.begin(), work.end());
    std::vector<MapId> map_order;
    std::set<MapId> map_seen;
    while (!work.empty()) {
        ProgId p = work.back();
        work.pop_back();
        if (!seen.insert(p).second) {
            continue;
        }
        progs.push_back(p);
        for (MapId mid : programs_.at(p).lp.maps) {
            if (map_seen.insert(mid).second) {
                map_order.push_back(mid);
            }
            const PolicyMap& m = *maps_.find(mid);
            if (m.kind() == MapKind::prog_array) {
                for (const auto& [k, v] : m.entries()) {
                    if (ProgId q = slot_value(m, v)) {
                        work.push_back(q);
                    }
                }
            }
        }
    }
    Bytes out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    put_le<uint16_t>(out, kCheckpointVersion);
    put_le<uint32_t>(out, static_cast<uint32_t>(map_order.size()));
    for (MapId mid : map_order) {
        const PolicyMap& m = *maps_.find(mid);
        put_le<uint64_t>(out, mid);
        put_le<uint16_t>(out, static_cast<uint16_t>(m.decl().name.size()));
        out.insert(out.end(), m.decl().name.begin(), m.decl().name.end());
        out.push_back(static_cast<uint8_t>(m.kind()));
        put_le<uint32_t>(out, m.decl().key_size);
        put_le<uint32_t>(out, m.decl().value_size);
        put_le<uint32_t>(out, m.decl().max_entries);
        auto entries = m.entries();
        put_le<uint32_t>(out, static_cast<uint32_t>(entries.size()));
        for (const auto& [k, v] : entries) {
            put_le<uint32_t>(out, static_cast<uint32_t>(k.size()));
            out.insert(out.end(), k.begin(), k.end());
            put_le<uint32_t>(out, static_cast<uint32_t>(v.size()));
            out.insert(out.end(), v.begin(), v.end());
        }
    }
    put_le<uint32_t>(out, static_cast<uint32_t>(progs.size()));
    for (ProgId p : progs) {
        const ProgramEntry& e = programs_.at(p);
        put_le<uint64_t>(out, p);
        put_le<uint64_t>(out, e.load_userns);
        Bytes code = encode_program(e.lp.prog);
        put_le<uint32_t>(out, static_cast<uint32_t>(code.size()));
        out.insert(out.end(), code.begin(), code.end());
        put_le<uint32_t>(out, static_cast<uint32_t>(e.lp.maps.size()));
        for (MapId mid : e.lp.maps) {
            put_le<uint64_t>(out, mid);
        }
    }
    put_le<uint32_t>(out, static_cast<uint32_t>(tids.size()));
    for (Tid t : tids) {
        auto chain = chain_of(t);
        put_le<uint64_t>(out, t);
        put_le<uint32_t>(out, static_cast<uint32_t>(chain.size()));
        for (ProgId p : chain) {
            put_le<uint64_t>(out, p);
        }
    }
    return out;
}

inline Engine::RestoreResult Engine::restore(std::span<const uint8_t> blob, Tid requester,
                                             const std::map<Tid, Tid>& tid_map) {
    RestoreResult res;
    const Task& r = live_task(requester);
    if (!r.creds.cap_sys_admin) {
        res.status = EngineStatus::permission_denied;
        return res;
    }
    struct MapRec {
        MapId old_id;
        MapDecl decl;
        std::vector<std::pair<Bytes, Bytes>> entries;
    };
    struct ProgRec {
        ProgId old_id;
        UserNsId userns;
        FilterProgram prog;
        std::vector<MapId> maps;
    };
    std::vector<MapRec> maps;
    std::vector<ProgRec> progs;
    std::vector<std::pair<Tid, std::vector<ProgId>>> chains;
    try {
        ByteReader in(blob);
        if (in.read_string(4) != kCheckpointMagic || in.read<uint16_t>() != kCheckpointVersion) {
            res.status = EngineStatus::invalid;
            return res;
        }
        for (uint32_t i = 0, n = in.read<uint32_t>(); i < n; ++i) {
            MapRec m;
            m.old_id = in.read<uint64_t>();
            m.decl.name = in.read_string(in.read<uint16_t>());
            m.decl.kind = static_cast<MapKind>(in.read<uint8_t>());
            m.decl.key_size = in.read<uint32_t>();
            m.decl.value_size = in.read<uint32_t>();
            m.decl.max_entries = in.read<uint32_t>();
            for (uint32_t j = 0, ne = in.read<uint32_t>(); j < ne; ++j) {
                Bytes k = in.read_bytes(in.read<uint32_t>());
                Bytes v = in.read_bytes(in.read<uint32_t>());
                m.entries.emplace_back(std::move(k), std::move(v));
            }
            maps.push_back(std::move(m));
        }
        for (uint32_t i = 0, n = in.read<uint32_t>(); i < n; ++i) {
            ProgRec p;
            p.old_id = in.read<uint64_t>();
            p.userns = in.read<uint64_t>();
            Bytes code = in.read_bytes(in.read<uint32_t>());
            p.prog = decode_program(code);
            for (uint32_t j = 0, nm = in.read<uint32_t>(); j < nm; ++j) {
                p.maps.push_back(in.read<uint64_t>());
            }
            progs.push_back(std::move(p));
        }
        for (uint32_t i = 0, n = in.read<uint32_t>(); i < n; ++i) {
            Tid t = in.read<uint64_t>();
            std::vector<ProgId> chain;
            for (uint32_t j = 0, nc = in.read<uint32_t>(); j < nc; ++j) {
                chain.push_back(in.read<uint64_t>());
            }
            chains.emplace_back(t, std::move(chain));
        }
        if (!in.at_end()) {
            res.status = EngineStatus::invalid;
            return res;
        }
    } catch (const std::exception&) {
        res.status = EngineStatus::invalid;
        return res;
    }
    for (const auto& [old_tid, chain] : chains) {
        auto it = tid_map.find(old_tid);
        Tid t = it == tid_map.end() ? old_tid : it->second;
        if (!has_task(t) || !task(t).alive) {
            res.status = EngineStatus::no_such_task;
            return res;
        }
        if (task(t).sys) {
            res.status = EngineStatus::busy;
            return res;
        }
    }
    // Maps first (prog_array contents are fixed up once programs exist).
    for (const auto& m : maps) {
        try {
            PolicyMap::validate(m.decl);
        } catch (const MapError&) {
            res.status = EngineStatus::invalid;
            return res;
        }
        MapId id = maps_.create(m.decl);
        res.map_ids[m.old_id] = id;
    }
    // Restored programs are trusted and not re-verified.
    for (auto& p : progs) {
        LoadedProgram lp;
        for (MapId old : p.maps) {
            MapId id = res.map_ids.at(old);
            maps_.retain(id);
            lp.maps.push_back(id);
        }
        p.prog.verified = true;
        p.prog.load_userns = p.userns;
        lp.prog = std::move(p.prog);
        ProgId pid = next_prog_++;
        ProgramEntry e;
        e.lp = std::move(lp);
        e.load_userns = p.userns;
        e.loader_tid = requester;
        e.loader_tgid = r.tgid;
        e.loader_creds = r.creds;
        programs_.emplace(pid, std::move(e));
        res.prog_ids[p.old_id] = pid;
    }
    for (const auto& m : maps) {
        PolicyMap& pm = *maps_.find(res.map_ids.at(m.old_id));
        for (const auto& [k, v] : m.entries) {
            if (pm.kind() == MapKind::prog_array) {
                ProgId old = slot_value(pm, v);
                if (old == 0) {
                    continue;
                }
                Bytes nv;
                ProgId now = res.prog_ids.count(old) ? res.prog_ids.at(old) : 0;
                if (pm.decl().value_size == 4) {
                    put_le<uint32_t>(nv, static_cast<uint32_t>(now));
                } else {
                    put_le<uint64_t>(nv, now);
                }
                pm.update(k, nv);
                if (now) {
                    ++programs_.at(now).refs;
                }
            } else {
                pm.update(k, v);
            }
        }
    }
    for (const auto& [old_tid, chain] : chains) {
        auto it = tid_map.find(old_tid);
        Task& t = live_task(it == tid_map.end() ? old_tid : it->second);
        for (ProgId old : chain) {
            ProgId pid = res.prog_ids.at(old);
            size_t len = t.chain ? t.chain->length : 0;
            t.chain = std::make_shared<const ChainLink>(ChainLink{pid, t.chain, len + 1});
            ++programs_.at(pid).refs;
        }
    }
    // Programs only reachable through nothing (shouldn't happen) would leak; drop them.
    for (const auto& [old, pid] : res.prog_ids) {
        if (programs_.at(pid).refs == 0) {
            ++programs_.at(pid).refs;
            unref_program(pid);
        }
    }
    return res;
}

} // namespace sfvm
