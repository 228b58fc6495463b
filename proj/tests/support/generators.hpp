// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Random programs, contexts and traces shared by the property tests and the
// acceptance binary, plus the oracles they are checked against.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sfvm/action.hpp"
#include "sfvm/assembler.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/simulator.hpp"
#include "sfvm/trace.hpp"
#include "sfvm/verifier.hpp"
#include "sfvm/vm.hpp"

namespace sfvm::testing {

using Rng = std::mt19937_64;

inline uint64_t pick(Rng& rng, uint64_t lo, uint64_t hi) { return std::uniform_int_distribution<uint64_t>(lo, hi)(rng); }

// ---------------------------------------------------------------------------
// Action precedence

/// Rank by name, kept apart from the enum order the engine uses.
inline int rank_of(const ResolvedAction& a) {
    static const std::map<std::string, int> rank{{"ALLOW", 0}, {"LOG", 1},         {"ERRNO", 2},
                                                 {"TRAP", 3},  {"KILL_THREAD", 4}, {"KILL_PROCESS", 5}};
    return rank.at(action_name(a.kind));
}

/// Most restrictive vote; the earliest such vote supplies the data.
inline ResolvedAction expected_resolution(const std::vector<ResolvedAction>& votes) {
    if (votes.empty()) {
        return make_action(ActionKind::allow);
    }
    int best = -1;
    for (const auto& v : votes) {
        best = std::max(best, rank_of(v));
    }
    for (const auto& v : votes) {
        if (rank_of(v) == best) {
            return v;
        }
    }
    return votes.front();
}

inline ResolvedAction random_vote(Rng& rng) {
    auto kind = static_cast<ActionKind>(pick(rng, 0, 5));
    return make_action(kind, static_cast<uint16_t>(pick(rng, 0, 3) == 0 ? pick(rng, 0, 0xffff) : pick(rng, 1, 4)));
}

inline std::vector<ResolvedAction> random_votes(Rng& rng, size_t max_len = 6) {
    std::vector<ResolvedAction> v(pick(rng, 1, max_len));
    for (auto& a : v) {
        a = random_vote(rng);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Programs

inline constexpr const char* kCtxFields[] = {"nr", "arch", "ip", "arg0", "arg1", "arg2", "arg3", "arg4", "arg5"};

struct FuzzProgram {
    std::vector<std::string> lines;
    size_t first_branch = 0; // lines before this index run on every path

    [[nodiscard]] std::string text() const {
        std::string s;
        for (const auto& l : lines) {
            s += l;
            s += '\n';
        }
        return s;
    }
};

/// Straight-line code with forward branches, context reads, stack traffic,
/// null-checked map access and helper calls. Some outputs are rejected by
/// the verifier (for instance a branch that skips a stack store).
class ProgramFuzzer {
  public:
    explicit ProgramFuzzer(uint64_t seed) : rng_(seed) {}

    FuzzProgram next() {
        FuzzProgram p;
        lines_ = &p.lines;
        init_.assign(10, false);
        stack_.assign(9, false);
        pending_.clear();
        label_ = 0;
        first_branch_ = std::nullopt;
        emit("map arr array 4 8 4");
        emit("map tab hash 8 16 8");
        emit("ld_ctx r6, nr");
        emit("ld_ctx r7, arg0");
        emit("mov r8, " + std::to_string(pick(rng_, 0, 1000)));
        init_[6] = init_[7] = init_[8] = true;
        size_t ops = pick(rng_, 4, 24);
        for (size_t i = 0; i < ops; ++i) {
            random_op();
            if (!pending_.empty() && pick(rng_, 0, 2) == 0) {
                place_label();
            }
        }
        while (!pending_.empty()) {
            place_label();
        }
        if (pick(rng_, 0, 3) == 0) {
            emit("mov r0, r" + std::to_string(any_init()));
        } else {
            static const uint32_t kRaw[] = {0x7fff0000, 0x7ffc0000, 0x50001, 0x5000d, 0x30000, 0x0, 0x80000000};
            emit("ld_imm64 r0, " + std::to_string(kRaw[pick(rng_, 0, 6)]));
        }
        emit("exit");
        p.first_branch = first_branch_.value_or(p.lines.size());
        return p;
    }

  private:
    void emit(std::string s) { lines_->push_back(std::move(s)); }

    std::string reg(size_t r) { return "r" + std::to_string(r); }

    size_t any_init() {
        std::vector<size_t> c;
        for (size_t r = 6; r < 10; ++r) {
            if (init_[r]) {
                c.push_back(r);
            }
        }
        return c[pick(rng_, 0, c.size() - 1)];
    }

    std::string operand() { return pick(rng_, 0, 1) ? reg(any_init()) : std::to_string(pick(rng_, 0, 300)); }

    std::string new_label() {
        std::string l = "L" + std::to_string(label_++);
        pending_.push_back(l);
        return l;
    }

    void place_label() {
        size_t i = pick(rng_, 0, pending_.size() - 1);
        emit(pending_[i] + ":");
        pending_.erase(pending_.begin() + static_cast<long>(i));
    }

    void branch_here() {
        if (!first_branch_) {
            first_branch_ = lines_->size();
        }
    }

    // r1-r5 do not survive a call.
    void clobber() {
        for (size_t r = 0; r <= 5; ++r) {
            init_[r] = false;
        }
    }

    void key_on_stack(int off) {
        emit("st_map r10, " + reg(any_init()) + ", " + std::to_string(off));
        stack_[static_cast<size_t>(-off / 8)] = true;
    }

    void random_op() {
        static const char* kAlu[] = {"add", "sub", "mul", "or", "and", "lsh", "rsh", "xor", "mov"};
        static const char* kJmp[] = {"jeq", "jgt", "jge", "jset", "jne", "jlt", "jle"};
        size_t dst = pick(rng_, 6, 9);
        switch (pick(rng_, 0, 9)) {
        case 0:
        case 1: {
            std::string op = kAlu[pick(rng_, 0, 8)];
            if (op != "mov" && !init_[dst]) {
                op = "mov";
            }
            std::string src = operand();
            if ((op == "lsh" || op == "rsh") && pick(rng_, 0, 1)) {
                src = std::to_string(pick(rng_, 0, 63));
            }
            emit(op + " " + reg(dst) + ", " + src);
            init_[dst] = true;
            break;
        }
        case 2:
            emit("ld_ctx " + reg(dst) + ", " + kCtxFields[pick(rng_, 0, 8)]);
            init_[dst] = true;
            break;
        case 3: {
            int slot = static_cast<int>(pick(rng_, 1, 8));
            if (stack_[static_cast<size_t>(slot)] && pick(rng_, 0, 1)) {
                emit("ld_map " + reg(dst) + ", r10, " + std::to_string(-8 * slot));
                init_[dst] = true;
            } else {
                emit("st_map r10, " + operand() + ", " + std::to_string(-8 * slot));
                stack_[static_cast<size_t>(slot)] = true;
            }
            break;
        }
        case 4:
        case 5: {
            // Map lookup, then read or write the value behind a null check.
            bool hash = pick(rng_, 0, 1);
            key_on_stack(-8);
            emit(std::string("ld_imm64 r1, map:") + (hash ? "tab" : "arr"));
            emit("mov r2, r10");
            emit("add r2, -8");
            emit("call map_lookup_elem");
            clobber();
            branch_here();
            std::string skip = "N" + std::to_string(label_++);
            emit("jeq r0, 0, " + skip);
            int off = hash && pick(rng_, 0, 1) ? 8 : 0;
            if (pick(rng_, 0, 1)) {
                emit("ld_map " + reg(dst) + ", r0, " + std::to_string(off));
                init_[dst] = true;
            } else {
                emit("st_map r0, " + operand() + ", " + std::to_string(off));
            }
            emit(skip + ":");
            break;
        }
        case 6: {
            bool hash = pick(rng_, 0, 1);
            key_on_stack(-8);
            emit("st_map r10, " + operand() + ", -24");
            emit("st_map r10, " + operand() + ", -16");
            stack_[2] = stack_[3] = true;
            emit(std::string("ld_imm64 r1, map:") + (hash ? "tab" : "arr"));
            emit("mov r2, r10");
            emit("add r2, -8");
            emit("mov r3, r10");
            emit("add r3, -24");
            emit("mov r4, 0");
            emit(pick(rng_, 0, 3) ? "call map_update_elem" : "call map_delete_elem");
            clobber();
            if (pick(rng_, 0, 1)) {
                emit("mov " + reg(dst) + ", r0");
                init_[dst] = true;
            }
            break;
        }
        case 7: {
            int slots = static_cast<int>(pick(rng_, 1, 8));
            uint64_t size = pick(rng_, 1, static_cast<uint64_t>(slots) * 8);
            emit("mov r1, r10");
            emit("add r1, " + std::to_string(-8 * slots));
            emit("mov r2, " + std::to_string(size));
            emit("ld_ctx r3, " + std::string(pick(rng_, 0, 1) ? "arg0" : "arg1"));
            emit(pick(rng_, 0, 1) ? "call safe_read_user" : "call safe_read_user_str");
            clobber();
            for (int s = 1; s <= slots; ++s) {
                stack_[static_cast<size_t>(s)] = true;
            }
            emit("mov " + reg(dst) + ", r0");
            init_[dst] = true;
            break;
        }
        case 8:
            emit("call ktime_get_ns");
            clobber();
            emit("mov " + reg(dst) + ", r0");
            init_[dst] = true;
            break;
        case 9:
            branch_here();
            emit(std::string(kJmp[pick(rng_, 0, 6)]) + " " + reg(any_init()) + ", " + operand() + ", " + new_label());
            break;
        }
    }

    Rng rng_;
    std::vector<std::string>* lines_ = nullptr;
    std::vector<bool> init_;
    std::vector<bool> stack_;
    std::vector<std::string> pending_;
    size_t label_ = 0;
    std::optional<size_t> first_branch_;
};

/// Inserts a context read that is out of bounds (past the end, negative,
/// or straddling the end) where every path executes it.
inline FuzzProgram inject_oob(FuzzProgram p, Rng& rng) {
    static const std::pair<int, int> kBad[] = {{8, 64},  {8, 60}, {4, 62}, {4, 64},  {8, 57},
                                               {1, 64},  {8, -8}, {4, -4}, {2, 100}, {8, 4096}};
    auto [width, off] = kBad[pick(rng, 0, std::size(kBad) - 1)];
    // Map declarations and the prologue stay first.
    size_t lo = 2;
    size_t at = pick(rng, lo, std::max(lo, p.first_branch));
    std::string ins = "ld_ctx r" + std::to_string(pick(rng, 6, 9)) + ", " + std::to_string(width) + ", " +
                      std::to_string(off);
    p.lines.insert(p.lines.begin() + static_cast<long>(at), ins);
    return p;
}

inline SyscallContext random_context(Rng& rng) {
    SyscallContext c;
    c.nr = static_cast<int32_t>(pick(rng, 0, 460));
    c.arch = pick(rng, 0, 7) ? kAuditArchX86_64 : static_cast<uint32_t>(rng());
    c.calling_address = rng();
    for (auto& a : c.args) {
        switch (pick(rng, 0, 3)) {
        case 0: a = pick(rng, 0, 16); break;
        case 1: a = 0x10000 + pick(rng, 0, 4200); break; // around the mapped user page
        default: a = rng(); break;
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Argument races

inline constexpr uint64_t kPathPage = 0x200000;
inline constexpr size_t kPathSlots = 4;

/// Allows open unless the path starts with "/etc" (EACCES). The filter first
/// waits out any rename in flight, which leaves a window between syscall
/// entry and the read in which other threads can write the path. rename only
/// registers itself as in flight (getppid never runs here); making it wait
/// for open as well can deadlock once a task issues open twice.
inline const char* kPathFilter = R"(section seccomp-sleepable
    ld_ctx r6, nr
    jeq r6, 82, rename
    jne r6, 2, allow
    mov r1, 2
    mov r2, 82
    call wait_syscall
    mov r1, r10
    add r1, -16
    mov r2, 8
    ld_ctx r3, arg0
    call safe_read_user_str
    jne r0, 8, unreadable
    ld_map r7, r10, -16
    lsh r7, 32
    rsh r7, 32
    jeq r7, 0x6374652f, deny
    ja allow
rename:
    mov r1, 82
    mov r2, 110
    call wait_syscall
allow:
    ld_imm64 r0, 0x7fff0000
    exit
deny:
    ld_imm64 r0, 0x5000d
    exit
unreadable:
    ld_imm64 r0, 0x50005
    exit
)";

inline std::string path_of(bool etc) { return etc ? "/etc/pw" : "/tmp/pw"; }

/// Opener (tid 2), writer (tid 3) and renamer (tid 4) in one process.
inline std::string race_trace(Rng& rng) {
    std::ostringstream t;
    auto write = [&](Tid tid, size_t slot, bool etc) {
        t << R"({"ev":"mem_write","tid":)" << tid << R"(,"addr":)" << kPathPage + 64 * slot << R"(,"data":")"
          << path_of(etc) << R"(","nul":true})" << "\n";
    };
    t << R"({"ev":"spawn","tid":1,"child":2})" << "\n";
    t << R"({"ev":"set_nnp","tid":2})" << "\n";
    t << R"({"ev":"mem_map","tid":2,"addr":)" << kPathPage << R"(,"len":4096})" << "\n";
    for (size_t s = 0; s < kPathSlots; ++s) {
        write(2, s, pick(rng, 0, 1) != 0);
    }
    t << R"({"ev":"install","tid":2,"filter":"paths"})" << "\n";
    t << R"({"ev":"spawn_thread","tid":2,"child":3})" << "\n";
    t << R"({"ev":"spawn_thread","tid":2,"child":4})" << "\n";
    for (size_t i = pick(rng, 1, 4); i > 0; --i) {
        t << R"({"ev":"syscall_enter","tid":2,"nr":"open","args":[)" << kPathPage + 64 * pick(rng, 0, kPathSlots - 1)
          << "]}\n";
        t << R"({"ev":"syscall_exit","tid":2,"nr":"open"})" << "\n";
    }
    for (size_t i = pick(rng, 1, 6); i > 0; --i) {
        write(3, pick(rng, 0, kPathSlots - 1), pick(rng, 0, 1) != 0);
    }
    for (size_t i = pick(rng, 0, 3); i > 0; --i) {
        t << R"({"ev":"syscall_enter","tid":4,"nr":"rename"})" << "\n";
        t << R"({"ev":"syscall_exit","tid":4,"nr":"rename"})" << "\n";
    }
    return t.str();
}

struct RaceCheck {
    size_t decisions = 0;
    size_t mismatches = 0;      // filter decision differs from the entry-time contents
    size_t changed_in_flight = 0; // path bytes changed between entry and exit
    size_t stalls = 0;
    bool finished = false;
};

/// Runs the trace under a seeded random schedule and compares every open
/// decision with the one implied by the path bytes at syscall entry, tracked
/// in a shadow copy of the path slots.
inline RaceCheck check_race(const std::string& trace, const BundleRegistry& reg, ProtectionMode mode, uint64_t seed) {
    EngineConfig cfg;
    cfg.protection = mode;
    auto events = parse_trace(trace);
    Simulator sim(Engine(cfg), events, reg);
    Rng rng(seed);
    std::map<uint64_t, std::string> shadow;
    std::map<size_t, std::string> at_entry; // event index -> path at entry
    std::vector<size_t> opens;
    RaceCheck rc;
    while (true) {
        auto ready = sim.runnable();
        if (ready.empty()) {
            break;
        }
        Tid tid = ready[pick(rng, 0, ready.size() - 1)];
        size_t idx = *sim.head(tid);
        const TraceEvent& ev = events[idx];
        if (ev.kind == EventKind::syscall_enter && ev.ctx.nr == 2 && !at_entry.contains(idx)) {
            at_entry[idx] = shadow[ev.ctx.args[0]];
            opens.push_back(idx);
        }
        if (ev.kind == EventKind::syscall_exit && ev.ctx.nr == 2) {
            // The matching enter is the last open this task started.
            if (shadow[events[opens.back()].ctx.args[0]] != at_entry[opens.back()]) {
                ++rc.changed_in_flight;
            }
        }
        sim.step(tid);
        if (ev.kind == EventKind::mem_write && sim.head(tid) != idx) {
            std::string s(ev.data.begin(), ev.data.end());
            shadow[ev.addr] = s.substr(0, s.find('\0'));
        }
    }
    rc.finished = sim.finished();
    rc.stalls = sim.log().stalls;
    size_t k = 0;
    for (const auto& d : sim.log().decisions) {
        if (d.tid != 2 || d.nr != 2) {
            continue;
        }
        ++rc.decisions;
        const std::string& path = at_entry.at(opens.at(k++));
        auto want = path.rfind("/etc", 0) == 0 ? make_action(ActionKind::errno_, 13) : make_action(ActionKind::allow);
        if (!(d.action == want)) {
            ++rc.mismatches;
        }
    }
    if (k != opens.size()) {
        ++rc.mismatches;
    }
    return rc;
}

} // namespace sfvm::testing
