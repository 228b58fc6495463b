// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Interpreter for filter programs.
//
// Registers carry a runtime tag so that every rule the verifier enforces is
// re-checked here; a violation becomes a fault instead of undefined
// behaviour. Execution is resumable: a helper that has to block (wait_syscall,
// a sleepable page-fault service) leaves the state parked on the call
// instruction and the host resumes it later.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sfvm/action.hpp"
#include "sfvm/bytes.hpp"
#include "sfvm/context.hpp"
#include "sfvm/isa.hpp"
#include "sfvm/maps.hpp"
#include "sfvm/program.hpp"

namespace sfvm {

inline constexpr uint32_t kMaxTailCallDepth = 32;

using ProgId = uint64_t;

/// A verified program with its map references bound to concrete maps.
struct LoadedProgram {
    FilterProgram prog;
    std::vector<MapId> maps; // parallel to prog.map_refs
};

enum class ReadStatus : uint8_t { ok, fault, needs_fault_service };

struct UserRead {
    ReadStatus status = ReadStatus::fault;
    Bytes data;
};

/// Everything a running filter may touch outside its own registers and stack.
class HelperHost {
  public:
    virtual ~HelperHost() = default;
    virtual PolicyMap* map(MapId id) = 0;
    virtual const LoadedProgram* program(ProgId id) = 0;
    virtual uint64_t now_ns() = 0;
    /// Thread-group leader of the current task.
    virtual uint64_t current_leader() = 0;
    /// Reads user memory as seen by the argument snapshot. With stop_at_nul,
    /// returns bytes up to and including the first NUL (or `len` bytes).
    virtual UserRead read_user(uint64_t addr, size_t len, bool stop_at_nul, bool sleepable) = 0;
    /// Returns true if the caller may proceed, false if it must block.
    virtual bool wait_syscall(int64_t curr_nr, int64_t target_nr) = 0;
};

enum class VTag : uint8_t { uninit, scalar, ctx, frame, map_ref, map_value };

struct Value {
    VTag tag = VTag::uninit;
    uint64_t v = 0;   // scalar value
    int64_t off = 0;  // frame / map value offset
    MapId map = 0;
    CellId cell = 0;

    static Value scalar(uint64_t x) { return Value{VTag::scalar, x}; }
    friend bool operator==(const Value&, const Value&) = default;
};

struct TraceEntry {
    ProgId prog;
    uint32_t pc;
    friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

struct VmOutcome {
    uint32_t raw_action = 0;
    uint64_t steps_executed = 0;
    std::array<uint64_t, kNumHelpers> helper_calls{};
    std::optional<std::string> faulted;
    uint32_t tail_calls = 0;
    std::vector<TraceEntry> trace; // filled only when tracing is enabled

    [[nodiscard]] uint64_t total_helper_calls() const {
        uint64_t n = 0;
        for (auto c : helper_calls) {
            n += c;
        }
        return n;
    }
};

struct VmOptions {
    uint64_t step_limit = 1000000;
    ActionKind bad_filter_action = ActionKind::kill_thread;
    bool trace = false;
};

enum class BlockKind : uint8_t { none, wait_syscall, fault_service };

struct VmBlock {
    BlockKind kind = BlockKind::none;
    int64_t curr_nr = 0;
    int64_t target_nr = 0;
    uint64_t addr = 0;
    uint64_t len = 0;
};

enum class VmStatus : uint8_t { running, done, blocked };

/// Complete, copyable state of one filter invocation.
struct VmState {
    ProgId prog = 0;
    size_t pc = 0;
    std::array<Value, kNumRegisters> regs{};
    std::array<uint8_t, kStackSize> stack{};
    uint32_t tail_depth = 0;
    SyscallContext ctx;
    VmStatus status = VmStatus::running;
    VmBlock block;
    VmOutcome out;

    static VmState start(ProgId prog, const SyscallContext& ctx) {
        VmState s;
        s.prog = prog;
        s.ctx = ctx;
        s.reset_frame();
        return s;
    }

    void reset_frame() {
        pc = 0;
        regs = {};
        stack = {};
        regs[1] = Value{VTag::ctx};
        regs[kFrameRegister] = Value{VTag::frame};
    }
};

namespace vm_detail {

struct Fault {
    std::string what;
};

class Interpreter {
  public:
    Interpreter(VmState& st, HelperHost& host, const VmOptions& opt) : st_(st), host_(host), opt_(opt) {}

    void run() {
        st_.status = VmStatus::running;
        st_.block = {};
        try {
            loop();
        } catch (const Fault& f) {
            st_.out.faulted = f.what;
            st_.out.raw_action = make_action(opt_.bad_filter_action).raw;
            st_.status = VmStatus::done;
        }
        // Cells deleted during the run are only reachable through registers
        // of this run.
        if (st_.status == VmStatus::done) {
            drop_retired();
        }
    }

  private:
    void drop_retired() {
        for (auto id : touched_maps_) {
            if (auto* m = host_.map(id)) {
                m->drop_retired();
            }
        }
    }

    [[noreturn]] static void fault(std::string what) { throw Fault{std::move(what)}; }

    const LoadedProgram& program() {
        const LoadedProgram* p = host_.program(st_.prog);
        if (!p) {
            fault("program " + std::to_string(st_.prog) + " does not exist");
        }
        return *p;
    }

    const Value& read_reg(uint8_t r) {
        if (r >= kNumRegisters) {
            fault("register r" + std::to_string(r) + " out of range");
        }
        if (st_.regs[r].tag == VTag::uninit) {
            fault("read of uninitialized register r" + std::to_string(r));
        }
        return st_.regs[r];
    }

    uint64_t read_scalar(uint8_t r) {
        const Value& v = read_reg(r);
        if (v.tag != VTag::scalar) {
            fault("r" + std::to_string(r) + " is not a scalar");
        }
        return v.v;
    }

    Value& write_reg(uint8_t r) {
        if (r >= kFrameRegister) {
            fault("write to read-only or invalid register r" + std::to_string(r));
        }
        return st_.regs[r];
    }

    PolicyMap& map_of(const Value& v) {
        if (v.tag != VTag::map_ref) {
            fault("expected a map reference");
        }
        PolicyMap* m = host_.map(v.map);
        if (!m) {
            fault("map " + std::to_string(v.map) + " no longer exists");
        }
        touched_maps_.push_back(v.map);
        return *m;
    }

    // Bytes at a stack location given by a frame pointer value.
    std::span<uint8_t> stack_span(const Value& p, int64_t extra, size_t len) {
        if (p.tag != VTag::frame) {
            fault("expected a stack pointer");
        }
        int64_t off = p.off + extra;
        if (off < -kStackSize || off + static_cast<int64_t>(len) > 0 || len == 0) {
            fault("stack access out of bounds at fp" + std::to_string(off));
        }
        return std::span<uint8_t>(st_.stack).subspan(static_cast<size_t>(off + kStackSize), len);
    }

    std::span<uint8_t> memory(const Value& p, int64_t extra, size_t len) {
        if (p.tag == VTag::frame) {
            return stack_span(p, extra, len);
        }
        if (p.tag == VTag::map_value) {
            PolicyMap* m = host_.map(p.map);
            Bytes* cell = m ? m->cell_or_retired(p.cell) : nullptr;
            if (!cell) {
                fault("dangling map value pointer");
            }
            int64_t off = p.off + extra;
            if (off < 0 || off + static_cast<int64_t>(len) > static_cast<int64_t>(cell->size())) {
                fault("map value access out of bounds at offset " + std::to_string(off));
            }
            return std::span<uint8_t>(*cell).subspan(static_cast<size_t>(off), len);
        }
        if (p.tag == VTag::scalar && p.v == 0) {
            fault("null pointer dereference");
        }
        fault("memory access through a non-pointer");
    }

    void finish(uint32_t raw) {
        st_.out.raw_action = raw;
        st_.status = VmStatus::done;
    }

    void count_step(ProgId prog, size_t pc) {
        ++st_.out.steps_executed;
        if (opt_.trace) {
            st_.out.trace.push_back(TraceEntry{prog, static_cast<uint32_t>(pc)});
        }
    }

    // Transfers control to slot `idx` of a prog_array. Returns false if the slot is empty.
    bool do_tail_call(PolicyMap& pa, uint64_t idx) {
        if (pa.kind() != MapKind::prog_array) {
            fault("tail call through a non-prog_array map");
        }
        if (idx >= pa.decl().max_entries) {
            return false;
        }
        const Bytes* slot = pa.cell(idx);
        uint64_t target = pa.decl().value_size == 4 ? load_le<uint32_t>(*slot, 0) : load_le<uint64_t>(*slot, 0);
        if (target == 0 || !host_.program(target)) {
            return false;
        }
        if (st_.tail_depth + 1 > kMaxTailCallDepth) {
            fault("tail call depth exceeded (limit " + std::to_string(kMaxTailCallDepth) + ")");
        }
        ++st_.tail_depth;
        ++st_.out.tail_calls;
        st_.prog = target;
        st_.reset_frame();
        return true;
    }

    void loop() {
        const LoadedProgram* lp = &program();
        while (true) {
            if (st_.out.steps_executed >= opt_.step_limit) {
                fault("runtime step limit exceeded");
            }
            const auto& insns = lp->prog.instructions;
            if (st_.pc >= insns.size()) {
                fault("control fell off the end of the program");
            }
            const size_t pc = st_.pc;
            const Instruction insn = insns[pc];
            auto info = opcode_info(insn.opcode);
            if (!info) {
                fault("invalid opcode at " + std::to_string(pc));
            }
            using F = OpcodeInfo::Form;
            if (info->form != F::call) {
                count_step(st_.prog, pc); // calls count once they complete
            }
            switch (info->form) {
            case F::exit: {
                const Value& r0 = read_reg(0);
                if (r0.tag != VTag::scalar) {
                    fault("exit with a non-scalar r0");
                }
                finish(static_cast<uint32_t>(r0.v));
                return;
            }
            case F::alu:
                alu(insn);
                ++st_.pc;
                break;
            case F::ld_imm64:
                if (insn.src == kPseudoMapRef) {
                    if (insn.imm < 0 || static_cast<size_t>(insn.imm) >= lp->maps.size()) {
                        fault("reference to unbound map " + std::to_string(insn.imm));
                    }
                    write_reg(insn.dst) = Value{VTag::map_ref, 0, 0, lp->maps[static_cast<size_t>(insn.imm)]};
                } else {
                    write_reg(insn.dst) = Value::scalar(static_cast<uint64_t>(insn.imm));
                }
                ++st_.pc;
                break;
            case F::ld_ctx: {
                auto f = context_field_at(insn.offset, insn.imm);
                if (!f) {
                    fault("context read out of bounds or misaligned (offset " + std::to_string(insn.offset) +
                          ", width " + std::to_string(insn.imm) + ")");
                }
                auto bytes = st_.ctx.serialize();
                uint64_t v = f->width == 4 ? load_le<uint32_t>(bytes, f->offset) : load_le<uint64_t>(bytes, f->offset);
                write_reg(insn.dst) = Value::scalar(v);
                ++st_.pc;
                break;
            }
            case F::ld_map: {
                auto mem = memory(read_reg(insn.src), insn.offset, 8);
                write_reg(insn.dst) = Value::scalar(load_le<uint64_t>(mem, 0));
                ++st_.pc;
                break;
            }
            case F::st_map: {
                uint64_t v = insn.opcode == Opcode::st_map_reg ? read_scalar(insn.src) : static_cast<uint64_t>(insn.imm);
                auto mem = memory(read_reg(insn.dst), insn.offset, 8);
                store_le<uint64_t>(mem, 0, v);
                ++st_.pc;
                break;
            }
            case F::ja:
                st_.pc = static_cast<size_t>(static_cast<int64_t>(pc) + 1 + insn.offset);
                break;
            case F::jcond: {
                const Value& a = read_reg(insn.dst);
                Value b = is_reg_source(insn.opcode) ? read_reg(insn.src)
                                                     : Value::scalar(static_cast<uint64_t>(insn.imm));
                const JmpOp jop = *jmp_op(insn.opcode);
                uint64_t av = 0;
                uint64_t bv = b.v;
                if (a.tag == VTag::map_value) {
                    // Null checks on pointers: a live pointer is never 0.
                    if (b.tag != VTag::scalar || b.v != 0 || (jop != JmpOp::jeq && jop != JmpOp::jne)) {
                        fault("pointer comparison");
                    }
                    av = 1;
                } else if (a.tag != VTag::scalar || b.tag != VTag::scalar) {
                    fault("pointer comparison");
                } else {
                    av = a.v;
                }
                bool taken = jmp_taken(jop, av, bv);
                st_.pc = taken ? static_cast<size_t>(static_cast<int64_t>(pc) + 1 + insn.offset) : pc + 1;
                break;
            }
            case F::call: {
                auto h = helper_info(insn.imm);
                if (!h) {
                    fault("call to unknown helper " + std::to_string(insn.imm));
                }
                if (h->sleepable_only && !lp->prog.sleepable) {
                    fault("helper " + std::string(h->name) + " called from a non-sleepable program");
                }
                ProgId before = st_.prog;
                if (!call(h->id, lp->prog.sleepable)) {
                    st_.status = VmStatus::blocked;
                    return; // pc stays on the call
                }
                ++st_.out.helper_calls[static_cast<size_t>(h->id) - 1];
                count_step(before, pc);
                if (tail_switched_) {
                    tail_switched_ = false;
                    lp = &program();
                } else {
                    ++st_.pc;
                }
                break;
            }
            case F::tail_call: {
                const Value& m = read_reg(insn.dst);
                uint64_t idx = read_scalar(insn.src);
                PolicyMap& pa = map_of(m);
                if (do_tail_call(pa, idx)) {
                    lp = &program();
                    break;
                }
                const Value& r0 = read_reg(0);
                if (r0.tag != VTag::scalar) {
                    fault("tail_call fallthrough with a non-scalar r0");
                }
                finish(static_cast<uint32_t>(r0.v));
                return;
            }
            }
        }
    }

    void alu(const Instruction& insn) {
        const AluOp op = *alu_op(insn.opcode);
        Value src = is_reg_source(insn.opcode) ? read_reg(insn.src) : Value::scalar(static_cast<uint64_t>(insn.imm));
        if (op == AluOp::mov) {
            write_reg(insn.dst) = src;
            return;
        }
        Value dst = read_reg(insn.dst);
        if (dst.tag == VTag::scalar && src.tag == VTag::scalar) {
            write_reg(insn.dst) = Value::scalar(alu_apply(op, dst.v, src.v));
            return;
        }
        if (src.tag != VTag::scalar) {
            fault("arithmetic with a pointer operand");
        }
        if ((dst.tag != VTag::frame && dst.tag != VTag::map_value) || (op != AluOp::add && op != AluOp::sub)) {
            fault("invalid pointer arithmetic");
        }
        auto delta = static_cast<int64_t>(src.v);
        dst.off += op == AluOp::add ? delta : -delta;
        write_reg(insn.dst) = dst;
    }

    // Runs a helper. Returns false if the task has to block.
    bool call(HelperId id, bool sleepable) {
        Value r0 = Value::scalar(0);
        switch (id) {
        case HelperId::map_lookup_elem: {
            PolicyMap& m = map_of(read_reg(1));
            if (m.kind() != MapKind::array && m.kind() != MapKind::hash) {
                fault("lookup on a " + std::string(map_kind_name(m.kind())) + " map");
            }
            auto key = stack_span(read_reg(2), 0, m.decl().key_size);
            if (auto cell = m.find_cell(key)) {
                r0 = Value{VTag::map_value, 0, 0, read_reg(1).map, *cell};
            }
            break;
        }
        case HelperId::map_update_elem: {
            PolicyMap& m = map_of(read_reg(1));
            if (m.kind() != MapKind::array && m.kind() != MapKind::hash) {
                fault("update on a " + std::string(map_kind_name(m.kind())) + " map");
            }
            auto key = stack_span(read_reg(2), 0, m.decl().key_size);
            auto value = stack_span(read_reg(3), 0, m.decl().value_size);
            r0 = Value::scalar(static_cast<uint64_t>(map_status_errno(m.update(key, value, read_scalar(4)))));
            break;
        }
        case HelperId::map_delete_elem: {
            PolicyMap& m = map_of(read_reg(1));
            if (m.kind() != MapKind::array && m.kind() != MapKind::hash) {
                fault("delete on a " + std::string(map_kind_name(m.kind())) + " map");
            }
            auto key = stack_span(read_reg(2), 0, m.decl().key_size);
            r0 = Value::scalar(static_cast<uint64_t>(map_status_errno(m.erase(key))));
            break;
        }
        case HelperId::tail_call: {
            if (read_reg(1).tag != VTag::ctx) {
                fault("tail_call helper needs the context in r1");
            }
            PolicyMap& pa = map_of(read_reg(2));
            if (do_tail_call(pa, read_scalar(3))) {
                tail_switched_ = true;
                return true;
            }
            r0 = Value::scalar(static_cast<uint64_t>(-2)); // ENOENT
            break;
        }
        case HelperId::ktime_get_ns:
            r0 = Value::scalar(host_.now_ns());
            break;
        case HelperId::safe_read_user:
        case HelperId::safe_read_user_str: {
            uint64_t size = read_scalar(2);
            if (size == 0 || size > static_cast<uint64_t>(kStackSize)) {
                fault("user read size out of range");
            }
            auto dst = stack_span(read_reg(1), 0, size);
            uint64_t addr = read_scalar(3);
            bool str = id == HelperId::safe_read_user_str;
            UserRead rd = host_.read_user(addr, size, str, sleepable);
            if (rd.status == ReadStatus::needs_fault_service) {
                if (!sleepable) {
                    fault("host requested fault service for a non-sleepable program");
                }
                st_.block = VmBlock{BlockKind::fault_service, 0, 0, addr, size};
                return false;
            }
            std::fill(dst.begin(), dst.end(), 0);
            if (rd.status == ReadStatus::fault) {
                r0 = Value::scalar(static_cast<uint64_t>(-14)); // EFAULT
                break;
            }
            std::copy_n(rd.data.begin(), std::min(rd.data.size(), dst.size()), dst.begin());
            if (!str) {
                r0 = Value::scalar(0);
            } else if (!rd.data.empty() && rd.data.back() == 0) {
                r0 = Value::scalar(rd.data.size());
            } else {
                r0 = Value::scalar(static_cast<uint64_t>(-7)); // E2BIG: truncated
            }
            break;
        }
        case HelperId::safe_task_storage_get: {
            PolicyMap& m = map_of(read_reg(1));
            uint64_t flags = read_scalar(2);
            if (m.kind() != MapKind::task_storage) {
                fault("task storage helper on a " + std::string(map_kind_name(m.kind())) + " map");
            }
            if (auto cell = m.task_cell(host_.current_leader(), (flags & kTaskStorageCreate) != 0)) {
                r0 = Value{VTag::map_value, 0, 0, read_reg(1).map, *cell};
            }
            break;
        }
        case HelperId::safe_task_storage_delete: {
            PolicyMap& m = map_of(read_reg(1));
            if (m.kind() != MapKind::task_storage) {
                fault("task storage helper on a " + std::string(map_kind_name(m.kind())) + " map");
            }
            r0 = Value::scalar(static_cast<uint64_t>(map_status_errno(m.task_delete(host_.current_leader()))));
            break;
        }
        case HelperId::wait_syscall: {
            auto curr = static_cast<int64_t>(read_scalar(1));
            auto target = static_cast<int64_t>(read_scalar(2));
            if (!host_.wait_syscall(curr, target)) {
                st_.block = VmBlock{BlockKind::wait_syscall, curr, target, 0, 0};
                return false;
            }
            break;
        }
        }
        for (uint8_t r = 1; r <= 5; ++r) {
            st_.regs[r] = Value{};
        }
        st_.regs[0] = r0;
        return true;
    }

    VmState& st_;
    HelperHost& host_;
    const VmOptions& opt_;
    std::vector<MapId> touched_maps_;
    bool tail_switched_ = false;
};

} // namespace vm_detail

/// Runs (or resumes) a filter invocation until it finishes or blocks.
inline VmStatus run_vm(VmState& st, HelperHost& host, const VmOptions& opt = {}) {
    if (st.status == VmStatus::done) {
        return st.status;
    }
    vm_detail::Interpreter(st, host, opt).run();
    return st.status;
}

/// Runs a program to completion. Blocking helpers are reported as a fault.
inline VmOutcome execute(ProgId prog, const SyscallContext& ctx, HelperHost& host, const VmOptions& opt = {}) {
    VmState st = VmState::start(prog, ctx);
    if (run_vm(st, host, opt) == VmStatus::blocked) {
        st.out.faulted = "filter blocked outside of a scheduler";
        st.out.raw_action = make_action(opt.bad_filter_action).raw;
    }
    return std::move(st.out);
}

/// A self-contained host: a map table, a program table and a fixed task.
/// User reads are served from an optional flat byte map.
class SimpleHost : public HelperHost {
  public:
    MapTable maps;
    std::map<ProgId, LoadedProgram> programs;
    uint64_t clock_ns = 0;
    uint64_t leader = 1;
    std::map<uint64_t, uint8_t> user_bytes;
    std::map<int64_t, int64_t> inflight;

    /// Creates fresh maps for the program's declarations and registers it.
    ProgId add(FilterProgram prog) {
        LoadedProgram lp;
        for (const auto& decl : prog.map_refs) {
            MapId id = maps.create(decl);
            maps.retain(id);
            lp.maps.push_back(id);
        }
        lp.prog = std::move(prog);
        return add_bound(std::move(lp));
    }

    ProgId add_bound(LoadedProgram lp) {
        ProgId id = next_prog_++;
        programs.emplace(id, std::move(lp));
        return id;
    }

    PolicyMap* map(MapId id) override { return maps.find(id); }
    const LoadedProgram* program(ProgId id) override {
        auto it = programs.find(id);
        return it == programs.end() ? nullptr : &it->second;
    }
    uint64_t now_ns() override { return clock_ns; }
    uint64_t current_leader() override { return leader; }
    UserRead read_user(uint64_t addr, size_t len, bool stop_at_nul, bool) override {
        UserRead r{ReadStatus::ok, {}};
        for (size_t i = 0; i < len; ++i) {
            auto it = user_bytes.find(addr + i);
            if (it == user_bytes.end()) {
                return UserRead{ReadStatus::fault, {}};
            }
            r.data.push_back(it->second);
            if (stop_at_nul && it->second == 0) {
                break;
            }
        }
        return r;
    }
    bool wait_syscall(int64_t curr, int64_t target) override {
        ++inflight[curr];
        return inflight[target] - (curr == target ? 1 : 0) <= 0;
    }

  private:
    ProgId next_prog_ = 1;
};

} // namespace sfvm
