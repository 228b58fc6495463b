// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Static verifier for filter programs.
//
// A syntactic pass checks opcodes, registers, context reads, helper ids and
// jump ranges. Then every path is explored by an abstract interpreter that
// tracks register types, constant scalars and 8-byte stack slots. States are
// recorded at jump targets: a state seen again on the current path is a loop
// that makes no progress and is rejected; one seen on an earlier finished path
// is pruned. All abstract steps count toward the step budget.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "sfvm/context.hpp"
#include "sfvm/isa.hpp"
#include "sfvm/maps.hpp"
#include "sfvm/program.hpp"

namespace sfvm {

struct VerifierConfig {
    size_t max_instructions = 100000;
    uint64_t step_budget = 1000000;
};

struct VerifierReport {
    bool accepted = false;
    std::string reason;
    std::optional<size_t> offending_instruction;
    std::vector<std::string> notes; // one per instruction
    uint64_t steps = 0;

    friend bool operator==(const VerifierReport&, const VerifierReport&) = default;
};

namespace verifier_detail {

enum class AType : uint8_t { uninit, scalar, ctx, frame, map_ref, map_value, map_value_or_null };

inline const char* type_name(AType t) {
    switch (t) {
    case AType::uninit: return "uninitialized";
    case AType::scalar: return "scalar";
    case AType::ctx: return "ctx";
    case AType::frame: return "frame pointer";
    case AType::map_ref: return "map reference";
    case AType::map_value: return "map value pointer";
    case AType::map_value_or_null: return "map value pointer (maybe null)";
    }
    return "?";
}

struct AVal {
    AType type = AType::uninit;
    bool known = false; // scalars only
    uint64_t value = 0; // scalar constant
    int64_t off = 0;    // frame / map value offset
    uint32_t map = 0;   // index into program.map_refs
    uint32_t id = 0;    // null-check identity for map_value_or_null

    friend bool operator==(const AVal&, const AVal&) = default;

    static AVal scalar() { return AVal{AType::scalar}; }
    static AVal constant(uint64_t v) { return AVal{AType::scalar, true, v}; }
    [[nodiscard]] bool is_pointer() const { return type != AType::uninit && type != AType::scalar; }
};

struct ASlot {
    bool init = false;
    bool known = false;
    uint64_t value = 0;

    friend bool operator==(const ASlot&, const ASlot&) = default;
};

inline constexpr size_t kSlots = kStackSize / 8;

struct AState {
    size_t pc = 0;
    std::array<AVal, kNumRegisters> regs{};
    std::array<ASlot, kSlots> stack{};
    uint32_t next_id = 1;

    [[nodiscard]] std::string key() const {
        std::string k;
        k.reserve(16 + regs.size() * 32 + stack.size() * 10);
        auto put = [&k](uint64_t v) { k.append(reinterpret_cast<const char*>(&v), sizeof v); };
        put(pc);
        for (const auto& r : regs) {
            put(static_cast<uint64_t>(r.type) | (uint64_t{r.known} << 8) | (uint64_t{r.map} << 16));
            put(r.value);
            put(static_cast<uint64_t>(r.off));
            put(r.id);
        }
        for (const auto& s : stack) {
            k.push_back(static_cast<char>(s.init | (s.known << 1)));
            if (s.known) {
                put(s.value);
            }
        }
        return k;
    }
};

struct Rejection {
    size_t pc;
    std::string reason;
};

class Checker {
  public:
    Checker(const FilterProgram& prog, const VerifierConfig& cfg) : prog_(prog), cfg_(cfg) {}

    VerifierReport run() {
        visits_.assign(prog_.instructions.size(), 0);
        if (auto r = syntactic()) {
            return finish(std::move(*r));
        }
        explored_ = true;
        if (auto r = explore()) {
            return finish(std::move(*r));
        }
        return finish(std::nullopt);
    }

  private:
    VerifierReport finish(std::optional<Rejection> rej) {
        VerifierReport rep;
        rep.steps = steps_;
        if (rej) {
            rep.accepted = false;
            rep.reason = rej->reason;
            if (rej->pc != SIZE_MAX) {
                rep.offending_instruction = rej->pc;
            }
        } else {
            rep.accepted = true;
        }
        rep.notes.reserve(visits_.size());
        for (size_t i = 0; i < visits_.size(); ++i) {
            if (!explored_) {
                rep.notes.push_back("not explored");
            } else if (visits_[i] == 0) {
                rep.notes.push_back("unreachable");
            } else {
                rep.notes.push_back("visits=" + std::to_string(visits_[i]));
            }
        }
        return rep;
    }

    static std::string reg_name(uint8_t r) { return "r" + std::to_string(r); }

    std::optional<Rejection> syntactic() {
        const auto& insns = prog_.instructions;
        const size_t n = insns.size();
        if (n == 0) {
            return Rejection{SIZE_MAX, "empty program"};
        }
        if (n > cfg_.max_instructions) {
            return Rejection{SIZE_MAX, "program has " + std::to_string(n) + " instructions, limit is " +
                                           std::to_string(cfg_.max_instructions)};
        }
        for (size_t i = 0; i < prog_.map_refs.size(); ++i) {
            try {
                PolicyMap::validate(prog_.map_refs[i]);
            } catch (const MapError& e) {
                return Rejection{SIZE_MAX, std::string("invalid map declaration: ") + e.what()};
            }
            for (size_t j = 0; j < i; ++j) {
                if (prog_.map_refs[j].name == prog_.map_refs[i].name) {
                    return Rejection{SIZE_MAX, "duplicate map name '" + prog_.map_refs[i].name + "'"};
                }
            }
        }
        is_target_.assign(n, false);
        for (size_t i = 0; i < n; ++i) {
            const auto& insn = insns[i];
            auto info = opcode_info(insn.opcode);
            if (!info) {
                return Rejection{i, "invalid opcode"};
            }
            if (insn.dst >= kNumRegisters || insn.src >= kNumRegisters) {
                return Rejection{i, "register out of range"};
            }
            using F = OpcodeInfo::Form;
            bool writes_dst = info->form == F::alu || info->form == F::ld_imm64 || info->form == F::ld_ctx ||
                              info->form == F::ld_map;
            if (writes_dst && insn.dst == kFrameRegister) {
                return Rejection{i, "frame register r10 is read-only"};
            }
            switch (info->form) {
            case F::ld_ctx: {
                int64_t off = insn.offset;
                int64_t width = insn.imm;
                constexpr auto kCtx = static_cast<int64_t>(SyscallContext::kSize);
                if (off < 0 || width <= 0 || width > kCtx || off + width > kCtx) {
                    return Rejection{i, "context read out of bounds (offset " + std::to_string(off) + ", width " +
                                            std::to_string(width) + ")"};
                }
                if (!context_field_at(off, width)) {
                    return Rejection{i, "misaligned context read (offset " + std::to_string(off) + ", width " +
                                            std::to_string(width) + ")"};
                }
                break;
            }
            case F::call: {
                auto h = helper_info(insn.imm);
                if (!h) {
                    return Rejection{i, "call to helper id " + std::to_string(insn.imm) + " which is not permitted"};
                }
                if (h->sleepable_only && !prog_.sleepable) {
                    return Rejection{i, "helper " + std::string(h->name) + " is only allowed in sleepable programs"};
                }
                break;
            }
            case F::ja:
            case F::jcond: {
                int64_t t = static_cast<int64_t>(i) + 1 + insn.offset;
                if (t < 0 || t >= static_cast<int64_t>(n)) {
                    return Rejection{i, "jump out of range (target " + std::to_string(t) + ")"};
                }
                is_target_[static_cast<size_t>(t)] = true;
                break;
            }
            case F::ld_imm64:
                if (insn.src == kPseudoMapRef) {
                    if (insn.imm < 0 || static_cast<uint64_t>(insn.imm) >= prog_.map_refs.size()) {
                        return Rejection{i, "reference to undeclared map " + std::to_string(insn.imm)};
                    }
                } else if (insn.src != 0) {
                    return Rejection{i, "invalid ld_imm64 source"};
                }
                break;
            default:
                break;
            }
        }
        return std::nullopt;
    }

    // ---------------------------------------------------------------- explore

    struct Frame {
        AState st;
        bool expanded = false;
        std::string key;
    };

    enum class Mark : uint8_t { on_path, done };

    std::optional<Rejection> explore() {
        AState init;
        init.regs[1] = AVal{AType::ctx};
        init.regs[kFrameRegister] = AVal{AType::frame};
        std::vector<Frame> stack;
        stack.push_back(Frame{init, false, {}});
        std::unordered_map<std::string, Mark> seen;

        while (!stack.empty()) {
            if (stack.back().expanded) {
                if (!stack.back().key.empty()) {
                    seen[stack.back().key] = Mark::done;
                }
                stack.pop_back();
                continue;
            }
            stack.back().expanded = true;
            AState st = stack.back().st;
            if (is_target_[st.pc]) {
                std::string k = st.key();
                auto it = seen.find(k);
                if (it != seen.end()) {
                    if (it->second == Mark::on_path) {
                        return Rejection{st.pc, "loop without progress (possible infinite loop)"};
                    }
                    stack.pop_back();
                    continue;
                }
                seen.emplace(k, Mark::on_path);
                stack.back().key = std::move(k);
            }
            std::vector<AState> succ;
            if (auto r = run_block(st, succ)) {
                return r;
            }
            // Push in reverse so the fall-through path is explored first.
            for (auto it = succ.rbegin(); it != succ.rend(); ++it) {
                stack.push_back(Frame{std::move(*it), false, {}});
            }
        }
        return std::nullopt;
    }

    // Executes straight-line code from st.pc until a branch, an exit or the
    // next jump target. Successor states go to `succ`.
    std::optional<Rejection> run_block(AState st, std::vector<AState>& succ) {
        const auto& insns = prog_.instructions;
        const size_t n = insns.size();
        bool first = true;
        while (true) {
            if (st.pc >= n) {
                return Rejection{n - 1, "control falls off the end of the program"};
            }
            if (!first && is_target_[st.pc]) {
                succ.push_back(std::move(st));
                return std::nullopt;
            }
            first = false;
            if (++steps_ > cfg_.step_budget) {
                return Rejection{st.pc, "step budget of " + std::to_string(cfg_.step_budget) +
                                            " exhausted (loop not provably bounded)"};
            }
            ++visits_[st.pc];
            const size_t pc = st.pc;
            const Instruction& insn = insns[pc];
            auto info = *opcode_info(insn.opcode);
            using F = OpcodeInfo::Form;
            switch (info.form) {
            case F::exit: {
                const AVal& r0 = st.regs[0];
                if (r0.type == AType::uninit) {
                    return Rejection{pc, "exit with uninitialized r0"};
                }
                if (r0.type != AType::scalar) {
                    return Rejection{pc, "r0 must be a scalar at exit, found " + std::string(type_name(r0.type))};
                }
                return std::nullopt;
            }
            case F::tail_call: {
                const AVal& m = st.regs[insn.dst];
                if (m.type != AType::map_ref || prog_.map_refs[m.map].kind != MapKind::prog_array) {
                    return Rejection{pc, "tail_call requires a prog_array map in " + reg_name(insn.dst)};
                }
                if (auto r = need_scalar(st, insn.src, pc)) {
                    return r;
                }
                const AVal& r0 = st.regs[0];
                if (r0.type != AType::scalar) {
                    return Rejection{pc, "r0 must hold a scalar before tail_call (used if the slot is empty)"};
                }
                return std::nullopt;
            }
            case F::ja:
                st.pc = static_cast<size_t>(static_cast<int64_t>(pc) + 1 + insn.offset);
                succ.push_back(std::move(st));
                return std::nullopt;
            case F::jcond:
                return branch(std::move(st), insn, succ);
            case F::alu:
                if (auto r = alu(st, insn)) {
                    return r;
                }
                break;
            case F::ld_imm64:
                st.regs[insn.dst] = insn.src == kPseudoMapRef
                                        ? AVal{AType::map_ref, false, 0, 0, static_cast<uint32_t>(insn.imm)}
                                        : AVal::constant(static_cast<uint64_t>(insn.imm));
                break;
            case F::ld_ctx:
                st.regs[insn.dst] = AVal::scalar();
                break;
            case F::ld_map: {
                const AVal& p = st.regs[insn.src];
                auto r = memory_access(st, p, insn.src, insn.offset, pc);
                if (std::holds_alternative<Rejection>(r)) {
                    return std::get<Rejection>(r);
                }
                auto slot = std::get<std::optional<size_t>>(r);
                if (slot) {
                    const ASlot& s = st.stack[*slot];
                    if (!s.init) {
                        return Rejection{pc, "read of uninitialized stack slot fp" + std::to_string(p.off + insn.offset)};
                    }
                    st.regs[insn.dst] = s.known ? AVal::constant(s.value) : AVal::scalar();
                } else {
                    st.regs[insn.dst] = AVal::scalar();
                }
                break;
            }
            case F::st_map: {
                AVal v = AVal::constant(static_cast<uint64_t>(insn.imm));
                if (insn.opcode == Opcode::st_map_reg) {
                    v = st.regs[insn.src];
                    if (v.type == AType::uninit) {
                        return Rejection{pc, "read of uninitialized register " + reg_name(insn.src)};
                    }
                    if (v.type != AType::scalar) {
                        return Rejection{pc, "storing a pointer to memory is not allowed"};
                    }
                }
                const AVal& p = st.regs[insn.dst];
                auto r = memory_access(st, p, insn.dst, insn.offset, pc);
                if (std::holds_alternative<Rejection>(r)) {
                    return std::get<Rejection>(r);
                }
                if (auto slot = std::get<std::optional<size_t>>(r)) {
                    st.stack[*slot] = ASlot{true, v.known, v.value};
                }
                break;
            }
            case F::call:
                if (auto r = call(st, insn, pc)) {
                    return r;
                }
                break;
            }
            ++st.pc;
        }
    }

    std::optional<Rejection> need_init(const AState& st, uint8_t reg, size_t pc) const {
        if (st.regs[reg].type == AType::uninit) {
            return Rejection{pc, "read of uninitialized register " + reg_name(reg)};
        }
        return std::nullopt;
    }

    std::optional<Rejection> need_scalar(const AState& st, uint8_t reg, size_t pc) const {
        if (auto r = need_init(st, reg, pc)) {
            return r;
        }
        if (st.regs[reg].type != AType::scalar) {
            return Rejection{pc, reg_name(reg) + " must be a scalar, found " + type_name(st.regs[reg].type)};
        }
        return std::nullopt;
    }

    // Returns the stack slot for frame accesses, nullopt for map values.
    std::variant<Rejection, std::optional<size_t>> memory_access(const AState& st, const AVal& p, uint8_t reg,
                                                                 int16_t insn_off, size_t pc) const {
        if (p.type == AType::uninit) {
            return Rejection{pc, "read of uninitialized register " + reg_name(reg)};
        }
        const int64_t off = p.off + insn_off;
        if (p.type == AType::frame) {
            if (off < -kStackSize || off + 8 > 0) {
                return Rejection{pc, "stack access out of bounds at fp" + std::to_string(off)};
            }
            if (off % 8 != 0) {
                return Rejection{pc, "misaligned stack access at fp" + std::to_string(off)};
            }
            return std::optional<size_t>{static_cast<size_t>((off + kStackSize) / 8)};
        }
        if (p.type == AType::map_value) {
            const auto& decl = prog_.map_refs[p.map];
            if (off < 0 || off + 8 > static_cast<int64_t>(decl.value_size)) {
                return Rejection{pc, "map value access out of bounds (offset " + std::to_string(off) + ", value size " +
                                         std::to_string(decl.value_size) + ")"};
            }
            return std::optional<size_t>{};
        }
        if (p.type == AType::map_value_or_null) {
            return Rejection{pc, "possible null pointer dereference through " + reg_name(reg)};
        }
        (void)st;
        return Rejection{pc, "memory access through " + std::string(type_name(p.type))};
    }

    std::optional<Rejection> alu(AState& st, const Instruction& insn) {
        const size_t pc = st.pc;
        const AluOp op = *alu_op(insn.opcode);
        AVal src = AVal::constant(static_cast<uint64_t>(insn.imm));
        if (is_reg_source(insn.opcode)) {
            if (auto r = need_init(st, insn.src, pc)) {
                return r;
            }
            src = st.regs[insn.src];
        }
        AVal& dst = st.regs[insn.dst];
        if (op == AluOp::mov) {
            dst = src;
            return std::nullopt;
        }
        if (dst.type == AType::uninit) {
            return Rejection{pc, "read of uninitialized register " + reg_name(insn.dst)};
        }
        if (dst.type == AType::scalar && src.type == AType::scalar) {
            if (dst.known && src.known) {
                dst = AVal::constant(alu_apply(op, dst.value, src.value));
            } else {
                dst = AVal::scalar();
            }
            return std::nullopt;
        }
        if (src.is_pointer()) {
            return Rejection{pc, "arithmetic with a pointer operand is not allowed"};
        }
        // dst is a pointer, src a scalar.
        if (dst.type != AType::frame && dst.type != AType::map_value) {
            return Rejection{pc, "arithmetic on " + std::string(type_name(dst.type)) + " is not allowed"};
        }
        if (op != AluOp::add && op != AluOp::sub) {
            return Rejection{pc, "only add/sub are allowed on pointers"};
        }
        if (!src.known) {
            return Rejection{pc, "pointer arithmetic with a non-constant offset"};
        }
        auto delta = static_cast<int64_t>(src.value);
        if (delta > 1 << 20 || delta < -(1 << 20)) {
            return Rejection{pc, "pointer offset too large"};
        }
        dst.off += op == AluOp::add ? delta : -delta;
        return std::nullopt;
    }

    std::optional<Rejection> branch(AState st, const Instruction& insn, std::vector<AState>& succ) {
        const size_t pc = st.pc;
        const JmpOp op = *jmp_op(insn.opcode);
        const size_t taken_pc = static_cast<size_t>(static_cast<int64_t>(pc) + 1 + insn.offset);
        if (auto r = need_init(st, insn.dst, pc)) {
            return r;
        }
        AVal src = AVal::constant(static_cast<uint64_t>(insn.imm));
        if (is_reg_source(insn.opcode)) {
            if (auto r = need_init(st, insn.src, pc)) {
                return r;
            }
            src = st.regs[insn.src];
        }
        const AVal dst = st.regs[insn.dst];

        if (dst.type == AType::map_value_or_null) {
            bool zero_cmp = src.type == AType::scalar && src.known && src.value == 0;
            if (!zero_cmp || (op != JmpOp::jeq && op != JmpOp::jne)) {
                return Rejection{pc, "maybe-null pointer may only be compared against 0 with jeq/jne"};
            }
            AState is_null = st;
            AState non_null = std::move(st);
            for (size_t r = 0; r < kNumRegisters; ++r) {
                if (is_null.regs[r].type == AType::map_value_or_null && is_null.regs[r].id == dst.id) {
                    is_null.regs[r] = AVal::constant(0);
                    non_null.regs[r].type = AType::map_value;
                    non_null.regs[r].id = 0;
                }
            }
            AState& taken = op == JmpOp::jeq ? is_null : non_null;
            AState& fall = op == JmpOp::jeq ? non_null : is_null;
            taken.pc = taken_pc;
            fall.pc = pc + 1;
            succ.push_back(std::move(fall));
            succ.push_back(std::move(taken));
            return std::nullopt;
        }
        if (dst.is_pointer() || src.is_pointer()) {
            return Rejection{pc, "comparison involving a pointer is not allowed"};
        }
        if (dst.known && src.known) {
            st.pc = jmp_taken(op, dst.value, src.value) ? taken_pc : pc + 1;
            succ.push_back(std::move(st));
            return std::nullopt;
        }
        AState taken = st;
        AState fall = std::move(st);
        taken.pc = taken_pc;
        fall.pc = pc + 1;
        // Equality learns the constant on one side.
        if (src.known && (op == JmpOp::jeq || op == JmpOp::jne)) {
            AState& eq = op == JmpOp::jeq ? taken : fall;
            eq.regs[insn.dst] = AVal::constant(src.value);
        }
        succ.push_back(std::move(fall));
        succ.push_back(std::move(taken));
        return std::nullopt;
    }

    std::optional<Rejection> need_map(const AState& st, uint8_t reg, std::initializer_list<MapKind> kinds,
                                      size_t pc) const {
        const AVal& v = st.regs[reg];
        if (v.type != AType::map_ref) {
            return Rejection{pc, reg_name(reg) + " must be a map reference, found " + type_name(v.type)};
        }
        for (auto k : kinds) {
            if (prog_.map_refs[v.map].kind == k) {
                return std::nullopt;
            }
        }
        return Rejection{pc, "map '" + prog_.map_refs[v.map].name + "' of kind " +
                                 map_kind_name(prog_.map_refs[v.map].kind) + " is not valid for this helper"};
    }

    // Checks that reg points at `size` bytes of stack; if `read`, they must be initialized.
    std::optional<Rejection> need_stack_buf(AState& st, uint8_t reg, int64_t size, bool read, size_t pc) const {
        const AVal& v = st.regs[reg];
        if (v.type != AType::frame) {
            return Rejection{pc, reg_name(reg) + " must point to the stack, found " + type_name(v.type)};
        }
        if (size <= 0 || v.off < -kStackSize || v.off + size > 0) {
            return Rejection{pc, "stack buffer out of bounds at fp" + std::to_string(v.off) + " size " +
                                     std::to_string(size)};
        }
        size_t first = static_cast<size_t>((v.off + kStackSize) / 8);
        size_t last = static_cast<size_t>((v.off + size - 1 + kStackSize) / 8);
        for (size_t s = first; s <= last; ++s) {
            if (read && !st.stack[s].init) {
                return Rejection{pc, "helper reads uninitialized stack at fp" + std::to_string(v.off)};
            }
            if (!read) {
                st.stack[s] = ASlot{true, false, 0};
            }
        }
        return std::nullopt;
    }

    std::optional<Rejection> call(AState& st, const Instruction& insn, size_t pc) {
        const auto id = static_cast<HelperId>(insn.imm);
        AVal result = AVal::scalar();
        switch (id) {
        case HelperId::map_lookup_elem:
        case HelperId::map_update_elem:
        case HelperId::map_delete_elem: {
            if (auto r = need_map(st, 1, {MapKind::array, MapKind::hash}, pc)) {
                return r;
            }
            const auto& decl = prog_.map_refs[st.regs[1].map];
            if (auto r = need_stack_buf(st, 2, decl.key_size, true, pc)) {
                return r;
            }
            if (id == HelperId::map_update_elem) {
                if (auto r = need_stack_buf(st, 3, decl.value_size, true, pc)) {
                    return r;
                }
                if (auto r = need_scalar(st, 4, pc)) {
                    return r;
                }
            }
            if (id == HelperId::map_lookup_elem) {
                result = AVal{AType::map_value_or_null, false, 0, 0, st.regs[1].map, st.next_id++};
            }
            break;
        }
        case HelperId::tail_call:
            if (st.regs[1].type != AType::ctx) {
                return Rejection{pc, "r1 must be the context for tail_call"};
            }
            if (auto r = need_map(st, 2, {MapKind::prog_array}, pc)) {
                return r;
            }
            if (auto r = need_scalar(st, 3, pc)) {
                return r;
            }
            break;
        case HelperId::ktime_get_ns:
            break;
        case HelperId::safe_read_user:
        case HelperId::safe_read_user_str: {
            const AVal& size = st.regs[2];
            if (size.type != AType::scalar || !size.known || size.value == 0 || size.value > kStackSize) {
                return Rejection{pc, "r2 must be a constant size in 1.." + std::to_string(kStackSize)};
            }
            if (auto r = need_stack_buf(st, 1, static_cast<int64_t>(size.value), false, pc)) {
                return r;
            }
            if (auto r = need_scalar(st, 3, pc)) {
                return r;
            }
            break;
        }
        case HelperId::safe_task_storage_get:
            if (auto r = need_map(st, 1, {MapKind::task_storage}, pc)) {
                return r;
            }
            if (auto r = need_scalar(st, 2, pc)) {
                return r;
            }
            result = AVal{AType::map_value_or_null, false, 0, 0, st.regs[1].map, st.next_id++};
            break;
        case HelperId::safe_task_storage_delete:
            if (auto r = need_map(st, 1, {MapKind::task_storage}, pc)) {
                return r;
            }
            break;
        case HelperId::wait_syscall:
            if (auto r = need_scalar(st, 1, pc)) {
                return r;
            }
            if (auto r = need_scalar(st, 2, pc)) {
                return r;
            }
            break;
        }
        for (uint8_t r = 1; r <= 5; ++r) {
            st.regs[r] = AVal{};
        }
        st.regs[0] = result;
        return std::nullopt;
    }

    const FilterProgram& prog_;
    const VerifierConfig& cfg_;
    std::vector<bool> is_target_;
    std::vector<uint64_t> visits_;
    uint64_t steps_ = 0;
    bool explored_ = false;
};

} // namespace verifier_detail

/// Checks a program without modifying it.
inline VerifierReport check_program(const FilterProgram& prog, const VerifierConfig& cfg = {}) {
    return verifier_detail::Checker(prog, cfg).run();
}

/// Checks a program and sets prog.verified on acceptance.
inline VerifierReport verify(FilterProgram& prog, const VerifierConfig& cfg = {}) {
    auto rep = check_program(prog, cfg);
    prog.verified = rep.accepted;
    return rep;
}

} // namespace sfvm
