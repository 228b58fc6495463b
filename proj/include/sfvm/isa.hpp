// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Filter instruction set. Opcode values reuse the eBPF encodings where an
// eBPF equivalent exists; ld_ctx and tail_call are local additions.

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace sfvm {

enum class Opcode : uint8_t {
    add_imm = 0x07,
    add_reg = 0x0f,
    sub_imm = 0x17,
    sub_reg = 0x1f,
    mul_imm = 0x27,
    mul_reg = 0x2f,
    or_imm = 0x47,
    or_reg = 0x4f,
    and_imm = 0x57,
    and_reg = 0x5f,
    lsh_imm = 0x67,
    lsh_reg = 0x6f,
    rsh_imm = 0x77,
    rsh_reg = 0x7f,
    xor_imm = 0xa7,
    xor_reg = 0xaf,
    mov_imm = 0xb7,
    mov_reg = 0xbf,

    ld_imm64 = 0x18, // src == kPseudoMapRef: imm indexes the program's map table
    ld_ctx = 0x20,   // dst = ctx[offset .. offset+imm), imm is the width in bytes
    ld_map = 0x79,   // dst = *(u64*)(src + offset)
    st_map_imm = 0x7a, // *(u64*)(dst + offset) = imm
    st_map_reg = 0x7b, // *(u64*)(dst + offset) = src

    ja = 0x05,
    jeq_imm = 0x15,
    jeq_reg = 0x1d,
    jgt_imm = 0x25,
    jgt_reg = 0x2d,
    jge_imm = 0x35,
    jge_reg = 0x3d,
    jset_imm = 0x45,
    jset_reg = 0x4d,
    jne_imm = 0x55,
    jne_reg = 0x5d,
    jlt_imm = 0xa5,
    jlt_reg = 0xad,
    jle_imm = 0xb5,
    jle_reg = 0xbd,

    call = 0x85,      // imm = helper id
    tail_call = 0x8d, // dst = prog_array map ref, src = index register
    exit = 0x95,
};

inline constexpr uint8_t kPseudoMapRef = 1;
inline constexpr uint8_t kNumRegisters = 11;
inline constexpr uint8_t kFrameRegister = 10;
inline constexpr int kStackSize = 512;

struct Instruction {
    Opcode opcode = Opcode::exit;
    uint8_t dst = 0;
    uint8_t src = 0;
    int16_t offset = 0;
    int64_t imm = 0;

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

enum class AluOp : uint8_t { add, sub, mul, or_, and_, lsh, rsh, xor_, mov };
enum class JmpOp : uint8_t { jeq, jgt, jge, jset, jne, jlt, jle };

struct OpcodeInfo {
    Opcode opcode;
    std::string_view mnemonic;
    enum class Form : uint8_t { alu, ld_imm64, ld_ctx, ld_map, st_map, ja, jcond, call, tail_call, exit } form;
    bool reg_source;
};

inline constexpr std::array<OpcodeInfo, 40> kOpcodes{{
    {Opcode::add_imm, "add", OpcodeInfo::Form::alu, false},
    {Opcode::add_reg, "add", OpcodeInfo::Form::alu, true},
    {Opcode::sub_imm, "sub", OpcodeInfo::Form::alu, false},
    {Opcode::sub_reg, "sub", OpcodeInfo::Form::alu, true},
    {Opcode::mul_imm, "mul", OpcodeInfo::Form::alu, false},
    {Opcode::mul_reg, "mul", OpcodeInfo::Form::alu, true},
    {Opcode::or_imm, "or", OpcodeInfo::Form::alu, false},
    {Opcode::or_reg, "or", OpcodeInfo::Form::alu, true},
    {Opcode::and_imm, "and", OpcodeInfo::Form::alu, false},
    {Opcode::and_reg, "and", OpcodeInfo::Form::alu, true},
    {Opcode::lsh_imm, "lsh", OpcodeInfo::Form::alu, false},
    {Opcode::lsh_reg, "lsh", OpcodeInfo::Form::alu, true},
    {Opcode::rsh_imm, "rsh", OpcodeInfo::Form::alu, false},
    {Opcode::rsh_reg, "rsh", OpcodeInfo::Form::alu, true},
    {Opcode::xor_imm, "xor", OpcodeInfo::Form::alu, false},
    {Opcode::xor_reg, "xor", OpcodeInfo::Form::alu, true},
    {Opcode::mov_imm, "mov", OpcodeInfo::Form::alu, false},
    {Opcode::mov_reg, "mov", OpcodeInfo::Form::alu, true},
    {Opcode::ld_imm64, "ld_imm64", OpcodeInfo::Form::ld_imm64, false},
    {Opcode::ld_ctx, "ld_ctx", OpcodeInfo::Form::ld_ctx, false},
    {Opcode::ld_map, "ld_map", OpcodeInfo::Form::ld_map, true},
    {Opcode::st_map_imm, "st_map", OpcodeInfo::Form::st_map, false},
    {Opcode::st_map_reg, "st_map", OpcodeInfo::Form::st_map, true},
    {Opcode::ja, "ja", OpcodeInfo::Form::ja, false},
    {Opcode::jeq_imm, "jeq", OpcodeInfo::Form::jcond, false},
    {Opcode::jeq_reg, "jeq", OpcodeInfo::Form::jcond, true},
    {Opcode::jgt_imm, "jgt", OpcodeInfo::Form::jcond, false},
    {Opcode::jgt_reg, "jgt", OpcodeInfo::Form::jcond, true},
    {Opcode::jge_imm, "jge", OpcodeInfo::Form::jcond, false},
    {Opcode::jge_reg, "jge", OpcodeInfo::Form::jcond, true},
    {Opcode::jset_imm, "jset", OpcodeInfo::Form::jcond, false},
    {Opcode::jset_reg, "jset", OpcodeInfo::Form::jcond, true},
    {Opcode::jne_imm, "jne", OpcodeInfo::Form::jcond, false},
    {Opcode::jne_reg, "jne", OpcodeInfo::Form::jcond, true},
    {Opcode::jlt_imm, "jlt", OpcodeInfo::Form::jcond, false},
    {Opcode::jlt_reg, "jlt", OpcodeInfo::Form::jcond, true},
    {Opcode::jle_imm, "jle", OpcodeInfo::Form::jcond, false},
    {Opcode::jle_reg, "jle", OpcodeInfo::Form::jcond, true},
    {Opcode::call, "call", OpcodeInfo::Form::call, false},
    {Opcode::tail_call, "tail_call", OpcodeInfo::Form::tail_call, true},
}};

inline std::optional<OpcodeInfo> opcode_info(Opcode op) {
    if (op == Opcode::exit) {
        return OpcodeInfo{Opcode::exit, "exit", OpcodeInfo::Form::exit, false};
    }
    for (const auto& info : kOpcodes) {
        if (info.opcode == op) {
            return info;
        }
    }
    return std::nullopt;
}

inline bool is_valid_opcode(uint8_t raw) { return opcode_info(static_cast<Opcode>(raw)).has_value(); }

inline std::optional<Opcode> find_opcode(std::string_view mnemonic, bool reg_source) {
    if (mnemonic == "exit") {
        return Opcode::exit;
    }
    for (const auto& info : kOpcodes) {
        if (info.mnemonic == mnemonic && info.reg_source == reg_source) {
            return info.opcode;
        }
    }
    // Single-form mnemonics ignore the operand kind.
    for (const auto& info : kOpcodes) {
        if (info.mnemonic == mnemonic) {
            bool has_twin = false;
            for (const auto& other : kOpcodes) {
                if (other.mnemonic == mnemonic && other.opcode != info.opcode) {
                    has_twin = true;
                }
            }
            if (!has_twin) {
                return info.opcode;
            }
        }
    }
    return std::nullopt;
}

inline bool is_known_mnemonic(std::string_view mnemonic) {
    if (mnemonic == "exit" || mnemonic == "jmp") {
        return true;
    }
    for (const auto& info : kOpcodes) {
        if (info.mnemonic == mnemonic) {
            return true;
        }
    }
    return false;
}

inline std::optional<AluOp> alu_op(Opcode op) {
    switch (op) {
    case Opcode::add_imm: case Opcode::add_reg: return AluOp::add;
    case Opcode::sub_imm: case Opcode::sub_reg: return AluOp::sub;
    case Opcode::mul_imm: case Opcode::mul_reg: return AluOp::mul;
    case Opcode::or_imm: case Opcode::or_reg: return AluOp::or_;
    case Opcode::and_imm: case Opcode::and_reg: return AluOp::and_;
    case Opcode::lsh_imm: case Opcode::lsh_reg: return AluOp::lsh;
    case Opcode::rsh_imm: case Opcode::rsh_reg: return AluOp::rsh;
    case Opcode::xor_imm: case Opcode::xor_reg: return AluOp::xor_;
    case Opcode::mov_imm: case Opcode::mov_reg: return AluOp::mov;
    default: return std::nullopt;
    }
}

inline std::optional<JmpOp> jmp_op(Opcode op) {
    switch (op) {
    case Opcode::jeq_imm: case Opcode::jeq_reg: return JmpOp::jeq;
    case Opcode::jgt_imm: case Opcode::jgt_reg: return JmpOp::jgt;
    case Opcode::jge_imm: case Opcode::jge_reg: return JmpOp::jge;
    case Opcode::jset_imm: case Opcode::jset_reg: return JmpOp::jset;
    case Opcode::jne_imm: case Opcode::jne_reg: return JmpOp::jne;
    case Opcode::jlt_imm: case Opcode::jlt_reg: return JmpOp::jlt;
    case Opcode::jle_imm: case Opcode::jle_reg: return JmpOp::jle;
    default: return std::nullopt;
    }
}

inline bool is_reg_source(Opcode op) {
    auto info = opcode_info(op);
    return info && info->reg_source;
}

constexpr uint64_t alu_apply(AluOp op, uint64_t a, uint64_t b) {
    switch (op) {
    case AluOp::add: return a + b;
    case AluOp::sub: return a - b;
    case AluOp::mul: return a * b;
    case AluOp::or_: return a | b;
    case AluOp::and_: return a & b;
    case AluOp::lsh: return a << (b & 63);
    case AluOp::rsh: return a >> (b & 63);
    case AluOp::xor_: return a ^ b;
    case AluOp::mov: return b;
    }
    return 0;
}

// Comparisons are unsigned, as in eBPF.
constexpr bool jmp_taken(JmpOp op, uint64_t a, uint64_t b) {
    switch (op) {
    case JmpOp::jeq: return a == b;
    case JmpOp::jgt: return a > b;
    case JmpOp::jge: return a >= b;
    case JmpOp::jset: return (a & b) != 0;
    case JmpOp::jne: return a != b;
    case JmpOp::jlt: return a < b;
    case JmpOp::jle: return a <= b;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Helpers

enum class HelperId : uint8_t {
    map_lookup_elem = 1,
    map_update_elem = 2,
    map_delete_elem = 3,
    tail_call = 4,
    ktime_get_ns = 5,
    safe_read_user = 6,
    safe_read_user_str = 7,
    safe_task_storage_get = 8,
    safe_task_storage_delete = 9,
    wait_syscall = 10,
};

inline constexpr size_t kNumHelpers = 10;

enum class HelperCategory : uint8_t { state_management, serialization, user_access, kernel_access, program_features };

struct HelperInfo {
    HelperId id;
    std::string_view name;
    HelperCategory category;
    bool sleepable_only;
};

inline constexpr std::array<HelperInfo, kNumHelpers> kHelpers{{
    {HelperId::map_lookup_elem, "map_lookup_elem", HelperCategory::state_management, false},
    {HelperId::map_update_elem, "map_update_elem", HelperCategory::state_management, false},
    {HelperId::map_delete_elem, "map_delete_elem", HelperCategory::state_management, false},
    {HelperId::tail_call, "tail_call", HelperCategory::program_features, false},
    {HelperId::ktime_get_ns, "ktime_get_ns", HelperCategory::kernel_access, false},
    {HelperId::safe_read_user, "safe_read_user", HelperCategory::user_access, false},
    {HelperId::safe_read_user_str, "safe_read_user_str", HelperCategory::user_access, false},
    {HelperId::safe_task_storage_get, "safe_task_storage_get", HelperCategory::state_management, false},
    {HelperId::safe_task_storage_delete, "safe_task_storage_delete", HelperCategory::state_management, false},
    {HelperId::wait_syscall, "wait_syscall", HelperCategory::serialization, true},
}};

inline std::optional<HelperInfo> helper_info(int64_t id) {
    if (id < 1 || id > static_cast<int64_t>(kNumHelpers)) {
        return std::nullopt;
    }
    return kHelpers[static_cast<size_t>(id - 1)];
}

inline std::optional<HelperId> helper_by_name(std::string_view name) {
    for (const auto& h : kHelpers) {
        if (h.name == name) {
            return h.id;
        }
    }
    return std::nullopt;
}

inline bool is_user_access_helper(int64_t id) {
    return id == static_cast<int64_t>(HelperId::safe_read_user) ||
           id == static_cast<int64_t>(HelperId::safe_read_user_str);
}

} // namespace sfvm
