// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sfvm/bytes.hpp"
#include "sfvm/isa.hpp"

namespace sfvm {

enum class MapKind : uint8_t { array = 1, hash = 2, task_storage = 3, prog_array = 4 };

inline const char* map_kind_name(MapKind k) {
    switch (k) {
    case MapKind::array: return "array";
    case MapKind::hash: return "hash";
    case MapKind::task_storage: return "task_storage";
    case MapKind::prog_array: return "prog_array";
    }
    return "?";
}

inline std::optional<MapKind> parse_map_kind(std::string_view s) {
    for (auto k : {MapKind::array, MapKind::hash, MapKind::task_storage, MapKind::prog_array}) {
        if (s == map_kind_name(k)) {
            return k;
        }
    }
    return std::nullopt;
}

/// A map a program refers to by name; bound to a concrete map at load time.
struct MapDecl {
    std::string name;
    MapKind kind = MapKind::array;
    uint32_t key_size = 0;
    uint32_t value_size = 0;
    uint32_t max_entries = 0;

    friend bool operator==(const MapDecl&, const MapDecl&) = default;
};

using UserNsId = uint64_t;

inline constexpr std::string_view kSectionSeccomp = "seccomp";
inline constexpr std::string_view kSectionSleepable = "seccomp-sleepable";

struct FilterProgram {
    std::vector<Instruction> instructions;
    bool sleepable = false;
    std::string section_name{kSectionSeccomp};
    std::vector<MapDecl> map_refs;
    std::optional<UserNsId> load_userns;
    bool verified = false;

    [[nodiscard]] std::optional<size_t> map_index(std::string_view name) const {
        for (size_t i = 0; i < map_refs.size(); ++i) {
            if (map_refs[i].name == name) {
                return i;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] bool uses_user_access() const {
        for (const auto& insn : instructions) {
            if (insn.opcode == Opcode::call && is_user_access_helper(insn.imm)) {
                return true;
            }
        }
        return false;
    }

    /// Same code, maps and section; ignores load-time metadata.
    [[nodiscard]] bool same_code(const FilterProgram& o) const {
        return instructions == o.instructions && sleepable == o.sleepable && map_refs == o.map_refs;
    }
};

// ---------------------------------------------------------------------------
// Binary program format
//
//   "SFVM" u16 version u16 flags u32 map_count u32 insn_count
//   map_count x { u16 name_len, name, u8 kind, u32 key_size, u32 value_size, u32 max_entries }
//   insn_count x 16-byte records { u8 opcode, u8 dst, u8 src, u8 0, i16 offset, u16 0, i64 imm }
//
// All integers little-endian. flags bit 0 = sleepable.

inline constexpr std::string_view kProgramMagic = "SFVM";
inline constexpr uint16_t kProgramFormatVersion = 1;
inline constexpr size_t kInstructionRecordSize = 16;

class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline void encode_instruction(Bytes& out, const Instruction& insn) {
    out.push_back(static_cast<uint8_t>(insn.opcode));
    out.push_back(insn.dst);
    out.push_back(insn.src);
    out.push_back(0);
    put_le<int16_t>(out, insn.offset);
    put_le<uint16_t>(out, 0);
    put_le<int64_t>(out, insn.imm);
}

inline Bytes encode_program(const FilterProgram& prog) {
    Bytes out(kProgramMagic.begin(), kProgramMagic.end());
    put_le<uint16_t>(out, kProgramFormatVersion);
    put_le<uint16_t>(out, prog.sleepable ? 1 : 0);
    put_le<uint32_t>(out, static_cast<uint32_t>(prog.map_refs.size()));
    put_le<uint32_t>(out, static_cast<uint32_t>(prog.instructions.size()));
    for (const auto& m : prog.map_refs) {
        put_le<uint16_t>(out, static_cast<uint16_t>(m.name.size()));
        out.insert(out.end(), m.name.begin(), m.name.end());
        out.push_back(static_cast<uint8_t>(m.kind));
        put_le<uint32_t>(out, m.key_size);
        put_le<uint32_t>(out, m.value_size);
        put_le<uint32_t>(out, m.max_entries);
    }
    for (const auto& insn : prog.instructions) {
        encode_instruction(out, insn);
    }
    return out;
}

inline FilterProgram decode_program(ByteReader& in) {
    try {
        if (in.read_string(4) != kProgramMagic) {
            throw FormatError("bad program magic");
        }
        auto version = in.read<uint16_t>();
        if (version != kProgramFormatVersion) {
            throw FormatError("unsupported program format version " + std::to_string(version));
        }
        auto flags = in.read<uint16_t>();
        if ((flags & ~1U) != 0) {
            throw FormatError("unknown program flags");
        }
        FilterProgram prog;
        prog.sleepable = (flags & 1U) != 0;
        prog.section_name = std::string(prog.sleepable ? kSectionSleepable : kSectionSeccomp);
        auto map_count = in.read<uint32_t>();
        auto insn_count = in.read<uint32_t>();
        for (uint32_t i = 0; i < map_count; ++i) {
            MapDecl m;
            m.name = in.read_string(in.read<uint16_t>());
            auto kind = in.read<uint8_t>();
            if (kind < 1 || kind > 4) {
                throw FormatError("bad map kind " + std::to_string(kind));
            }
            m.kind = static_cast<MapKind>(kind);
            m.key_size = in.read<uint32_t>();
            m.value_size = in.read<uint32_t>();
            m.max_entries = in.read<uint32_t>();
            prog.map_refs.push_back(std::move(m));
        }
        prog.instructions.reserve(insn_count);
        for (uint32_t i = 0; i < insn_count; ++i) {
            Instruction insn;
            auto op = in.read<uint8_t>();
            if (!is_valid_opcode(op)) {
                throw FormatError("bad opcode 0x" + to_hex(std::span<const uint8_t>(&op, 1)) + " in record " +
                                  std::to_string(i));
            }
            insn.opcode = static_cast<Opcode>(op);
            insn.dst = in.read<uint8_t>();
            insn.src = in.read<uint8_t>();
            in.read<uint8_t>();
            insn.offset = in.read<int16_t>();
            in.read<uint16_t>();
            insn.imm = in.read<int64_t>();
            prog.instructions.push_back(insn);
        }
        return prog;
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(e.what());
    }
}

inline FilterProgram decode_program(std::span<const uint8_t> data) {
    ByteReader in(data);
    FilterProgram prog = decode_program(in);
    if (!in.at_end()) {
        throw FormatError("trailing bytes after program");
    }
    return prog;
}

inline bool looks_like_binary_program(std::span<const uint8_t> data) {
    return data.size() >= 4 && std::string_view(reinterpret_cast<const char*>(data.data()), 4) == kProgramMagic;
}

} // namespace sfvm
