// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Text assembler and disassembler for filter programs.
//
//   section seccomp|seccomp-sleepable
//   map <name> <array|hash|task_storage|prog_array> <key_size> <value_size> <max_entries>
//   label:
//   mnemonic dst, src|imm[, offset]
//
// Comments start with ';' or '#'. Jump targets are labels or signed relative
// offsets (+N / -N). assemble(disassemble(p)) reproduces p exactly.

#include <cctype>
#include <charconv>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sfvm/context.hpp"
#include "sfvm/isa.hpp"
#include "sfvm/program.hpp"

namespace sfvm {

class AsmError : public std::runtime_error {
  public:
    enum class Kind { syntax, unknown_mnemonic, unresolved_label, register_range, duplicate };

    AsmError(Kind kind, size_t line, size_t column, const std::string& message)
        : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + message),
          kind_(kind), line_(line), column_(column) {}

    [[nodiscard]] Kind kind() const { return kind_; }
    [[nodiscard]] size_t line() const { return line_; }
    [[nodiscard]] size_t column() const { return column_; }

  private:
    Kind kind_;
    size_t line_;
    size_t column_;
};

namespace detail {

struct Token {
    std::string text;
    size_t column; // 1-based
};

inline bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
inline bool is_ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
}

inline std::optional<int64_t> parse_int(std::string_view s) {
    bool neg = false;
    if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
        neg = s[0] == '-';
        s.remove_prefix(1);
    }
    if (s.empty()) {
        return std::nullopt;
    }
    uint64_t v = 0;
    int base = 10;
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
        s.remove_prefix(2);
        base = 16;
    }
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    auto sv = static_cast<int64_t>(v);
    return neg ? -sv : sv;
}

class LineParser {
  public:
    LineParser(std::string_view text, size_t line) : text_(text), line_(line) {}

    [[noreturn]] void fail(AsmError::Kind kind, size_t column, const std::string& msg) const {
        throw AsmError(kind, line_, column, msg);
    }

    std::vector<Token> split_operands(size_t start) {
        std::vector<Token> ops;
        size_t i = start;
        skip_ws(i);
        if (i >= text_.size()) {
            return ops;
        }
        while (true) {
            skip_ws(i);
            size_t begin = i;
            while (i < text_.size() && text_[i] != ',' && !std::isspace(static_cast<unsigned char>(text_[i]))) {
                ++i;
            }
            if (begin == i) {
                fail(AsmError::Kind::syntax, begin + 1, "expected operand");
            }
            ops.push_back({std::string(text_.substr(begin, i - begin)), begin + 1});
            skip_ws(i);
            if (i >= text_.size()) {
                break;
            }
            if (text_[i] != ',') {
                fail(AsmError::Kind::syntax, i + 1, "expected ','");
            }
            ++i;
        }
        return ops;
    }

    void skip_ws(size_t& i) const {
        while (i < text_.size() && std::isspace(static_cast<unsigned char>(text_[i]))) {
            ++i;
        }
    }

    [[nodiscard]] std::string_view text() const { return text_; }
    [[nodiscard]] size_t line() const { return line_; }

  private:
    std::string_view text_;
    size_t line_;
};

struct PendingJump {
    size_t index;
    std::string label;
    size_t line;
    size_t column;
};

} // namespace detail

inline FilterProgram assemble(std::string_view source) {
    using detail::Token;
    FilterProgram prog;
    std::map<std::string, size_t> labels;
    std::vector<detail::PendingJump> pending;
    bool section_seen = false;

    size_t line_no = 0;
    size_t pos = 0;
    while (pos <= source.size()) {
        size_t eol = source.find('\n', pos);
        if (eol == std::string_view::npos) {
            eol = source.size();
        }
        std::string_view raw = source.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;

        size_t cut = raw.find_first_of(";#");
        std::string_view text = raw.substr(0, cut);
        while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) {
            text.remove_suffix(1);
        }
        detail::LineParser lp(text, line_no);

        size_t i = 0;
        lp.skip_ws(i);
        if (i >= text.size()) {
            if (eol == source.size()) {
                break;
            }
            continue;
        }

        // label(s)
        while (true) {
            size_t begin = i;
            if (!detail::is_ident_start(text[i])) {
                lp.fail(AsmError::Kind::syntax, i + 1, "expected mnemonic or label");
            }
            size_t j = i;
            while (j < text.size() && detail::is_ident_char(text[j])) {
                ++j;
            }
            if (j < text.size() && text[j] == ':') {
                std::string name(text.substr(begin, j - begin));
                if (!labels.emplace(name, prog.instructions.size()).second) {
                    lp.fail(AsmError::Kind::duplicate, begin + 1, "duplicate label '" + name + "'");
                }
                i = j + 1;
                lp.skip_ws(i);
                if (i >= text.size()) {
                    break;
                }
                continue;
            }
            break;
        }
        if (i >= text.size()) {
            if (eol == source.size()) {
                break;
            }
            continue;
        }

        size_t mn_begin = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
        }
        std::string mnemonic(text.substr(mn_begin, i - mn_begin));
        size_t mn_col = mn_begin + 1;

        if (mnemonic == "section") {
            auto ops = lp.split_operands(i);
            if (ops.size() != 1) {
                lp.fail(AsmError::Kind::syntax, mn_col, "section takes one name");
            }
            if (ops[0].text == kSectionSeccomp) {
                prog.sleepable = false;
            } else if (ops[0].text == kSectionSleepable) {
                prog.sleepable = true;
            } else {
                lp.fail(AsmError::Kind::syntax, ops[0].column, "unknown section '" + ops[0].text + "'");
            }
            if (section_seen) {
                lp.fail(AsmError::Kind::duplicate, mn_col, "duplicate section directive");
            }
            section_seen = true;
            prog.section_name = ops[0].text;
            continue;
        }

        if (mnemonic == "map") {
            std::vector<Token> ops;
            size_t k = i;
            while (true) {
                lp.skip_ws(k);
                if (k >= text.size()) {
                    break;
                }
                size_t b = k;
                while (k < text.size() && !std::isspace(static_cast<unsigned char>(text[k]))) {
                    ++k;
                }
                ops.push_back({std::string(text.substr(b, k - b)), b + 1});
            }
            if (ops.size() != 5) {
                lp.fail(AsmError::Kind::syntax, mn_col, "map takes <name> <kind> <key_size> <value_size> <max_entries>");
            }
            MapDecl m;
            m.name = ops[0].text;
            if (!detail::is_ident_start(m.name[0])) {
                lp.fail(AsmError::Kind::syntax, ops[0].column, "bad map name");
            }
            if (prog.map_index(m.name)) {
                lp.fail(AsmError::Kind::duplicate, ops[0].column, "duplicate map '" + m.name + "'");
            }
            auto kind = parse_map_kind(ops[1].text);
            if (!kind) {
                lp.fail(AsmError::Kind::syntax, ops[1].column, "unknown map kind '" + ops[1].text + "'");
            }
            m.kind = *kind;
            uint32_t* fields[] = {&m.key_size, &m.value_size, &m.max_entries};
            for (size_t f = 0; f < 3; ++f) {
                auto v = detail::parse_int(ops[2 + f].text);
                if (!v || *v < 0 || *v > 0xffffffffLL) {
                    lp.fail(AsmError::Kind::syntax, ops[2 + f].column, "bad size '" + ops[2 + f].text + "'");
                }
                *fields[f] = static_cast<uint32_t>(*v);
            }
            prog.map_refs.push_back(std::move(m));
            continue;
        }

        if (!is_known_mnemonic(mnemonic)) {
            lp.fail(AsmError::Kind::unknown_mnemonic, mn_col, "unknown mnemonic '" + mnemonic + "'");
        }
        if (mnemonic == "jmp") {
            mnemonic = "ja";
        }

        auto ops = lp.split_operands(i);

        auto expect_count = [&](size_t lo, size_t hi) {
            if (ops.size() < lo || ops.size() > hi) {
                lp.fail(AsmError::Kind::syntax, mn_col,
                        "'" + mnemonic + "' expects " + std::to_string(lo) +
                            (lo == hi ? "" : "-" + std::to_string(hi)) + " operands, got " +
                            std::to_string(ops.size()));
            }
        };
        auto reg = [&](const Token& t) -> std::optional<uint8_t> {
            if (t.text.size() < 2 || t.text[0] != 'r' || !std::isdigit(static_cast<unsigned char>(t.text[1]))) {
                return std::nullopt;
            }
            auto v = detail::parse_int(std::string_view(t.text).substr(1));
            if (!v) {
                return std::nullopt;
            }
            if (*v < 0 || *v >= kNumRegisters) {
                lp.fail(AsmError::Kind::register_range, t.column, "register out of range '" + t.text + "'");
            }
            return static_cast<uint8_t>(*v);
        };
        auto need_reg = [&](const Token& t) -> uint8_t {
            auto r = reg(t);
            if (!r) {
                lp.fail(AsmError::Kind::syntax, t.column, "expected register, got '" + t.text + "'");
            }
            return *r;
        };
        auto need_imm = [&](const Token& t) -> int64_t {
            auto v = detail::parse_int(t.text);
            if (!v) {
                lp.fail(AsmError::Kind::syntax, t.column, "expected integer, got '" + t.text + "'");
            }
            return *v;
        };
        auto need_off16 = [&](const Token& t) -> int16_t {
            int64_t v = need_imm(t);
            if (v < INT16_MIN || v > INT16_MAX) {
                lp.fail(AsmError::Kind::syntax, t.column, "offset out of 16-bit range");
            }
            return static_cast<int16_t>(v);
        };
        auto jump_target = [&](const Token& t, size_t index) -> int16_t {
            if (!t.text.empty() && (t.text[0] == '+' || t.text[0] == '-' || std::isdigit(static_cast<unsigned char>(t.text[0])))) {
                return need_off16(t);
            }
            if (!detail::is_ident_start(t.text[0])) {
                lp.fail(AsmError::Kind::syntax, t.column, "expected label, got '" + t.text + "'");
            }
            pending.push_back({index, t.text, line_no, t.column});
            return 0;
        };

        Instruction insn;
        const size_t index = prog.instructions.size();
        bool src_is_reg = false;

        if (mnemonic == "exit") {
            expect_count(0, 0);
            insn.opcode = Opcode::exit;
        } else if (mnemonic == "ja") {
            expect_count(1, 1);
            insn.opcode = Opcode::ja;
            insn.offset = jump_target(ops[0], index);
        } else if (mnemonic == "call") {
            expect_count(1, 1);
            insn.opcode = Opcode::call;
            if (auto h = helper_by_name(ops[0].text)) {
                insn.imm = static_cast<int64_t>(*h);
            } else {
                insn.imm = need_imm(ops[0]);
            }
        } else if (mnemonic == "tail_call") {
            expect_count(2, 2);
            insn.opcode = Opcode::tail_call;
            insn.dst = need_reg(ops[0]);
            insn.src = need_reg(ops[1]);
        } else if (mnemonic == "ld_imm64") {
            expect_count(2, 2);
            insn.opcode = Opcode::ld_imm64;
            insn.dst = need_reg(ops[0]);
            std::string_view v = ops[1].text;
            if (v.starts_with("map:")) {
                std::string name(v.substr(4));
                insn.src = kPseudoMapRef;
                if (auto idx = prog.map_index(name)) {
                    insn.imm = static_cast<int64_t>(*idx);
                } else if (auto n = detail::parse_int(name); n && !name.empty() && std::isdigit(static_cast<unsigned char>(name[0]))) {
                    insn.imm = *n;
                } else {
                    lp.fail(AsmError::Kind::unresolved_label, ops[1].column, "unknown map '" + name + "'");
                }
            } else {
                insn.imm = need_imm(ops[1]);
            }
        } else if (mnemonic == "ld_ctx") {
            expect_count(2, 3);
            insn.opcode = Opcode::ld_ctx;
            insn.dst = need_reg(ops[0]);
            if (ops.size() == 2) {
                auto f = context_field_named(ops[1].text);
                if (!f) {
                    lp.fail(AsmError::Kind::syntax, ops[1].column, "unknown context field '" + ops[1].text + "'");
                }
                insn.imm = f->width;
                insn.offset = static_cast<int16_t>(f->offset);
            } else {
                insn.imm = need_imm(ops[1]);
                insn.offset = need_off16(ops[2]);
            }
        } else if (mnemonic == "ld_map") {
            expect_count(2, 3);
            insn.opcode = Opcode::ld_map;
            insn.dst = need_reg(ops[0]);
            insn.src = need_reg(ops[1]);
            insn.offset = ops.size() == 3 ? need_off16(ops[2]) : 0;
        } else if (mnemonic == "st_map") {
            expect_count(2, 3);
            insn.dst = need_reg(ops[0]);
            if (auto r = reg(ops[1])) {
                insn.opcode = Opcode::st_map_reg;
                insn.src = *r;
            } else {
                insn.opcode = Opcode::st_map_imm;
                insn.imm = need_imm(ops[1]);
            }
            insn.offset = ops.size() == 3 ? need_off16(ops[2]) : 0;
        } else {
            // ALU or conditional jump
            bool is_jump = mnemonic[0] == 'j';
            expect_count(is_jump ? 3 : 2, is_jump ? 3 : 2);
            insn.dst = need_reg(ops[0]);
            if (auto r = reg(ops[1])) {
                src_is_reg = true;
                insn.src = *r;
            } else {
                insn.imm = need_imm(ops[1]);
            }
            auto op = find_opcode(mnemonic, src_is_reg);
            if (!op) {
                lp.fail(AsmError::Kind::unknown_mnemonic, mn_col, "unknown mnemonic '" + mnemonic + "'");
            }
            insn.opcode = *op;
            if (is_jump) {
                insn.offset = jump_target(ops[2], index);
            }
        }
        prog.instructions.push_back(insn);
        if (eol == source.size()) {
            break;
        }
    }

    for (const auto& p : pending) {
        auto it = labels.find(p.label);
        if (it == labels.end()) {
            throw AsmError(AsmError::Kind::unresolved_label, p.line, p.column, "unresolved label '" + p.label + "'");
        }
        int64_t off = static_cast<int64_t>(it->second) - static_cast<int64_t>(p.index) - 1;
        if (off < INT16_MIN || off > INT16_MAX) {
            throw AsmError(AsmError::Kind::syntax, p.line, p.column, "jump to '" + p.label + "' out of range");
        }
        prog.instructions[p.index].offset = static_cast<int16_t>(off);
    }
    return prog;
}

namespace detail {

inline std::string format_imm(int64_t v) {
    if (v < 0) {
        return std::to_string(v);
    }
    if (v < 0x10000) {
        return std::to_string(v);
    }
    std::ostringstream os;
    os << "0x" << std::hex << static_cast<uint64_t>(v);
    return os.str();
}

inline std::string format_reg(uint8_t r) { return "r" + std::to_string(r); }

} // namespace detail

inline std::string disassemble(const FilterProgram& prog) {
    std::ostringstream out;
    out << "section " << (prog.sleepable ? kSectionSleepable : kSectionSeccomp) << "\n";
    for (const auto& m : prog.map_refs) {
        out << "map " << m.name << " " << map_kind_name(m.kind) << " " << m.key_size << " " << m.value_size << " "
            << m.max_entries << "\n";
    }

    const auto& insns = prog.instructions;
    const auto n = static_cast<int64_t>(insns.size());
    std::set<int64_t> targets;
    auto target_of = [&](size_t i) -> std::optional<int64_t> {
        const auto& insn = insns[i];
        if (insn.opcode != Opcode::ja && !jmp_op(insn.opcode)) {
            return std::nullopt;
        }
        int64_t t = static_cast<int64_t>(i) + 1 + insn.offset;
        if (t < 0 || t >= n) {
            return std::nullopt;
        }
        return t;
    };
    for (size_t i = 0; i < insns.size(); ++i) {
        if (auto t = target_of(i)) {
            targets.insert(*t);
        }
    }
    auto label = [](int64_t t) { return "L" + std::to_string(t); };
    auto jump_operand = [&](size_t i) {
        if (auto t = target_of(i)) {
            return label(*t);
        }
        int16_t off = insns[i].offset;
        return (off >= 0 ? "+" : "") + std::to_string(off);
    };

    using detail::format_imm;
    using detail::format_reg;
    for (size_t i = 0; i < insns.size(); ++i) {
        if (targets.contains(static_cast<int64_t>(i))) {
            out << label(static_cast<int64_t>(i)) << ":\n";
        }
        const auto& insn = insns[i];
        auto info = opcode_info(insn.opcode);
        out << "  " << info->mnemonic;
        switch (info->form) {
        case OpcodeInfo::Form::exit: break;
        case OpcodeInfo::Form::ja: out << " " << jump_operand(i); break;
        case OpcodeInfo::Form::call:
            if (auto h = helper_info(insn.imm)) {
                out << " " << h->name;
            } else {
                out << " " << insn.imm;
            }
            break;
        case OpcodeInfo::Form::tail_call: out << " " << format_reg(insn.dst) << ", " << format_reg(insn.src); break;
        case OpcodeInfo::Form::ld_imm64:
            out << " " << format_reg(insn.dst) << ", ";
            if (insn.src == kPseudoMapRef) {
                if (insn.imm >= 0 && static_cast<size_t>(insn.imm) < prog.map_refs.size()) {
                    out << "map:" << prog.map_refs[static_cast<size_t>(insn.imm)].name;
                } else {
                    out << "map:" << insn.imm;
                }
            } else {
                out << format_imm(insn.imm);
            }
            break;
        case OpcodeInfo::Form::ld_ctx:
            out << " " << format_reg(insn.dst) << ", ";
            if (auto f = context_field_at(insn.offset, insn.imm)) {
                out << f->name;
            } else {
                out << insn.imm << ", " << insn.offset;
            }
            break;
        case OpcodeInfo::Form::ld_map:
            out << " " << format_reg(insn.dst) << ", " << format_reg(insn.src) << ", " << insn.offset;
            break;
        case OpcodeInfo::Form::st_map:
            out << " " << format_reg(insn.dst) << ", "
                << (insn.opcode == Opcode::st_map_reg ? format_reg(insn.src) : format_imm(insn.imm)) << ", "
                << insn.offset;
            break;
        case OpcodeInfo::Form::alu:
            out << " " << format_reg(insn.dst) << ", " << (info->reg_source ? format_reg(insn.src) : format_imm(insn.imm));
            break;
        case OpcodeInfo::Form::jcond:
            out << " " << format_reg(insn.dst) << ", " << (info->reg_source ? format_reg(insn.src) : format_imm(insn.imm))
                << ", " << jump_operand(i);
            break;
        }
        out << "\n";
    }
    return out.str();
}

} // namespace sfvm
