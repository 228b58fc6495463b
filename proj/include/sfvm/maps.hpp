// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfvm/bytes.hpp"
#include "sfvm/program.hpp"

namespace sfvm {

using MapId = uint64_t;
using CellId = uint64_t;

enum class MapStatus : uint8_t { ok, not_found, capacity, invalid, exists, bad_size };

/// errno-style code a filter sees in r0 for a failed map operation.
constexpr int64_t map_status_errno(MapStatus s) {
    switch (s) {
    case MapStatus::ok: return 0;
    case MapStatus::not_found: return -2;  // ENOENT
    case MapStatus::capacity: return -7;   // E2BIG
    case MapStatus::exists: return -17;    // EEXIST
    case MapStatus::invalid: return -22;   // EINVAL
    case MapStatus::bad_size: return -22;
    }
    return -22;
}

inline const char* map_status_name(MapStatus s) {
    switch (s) {
    case MapStatus::ok: return "ok";
    case MapStatus::not_found: return "not_found";
    case MapStatus::capacity: return "capacity_exceeded";
    case MapStatus::invalid: return "invalid";
    case MapStatus::exists: return "exists";
    case MapStatus::bad_size: return "bad_size";
    }
    return "?";
}

// Update flags, numbered as in bpf(2).
inline constexpr uint64_t kUpdateAny = 0;
inline constexpr uint64_t kUpdateNoExist = 1;
inline constexpr uint64_t kUpdateExist = 2;

inline constexpr uint64_t kTaskStorageCreate = 1;

class MapError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// A policy map. Values live in cells addressed by a stable CellId so that a
/// filter's map-value pointer stays valid until the cell is deleted:
///   array         cell id = index, all cells always present
///   hash          cell id allocated on insert
///   task_storage  cell id = thread-group leader id
///   prog_array    cell id = index, value is a program id (0 = empty slot)
class PolicyMap {
  public:
    PolicyMap() = default;

    explicit PolicyMap(MapDecl decl) : decl_(std::move(decl)) {
        validate(decl_);
        if (decl_.kind == MapKind::array || decl_.kind == MapKind::prog_array) {
            for (uint32_t i = 0; i < decl_.max_entries; ++i) {
                cells_.emplace(i, Bytes(decl_.value_size, 0));
            }
        }
    }

    static void validate(const MapDecl& d) {
        if (d.max_entries == 0) {
            throw MapError("map '" + d.name + "': max_entries must be positive");
        }
        if (d.value_size == 0 || d.value_size > 4096) {
            throw MapError("map '" + d.name + "': value_size must be in 1..4096");
        }
        switch (d.kind) {
        case MapKind::array:
        case MapKind::prog_array:
            if (d.key_size != 4 && d.key_size != 8) {
                throw MapError("map '" + d.name + "': index maps need key_size 4 or 8");
            }
            if (d.kind == MapKind::prog_array && d.value_size != 4 && d.value_size != 8) {
                throw MapError("map '" + d.name + "': prog_array needs value_size 4 or 8");
            }
            if (d.max_entries > 65536) {
                throw MapError("map '" + d.name + "': index maps are limited to 65536 entries");
            }
            break;
        case MapKind::hash:
            if (d.key_size == 0 || d.key_size > 512) {
                throw MapError("map '" + d.name + "': key_size must be in 1..512");
            }
            break;
        case MapKind::task_storage:
            if (d.key_size != 8) {
                throw MapError("map '" + d.name + "': task_storage keys are 8-byte task ids");
            }
            break;
        }
    }

    [[nodiscard]] const MapDecl& decl() const { return decl_; }
    [[nodiscard]] MapKind kind() const { return decl_.kind; }
    [[nodiscard]] size_t size() const { return cells_.size(); }

    // Reference counting: programs pin maps at load, open handles count too.
    uint32_t refcount = 0;
    uint32_t open_handles = 0;

    [[nodiscard]] std::optional<CellId> find_cell(std::span<const uint8_t> key) const {
        if (key.size() != decl_.key_size) {
            return std::nullopt;
        }
        switch (decl_.kind) {
        case MapKind::array:
        case MapKind::prog_array: {
            uint64_t idx = index_of(key);
            if (idx >= decl_.max_entries) {
                return std::nullopt;
            }
            return idx;
        }
        case MapKind::hash: {
            auto it = hash_index_.find(Bytes(key.begin(), key.end()));
            if (it == hash_index_.end()) {
                return std::nullopt;
            }
            return it->second;
        }
        case MapKind::task_storage: {
            uint64_t tgid = load_le<uint64_t>(key, 0);
            if (!cells_.contains(tgid)) {
                return std::nullopt;
            }
            return tgid;
        }
        }
        return std::nullopt;
    }

    [[nodiscard]] Bytes* cell(CellId id) {
        auto it = cells_.find(id);
        return it == cells_.end() ? nullptr : &it->second;
    }

    /// Like cell(), but also finds cells deleted during the current filter
    /// run, so a pointer obtained before a delete stays readable.
    [[nodiscard]] Bytes* cell_or_retired(CellId id) {
        if (auto* c = cell(id)) {
            return c;
        }
        auto it = retired_.find(id);
        return it == retired_.end() ? nullptr : &it->second;
    }

    void drop_retired() { retired_.clear(); }
    [[nodiscard]] const Bytes* cell(CellId id) const {
        auto it = cells_.find(id);
        return it == cells_.end() ? nullptr : &it->second;
    }

    [[nodiscard]] std::optional<Bytes> lookup(std::span<const uint8_t> key) const {
        if (auto id = find_cell(key)) {
            return *cell(*id);
        }
        return std::nullopt;
    }

    MapStatus update(std::span<const uint8_t> key, std::span<const uint8_t> value, uint64_t flags = kUpdateAny) {
        if (key.size() != decl_.key_size || value.size() != decl_.value_size) {
            return MapStatus::bad_size;
        }
        if (flags > kUpdateExist) {
            return MapStatus::invalid;
        }
        auto existing = find_cell(key);
        switch (decl_.kind) {
        case MapKind::array:
        case MapKind::prog_array:
            if (!existing) {
                return MapStatus::capacity; // index out of range
            }
            if (flags == kUpdateNoExist) {
                return MapStatus::exists;
            }
            cells_[*existing].assign(value.begin(), value.end());
            return MapStatus::ok;
        case MapKind::hash:
        case MapKind::task_storage:
            if (existing) {
                if (flags == kUpdateNoExist) {
                    return MapStatus::exists;
                }
                cells_[*existing].assign(value.begin(), value.end());
                return MapStatus::ok;
            }
            if (flags == kUpdateExist) {
                return MapStatus::not_found;
            }
            if (cells_.size() >= decl_.max_entries) {
                return MapStatus::capacity;
            }
            if (decl_.kind == MapKind::hash) {
                CellId id = next_cell_++;
                hash_index_.emplace(Bytes(key.begin(), key.end()), id);
                cells_.emplace(id, Bytes(value.begin(), value.end()));
            } else {
                cells_.emplace(load_le<uint64_t>(key, 0), Bytes(value.begin(), value.end()));
            }
            return MapStatus::ok;
        }
        return MapStatus::invalid;
    }

    MapStatus erase(std::span<const uint8_t> key) {
        if (key.size() != decl_.key_size) {
            return MapStatus::bad_size;
        }
        if (decl_.kind == MapKind::array) {
            return MapStatus::invalid;
        }
        if (decl_.kind == MapKind::prog_array) {
            auto id = find_cell(key);
            if (!id) {
                return MapStatus::not_found;
            }
            std::fill(cells_[*id].begin(), cells_[*id].end(), 0);
            return MapStatus::ok;
        }
        auto id = find_cell(key);
        if (!id) {
            return MapStatus::not_found;
        }
        retired_[*id] = std::move(cells_[*id]);
        cells_.erase(*id);
        if (decl_.kind == MapKind::hash) {
            hash_index_.erase(Bytes(key.begin(), key.end()));
        }
        return MapStatus::ok;
    }

    // Task storage, keyed by the caller's thread-group leader.
    std::optional<CellId> task_cell(uint64_t leader_tgid, bool create, MapStatus* status = nullptr) {
        if (decl_.kind != MapKind::task_storage) {
            if (status) *status = MapStatus::invalid;
            return std::nullopt;
        }
        if (cells_.contains(leader_tgid)) {
            if (status) *status = MapStatus::ok;
            return leader_tgid;
        }
        if (!create) {
            if (status) *status = MapStatus::not_found;
            return std::nullopt;
        }
        if (cells_.size() >= decl_.max_entries) {
            if (status) *status = MapStatus::capacity;
            return std::nullopt;
        }
        cells_.emplace(leader_tgid, Bytes(decl_.value_size, 0));
        if (status) *status = MapStatus::ok;
        return leader_tgid;
    }

    MapStatus task_delete(uint64_t leader_tgid) {
        if (decl_.kind != MapKind::task_storage) {
            return MapStatus::invalid;
        }
        auto it = cells_.find(leader_tgid);
        if (it == cells_.end()) {
            return MapStatus::not_found;
        }
        retired_[leader_tgid] = std::move(it->second);
        cells_.erase(it);
        return MapStatus::ok;
    }

    /// Live (key, value) pairs in a deterministic order.
    [[nodiscard]] std::vector<std::pair<Bytes, Bytes>> entries() const {
        std::vector<std::pair<Bytes, Bytes>> out;
        switch (decl_.kind) {
        case MapKind::array:
        case MapKind::prog_array:
        case MapKind::task_storage:
            for (const auto& [id, value] : cells_) {
                Bytes key;
                if (decl_.key_size == 4) {
                    put_le<uint32_t>(key, static_cast<uint32_t>(id));
                } else {
                    put_le<uint64_t>(key, id);
                }
                out.emplace_back(std::move(key), value);
            }
            break;
        case MapKind::hash:
            for (const auto& [key, id] : hash_index_) {
                out.emplace_back(key, cells_.at(id));
            }
            break;
        }
        return out;
    }

    [[nodiscard]] uint64_t digest(uint64_t seed = 0xcbf29ce484222325ULL) const {
        uint64_t h = fnv1a(decl_.name, seed);
        for (const auto& [k, v] : entries()) {
            h = fnv1a(k, h);
            h = fnv1a(v, h);
        }
        return h;
    }

  private:
    [[nodiscard]] uint64_t index_of(std::span<const uint8_t> key) const {
        return decl_.key_size == 4 ? load_le<uint32_t>(key, 0) : load_le<uint64_t>(key, 0);
    }

    MapDecl decl_;
    std::map<CellId, Bytes> cells_;
    std::map<Bytes, CellId> hash_index_;
    std::map<CellId, Bytes> retired_;
    CellId next_cell_ = 0;
};

/// All maps known to one engine, with refcount-driven lifetime.
class MapTable {
  public:
    MapId create(const MapDecl& decl) {
        MapId id = next_id_++;
        maps_.emplace(id, PolicyMap(decl));
        return id;
    }

    /// Re-creates a map under a fresh id with the given contents.
    MapId create_with(PolicyMap map) {
        MapId id = next_id_++;
        maps_.emplace(id, std::move(map));
        return id;
    }

    [[nodiscard]] PolicyMap* find(MapId id) {
        auto it = maps_.find(id);
        return it == maps_.end() ? nullptr : &it->second;
    }
    [[nodiscard]] const PolicyMap* find(MapId id) const {
        auto it = maps_.find(id);
        return it == maps_.end() ? nullptr : &it->second;
    }
    [[nodiscard]] bool contains(MapId id) const { return maps_.contains(id); }

    void retain(MapId id) {
        if (auto* m = find(id)) {
            ++m->refcount;
        }
    }

    /// Drops one reference; frees the map when nothing holds it.
    void release(MapId id) {
        auto* m = find(id);
        if (!m) {
            return;
        }
        if (m->refcount > 0) {
            --m->refcount;
        }
        if (m->refcount == 0) {
            maps_.erase(id);
        }
    }

    [[nodiscard]] const std::map<MapId, PolicyMap>& all() const { return maps_; }

  private:
    std::map<MapId, PolicyMap> maps_;
    MapId next_id_ = 1;
};

} // namespace sfvm
