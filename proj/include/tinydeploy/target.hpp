// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Declarative description of the virtual heterogeneous MCU.

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tinydeploy/ir.hpp"

namespace tinydeploy {

struct DmaChannel {
  double bandwidth = 1.0;  // bytes per cycle
  int64_t setup = 0;       // cycles per transfer

  /// setup + ceil(bytes / bandwidth)
  int64_t cycles(int64_t bytes) const;
};

struct MemoryLevel {
  std::string name;
  int64_t capacity = 0;
  std::optional<std::string> parent;
  std::optional<DmaChannel> dma;  // channel towards the parent
  std::set<std::string> accessible_by;
};

enum class EngineKind { ScalarCore, MultiCoreCluster, ConvNpu };

const char* to_string(EngineKind kind);

struct Engine {
  std::string name;
  EngineKind kind = EngineKind::ScalarCore;
  std::set<std::string> supported_ops;
  std::map<std::string, double> throughput;  // op -> MACs or elements per cycle
  int64_t offload_setup = 0;

  bool supports(const std::string& op) const { return supported_ops.count(op) != 0; }
  /// ceil(work / throughput[op])
  int64_t kernel_cycles(const std::string& op, int64_t work) const;
};

struct TargetDescription {
  std::string name;
  std::vector<MemoryLevel> levels;
  std::vector<Engine> engines;
  std::string global_level;  // where global buffers live
  std::string local_level;   // staging level for local buffers
  std::string host;          // engine running the entry function
  int64_t alignment = 4;     // allocation granularity in bytes

  const MemoryLevel& level(const std::string& name) const;
  const MemoryLevel* find_level(const std::string& name) const;
  const Engine& engine(const std::string& name) const;
  const Engine* find_engine(const std::string& name) const;
  const MemoryLevel& root() const;
  /// Levels whose parent is `name`.
  std::vector<std::string> children(const std::string& name) const;
};

/// Parses and validates a target document. Throws ParseError.
TargetDescription load_target(const std::string& text);

/// Serializes to the canonical target document.
std::string dump_target(const TargetDescription& t);

/// Levels the engine reads and writes directly. Throws Error for an
/// unknown engine.
std::set<std::string> reachable_levels(const TargetDescription& t, const std::string& engine);

/// Preset documents: "minimal" and "siracusa-like".
const std::string& target_preset_text(const std::string& name);
TargetDescription target_preset(const std::string& name);
std::vector<std::string> target_preset_names();

}  // namespace tinydeploy
