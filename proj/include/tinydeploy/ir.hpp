// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Graph, buffer and schedule representation shared by every pipeline stage.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace tinydeploy {

/// Base class for every error raised by the compiler. The message always
/// names the offending node, buffer, level or pass.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Types

struct DataType {
  std::string name;
  int bits = 8;
  bool is_signed = true;

  int bytes() const { return bits / 8; }
  friend bool operator==(const DataType&, const DataType&) = default;
};

namespace dtypes {
inline const DataType kInt8{"int8", 8, true};
inline const DataType kUInt8{"uint8", 8, false};
inline const DataType kInt16{"int16", 16, true};
inline const DataType kInt32{"int32", 32, true};
}  // namespace dtypes

/// Looks up a data type by name; throws ParseError for unknown names.
DataType dtype_from_name(const std::string& name);

enum class BufferKind { Variable, Constant, Transient };
enum class Scope { Global, Local };

const char* to_string(BufferKind kind);
const char* to_string(Scope scope);

using Shape = std::vector<int64_t>;

int64_t num_elements(std::span<const int64_t> shape);
std::string shape_str(std::span<const int64_t> shape);

struct Buffer {
  std::string name;
  BufferKind kind = BufferKind::Variable;
  Scope scope = Scope::Local;
  Shape shape;
  std::optional<DataType> dtype;
  std::string level;  // empty until memory-level annotation
  std::vector<uint8_t> payload;  // Constant only

  int64_t elements() const { return num_elements(shape); }
  /// Full size in bytes; requires dtype.
  int64_t bytes() const;
  bool is_constant() const { return kind == BufferKind::Constant; }

  friend bool operator==(const Buffer&, const Buffer&) = default;
};

using AttrValue = std::variant<int64_t, std::vector<int64_t>>;
using Attrs = std::map<std::string, AttrValue>;

struct Node {
  std::string name;
  std::string op;
  Attrs attrs;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  bool has_attr(const std::string& key) const { return attrs.count(key) != 0; }
  int64_t attr_int(const std::string& key) const;
  int64_t attr_int(const std::string& key, int64_t fallback) const;
  std::vector<int64_t> attr_list(const std::string& key) const;

  friend bool operator==(const Node&, const Node&) = default;
};

/// Operator graph. Buffers are kept in declaration order; `index` maps
/// names to positions and is rebuilt by `reindex()` after edits.
class Graph {
 public:
  std::vector<Node> nodes;
  std::vector<Buffer> buffers;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  const Buffer& buffer(const std::string& name) const;
  Buffer& buffer(const std::string& name);
  const Buffer* find_buffer(const std::string& name) const;
  Buffer* find_buffer(const std::string& name);
  bool has_buffer(const std::string& name) const { return find_buffer(name) != nullptr; }

  const Node* find_node(const std::string& name) const;

  /// Index of the node writing `buffer`, or -1.
  int producer(const std::string& buffer) const;
  /// Indices of nodes reading `buffer`, ascending.
  std::vector<int> consumers(const std::string& buffer) const;

  bool is_graph_input(const std::string& name) const;
  bool is_graph_output(const std::string& name) const;

  /// Adds a buffer; throws if the name is taken.
  Buffer& add_buffer(Buffer b);
  /// Returns a name not used by any buffer or node, derived from `base`.
  std::string unique_name(const std::string& base) const;
  /// Drops buffers no longer referenced by any node or the io lists.
  void remove_dead_buffers();

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.nodes == b.nodes && a.buffers == b.buffers && a.inputs == b.inputs &&
           a.outputs == b.outputs;
  }
};

struct Diagnostic {
  std::string kind;     // "cycle", "payload size", "dangling reference", ...
  std::string message;
};

/// Checks every structural graph invariant. Empty result means valid.
std::vector<Diagnostic> validate(const Graph& g);

/// Throws ValidationError listing all diagnostics if `g` is invalid.
void require_valid(const Graph& g);

/// Total order over node indices.
struct Schedule {
  std::vector<int> order;

  size_t size() const { return order.size(); }
  /// step index of node `node_index`
  std::vector<int> steps() const;
};

/// Deterministic topological order; ties go to the lower declaration index.
Schedule topo_schedule(const Graph& g);

// ---------------------------------------------------------------------------
// Graph file format

/// Parses a graph document plus its weight blob. Throws ParseError.
Graph parse_graph(const std::string& text, std::span<const uint8_t> weights);

struct SerializedGraph {
  std::string text;
  std::vector<uint8_t> weights;
};

/// Canonical serialization: constants are packed into the blob in
/// declaration order.
SerializedGraph serialize_graph(const Graph& g);

constexpr int kGraphFormatVersion = 1;

}  // namespace tinydeploy
