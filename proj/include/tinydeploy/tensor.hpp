// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tinydeploy/ir.hpp"

namespace tinydeploy {

/// Dense row-major tensor holding little-endian raw bytes.
struct Tensor {
  Shape shape;
  DataType dtype = dtypes::kInt8;
  std::vector<uint8_t> data;

  Tensor() = default;
  Tensor(Shape s, DataType t);
  Tensor(Shape s, DataType t, std::vector<uint8_t> bytes);

  int64_t elements() const { return num_elements(shape); }
  int64_t get(int64_t i) const;
  void set(int64_t i, int64_t v);
  /// Values widened to int64, in element order.
  std::vector<int64_t> values() const;

  template <typename T>
  static Tensor from_values(Shape s, DataType t, std::span<const T> v) {
    Tensor out(std::move(s), t);
    for (size_t i = 0; i < v.size(); ++i) out.set(static_cast<int64_t>(i), static_cast<int64_t>(v[i]));
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Row-major strides in elements.
std::vector<int64_t> strides_of(std::span<const int64_t> shape);

/// Axis-aligned box inside a tensor.
struct Region {
  std::vector<int64_t> origin;
  std::vector<int64_t> extent;

  int64_t elements() const { return num_elements(extent); }
  friend bool operator==(const Region&, const Region&) = default;
};

Region full_region(std::span<const int64_t> shape);

/// Copies `r` out of `src` into a dense tensor of shape r.extent.
Tensor extract_region(const Tensor& src, const Region& r);
/// Writes dense `tile` into `dst` at region `r`.
void insert_region(Tensor& dst, const Region& r, const Tensor& tile);

}  // namespace tinydeploy
