// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/tensor.hpp"

#include <cstring>

namespace tinydeploy {

Tensor::Tensor(Shape s, DataType t) : shape(std::move(s)), dtype(std::move(t)) {
  data.assign(static_cast<size_t>(elements() * dtype.bytes()), 0);
}

Tensor::Tensor(Shape s, DataType t, std::vector<uint8_t> bytes)
    : shape(std::move(s)), dtype(std::move(t)), data(std::move(bytes)) {
  if (static_cast<int64_t>(data.size()) != elements() * dtype.bytes())
    throw Error("tensor byte size does not match shape " + shape_str(shape));
}

int64_t Tensor::get(int64_t i) const {
  const uint8_t* p = data.data() + i * dtype.bytes();
  switch (dtype.bits) {
    case 8:
      return dtype.is_signed ? static_cast<int64_t>(static_cast<int8_t>(p[0])) : p[0];
    case 16: {
      uint16_t u = static_cast<uint16_t>(p[0] | (p[1] << 8));
      return dtype.is_signed ? static_cast<int64_t>(static_cast<int16_t>(u)) : u;
    }
    case 32: {
      uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                   (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
      return dtype.is_signed ? static_cast<int64_t>(static_cast<int32_t>(u)) : u;
    }
  }
  throw Error("unsupported bit width");
}

void Tensor::set(int64_t i, int64_t v) {
  uint8_t* p = data.data() + i * dtype.bytes();
  const auto u = static_cast<uint64_t>(v);
  for (int b = 0; b < dtype.bytes(); ++b) p[b] = static_cast<uint8_t>(u >> (8 * b));
}

std::vector<int64_t> Tensor::values() const {
  std::vector<int64_t> out(static_cast<size_t>(elements()));
  for (int64_t i = 0; i < elements(); ++i) out[i] = get(i);
  return out;
}

std::vector<int64_t> strides_of(std::span<const int64_t> shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

Region full_region(std::span<const int64_t> shape) {
  return Region{std::vector<int64_t>(shape.size(), 0), Shape(shape.begin(), shape.end())};
}

namespace {

// Calls fn(src_element_offset, dense_index) for every element of `r`;
// innermost runs are handed over as (offset, dense, run_length).
template <typename Fn>
void for_each_run(std::span<const int64_t> shape, const Region& r, Fn&& fn) {
  const size_t rank = shape.size();
  if (r.elements() == 0) return;
  const auto strides = strides_of(shape);
  const int64_t run = r.extent[rank - 1];
  std::vector<int64_t> idx(rank, 0);
  int64_t dense = 0;
  while (true) {
    int64_t off = 0;
    for (size_t d = 0; d < rank; ++d) off += (r.origin[d] + idx[d]) * strides[d];
    fn(off, dense, run);
    dense += run;
    int d = static_cast<int>(rank) - 2;
    while (d >= 0) {
      if (++idx[d] < r.extent[d]) break;
      idx[d] = 0;
      --d;
    }
    if (d < 0) break;
  }
}

void check_region(std::span<const int64_t> shape, const Region& r) {
  if (r.origin.size() != shape.size() || r.extent.size() != shape.size())
    throw Error("region rank does not match tensor rank");
  for (size_t d = 0; d < shape.size(); ++d)
    if (r.origin[d] < 0 || r.extent[d] < 0 || r.origin[d] + r.extent[d] > shape[d])
      throw Error("region outside tensor " + shape_str(shape));
}

}  // namespace

Tensor extract_region(const Tensor& src, const Region& r) {
  check_region(src.shape, r);
  Tensor out(r.extent, src.dtype);
  const int64_t eb = src.dtype.bytes();
  for_each_run(src.shape, r, [&](int64_t off, int64_t dense, int64_t run) {
    std::memcpy(out.data.data() + dense * eb, src.data.data() + off * eb, run * eb);
  });
  return out;
}

void insert_region(Tensor& dst, const Region& r, const Tensor& tile) {
  check_region(dst.shape, r);
  if (tile.shape != r.extent) throw Error("tile shape does not match region");
  const int64_t eb = dst.dtype.bytes();
  for_each_run(dst.shape, r, [&](int64_t off, int64_t dense, int64_t run) {
    std::memcpy(dst.data.data() + off * eb, tile.data.data() + dense * eb, run * eb);
  });
}

}  // namespace tinydeploy
