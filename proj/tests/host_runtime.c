// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Host-native runtime for emitted models: copies complete immediately and
// offloaded closures run inline.

#include <stdint.h>
#include <string.h>

#include TD_RUNTIME_HEADER

int64_t td_host_dma_bytes = 0;
int64_t td_host_offloads = 0;
static int32_t issued = 0;
static int32_t pending[16];

int32_t dma_copy_2d(const void* src, void* dst, int32_t rows, int32_t row_bytes, int32_t src_stride,
                    int32_t dst_stride) {
  int32_t r;
  for (r = 0; r < rows; ++r)
    memmove((uint8_t*)dst + (int64_t)r * dst_stride, (const uint8_t*)src + (int64_t)r * src_stride,
            (size_t)row_bytes);
  td_host_dma_bytes += (int64_t)rows * row_bytes;
  return issued++;
}

void dma_wait(int32_t handle) {
  if (handle >= issued) td_host_dma_bytes = -1000000;  // waiting on a copy never issued
}

void offload(int32_t engine_id, td_closure_fn fn, void* env) {
  if (engine_id < 0 || engine_id >= 16 || pending[engine_id]) {
    td_host_offloads = -1000000;
    return;
  }
  pending[engine_id] = 1;
  ++td_host_offloads;
  fn(env);
}

void offload_wait(int32_t engine_id) { pending[engine_id] = 0; }
