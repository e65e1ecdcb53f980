// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic graph builders: tiny-Llama decoders, an encoder layer and
// micro benchmarks.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tinydeploy/ir.hpp"
#include "tinydeploy/kernels.hpp"

namespace tinydeploy {

struct LlamaConfig {
  enum class Mode { Parallel, Autoregressive };

  int64_t d_m = 64;
  int64_t h = 16;
  int64_t n_layers = 8;
  int64_t d_ff = 256;
  int64_t vocab = 512;
  int64_t context = 256;
  uint64_t seed = 42;
  Mode mode = Mode::Parallel;
  int64_t seq = 1;     // tokens processed (parallel mode)
  int64_t past = 0;    // cached tokens (autoregressive mode, one new token)

  /// Throws Error naming the first invalid field.
  void validate() const;
};

/// Names of the graph inputs and outputs the builders use.
namespace zoo_names {
inline constexpr const char* kTokens = "tokens";
inline constexpr const char* kLogits = "logits";
inline constexpr const char* kHidden = "x";
std::string k_cache_in(int64_t layer);
std::string v_cache_in(int64_t layer);
std::string k_cache_out(int64_t layer);
std::string v_cache_out(int64_t layer);
}  // namespace zoo_names

/// Decoder stack. In autoregressive mode with past > 0 each layer takes
/// cache inputs [past, h, d_m/h]; updated caches are outputs in both modes.
/// Requant parameters are calibrated once per seed and shared by all modes.
Graph build_llama(const LlamaConfig& cfg);

/// One attention plus feed-forward block over a [S, d_m] input, without
/// masking, rotary embedding or caches.
Graph build_encoder_layer(int64_t d_m, int64_t h, int64_t d_ff, int64_t seq, uint64_t seed = 42);

/// Graph whose only buffer is both input and output.
Graph build_identity(const Shape& shape);

/// `count` chained quantized GEMMs of a [rows, width] input with
/// [width, width] weights.
Graph build_gemm_chain(int64_t rows, int64_t width, int64_t count, uint64_t seed = 42);

/// Multiply-accumulates of every matrix node.
int64_t count_macs(const Graph& g);

/// Index of the largest value in the last row of `logits` (first on ties).
int64_t argmax_last_row(const std::vector<int64_t>& logits, int64_t width);

}  // namespace tinydeploy
