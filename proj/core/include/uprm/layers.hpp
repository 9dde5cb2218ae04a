#pragma once

#include <cstddef>
#include <random>

#include "uprm/params.hpp"
#include "uprm/tape.hpp"
#include "uprm/tensor.hpp"

namespace uprm {

/// Two-layer position-wise feed-forward network: relu(x·W1 + b1)·W2 + b2.
template <class T>
struct FfnWeights {
  T weight1;  // d × h
  T bias1;    // 1 × h
  T weight2;  // h × d_out
  T bias2;    // 1 × d_out

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("weight1", s.weight1...);
    f("bias1", s.bias1...);
    f("weight2", s.weight2...);
    f("bias2", s.bias2...);
  }
};
using FfnParams = FfnWeights<Tensor2>;

FfnParams make_ffn(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);
/// Throws DimensionError unless the four shapes chain.
void check_ffn(const FfnParams& p);

Var ffn_forward(Tape& t, Var x, const FfnWeights<Var>& p);
Tensor2 ffn_forward(const Tensor2& x, const FfnParams& p);

template <class T>
struct LinearWeights {
  T weight;  // in × out
  T bias;    // 1 × out

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("weight", s.weight...);
    f("bias", s.bias...);
  }
};

LinearWeights<Tensor2> make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

template <class T>
struct LayerNormWeights {
  T gamma;  // 1 × d
  T beta;   // 1 × d

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("gamma", s.gamma...);
    f("beta", s.beta...);
  }
};

LayerNormWeights<Tensor2> make_layer_norm(std::size_t d);

/// Input and output projections around multi-head attention.
template <class T>
struct AttentionWeights {
  T query;   // d_q × d
  T key;     // d_kv × d
  T value;   // d_kv × d
  T output;  // d × d

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("query", s.query...);
    f("key", s.key...);
    f("value", s.value...);
    f("output", s.output...);
  }
};

AttentionWeights<Tensor2> make_attention(std::size_t query_dim, std::size_t kv_dim,
                                         std::size_t d, std::mt19937_64& rng);

/// Scaled dot-product attention split into `heads` column blocks; head
/// outputs are concatenated. Scores are scaled by 1/sqrt(head_dim).
/// Throws ConfigError when the width is not divisible by `heads`.
/// `score_bias` (rows(q) × rows(k)), when given, is added to the scaled
/// scores of every head before the softmax.
Var attention(Tape& t, Var q, Var k, Var v, std::size_t heads,
              const Tensor2* score_bias = nullptr);

/// attention(query_src·Wq, kv_src·Wk, kv_src·Wv, heads)·Wo. Self-attention
/// is query_src == kv_src.
Var multi_head_attention(Tape& t, Var query_src, Var kv_src, const AttentionWeights<Var>& w,
                         std::size_t heads, const Tensor2* score_bias = nullptr);

}  // namespace uprm
