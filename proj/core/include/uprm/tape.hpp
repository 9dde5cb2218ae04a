#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "uprm/tensor.hpp"

namespace uprm {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

/// Reverse-mode tape over a fixed primitive set.
///
/// Every primitive appends one entry holding its op name, input ids, output
/// id and the closure that applies its adjoint. Entries are appended in
/// evaluation order, so the tape is topologically sorted by construction and
/// `backward` replays it once in reverse.
///
/// Entries are only recorded when at least one input requires a gradient. A
/// tape built with `track_gradients = false` therefore evaluates values only.
class Tape {
 public:
  using Adjoint = std::function<void(Tape&, const Tensor2& grad_out)>;

  struct Entry {
    std::string_view op;
    std::vector<std::size_t> inputs;
    std::size_t output;
    Adjoint adjoint;
  };

  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Leaf that receives a gradient.
  Var parameter(Tensor2 value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor2 value);

  const Tensor2& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool tracking() const noexcept { return track_; }

  /// Gradient accumulated at `v` by the last backward pass; zeros when the
  /// node was not reached.
  Tensor2 grad(Var v) const;

  /// Seeds d(output)/d(output) = 1 and replays adjoints in reverse. `output`
  /// must be 1×1.
  void backward(Var output);

  /// Appends a primitive application. `adjoint` may be empty for ops with no
  /// differentiable inputs.
  Var record(std::string_view op, Tensor2 value, std::initializer_list<Var> inputs,
             Adjoint adjoint);
  Var record(std::string_view op, Tensor2 value, const std::vector<Var>& inputs,
             Adjoint adjoint);

  /// Adds `g` into the gradient of `v` (no-op for nodes without gradients).
  void accumulate(Var v, const Tensor2& g);
  /// Mutable gradient buffer of `v`, zero-initialised on first use. Only
  /// valid for nodes that require a gradient.
  Tensor2& grad_buffer(Var v);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Test hook: scales the incoming gradient of every entry named `op` by
  /// `factor` during backward, producing a deliberately wrong adjoint.
  void inject_fault(std::string op, double factor = 1.5) {
    fault_op_ = std::move(op);
    fault_factor_ = factor;
  }

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    bool requires_grad = false;
  };

  Var push(Tensor2 value, bool requires_grad);

  bool track_;
  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
  std::string fault_op_;
  double fault_factor_ = 1.0;
};

/// Compressed sparse rows. `values` may be empty for pattern-only use.
struct SparseRows {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> columns;
  std::vector<double> values;

  std::size_t rows() const noexcept { return offsets.size() - 1; }
};

// Primitives. Each has a registered adjoint.

/// Op names recorded by the primitives below, sorted.
const std::vector<std::string_view>& primitive_ops();

Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var hadamard(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
/// x (n×c) + bias (1×c) broadcast over rows.
Var add_row(Tape& t, Var x, Var bias);
Var relu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x, double temperature = 1.0);
/// Row-wise layer normalisation with per-column gain and shift (1×c each).
Var layer_norm_rows(Tape& t, Var x, Var gamma, Var beta, double eps = kLayerNormEps);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var slice_cols(Tape& t, Var x, std::size_t begin, std::size_t count);
Var concat_rows(Tape& t, const std::vector<Var>& parts);
/// out.row(i) = x.row(index[i]).
Var gather_rows(Tape& t, Var x, std::vector<std::size_t> index);
/// Mean of consecutive row blocks [offsets[s], offsets[s+1]).
Var segment_mean(Tape& t, Var x, std::vector<std::size_t> offsets);
/// For each row k: softmax over l ∈ neighbors(k) of scale·(q_k · k_l), then
/// Σ weight_l · v_l. Every row must have at least one neighbour.
Var neighbor_attention(Tape& t, Var q, Var k, Var v, const SparseRows& neighbors, double scale);
/// Constant sparse matrix times f.
Var sparse_matmul(Tape& t, const SparseRows& m, Var f);
/// Σᵢ w[:,i] ⊙ experts[i] + (1 − max_i w[:,i]) ⊙ coarse, per row.
Var gated_combine(Tape& t, Var weights, const std::vector<Var>& experts, Var coarse);
/// mean over rows of (log(Σ_j exp(fine_j) + exp(coarse)))².
Var tradeoff_loss(Tape& t, Var fine_logits, Var coarse_logit);
/// Mean binary cross-entropy of an n×1 logit column against 0/1 labels.
Var bce_with_logits(Tape& t, Var logits, std::vector<double> labels);
/// Mean categorical cross-entropy over rows where mask is set; 0 when none.
Var masked_cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets,
                         std::vector<bool> mask);
Var sum_all(Tape& t, Var x);
Var mean_all(Tape& t, Var x);

/// x·w + b.
Var linear(Tape& t, Var x, Var w, Var b);

}  // namespace uprm
