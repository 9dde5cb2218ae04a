#include "uprm/tape.hpp"

#include <algorithm>
#include <cmath>

#include "uprm/errors.hpp"

namespace uprm {

Var Tape::push(Tensor2 value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor2{}, requires_grad});
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(Tensor2 value) { return push(std::move(value), track_); }

Var Tape::constant(Tensor2 value) { return push(std::move(value), false); }

Tensor2 Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor2(n.value.rows(), n.value.cols());
  return n.grad;
}

Tensor2& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor2(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor2& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Var Tape::record(std::string_view op, Tensor2 value, std::initializer_list<Var> inputs,
                 Adjoint adjoint) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(adjoint));
}

Var Tape::record(std::string_view op, Tensor2 value, const std::vector<Var>& inputs,
                 Adjoint adjoint) {
  bool any = false;
  for (Var in : inputs) any = any || nodes_.at(in.id).requires_grad;
  if (!any || !track_ || !adjoint) return push(std::move(value), false);
  Var out = push(std::move(value), true);
  Entry e{op, {}, out.id, std::move(adjoint)};
  e.inputs.reserve(inputs.size());
  for (Var in : inputs) e.inputs.push_back(in.id);
  entries_.push_back(std::move(e));
  return out;
}

void Tape::backward(Var output) {
  Node& root = nodes_.at(output.id);
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ContractError("backward: output must be 1x1, got " + root.value.shape_string());
  }
  if (!root.requires_grad) return;
  root.grad = Tensor2(1, 1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const Node& out = nodes_[it->output];
    if (out.grad.empty()) continue;
    if (!fault_op_.empty() && it->op == fault_op_) {
      Tensor2 g = out.grad;
      g *= fault_factor_;
      it->adjoint(*this, g);
    } else {
      // Adjoints only touch their inputs' gradients and never add nodes, so
      // this reference stays valid.
      it->adjoint(*this, out.grad);
    }
  }
}

namespace {

void require_same(const Tensor2& a, const Tensor2& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shapes " + a.shape_string() + " and " +
                         b.shape_string() + " differ");
  }
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  Tensor2 out = matmul(t.value(a), t.value(b));
  return t.record("matmul", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, matmul_nt(g, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(tp.value(a), g));
  });
}

Var transpose(Tape& t, Var a) {
  return t.record("transpose", transpose(t.value(a)), {a},
                  [a](Tape& tp, const Tensor2& g) { tp.accumulate(a, transpose(g)); });
}

Var add(Tape& t, Var a, Var b) {
  require_same(t.value(a), t.value(b), "add");
  Tensor2 out = t.value(a);
  out += t.value(b);
  return t.record("add", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same(t.value(a), t.value(b), "sub");
  Tensor2 out = t.value(a);
  const Tensor2& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record("sub", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) {
      Tensor2 n = g;
      n *= -1.0;
      tp.accumulate(b, n);
    }
  });
}

Var hadamard(Tape& t, Var a, Var b) {
  require_same(t.value(a), t.value(b), "hadamard");
  Tensor2 out = t.value(a);
  const Tensor2& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record("hadamard", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor2& g) {
    if (tp.requires_grad(a)) {
      Tensor2 ga = g;
      const Tensor2& bv = tp.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Tensor2 gb = g;
      const Tensor2& av = tp.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      tp.accumulate(b, gb);
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  Tensor2 out = t.value(a);
  out *= s;
  return t.record("scale", std::move(out), {a}, [a, s](Tape& tp, const Tensor2& g) {
    Tensor2 ga = g;
    ga *= s;
    tp.accumulate(a, ga);
  });
}

Var add_row(Tape& t, Var x, Var bias) {
  const Tensor2& xv = t.value(x);
  const Tensor2& bv = t.value(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row: bias " + bv.shape_string() + " for input " +
                         xv.shape_string());
  }
  Tensor2 out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return t.record("add_row", std::move(out), {x, bias}, [x, bias](Tape& tp, const Tensor2& g) {
    tp.accumulate(x, g);
    if (tp.requires_grad(bias)) {
      Tensor2 gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
      tp.accumulate(bias, gb);
    }
  });
}

Var relu(Tape& t, Var x) {
  return t.record("relu", relu(t.value(x)), {x}, [x](Tape& tp, const Tensor2& g) {
    const Tensor2& xv = tp.value(x);
    Tensor2 gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(xv[i] > 0.0)) gx[i] = 0.0;
    tp.accumulate(x, gx);
  });
}

Var sigmoid(Tape& t, Var x) {
  Tensor2 out = t.value(x);
  for (double& v : out.values()) v = sigmoid(v);
  Var saved = t.constant(out);
  return t.record("sigmoid", std::move(out), {x}, [x, saved](Tape& tp, const Tensor2& g) {
    const Tensor2& yv = tp.value(saved);
    Tensor2 gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= yv[i] * (1.0 - yv[i]);
    tp.accumulate(x, gx);
  });
}

Var softmax_rows(Tape& t, Var x, double temperature) {
  Tensor2 out = softmax_rows(t.value(x), temperature);
  // The adjoint needs the output; it is stored on the tape as a constant
  // node so the closure can reference it by id.
  Var saved = t.constant(out);
  return t.record("softmax", std::move(out), {x},
                  [x, saved, temperature](Tape& tp, const Tensor2& g) {
                    const Tensor2& y = tp.value(saved);
                    Tensor2 gx(y.rows(), y.cols());
                    for (std::size_t r = 0; r < y.rows(); ++r) {
                      double dot = 0.0;
                      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                      for (std::size_t c = 0; c < y.cols(); ++c)
                        gx(r, c) = y(r, c) * (g(r, c) - dot) / temperature;
                    }
                    tp.accumulate(x, gx);
                  });
}

Var layer_norm_rows(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor2& xv = t.value(x);
  const Tensor2& gv = t.value(gamma);
  const Tensor2& bv = t.value(beta);
  const std::size_t n = xv.rows();
  const std::size_t c = xv.cols();
  if (gv.rows() != 1 || gv.cols() != c || !gv.same_shape(bv)) {
    throw ContractError("layer_norm: gamma " + gv.shape_string() + " / beta " +
                        bv.shape_string() + " for input " + xv.shape_string());
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  Tensor2 xhat(n, c);
  Tensor2 inv_std(n, 1);
  Tensor2 out(n, c);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = xv.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat(r, j) = (row[j] - mean) * is;
      out(r, j) = gv[j] * xhat(r, j) + bv[j];
    }
  }
  Var saved_xhat = t.constant(std::move(xhat));
  Var saved_inv = t.constant(std::move(inv_std));
  return t.record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, saved_xhat, saved_inv](Tape& tp, const Tensor2& g) {
        const Tensor2& xh = tp.value(saved_xhat);
        const Tensor2& is = tp.value(saved_inv);
        const Tensor2& gv = tp.value(gamma);
        const std::size_t n = xh.rows();
        const std::size_t c = xh.cols();
        if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
          Tensor2 gg(1, c);
          Tensor2 gb(1, c);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              gg[j] += g(r, j) * xh(r, j);
              gb[j] += g(r, j);
            }
          tp.accumulate(gamma, gg);
          tp.accumulate(beta, gb);
        }
        if (tp.requires_grad(x)) {
          Tensor2 gx(n, c);
          const double cn = static_cast<double>(c);
          for (std::size_t r = 0; r < n; ++r) {
            double s1 = 0.0;
            double s2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(r, j) * gv[j];
              s1 += d;
              s2 += d * xh(r, j);
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double d = g(r, j) * gv[j];
              gx(r, j) = is[r] / cn * (cn * d - s1 - xh(r, j) * s2);
            }
          }
          tp.accumulate(x, gx);
        }
      });
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = t.value(parts[0]).rows();
  std::size_t total = 0;
  for (Var p : parts) {
    if (t.value(p).rows() != n) {
      throw DimensionError("concat_cols: row counts differ (" + t.value(p).shape_string() +
                           " vs " + t.value(parts[0]).shape_string() + ")");
    }
    total += t.value(p).cols();
  }
  Tensor2 out(n, total);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor2& v = t.value(p);
    for (std::size_t r = 0; r < n; ++r)
      std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + off);
    off += v.cols();
  }
  return t.record("concat_cols", std::move(out), parts, [parts](Tape& tp, const Tensor2& g) {
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t w = tp.value(p).cols();
      if (tp.requires_grad(p)) {
        Tensor2 gp(g.rows(), w);
        for (std::size_t r = 0; r < g.rows(); ++r)
          std::copy_n(g.row(r).begin() + off, w, gp.row(r).begin());
        tp.accumulate(p, gp);
      }
      off += w;
    }
  });
}

Var slice_cols(Tape& t, Var x, std::size_t begin, std::size_t count) {
  const Tensor2& xv = t.value(x);
  if (begin + count > xv.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + xv.shape_string());
  }
  Tensor2 out(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    std::copy_n(xv.row(r).begin() + begin, count, out.row(r).begin());
  return t.record("slice_cols", std::move(out), {x}, [x, begin](Tape& tp, const Tensor2& g) {
    Tensor2& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, begin + c) += g(r, c);
  });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = t.value(parts[0]).cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (Var p : parts) {
    const Tensor2& v = t.value(p);
    if (v.cols() != c) {
      throw DimensionError("concat_rows: column counts differ (" + v.shape_string() + " vs " +
                           t.value(parts[0]).shape_string() + ")");
    }
    data.insert(data.end(), v.values().begin(), v.values().end());
    rows += v.rows();
  }
  return t.record("concat_rows", Tensor2(rows, c, std::move(data)), parts,
                  [parts](Tape& tp, const Tensor2& g) {
                    std::size_t off = 0;
                    for (Var p : parts) {
                      const std::size_t h = tp.value(p).rows();
                      if (tp.requires_grad(p)) {
                        Tensor2 gp(h, g.cols());
                        std::copy_n(g.values().begin() + off * g.cols(), h * g.cols(),
                                    gp.values().begin());
                        tp.accumulate(p, gp);
                      }
                      off += h;
                    }
                  });
}

Var gather_rows(Tape& t, Var x, std::vector<std::size_t> index) {
  const Tensor2& xv = t.value(x);
  Tensor2 out(index.size(), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.rows()) {
      throw ContractError("gather_rows: index " + std::to_string(index[i]) + " out of " +
                          xv.shape_string());
    }
    std::copy(xv.row(index[i]).begin(), xv.row(index[i]).end(), out.row(i).begin());
  }
  return t.record("gather_rows", std::move(out), {x},
                  [x, index = std::move(index)](Tape& tp, const Tensor2& g) {
                    Tensor2& gx = tp.grad_buffer(x);
                    for (std::size_t i = 0; i < index.size(); ++i) {
                      auto dst = gx.row(index[i]);
                      const auto src = g.row(i);
                      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                    }
                  });
}

Var segment_mean(Tape& t, Var x, std::vector<std::size_t> offsets) {
  const Tensor2& xv = t.value(x);
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != xv.rows()) {
    throw ContractError("segment_mean: offsets do not cover " + xv.shape_string());
  }
  const std::size_t segs = offsets.size() - 1;
  Tensor2 out(segs, xv.cols());
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    if (len == 0) throw ContractError("segment_mean: empty segment " + std::to_string(s));
    auto dst = out.row(s);
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
      const auto src = xv.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
    for (double& v : dst) v /= static_cast<double>(len);
  }
  return t.record("segment_mean", std::move(out), {x},
                  [x, offsets = std::move(offsets)](Tape& tp, const Tensor2& g) {
                    Tensor2& gx = tp.grad_buffer(x);
                    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
                      const double inv = 1.0 / static_cast<double>(offsets[s + 1] - offsets[s]);
                      const auto src = g.row(s);
                      for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
                        auto dst = gx.row(r);
                        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c] * inv;
                      }
                    }
                  });
}

Var neighbor_attention(Tape& t, Var q, Var k, Var v, const SparseRows& neighbors,
                       double scale_factor) {
  const Tensor2& qv = t.value(q);
  const Tensor2& kv = t.value(k);
  const Tensor2& vv = t.value(v);
  const std::size_t n = qv.rows();
  if (neighbors.rows() != n || kv.rows() != vv.rows() || qv.cols() != kv.cols()) {
    throw DimensionError("neighbor_attention: q " + qv.shape_string() + ", k " +
                         kv.shape_string() + ", v " + vv.shape_string() + ", " +
                         std::to_string(neighbors.rows()) + " neighbour rows");
  }
  Tensor2 out(n, vv.cols());
  Tensor2 weights(1, neighbors.columns.size());
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t b = neighbors.offsets[r];
    const std::size_t e = neighbors.offsets[r + 1];
    if (b == e) throw ContractError("neighbor_attention: node " + std::to_string(r) +
                                    " has an empty neighbourhood");
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = b; i < e; ++i) {
      const std::size_t l = neighbors.columns[i];
      double s = 0.0;
      for (std::size_t c = 0; c < qv.cols(); ++c) s += qv(r, c) * kv(l, c);
      weights[i] = s * scale_factor;
      m = std::max(m, weights[i]);
    }
    double total = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      weights[i] = std::exp(weights[i] - m);
      total += weights[i];
    }
    auto dst = out.row(r);
    for (std::size_t i = b; i < e; ++i) {
      weights[i] /= total;
      const auto src = vv.row(neighbors.columns[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += weights[i] * src[c];
    }
  }
  Var saved = t.constant(std::move(weights));
  return t.record(
      "neighbor_attention", std::move(out), {q, k, v},
      [q, k, v, saved, neighbors, scale_factor](Tape& tp, const Tensor2& g) {
        const Tensor2& w = tp.value(saved);
        const Tensor2& qv = tp.value(q);
        const Tensor2& kv = tp.value(k);
        const Tensor2& vv = tp.value(v);
        const bool gq = tp.requires_grad(q);
        const bool gk = tp.requires_grad(k);
        const bool gv = tp.requires_grad(v);
        Tensor2 dq = gq ? Tensor2(qv.rows(), qv.cols()) : Tensor2{};
        Tensor2 dk = gk ? Tensor2(kv.rows(), kv.cols()) : Tensor2{};
        Tensor2 dv = gv ? Tensor2(vv.rows(), vv.cols()) : Tensor2{};
        std::vector<double> dw;
        for (std::size_t r = 0; r + 1 < neighbors.offsets.size(); ++r) {
          const std::size_t b = neighbors.offsets[r];
          const std::size_t e = neighbors.offsets[r + 1];
          const auto go = g.row(r);
          dw.assign(e - b, 0.0);
          double dot = 0.0;
          for (std::size_t i = b; i < e; ++i) {
            const std::size_t l = neighbors.columns[i];
            const auto vl = vv.row(l);
            double s = 0.0;
            for (std::size_t c = 0; c < vl.size(); ++c) s += go[c] * vl[c];
            dw[i - b] = s;
            dot += w[i] * s;
            if (gv) {
              auto dvl = dv.row(l);
              for (std::size_t c = 0; c < vl.size(); ++c) dvl[c] += w[i] * go[c];
            }
          }
          for (std::size_t i = b; i < e; ++i) {
            const std::size_t l = neighbors.columns[i];
            const double ds = w[i] * (dw[i - b] - dot) * scale_factor;
            if (gq)
              for (std::size_t c = 0; c < qv.cols(); ++c) dq(r, c) += ds * kv(l, c);
            if (gk)
              for (std::size_t c = 0; c < kv.cols(); ++c) dk(l, c) += ds * qv(r, c);
          }
        }
        if (gq) tp.accumulate(q, dq);
        if (gk) tp.accumulate(k, dk);
        if (gv) tp.accumulate(v, dv);
      });
}

Var sparse_matmul(Tape& t, const SparseRows& m, Var f) {
  const Tensor2& fv = t.value(f);
  const std::size_t n = m.rows();
  Tensor2 out(n, fv.cols());
  for (std::size_t r = 0; r < n; ++r) {
    auto dst = out.row(r);
    for (std::size_t i = m.offsets[r]; i < m.offsets[r + 1]; ++i) {
      if (m.columns[i] >= fv.rows()) {
        throw DimensionError("sparse_matmul: column " + std::to_string(m.columns[i]) +
                             " out of " + fv.shape_string());
      }
      const auto src = fv.row(m.columns[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += m.values[i] * src[c];
    }
  }
  return t.record("sparse_matmul", std::move(out), {f}, [m, f](Tape& tp, const Tensor2& g) {
    Tensor2& gf = tp.grad_buffer(f);
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const auto src = g.row(r);
      for (std::size_t i = m.offsets[r]; i < m.offsets[r + 1]; ++i) {
        auto dst = gf.row(m.columns[i]);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += m.values[i] * src[c];
      }
    }
  });
}

Var gated_combine(Tape& t, Var weights, const std::vector<Var>& experts, Var coarse) {
  const Tensor2& w = t.value(weights);
  const Tensor2& cv = t.value(coarse);
  const std::size_t n = cv.rows();
  const std::size_t d = cv.cols();
  if (w.rows() != n || w.cols() != experts.size() || experts.empty()) {
    throw DimensionError("gated_combine: weights " + w.shape_string() + " for " +
                         std::to_string(experts.size()) + " experts of " + cv.shape_string());
  }
  for (Var e : experts) require_same(t.value(e), cv, "gated_combine");
  Tensor2 out(n, d);
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 1; i < experts.size(); ++i)
      if (w(r, i) > w(r, arg[r])) arg[r] = i;
    const double gate = w(r, arg[r]);
    auto dst = out.row(r);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const auto src = t.value(experts[i]).row(r);
      const double wi = w(r, i);
      if (i == 0) {
        for (std::size_t c = 0; c < d; ++c) dst[c] = wi * src[c];
      } else {
        for (std::size_t c = 0; c < d; ++c) dst[c] += wi * src[c];
      }
    }
    const auto src = cv.row(r);
    for (std::size_t c = 0; c < d; ++c) dst[c] += (1.0 - gate) * src[c];
  }
  std::vector<Var> inputs = experts;
  inputs.push_back(weights);
  inputs.push_back(coarse);
  return t.record("gated_combine", std::move(out), inputs,
                  [weights, experts, coarse, arg = std::move(arg)](Tape& tp, const Tensor2& g) {
                    const Tensor2& w = tp.value(weights);
                    const Tensor2& cv = tp.value(coarse);
                    const std::size_t n = g.rows();
                    const std::size_t d = g.cols();
                    for (std::size_t i = 0; i < experts.size(); ++i) {
                      if (!tp.requires_grad(experts[i])) continue;
                      Tensor2 ge = g;
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) ge(r, c) *= w(r, i);
                      tp.accumulate(experts[i], ge);
                    }
                    if (tp.requires_grad(coarse)) {
                      Tensor2 gc = g;
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gc(r, c) *= 1.0 - w(r, arg[r]);
                      tp.accumulate(coarse, gc);
                    }
                    if (tp.requires_grad(weights)) {
                      Tensor2 gw(n, experts.size());
                      for (std::size_t r = 0; r < n; ++r) {
                        const auto gr = g.row(r);
                        for (std::size_t i = 0; i < experts.size(); ++i) {
                          const auto er = tp.value(experts[i]).row(r);
                          double s = 0.0;
                          for (std::size_t c = 0; c < d; ++c) s += gr[c] * er[c];
                          gw(r, i) = s;
                        }
                        double s = 0.0;
                        const auto cr = cv.row(r);
                        for (std::size_t c = 0; c < d; ++c) s += gr[c] * cr[c];
                        gw(r, arg[r]) -= s;
                      }
                      tp.accumulate(weights, gw);
                    }
                  });
}

Var tradeoff_loss(Tape& t, Var fine_logits, Var coarse_logit) {
  const Tensor2& x = t.value(fine_logits);
  const Tensor2& xg = t.value(coarse_logit);
  const std::size_t n = x.rows();
  if (xg.rows() != n || xg.cols() != 1 || n == 0) {
    throw DimensionError("tradeoff_loss: fine logits " + x.shape_string() + ", coarse logit " +
                         xg.shape_string());
  }
  // Per-token log-sum-exp and the softmax over all N+1 logits.
  Tensor2 lse(n, 1);
  Tensor2 probs(n, x.cols() + 1);
  double total = 0.0;
  std::vector<double> row(x.cols() + 1);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(x.row(r).begin(), x.row(r).end(), row.begin());
    row.back() = xg[r];
    lse[r] = log_sum_exp(row);
    for (std::size_t j = 0; j < row.size(); ++j) probs(r, j) = std::exp(row[j] - lse[r]);
    total += lse[r] * lse[r];
  }
  Tensor2 out(1, 1, total / static_cast<double>(n));
  Var saved_lse = t.constant(std::move(lse));
  Var saved_p = t.constant(std::move(probs));
  return t.record("tradeoff_loss", std::move(out), {fine_logits, coarse_logit},
                  [fine_logits, coarse_logit, saved_lse, saved_p](Tape& tp, const Tensor2& g) {
                    const Tensor2& lse = tp.value(saved_lse);
                    const Tensor2& p = tp.value(saved_p);
                    const std::size_t n = lse.rows();
                    const std::size_t fine = p.cols() - 1;
                    const double k = 2.0 * g[0] / static_cast<double>(n);
                    Tensor2 gx(n, fine);
                    Tensor2 gg(n, 1);
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t j = 0; j < fine; ++j) gx(r, j) = k * lse[r] * p(r, j);
                      gg[r] = k * lse[r] * p(r, fine);
                    }
                    tp.accumulate(fine_logits, gx);
                    tp.accumulate(coarse_logit, gg);
                  });
}

Var bce_with_logits(Tape& t, Var logits, std::vector<double> labels) {
  const Tensor2& z = t.value(logits);
  if (z.cols() != 1 || z.rows() != labels.size() || labels.empty()) {
    throw DimensionError("bce_with_logits: logits " + z.shape_string() + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const double l = z[r];
    total += std::max(l, 0.0) - labels[r] * l + std::log1p(std::exp(-std::abs(l)));
  }
  Tensor2 out(1, 1, total / static_cast<double>(labels.size()));
  return t.record("bce_with_logits", std::move(out), {logits},
                  [logits, labels = std::move(labels)](Tape& tp, const Tensor2& g) {
                    const Tensor2& z = tp.value(logits);
                    Tensor2 gz(z.rows(), 1);
                    const double k = g[0] / static_cast<double>(labels.size());
                    for (std::size_t r = 0; r < labels.size(); ++r)
                      gz[r] = k * (sigmoid(z[r]) - labels[r]);
                    tp.accumulate(logits, gz);
                  });
}

Var masked_cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets,
                         std::vector<bool> mask) {
  const Tensor2& z = t.value(logits);
  if (z.rows() != targets.size() || z.rows() != mask.size()) {
    throw DimensionError("masked_cross_entropy: logits " + z.shape_string() + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (!mask[r]) continue;
    if (targets[r] >= z.cols()) {
      throw ContractError("masked_cross_entropy: target " + std::to_string(targets[r]) +
                          " out of " + std::to_string(z.cols()) + " classes");
    }
    total += log_sum_exp(z.row(r)) - z(r, targets[r]);
    ++count;
  }
  Tensor2 out(1, 1, count == 0 ? 0.0 : total / static_cast<double>(count));
  if (count == 0) return t.constant(std::move(out));
  return t.record("cross_entropy", std::move(out), {logits},
                  [logits, targets = std::move(targets), mask = std::move(mask), count](
                      Tape& tp, const Tensor2& g) {
                    const Tensor2& z = tp.value(logits);
                    Tensor2 gz(z.rows(), z.cols());
                    const double k = g[0] / static_cast<double>(count);
                    for (std::size_t r = 0; r < z.rows(); ++r) {
                      if (!mask[r]) continue;
                      const auto p = softmax(z.row(r));
                      for (std::size_t c = 0; c < z.cols(); ++c) gz(r, c) = k * p[c];
                      gz(r, targets[r]) -= k;
                    }
                    tp.accumulate(logits, gz);
                  });
}

Var sum_all(Tape& t, Var x) {
  double s = 0.0;
  for (double v : t.value(x).values()) s += v;
  return t.record("sum", Tensor2(1, 1, s), {x}, [x](Tape& tp, const Tensor2& g) {
    const Tensor2& xv = tp.value(x);
    tp.accumulate(x, Tensor2(xv.rows(), xv.cols(), g[0]));
  });
}

Var mean_all(Tape& t, Var x) {
  const double n = static_cast<double>(t.value(x).size());
  if (n == 0) throw ContractError("mean_all: empty input");
  return scale(t, sum_all(t, x), 1.0 / n);
}

Var linear(Tape& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

const std::vector<std::string_view>& primitive_ops() {
  static const std::vector<std::string_view> ops{
      "add",
      "add_row",
      "bce_with_logits",
      "concat_cols",
      "concat_rows",
      "cross_entropy",
      "gated_combine",
      "gather_rows",
      "hadamard",
      "layer_norm",
      "matmul",
      "neighbor_attention",
      "relu",
      "scale",
      "segment_mean",
      "sigmoid",
      "slice_cols",
      "softmax",
      "sparse_matmul",
      "sub",
      "sum",
      "tradeoff_loss",
      "transpose",
  };
  return ops;
}

}  // namespace uprm
