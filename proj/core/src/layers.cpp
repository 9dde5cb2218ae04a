#include "uprm/layers.hpp"

#include <cmath>
#include <string>

#include "uprm/errors.hpp"

namespace uprm {

Tensor2 init_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows == 0 ? 1 : rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

FfnParams make_ffn(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
  FfnParams p;
  p.weight1 = init_uniform(in, hidden, rng);
  p.bias1 = Tensor2(1, hidden);
  p.weight2 = init_uniform(hidden, out, rng);
  p.bias2 = Tensor2(1, out);
  return p;
}

void check_ffn(const FfnParams& p) {
  const std::size_t h = p.weight1.cols();
  if (p.bias1.rows() != 1 || p.bias1.cols() != h || p.weight2.rows() != h ||
      p.bias2.rows() != 1 || p.bias2.cols() != p.weight2.cols()) {
    throw DimensionError("ffn shapes do not chain: W1 " + p.weight1.shape_string() + ", b1 " +
                         p.bias1.shape_string() + ", W2 " + p.weight2.shape_string() + ", b2 " +
                         p.bias2.shape_string());
  }
}

Var ffn_forward(Tape& t, Var x, const FfnWeights<Var>& p) {
  if (t.value(x).cols() != t.value(p.weight1).rows()) {
    throw DimensionError("ffn: input " + t.value(x).shape_string() + " for W1 " +
                         t.value(p.weight1).shape_string());
  }
  Var hidden = relu(t, linear(t, x, p.weight1, p.bias1));
  return linear(t, hidden, p.weight2, p.bias2);
}

Tensor2 ffn_forward(const Tensor2& x, const FfnParams& p) {
  check_ffn(p);
  Tape t(false);
  const auto bound = bind(t, p);
  return t.value(ffn_forward(t, t.constant(x), bound));
}

LinearWeights<Tensor2> make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {init_uniform(in, out, rng), Tensor2(1, out)};
}

LayerNormWeights<Tensor2> make_layer_norm(std::size_t d) {
  return {Tensor2(1, d, 1.0), Tensor2(1, d)};
}

AttentionWeights<Tensor2> make_attention(std::size_t query_dim, std::size_t kv_dim,
                                         std::size_t d, std::mt19937_64& rng) {
  return {init_uniform(query_dim, d, rng), init_uniform(kv_dim, d, rng),
          init_uniform(kv_dim, d, rng), init_uniform(d, d, rng)};
}

Var attention(Tape& t, Var q, Var k, Var v, std::size_t heads, const Tensor2* score_bias) {
  const Tensor2& qv = t.value(q);
  const Tensor2& kv = t.value(k);
  const Tensor2& vv = t.value(v);
  if (qv.cols() != kv.cols() || kv.rows() != vv.rows()) {
    throw DimensionError("attention: q " + qv.shape_string() + ", k " + kv.shape_string() +
                         ", v " + vv.shape_string());
  }
  if (heads == 0 || qv.cols() % heads != 0 || vv.cols() % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(qv.cols()) + "/" +
                      std::to_string(vv.cols()) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (score_bias && (score_bias->rows() != qv.rows() || score_bias->cols() != kv.rows())) {
    throw DimensionError("attention: score bias " + score_bias->shape_string() + " for " +
                         std::to_string(qv.rows()) + " queries and " +
                         std::to_string(kv.rows()) + " keys");
  }
  const std::size_t dk = qv.cols() / heads;
  const std::size_t dv = vv.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  const Var bias = score_bias ? t.constant(*score_bias) : Var{};
  auto biased = [&](Var scores) { return score_bias ? add(t, scores, bias) : scores; };
  if (heads == 1) {
    Var scores = biased(scale(t, matmul(t, q, transpose(t, k)), inv));
    return matmul(t, softmax_rows(t, scores), v);
  }
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(t, q, h * dk, dk);
    Var kh = slice_cols(t, k, h * dk, dk);
    Var vh = slice_cols(t, v, h * dv, dv);
    Var scores = biased(scale(t, matmul(t, qh, transpose(t, kh)), inv));
    outs.push_back(matmul(t, softmax_rows(t, scores), vh));
  }
  return concat_cols(t, outs);
}

Var multi_head_attention(Tape& t, Var query_src, Var kv_src, const AttentionWeights<Var>& w,
                         std::size_t heads, const Tensor2* score_bias) {
  Var q = matmul(t, query_src, w.query);
  Var k = matmul(t, kv_src, w.key);
  Var v = matmul(t, kv_src, w.value);
  return matmul(t, attention(t, q, k, v, heads, score_bias), w.output);
}

}  // namespace uprm
