#pragma once

// Straight-line re-derivation of the forward passes with nested vectors and
// explicit loops. Shares no code with the library's tensor, tape or layer
// implementations; only parameter storage and synthetic inputs are read.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "uprm/datagen.hpp"
#include "uprm/experts.hpp"
#include "uprm/model.hpp"

namespace uprm::reference {

using Mat = std::vector<std::vector<double>>;

inline Mat from(const Tensor2& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
  return m;
}

inline Tensor2 to_tensor(const Mat& m) {
  Tensor2 t(m.size(), m.empty() ? 0 : m[0].size());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) t(r, c) = m[r][c];
  return t;
}

inline Mat mul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat plus_row(Mat a, const Mat& bias) {
  for (auto& row : a)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
  return a;
}

inline Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat relu(Mat a) {
  for (auto& row : a)
    for (double& v : row) v = v > 0.0 ? v : 0.0;
  return a;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - m);
  for (double& v : e) v /= s;
  return e;
}

inline Mat ffn(const Mat& x, const FfnParams& p) {
  return plus_row(mul(relu(plus_row(mul(x, from(p.weight1)), from(p.bias1))), from(p.weight2)),
                  from(p.bias2));
}

inline Mat layer_norm(const Mat& x, const LayerNormWeights<Tensor2>& w) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mean = 0.0;
    for (double v : x[r]) mean += v / n;
    double var = 0.0;
    for (double v : x[r]) var += (v - mean) * (v - mean) / n;
    for (std::size_t j = 0; j < x[r].size(); ++j)
      out[r][j] = (x[r][j] - mean) / std::sqrt(var + 1e-5) * w.gamma[j] + w.beta[j];
  }
  return out;
}

// bias may be empty for unbiased scores.
inline Mat mha(const Mat& qsrc, const Mat& kvsrc, const AttentionWeights<Tensor2>& w,
               std::size_t heads, const Mat& bias = {}) {
  const Mat q = mul(qsrc, from(w.query));
  const Mat k = mul(kvsrc, from(w.key));
  const Mat v = mul(kvsrc, from(w.value));
  const std::size_t hd = q[0].size() / heads;
  Mat cat(q.size(), std::vector<double>(q[0].size(), 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> scores(k.size(), 0.0);
      for (std::size_t j = 0; j < k.size(); ++j) {
        for (std::size_t c = 0; c < hd; ++c) scores[j] += q[i][h * hd + c] * k[j][h * hd + c];
        scores[j] /= std::sqrt(static_cast<double>(hd));
        if (!bias.empty()) scores[j] += bias[i][j];
      }
      const auto a = softmax(scores);
      for (std::size_t c = 0; c < hd; ++c)
        for (std::size_t j = 0; j < k.size(); ++j) cat[i][h * hd + c] += a[j] * v[j][h * hd + c];
    }
  }
  return mul(cat, from(w.output));
}

inline Mat pose_expert(const Mat& video, const PoseGraphSequence& poses, const HpeParams& w,
                       std::size_t heads, double slope) {
  const std::size_t n = video.size();
  const std::size_t p = w.lift.cols();
  // Skeleton adjacency with self loops.
  std::vector<std::vector<bool>> adj(kJointCount, std::vector<bool>(kJointCount, false));
  for (std::size_t j = 0; j < kJointCount; ++j) adj[j][j] = true;
  for (const auto& [a, b] : skeleton_edges()) adj[a][b] = adj[b][a] = true;

  Mat tokens(n);
  for (std::size_t f = 0; f < n; ++f) {
    if (!poses[f]) {
      tokens[f] = from(w.null_pose)[0];
      continue;
    }
    const auto& raw = *poses[f];
    double cx = 0, cy = 0, x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
    for (const auto& pt : raw) {
      cx += pt.x / kJointCount;
      cy += pt.y / kJointCount;
      x0 = std::min(x0, pt.x);
      x1 = std::max(x1, pt.x);
      y0 = std::min(y0, pt.y);
      y1 = std::max(y1, pt.y);
    }
    const double ext = std::max(x1 - x0, y1 - y0);
    Mat g(kJointCount, std::vector<double>(p));
    for (std::size_t j = 0; j < kJointCount; ++j) {
      const double x = (raw[j].x - cx) / ext, y = (raw[j].y - cy) / ext;
      for (std::size_t c = 0; c < p; ++c)
        g[j][c] = x * w.lift(0, c) + y * w.lift(1, c) + w.joint_embedding(j, c);
    }
    const Mat vg = mul(g, from(w.node_attention));
    Mat updated(kJointCount);
    for (std::size_t k = 0; k < kJointCount; ++k) {
      std::vector<double> s;
      std::vector<std::size_t> nb;
      for (std::size_t l = 0; l < kJointCount; ++l) {
        if (!adj[k][l]) continue;
        double dot = 0;
        for (std::size_t c = 0; c < p; ++c) dot += vg[k][c] * vg[l][c];
        s.push_back(dot / std::sqrt(static_cast<double>(p)));
        nb.push_back(l);
      }
      const auto beta = softmax(s);
      std::vector<double> concat(2 * p, 0.0);
      for (std::size_t i = 0; i < nb.size(); ++i)
        for (std::size_t c = 0; c < p; ++c) concat[c] += beta[i] * g[nb[i]][c];
      for (std::size_t c = 0; c < p; ++c) concat[p + c] = g[k][c];
      updated[k] = relu(mul(Mat{concat}, from(w.node_update)))[0];
    }
    tokens[f].assign(p, 0.0);
    for (const auto& row : updated)
      for (std::size_t c = 0; c < p; ++c) tokens[f][c] += row[c] / kJointCount;
  }
  Mat bias;
  if (slope != 0.0) {
    bias.assign(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        bias[i][j] = -slope * std::abs(static_cast<double>(i) - static_cast<double>(j));
  }
  const Mat fused = mha(video, tokens, w.cross, heads, bias);
  const Mat h = layer_norm(plus(fused, mha(fused, fused, w.self_attention, heads)), w.norm1);
  return layer_norm(plus(h, ffn(h, w.ffn)), w.norm2);
}

inline bool inside(const BBox& b, double x, double y) {
  return x >= b.x && x <= b.x + b.w && y >= b.y && y <= b.y + b.h;
}

inline Mat relation_expert(const std::vector<Tensor2>& patches, const std::vector<SceneGraph>& graphs,
                           const OreParams& w, PatchGrid grid) {
  const std::size_t d = w.null_entity.cols();
  Mat tokens(graphs.size());
  for (std::size_t f = 0; f < graphs.size(); ++f) {
    const SceneGraph& g = graphs[f];
    if (g.entities.empty()) {
      tokens[f] = from(w.null_entity)[0];
      continue;
    }
    const std::size_t m = g.entities.size();
    Mat nodes(m, std::vector<double>(d, 0.0));
    for (std::size_t e = 0; e < m; ++e) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < grid.count(); ++i) {
        const double px = (static_cast<double>(i % grid.cols) + 0.5) / grid.cols;
        const double py = (static_cast<double>(i / grid.cols) + 0.5) / grid.rows;
        // Only patches inside this entity's box survive the mask and count.
        if (!inside(g.entities[e].box, px, py)) continue;
        for (std::size_t c = 0; c < d; ++c) nodes[e][c] += patches[f](i, c);
        ++count;
      }
      for (std::size_t c = 0; c < d; ++c) {
        if (count > 0) nodes[e][c] /= static_cast<double>(count);
        nodes[e][c] += w.category_embedding(g.entities[e].category, c);
      }
    }
    Mat adj(m, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < m; ++i) adj[i][i] = 1.0;
    for (const auto& r : g.relations) adj[r.subject][r.object] = adj[r.object][r.subject] = 1.0;
    std::vector<double> deg(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) deg[i] += adj[i][j];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) adj[i][j] /= std::sqrt(deg[i] * deg[j]);
    for (const auto& layer : w.layers) nodes = relu(mul(mul(adj, nodes), from(layer)));
    tokens[f].assign(d, 0.0);
    for (const auto& row : nodes)
      for (std::size_t c = 0; c < d; ++c) tokens[f][c] += row[c] / static_cast<double>(m);
  }
  return ffn(tokens, w.output);
}

struct Forward {
  std::vector<double> probabilities;
  Mat cause_logits;
  Mat route;
};

inline Forward model(const ModelParams& w, const SyntheticVideo& video, const ModelConfig& cfg) {
  const Mat x = from(video.coarse_frames);
  const std::size_t n = x.size();
  const Mat coarse = ffn(x, w.cve.ffn);
  Mat route = ffn(x, w.router.ffn);
  for (auto& row : route) row = softmax(row);

  Forward out;
  Mat fused;
  if (cfg.variant == Variant::no_upe) {
    fused = coarse;
  } else {
    const Mat pose = pose_expert(x, video.poses, w.hpe, cfg.experts.heads,
                                 cfg.experts.temporal_slope);
    std::vector<Tensor2> patches(n);
    for (std::size_t f = 0; f < n; ++f)
      if (!video.scenes[f].entities.empty()) patches[f] = frame_patches(video, f, cfg.experts.grid);
    const Mat rel = relation_expert(patches, video.scenes, w.ore, cfg.experts.grid);
    Mat bg = from(video.background);
    for (std::size_t f = 0; f < n; ++f)
      if (!video.background_present[f]) bg[f] = from(w.vbe.null_background)[0];
    const Mat back = ffn(bg, w.vbe.ffn);
    fused = coarse;
    for (std::size_t t = 0; t < n; ++t) {
      const double gate = *std::max_element(route[t].begin(), route[t].end());
      for (std::size_t c = 0; c < fused[t].size(); ++c)
        fused[t][c] = route[t][0] * pose[t][c] + route[t][1] * rel[t][c] +
                      route[t][2] * back[t][c] + (1.0 - gate) * coarse[t][c];
    }
  }
  auto dense = [&](const Mat& in, const Tensor2& weight, std::size_t adapter) {
    Mat y = mul(in, from(weight));
    if (cfg.lora.enabled) {
      const auto& a = w.head.adapters[adapter];
      const Mat delta = mul(mul(in, from(a.down)), from(a.up));
      for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y[i].size(); ++j) y[i][j] += cfg.lora.factor() * delta[i][j];
    }
    return y;
  };
  const Mat hidden = relu(plus_row(dense(fused, w.head.hidden.weight, 0), from(w.head.hidden.bias)));
  const Mat logits = plus_row(dense(hidden, w.head.output.weight, 1), from(w.head.output.bias));
  for (const auto& row : logits) {
    out.probabilities.push_back(1.0 / (1.0 + std::exp(-row[0])));
    out.cause_logits.emplace_back(row.begin() + 1, row.end());
  }
  out.route = route;
  return out;
}

}  // namespace uprm::reference
