#include "uprm/experts.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "uprm/errors.hpp"

namespace uprm {

const std::vector<std::pair<std::size_t, std::size_t>>& skeleton_edges() {
  static const std::vector<std::pair<std::size_t, std::size_t>> edges = {
      {15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12},
      {5, 6},   {5, 7},   {6, 8},   {7, 9},   {8, 10},  {1, 2},  {0, 1},
      {0, 2},   {1, 3},   {2, 4},   {3, 5},   {4, 6}};
  return edges;
}

PoseGraph make_pose_graph(const JointCoords& joints) {
  PoseGraph g;
  g.features = Tensor2(kJointCount, 2);
  for (std::size_t j = 0; j < kJointCount; ++j) {
    g.features(j, 0) = joints[j].x;
    g.features(j, 1) = joints[j].y;
  }
  g.edges = skeleton_edges();
  return g;
}

SparseRows neighbor_lists(std::size_t nodes,
                          const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  std::vector<std::vector<std::size_t>> adj(nodes);
  for (std::size_t i = 0; i < nodes; ++i) adj[i].push_back(i);
  for (const auto& [a, b] : edges) {
    if (a >= nodes || b >= nodes) {
      throw ContractError("edge (" + std::to_string(a) + ", " + std::to_string(b) +
                          ") outside a graph of " + std::to_string(nodes) + " nodes");
    }
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  SparseRows out;
  for (auto& row : adj) {
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
    out.columns.insert(out.columns.end(), row.begin(), row.end());
    out.offsets.push_back(out.columns.size());
  }
  return out;
}

void validate_scene(const SceneGraph& g, std::size_t frame) {
  constexpr double kSlack = 1e-12;
  const std::string where = "frame " + std::to_string(frame);
  for (std::size_t i = 0; i < g.entities.size(); ++i) {
    const Entity& e = g.entities[i];
    const BBox& b = e.box;
    if (!(b.w > 0.0) || !(b.h > 0.0) || b.x < 0.0 || b.y < 0.0 || b.x + b.w > 1.0 + kSlack ||
        b.y + b.h > 1.0 + kSlack) {
      throw DataError(where + ": entity " + std::to_string(i) + " box outside the unit square");
    }
    if (e.category >= kEntityCategoryCount) {
      throw DataError(where + ": entity " + std::to_string(i) + " has unknown category " +
                      std::to_string(e.category));
    }
  }
  for (const Relation& r : g.relations) {
    if (r.subject >= g.entities.size() || r.object >= g.entities.size()) {
      throw DataError(where + ": relation (" + std::to_string(r.subject) + ", " +
                      std::to_string(r.predicate) + ", " + std::to_string(r.object) +
                      ") references a missing entity");
    }
    if (r.predicate >= kRelationPredicateCount) {
      throw DataError(where + ": unknown relation predicate " + std::to_string(r.predicate));
    }
  }
}

Point2 patch_center(std::size_t index, PatchGrid grid) {
  const std::size_t r = index / grid.cols;
  const std::size_t c = index % grid.cols;
  return {(static_cast<double>(c) + 0.5) / static_cast<double>(grid.cols),
          (static_cast<double>(r) + 0.5) / static_cast<double>(grid.rows)};
}

Tensor2 mask_video_tokens(const Tensor2& frame_patches, const SceneGraph& graph, PatchGrid grid) {
  if (frame_patches.rows() != grid.count()) {
    throw ContractError("mask_video_tokens: " + std::to_string(frame_patches.rows()) +
                        " patches for a " + std::to_string(grid.rows) + "x" +
                        std::to_string(grid.cols) + " grid");
  }
  Tensor2 out(frame_patches.rows(), frame_patches.cols());
  for (std::size_t i = 0; i < frame_patches.rows(); ++i) {
    const Point2 c = patch_center(i, grid);
    const bool keep = std::any_of(graph.entities.begin(), graph.entities.end(),
                                  [&](const Entity& e) { return e.box.contains(c.x, c.y); });
    if (keep) std::copy(frame_patches.row(i).begin(), frame_patches.row(i).end(), out.row(i).begin());
  }
  return out;
}

Tensor2 relation_adjacency(const SceneGraph& graph) {
  const std::size_t n = graph.entities.size();
  Tensor2 c = Tensor2::identity(n);
  for (const Relation& r : graph.relations) {
    if (r.subject >= n || r.object >= n) {
      throw DataError("relation references a missing entity");
    }
    c(r.subject, r.object) = 1.0;
    c(r.object, r.subject) = 1.0;
  }
  return c;
}

SparseRows normalized_adjacency(const Tensor2& c) {
  const std::size_t n = c.rows();
  if (c.cols() != n) throw ContractError("adjacency must be square, got " + c.shape_string());
  std::vector<double> degree(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (c(i, i) != 1.0) {
      throw ContractError("adjacency diagonal entry " + std::to_string(i) + " is not 1");
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (c(i, j) != c(j, i)) throw ContractError("adjacency is not symmetric");
      if (c(i, j) != 0.0 && c(i, j) != 1.0) throw ContractError("adjacency entries must be 0/1");
      degree[i] += c(i, j);
    }
    if (degree[i] == 0.0) throw ContractError("node " + std::to_string(i) + " has zero degree");
  }
  SparseRows out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (c(i, j) == 0.0) continue;
      out.columns.push_back(j);
      out.values.push_back(1.0 / std::sqrt(degree[i] * degree[j]));
    }
    out.offsets.push_back(out.columns.size());
  }
  return out;
}

HpeParams make_hpe(const ExpertDims& dims, std::mt19937_64& rng) {
  const std::size_t d = dims.token_dim;
  const std::size_t p = dims.pose_dim;
  HpeParams h;
  h.joint_embedding = init_uniform(kJointCount, p, rng);
  h.lift = init_uniform(2, p, rng);
  h.node_attention = init_uniform(p, p, rng);
  h.node_update = init_uniform(2 * p, p, rng);
  h.null_pose = init_uniform(1, p, rng);
  h.cross = make_attention(d, p, d, rng);
  h.self_attention = make_attention(d, d, d, rng);
  h.norm1 = make_layer_norm(d);
  h.norm2 = make_layer_norm(d);
  h.ffn = make_ffn(d, dims.ffn_hidden, d, rng);
  return h;
}

OreParams make_ore(const ExpertDims& dims, std::mt19937_64& rng) {
  const std::size_t d = dims.token_dim;
  OreParams o;
  o.category_embedding = init_uniform(kEntityCategoryCount, d, rng);
  for (std::size_t l = 0; l < dims.gtl_layers; ++l) o.layers.push_back(init_uniform(d, d, rng));
  o.null_entity = init_uniform(1, d, rng);
  o.output = make_ffn(d, dims.ffn_hidden, d, rng);
  return o;
}

VbeParams make_vbe(const ExpertDims& dims, std::mt19937_64& rng) {
  VbeParams v;
  v.ffn = make_ffn(dims.token_dim, dims.ffn_hidden, dims.token_dim, rng);
  v.null_background = init_uniform(1, dims.token_dim, rng);
  return v;
}

CveParams make_cve(const ExpertDims& dims, std::mt19937_64& rng) {
  return {make_ffn(dims.token_dim, dims.ffn_hidden, dims.token_dim, rng)};
}

Var pose_graph_attention(Tape& t, Var features, const SparseRows& neighbors, Var node_attention,
                         Var node_update) {
  const Tensor2& f = t.value(features);
  const Tensor2& va = t.value(node_attention);
  if (f.cols() != va.rows()) {
    throw DimensionError("pose_graph_attention: features " + f.shape_string() +
                         " for attention matrix " + va.shape_string());
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(va.cols()));
  Var projected = matmul(t, features, node_attention);
  Var aggregated = neighbor_attention(t, projected, projected, features, neighbors, inv);
  return relu(t, matmul(t, concat_cols(t, {aggregated, features}), node_update));
}

namespace {

// Block-diagonal copy of the skeleton neighbourhoods for `graphs` graphs.
SparseRows stacked_skeleton(std::size_t graphs) {
  static const SparseRows one = neighbor_lists(kJointCount, skeleton_edges());
  SparseRows out;
  out.columns.reserve(one.columns.size() * graphs);
  out.offsets.reserve(kJointCount * graphs + 1);
  for (std::size_t g = 0; g < graphs; ++g) {
    const std::size_t base = g * kJointCount;
    for (std::size_t r = 0; r < kJointCount; ++r) {
      for (std::size_t i = one.offsets[r]; i < one.offsets[r + 1]; ++i)
        out.columns.push_back(base + one.columns[i]);
      out.offsets.push_back(out.columns.size());
    }
  }
  return out;
}

Var transformer_block(Tape& t, Var x, const HpeWeights<Var>& w, std::size_t heads) {
  Var attended = multi_head_attention(t, x, x, w.self_attention, heads);
  Var h = layer_norm_rows(t, add(t, x, attended), w.norm1.gamma, w.norm1.beta);
  Var ff = ffn_forward(t, h, w.ffn);
  return layer_norm_rows(t, add(t, h, ff), w.norm2.gamma, w.norm2.beta);
}

}  // namespace

JointCoords normalize_pose(const JointCoords& joints) {
  double cx = 0.0, cy = 0.0;
  double min_x = joints[0].x, max_x = joints[0].x, min_y = joints[0].y, max_y = joints[0].y;
  for (const Point2& j : joints) {
    cx += j.x;
    cy += j.y;
    min_x = std::min(min_x, j.x);
    max_x = std::max(max_x, j.x);
    min_y = std::min(min_y, j.y);
    max_y = std::max(max_y, j.y);
  }
  cx /= static_cast<double>(kJointCount);
  cy /= static_cast<double>(kJointCount);
  const double extent = std::max(max_x - min_x, max_y - min_y);
  const double inv = extent > 0.0 ? 1.0 / extent : 1.0;
  JointCoords out;
  for (std::size_t k = 0; k < kJointCount; ++k) {
    out[k] = {(joints[k].x - cx) * inv, (joints[k].y - cy) * inv};
  }
  return out;
}

Tensor2 temporal_bias(std::size_t n, double slope) {
  Tensor2 out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out(i, j) = -slope * std::abs(static_cast<double>(i) - static_cast<double>(j));
    }
  }
  return out;
}

Var pose_expert_forward(Tape& t, Var video, const PoseGraphSequence& poses,
                        const HpeWeights<Var>& w, std::size_t heads, double temporal_slope) {
  const std::size_t n = t.value(video).rows();
  if (poses.size() != n) {
    throw ContractError("pose_expert_forward: " + std::to_string(poses.size()) +
                        " pose frames for " + std::to_string(n) + " video tokens");
  }
  std::vector<std::size_t> present;
  for (std::size_t i = 0; i < n; ++i)
    if (poses[i]) present.push_back(i);

  const std::size_t k = present.size();
  std::vector<std::size_t> slot(n, k);
  Var sources = w.null_pose;
  if (k > 0) {
    const std::size_t m = k * kJointCount;
    Tensor2 coords(m, 2);
    std::vector<std::size_t> joint_ids(m);
    std::vector<std::size_t> offsets(k + 1);
    for (std::size_t s = 0; s < k; ++s) {
      const JointCoords joints = normalize_pose(*poses[present[s]]);
      for (std::size_t j = 0; j < kJointCount; ++j) {
        coords(s * kJointCount + j, 0) = joints[j].x;
        coords(s * kJointCount + j, 1) = joints[j].y;
        joint_ids[s * kJointCount + j] = j;
      }
      offsets[s + 1] = (s + 1) * kJointCount;
      slot[present[s]] = s;
    }
    Var lifted = add(t, matmul(t, t.constant(std::move(coords)), w.lift),
                     gather_rows(t, w.joint_embedding, std::move(joint_ids)));
    Var nodes = pose_graph_attention(t, lifted, stacked_skeleton(k), w.node_attention,
                                     w.node_update);
    Var pooled = segment_mean(t, nodes, std::move(offsets));
    sources = concat_rows(t, {pooled, w.null_pose});
  }
  Var pose_tokens = gather_rows(t, sources, std::move(slot));
  Var fused;
  if (temporal_slope != 0.0) {
    const Tensor2 bias = temporal_bias(n, temporal_slope);
    fused = multi_head_attention(t, video, pose_tokens, w.cross, heads, &bias);
  } else {
    fused = multi_head_attention(t, video, pose_tokens, w.cross, heads);
  }
  return transformer_block(t, fused, w, heads);
}

Var graph_transformer_layer(Tape& t, const SparseRows& normalized, Var f, Var w) {
  return relu(t, matmul(t, sparse_matmul(t, normalized, f), w));
}

RelationInputs prepare_relation_inputs(const std::vector<Tensor2>& frame_patches,
                                       const std::vector<SceneGraph>& graphs, PatchGrid grid,
                                       std::size_t token_dim) {
  if (frame_patches.size() != graphs.size()) {
    throw ContractError("relation expert: " + std::to_string(frame_patches.size()) +
                        " patch frames for " + std::to_string(graphs.size()) + " scene graphs");
  }
  RelationInputs in;
  in.frames = graphs.size();
  in.frame_slot.assign(in.frames, 0);
  in.segment_offsets.push_back(0);
  std::vector<double> means;
  std::size_t pooled = 0;
  std::vector<std::size_t> empty_frames;
  for (std::size_t f = 0; f < in.frames; ++f) {
    const SceneGraph& g = graphs[f];
    validate_scene(g, f);
    if (g.entities.empty()) {
      empty_frames.push_back(f);
      continue;
    }
    if (frame_patches[f].cols() != token_dim) {
      throw DimensionError("relation expert: frame " + std::to_string(f) + " patches " +
                           frame_patches[f].shape_string() + " for token dim " +
                           std::to_string(token_dim));
    }
    const Tensor2 masked = mask_video_tokens(frame_patches[f], g, grid);
    const std::size_t base = in.node_categories.size();
    for (const Entity& e : g.entities) {
      std::vector<double> mean(token_dim, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < masked.rows(); ++i) {
        const Point2 c = patch_center(i, grid);
        if (!e.box.contains(c.x, c.y)) continue;
        for (std::size_t j = 0; j < token_dim; ++j) mean[j] += masked(i, j);
        ++count;
      }
      if (count > 0)
        for (double& v : mean) v /= static_cast<double>(count);
      means.insert(means.end(), mean.begin(), mean.end());
      in.node_categories.push_back(e.category);
    }
    const SparseRows block = normalized_adjacency(relation_adjacency(g));
    for (std::size_t r = 0; r < block.rows(); ++r) {
      for (std::size_t i = block.offsets[r]; i < block.offsets[r + 1]; ++i) {
        in.adjacency.columns.push_back(base + block.columns[i]);
        in.adjacency.values.push_back(block.values[i]);
      }
      in.adjacency.offsets.push_back(in.adjacency.columns.size());
    }
    in.segment_offsets.push_back(in.node_categories.size());
    in.frame_slot[f] = pooled++;
  }
  for (std::size_t f : empty_frames) in.frame_slot[f] = pooled;
  in.node_patch_means = Tensor2(in.node_categories.size(), token_dim, std::move(means));
  return in;
}

Var relation_expert_forward(Tape& t, const RelationInputs& in, const OreWeights<Var>& w) {
  Var sources = w.null_entity;
  if (!in.node_categories.empty()) {
    Var nodes = add(t, t.constant(in.node_patch_means),
                    gather_rows(t, w.category_embedding, in.node_categories));
    for (Var layer : w.layers) nodes = graph_transformer_layer(t, in.adjacency, nodes, layer);
    Var pooled = segment_mean(t, nodes, in.segment_offsets);
    sources = concat_rows(t, {pooled, w.null_entity});
  }
  Var tokens = gather_rows(t, sources, in.frame_slot);
  return ffn_forward(t, tokens, w.output);
}

Var background_expert_forward(Tape& t, Var background, const std::vector<std::uint8_t>& present,
                              const VbeWeights<Var>& w) {
  const std::size_t n = t.value(background).rows();
  if (present.empty() || std::all_of(present.begin(), present.end(), [](auto p) { return p; })) {
    if (!present.empty() && present.size() != n) {
      throw ContractError("background expert: " + std::to_string(present.size()) +
                          " presence flags for " + std::to_string(n) + " rows");
    }
    return ffn_forward(t, background, w.ffn);
  }
  if (present.size() != n) {
    throw ContractError("background expert: " + std::to_string(present.size()) +
                        " presence flags for " + std::to_string(n) + " rows");
  }
  std::vector<std::size_t> slot(n);
  for (std::size_t i = 0; i < n; ++i) slot[i] = present[i] ? i : n;
  Var rows = gather_rows(t, concat_rows(t, {background, w.null_background}), std::move(slot));
  return ffn_forward(t, rows, w.ffn);
}

Var coarse_expert_forward(Tape& t, Var frames, const CveWeights<Var>& w) {
  return ffn_forward(t, frames, w.ffn);
}

PoseGraph pose_graph_attention(const PoseGraph& g, const HpeParams& params) {
  Tape t(false);
  Var out = pose_graph_attention(t, t.constant(g.features), neighbor_lists(g.node_count(), g.edges),
                                 t.constant(params.node_attention),
                                 t.constant(params.node_update));
  return PoseGraph{t.value(out), g.edges};
}

Tensor2 pose_expert_forward(const Tensor2& video, const PoseGraphSequence& poses,
                            const HpeParams& params, std::size_t heads, double temporal_slope) {
  Tape t(false);
  const auto w = bind(t, params);
  return t.value(pose_expert_forward(t, t.constant(video), poses, w, heads, temporal_slope));
}

Tensor2 graph_transformer_layer(const Tensor2& f, const Tensor2& adjacency, const Tensor2& w) {
  if (f.rows() != adjacency.rows()) {
    throw ContractError("graph_transformer_layer: " + std::to_string(f.rows()) +
                        " feature rows for adjacency " + adjacency.shape_string());
  }
  const SparseRows normalized = normalized_adjacency(adjacency);
  Tape t(false);
  return t.value(graph_transformer_layer(t, normalized, t.constant(f), t.constant(w)));
}

Tensor2 relation_expert_forward(const std::vector<Tensor2>& frame_patches,
                                const std::vector<SceneGraph>& graphs, const OreParams& params,
                                PatchGrid grid) {
  const RelationInputs in =
      prepare_relation_inputs(frame_patches, graphs, grid, params.null_entity.cols());
  Tape t(false);
  const auto w = bind(t, params);
  return t.value(relation_expert_forward(t, in, w));
}

Tensor2 background_expert_forward(const Tensor2& background,
                                  const std::vector<std::uint8_t>& present,
                                  const VbeParams& params) {
  check_ffn(params.ffn);
  Tape t(false);
  const auto w = bind(t, params);
  return t.value(background_expert_forward(t, t.constant(background), present, w));
}

Tensor2 coarse_expert_forward(const Tensor2& frames, const CveParams& params) {
  check_ffn(params.ffn);
  Tape t(false);
  const auto w = bind(t, params);
  return t.value(coarse_expert_forward(t, t.constant(frames), w));
}

}  // namespace uprm
