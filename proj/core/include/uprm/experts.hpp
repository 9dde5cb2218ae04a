#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "uprm/layers.hpp"
#include "uprm/params.hpp"
#include "uprm/tape.hpp"
#include "uprm/tensor.hpp"

namespace uprm {

inline constexpr std::size_t kJointCount = 17;
inline constexpr std::size_t kEntityCategoryCount = 10;
inline constexpr std::size_t kRelationPredicateCount = 6;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Joint coordinates of one person, normalised to the unit square.
using JointCoords = std::array<Point2, kJointCount>;
/// One entry per frame; empty when no person is visible.
using PoseGraphSequence = std::vector<std::optional<JointCoords>>;

/// COCO keypoint skeleton (0-based joint ids, undirected).
const std::vector<std::pair<std::size_t, std::size_t>>& skeleton_edges();

/// Graph with per-node features. `edges` are undirected; self-loops are
/// implied and need not be listed.
struct PoseGraph {
  Tensor2 features;  // nodes × feature dim
  std::vector<std::pair<std::size_t, std::size_t>> edges;

  std::size_t node_count() const noexcept { return features.rows(); }
};

/// Centres the skeleton on its joint centroid and divides by its larger
/// side, so features describe body configuration rather than placement.
/// A skeleton collapsed to a point is only centred.
JointCoords normalize_pose(const JointCoords& joints);

/// Skeleton topology with the raw (x, y) coordinates as 2-d node features.
PoseGraph make_pose_graph(const JointCoords& joints);

/// Neighbour lists with self-loops for `nodes` nodes, symmetric, sorted.
SparseRows neighbor_lists(std::size_t nodes,
                          const std::vector<std::pair<std::size_t, std::size_t>>& edges);

struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool contains(double px, double py) const noexcept {
    return px >= x && px <= x + w && py >= y && py <= y + h;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Entity {
  std::size_t category = 0;
  BBox box;
  friend bool operator==(const Entity&, const Entity&) = default;
};

/// Directed (subject, predicate, object) triple over entity indices.
struct Relation {
  std::size_t subject = 0;
  std::size_t predicate = 0;
  std::size_t object = 0;
  friend bool operator==(const Relation&, const Relation&) = default;
};

struct SceneGraph {
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

/// Throws DataError if a box leaves the unit square, has non-positive size,
/// or a relation refers to a missing entity. `frame` is used in messages.
void validate_scene(const SceneGraph& g, std::size_t frame);

struct PatchGrid {
  std::size_t rows = 4;
  std::size_t cols = 4;
  std::size_t count() const noexcept { return rows * cols; }
};

/// Centre of patch `index` (row-major) in normalised frame coordinates.
Point2 patch_center(std::size_t index, PatchGrid grid);

/// Keeps a patch iff its centre lies inside at least one entity box;
/// zeroes it otherwise.
Tensor2 mask_video_tokens(const Tensor2& frame_patches, const SceneGraph& graph, PatchGrid grid);

/// Symmetric 0/1 adjacency of the relation graph with self-loops.
Tensor2 relation_adjacency(const SceneGraph& graph);

/// D^{-1/2} C D^{-1/2}. Requires a square symmetric 0/1 matrix with unit
/// diagonal.
SparseRows normalized_adjacency(const Tensor2& adjacency);

struct ExpertDims {
  std::size_t token_dim = 32;
  std::size_t pose_dim = 16;
  std::size_t heads = 4;
  std::size_t gtl_layers = 2;
  std::size_t ffn_hidden = 64;
  PatchGrid grid{};
  /// Slope of the -slope·|t - s| score bias in the pose cross-attention.
  /// Zero gives plain global attention.
  double temporal_slope = 1.0;
};

/// bias(t, s) = -slope·|t - s| for an n × n score matrix.
Tensor2 temporal_bias(std::size_t n, double slope);

template <class T>
struct HpeWeights {
  T joint_embedding;  // 17 × p
  T lift;             // 2 × p
  T node_attention;   // p × p, the shared projection in the edge scores
  T node_update;      // 2p × p, applied to [aggregated, own]
  T null_pose;        // 1 × p
  AttentionWeights<T> cross;
  AttentionWeights<T> self_attention;
  LayerNormWeights<T> norm1;
  LayerNormWeights<T> norm2;
  FfnWeights<T> ffn;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("joint_embedding", s.joint_embedding...);
    f("lift", s.lift...);
    f("node_attention", s.node_attention...);
    f("node_update", s.node_update...);
    f("null_pose", s.null_pose...);
    f("cross", s.cross...);
    f("self_attention", s.self_attention...);
    f("norm1", s.norm1...);
    f("norm2", s.norm2...);
    f("ffn", s.ffn...);
  }
};
using HpeParams = HpeWeights<Tensor2>;

template <class T>
struct OreWeights {
  T category_embedding;  // categories × d
  std::vector<T> layers;  // L matrices, d × d
  T null_entity;          // 1 × d
  FfnWeights<T> output;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("category_embedding", s.category_embedding...);
    f("layers", s.layers...);
    f("null_entity", s.null_entity...);
    f("output", s.output...);
  }
};
using OreParams = OreWeights<Tensor2>;

template <class T>
struct VbeWeights {
  FfnWeights<T> ffn;
  T null_background;  // 1 × d

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("ffn", s.ffn...);
    f("null_background", s.null_background...);
  }
};
using VbeParams = VbeWeights<Tensor2>;

template <class T>
struct CveWeights {
  FfnWeights<T> ffn;

  template <class F, class... S>
  static void fields(F&& f, S&... s) {
    f("ffn", s.ffn...);
  }
};
using CveParams = CveWeights<Tensor2>;

HpeParams make_hpe(const ExpertDims& dims, std::mt19937_64& rng);
OreParams make_ore(const ExpertDims& dims, std::mt19937_64& rng);
VbeParams make_vbe(const ExpertDims& dims, std::mt19937_64& rng);
CveParams make_cve(const ExpertDims& dims, std::mt19937_64& rng);

// Tape forms. Stacked node features of several graphs share one call; the
// neighbour lists are block-diagonal.

/// Edge attention over neighbourhoods followed by the node update
/// relu([aggregated, own]·node_update).
Var pose_graph_attention(Tape& t, Var features, const SparseRows& neighbors, Var node_attention,
                         Var node_update);

Var pose_expert_forward(Tape& t, Var video, const PoseGraphSequence& poses,
                        const HpeWeights<Var>& w, std::size_t heads, double temporal_slope = 0.0);

/// relu(normalized · f · w).
Var graph_transformer_layer(Tape& t, const SparseRows& normalized, Var f, Var w);

/// Per-frame inputs for the relation expert that do not depend on
/// parameters. Built once per video.
struct RelationInputs {
  std::size_t frames = 0;
  /// Stacked masked-patch means, one row per entity across frames.
  Tensor2 node_patch_means;
  std::vector<std::size_t> node_categories;
  /// Block-diagonal normalised adjacency over all entity nodes.
  SparseRows adjacency;
  /// Node offsets of frames that have entities.
  std::vector<std::size_t> segment_offsets;
  /// Per frame: row of the pooled token, or the null slot.
  std::vector<std::size_t> frame_slot;
};

RelationInputs prepare_relation_inputs(const std::vector<Tensor2>& frame_patches,
                                       const std::vector<SceneGraph>& graphs, PatchGrid grid,
                                       std::size_t token_dim);

Var relation_expert_forward(Tape& t, const RelationInputs& in, const OreWeights<Var>& w);

/// Rows flagged absent in `present` are replaced by the null background
/// token before the FFN. An empty `present` marks every row present.
Var background_expert_forward(Tape& t, Var background, const std::vector<std::uint8_t>& present,
                              const VbeWeights<Var>& w);
Var coarse_expert_forward(Tape& t, Var frames, const CveWeights<Var>& w);

// Value forms.

PoseGraph pose_graph_attention(const PoseGraph& g, const HpeParams& params);
Tensor2 pose_expert_forward(const Tensor2& video, const PoseGraphSequence& poses,
                            const HpeParams& params, std::size_t heads,
                            double temporal_slope = 0.0);
Tensor2 graph_transformer_layer(const Tensor2& f, const Tensor2& adjacency, const Tensor2& w);
Tensor2 relation_expert_forward(const std::vector<Tensor2>& frame_patches,
                                const std::vector<SceneGraph>& graphs, const OreParams& params,
                                PatchGrid grid);
Tensor2 background_expert_forward(const Tensor2& background,
                                  const std::vector<std::uint8_t>& present,
                                  const VbeParams& params);
Tensor2 coarse_expert_forward(const Tensor2& frames, const CveParams& params);

}  // namespace uprm
