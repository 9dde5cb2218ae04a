#include "uprm/grad_suite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "uprm/datagen.hpp"
#include "uprm/errors.hpp"
#include "uprm/experts.hpp"
#include "uprm/layers.hpp"
#include "uprm/model.hpp"
#include "uprm/params.hpp"
#include "uprm/rng.hpp"
#include "uprm/router.hpp"

namespace uprm {
namespace {

constexpr std::uint64_t kSuiteKey = 0x6772616473756974ULL;

Tensor2 randn(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor2 out(r, c);
  for (auto& x : out.values()) x = n(rng);
  return out;
}

// Weighted sum with fixed random coefficients, so every output entry
// reaches the scalar with a different weight.
Var project(Tape& t, Var out, const Tensor2& coeffs) {
  return sum_all(t, hadamard(t, out, t.constant(coeffs)));
}

Tensor2 coeffs_like(const Tensor2& shape, std::mt19937_64& rng) {
  return randn(shape.rows(), shape.cols(), rng);
}

GradCheckReport softmax_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 1);
  std::uniform_real_distribution<double> temp(0.5, 2.0);
  const double temperature = temp(rng);
  const Tensor2 x = randn(3, 4, rng, 1.5);
  const Tensor2 c = coeffs_like(x, rng);
  const std::vector<Tensor2> in{x};
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        return project(t, softmax_rows(t, v[0], temperature), c);
      },
      in, o);
}

GradCheckReport layer_norm_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 2);
  const Tensor2 x = randn(3, 5, rng);
  const Tensor2 gamma = randn(1, 5, rng);
  const Tensor2 beta = randn(1, 5, rng);
  const Tensor2 c = coeffs_like(x, rng);
  const std::vector<Tensor2> in{x, gamma, beta};
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        return project(t, layer_norm_rows(t, v[0], v[1], v[2]), c);
      },
      in, o);
}

GradCheckReport attention_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 3);
  const Tensor2 query_src = randn(3, 4, rng);
  const Tensor2 kv_src = randn(5, 6, rng);
  const Tensor2 bias = randn(3, 5, rng);
  std::vector<Tensor2> in{query_src, kv_src, randn(4, 4, rng, 0.5), randn(6, 4, rng, 0.5),
                          randn(6, 4, rng, 0.5), randn(4, 4, rng, 0.5)};
  const Tensor2 c = randn(3, 4, rng);
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        const AttentionWeights<Var> w{v[2], v[3], v[4], v[5]};
        return project(t, multi_head_attention(t, v[0], v[1], w, 2, &bias), c);
      },
      in, o);
}

GradCheckReport ffn_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 4);
  std::vector<Tensor2> in{randn(3, 4, rng), randn(4, 6, rng), randn(1, 6, rng),
                          randn(6, 3, rng), randn(1, 3, rng)};
  const Tensor2 c = randn(3, 3, rng);
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        const FfnWeights<Var> w{v[1], v[2], v[3], v[4]};
        return project(t, ffn_forward(t, v[0], w), c);
      },
      in, o);
}

GradCheckReport pose_graph_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 5);
  const std::size_t p = 4;
  // Two skeletons stacked, as in a multi-frame call.
  auto edges = skeleton_edges();
  for (const auto& [a, b] : skeleton_edges()) edges.emplace_back(a + kJointCount, b + kJointCount);
  const SparseRows neighbors = neighbor_lists(2 * kJointCount, edges);
  std::vector<Tensor2> in{randn(2 * kJointCount, p, rng), randn(p, p, rng, 0.7),
                          randn(2 * p, p, rng, 0.7)};
  const Tensor2 c = randn(2 * kJointCount, p, rng);
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        return project(t, pose_graph_attention(t, v[0], neighbors, v[1], v[2]), c);
      },
      in, o);
}

GradCheckReport graph_transformer_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 6);
  const std::size_t n = 5;
  Tensor2 adjacency = Tensor2::identity(n);
  std::bernoulli_distribution edge(0.4);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (edge(rng)) adjacency(i, j) = adjacency(j, i) = 1.0;
    }
  }
  const SparseRows normalized = normalized_adjacency(adjacency);
  std::vector<Tensor2> in{randn(n, 4, rng), randn(4, 4, rng)};
  const Tensor2 c = randn(n, 4, rng);
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        return project(t, graph_transformer_layer(t, normalized, v[0], v[1]), c);
      },
      in, o);
}

GradCheckReport gated_combine_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 7);
  const std::size_t n = 4, d = 3;
  std::vector<Tensor2> in{randn(n, kFineExpertCount, rng, 1.5)};
  for (std::size_t i = 0; i <= kFineExpertCount; ++i) in.push_back(randn(n, d, rng));
  const Tensor2 c = randn(n, d, rng);
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        // Weights come from a softmax so they lie on the simplex.
        const Var w = softmax_rows(t, v[0]);
        return project(t, gated_combine(t, w, {v[1], v[2], v[3]}, v[4]), c);
      },
      in, o);
}

GradCheckReport tradeoff_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 8);
  std::vector<Tensor2> in{randn(5, kFineExpertCount, rng, 2.0), randn(5, 1, rng, 2.0)};
  return grad_check(
      [&](Tape& t, std::span<const Var> v) { return tradeoff_loss(t, v[0], v[1]); }, in, o);
}

GradCheckReport task_loss_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 9);
  const std::size_t n = 6, causes = 4;
  std::vector<double> labels(n);
  std::vector<std::size_t> targets(n);
  std::vector<bool> mask(n);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> cause(0, causes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = coin(rng);
    labels[i] = mask[i] ? 1.0 : 0.0;
    targets[i] = mask[i] ? cause(rng) : 0;
  }
  std::vector<Tensor2> in{randn(n, 1, rng, 2.0), randn(n, causes, rng, 2.0)};
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        return add(t, bce_with_logits(t, v[0], labels),
                   masked_cross_entropy(t, v[1], targets, mask));
      },
      in, o);
}

GradCheckReport lora_case(std::uint64_t seed, const GradCheckOptions& o) {
  auto rng = make_stream(seed, kSuiteKey, 10);
  LoraConfig cfg;
  cfg.enabled = true;
  cfg.rank = 2;
  cfg.scale = 4.0;
  cfg.dropout = 0.25;
  const std::size_t n = 3, in_dim = 5, out_dim = 4;
  Tensor2 mask(n, in_dim);
  std::bernoulli_distribution keep(1.0 - cfg.dropout);
  for (auto& m : mask.values()) m = keep(rng) ? 1.0 / (1.0 - cfg.dropout) : 0.0;
  // A non-zero up-projection so the down-projection receives gradient.
  std::vector<Tensor2> in{randn(n, in_dim, rng), randn(in_dim, out_dim, rng),
                          randn(in_dim, cfg.rank, rng, 0.5), randn(cfg.rank, out_dim, rng, 0.5)};
  const Tensor2 c = randn(n, out_dim, rng);
  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        const LoraWeights<Var> a{v[2], v[3]};
        return project(t, lora_apply(t, v[0], v[1], a, cfg, &mask), c);
      },
      in, o);
}

ModelConfig tiny_model_config() {
  ModelConfig m;
  m.experts.token_dim = 4;
  m.experts.pose_dim = 4;
  m.experts.heads = 2;
  m.experts.gtl_layers = 1;
  m.experts.ffn_hidden = 4;
  m.experts.grid = {2, 2};
  m.router_hidden = 4;
  m.head_hidden = 4;
  m.cause_count = 3;
  m.lora.enabled = true;
  m.lora.rank = 2;
  m.lora.scale = 4.0;
  return m;
}

// Distance of the instance from the nearest non-differentiable point:
// smallest |relu input| and smallest gap between the two largest gate
// weights in gated_combine.
double kink_margin(const Tape& t) {
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& e : t.entries()) {
    if (e.op == "relu") {
      for (double x : t.value(Var{e.inputs.front()}).values()) margin = std::min(margin, std::abs(x));
    } else if (e.op == "gated_combine") {
      const Tensor2& w = t.value(Var{e.inputs[e.inputs.size() - 2]});
      for (std::size_t r = 0; r < w.rows(); ++r) {
        std::vector<double> row(w.row(r).begin(), w.row(r).end());
        std::sort(row.rbegin(), row.rend());
        if (row.size() > 1) margin = std::min(margin, row[0] - row[1]);
      }
    }
  }
  return margin;
}

struct ModelInstance {
  PreparedVideo video;
  ModelParams params;
};

ModelInstance draw_model_instance(std::uint64_t seed, std::uint64_t attempt,
                                  const ModelConfig& config) {
  auto rng = make_stream(seed, kSuiteKey + attempt, 11);
  GenProfile profile;
  profile.token_dim = config.experts.token_dim;
  profile.frames_per_video = 2;
  profile.presence_block = 1;
  profile.pose_presence_rate = 0.75;
  profile.background_presence_rate = 0.75;
  profile.relation_presence_rate = 0.75;
  profile.cause_vocab_size = config.cause_count;
  profile.seed = rng();
  ModelInstance m{prepare_video(generate_video(profile, 0), config), init_model(config, rng())};
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> cause(0, config.cause_count - 1);
  for (std::size_t i = 0; i < m.video.labels.size(); ++i) {
    const bool threat = coin(rng);
    m.video.labels[i] = threat ? 1.0 : 0.0;
    m.video.threat_mask[i] = threat;
    m.video.causes[i] = threat ? cause(rng) : 0;
  }
  // Zero biases and zero adapter up-projections put relu inputs exactly on
  // the kink (a fully masked row gives pre-activation = bias = 0). Jitter
  // every weight so the instance is generic.
  walk("", [&](const std::string&, Tensor2& v) {
    for (auto& x : v.values()) x += std::normal_distribution<double>(0.0, 0.2)(rng);
  }, m.params);
  return m;
}

constexpr double kTradeoffWeight = 0.5;

GradCheckReport full_model_case(std::uint64_t seed, const GradCheckOptions& o) {
  const ModelConfig config = tiny_model_config();
  // Central differences are only an oracle away from kinks, so redraw the
  // instance until every relu input and gate gap clears the margin.
  constexpr double kMargin = 1e-3;
  ModelInstance inst;
  for (std::uint64_t attempt = 0;; ++attempt) {
    inst = draw_model_instance(seed, attempt, config);
    Tape t;
    const auto w = bind(t, inst.params);
    training_loss(t, model_forward(t, w, inst.video, config), inst.video, config, kTradeoffWeight);
    if (kink_margin(t) >= kMargin) break;
  }
  std::vector<Tensor2> in;
  walk("", [&](const std::string&, const Tensor2& v) { in.push_back(v); }, inst.params);

  return grad_check(
      [&](Tape& t, std::span<const Var> v) {
        ModelWeights<Var> w;
        std::size_t k = 0;
        walk("", [&](const std::string&, const Tensor2&, Var& var) { var = v[k++]; }, inst.params,
             w);
        const ForwardVars f = model_forward(t, w, inst.video, config);
        return training_loss(t, f, inst.video, config, kTradeoffWeight).total;
      },
      in, o);
}

std::string describe(const std::string& name, std::uint64_t seed, const CoordinateError& e) {
  std::ostringstream s;
  s << name << " seed " << seed << " input " << e.input << "[" << e.index << "]: analytic "
    << e.analytic << " numeric " << e.numeric << " rel " << e.rel_error;
  return s.str();
}

}  // namespace

const std::vector<GradCase>& grad_cases() {
  static const std::vector<GradCase> cases{
      {"softmax", softmax_case},
      {"layer_norm", layer_norm_case},
      {"attention", attention_case},
      {"ffn", ffn_case},
      {"pose_graph_attention", pose_graph_case},
      {"graph_transformer_layer", graph_transformer_case},
      {"gated_combine", gated_combine_case},
      {"tradeoff_loss", tradeoff_case},
      {"task_loss", task_loss_case},
      {"lora_apply", lora_case},
      {"full_model", full_model_case},
  };
  return cases;
}

std::vector<GradSuiteRow> run_grad_suite(std::size_t seeds, const GradCheckOptions& options,
                                         const std::vector<std::string>& only,
                                         std::uint64_t first_seed) {
  const auto& cases = grad_cases();
  for (const auto& name : only) {
    if (std::none_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.name == name; }))
      throw ConfigError("unknown gradient check '" + name + "'");
  }
  std::vector<GradSuiteRow> rows;
  for (const auto& c : cases) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    GradSuiteRow row;
    row.name = c.name;
    for (std::uint64_t s = first_seed; s < first_seed + seeds; ++s) {
      const GradCheckReport r = c.run(s, options);
      ++row.seeds;
      row.coordinates += r.coordinates;
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      row.max_abs_error = std::max(row.max_abs_error, r.max_abs_error);
      if (r.passed) {
        ++row.passed_seeds;
      } else if (row.first_failure.empty()) {
        row.first_failure = describe(c.name, s, r.failures.front());
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace uprm
