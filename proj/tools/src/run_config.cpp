#include "run_config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "uprm/errors.hpp"
#include "uprm/grad_suite.hpp"
#include "uprm/metrics.hpp"
#include "uprm/optim.hpp"
#include "uprm/tape.hpp"

namespace uprm::cli {
namespace {

namespace pt = boost::property_tree;

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string item; is >> item;) out.push_back(item);
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& fmt) {
  std::string out;
  for (const auto& x : items) {
    if (!out.empty()) out += ", ";
    out += fmt(x);
  }
  return out;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::heldout: return "heldout";
    case Split::train: return "train";
    case Split::all: return "all";
  }
  return "heldout";
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field size_field(T RunConfig::*outer, std::size_t T::*member) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) {
            (c.*outer).*member = static_cast<std::size_t>(parse_uint(k, v));
          },
          [=](const RunConfig& c) { return std::to_string((c.*outer).*member); }};
}

template <class T>
Field double_field(T RunConfig::*outer, double T::*member) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) {
            (c.*outer).*member = parse_double(k, v);
          },
          [=](const RunConfig& c) { return format_double((c.*outer).*member); }};
}

Field path_field(std::filesystem::path RunConfig::*member) {
  return {[=](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [=](const RunConfig& c) { return (c.*member).string(); }};
}

// Keys in the order they are echoed. profile.name is handled separately
// because it selects the base profile the other keys refine.
const std::vector<std::pair<std::string, Field>>& fields() {
  using R = RunConfig;
  static const std::vector<std::pair<std::string, Field>> table{
      {"run.seed",
       {[](R& c, const std::string& k, const std::string& v) { c.seed = parse_uint(k, v); },
        [](const R& c) { return std::to_string(c.seed); }}},
      {"run.train_fraction",
       {[](R& c, const std::string& k, const std::string& v) { c.train_fraction = parse_double(k, v); },
        [](const R& c) { return format_double(c.train_fraction); }}},

      {"profile.video_count", size_field(&R::profile, &GenProfile::video_count)},
      {"profile.frames_per_video", size_field(&R::profile, &GenProfile::frames_per_video)},
      {"profile.pose_presence_rate", double_field(&R::profile, &GenProfile::pose_presence_rate)},
      {"profile.background_presence_rate",
       double_field(&R::profile, &GenProfile::background_presence_rate)},
      {"profile.relation_presence_rate",
       double_field(&R::profile, &GenProfile::relation_presence_rate)},
      {"profile.threat_rate", double_field(&R::profile, &GenProfile::threat_rate)},
      {"profile.cause_vocab_size", size_field(&R::profile, &GenProfile::cause_vocab_size)},
      {"profile.token_dim", size_field(&R::profile, &GenProfile::token_dim)},
      {"profile.presence_block", size_field(&R::profile, &GenProfile::presence_block)},
      {"profile.coarse_signal", double_field(&R::profile, &GenProfile::coarse_signal)},
      {"profile.cause_signal", double_field(&R::profile, &GenProfile::cause_signal)},
      {"profile.fine_signal", double_field(&R::profile, &GenProfile::fine_signal)},
      {"profile.noise", double_field(&R::profile, &GenProfile::noise)},

      {"model.d",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.token_dim = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.token_dim); }}},
      {"model.p",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.pose_dim = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.pose_dim); }}},
      {"model.heads",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.heads = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.heads); }}},
      {"model.layers",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.gtl_layers = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.gtl_layers); }}},
      {"model.ffn_hidden",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.ffn_hidden = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.ffn_hidden); }}},
      {"model.grid_rows",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.grid.rows = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.grid.rows); }}},
      {"model.grid_cols",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.grid.cols = parse_uint(k, v);
        },
        [](const R& c) { return std::to_string(c.model.experts.grid.cols); }}},
      {"model.temporal_slope",
       {[](R& c, const std::string& k, const std::string& v) {
          c.model.experts.temporal_slope = parse_double(k, v);
        },
        [](const R& c) { return format_double(c.model.experts.temporal_slope); }}},
      {"model.router_hidden", size_field(&R::model, &ModelConfig::router_hidden)},
      {"model.head_hidden", size_field(&R::model, &ModelConfig::head_hidden)},
      {"model.cause_count", size_field(&R::model, &ModelConfig::cause_count)},
      {"model.variant",
       {[](R& c, const std::string&, const std::string& v) { c.model.variant = parse_variant(v); },
        [](const R& c) { return std::string(variant_name(c.model.variant)); }}},

      {"optim.lr",
       {[](R& c, const std::string& k, const std::string& v) { c.train.optim.lr = parse_double(k, v); },
        [](const R& c) { return format_double(c.train.optim.lr); }}},
      {"optim.finetune_lr",
       {[](R& c, const std::string& k, const std::string& v) { c.finetune_lr = parse_bool(k, v); },
        [](const R& c) { return std::string(c.finetune_lr ? "true" : "false"); }}},
      {"optim.beta1",
       {[](R& c, const std::string& k, const std::string& v) { c.train.optim.beta1 = parse_double(k, v); },
        [](const R& c) { return format_double(c.train.optim.beta1); }}},
      {"optim.beta2",
       {[](R& c, const std::string& k, const std::string& v) { c.train.optim.beta2 = parse_double(k, v); },
        [](const R& c) { return format_double(c.train.optim.beta2); }}},
      {"optim.eps",
       {[](R& c, const std::string& k, const std::string& v) { c.train.optim.eps = parse_double(k, v); },
        [](const R& c) { return format_double(c.train.optim.eps); }}},
      {"optim.weight_decay",
       {[](R& c, const std::string& k, const std::string& v) {
          c.train.optim.weight_decay = parse_double(k, v);
        },
        [](const R& c) { return format_double(c.train.optim.weight_decay); }}},
      {"optim.warmup_ratio",
       {[](R& c, const std::string& k, const std::string& v) {
          c.train.optim.warmup_ratio = parse_double(k, v);
        },
        [](const R& c) { return format_double(c.train.optim.warmup_ratio); }}},
      {"optim.batch_size", size_field(&R::train, &TrainConfig::batch_size)},
      {"optim.epochs", size_field(&R::train, &TrainConfig::epochs)},
      {"optim.alpha", double_field(&R::train, &TrainConfig::alpha)},

      {"adapter.enabled",
       {[](R& c, const std::string& k, const std::string& v) { c.model.lora.enabled = parse_bool(k, v); },
        [](const R& c) { return std::string(c.model.lora.enabled ? "true" : "false"); }}},
      {"adapter.rank",
       {[](R& c, const std::string& k, const std::string& v) { c.model.lora.rank = parse_uint(k, v); },
        [](const R& c) { return std::to_string(c.model.lora.rank); }}},
      {"adapter.scale",
       {[](R& c, const std::string& k, const std::string& v) { c.model.lora.scale = parse_double(k, v); },
        [](const R& c) { return format_double(c.model.lora.scale); }}},
      {"adapter.dropout",
       {[](R& c, const std::string& k, const std::string& v) { c.model.lora.dropout = parse_double(k, v); },
        [](const R& c) { return format_double(c.model.lora.dropout); }}},

      {"eval.threshold",
       {[](R& c, const std::string& k, const std::string& v) { c.threshold = parse_double(k, v); },
        [](const R& c) { return format_double(c.threshold); }}},
      {"eval.tiou",
       {[](R& c, const std::string& k, const std::string& v) {
          c.tiou.clear();
          for (const auto& item : split_list(v)) c.tiou.push_back(parse_double(k, item));
        },
        [](const R& c) { return join(c.tiou, format_double); }}},
      {"eval.split",
       {[](R& c, const std::string& k, const std::string& v) {
          if (v == "heldout") c.eval_split = Split::heldout;
          else if (v == "train") c.eval_split = Split::train;
          else if (v == "all") c.eval_split = Split::all;
          else throw ConfigError(k + ": expected heldout, train or all, got '" + v + "'");
        },
        [](const R& c) { return split_name(c.eval_split); }}},

      {"ablate.variants",
       {[](R& c, const std::string&, const std::string& v) { c.ablate_variants = split_list(v); },
        [](const R& c) { return join(c.ablate_variants, [](const std::string& s) { return s; }); }}},
      {"ablate.seeds",
       {[](R& c, const std::string& k, const std::string& v) {
          c.ablate_seeds.clear();
          for (const auto& item : split_list(v)) c.ablate_seeds.push_back(parse_uint(k, item));
        },
        [](const R& c) {
          return join(c.ablate_seeds, [](std::uint64_t s) { return std::to_string(s); });
        }}},

      {"grad.seeds",
       {[](R& c, const std::string& k, const std::string& v) { c.grad_seeds = parse_uint(k, v); },
        [](const R& c) { return std::to_string(c.grad_seeds); }}},
      {"grad.cases",
       {[](R& c, const std::string&, const std::string& v) { c.grad_cases = split_list(v); },
        [](const R& c) { return join(c.grad_cases, [](const std::string& s) { return s; }); }}},
      {"grad.inject_fault",
       {[](R& c, const std::string&, const std::string& v) { c.inject_fault = v; },
        [](const R& c) { return c.inject_fault; }}},

      {"paths.data", path_field(&R::data)},
      {"paths.ckpt", path_field(&R::ckpt)},
      {"paths.baseline_ckpt", path_field(&R::baseline_ckpt)},
      {"paths.out", path_field(&R::out)},
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, f] : fields()) {
    if (name == key) return &f;
  }
  return nullptr;
}

}  // namespace

std::vector<double> RunConfig::thresholds(const std::string& profile_name) const {
  if (!tiou.empty()) return tiou;
  return profile_name == "ucfc-like" ? ucfc_thresholds() : cuva_thresholds();
}

void RunConfig::validate() const {
  profile.validate();
  model.validate();
  train.validate();
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw ConfigError("run.train_fraction must lie in (0, 1]");
  }
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("eval.threshold must lie in [0, 1]");
  for (double t : tiou) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval.tiou entries must lie in (0, 1]");
  }
  if (model.cause_count < profile.cause_vocab_size) {
    throw ConfigError("model.cause_count " + std::to_string(model.cause_count) +
                      " is smaller than profile.cause_vocab_size " +
                      std::to_string(profile.cause_vocab_size));
  }
  if (ablate_variants.empty()) throw ConfigError("ablate.variants must not be empty");
  for (const auto& v : ablate_variants) {
    if (v != "no-ptr") parse_variant(v);
  }
  if (grad_seeds == 0) throw ConfigError("grad.seeds must be positive");
  for (const auto& name : grad_cases) {
    const auto& cases = uprm::grad_cases();
    if (std::none_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.name == name; })) {
      throw ConfigError("grad.cases: unknown case '" + name + "'");
    }
  }
  if (!inject_fault.empty()) {
    const auto& ops = primitive_ops();
    if (std::find(ops.begin(), ops.end(), inject_fault) == ops.end()) {
      throw ConfigError("grad.inject_fault: unknown op '" + inject_fault + "'");
    }
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const Overrides& overrides) {
  pt::ptree tree;
  if (file) {
    if (!std::filesystem::exists(*file)) {
      throw ConfigError("config file " + file->string() + " does not exist");
    }
    try {
      pt::read_ini(file->string(), tree);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError("config file " + file->string() + ": " + e.message() + " (line " +
                        std::to_string(e.line()) + ")");
    }
  }

  std::string profile_name = "cuva-like";
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) {
      throw ConfigError("config key '" + section + "' must sit inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const std::string text = value.get_value<std::string>();
      if (full == "profile.name") {
        profile_name = text;
      } else if (!find_field(full)) {
        throw ConfigError("unknown config key '" + full + "'");
      } else {
        entries.emplace_back(full, text);
      }
    }
  }
  if (overrides.profile) profile_name = *overrides.profile;

  RunConfig c;
  c.profile = builtin_profile(profile_name);
  for (const auto& [key, text] : entries) find_field(key)->set(c, key, text);

  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.alpha) c.train.alpha = *overrides.alpha;
  if (overrides.threshold) c.threshold = *overrides.threshold;
  if (overrides.inject_fault) c.inject_fault = *overrides.inject_fault;
  if (overrides.data) c.data = *overrides.data;
  if (overrides.ckpt) c.ckpt = *overrides.ckpt;
  if (overrides.baseline_ckpt) c.baseline_ckpt = *overrides.baseline_ckpt;
  if (overrides.out) c.out = *overrides.out;
  if (overrides.finetune_lr) c.finetune_lr = true;
  if (c.finetune_lr) c.train.optim.lr = kFineTuneLearningRate;

  c.profile.seed = c.seed;
  c.train.seed = c.seed;
  c.validate();
  return c;
}

void write_run_config(std::ostream& os, const RunConfig& config) {
  std::string section;
  for (const auto& [name, f] : fields()) {
    const auto dot = name.find('.');
    const std::string s = name.substr(0, dot);
    if (s != section) {
      if (!section.empty()) os << '\n';
      os << '[' << s << "]\n";
      if (s == "profile") os << "name = " << config.profile.name << '\n';
      section = s;
    }
    os << name.substr(dot + 1) << " = " << f.get(config) << '\n';
  }
}

}  // namespace uprm::cli
