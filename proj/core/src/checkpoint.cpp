#include "uprm/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "uprm/errors.hpp"
#include "uprm/params.hpp"

namespace uprm {
namespace {

using nlohmann::json;

json dims_json(const ModelConfig& c) {
  const ExpertDims& e = c.experts;
  return {{"token_dim", e.token_dim},
          {"pose_dim", e.pose_dim},
          {"heads", e.heads},
          {"gtl_layers", e.gtl_layers},
          {"ffn_hidden", e.ffn_hidden},
          {"grid_rows", e.grid.rows},
          {"grid_cols", e.grid.cols},
          {"temporal_slope", e.temporal_slope},
          {"router_hidden", c.router_hidden},
          {"head_hidden", c.head_hidden},
          {"cause_count", c.cause_count},
          {"variant", std::string(variant_name(c.variant))},
          {"lora",
           {{"enabled", c.lora.enabled},
            {"rank", c.lora.rank},
            {"scale", c.lora.scale},
            {"dropout", c.lora.dropout}}}};
}

ModelConfig dims_from(const json& j) {
  ModelConfig c;
  ExpertDims& e = c.experts;
  j.at("token_dim").get_to(e.token_dim);
  j.at("pose_dim").get_to(e.pose_dim);
  j.at("heads").get_to(e.heads);
  j.at("gtl_layers").get_to(e.gtl_layers);
  j.at("ffn_hidden").get_to(e.ffn_hidden);
  j.at("grid_rows").get_to(e.grid.rows);
  j.at("grid_cols").get_to(e.grid.cols);
  j.at("temporal_slope").get_to(e.temporal_slope);
  j.at("router_hidden").get_to(c.router_hidden);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("cause_count").get_to(c.cause_count);
  c.variant = parse_variant(j.at("variant").get<std::string>());
  const json& l = j.at("lora");
  l.at("enabled").get_to(c.lora.enabled);
  l.at("rank").get_to(c.lora.rank);
  l.at("scale").get_to(c.lora.scale);
  l.at("dropout").get_to(c.lora.dropout);
  return c;
}

void append_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const ModelConfig& config, std::uint64_t seed) {
  check_model(params, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  const json header{{"format", "uprm-ckpt"},
                    {"version", kCheckpointVersion},
                    {"dims", dims_json(config)},
                    {"seed", seed}};
  out << header.dump() << '\n';
  std::string line;
  walk(
      "",
      [&](const std::string& name, const Tensor2& v) {
        out << "param " << name << ' ' << v.rows() << ' ' << v.cols() << '\n';
        line.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (i) line.push_back(' ');
          append_double(line, v[i]);
        }
        out << line << '\n';
      },
      params);
  if (!out.flush()) throw DataError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError(1, "missing checkpoint header");
  Checkpoint ck;
  try {
    const json header = json::parse(line);
    if (header.at("format").get<std::string>() != "uprm-ckpt") {
      throw FormatError(path.string() + ": not a uprm-ckpt checkpoint");
    }
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) +
                        ", expected " + std::to_string(kCheckpointVersion));
    }
    ck.config = dims_from(header.at("dims"));
    header.at("seed").get_to(ck.seed);
  } catch (const json::exception& e) {
    throw ParseError(1, std::string("malformed checkpoint header: ") + e.what());
  }
  ck.config.validate();

  std::map<std::string, Tensor2> blocks;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream head(line);
    std::string tag, name;
    std::size_t rows = 0, cols = 0;
    if (!(head >> tag >> name >> rows >> cols) || tag != "param") {
      throw ParseError(lineno, "expected 'param <name> <rows> <cols>'");
    }
    if (!std::getline(in, line)) throw ParseError(lineno + 1, "missing values for " + name);
    ++lineno;
    Tensor2 t(rows, cols);
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (std::size_t i = 0; i < t.size(); ++i) {
      while (p < end && *p == ' ') ++p;
      const auto res = std::from_chars(p, end, t[i]);
      if (res.ec != std::errc()) {
        throw ParseError(lineno, "bad value " + std::to_string(i) + " of " + name);
      }
      p = res.ptr;
    }
    while (p < end && *p == ' ') ++p;
    if (p != end) throw ParseError(lineno, "too many values for " + name);
    if (!blocks.emplace(name, std::move(t)).second) {
      throw ParseError(lineno, "duplicate parameter " + name);
    }
  }

  ck.params = init_model(ck.config, 0);
  walk(
      "",
      [&](const std::string& name, Tensor2& v) {
        const auto it = blocks.find(name);
        if (it == blocks.end()) throw DataError(path.string() + ": missing parameter " + name);
        if (!it->second.same_shape(v)) {
          throw ConfigError("parameter " + name + " is " + it->second.shape_string() +
                            ", dims imply " + v.shape_string());
        }
        v = std::move(it->second);
        blocks.erase(it);
      },
      ck.params);
  if (!blocks.empty()) {
    throw DataError(path.string() + ": unknown parameter " + blocks.begin()->first);
  }
  return ck;
}

}  // namespace uprm
