#include "uprm/dataset_io.hpp"

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "uprm/errors.hpp"

namespace uprm {
namespace {

using nlohmann::json;

json profile_json(const GenProfile& p) {
  return {{"name", p.name},
          {"video_count", p.video_count},
          {"frames_per_video", p.frames_per_video},
          {"pose_presence_rate", p.pose_presence_rate},
          {"background_presence_rate", p.background_presence_rate},
          {"relation_presence_rate", p.relation_presence_rate},
          {"threat_rate", p.threat_rate},
          {"cause_vocab_size", p.cause_vocab_size},
          {"seed", p.seed},
          {"token_dim", p.token_dim},
          {"presence_block", p.presence_block},
          {"coarse_signal", p.coarse_signal},
          {"cause_signal", p.cause_signal},
          {"fine_signal", p.fine_signal},
          {"noise", p.noise}};
}

GenProfile profile_from(const json& j) {
  GenProfile p;
  j.at("name").get_to(p.name);
  j.at("video_count").get_to(p.video_count);
  j.at("frames_per_video").get_to(p.frames_per_video);
  j.at("pose_presence_rate").get_to(p.pose_presence_rate);
  j.at("background_presence_rate").get_to(p.background_presence_rate);
  j.at("relation_presence_rate").get_to(p.relation_presence_rate);
  j.at("threat_rate").get_to(p.threat_rate);
  j.at("cause_vocab_size").get_to(p.cause_vocab_size);
  j.at("seed").get_to(p.seed);
  j.at("token_dim").get_to(p.token_dim);
  j.at("presence_block").get_to(p.presence_block);
  j.at("coarse_signal").get_to(p.coarse_signal);
  j.at("cause_signal").get_to(p.cause_signal);
  j.at("fine_signal").get_to(p.fine_signal);
  j.at("noise").get_to(p.noise);
  return p;
}

json matrix_json(const Tensor2& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Tensor2 matrix_from(const json& j, std::size_t rows, std::size_t cols, const char* what) {
  if (!j.is_array() || j.size() != rows) {
    throw DataError(std::string(what) + ": expected " + std::to_string(rows) + " rows");
  }
  Tensor2 m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const json& row = j[r];
    if (!row.is_array() || row.size() != cols) {
      throw DataError(std::string(what) + ": row " + std::to_string(r) + " is not " +
                      std::to_string(cols) + " wide");
    }
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = row[c].get<double>();
  }
  return m;
}

json video_json(const SyntheticVideo& v) {
  json poses = json::array();
  for (const auto& p : v.poses) {
    if (!p) {
      poses.push_back(nullptr);
      continue;
    }
    json coords = json::array();
    for (const Point2& q : *p) {
      coords.push_back(q.x);
      coords.push_back(q.y);
    }
    poses.push_back(std::move(coords));
  }
  json scenes = json::array();
  for (const SceneGraph& g : v.scenes) {
    json entities = json::array();
    for (const Entity& e : g.entities) {
      entities.push_back({e.category, e.box.x, e.box.y, e.box.w, e.box.h});
    }
    json relations = json::array();
    for (const Relation& r : g.relations) relations.push_back({r.subject, r.predicate, r.object});
    scenes.push_back({{"entities", std::move(entities)}, {"relations", std::move(relations)}});
  }
  json gt = json::array();
  for (const auto& g : v.ground_truth) gt.push_back({g.start, g.end, g.cause});
  return {{"id", v.id},
          {"frames", v.frame_count()},
          {"dim", v.coarse_frames.cols()},
          {"patch_seed", v.patch_seed},
          {"labels", v.per_frame_labels},
          {"ground_truth", std::move(gt)},
          {"coarse", matrix_json(v.coarse_frames)},
          {"background_present", v.background_present},
          {"background", matrix_json(v.background)},
          {"poses", std::move(poses)},
          {"scenes", std::move(scenes)}};
}

SyntheticVideo video_from(const json& j) {
  SyntheticVideo v;
  j.at("id").get_to(v.id);
  const auto n = j.at("frames").get<std::size_t>();
  const auto d = j.at("dim").get<std::size_t>();
  j.at("patch_seed").get_to(v.patch_seed);
  j.at("labels").get_to(v.per_frame_labels);
  for (const json& g : j.at("ground_truth")) {
    if (!g.is_array() || g.size() != 3) throw DataError("ground truth entries are [s, e, cause]");
    v.ground_truth.push_back({g[0].get<double>(), g[1].get<double>(), g[2].get<std::size_t>()});
  }
  v.coarse_frames = matrix_from(j.at("coarse"), n, d, "coarse");
  j.at("background_present").get_to(v.background_present);
  v.background = matrix_from(j.at("background"), n, d, "background");
  for (const json& p : j.at("poses")) {
    if (p.is_null()) {
      v.poses.emplace_back();
      continue;
    }
    if (!p.is_array() || p.size() != 2 * kJointCount) {
      throw DataError("pose entries hold " + std::to_string(2 * kJointCount) + " coordinates");
    }
    JointCoords c;
    for (std::size_t k = 0; k < kJointCount; ++k) {
      c[k] = {p[2 * k].get<double>(), p[2 * k + 1].get<double>()};
    }
    v.poses.emplace_back(c);
  }
  for (const json& s : j.at("scenes")) {
    SceneGraph g;
    for (const json& e : s.at("entities")) {
      if (!e.is_array() || e.size() != 5) throw DataError("entities are [category, x, y, w, h]");
      g.entities.push_back({e[0].get<std::size_t>(),
                            {e[1].get<double>(), e[2].get<double>(), e[3].get<double>(),
                             e[4].get<double>()}});
    }
    for (const json& r : s.at("relations")) {
      if (!r.is_array() || r.size() != 3) throw DataError("relations are [subject, predicate, object]");
      g.relations.push_back(
          {r[0].get<std::size_t>(), r[1].get<std::size_t>(), r[2].get<std::size_t>()});
    }
    v.scenes.push_back(std::move(g));
  }
  validate_video(v);
  return v;
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const GenProfile& profile,
                   std::span<const SyntheticVideo> videos) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  const json header{{"format", "uprm-ds"}, {"version", kDatasetVersion},
                    {"profile", profile_json(profile)}};
  out << header.dump() << '\n';
  for (const SyntheticVideo& v : videos) out << video_json(v).dump() << '\n';
  if (!out.flush()) throw DataError("failed writing " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(1, "missing dataset header");
  ++lineno;
  try {
    const json header = json::parse(line);
    if (header.at("format").get<std::string>() != "uprm-ds") {
      throw FormatError(path.string() + ": not a uprm-ds dataset");
    }
    const int version = header.at("version").get<int>();
    if (version != kDatasetVersion) {
      throw FormatError(path.string() + ": dataset version " + std::to_string(version) +
                        ", expected " + std::to_string(kDatasetVersion));
    }
    ds.profile = profile_from(header.at("profile"));
  } catch (const json::exception& e) {
    throw ParseError(lineno, std::string("malformed header: ") + e.what());
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      ds.videos.push_back(video_from(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(lineno, "malformed record (last good line " + std::to_string(lineno - 1) +
                                   "): " + e.what());
    } catch (const DataError& e) {
      throw ParseError(lineno, "invalid record (last good line " + std::to_string(lineno - 1) +
                                   "): " + e.what());
    }
  }
  return ds;
}

}  // namespace uprm
