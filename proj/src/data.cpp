#include "mcln/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "mcln/errors.hpp"

namespace mcln {

using nlohmann::json;

const char* split_name(Split s) { return s == Split::unique ? "unique" : "multiple"; }

Split parse_split(const std::string& name) {
  if (name == "unique") return Split::unique;
  if (name == "multiple") return Split::multiple;
  throw DataConsistencyError("unknown split '" + name + "'");
}

int color_token(int color) {
  if (color < 0 || color >= static_cast<int>(kColorNames.size())) throw VocabularyError("color id " + std::to_string(color));
  return kColorBase + color;
}

int shape_token(int shape) {
  if (shape < 0 || shape >= static_cast<int>(kShapeNames.size())) throw VocabularyError("shape id " + std::to_string(shape));
  return kShapeBase + shape;
}

int relation_token(Relation r) { return kRelationBase + static_cast<int>(r); }

std::string token_name(int token) {
  if (token < 0 || token >= kVocabularySize) throw VocabularyError("token id " + std::to_string(token));
  if (token < kShapeBase) return kColorNames[static_cast<std::size_t>(token - kColorBase)];
  if (token < kRelationBase) return kShapeNames[static_cast<std::size_t>(token - kShapeBase)];
  return kRelationNames[static_cast<std::size_t>(token - kRelationBase)];
}

int token_id(const std::string& name) {
  for (int t = 0; t < kVocabularySize; ++t) {
    if (token_name(t) == name) return t;
  }
  throw VocabularyError("unknown token '" + name + "'");
}

Vec3 class_color(int color) {
  static const std::array<Vec3, 6> table = {Vec3(0.9, 0.1, 0.1), Vec3(0.1, 0.8, 0.1), Vec3(0.1, 0.2, 0.9),
                                            Vec3(0.9, 0.9, 0.1), Vec3(0.6, 0.1, 0.8), Vec3(1.0, 0.55, 0.0)};
  return table.at(static_cast<std::size_t>(color));
}

Vec3 shape_template(int shape) {
  static const std::array<Vec3, 5> table = {Vec3(0.4, 0.4, 0.4), Vec3(0.25, 0.25, 0.8), Vec3(0.7, 0.7, 0.15),
                                            Vec3(0.8, 0.2, 0.2), Vec3(0.2, 0.8, 0.2)};
  return table.at(static_cast<std::size_t>(shape));
}

void SceneSpec::validate() const {
  if (min_objects < 1 || max_objects < min_objects) throw ConfigError("scene: object count range invalid");
  if (min_points_per_object < 1 || clutter_points < 0 || total_points < 1) {
    throw ConfigError("scene: point counts must be >= 1");
  }
  if ((total_points - clutter_points) / max_objects < min_points_per_object) {
    throw ConfigError("scene: total_points leaves fewer than min_points_per_object per object");
  }
  if (!(extent > 0.0)) throw ConfigError("scene: extent must be > 0");
  if (size_jitter < 0.0 || size_jitter >= 1.0) throw ConfigError("scene: size_jitter must be in [0,1)");
  if (multiple_fraction < 0.0 || multiple_fraction > 1.0) throw ConfigError("scene: multiple_fraction must be in [0,1]");
  if (!(grid_cell > 0.0)) throw ConfigError("scene: grid_cell must be > 0");
}

SceneSpec SceneSpec::from_config(const KeyValueFile& kv) {
  kv.require_known({"seed", "min_objects", "max_objects", "total_points", "min_points_per_object",
                    "clutter_points", "extent", "size_jitter", "color_noise", "gap", "multiple_fraction",
                    "grid_cell", "position_margin", "volume_ratio_margin", "distance_margin"});
  SceneSpec s;
  s.seed = static_cast<std::uint64_t>(kv.get_long("seed", 0));
  s.min_objects = static_cast<int>(kv.get_long("min_objects", s.min_objects));
  s.max_objects = static_cast<int>(kv.get_long("max_objects", s.max_objects));
  s.total_points = static_cast<int>(kv.get_long("total_points", s.total_points));
  s.min_points_per_object = static_cast<int>(kv.get_long("min_points_per_object", s.min_points_per_object));
  s.clutter_points = static_cast<int>(kv.get_long("clutter_points", s.clutter_points));
  s.extent = kv.get_double("extent", s.extent);
  s.size_jitter = kv.get_double("size_jitter", s.size_jitter);
  s.color_noise = kv.get_double("color_noise", s.color_noise);
  s.gap = kv.get_double("gap", s.gap);
  s.multiple_fraction = kv.get_double("multiple_fraction", s.multiple_fraction);
  s.grid_cell = kv.get_double("grid_cell", s.grid_cell);
  s.position_margin = kv.get_double("position_margin", s.position_margin);
  s.volume_ratio_margin = kv.get_double("volume_ratio_margin", s.volume_ratio_margin);
  s.distance_margin = kv.get_double("distance_margin", s.distance_margin);
  s.validate();
  return s;
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool footprints_clear(const Aabb& a, const Aabb& b, double gap) {
  for (int axis = 0; axis < 2; ++axis) {
    if (std::abs(a.center(axis) - b.center(axis)) >= 0.5 * (a.size(axis) + b.size(axis)) + gap) return true;
  }
  return false;
}

bool in_footprint(const Aabb& box, double x, double y) {
  const Vec3 lo = box.min(), hi = box.max();
  return x >= lo.x() && x <= hi.x() && y >= lo.y() && y <= hi.y();
}

std::array<int, 2> random_class(Rng& rng) {
  return {uniform_int(rng, 0, static_cast<int>(kColorNames.size()) - 1),
          uniform_int(rng, 0, static_cast<int>(kShapeNames.size()) - 1)};
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  const int count = uniform_int(rng, spec.min_objects, spec.max_objects);
  std::vector<std::array<int, 2>> classes;
  for (int i = 0; i < count; ++i) classes.push_back(random_class(rng));
  return generate_scene(spec, classes, rng);
}

Scene generate_scene(const SceneSpec& spec, const std::vector<std::array<int, 2>>& classes, Rng& rng) {
  spec.validate();
  if (classes.empty() || static_cast<int>(classes.size()) > spec.max_objects) {
    throw PreconditionError("generate_scene: object count outside the spec range");
  }
  Scene scene;
  for (const auto& cls : classes) {
    SceneObject obj;
    obj.color = cls[0];
    obj.shape = cls[1];
    const Vec3 base = shape_template(obj.shape);
    for (int a = 0; a < 3; ++a) obj.box.size(a) = base(a) * uniform(rng, 1.0 - spec.size_jitter, 1.0 + spec.size_jitter);
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double hx = 0.5 * obj.box.size.x(), hy = 0.5 * obj.box.size.y();
      if (2.0 * hx >= spec.extent || 2.0 * hy >= spec.extent) break;
      obj.box.center = Vec3(uniform(rng, hx, spec.extent - hx), uniform(rng, hy, spec.extent - hy),
                            0.5 * obj.box.size.z());
      placed = std::all_of(scene.objects.begin(), scene.objects.end(),
                           [&](const SceneObject& o) { return footprints_clear(o.box, obj.box, spec.gap); });
    }
    if (!placed) throw DataConsistencyError("generate_scene: could not place object without overlap");
    scene.objects.push_back(std::move(obj));
  }

  const int objects = static_cast<int>(scene.objects.size());
  const int object_points = spec.total_points - spec.clutter_points;
  const int n = spec.total_points;
  scene.cloud.positions.resize(n, 3);
  scene.cloud.colors.resize(n, 3);
  Index row = 0;
  for (int o = 0; o < objects; ++o) {
    SceneObject& obj = scene.objects[static_cast<std::size_t>(o)];
    const int share = object_points / objects + (o < object_points % objects ? 1 : 0);
    const Vec3 lo = obj.box.min(), hi = obj.box.max();
    const Vec3 color = class_color(obj.color);
    for (int i = 0; i < share; ++i, ++row) {
      for (int a = 0; a < 3; ++a) {
        scene.cloud.positions(row, a) = uniform(rng, lo(a), hi(a));
        const double noise = uniform(rng, -spec.color_noise, spec.color_noise);
        scene.cloud.colors(row, a) = std::clamp(color(a) + noise, 0.0, 1.0);
      }
      obj.points.push_back(row);
    }
  }
  for (; row < n; ++row) {
    double x = 0.0, y = 0.0;
    do {
      x = uniform(rng, 0.0, spec.extent);
      y = uniform(rng, 0.0, spec.extent);
    } while (std::any_of(scene.objects.begin(), scene.objects.end(),
                         [&](const SceneObject& o) { return in_footprint(o.box, x, y); }));
    scene.cloud.positions.row(row) << x, y, uniform(rng, 0.0, 0.02);
    const double grey = uniform(rng, 0.35, 0.65);
    for (int a = 0; a < 3; ++a) scene.cloud.colors(row, a) = std::clamp(grey + uniform(rng, -0.03, 0.03), 0.0, 1.0);
  }
  return scene;
}

namespace {

std::vector<std::size_t> class_members(const std::vector<SceneObject>& objects, int color, int shape) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].color == color && objects[i].shape == shape) out.push_back(i);
  }
  return out;
}

// Members attaining the minimum of key, ties included.
std::vector<std::size_t> argmin_set(const std::vector<std::size_t>& members,
                                    const std::function<double(std::size_t)>& key) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i : members) best = std::min(best, key(i));
  std::vector<std::size_t> out;
  for (std::size_t i : members) {
    if (key(i) == best) out.push_back(i);
  }
  return out;
}

std::function<double(std::size_t)> relation_key(Relation r, const std::vector<SceneObject>& objects,
                                                std::size_t anchor) {
  switch (r) {
    case Relation::leftmost: return [&objects](std::size_t i) { return objects[i].box.center.x(); };
    case Relation::rightmost: return [&objects](std::size_t i) { return -objects[i].box.center.x(); };
    case Relation::largest: return [&objects](std::size_t i) { return -objects[i].box.volume(); };
    case Relation::smallest: return [&objects](std::size_t i) { return objects[i].box.volume(); };
    case Relation::nearest:
      return [&objects, anchor](std::size_t i) {
        return (objects[i].box.center - objects[anchor].box.center).norm();
      };
  }
  return {};
}

int token_color(int t) {
  if (t < kColorBase || t >= kShapeBase) throw PreconditionError("resolve: expected a colour token, got '" + token_name(t) + "'");
  return t - kColorBase;
}

int token_shape(int t) {
  if (t < kShapeBase || t >= kRelationBase) throw PreconditionError("resolve: expected a shape token, got '" + token_name(t) + "'");
  return t - kShapeBase;
}

}  // namespace

std::vector<std::size_t> resolve(const std::vector<int>& tokens, const std::vector<SceneObject>& objects) {
  for (int t : tokens) token_name(t);
  if (tokens.size() != 2 && tokens.size() != 3 && tokens.size() != 5) {
    throw PreconditionError("resolve: unsupported expression length " + std::to_string(tokens.size()));
  }
  const auto members = class_members(objects, token_color(tokens[0]), token_shape(tokens[1]));
  if (tokens.size() == 2 || members.empty()) return members;
  if (tokens[2] < kRelationBase) throw PreconditionError("resolve: expected a relation token");
  const auto rel = static_cast<Relation>(tokens[2] - kRelationBase);
  std::size_t anchor = 0;
  if (rel == Relation::nearest) {
    if (tokens.size() != 5) throw PreconditionError("resolve: nearest needs an anchor class");
    const auto anchors = class_members(objects, token_color(tokens[3]), token_shape(tokens[4]));
    if (anchors.size() != 1) return {};
    anchor = anchors.front();
  } else if (tokens.size() != 3) {
    throw PreconditionError("resolve: only nearest takes an anchor");
  }
  return argmin_set(members, relation_key(rel, objects, anchor));
}

Expression generate_expression(const Scene& scene, std::size_t target, const SceneSpec& spec, Rng* rng) {
  const auto& objects = scene.objects;
  if (target >= objects.size()) throw PreconditionError("generate_expression: target out of range");
  const SceneObject& t = objects[target];
  const std::vector<int> head = {color_token(t.color), shape_token(t.shape)};
  const auto members = class_members(objects, t.color, t.shape);
  if (members.size() == 1) return {head, Split::unique};

  // Each candidate is (relation, anchor); the margin is measured on the same
  // key the resolver minimises.
  std::vector<std::pair<Relation, std::size_t>> candidates;
  for (Relation r : {Relation::leftmost, Relation::rightmost, Relation::largest, Relation::smallest}) {
    candidates.emplace_back(r, 0);
  }
  for (std::size_t a = 0; a < objects.size(); ++a) {
    if (!objects[a].same_class(t) && class_members(objects, objects[a].color, objects[a].shape).size() == 1) {
      candidates.emplace_back(Relation::nearest, a);
    }
  }
  if (rng) std::shuffle(candidates.begin(), candidates.end(), *rng);

  for (const auto& [rel, anchor] : candidates) {
    const auto key = relation_key(rel, objects, anchor);
    double second = std::numeric_limits<double>::infinity();
    for (std::size_t i : members) {
      if (i != target) second = std::min(second, key(i));
    }
    const double mine = key(target);
    bool clear = false;
    switch (rel) {
      case Relation::leftmost:
      case Relation::rightmost: clear = second - mine >= spec.position_margin; break;
      case Relation::largest: clear = mine < 0.0 && second / mine <= 1.0 / spec.volume_ratio_margin; break;
      case Relation::smallest: clear = second / mine >= spec.volume_ratio_margin; break;
      case Relation::nearest: clear = second - mine >= spec.distance_margin; break;
    }
    if (!clear) continue;
    std::vector<int> tokens = head;
    tokens.push_back(relation_token(rel));
    if (rel == Relation::nearest) {
      tokens.push_back(color_token(objects[anchor].color));
      tokens.push_back(shape_token(objects[anchor].shape));
    }
    const auto resolved = resolve(tokens, objects);
    if (resolved.size() == 1 && resolved.front() == target) return {tokens, Split::multiple};
  }
  throw DataConsistencyError("generate_expression: no relation singles out the target");
}

BinaryMask majority_superpoint_mask(const SuperpointPartition& partition, const BinaryMask& point_mask) {
  if (point_mask.size() != partition.assignment.size()) {
    throw DimensionError("majority_superpoint_mask: point mask length mismatch");
  }
  BinaryMask out(static_cast<std::size_t>(partition.count()), 0);
  for (Index s = 0; s < partition.count(); ++s) {
    const auto& mem = partition.members[static_cast<std::size_t>(s)];
    std::size_t inside = 0;
    for (Index i : mem) inside += point_mask[static_cast<std::size_t>(i)] ? 1 : 0;
    out[static_cast<std::size_t>(s)] = 2 * inside > mem.size() ? 1 : 0;
  }
  return out;
}

SceneSample make_sample(std::string id, PointCloud cloud, std::vector<Index> superpoint, std::vector<int> tokens,
                        Aabb gt_box, BinaryMask gt_point_mask, Split split) {
  cloud.validate();
  gt_box.validate();
  if (static_cast<Index>(gt_point_mask.size()) != cloud.size()) {
    throw DimensionError("sample " + id + ": gt_point_mask has " + std::to_string(gt_point_mask.size()) +
                         " entries for " + std::to_string(cloud.size()) + " points");
  }
  for (int t : tokens) token_name(t);
  SceneSample s;
  s.partition = SuperpointPartition::from_assignment(cloud, std::move(superpoint));
  s.gt_superpoint_mask = majority_superpoint_mask(s.partition, gt_point_mask);
  s.id = std::move(id);
  s.cloud = std::move(cloud);
  s.tokens = std::move(tokens);
  s.gt_box = gt_box;
  s.gt_point_mask = std::move(gt_point_mask);
  s.split = split;
  return s;
}

SceneSample generate_sample(const SceneSpec& spec, Rng& rng, const std::string& id) {
  spec.validate();
  // The split is drawn once so rejected multiple-split scenes are redrawn as
  // multiple-split scenes.
  const bool want_multiple = spec.max_objects >= 2 && uniform(rng, 0.0, 1.0) < spec.multiple_fraction;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int count = uniform_int(rng, want_multiple ? std::max(2, spec.min_objects) : spec.min_objects, spec.max_objects);
    const auto target_class = random_class(rng);
    const int copies = want_multiple ? uniform_int(rng, 2, std::min(3, count)) : 1;
    std::vector<std::array<int, 2>> classes(static_cast<std::size_t>(copies), target_class);
    while (static_cast<int>(classes.size()) < count) {
      const auto c = random_class(rng);
      if (c != target_class) classes.push_back(c);
    }
    Scene scene;
    try {
      scene = generate_scene(spec, classes, rng);
    } catch (const DataConsistencyError&) {
      continue;
    }
    Expression expr;
    try {
      expr = generate_expression(scene, 0, spec, &rng);
    } catch (const DataConsistencyError&) {
      continue;
    }
    BinaryMask point_mask(static_cast<std::size_t>(scene.cloud.size()), 0);
    for (Index i : scene.objects.front().points) point_mask[static_cast<std::size_t>(i)] = 1;
    SuperpointPartition partition = grid_superpoints(scene.cloud, spec.grid_cell);
    return make_sample(id, std::move(scene.cloud), std::move(partition.assignment), std::move(expr.tokens),
                       scene.objects.front().box, std::move(point_mask), expr.split);
  }
  throw DataConsistencyError("generate_sample: no valid scene after 1000 attempts");
}

std::vector<SceneSample> generate_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t seed,
                                          const std::string& id_prefix) {
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    // One stream per sample so any sample can be regenerated on its own.
    Rng rng(seed * 1000003ULL + i);
    out.push_back(generate_sample(spec, rng, id_prefix + std::to_string(i)));
  }
  return out;
}

std::string sample_to_json_line(const SceneSample& s) {
  json j;
  j["version"] = kDatasetVersion;
  j["id"] = s.id;
  json points = json::array();
  for (Index i = 0; i < s.cloud.size(); ++i) {
    points.push_back({s.cloud.positions(i, 0), s.cloud.positions(i, 1), s.cloud.positions(i, 2),
                      s.cloud.colors(i, 0), s.cloud.colors(i, 1), s.cloud.colors(i, 2)});
  }
  j["points"] = std::move(points);
  j["superpoint"] = s.partition.assignment;
  j["tokens"] = s.tokens;
  json names = json::array();
  for (int t : s.tokens) names.push_back(token_name(t));
  j["token_names"] = std::move(names);
  j["gt_box"] = {s.gt_box.center.x(), s.gt_box.center.y(), s.gt_box.center.z(),
                 s.gt_box.size.x(),   s.gt_box.size.y(),   s.gt_box.size.z()};
  j["gt_point_mask"] = s.gt_point_mask;
  j["split"] = split_name(s.split);
  return j.dump();
}

SceneSample sample_from_json_line(const std::string& line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(line_number, std::string("malformed record: ") + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version != kDatasetVersion) {
      throw UnsupportedVersionError("line " + std::to_string(line_number) + ": dataset version " +
                                    std::to_string(version) + " (supported: " + std::to_string(kDatasetVersion) + ")");
    }
    const auto& pts = j.at("points");
    const auto n = static_cast<Index>(pts.size());
    PointCloud cloud;
    cloud.positions.resize(n, 3);
    cloud.colors.resize(n, 3);
    for (Index i = 0; i < n; ++i) {
      const auto& p = pts.at(static_cast<std::size_t>(i));
      if (p.size() != 6) throw ParseError(line_number, "point " + std::to_string(i) + " must have 6 values");
      for (int a = 0; a < 3; ++a) {
        cloud.positions(i, a) = p.at(static_cast<std::size_t>(a)).get<double>();
        cloud.colors(i, a) = p.at(static_cast<std::size_t>(3 + a)).get<double>();
      }
    }
    const auto box = j.at("gt_box").get<std::vector<double>>();
    if (box.size() != 6) throw ParseError(line_number, "gt_box must have 6 values");
    Aabb gt{Vec3(box[0], box[1], box[2]), Vec3(box[3], box[4], box[5])};
    std::vector<int> tokens = j.at("tokens").get<std::vector<int>>();
    if (j.contains("token_names")) {
      const auto names = j.at("token_names").get<std::vector<std::string>>();
      if (names.size() != tokens.size()) throw ParseError(line_number, "token_names length differs from tokens");
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (token_id(names[i]) != tokens[i]) throw ParseError(line_number, "token_names disagree with tokens");
      }
    }
    return make_sample(j.value("id", "line" + std::to_string(line_number)), std::move(cloud),
                       j.at("superpoint").get<std::vector<Index>>(), std::move(tokens), gt,
                       j.at("gt_point_mask").get<BinaryMask>(), parse_split(j.at("split").get<std::string>()));
  } catch (const json::exception& e) {
    throw ParseError(line_number, std::string("malformed record: ") + e.what());
  } catch (const ParseError&) {
    throw;
  } catch (const UnsupportedVersionError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(line_number, e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_dataset(const std::vector<SceneSample>& samples, const std::filesystem::path& path) {
  std::string text;
  for (const auto& s : samples) {
    text += sample_to_json_line(s);
    text += '\n';
  }
  write_file_atomic(path, text);
}

std::vector<SceneSample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<SceneSample> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(sample_from_json_line(line, number));
  }
  return out;
}

}  // namespace mcln
