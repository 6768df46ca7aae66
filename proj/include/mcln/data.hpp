#pragma once

// Synthetic referring scenes: coloured axis-aligned objects on a cluttered
// floor, closed-vocabulary expressions checked by a symbolic resolver, and the
// JSON Lines dataset format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcln/geometry.hpp"
#include "mcln/kvconfig.hpp"
#include "mcln/param.hpp"

namespace mcln {

inline constexpr int kDatasetVersion = 1;

enum class Split { unique, multiple };
const char* split_name(Split s);
Split parse_split(const std::string& name);

// Token ids: colours, then shapes, then relations.
inline constexpr std::array<const char*, 6> kColorNames = {"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<const char*, 5> kShapeNames = {"cube", "pillar", "slab", "bar", "plank"};
enum class Relation { leftmost, rightmost, largest, smallest, nearest };
inline constexpr std::array<const char*, 5> kRelationNames = {"leftmost", "rightmost", "largest", "smallest", "nearest"};

inline constexpr int kColorBase = 0;
inline constexpr int kShapeBase = kColorBase + static_cast<int>(kColorNames.size());
inline constexpr int kRelationBase = kShapeBase + static_cast<int>(kShapeNames.size());
inline constexpr int kVocabularySize = kRelationBase + static_cast<int>(kRelationNames.size());

int color_token(int color);
int shape_token(int shape);
int relation_token(Relation r);
std::string token_name(int token);
int token_id(const std::string& name);  // VocabularyError when unknown

Vec3 class_color(int color);
Vec3 shape_template(int shape);  // nominal w, h, d in meters

struct SceneSpec {
  std::uint64_t seed = 0;
  int min_objects = 2;
  int max_objects = 5;
  int total_points = 512;
  int min_points_per_object = 60;
  int clutter_points = 40;
  double extent = 3.0;          // floor is [0, extent]^2
  double size_jitter = 0.15;    // each side scaled by U[1-j, 1+j]
  double color_noise = 0.05;    // per-channel uniform noise bound
  double gap = 0.15;            // minimum footprint clearance between objects
  double multiple_fraction = 0.6;
  double grid_cell = 0.25;
  // Minimum separation that makes a relation unambiguous.
  double position_margin = 0.3;
  double volume_ratio_margin = 1.3;
  double distance_margin = 0.3;

  void validate() const;
  static SceneSpec from_config(const KeyValueFile& kv);
};

struct SceneObject {
  int color = 0;
  int shape = 0;
  Aabb box;
  std::vector<Index> points;

  bool same_class(const SceneObject& o) const { return color == o.color && shape == o.shape; }
};

struct Scene {
  PointCloud cloud;
  std::vector<SceneObject> objects;
};

// Places objects of random classes and samples their points plus floor clutter.
// The second form takes the (color, shape) of every object. Throws
// DataConsistencyError when the objects cannot be placed without overlap.
Scene generate_scene(const SceneSpec& spec, Rng& rng);
Scene generate_scene(const SceneSpec& spec, const std::vector<std::array<int, 2>>& classes, Rng& rng);

struct Expression {
  std::vector<int> tokens;
  Split split = Split::unique;
};

// Indices of the objects an expression refers to. An expression is valid when
// this returns exactly one index.
std::vector<std::size_t> resolve(const std::vector<int>& tokens, const std::vector<SceneObject>& objects);

// Throws PreconditionError when target is out of range and DataConsistencyError
// when no relation singles the target out.
// Relations are tried in a shuffled order when rng is given.
Expression generate_expression(const Scene& scene, std::size_t target, const SceneSpec& spec,
                               Rng* rng = nullptr);

struct SceneSample {
  std::string id;
  PointCloud cloud;
  SuperpointPartition partition;
  std::vector<int> tokens;
  Aabb gt_box;
  BinaryMask gt_point_mask;
  BinaryMask gt_superpoint_mask;
  Split split = Split::unique;
};

// Majority vote: superpoint s is set iff more than half of its points are.
BinaryMask majority_superpoint_mask(const SuperpointPartition& partition, const BinaryMask& point_mask);

// Draws scenes until one admits a valid expression for its target.
SceneSample generate_sample(const SceneSpec& spec, Rng& rng, const std::string& id);
std::vector<SceneSample> generate_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t seed,
                                          const std::string& id_prefix = "s");

// Rebuilds partition and superpoint gt from the stored point data.
SceneSample make_sample(std::string id, PointCloud cloud, std::vector<Index> superpoint, std::vector<int> tokens,
                        Aabb gt_box, BinaryMask gt_point_mask, Split split);

std::string sample_to_json_line(const SceneSample& s);
SceneSample sample_from_json_line(const std::string& line, std::size_t line_number);

void save_dataset(const std::vector<SceneSample>& samples, const std::filesystem::path& path);
std::vector<SceneSample> load_dataset(const std::filesystem::path& path);

// Writes via a sibling temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace mcln
