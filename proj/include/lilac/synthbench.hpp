#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "lilac/datamodel.hpp"
#include "lilac/util.hpp"

namespace lilac::synth {

struct BBoxTooSmall : Error {
  explicit BBoxTooSmall(const std::string& m) : Error("BBoxTooSmall: " + m) {}
};
struct PointLeavesView : Error {
  explicit PointLeavesView(const std::string& m)
      : Error("PointLeavesView: " + m) {}
};

// ---------------------------------------------------------------------------
// Vocabulary of the instruction templates
// ---------------------------------------------------------------------------

enum class ShapeKind { kRect, kCircle };
enum class MotionKind { kTranslate, kLift, kTranslateThenPlace, kRotateInPlane };

struct ColorDef {
  const char* name;
  std::uint8_t r, g, b;
};
struct ShapeDef {
  const char* name;
  ShapeKind kind;
};

std::span<const ColorDef> colors();      // 6 entries
std::span<const ShapeDef> shapes();      // 4 entries
std::span<const char* const> verbs();    // one per template
std::span<const char* const> directions();  // left right up down

/// (verb, color) pairs that only ever appear in the test split.
std::span<const std::pair<const char*, const char*>> holdout_pairs();

/// Every word the templates can emit, sorted, for the text encoder. Id 0 is
/// the shared <unk> token.
std::vector<std::string> vocabulary_words();
void write_vocabulary(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Scene specification
// ---------------------------------------------------------------------------

struct ObjectSpec {
  int shape = 0;        // index into shapes()
  int color = 0;        // index into colors()
  double size_px = 16;  // rect side / circle diameter
  double cx = 0, cy = 0;  // center, pixels, t=0
  double depth_m = 1.0;
};

struct MotionSpec {
  MotionKind kind = MotionKind::kTranslate;
  /// One camera-frame SE(3) increment per raw interval; the pose after raw
  /// step k is increments[k-1] * ... * increments[0].
  std::vector<data::Pose6DoF> increments;
};

struct SceneSpec {
  int width = 128, height = 128;
  double background_depth = 3.0;
  std::vector<ObjectSpec> objects;
  int actor = 0;
  int referent = -1;  // second object for put/place templates
  MotionSpec motion;
  int template_id = 0;
  std::string instruction;
  std::string verb;
  std::string color_name;
  int horizon = 8;
  int n_points = 16;
  double flow_noise_sigma = 0.0;
  data::Vec3 grasp_offset{0, 0, 0};
  std::uint64_t seed = 0;  // drives point sampling and flow noise
};

data::CameraModel default_camera(int width, int height);

/// Motion builders (camera frame; pixel displacements measured at depth_m).
MotionSpec make_translate_motion(MotionKind kind, double dx_px, double dy_px,
                                 double depth_m, const data::CameraModel& cam,
                                 int intervals);
MotionSpec make_rotate_motion(double angle_rad, const data::Vec3& center_3d,
                              int intervals);
MotionSpec make_place_motion(double dx_px, double dy_px, double lift_px,
                             double depth_m, const data::CameraModel& cam,
                             int n_up, int n_lateral, int n_down);

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// n distinct integer pixels, uniform over the half-open bbox
/// [x0,x1) x [y0,y1), deterministic per seed.
std::vector<std::array<double, 2>> sample_tracking_points(
    const std::array<double, 4>& bbox, int n, std::uint64_t seed);

struct GeneratedEpisode {
  data::Episode episode;
  /// Object pose at every raw step (length = raw interval count + 1,
  /// poses[0] = identity), before the grasp offset.
  std::vector<data::Pose6DoF> raw_poses;
  std::vector<int> sampled_indices;  // raw index per flow step
};

/// Rasterizes the scene, samples tracking points in the actor bbox, tracks
/// them through the ground-truth motion with pinhole projection, subsamples
/// to `horizon` steps uniform in time (endpoints included) and fills the
/// trajectory with the object poses at the sampled steps.
GeneratedEpisode generate_episode(const SceneSpec& spec);

/// Deterministic scene sampler. force_verb_color pins (template, color) for
/// holdout injection; avoid_holdout resamples until the pair is not held out.
struct SceneDraw {
  bool avoid_holdout = false;
  std::optional<std::pair<int, int>> force_template_color;
};
SceneSpec sample_scene(std::uint64_t seed, int width, int height, int horizon,
                       int n_points, double flow_noise_sigma,
                       const data::Vec3& grasp_offset, const SceneDraw& draw = {});

bool is_holdout(const SceneSpec& spec);

// ---------------------------------------------------------------------------
// Dataset building
// ---------------------------------------------------------------------------

struct DatasetOptions {
  int episodes = 100;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  int width = 128, height = 128;
  int horizon = 8;
  int n_points = 16;
  double flow_noise_sigma = 0.0;
  data::Vec3 grasp_offset{0, 0, 0};
};

struct ManifestEntry {
  std::string id;
  std::string file;  // relative to the split directory
  std::string instruction;
  std::string verb;
  std::string color;
};

struct BuiltDataset {
  std::array<std::vector<ManifestEntry>, 3> splits;  // train, val, test
  std::uint64_t digest = 0;  // combined episode digest, id order
  std::filesystem::path root;
};

extern const char* const kSplitNames[3];

/// Generates episodes, assigns splits (held-out verb/color pairs go to test
/// only), writes one record per episode plus per-split JSON manifests, a
/// dataset.json summary and the vocabulary.
BuiltDataset build_dataset(const std::filesystem::path& out_dir,
                           const DatasetOptions& opt);

/// Loads a built dataset's manifest; episodes are loaded lazily by callers.
struct LoadedSplit {
  std::vector<ManifestEntry> entries;
  std::filesystem::path dir;
  data::Episode load(std::size_t i) const;
};
LoadedSplit load_split(const std::filesystem::path& root,
                       const std::string& split);

}  // namespace lilac::synth
