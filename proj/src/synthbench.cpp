#include "lilac/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "lilac/prompter.hpp"

namespace lilac::synth {

using data::CameraModel;
using data::Episode;
using data::Pose6DoF;
using data::Vec3;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {

const ColorDef kColors[] = {
    {"red", 220, 40, 40},    {"green", 40, 170, 60},  {"blue", 50, 90, 220},
    {"yellow", 230, 210, 50}, {"purple", 150, 60, 200}, {"orange", 240, 140, 40},
};

const ShapeDef kShapes[] = {
    {"block", ShapeKind::kRect},
    {"box", ShapeKind::kRect},
    {"ball", ShapeKind::kCircle},
    {"disk", ShapeKind::kCircle},
};

struct TemplateDef {
  const char* verb;
  MotionKind kind;
  bool needs_dir;
  bool needs_referent;
  bool needs_rot;
};

const TemplateDef kTemplates[] = {
    {"move", MotionKind::kTranslate, true, false, false},
    {"slide", MotionKind::kTranslate, true, false, false},
    {"push", MotionKind::kTranslate, true, false, false},
    {"lift", MotionKind::kLift, false, false, false},
    {"raise", MotionKind::kLift, false, false, false},
    {"put", MotionKind::kTranslateThenPlace, false, true, false},
    {"place", MotionKind::kTranslateThenPlace, false, true, false},
    {"rotate", MotionKind::kRotateInPlane, false, false, true},
    {"spin", MotionKind::kRotateInPlane, false, false, true},
};
constexpr int kNumTemplates = 9;

const char* kVerbs[] = {"move", "slide", "push",   "lift", "raise",
                        "put",  "place", "rotate", "spin"};
const char* kDirections[] = {"left", "right", "up", "down"};

const std::pair<const char*, const char*> kHoldout[] = {
    {"lift", "red"}, {"rotate", "blue"}, {"put", "green"}};

constexpr std::uint8_t kBackground[3] = {190, 190, 190};

}  // namespace

std::span<const ColorDef> colors() { return kColors; }
std::span<const ShapeDef> shapes() { return kShapes; }
std::span<const char* const> verbs() { return kVerbs; }
std::span<const char* const> directions() { return kDirections; }
std::span<const std::pair<const char*, const char*>> holdout_pairs() {
  return kHoldout;
}

std::vector<std::string> vocabulary_words() {
  std::set<std::string> w = {"the",  "near",      "next", "to",
                             "left", "right",     "up",   "down",
                             "clockwise", "counterclockwise"};
  for (const auto& t : kTemplates) w.insert(t.verb);
  for (const auto& c : kColors) w.insert(c.name);
  for (const auto& s : kShapes) w.insert(s.name);
  return {w.begin(), w.end()};
}

void write_vocabulary(const std::filesystem::path& path) {
  json j;
  j["<unk>"] = 0;
  int id = 1;
  for (const std::string& w : vocabulary_words()) j[w] = id++;
  util::write_file(path, j.dump(2) + "\n");
}

CameraModel default_camera(int width, int height) {
  CameraModel c;
  c.fx = c.fy = static_cast<double>(width);
  c.cx = width / 2.0;
  c.cy = height / 2.0;
  c.width = width;
  c.height = height;
  return c;
}

// ---------------------------------------------------------------------------
// Motion builders
// ---------------------------------------------------------------------------

MotionSpec make_translate_motion(MotionKind kind, double dx_px, double dy_px,
                                 double depth_m, const CameraModel& cam,
                                 int intervals) {
  MotionSpec m;
  m.kind = kind;
  Vec3 step{dx_px * depth_m / cam.fx / intervals,
            dy_px * depth_m / cam.fy / intervals, 0.0};
  for (int i = 0; i < intervals; ++i)
    m.increments.push_back(Pose6DoF::from_axis_angle({0, 0, 0}, step));
  return m;
}

MotionSpec make_rotate_motion(double angle_rad, const Vec3& center_3d,
                              int intervals) {
  MotionSpec m;
  m.kind = MotionKind::kRotateInPlane;
  double delta = angle_rad / intervals;
  Pose6DoF rot = Pose6DoF::from_axis_angle({0, 0, delta}, {0, 0, 0});
  Vec3 rc = rot.apply(center_3d);
  Pose6DoF inc = rot;
  inc.translation = {center_3d[0] - rc[0], center_3d[1] - rc[1],
                     center_3d[2] - rc[2]};
  for (int i = 0; i < intervals; ++i) m.increments.push_back(inc);
  return m;
}

MotionSpec make_place_motion(double dx_px, double dy_px, double lift_px,
                             double depth_m, const CameraModel& cam,
                             int n_up, int n_lateral, int n_down) {
  MotionSpec m;
  m.kind = MotionKind::kTranslateThenPlace;
  double k = depth_m / cam.fx;
  auto push_phase = [&](double px, double py, int n) {
    if (n <= 0) return;
    Vec3 step{px * k / n, py * k / n, 0.0};
    for (int i = 0; i < n; ++i)
      m.increments.push_back(Pose6DoF::from_axis_angle({0, 0, 0}, step));
  };
  push_phase(0.0, -lift_px, n_up);
  push_phase(dx_px, dy_px, n_lateral);
  push_phase(0.0, lift_px, n_down);
  return m;
}

// ---------------------------------------------------------------------------
// Tracking-point sampling
// ---------------------------------------------------------------------------

std::vector<std::array<double, 2>> sample_tracking_points(
    const std::array<double, 4>& bbox, int n, std::uint64_t seed) {
  if (n < 1) throw Error("sample_tracking_points: n must be >= 1");
  int x0 = static_cast<int>(std::ceil(bbox[0]));
  int y0 = static_cast<int>(std::ceil(bbox[1]));
  int x1 = static_cast<int>(std::ceil(bbox[2]));  // exclusive
  int y1 = static_cast<int>(std::ceil(bbox[3]));
  long long nx = std::max(0, x1 - x0), ny = std::max(0, y1 - y0);
  long long total = nx * ny;
  if (total < n)
    throw BBoxTooSmall("bbox holds " + std::to_string(total) +
                       " integer pixels, need " + std::to_string(n));
  // Partial Fisher-Yates over the pixel index space.
  std::vector<long long> idx(static_cast<std::size_t>(total));
  for (long long i = 0; i < total; ++i) idx[static_cast<std::size_t>(i)] = i;
  util::Rng rng(seed);
  std::vector<std::array<double, 2>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    long long j = rng.uniform_int(i, total - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    long long v = idx[static_cast<std::size_t>(i)];
    out.push_back({static_cast<double>(x0 + v % nx),
                   static_cast<double>(y0 + v / nx)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

namespace {

bool covers(const ObjectSpec& o, int px, int py) {
  double half = o.size_px / 2.0;
  double dx = px - o.cx, dy = py - o.cy;
  if (kShapes[o.shape].kind == ShapeKind::kRect)
    return std::abs(dx) <= half && std::abs(dy) <= half;
  return dx * dx + dy * dy <= half * half;
}

struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  bool empty() const { return x1 <= x0 || y1 <= y0; }
};

PixelBox silhouette_box(const ObjectSpec& o, int width, int height) {
  double half = o.size_px / 2.0;
  int sx = std::max(0, static_cast<int>(std::floor(o.cx - half)));
  int sy = std::max(0, static_cast<int>(std::floor(o.cy - half)));
  int ex = std::min(width - 1, static_cast<int>(std::ceil(o.cx + half)));
  int ey = std::min(height - 1, static_cast<int>(std::ceil(o.cy + half)));
  PixelBox b;
  b.x0 = width;
  b.y0 = height;
  b.x1 = 0;
  b.y1 = 0;
  for (int y = sy; y <= ey; ++y)
    for (int x = sx; x <= ex; ++x)
      if (covers(o, x, y)) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  return b;
}

Vec3 backproject_px(double u, double v, double z, const CameraModel& cam) {
  return {(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z};
}

}  // namespace

// ---------------------------------------------------------------------------
// Episode generation
// ---------------------------------------------------------------------------

GeneratedEpisode generate_episode(const SceneSpec& spec) {
  if (spec.objects.empty()) throw Error("generate_episode: no objects");
  if (spec.actor < 0 || spec.actor >= static_cast<int>(spec.objects.size()))
    throw Error("generate_episode: actor index out of range");
  int w = spec.width, h = spec.height;
  CameraModel cam = default_camera(w, h);

  Episode e;
  e.id = "ep" + util::hex64(spec.seed).substr(8);
  e.camera = cam;
  e.instruction = spec.instruction;

  // RGB: flat shapes over a gray background.
  e.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint8_t* px = e.pixel(x, y);
      px[0] = kBackground[0];
      px[1] = kBackground[1];
      px[2] = kBackground[2];
    }
  for (const ObjectSpec& o : spec.objects) {
    PixelBox b = silhouette_box(o, w, h);
    for (int y = b.y0; y < b.y1; ++y)
      for (int x = b.x0; x < b.x1; ++x)
        if (covers(o, x, y)) {
          std::uint8_t* px = e.pixel(x, y);
          px[0] = kColors[o.color].r;
          px[1] = kColors[o.color].g;
          px[2] = kColors[o.color].b;
        }
  }

  // Depth: background plane, with each object's depth splatted over its
  // silhouette bbox so every tracking point sampled inside the bbox sits at
  // the object depth (keeps rigid recovery exact).
  e.depth.assign(static_cast<std::size_t>(w) * h,
                 static_cast<float>(spec.background_depth));
  std::vector<PixelBox> boxes;
  for (const ObjectSpec& o : spec.objects) {
    PixelBox b = silhouette_box(o, w, h);
    boxes.push_back(b);
    for (int y = b.y0; y < b.y1; ++y)
      for (int x = b.x0; x < b.x1; ++x)
        e.depth[static_cast<std::size_t>(y) * w + x] =
            static_cast<float>(o.depth_m);
  }

  const PixelBox& ab = boxes[static_cast<std::size_t>(spec.actor)];
  if (ab.empty()) throw Error("generate_episode: actor rasterized to nothing");
  std::array<double, 4> bbox = {static_cast<double>(ab.x0),
                                static_cast<double>(ab.y0),
                                static_cast<double>(ab.x1),
                                static_cast<double>(ab.y1)};
  auto points =
      sample_tracking_points(bbox, spec.n_points, util::Rng::mix(spec.seed, 17));

  // 3D points from the rendered depth map (what the de-tokenizer will see).
  std::vector<Vec3> p0(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    double z = static_cast<double>(e.depth_at(points[i][0], points[i][1]));
    p0[i] = backproject_px(points[i][0], points[i][1], z, cam);
  }

  // Compose raw poses and track.
  int intervals = static_cast<int>(spec.motion.increments.size());
  if (spec.horizon < 2) throw Error("generate_episode: horizon must be >= 2");
  if (intervals % (spec.horizon - 1) != 0)
    throw Error("generate_episode: raw intervals must divide evenly into the horizon");
  GeneratedEpisode out;
  out.raw_poses.resize(static_cast<std::size_t>(intervals) + 1);
  out.raw_poses[0] = Pose6DoF::identity();
  for (int k = 1; k <= intervals; ++k)
    out.raw_poses[static_cast<std::size_t>(k)] =
        spec.motion.increments[static_cast<std::size_t>(k - 1)].compose(
            out.raw_poses[static_cast<std::size_t>(k - 1)]);

  int stride = intervals / (spec.horizon - 1);
  for (int t = 0; t < spec.horizon; ++t)
    out.sampled_indices.push_back(t * stride);

  e.gt_flow = data::FlowSequence(spec.horizon, spec.n_points);
  for (int t = 0; t < spec.horizon; ++t) {
    const Pose6DoF& pose =
        out.raw_poses[static_cast<std::size_t>(out.sampled_indices[static_cast<std::size_t>(t)])];
    for (int i = 0; i < spec.n_points; ++i) {
      Vec3 q = pose.apply(p0[static_cast<std::size_t>(i)]);
      if (!(q[2] > 0))
        throw PointLeavesView("point " + std::to_string(i) +
                              " reaches non-positive depth at step " +
                              std::to_string(t));
      auto uv = cam.project(q);
      if (!(uv[0] >= 0 && uv[0] < w && uv[1] >= 0 && uv[1] < h))
        throw PointLeavesView("point " + std::to_string(i) +
                              " leaves the view at step " + std::to_string(t));
      e.gt_flow.set(t, i, uv[0], uv[1]);
    }
  }

  if (spec.flow_noise_sigma > 0) {
    util::Rng rng(util::Rng::mix(spec.seed, 0xAB));
    for (int t = 1; t < spec.horizon; ++t)
      for (int i = 0; i < spec.n_points; ++i) {
        double nx = e.gt_flow.x(t, i) + spec.flow_noise_sigma * rng.normal();
        double ny = e.gt_flow.y(t, i) + spec.flow_noise_sigma * rng.normal();
        e.gt_flow.set(t, i, std::clamp(nx, 0.0, w - 1.0),
                      std::clamp(ny, 0.0, h - 1.0));
      }
  }

  e.gt_trajectory.resize(static_cast<std::size_t>(spec.horizon));
  for (int t = 0; t < spec.horizon; ++t) {
    Pose6DoF pose =
        out.raw_poses[static_cast<std::size_t>(out.sampled_indices[static_cast<std::size_t>(t)])];
    if (t >= 1)
      for (int a = 0; a < 3; ++a)
        pose.translation[static_cast<std::size_t>(a)] +=
            spec.grasp_offset[static_cast<std::size_t>(a)];
    e.gt_trajectory[static_cast<std::size_t>(t)] = pose;
  }

  e.prompt = prompt::oracle_prompt(e, 0.0);
  out.episode = std::move(e);
  return out;
}

// ---------------------------------------------------------------------------
// Scene sampling
// ---------------------------------------------------------------------------

bool is_holdout(const SceneSpec& spec) {
  for (const auto& [verb, color] : kHoldout)
    if (spec.verb == verb && spec.color_name == color) return true;
  return false;
}

namespace {

bool boxes_overlap(const ObjectSpec& a, const ObjectSpec& b, double margin) {
  double ha = a.size_px / 2.0 + margin, hb = b.size_px / 2.0;
  return std::abs(a.cx - b.cx) < ha + hb && std::abs(a.cy - b.cy) < ha + hb;
}

/// One deterministic draw; returns nullopt when geometry is infeasible.
std::optional<SceneSpec> try_scene(std::uint64_t seed, int width, int height,
                                   int horizon, int n_points,
                                   double flow_noise_sigma,
                                   const Vec3& grasp_offset,
                                   const std::optional<std::pair<int, int>>& force,
                                   double shrink) {
  util::Rng rng(seed);
  SceneSpec s;
  s.width = width;
  s.height = height;
  s.horizon = horizon;
  s.n_points = n_points;
  s.flow_noise_sigma = flow_noise_sigma;
  s.grasp_offset = grasp_offset;
  s.seed = seed;

  s.template_id = force ? force->first
                        : static_cast<int>(rng.uniform_int(0, kNumTemplates - 1));
  const TemplateDef& tmpl = kTemplates[s.template_id];
  CameraModel cam = default_camera(width, height);
  int intervals = 3 * (horizon - 1);

  // colors without replacement; the target color may be forced
  std::array<int, 6> cperm = {0, 1, 2, 3, 4, 5};
  for (int i = 0; i < 5; ++i) {
    int j = static_cast<int>(rng.uniform_int(i, 5));
    std::swap(cperm[static_cast<std::size_t>(i)], cperm[static_cast<std::size_t>(j)]);
  }
  if (force) {
    auto it = std::find(cperm.begin(), cperm.end(), force->second);
    std::swap(*cperm.begin(), *it);
  }

  int n_obj = static_cast<int>(rng.uniform_int(2, 4));
  auto rand_size = [&]() { return rng.uniform(14.0, 26.0); };
  auto rand_depth = [&]() {
    return static_cast<double>(static_cast<float>(rng.uniform(0.9, 1.6)));
  };

  ObjectSpec actor;
  actor.shape = static_cast<int>(rng.uniform_int(0, 3));
  actor.color = cperm[0];
  actor.size_px = rand_size();
  actor.depth_m = rand_depth();

  // Motion parameters (position-independent parts).
  double mag = 0, angle = 0;
  int dir_idx = 0, rot_cw = 0;
  switch (tmpl.kind) {
    case MotionKind::kTranslate:
      dir_idx = static_cast<int>(rng.uniform_int(0, 3));
      mag = rng.uniform(18.0, 45.0) * shrink;
      break;
    case MotionKind::kLift:
      mag = rng.uniform(18.0, 40.0) * shrink;
      break;
    case MotionKind::kRotateInPlane:
      rot_cw = static_cast<int>(rng.uniform_int(0, 1));
      angle = rng.uniform(0.7, 1.2) * (rot_cw == 0 ? 1.0 : -1.0);
      break;
    case MotionKind::kTranslateThenPlace:
      break;
  }

  double half = actor.size_px / 2.0;
  double lo_x = half + 3, hi_x = width - 1 - half - 3;
  double lo_y = half + 3, hi_y = height - 1 - half - 3;
  double dx_px = 0, dy_px = 0;
  if (tmpl.kind == MotionKind::kTranslate || tmpl.kind == MotionKind::kLift) {
    static const double kDirs[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    const double* d =
        tmpl.kind == MotionKind::kLift ? kDirs[2] : kDirs[dir_idx];
    dx_px = d[0] * mag;
    dy_px = d[1] * mag;
    lo_x += std::max(0.0, -dx_px);
    hi_x -= std::max(0.0, dx_px);
    lo_y += std::max(0.0, -dy_px);
    hi_y -= std::max(0.0, dy_px);
  } else if (tmpl.kind == MotionKind::kRotateInPlane) {
    double reach = half * std::sqrt(2.0) + 2;
    lo_x = reach + 2;
    hi_x = width - 1 - reach - 2;
    lo_y = reach + 2;
    hi_y = height - 1 - reach - 2;
  } else {
    // place: needs headroom for the lift arc; the lateral leg is bounded by
    // a referent inside the image, checked exactly below
    lo_y += 20;
  }
  if (lo_x >= hi_x || lo_y >= hi_y) return std::nullopt;
  actor.cx = rng.uniform(lo_x, hi_x);
  actor.cy = rng.uniform(lo_y, hi_y);

  s.objects.push_back(actor);
  s.actor = 0;

  // Referent (for put/place), then distractors.
  int want_extra = std::max(n_obj - 1, tmpl.needs_referent ? 1 : 0);
  for (int k = 0; k < want_extra; ++k) {
    ObjectSpec o;
    o.shape = static_cast<int>(rng.uniform_int(0, 3));
    o.color = cperm[static_cast<std::size_t>(k + 1)];
    o.size_px = rand_size();
    o.depth_m = rand_depth();
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      double oh = o.size_px / 2.0 + 2;
      o.cx = rng.uniform(oh, width - 1 - oh);
      o.cy = rng.uniform(oh, height - 1 - oh);
      placed = true;
      for (const ObjectSpec& prev : s.objects)
        if (boxes_overlap(prev, o, 4.0)) placed = false;
    }
    if (!placed) {
      if (tmpl.needs_referent && k == 0) return std::nullopt;
      continue;
    }
    if (tmpl.needs_referent && k == 0) s.referent = static_cast<int>(s.objects.size());
    s.objects.push_back(o);
  }

  // Motion assembly.
  const ObjectSpec& a = s.objects[0];
  switch (tmpl.kind) {
    case MotionKind::kTranslate:
    case MotionKind::kLift:
      s.motion = make_translate_motion(tmpl.kind, dx_px, dy_px, a.depth_m, cam,
                                       intervals);
      break;
    case MotionKind::kRotateInPlane: {
      Vec3 c3 = backproject_px(a.cx, a.cy, a.depth_m, cam);
      s.motion = make_rotate_motion(angle, c3, intervals);
      break;
    }
    case MotionKind::kTranslateThenPlace: {
      const ObjectSpec& ref = s.objects[static_cast<std::size_t>(s.referent)];
      double vx = a.cx - ref.cx, vy = a.cy - ref.cy;
      double norm = std::hypot(vx, vy);
      if (norm < 1.0) return std::nullopt;
      double clearance = ref.size_px / 2.0 + a.size_px / 2.0 + 6.0;
      double ex = ref.cx + vx / norm * clearance;
      double ey = ref.cy + vy / norm * clearance;
      dx_px = ex - a.cx;
      dy_px = ey - a.cy;
      if (std::hypot(dx_px, dy_px) < 12.0 * shrink) return std::nullopt;
      double lift_px = 20.0;
      int n1 = std::max(1, intervals * 2 / 7);
      int n3 = n1;
      int n2 = intervals - n1 - n3;
      if (n2 < 1) return std::nullopt;
      s.motion = make_place_motion(dx_px, dy_px, lift_px, a.depth_m, cam, n1,
                                   n2, n3);
      break;
    }
  }

  // Exact containment pre-check on the actor bbox corners.
  PixelBox ab = silhouette_box(a, width, height);
  if (ab.empty()) return std::nullopt;
  std::array<std::array<double, 2>, 4> corners = {{
      {static_cast<double>(ab.x0), static_cast<double>(ab.y0)},
      {static_cast<double>(ab.x1 - 1), static_cast<double>(ab.y0)},
      {static_cast<double>(ab.x0), static_cast<double>(ab.y1 - 1)},
      {static_cast<double>(ab.x1 - 1), static_cast<double>(ab.y1 - 1)},
  }};
  Pose6DoF pose = Pose6DoF::identity();
  for (const Pose6DoF& inc : s.motion.increments) {
    pose = inc.compose(pose);
    for (const auto& c : corners) {
      Vec3 q = pose.apply(backproject_px(c[0], c[1], a.depth_m, cam));
      if (!(q[2] > 0)) return std::nullopt;
      auto uv = cam.project(q);
      if (!(uv[0] >= 0.5 && uv[0] < width - 1.5 && uv[1] >= 0.5 &&
            uv[1] < height - 1.5))
        return std::nullopt;
    }
  }

  // Instruction.
  s.verb = tmpl.verb;
  s.color_name = kColors[a.color].name;
  std::string inst = std::string(tmpl.verb) + " the " + kColors[a.color].name +
                     " " + kShapes[a.shape].name;
  if (tmpl.needs_dir) inst += std::string(" ") + kDirections[dir_idx];
  if (tmpl.needs_rot)
    inst += rot_cw == 0 ? " clockwise" : " counterclockwise";
  if (tmpl.needs_referent) {
    const ObjectSpec& ref = s.objects[static_cast<std::size_t>(s.referent)];
    inst += std::string(s.template_id == 5 ? " near the " : " next to the ") +
            kColors[ref.color].name + " " + kShapes[ref.shape].name;
  }
  s.instruction = inst;
  return s;
}

}  // namespace

SceneSpec sample_scene(std::uint64_t seed, int width, int height, int horizon,
                       int n_points, double flow_noise_sigma,
                       const Vec3& grasp_offset, const SceneDraw& draw) {
  for (int attempt = 0; attempt < 400; ++attempt) {
    double shrink = attempt < 100 ? 1.0 : 1.0 / (1.0 + (attempt - 100) / 40.0);
    auto s = try_scene(util::Rng::mix(seed, static_cast<std::uint64_t>(attempt)),
                       width, height, horizon, n_points, flow_noise_sigma,
                       grasp_offset, draw.force_template_color, shrink);
    if (!s) continue;
    if (draw.avoid_holdout && !draw.force_template_color && is_holdout(*s))
      continue;
    return *s;
  }
  throw Error("sample_scene: no feasible scene after 400 attempts");
}

// ---------------------------------------------------------------------------
// Dataset building
// ---------------------------------------------------------------------------

const char* const kSplitNames[3] = {"train", "val", "test"};

BuiltDataset build_dataset(const std::filesystem::path& out_dir,
                           const DatasetOptions& opt) {
  double rs = opt.split_ratios[0] + opt.split_ratios[1] + opt.split_ratios[2];
  if (std::abs(rs - 1.0) > 1e-9)
    throw Error("build_dataset: split ratios must sum to 1");
  if (opt.episodes < 1) throw Error("build_dataset: needs at least 1 episode");

  // Quotas by largest remainder.
  std::array<int, 3> quota;
  std::array<double, 3> frac;
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double exact = opt.episodes * opt.split_ratios[static_cast<std::size_t>(i)];
    quota[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(exact));
    frac[static_cast<std::size_t>(i)] = exact - quota[static_cast<std::size_t>(i)];
    assigned += quota[static_cast<std::size_t>(i)];
  }
  while (assigned < opt.episodes) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[static_cast<std::size_t>(i)] > frac[static_cast<std::size_t>(best)])
        best = i;
    ++quota[static_cast<std::size_t>(best)];
    frac[static_cast<std::size_t>(best)] = -1;
    ++assigned;
  }

  // Draw scenes. Held-out (verb,color) episodes go to test, capped at the
  // test quota; overflow redraws as non-holdout.
  std::vector<SceneSpec> specs;
  std::vector<bool> forced_test;
  int holdout_used = 0;
  for (int i = 0; i < opt.episodes; ++i) {
    std::uint64_t es = util::Rng::mix(opt.seed, static_cast<std::uint64_t>(i) + 1);
    SceneDraw draw;
    SceneSpec s = sample_scene(es, opt.width, opt.height, opt.horizon,
                               opt.n_points, opt.flow_noise_sigma,
                               opt.grasp_offset, draw);
    bool hold = is_holdout(s);
    if (hold && holdout_used >= quota[2]) {
      draw.avoid_holdout = true;
      s = sample_scene(es, opt.width, opt.height, opt.horizon, opt.n_points,
                       opt.flow_noise_sigma, opt.grasp_offset, draw);
      hold = false;
    }
    if (hold) ++holdout_used;
    specs.push_back(std::move(s));
    forced_test.push_back(hold);
  }

  // Guarantee at least one held-out pair in test when a test split exists.
  if (holdout_used == 0 && quota[2] > 0) {
    int victim = opt.episodes - 1;
    SceneDraw draw;
    int tmpl = 3;  // "lift"
    int color = 0;  // "red"
    draw.force_template_color = {{tmpl, color}};
    specs[static_cast<std::size_t>(victim)] = sample_scene(
        util::Rng::mix(opt.seed, static_cast<std::uint64_t>(victim) + 1),
        opt.width, opt.height, opt.horizon, opt.n_points, opt.flow_noise_sigma,
        opt.grasp_offset, draw);
    forced_test[static_cast<std::size_t>(victim)] = true;
    holdout_used = 1;
  }

  // Shuffle the remaining indices and fill quotas: train, val, then test.
  std::vector<int> rest;
  for (int i = 0; i < opt.episodes; ++i)
    if (!forced_test[static_cast<std::size_t>(i)]) rest.push_back(i);
  util::Rng shuffle_rng(util::Rng::mix(opt.seed, 0x51170ull));
  for (std::size_t i = 0; i + 1 < rest.size(); ++i) {
    std::size_t j = static_cast<std::size_t>(
        shuffle_rng.uniform_int(static_cast<std::int64_t>(i),
                                static_cast<std::int64_t>(rest.size()) - 1));
    std::swap(rest[i], rest[j]);
  }
  std::vector<int> split_of(static_cast<std::size_t>(opt.episodes), 2);
  std::size_t cursor = 0;
  for (int sp = 0; sp < 2; ++sp)
    for (int k = 0; k < quota[static_cast<std::size_t>(sp)]; ++k)
      split_of[static_cast<std::size_t>(rest[cursor++])] = sp;
  // everything else (incl. forced holdouts) lands in test

  BuiltDataset built;
  built.root = out_dir;
  std::filesystem::create_directories(out_dir);
  for (const char* name : kSplitNames)
    std::filesystem::create_directories(out_dir / name);

  std::uint64_t digest = 0xcbf29ce484222325ull;
  for (int i = 0; i < opt.episodes; ++i) {
    GeneratedEpisode gen = generate_episode(specs[static_cast<std::size_t>(i)]);
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "ep%06d", i);
    gen.episode.id = idbuf;
    int sp = split_of[static_cast<std::size_t>(i)];
    std::string file = std::string(idbuf) + ".bin";
    data::save_episode(gen.episode, out_dir / kSplitNames[sp] / file);
    std::uint64_t ed = data::episode_digest(gen.episode);
    digest = util::fnv1a64(&ed, sizeof ed, digest);
    ManifestEntry me{gen.episode.id, file, gen.episode.instruction,
                     specs[static_cast<std::size_t>(i)].verb,
                     specs[static_cast<std::size_t>(i)].color_name};
    built.splits[static_cast<std::size_t>(sp)].push_back(std::move(me));
  }
  built.digest = digest;

  CameraModel cam = default_camera(opt.width, opt.height);
  for (int sp = 0; sp < 3; ++sp) {
    json j;
    j["version"] = 1;
    j["split"] = kSplitNames[sp];
    j["camera"] = {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx},
                   {"cy", cam.cy}, {"width", cam.width}, {"height", cam.height}};
    json eps = json::array();
    for (const ManifestEntry& me : built.splits[static_cast<std::size_t>(sp)]) {
      eps.push_back({{"id", me.id},
                     {"file", me.file},
                     {"instruction", me.instruction},
                     {"verb", me.verb},
                     {"color", me.color}});
    }
    j["episodes"] = eps;
    util::write_file(out_dir / kSplitNames[sp] / "manifest.json",
                     j.dump(2) + "\n");
  }
  json top;
  top["version"] = 1;
  top["seed"] = opt.seed;
  top["episodes"] = opt.episodes;
  top["digest"] = util::hex64(digest);
  top["horizon"] = opt.horizon;
  top["n_points"] = opt.n_points;
  top["width"] = opt.width;
  top["height"] = opt.height;
  top["flow_noise_sigma"] = opt.flow_noise_sigma;
  top["grasp_offset"] = {opt.grasp_offset[0], opt.grasp_offset[1],
                         opt.grasp_offset[2]};
  top["counts"] = {{"train", built.splits[0].size()},
                   {"val", built.splits[1].size()},
                   {"test", built.splits[2].size()}};
  util::write_file(out_dir / "dataset.json", top.dump(2) + "\n");
  write_vocabulary(out_dir / "vocab.json");
  return built;
}

LoadedSplit load_split(const std::filesystem::path& root,
                       const std::string& split) {
  LoadedSplit out;
  out.dir = root / split;
  json j = json::parse(util::read_file(out.dir / "manifest.json"));
  for (const auto& e : j.at("episodes")) {
    ManifestEntry me;
    me.id = e.at("id").get<std::string>();
    me.file = e.at("file").get<std::string>();
    me.instruction = e.at("instruction").get<std::string>();
    me.verb = e.at("verb").get<std::string>();
    me.color = e.at("color").get<std::string>();
    out.entries.push_back(std::move(me));
  }
  return out;
}

data::Episode LoadedSplit::load(std::size_t i) const {
  return data::load_episode(dir / entries.at(i).file);
}

}  // namespace lilac::synth
