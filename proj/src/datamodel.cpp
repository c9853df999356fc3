#include "lilac/datamodel.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace lilac::data {

// ---------------------------------------------------------------------------
// Quaternion helpers
// ---------------------------------------------------------------------------

Quat quat_normalize(const Quat& q) {
  double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (n == 0.0) throw Error("quat_normalize: zero quaternion");
  Quat u = q;
  for (double& v : u) v /= n;
  if (u[0] < 0)
    for (double& v : u) v = -v;  // canonical hemisphere
  return u;
}

Quat quat_mul(const Quat& a, const Quat& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

Quat quat_conj(const Quat& q) { return {q[0], -q[1], -q[2], -q[3]}; }

Mat3 quat_to_matrix(const Quat& q) {
  Quat u = quat_normalize(q);
  double w = u[0], x = u[1], y = u[2], z = u[3];
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
          2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
}

Quat matrix_to_quat(const Mat3& r) {
  // Shepperd's method: branch on the largest diagonal term.
  double tr = r[0] + r[4] + r[8];
  Quat q;
  if (tr > 0) {
    double s = std::sqrt(tr + 1.0) * 2;
    q = {0.25 * s, (r[7] - r[5]) / s, (r[2] - r[6]) / s, (r[3] - r[1]) / s};
  } else if (r[0] > r[4] && r[0] > r[8]) {
    double s = std::sqrt(1.0 + r[0] - r[4] - r[8]) * 2;
    q = {(r[7] - r[5]) / s, 0.25 * s, (r[1] + r[3]) / s, (r[2] + r[6]) / s};
  } else if (r[4] > r[8]) {
    double s = std::sqrt(1.0 + r[4] - r[0] - r[8]) * 2;
    q = {(r[2] - r[6]) / s, (r[1] + r[3]) / s, 0.25 * s, (r[5] + r[7]) / s};
  } else {
    double s = std::sqrt(1.0 + r[8] - r[0] - r[4]) * 2;
    q = {(r[3] - r[1]) / s, (r[2] + r[6]) / s, (r[5] + r[7]) / s, 0.25 * s};
  }
  return quat_normalize(q);
}

Vec3 quat_to_axis_angle(const Quat& q) {
  Quat u = quat_normalize(q);
  double w = u[0];
  double m2 = u[1] * u[1] + u[2] * u[2] + u[3] * u[3];
  double m = std::sqrt(m2);
  double h;
  if (m < 1e-3) {
    double w3 = w * w * w;
    h = 2.0 / w - 2.0 * m2 / (3.0 * w3) + 2.0 * m2 * m2 / (5.0 * w3 * w * w);
  } else {
    h = 2.0 * std::atan2(m, w) / m;
  }
  return {h * u[1], h * u[2], h * u[3]};
}

Quat axis_angle_to_quat(const Vec3& aa) {
  double u = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2];
  double s, c;
  if (u < 1e-8) {
    s = 0.5 - u / 48.0 + u * u / 3840.0;
    c = 1.0 - u / 8.0 + u * u / 384.0;
  } else {
    double th = std::sqrt(u);
    s = std::sin(0.5 * th) / th;
    c = std::cos(0.5 * th);
  }
  return {c, s * aa[0], s * aa[1], s * aa[2]};
}

Vec3 mat_apply(const Mat3& r, const Vec3& v) {
  return {r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
          r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
          r[6] * v[0] + r[7] * v[1] + r[8] * v[2]};
}

Pose6DoF Pose6DoF::from_matrix(const Mat3& r, const Vec3& t) {
  Pose6DoF p;
  p.rotation = matrix_to_quat(r);
  p.translation = t;
  return p;
}

Pose6DoF Pose6DoF::from_axis_angle(const Vec3& aa, const Vec3& t) {
  Pose6DoF p;
  p.rotation = axis_angle_to_quat(aa);
  p.translation = t;
  return p;
}

Vec3 Pose6DoF::apply(const Vec3& p) const {
  Vec3 r = mat_apply(matrix(), p);
  return {r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]};
}

Pose6DoF Pose6DoF::compose(const Pose6DoF& rhs) const {
  Pose6DoF out;
  out.rotation = quat_normalize(quat_mul(rotation, rhs.rotation));
  Vec3 rt = mat_apply(matrix(), rhs.translation);
  out.translation = {rt[0] + translation[0], rt[1] + translation[1],
                     rt[2] + translation[2]};
  return out;
}

Pose6DoF Pose6DoF::inverse() const {
  Pose6DoF out;
  out.rotation = quat_conj(quat_normalize(rotation));
  Vec3 t = mat_apply(quat_to_matrix(out.rotation), translation);
  out.translation = {-t[0], -t[1], -t[2]};
  return out;
}

float Episode::depth_at(double u, double v) const {
  int x = static_cast<int>(std::floor(u + 0.5));
  int y = static_cast<int>(std::floor(v + 0.5));
  x = std::max(0, std::min(camera.width - 1, x));
  y = std::max(0, std::min(camera.height - 1, y));
  return depth[static_cast<std::size_t>(y) * camera.width + x];
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'F', 'L', 'W'};
constexpr std::uint16_t kVersion = 1;

enum Section : std::uint32_t {
  kHeader = 1,
  kRgb = 2,
  kDepth = 3,
  kFlow = 4,
  kTrajectory = 5,
  kInstruction = 6,
  kPrompt = 7,
};

void begin_section(util::ByteWriter& w, std::uint32_t id,
                   const std::string& payload) {
  w.u32(id);
  w.u64(payload.size());
  w.bytes(payload.data(), payload.size());
}

}  // namespace

std::string serialize_episode(const Episode& e) {
  util::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kVersion);

  {
    util::ByteWriter h;
    h.str(e.id);
    h.f64(e.camera.fx);
    h.f64(e.camera.fy);
    h.f64(e.camera.cx);
    h.f64(e.camera.cy);
    h.u32(static_cast<std::uint32_t>(e.camera.width));
    h.u32(static_cast<std::uint32_t>(e.camera.height));
    h.u32(static_cast<std::uint32_t>(e.gt_flow.horizon));
    h.u32(static_cast<std::uint32_t>(e.gt_flow.n_points));
    begin_section(w, kHeader, h.buffer());
  }
  {
    std::string rgb(reinterpret_cast<const char*>(e.rgb.data()), e.rgb.size());
    begin_section(w, kRgb, rgb);
  }
  {
    util::ByteWriter d;
    for (float v : e.depth) d.f32(v);
    begin_section(w, kDepth, d.buffer());
  }
  {
    util::ByteWriter f;
    for (double v : e.gt_flow.coords) f.f32(static_cast<float>(v));
    begin_section(w, kFlow, f.buffer());
  }
  {
    util::ByteWriter t;
    for (const Pose6DoF& p : e.gt_trajectory) {
      t.f32(static_cast<float>(p.translation[0]));
      t.f32(static_cast<float>(p.translation[1]));
      t.f32(static_cast<float>(p.translation[2]));
      for (int i = 0; i < 4; ++i)
        t.f32(static_cast<float>(p.rotation[static_cast<std::size_t>(i)]));
    }
    begin_section(w, kTrajectory, t.buffer());
  }
  begin_section(w, kInstruction, e.instruction);
  if (e.prompt) {
    util::ByteWriter p;
    p.f64(e.prompt->start[0]);
    p.f64(e.prompt->start[1]);
    p.f64(e.prompt->end[0]);
    p.f64(e.prompt->end[1]);
    for (double v : e.prompt->bbox) p.f64(v);
    begin_section(w, kPrompt, p.buffer());
  }
  return w.take();
}

Episode deserialize_episode(std::string_view bytes) {
  util::ByteReader r(bytes);
  try {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
      throw CorruptPayload("bad magic bytes");
    std::uint16_t version = r.u16();
    if (version != kVersion)
      throw FormatVersionMismatch("episode record version " +
                                  std::to_string(version) + ", expected " +
                                  std::to_string(kVersion));

    Episode e;
    bool seen[8] = {false};
    while (r.remaining() > 0) {
      std::uint32_t id = r.u32();
      std::uint64_t len = r.u64();
      if (len > r.remaining()) throw CorruptPayload("section overruns file");
      if (id < 1 || id > 7) throw CorruptPayload("unknown section id");
      if (seen[id]) throw CorruptPayload("duplicate section");
      seen[id] = true;
      std::string payload(bytes.substr(r.position(), len));
      r.skip(len);
      util::ByteReader s(payload);
      switch (id) {
        case kHeader: {
          e.id = s.str();
          e.camera.fx = s.f64();
          e.camera.fy = s.f64();
          e.camera.cx = s.f64();
          e.camera.cy = s.f64();
          e.camera.width = static_cast<int>(s.u32());
          e.camera.height = static_cast<int>(s.u32());
          e.gt_flow.horizon = static_cast<int>(s.u32());
          e.gt_flow.n_points = static_cast<int>(s.u32());
          if (e.camera.width <= 0 || e.camera.height <= 0 ||
              e.gt_flow.horizon < 0 || e.gt_flow.n_points < 0)
            throw CorruptPayload("header dimensions out of range");
          break;
        }
        case kRgb: {
          if (!seen[kHeader]) throw CorruptPayload("rgb before header");
          std::size_t want = static_cast<std::size_t>(e.camera.width) *
                             e.camera.height * 3;
          if (payload.size() != want) throw CorruptPayload("rgb size");
          e.rgb.assign(payload.begin(), payload.end());
          break;
        }
        case kDepth: {
          if (!seen[kHeader]) throw CorruptPayload("depth before header");
          std::size_t want =
              static_cast<std::size_t>(e.camera.width) * e.camera.height;
          if (payload.size() != want * 4) throw CorruptPayload("depth size");
          e.depth.resize(want);
          for (std::size_t i = 0; i < want; ++i) e.depth[i] = s.f32();
          break;
        }
        case kFlow: {
          if (!seen[kHeader]) throw CorruptPayload("flow before header");
          std::size_t want = static_cast<std::size_t>(e.gt_flow.horizon) *
                             e.gt_flow.n_points * 2;
          if (payload.size() != want * 4) throw CorruptPayload("flow size");
          e.gt_flow.coords.resize(want);
          for (std::size_t i = 0; i < want; ++i)
            e.gt_flow.coords[i] = static_cast<double>(s.f32());
          break;
        }
        case kTrajectory: {
          if (!seen[kHeader]) throw CorruptPayload("trajectory before header");
          std::size_t want = static_cast<std::size_t>(e.gt_flow.horizon) * 7;
          if (payload.size() != want * 4)
            throw CorruptPayload("trajectory size");
          e.gt_trajectory.resize(static_cast<std::size_t>(e.gt_flow.horizon));
          for (Pose6DoF& p : e.gt_trajectory) {
            p.translation = {static_cast<double>(s.f32()),
                             static_cast<double>(s.f32()),
                             static_cast<double>(s.f32())};
            for (int i = 0; i < 4; ++i)
              p.rotation[static_cast<std::size_t>(i)] =
                  static_cast<double>(s.f32());
          }
          break;
        }
        case kInstruction:
          e.instruction = payload;
          break;
        case kPrompt: {
          if (payload.size() != 8 * 8) throw CorruptPayload("prompt size");
          VisualPrompt p;
          p.start[0] = s.f64();
          p.start[1] = s.f64();
          p.end[0] = s.f64();
          p.end[1] = s.f64();
          for (double& v : p.bbox) v = s.f64();
          e.prompt = p;
          break;
        }
        default:
          break;
      }
    }
    const char* names[] = {"",     "header",     "rgb",        "depth",
                           "flow", "trajectory", "instruction"};
    for (int id = kHeader; id <= kInstruction; ++id)
      if (!seen[id]) throw MissingField(std::string(names[id]) + " section");
    return e;
  } catch (const FormatVersionMismatch&) {
    throw;
  } catch (const MissingField&) {
    throw;
  } catch (const CorruptPayload&) {
    throw;
  } catch (const Error& err) {
    throw CorruptPayload(err.what());
  }
}

void save_episode(const Episode& e, const std::filesystem::path& path) {
  util::write_file(path, serialize_episode(e));
}

Episode load_episode(const std::filesystem::path& path) {
  return deserialize_episode(util::read_file(path));
}

std::uint64_t episode_digest(const Episode& e) {
  std::string bytes = serialize_episode(e);
  return util::fnv1a64(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

namespace {

void check_pose(const Pose6DoF& p, int t, std::vector<std::string>& out) {
  double n = std::sqrt(p.rotation[0] * p.rotation[0] +
                       p.rotation[1] * p.rotation[1] +
                       p.rotation[2] * p.rotation[2] +
                       p.rotation[3] * p.rotation[3]);
  // float32 serialization bounds the achievable norm accuracy at ~1e-7
  if (std::abs(n - 1.0) > 1e-6)
    out.push_back("pose " + std::to_string(t) + ": quaternion norm " +
                  std::to_string(n));
  if (n == 0.0) return;
  Mat3 r = p.matrix();
  // R R^T == I and det == +1 within 1e-9
  double worst = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k)
        dot += r[static_cast<std::size_t>(i * 3 + k)] *
               r[static_cast<std::size_t>(j * 3 + k)];
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  if (worst > 1e-9)
    out.push_back("pose " + std::to_string(t) + ": rotation not orthonormal");
  double det = r[0] * (r[4] * r[8] - r[5] * r[7]) -
               r[1] * (r[3] * r[8] - r[5] * r[6]) +
               r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (std::abs(det - 1.0) > 1e-9)
    out.push_back("pose " + std::to_string(t) + ": det(R) = " +
                  std::to_string(det));
}

}  // namespace

std::vector<std::string> validate(const Episode& e) {
  std::vector<std::string> v;
  const CameraModel& c = e.camera;
  if (c.width <= 0 || c.height <= 0)
    v.push_back("camera: non-positive image dims");
  if (!(c.fx > 0) || !(c.fy > 0)) v.push_back("camera: focal lengths must be > 0");
  if (!(c.cx >= 0 && c.cx < c.width))
    v.push_back("camera: cx outside [0,width)");
  if (!(c.cy >= 0 && c.cy < c.height))
    v.push_back("camera: cy outside [0,height)");

  std::size_t npx = static_cast<std::size_t>(std::max(c.width, 0)) *
                    static_cast<std::size_t>(std::max(c.height, 0));
  if (e.rgb.size() != npx * 3) v.push_back("rgb: size does not match camera dims");
  if (e.depth.size() != npx) v.push_back("depth: size does not match camera dims");

  const FlowSequence& f = e.gt_flow;
  if (f.horizon < 2) v.push_back("flow: horizon must be >= 2");
  if (f.n_points < 1) v.push_back("flow: needs at least one point");
  if (f.coords.size() != static_cast<std::size_t>(std::max(f.horizon, 0)) *
                             static_cast<std::size_t>(std::max(f.n_points, 0)) * 2) {
    v.push_back("flow: coordinate buffer size mismatch");
    return v;  // indexing below would be unsafe
  }
  for (int t = 0; t < f.horizon; ++t)
    for (int i = 0; i < f.n_points; ++i) {
      double x = f.x(t, i), y = f.y(t, i);
      if (!(x >= 0 && x < c.width && y >= 0 && y < c.height)) {
        std::ostringstream os;
        os << "flow: point (t=" << t << ", i=" << i << ") at (" << x << ","
           << y << ") outside [0," << c.width << ") x [0," << c.height << ")";
        v.push_back(os.str());
      }
    }

  if (static_cast<int>(e.gt_trajectory.size()) != f.horizon)
    v.push_back("trajectory: length " + std::to_string(e.gt_trajectory.size()) +
                " != horizon " + std::to_string(f.horizon));
  for (std::size_t t = 0; t < e.gt_trajectory.size(); ++t)
    check_pose(e.gt_trajectory[t], static_cast<int>(t), v);

  if (e.depth.size() == npx && f.horizon >= 1 &&
      f.coords.size() >= static_cast<std::size_t>(f.n_points) * 2) {
    for (int i = 0; i < f.n_points; ++i) {
      double x = f.x(0, i), y = f.y(0, i);
      if (x >= 0 && x < c.width && y >= 0 && y < c.height &&
          !(e.depth_at(x, y) > 0))
        v.push_back("depth: non-positive at tracked point " +
                    std::to_string(i) + " at t=0");
    }
  }

  if (e.prompt) {
    const VisualPrompt& p = *e.prompt;
    if (!(p.bbox[0] < p.bbox[2] && p.bbox[1] < p.bbox[3]))
      v.push_back("prompt: bbox not well-ordered");
    if (!(p.bbox[0] >= 0 && p.bbox[2] <= c.width && p.bbox[1] >= 0 &&
          p.bbox[3] <= c.height))
      v.push_back("prompt: bbox outside image");
    for (const auto& pt : {p.start, p.end})
      if (!(pt[0] >= 0 && pt[0] < c.width && pt[1] >= 0 && pt[1] < c.height))
        v.push_back("prompt: arrow endpoint outside image");
  }
  return v;
}

}  // namespace lilac::data
