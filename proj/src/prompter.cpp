#include "lilac/prompter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace lilac::prompt {

using nlohmann::json;

PrompterSource::Kind parse_source_kind(const std::string& name) {
  if (name == "oracle") return PrompterSource::Kind::kOracle;
  if (name == "recorded") return PrompterSource::Kind::kRecorded;
  if (name == "remote") return PrompterSource::Kind::kRemote;
  throw Error("unknown prompt source: " + name);
}

std::string source_kind_name(PrompterSource::Kind k) {
  switch (k) {
    case PrompterSource::Kind::kOracle: return "oracle";
    case PrompterSource::Kind::kRecorded: return "recorded";
    case PrompterSource::Kind::kRemote: return "remote";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

data::VisualPrompt oracle_prompt(const data::Episode& e, double noise_sigma,
                                 std::uint64_t seed) {
  const data::FlowSequence& f = e.gt_flow;
  if (f.horizon < 1 || f.n_points < 1)
    throw Error("oracle_prompt: episode has no ground-truth flow");
  auto centroid = [&](int t) {
    std::array<double, 2> c{0, 0};
    for (int i = 0; i < f.n_points; ++i) {
      c[0] += f.x(t, i);
      c[1] += f.y(t, i);
    }
    c[0] /= f.n_points;
    c[1] /= f.n_points;
    return c;
  };
  data::VisualPrompt p;
  p.start = centroid(0);
  p.end = centroid(f.horizon - 1);

  double minx = f.x(0, 0), maxx = minx, miny = f.y(0, 0), maxy = miny;
  for (int i = 1; i < f.n_points; ++i) {
    minx = std::min(minx, f.x(0, i));
    maxx = std::max(maxx, f.x(0, i));
    miny = std::min(miny, f.y(0, i));
    maxy = std::max(maxy, f.y(0, i));
  }
  p.bbox = {std::max(0.0, std::floor(minx)), std::max(0.0, std::floor(miny)),
            std::min<double>(e.camera.width, std::floor(maxx) + 1),
            std::min<double>(e.camera.height, std::floor(maxy) + 1)};

  if (noise_sigma > 0) {
    util::Rng rng(util::Rng::mix(seed, util::fnv1a64(e.id.data(), e.id.size())));
    p.start[0] += noise_sigma * rng.normal();
    p.start[1] += noise_sigma * rng.normal();
    p.end[0] += noise_sigma * rng.normal();
    p.end[1] += noise_sigma * rng.normal();
  }
  for (auto* pt : {&p.start, &p.end}) {
    (*pt)[0] = std::clamp((*pt)[0], 0.0, static_cast<double>(e.camera.width - 1));
    (*pt)[1] = std::clamp((*pt)[1], 0.0, static_cast<double>(e.camera.height - 1));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Recorded
// ---------------------------------------------------------------------------

RecordedStore RecordedStore::load(const std::filesystem::path& path,
                                  const data::CameraModel& cam) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open recorded prompt store: " + path.string());
  RecordedStore store;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) -> Error {
      return Error("recorded prompt store " + path.string() + ": line " +
                   std::to_string(lineno) + ": " + why);
    };
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw fail("not a JSON object");
    if (!j.contains("id") || !j["id"].is_string()) throw fail("missing id");
    auto vec = [&](const char* key, std::size_t n) {
      if (!j.contains(key) || !j[key].is_array() || j[key].size() != n)
        throw fail(std::string(key) + " must be an array of " +
                   std::to_string(n));
      std::vector<double> out;
      for (const auto& v : j[key]) {
        if (!v.is_number()) throw fail(std::string(key) + " must be numeric");
        out.push_back(v.get<double>());
      }
      return out;
    };
    auto s = vec("start", 2), en = vec("end", 2), b = vec("bbox", 4);
    data::VisualPrompt p;
    p.start = {s[0], s[1]};
    p.end = {en[0], en[1]};
    p.bbox = {b[0], b[1], b[2], b[3]};
    for (const auto& pt : {p.start, p.end})
      if (!(pt[0] >= 0 && pt[0] < cam.width && pt[1] >= 0 && pt[1] < cam.height))
        throw fail("arrow endpoint outside image");
    if (!(p.bbox[0] >= 0 && p.bbox[0] < p.bbox[2] && p.bbox[2] <= cam.width &&
          p.bbox[1] >= 0 && p.bbox[1] < p.bbox[3] && p.bbox[3] <= cam.height))
      throw fail("bbox not well-ordered inside image");
    store.prompts_[j["id"].get<std::string>()] = p;
  }
  return store;
}

std::optional<data::VisualPrompt> RecordedStore::find(
    const std::string& id) const {
  auto it = prompts_.find(id);
  if (it == prompts_.end()) return std::nullopt;
  return it->second;
}

data::VisualPrompt recorded_prompt(const data::Episode& e,
                                   const RecordedStore& store) {
  auto p = store.find(e.id);
  if (!p) throw PromptMissing("no recorded prompt for episode " + e.id);
  return *p;
}

// ---------------------------------------------------------------------------
// Remote
// ---------------------------------------------------------------------------

data::VisualPrompt remote_prompt(const data::Episode& e,
                                 const std::string& endpoint,
                                 double timeout_s) {
  httplib::Client cli(endpoint);
  auto micros = static_cast<std::uint64_t>(timeout_s * 1e6);
  cli.set_connection_timeout(0, micros);
  cli.set_read_timeout(0, micros);
  cli.set_write_timeout(0, micros);

  json req;
  req["image_b64"] = util::base64_encode(e.rgb.data(), e.rgb.size());
  req["instruction"] = e.instruction;
  auto res = cli.Post("/prompt", req.dump(), "application/json");
  if (!res) {
    throw Timeout("remote prompter at " + endpoint + " unreachable (" +
                  httplib::to_string(res.error()) + ")");
  }
  if (res->status != 200)
    throw MalformedReply("remote prompter returned HTTP " +
                         std::to_string(res->status));
  json j = json::parse(res->body, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw MalformedReply("remote prompter reply is not a JSON object");
  if (!j.contains("start") && !j.contains("end") && !j.contains("bbox"))
    throw NoPromptGenerated("remote prompter produced no visual prompt");

  auto vec = [&](const char* key, std::size_t n) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != n)
      throw MalformedReply(std::string("remote prompter reply: bad ") + key);
    std::vector<double> out;
    for (const auto& v : j[key]) {
      if (!v.is_number())
        throw MalformedReply(std::string("remote prompter reply: bad ") + key);
      out.push_back(v.get<double>());
    }
    return out;
  };
  auto s = vec("start", 2), en = vec("end", 2), b = vec("bbox", 4);
  for (double v : s)
    if (!std::isfinite(v)) throw MalformedReply("non-finite start");
  for (double v : en)
    if (!std::isfinite(v)) throw MalformedReply("non-finite end");
  for (double v : b)
    if (!std::isfinite(v)) throw MalformedReply("non-finite bbox");

  const data::CameraModel& cam = e.camera;
  data::VisualPrompt p;
  p.start = {std::clamp(s[0], 0.0, static_cast<double>(cam.width - 1)),
             std::clamp(s[1], 0.0, static_cast<double>(cam.height - 1))};
  p.end = {std::clamp(en[0], 0.0, static_cast<double>(cam.width - 1)),
           std::clamp(en[1], 0.0, static_cast<double>(cam.height - 1))};
  p.bbox = {std::clamp(b[0], 0.0, static_cast<double>(cam.width)),
            std::clamp(b[1], 0.0, static_cast<double>(cam.height)),
            std::clamp(b[2], 0.0, static_cast<double>(cam.width)),
            std::clamp(b[3], 0.0, static_cast<double>(cam.height))};
  if (!(p.bbox[0] < p.bbox[2] && p.bbox[1] < p.bbox[3]))
    throw MalformedReply("bbox degenerate after clamping");
  return p;
}

data::VisualPrompt make_prompt(const data::Episode& e,
                               const PrompterSource& src) {
  switch (src.kind) {
    case PrompterSource::Kind::kOracle:
      return oracle_prompt(e, src.oracle_noise_sigma, src.oracle_seed);
    case PrompterSource::Kind::kRecorded: {
      RecordedStore store = RecordedStore::load(src.recorded_path, e.camera);
      return recorded_prompt(e, store);
    }
    case PrompterSource::Kind::kRemote:
      return remote_prompt(e, src.remote_endpoint, src.remote_timeout_s);
  }
  throw Error("unreachable prompt source kind");
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

std::vector<std::pair<int, int>> line_pixels(int x0, int y0, int x1, int y1) {
  // Major-axis stepping; the minor coordinate is round-half-away-from-zero of
  // the exact rational offset, computed in integers.
  auto round_ratio = [](long long num, long long den) -> long long {
    // round(num/den), den > 0, ties away from zero
    long long mag = (2 * std::llabs(num) + den) / (2 * den);
    return num >= 0 ? mag : -mag;
  };
  std::vector<std::pair<int, int>> px;
  long long dx = x1 - x0, dy = y1 - y0;
  long long adx = std::llabs(dx), ady = std::llabs(dy);
  if (adx == 0 && ady == 0) {
    px.emplace_back(x0, y0);
    return px;
  }
  if (adx >= ady) {
    long long sx = dx > 0 ? 1 : -1;
    for (long long k = 0; k <= adx; ++k) {
      long long x = x0 + sx * k;
      long long y = y0 + round_ratio(k * dy * sx, adx);
      px.emplace_back(static_cast<int>(x), static_cast<int>(y));
    }
  } else {
    long long sy = dy > 0 ? 1 : -1;
    for (long long k = 0; k <= ady; ++k) {
      long long y = y0 + sy * k;
      long long x = x0 + round_ratio(k * dx * sy, ady);
      px.emplace_back(static_cast<int>(x), static_cast<int>(y));
    }
  }
  return px;
}

std::vector<std::pair<int, int>> arrow_pixels(const data::VisualPrompt& p,
                                              int width, int height) {
  auto rd = [](double v) { return static_cast<int>(std::floor(v + 0.5)); };
  int x0 = rd(p.start[0]), y0 = rd(p.start[1]);
  int x1 = rd(p.end[0]), y1 = rd(p.end[1]);

  std::vector<std::pair<int, int>> out = line_pixels(x0, y0, x1, y1);
  if (x0 != x1 || y0 != y1) {
    constexpr double head_len = 5.0;
    constexpr double head_angle = M_PI / 6.0;  // 30 degrees
    double ang = std::atan2(static_cast<double>(y1 - y0),
                            static_cast<double>(x1 - x0));
    for (double side : {+1.0, -1.0}) {
      double a = ang + M_PI + side * head_angle;  // swept back from the tip
      int hx = rd(x1 + head_len * std::cos(a));
      int hy = rd(y1 + head_len * std::sin(a));
      auto seg = line_pixels(x1, y1, hx, hy);
      out.insert(out.end(), seg.begin(), seg.end());
    }
  }
  std::erase_if(out, [&](const std::pair<int, int>& q) {
    return q.first < 0 || q.first >= width || q.second < 0 || q.second >= height;
  });
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) {
              return a.second != b.second ? a.second < b.second
                                          : a.first < b.first;
            });
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

PromptedImage render_prompt(const std::vector<std::uint8_t>& rgb, int width,
                            int height, const data::VisualPrompt& p) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw Error("render_prompt: rgb buffer does not match dims");
  PromptedImage out;
  out.pixels = rgb;
  out.prompt = p;
  for (auto [x, y] : arrow_pixels(p, width, height)) {
    std::uint8_t* px =
        out.pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    px[0] = 255;
    px[1] = 0;
    px[2] = 0;
  }
  return out;
}

}  // namespace lilac::prompt
