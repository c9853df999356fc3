#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lilac/datamodel.hpp"
#include "lilac/util.hpp"

namespace lilac::prompt {

struct PromptMissing : Error {
  explicit PromptMissing(const std::string& m) : Error("PromptMissing: " + m) {}
};
struct Timeout : Error {
  explicit Timeout(const std::string& m) : Error("Timeout: " + m) {}
};
struct MalformedReply : Error {
  explicit MalformedReply(const std::string& m)
      : Error("MalformedReply: " + m) {}
};
struct NoPromptGenerated : Error {
  explicit NoPromptGenerated(const std::string& m)
      : Error("NoPromptGenerated: " + m) {}
};

/// Which prompt source drives a run. Exactly one kind is active.
struct PrompterSource {
  enum class Kind { kOracle, kRecorded, kRemote };
  Kind kind = Kind::kOracle;
  double oracle_noise_sigma = 0.0;    // oracle
  std::uint64_t oracle_seed = 0;      // oracle noise stream
  std::string recorded_path;          // recorded
  std::string remote_endpoint;        // remote, e.g. http://127.0.0.1:8000
  double remote_timeout_s = 5.0;      // remote
};

PrompterSource::Kind parse_source_kind(const std::string& name);
std::string source_kind_name(PrompterSource::Kind k);

/// RGB frame with the arrow burned in, plus the prompt that produced it.
struct PromptedImage {
  std::vector<std::uint8_t> pixels;  // width*height*3
  data::VisualPrompt prompt;
};

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

/// Centroid-based stand-in for the MLLM: start/end are the tracked-point
/// centroids at the first and last step; bbox is the tight pixel box over
/// the t=0 points. Gaussian noise (sigma, seeded) perturbs start/end before
/// clamping into the image.
data::VisualPrompt oracle_prompt(const data::Episode& e, double noise_sigma,
                                 std::uint64_t seed = 0);

/// JSON-lines store of {"id","start","end","bbox"} records.
class RecordedStore {
 public:
  static RecordedStore load(const std::filesystem::path& path,
                            const data::CameraModel& cam);
  std::optional<data::VisualPrompt> find(const std::string& id) const;
  std::size_t size() const { return prompts_.size(); }

 private:
  std::map<std::string, data::VisualPrompt> prompts_;
};

data::VisualPrompt recorded_prompt(const data::Episode& e,
                                   const RecordedStore& store);

/// POSTs {"image_b64","instruction"} to `endpoint` + "/prompt" and parses
/// {"start":[u,v],"end":[u,v],"bbox":[x0,y0,x1,y1]}. Coordinates are clamped
/// into the image; an unparseable or unclampable reply is an error.
data::VisualPrompt remote_prompt(const data::Episode& e,
                                 const std::string& endpoint,
                                 double timeout_s);

/// Dispatches on the configured source kind.
data::VisualPrompt make_prompt(const data::Episode& e,
                               const PrompterSource& src);

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Pixels covered by the arrow for `p`: the start->end segment plus a
/// two-segment head, each rasterized with the integer line rule below.
std::vector<std::pair<int, int>> arrow_pixels(const data::VisualPrompt& p,
                                              int width, int height);

/// Integer segment rasterization: steps along the major axis; the minor
/// coordinate is the exact rational value rounded half away from zero.
std::vector<std::pair<int, int>> line_pixels(int x0, int y0, int x1, int y1);

/// Burns the arrow into a copy of `rgb` in pure red (255,0,0), 1 px wide.
PromptedImage render_prompt(const std::vector<std::uint8_t>& rgb, int width,
                            int height, const data::VisualPrompt& p);

}  // namespace lilac::prompt
