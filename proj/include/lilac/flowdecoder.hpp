#pragma once

#include <functional>
#include <optional>
#include <string>

#include "lilac/adapter.hpp"
#include "lilac/datamodel.hpp"
#include "lilac/prompter.hpp"

namespace lilac::model {

struct OutOfBounds : Error {
  explicit OutOfBounds(const std::string& m) : Error("OutOfBounds: " + m) {}
};

struct DecoderConfig {
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
};

struct FlowModelConfig {
  AdapterConfig adapter;
  DecoderConfig decoder;
  int horizon = 8;
  int n_points = 16;
  double lambda_sem = 1.0;
  bool no_vp = false;  // w/o-vp ablation: prompt tokens -> learned null token

  int width_bins() const { return adapter.image_width; }
  int height_bins() const { return adapter.image_height; }
  std::string to_json(const Vocabulary& vocab) const;
  static std::pair<FlowModelConfig, Vocabulary> from_json(const std::string&);
};

/// Per-step class distributions over pixel bins, steps 1..T-1.
struct FlowLogits {
  int horizon = 0, n_points = 0, width = 0, height = 0;
  std::vector<double> x;  // [(T-1) * n * width]
  std::vector<double> y;  // [(T-1) * n * height]

  std::span<const double> x_row(int t, int i) const {
    return {x.data() + (static_cast<std::size_t>(t - 1) * n_points + i) * width,
            static_cast<std::size_t>(width)};
  }
  std::span<const double> y_row(int t, int i) const {
    return {y.data() + (static_cast<std::size_t>(t - 1) * n_points + i) * height,
            static_cast<std::size_t>(height)};
  }
};

/// One decoded step: per-point logits over the x / y pixel bins.
struct StepLogits {
  num::Tensor x;  // [n, width]
  num::Tensor y;  // [n, height]
};

/// Greedy argmax decoding loop, decoupled from the network so tests can feed
/// synthetic logit providers. `next_logits(history, t)` sees steps 0..t-1.
data::FlowSequence greedy_decode(
    std::span<const std::array<double, 2>> init_points, int horizon,
    const std::function<StepLogits(const data::FlowSequence&, int)>& next_logits);

/// Rounds a ground-truth coordinate to its class bin (half up, clamped).
int coord_bin(double v, int bins);

/// Flow generator: the adapter plus the autoregressive decoder with per-axis
/// classification heads and the semantic-alignment head.
class FlowModel {
 public:
  FlowModelConfig cfg;
  Vocabulary vocab;
  ParamStore params;

  static FlowModel create(const FlowModelConfig& cfg, const Vocabulary& vocab,
                          std::uint64_t seed);

  /// Adapter forward for one episode's inputs. Renders the prompt arrow onto
  /// a copy of the frame unless the no-vp ablation is active.
  struct Context {
    num::NodeId h_mm;
    TextEmbedding txt;
  };
  Context build_context(num::Graph& g, Binder& bind,
                        std::span<const std::uint8_t> rgb,
                        const std::string& instruction,
                        const data::VisualPrompt& prompt) const;

  /// Embeds one tracking-point set (pixel coords -> [0,1] -> linear) plus the
  /// temporal positional embedding for step t.
  num::NodeId embed_step(num::Graph& g, Binder& bind,
                         std::span<const std::array<double, 2>> points,
                         int t) const;

  /// Teacher-forced decoder pass over the full ground-truth history.
  struct DecoderOut {
    num::NodeId x_logits;  // [(T-1)*n, width]
    num::NodeId y_logits;  // [(T-1)*n, height]
    num::NodeId cls;       // [1, d_model]
  };
  DecoderOut teacher_forward(num::Graph& g, Binder& bind, num::NodeId h_mm,
                             const data::FlowSequence& gt) const;

  /// Runs the decoder over the given history (steps 0..t-1) and returns the
  /// logits for step t.
  StepLogits decode_step(num::Graph& g, Binder& bind, num::NodeId h_mm,
                         const data::FlowSequence& history, int t) const;

  /// Mean cross entropy over steps 1..T-1, points, and both axes.
  num::NodeId flow_loss(num::Graph& g, const DecoderOut& out,
                        const data::FlowSequence& gt) const;
  /// L1 between the projected CLS token and the pooled instruction embedding
  /// (the embedding is a detached target, like a frozen language encoder).
  num::NodeId semantic_alignment_loss(num::Graph& g, Binder& bind,
                                      num::NodeId cls,
                                      const TextEmbedding& txt) const;

  struct LossBundle {
    num::NodeId total;
    num::NodeId flow;
    std::optional<num::NodeId> sem;  // absent when lambda_sem == 0
    std::map<std::string, num::NodeId> bound;
  };
  /// Composite objective: flow + lambda_sem * sem. lambda_sem == 0 returns
  /// the flow loss node itself (w/o-srl ablation).
  LossBundle build_loss(num::Graph& g, const data::Episode& e,
                        const data::VisualPrompt& prompt,
                        double lambda_sem) const;

  /// Greedy autoregressive generation from the given t=0 points.
  data::FlowSequence generate(std::span<const std::uint8_t> rgb,
                              const std::string& instruction,
                              const data::VisualPrompt& prompt,
                              std::span<const std::array<double, 2>> t0) const;
  data::FlowSequence generate(const data::Episode& e,
                              const data::VisualPrompt& prompt) const;
};

/// Checkpoint round trip (kind == "flow"); the vocabulary travels inside the
/// config JSON so checkpoints are self-contained.
void save_flow_model(const std::filesystem::path& path, const FlowModel& m,
                     CheckpointMeta meta);
std::pair<FlowModel, CheckpointMeta> load_flow_model(
    const std::filesystem::path& path);

}  // namespace lilac::model
