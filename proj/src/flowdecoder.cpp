#include "lilac/flowdecoder.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace lilac::model {

using data::FlowSequence;
using num::Graph;
using num::NodeId;
using num::Tensor;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config serialization
// ---------------------------------------------------------------------------

std::string FlowModelConfig::to_json(const Vocabulary& vocab) const {
  json j;
  j["adapter"] = {{"d_model", adapter.d_model},
                  {"d_txt", adapter.d_txt},
                  {"n_heads", adapter.n_heads},
                  {"n_layers", adapter.n_layers},
                  {"d_ff", adapter.d_ff},
                  {"patch", adapter.patch},
                  {"image_width", adapter.image_width},
                  {"image_height", adapter.image_height},
                  {"max_txt_len", adapter.max_txt_len}};
  j["decoder"] = {{"n_heads", decoder.n_heads},
                  {"n_layers", decoder.n_layers},
                  {"d_ff", decoder.d_ff}};
  j["horizon"] = horizon;
  j["n_points"] = n_points;
  j["lambda_sem"] = lambda_sem;
  j["no_vp"] = no_vp;
  j["vocab"] = vocab.words();
  return j.dump();
}

std::pair<FlowModelConfig, Vocabulary> FlowModelConfig::from_json(
    const std::string& s) {
  json j = json::parse(s);
  FlowModelConfig c;
  const json& a = j.at("adapter");
  c.adapter.d_model = a.at("d_model").get<int>();
  c.adapter.d_txt = a.at("d_txt").get<int>();
  c.adapter.n_heads = a.at("n_heads").get<int>();
  c.adapter.n_layers = a.at("n_layers").get<int>();
  c.adapter.d_ff = a.at("d_ff").get<int>();
  c.adapter.patch = a.at("patch").get<int>();
  c.adapter.image_width = a.at("image_width").get<int>();
  c.adapter.image_height = a.at("image_height").get<int>();
  c.adapter.max_txt_len = a.at("max_txt_len").get<int>();
  const json& d = j.at("decoder");
  c.decoder.n_heads = d.at("n_heads").get<int>();
  c.decoder.n_layers = d.at("n_layers").get<int>();
  c.decoder.d_ff = d.at("d_ff").get<int>();
  c.horizon = j.at("horizon").get<int>();
  c.n_points = j.at("n_points").get<int>();
  c.lambda_sem = j.at("lambda_sem").get<double>();
  c.no_vp = j.at("no_vp").get<bool>();
  std::vector<std::string> words = j.at("vocab").get<std::vector<std::string>>();
  if (words.empty() || words[0] != "<unk>")
    throw Error("flow model config: vocab must start with <unk>");
  words.erase(words.begin());
  return {c, Vocabulary::from_words(words)};
}

// ---------------------------------------------------------------------------
// Greedy decoding loop
// ---------------------------------------------------------------------------

int coord_bin(double v, int bins) {
  int b = static_cast<int>(std::floor(v + 0.5));
  return std::clamp(b, 0, bins - 1);
}

data::FlowSequence greedy_decode(
    std::span<const std::array<double, 2>> init_points, int horizon,
    const std::function<StepLogits(const data::FlowSequence&, int)>& next_logits) {
  int n = static_cast<int>(init_points.size());
  FlowSequence out(horizon, n);
  for (int i = 0; i < n; ++i)
    out.set(0, i, init_points[static_cast<std::size_t>(i)][0],
            init_points[static_cast<std::size_t>(i)][1]);
  FlowSequence history(1, n);
  history.coords = std::vector<double>(out.coords.begin(),
                                       out.coords.begin() + 2 * n);
  for (int t = 1; t < horizon; ++t) {
    StepLogits sl = next_logits(history, t);
    if (sl.x.dim(0) != n || sl.y.dim(0) != n)
      throw num::ShapeMismatch("greedy_decode: logits row count");
    for (int i = 0; i < n; ++i) {
      auto argmax = [](const Tensor& m, int row) {
        int best = 0;
        for (int c = 1; c < m.dim(1); ++c)
          if (m.at(row, c) > m.at(row, best)) best = c;
        return best;
      };
      out.set(t, i, static_cast<double>(argmax(sl.x, i)),
              static_cast<double>(argmax(sl.y, i)));
    }
    history.horizon = t + 1;
    history.coords.insert(history.coords.end(), out.coords.begin() + 2 * n * t,
                          out.coords.begin() + 2 * n * (t + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// FlowModel
// ---------------------------------------------------------------------------

namespace {

void declare_decoder(ParamStore& ps, const FlowModelConfig& cfg) {
  int d = cfg.adapter.d_model;
  declare_linear(ps, "dec.step", 2 * cfg.n_points, d);
  ps.create("dec.pos", {cfg.horizon, d});
  ps.create("dec.cls", {1, d});
  NnDims dims{d, cfg.decoder.n_heads, cfg.decoder.d_ff};
  for (int l = 0; l < cfg.decoder.n_layers; ++l)
    declare_decoder_layer(ps, "dec.l" + std::to_string(l), dims);
  if (cfg.decoder.n_layers > 0) declare_layer_norm(ps, "dec.final_ln", d);
  declare_linear(ps, "dec.head_x", d, cfg.n_points * cfg.width_bins());
  declare_linear(ps, "dec.head_y", d, cfg.n_points * cfg.height_bins());
  declare_linear(ps, "dec.sem", d, cfg.adapter.d_txt);
}

}  // namespace

FlowModel FlowModel::create(const FlowModelConfig& cfg, const Vocabulary& vocab,
                            std::uint64_t seed) {
  FlowModel m;
  m.cfg = cfg;
  m.vocab = vocab;
  Adapter{cfg.adapter}.declare(m.params, vocab.size());
  declare_decoder(m.params, cfg);
  init_params(m.params, seed);
  return m;
}

FlowModel::Context FlowModel::build_context(
    Graph& g, Binder& bind, std::span<const std::uint8_t> rgb,
    const std::string& instruction, const data::VisualPrompt& prompt) const {
  Adapter ad{cfg.adapter};
  NodeId img = ad.encode_image(g, bind, rgb);
  TextEmbedding txt = ad.encode_text(g, bind, instruction, vocab);
  std::optional<NodeId> vp;
  if (!cfg.no_vp) {
    prompt::PromptedImage pi = prompt::render_prompt(
        std::vector<std::uint8_t>(rgb.begin(), rgb.end()),
        cfg.adapter.image_width, cfg.adapter.image_height, prompt);
    vp = ad.encode_image(g, bind, pi.pixels);
  }
  Context ctx;
  ctx.h_mm = ad.fuse(g, bind, img, txt, vp);
  ctx.txt = txt;
  return ctx;
}

NodeId FlowModel::embed_step(Graph& g, Binder& bind,
                             std::span<const std::array<double, 2>> points,
                             int t) const {
  if (static_cast<int>(points.size()) != cfg.n_points)
    throw num::ShapeMismatch("embed_step: expected " +
                             std::to_string(cfg.n_points) + " points");
  if (t < 0 || t >= cfg.horizon)
    throw OutOfBounds("embed_step: step " + std::to_string(t));
  Tensor flat({1, 2 * cfg.n_points});
  for (int i = 0; i < cfg.n_points; ++i) {
    double x = points[static_cast<std::size_t>(i)][0];
    double y = points[static_cast<std::size_t>(i)][1];
    if (!(x >= 0 && x < cfg.adapter.image_width && y >= 0 &&
          y < cfg.adapter.image_height))
      throw OutOfBounds("embed_step: point " + std::to_string(i) + " at (" +
                        std::to_string(x) + "," + std::to_string(y) +
                        ") outside the image");
    flat[static_cast<std::size_t>(2 * i)] = x / cfg.adapter.image_width;
    flat[static_cast<std::size_t>(2 * i + 1)] = y / cfg.adapter.image_height;
  }
  NodeId e = linear(g, bind, "dec.step", g.input(std::move(flat)));
  return g.add(e, g.gather_rows(bind("dec.pos"), {t}));
}

namespace {

std::vector<std::array<double, 2>> step_points(const FlowSequence& f, int t) {
  std::vector<std::array<double, 2>> pts;
  pts.reserve(static_cast<std::size_t>(f.n_points));
  for (int i = 0; i < f.n_points; ++i) pts.push_back({f.x(t, i), f.y(t, i)});
  return pts;
}

}  // namespace

FlowModel::DecoderOut FlowModel::teacher_forward(Graph& g, Binder& bind,
                                                 NodeId h_mm,
                                                 const FlowSequence& gt) const {
  if (gt.horizon != cfg.horizon || gt.n_points != cfg.n_points)
    throw num::ShapeMismatch("teacher_forward: flow dims do not match config");
  int d = cfg.adapter.d_model;
  std::vector<NodeId> rows;
  for (int t = 0; t + 1 < cfg.horizon; ++t)
    rows.push_back(embed_step(g, bind, step_points(gt, t), t));
  NodeId cls = g.add(bind("dec.cls"),
                     g.gather_rows(bind("dec.pos"), {cfg.horizon - 1}));
  rows.push_back(cls);
  NodeId x = g.concat_rows(rows);
  NnDims dims{d, cfg.decoder.n_heads, cfg.decoder.d_ff};
  for (int l = 0; l < cfg.decoder.n_layers; ++l)
    x = decoder_layer(g, bind, "dec.l" + std::to_string(l), dims, x, h_mm,
                      /*causal_self=*/true);
  if (cfg.decoder.n_layers > 0) x = layer_norm(g, bind, "dec.final_ln", x);

  DecoderOut out;
  NodeId steps = g.slice_rows(x, 0, cfg.horizon - 1);
  out.x_logits = g.reshape(linear(g, bind, "dec.head_x", steps),
                           {(cfg.horizon - 1) * cfg.n_points, cfg.width_bins()});
  out.y_logits = g.reshape(linear(g, bind, "dec.head_y", steps),
                           {(cfg.horizon - 1) * cfg.n_points, cfg.height_bins()});
  out.cls = g.slice_rows(x, cfg.horizon - 1, cfg.horizon);
  return out;
}

StepLogits FlowModel::decode_step(Graph& g, Binder& bind, NodeId h_mm,
                                  const FlowSequence& history, int t) const {
  if (t < 1 || t >= cfg.horizon)
    throw OutOfBounds("decode_step: step " + std::to_string(t));
  if (history.horizon < t)
    throw num::ShapeMismatch("decode_step: history shorter than step");
  int d = cfg.adapter.d_model;
  std::vector<NodeId> rows;
  for (int s = 0; s < t; ++s)
    rows.push_back(embed_step(g, bind, step_points(history, s), s));
  NodeId x = g.concat_rows(rows);
  NnDims dims{d, cfg.decoder.n_heads, cfg.decoder.d_ff};
  for (int l = 0; l < cfg.decoder.n_layers; ++l)
    x = decoder_layer(g, bind, "dec.l" + std::to_string(l), dims, x, h_mm,
                      true);
  if (cfg.decoder.n_layers > 0) x = layer_norm(g, bind, "dec.final_ln", x);
  NodeId last = g.slice_rows(x, t - 1, t);
  NodeId lx = g.reshape(linear(g, bind, "dec.head_x", last),
                        {cfg.n_points, cfg.width_bins()});
  NodeId ly = g.reshape(linear(g, bind, "dec.head_y", last),
                        {cfg.n_points, cfg.height_bins()});
  return {g.value(lx), g.value(ly)};
}

NodeId FlowModel::flow_loss(Graph& g, const DecoderOut& out,
                            const FlowSequence& gt) const {
  std::vector<int> tx, ty;
  for (int t = 1; t < cfg.horizon; ++t)
    for (int i = 0; i < cfg.n_points; ++i) {
      tx.push_back(coord_bin(gt.x(t, i), cfg.width_bins()));
      ty.push_back(coord_bin(gt.y(t, i), cfg.height_bins()));
    }
  NodeId ce_x = g.cross_entropy_rows(out.x_logits, tx);
  NodeId ce_y = g.cross_entropy_rows(out.y_logits, ty);
  // mean over all (step, point, axis) terms; both axes carry equal counts
  return g.scale(g.add(ce_x, ce_y), 0.5);
}

NodeId FlowModel::semantic_alignment_loss(Graph& g, Binder& bind, NodeId cls,
                                          const TextEmbedding& txt) const {
  NodeId proj = linear(g, bind, "dec.sem", cls);
  return g.l1_loss(proj, g.stop_grad(txt.pooled));
}

FlowModel::LossBundle FlowModel::build_loss(Graph& g, const data::Episode& e,
                                            const data::VisualPrompt& prompt,
                                            double lambda_sem) const {
  Binder bind(g, params);
  Context ctx = build_context(g, bind, e.rgb, e.instruction, prompt);
  DecoderOut out = teacher_forward(g, bind, ctx.h_mm, e.gt_flow);
  LossBundle bundle;
  bundle.flow = flow_loss(g, out, e.gt_flow);
  if (lambda_sem != 0.0) {
    bundle.sem = semantic_alignment_loss(g, bind, out.cls, ctx.txt);
    bundle.total = g.add(bundle.flow, g.scale(*bundle.sem, lambda_sem));
  } else {
    bundle.total = bundle.flow;
  }
  bundle.bound = bind.bound();
  return bundle;
}

data::FlowSequence FlowModel::generate(
    std::span<const std::uint8_t> rgb, const std::string& instruction,
    const data::VisualPrompt& prompt,
    std::span<const std::array<double, 2>> t0) const {
  Graph g;
  Binder bind(g, params);
  Context ctx = build_context(g, bind, rgb, instruction, prompt);
  return greedy_decode(
      t0, cfg.horizon, [&](const FlowSequence& history, int t) {
        return decode_step(g, bind, ctx.h_mm, history, t);
      });
}

data::FlowSequence FlowModel::generate(const data::Episode& e,
                                       const data::VisualPrompt& prompt) const {
  auto pts = step_points(e.gt_flow, 0);
  return generate(e.rgb, e.instruction, prompt, pts);
}

void save_flow_model(const std::filesystem::path& path, const FlowModel& m,
                     CheckpointMeta meta) {
  meta.kind = "flow";
  meta.config_json = m.cfg.to_json(m.vocab);
  meta.ablate_no_vp = m.cfg.no_vp;
  save_checkpoint(path, m.params, meta);
}

std::pair<FlowModel, CheckpointMeta> load_flow_model(
    const std::filesystem::path& path) {
  auto [ps, meta] = load_checkpoint(path);
  if (meta.kind != "flow")
    throw Error("checkpoint " + path.string() + " is not a flow model (kind=" +
                meta.kind + ")");
  auto [cfg, vocab] = FlowModelConfig::from_json(meta.config_json);
  FlowModel m;
  m.cfg = cfg;
  m.vocab = vocab;
  m.params = std::move(ps);
  return {std::move(m), std::move(meta)};
}

}  // namespace lilac::model
