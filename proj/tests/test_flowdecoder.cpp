#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "lilac/flowdecoder.hpp"
#include "lilac/util.hpp"

using namespace lilac;
using namespace lilac::model;
using data::Episode;
using data::FlowSequence;
using num::Graph;
using num::NodeId;
using num::Tensor;

namespace {

FlowModelConfig tiny_cfg(int horizon = 4, int n_points = 2) {
  FlowModelConfig c;
  c.adapter.d_model = 16;
  c.adapter.d_txt = 8;
  c.adapter.n_heads = 2;
  c.adapter.n_layers = 1;
  c.adapter.d_ff = 32;
  c.adapter.patch = 8;
  c.adapter.image_width = 16;
  c.adapter.image_height = 16;
  c.adapter.max_txt_len = 8;
  c.decoder.n_heads = 2;
  c.decoder.n_layers = 1;
  c.decoder.d_ff = 32;
  c.horizon = horizon;
  c.n_points = n_points;
  return c;
}

Vocabulary tiny_vocab() {
  return Vocabulary::from_words(
      {"move", "lift", "the", "red", "blue", "block", "ball", "left", "right"});
}

Episode tiny_episode(const FlowModelConfig& cfg, std::uint64_t seed) {
  util::Rng rng(seed);
  Episode e;
  int w = cfg.adapter.image_width, h = cfg.adapter.image_height;
  e.id = "ep_tiny" + std::to_string(seed);
  e.camera = {static_cast<double>(w), static_cast<double>(h),
              w / 2.0, h / 2.0, w, h};
  e.instruction = "move the red block right";
  e.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (auto& b : e.rgb) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  e.depth.assign(static_cast<std::size_t>(w) * h, 1.0f);
  e.gt_flow = FlowSequence(cfg.horizon, cfg.n_points);
  for (int t = 0; t < cfg.horizon; ++t)
    for (int i = 0; i < cfg.n_points; ++i)
      e.gt_flow.set(t, i, rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0));
  e.gt_trajectory.assign(static_cast<std::size_t>(cfg.horizon),
                         data::Pose6DoF::identity());
  data::VisualPrompt p;
  p.start = {3, 3};
  p.end = {w - 4.0, h - 4.0};
  p.bbox = {1, 1, w - 1.0, h - 1.0};
  e.prompt = p;
  return e;
}

}  // namespace

TEST_CASE("embed_step: zero points give bias plus positional embedding") {
  FlowModelConfig cfg = tiny_cfg();
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 1);
  // make the bias visible
  Tensor& bias = m.params.at("dec.step.b");
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.25 * (1 + (double)i);

  std::vector<std::array<double, 2>> zeros(static_cast<std::size_t>(cfg.n_points),
                                           {0.0, 0.0});
  Graph g;
  Binder bind(g, m.params);
  NodeId e = m.embed_step(g, bind, zeros, 2);
  const Tensor& pos = m.params.at("dec.pos");
  for (int d = 0; d < cfg.adapter.d_model; ++d)
    CHECK(g.value(e).at(0, d) ==
          bias[static_cast<std::size_t>(d)] + pos.at(2, d));
}

TEST_CASE("embed_step: permuting points changes the embedding; bounds checked") {
  FlowModelConfig cfg = tiny_cfg();
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 2);
  std::vector<std::array<double, 2>> pts = {{2, 3}, {9, 7}};
  std::vector<std::array<double, 2>> swapped = {{9, 7}, {2, 3}};
  Graph g;
  Binder bind(g, m.params);
  CHECK(g.value(m.embed_step(g, bind, pts, 0)).vec() !=
        g.value(m.embed_step(g, bind, swapped, 0)).vec());

  std::vector<std::array<double, 2>> bad = {{2, 3}, {16, 7}};
  CHECK_THROWS_AS((void)m.embed_step(g, bind, bad, 0), OutOfBounds);
}

TEST_CASE("teacher forcing is causally exact") {
  FlowModelConfig cfg = tiny_cfg(8, 4);
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 3);
  Episode e = tiny_episode(cfg, 7);

  auto logits_for = [&](const FlowSequence& gt) {
    Graph g;
    Binder bind(g, m.params);
    auto ctx = m.build_context(g, bind, e.rgb, e.instruction, *e.prompt);
    auto out = m.teacher_forward(g, bind, ctx.h_mm, gt);
    return std::make_pair(g.value(out.x_logits), g.value(out.y_logits));
  };

  auto [bx, by] = logits_for(e.gt_flow);
  for (int s = 1; s < cfg.horizon; ++s) {
    FlowSequence perturbed = e.gt_flow;
    for (int i = 0; i < cfg.n_points; ++i)
      perturbed.set(s, i, 15.0 - perturbed.x(s, i) * 0.5,
                    15.0 - perturbed.y(s, i) * 0.5);
    auto [px, py] = logits_for(perturbed);
    // logits for steps 1..s must be bit-identical; the input at step s only
    // reaches logits from step s+1 onward
    int rows_same = s * cfg.n_points;
    for (int r = 0; r < rows_same; ++r)
      for (int c = 0; c < cfg.width_bins(); ++c) {
        if (px.at(r, c) != bx.at(r, c)) {
          REQUIRE(px.at(r, c) == bx.at(r, c));
        }
        if (py.at(r, c) != by.at(r, c)) {
          REQUIRE(py.at(r, c) == by.at(r, c));
        }
      }
  }
}

TEST_CASE("zero-layer decoder with zero heads gives uniform cross entropy") {
  FlowModelConfig cfg = tiny_cfg();
  cfg.decoder.n_layers = 0;
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 4);
  for (const char* n : {"dec.head_x.w", "dec.head_x.b", "dec.head_y.w",
                        "dec.head_y.b"}) {
    Tensor& t = m.params.at(n);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
  }
  Episode e = tiny_episode(cfg, 9);
  Graph g;
  Binder bind(g, m.params);
  auto ctx = m.build_context(g, bind, e.rgb, e.instruction, *e.prompt);
  auto out = m.teacher_forward(g, bind, ctx.h_mm, e.gt_flow);
  NodeId loss = m.flow_loss(g, out, e.gt_flow);
  CHECK(g.value(loss)[0] ==
        doctest::Approx(std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("flow_loss trivial values and brute-force oracle") {
  FlowModelConfig cfg = tiny_cfg(3, 2);  // 2 predicted steps, 2 points
  cfg.adapter.image_width = cfg.adapter.image_height = 16;
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 5);
  Episode e = tiny_episode(cfg, 11);

  // hand-built logits: saturated one-hot on the ground-truth bins
  int rows = (cfg.horizon - 1) * cfg.n_points;
  Tensor hot_x({rows, 16}), hot_y({rows, 16});
  int r = 0;
  for (int t = 1; t < cfg.horizon; ++t)
    for (int i = 0; i < cfg.n_points; ++i, ++r) {
      hot_x.at(r, coord_bin(e.gt_flow.x(t, i), 16)) = 1000.0;
      hot_y.at(r, coord_bin(e.gt_flow.y(t, i), 16)) = 1000.0;
    }
  Graph g;
  FlowModel::DecoderOut out;
  out.x_logits = g.input(hot_x);
  out.y_logits = g.input(hot_y);
  out.cls = g.input(Tensor({1, cfg.adapter.d_model}));
  CHECK(g.value(m.flow_loss(g, out, e.gt_flow))[0] ==
        doctest::Approx(0.0).epsilon(1e-9));

  // uniform logits -> ln(bins)
  Graph g2;
  out.x_logits = g2.input(Tensor({rows, 16}));
  out.y_logits = g2.input(Tensor({rows, 16}));
  out.cls = g2.input(Tensor({1, cfg.adapter.d_model}));
  CHECK(g2.value(m.flow_loss(g2, out, e.gt_flow))[0] ==
        doctest::Approx(std::log(16.0)).epsilon(1e-12));

  // random logits vs a scalar cross-entropy oracle summed by hand
  util::Rng rng(13);
  Tensor rx({rows, 16}), ry({rows, 16});
  for (std::size_t i = 0; i < rx.size(); ++i) rx[i] = rng.uniform(-2, 2);
  for (std::size_t i = 0; i < ry.size(); ++i) ry[i] = rng.uniform(-2, 2);
  Graph g3;
  out.x_logits = g3.input(rx);
  out.y_logits = g3.input(ry);
  out.cls = g3.input(Tensor({1, cfg.adapter.d_model}));
  double got = g3.value(m.flow_loss(g3, out, e.gt_flow))[0];

  auto ce = [&](const Tensor& logits, int row, int target) {
    double mx = logits.at(row, 0);
    for (int c = 1; c < 16; ++c) mx = std::max(mx, logits.at(row, c));
    double z = 0;
    for (int c = 0; c < 16; ++c) z += std::exp(logits.at(row, c) - mx);
    return std::log(z) + mx - logits.at(row, target);
  };
  double oracle = 0;
  r = 0;
  for (int t = 1; t < cfg.horizon; ++t)
    for (int i = 0; i < cfg.n_points; ++i, ++r) {
      oracle += ce(rx, r, coord_bin(e.gt_flow.x(t, i), 16));
      oracle += ce(ry, r, coord_bin(e.gt_flow.y(t, i), 16));
    }
  oracle /= 2.0 * rows;
  CHECK(got == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("semantic alignment loss: exact match, offset, gradient routing") {
  FlowModelConfig cfg = tiny_cfg();
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 6);
  Episode e = tiny_episode(cfg, 15);

  // zero the projection weights so proj(cls) == bias exactly
  Tensor& w = m.params.at("dec.sem.w");
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0;

  // first pass to read the pooled embedding
  {
    Graph g;
    Binder bind(g, m.params);
    Adapter ad{cfg.adapter};
    TextEmbedding txt = ad.encode_text(g, bind, e.instruction, m.vocab);
    Tensor pooled = g.value(txt.pooled);
    Tensor& b = m.params.at("dec.sem.b");
    for (int d = 0; d < cfg.adapter.d_txt; ++d)
      b[static_cast<std::size_t>(d)] = pooled.at(0, d);
  }
  {
    Graph g;
    Binder bind(g, m.params);
    Adapter ad{cfg.adapter};
    TextEmbedding txt = ad.encode_text(g, bind, e.instruction, m.vocab);
    NodeId cls = g.input(Tensor({1, cfg.adapter.d_model}));
    CHECK(g.value(m.semantic_alignment_loss(g, bind, cls, txt))[0] == 0.0);
  }
  {
    Graph g;
    Binder bind(g, m.params);
    Adapter ad{cfg.adapter};
    TextEmbedding txt = ad.encode_text(g, bind, e.instruction, m.vocab);
    Tensor& b = m.params.at("dec.sem.b");
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += 0.25;
    NodeId cls = g.input(Tensor({1, cfg.adapter.d_model}));
    CHECK(g.value(m.semantic_alignment_loss(g, bind, cls, txt))[0] ==
          doctest::Approx(0.25).epsilon(1e-12));
  }

  // gradients reach both the decoder stack and the projection head, but not
  // the (detached) text target
  FlowModel m2 = FlowModel::create(cfg, tiny_vocab(), 7);
  Graph g;
  Binder bind(g, m2.params);
  auto ctx = m2.build_context(g, bind, e.rgb, e.instruction, *e.prompt);
  auto out = m2.teacher_forward(g, bind, ctx.h_mm, e.gt_flow);
  NodeId sem = m2.semantic_alignment_loss(g, bind, out.cls, ctx.txt);
  g.backward(sem);
  auto nonzero = [&](const char* n) {
    const Tensor& gr = g.grad(bind.bound().at(n));
    for (std::size_t i = 0; i < gr.size(); ++i)
      if (gr[i] != 0) return true;
    return false;
  };
  CHECK(nonzero("dec.sem.w"));
  CHECK(nonzero("dec.l0.self.q.w"));
  CHECK(nonzero("dec.cls"));

  // with the CLS input held constant, the only path from the text table to
  // this loss is the detached target, so no gradient may reach it
  Graph g4;
  Binder bind4(g4, m2.params);
  Adapter ad4{cfg.adapter};
  TextEmbedding txt4 = ad4.encode_text(g4, bind4, e.instruction, m2.vocab);
  NodeId cls4 = g4.input(Tensor({1, cfg.adapter.d_model}));
  g4.backward(m2.semantic_alignment_loss(g4, bind4, cls4, txt4));
  CHECK(g4.has_grad(bind4.bound().at("dec.sem.w")));
  CHECK(!g4.has_grad(bind4.bound().at("adapter.txt.vocab")));
}

TEST_CASE("total loss: ablation switch and weighted sum") {
  FlowModelConfig cfg = tiny_cfg();
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 8);
  Episode e = tiny_episode(cfg, 17);

  Graph g0;
  auto l0 = m.build_loss(g0, e, *e.prompt, 0.0);
  CHECK(!l0.sem.has_value());
  CHECK(g0.value(l0.total)[0] == g0.value(l0.flow)[0]);

  Graph g1;
  auto l1 = m.build_loss(g1, e, *e.prompt, 1.0);
  REQUIRE(l1.sem.has_value());
  CHECK(g1.value(l1.total)[0] ==
        doctest::Approx(g1.value(l1.flow)[0] + g1.value(*l1.sem)[0])
            .epsilon(1e-15));

  Graph g2;
  auto l2 = m.build_loss(g2, e, *e.prompt, 0.5);
  CHECK(g2.value(l2.total)[0] ==
        doctest::Approx(g2.value(l2.flow)[0] + 0.5 * g2.value(*l2.sem)[0])
            .epsilon(1e-15));
}

TEST_CASE("full objective gradient check on a tiny config") {
  FlowModelConfig cfg = tiny_cfg(3, 2);
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 9);
  Episode e = tiny_episode(cfg, 19);

  // Central differences measure the total derivative, so parameters feeding
  // the detached semantic target (the text table and its positions) are
  // checked under the flow-only objective; everything else under Eq-complete
  // flow + sem.
  auto check = [&](const std::vector<std::string>& names, double lambda) {
    std::vector<Tensor*> storage;
    for (auto& n : names) storage.push_back(&m.params.at(n));
    auto build = [&](Graph& g) -> num::GradCheckSetup {
      auto bundle = m.build_loss(g, e, *e.prompt, lambda);
      num::GradCheckSetup s;
      s.loss = bundle.total;
      for (auto& n : names) s.params.push_back(bundle.bound.at(n));
      return s;
    };
    return num::gradient_check(build, storage);
  };
  CHECK(check({"adapter.patch.w", "adapter.enc0.attn.v.w", "dec.step.w",
               "dec.pos", "dec.cls", "dec.l0.self.q.w", "dec.l0.cross.k.w",
               "dec.l0.ffn1.w", "dec.head_x.w", "dec.head_y.b", "dec.sem.w",
               "dec.final_ln.gain"},
              1.0) <= 1e-4);
  CHECK(check({"adapter.txt.vocab", "adapter.txt.pos", "adapter.txt.proj.w"},
              0.0) <= 1e-4);
}

TEST_CASE("greedy decode: bounds, determinism, one-hot round trip") {
  FlowModelConfig cfg = tiny_cfg();
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 10);
  Episode e = tiny_episode(cfg, 23);

  FlowSequence f1 = m.generate(e, *e.prompt);
  FlowSequence f2 = m.generate(e, *e.prompt);
  CHECK(f1 == f2);
  for (int t = 0; t < f1.horizon; ++t)
    for (int i = 0; i < f1.n_points; ++i) {
      CHECK(f1.x(t, i) >= 0);
      CHECK(f1.x(t, i) < cfg.adapter.image_width);
      CHECK(f1.y(t, i) >= 0);
      CHECK(f1.y(t, i) < cfg.adapter.image_height);
    }

  // a provider whose heads are one-hot on the (integer) ground truth
  // reproduces it exactly
  FlowSequence gt(cfg.horizon, cfg.n_points);
  util::Rng rng(29);
  for (int t = 0; t < cfg.horizon; ++t)
    for (int i = 0; i < cfg.n_points; ++i)
      gt.set(t, i, static_cast<double>(rng.uniform_int(0, 15)),
             static_cast<double>(rng.uniform_int(0, 15)));
  auto provider = [&](const FlowSequence& history, int t) -> StepLogits {
    CHECK(history.horizon == t);
    StepLogits sl;
    sl.x = Tensor({cfg.n_points, 16});
    sl.y = Tensor({cfg.n_points, 16});
    for (int i = 0; i < cfg.n_points; ++i) {
      sl.x.at(i, static_cast<int>(gt.x(t, i))) = 10.0;
      sl.y.at(i, static_cast<int>(gt.y(t, i))) = 10.0;
    }
    return sl;
  };
  std::vector<std::array<double, 2>> t0;
  for (int i = 0; i < cfg.n_points; ++i) t0.push_back({gt.x(0, i), gt.y(0, i)});
  FlowSequence decoded = greedy_decode(t0, cfg.horizon, provider);
  CHECK(decoded == gt);
}

TEST_CASE("per-axis head distributions normalize") {
  FlowModelConfig cfg = tiny_cfg();
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 12);
  Episode e = tiny_episode(cfg, 31);
  Graph g;
  Binder bind(g, m.params);
  auto ctx = m.build_context(g, bind, e.rgb, e.instruction, *e.prompt);
  StepLogits sl = m.decode_step(g, bind, ctx.h_mm, e.gt_flow, 1);
  NodeId probs = g.softmax_rows(g.input(sl.x));
  for (int i = 0; i < cfg.n_points; ++i) {
    double s = 0;
    for (int c = 0; c < 16; ++c) s += g.value(probs).at(i, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("flow model checkpoints round-trip") {
  FlowModelConfig cfg = tiny_cfg();
  cfg.no_vp = true;
  FlowModel m = FlowModel::create(cfg, tiny_vocab(), 13);
  auto dir = std::filesystem::temp_directory_path() / "lilac_fd_test";
  std::filesystem::create_directories(dir);
  CheckpointMeta meta;
  meta.step = 123;
  meta.ablate_no_srl = true;
  save_flow_model(dir / "m.ckpt", m, meta);
  auto [m2, meta2] = load_flow_model(dir / "m.ckpt");
  CHECK(meta2.step == 123);
  CHECK(meta2.ablate_no_srl);
  CHECK(meta2.ablate_no_vp);  // mirrors cfg.no_vp
  CHECK(m2.cfg.no_vp);
  CHECK(m2.cfg.adapter.d_model == 16);
  CHECK(m2.vocab.size() == m.vocab.size());
  REQUIRE(m2.params.tensors.size() == m.params.tensors.size());
  for (auto& [name, t] : m.params.tensors)
    CHECK(m2.params.at(name).vec() == t.vec());

  Episode e = tiny_episode(cfg, 37);
  CHECK(m.generate(e, *e.prompt) == m2.generate(e, *e.prompt));
}
