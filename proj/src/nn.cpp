#include "lilac/nn.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "lilac/util.hpp"

namespace lilac::model {

using num::NodeId;
using num::Tensor;

// ---------------------------------------------------------------------------
// ParamStore init / checkpoints
// ---------------------------------------------------------------------------

void init_params(ParamStore& ps, std::uint64_t seed) {
  for (auto& [name, t] : ps.tensors) {
    util::Rng rng(util::Rng::mix(seed, util::fnv1a64(name.data(), name.size())));
    if (t.rank() == 2) {
      double limit = std::sqrt(6.0 / (t.dim(0) + t.dim(1)));
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = rng.uniform(-limit, limit);
    } else if (name.size() > 5 && name.rfind(".gain") == name.size() - 5) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
    }
  }
}

namespace {
constexpr char kCkptMagic[4] = {'L', 'C', 'K', 'P'};
constexpr std::uint16_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& ps,
                     const CheckpointMeta& meta) {
  util::ByteWriter w;
  w.bytes(kCkptMagic, 4);
  w.u16(kCkptVersion);
  nlohmann::json m;
  m["kind"] = meta.kind;
  m["config"] = meta.config_json;
  m["step"] = meta.step;
  m["seed"] = meta.seed;
  m["ablate_no_srl"] = meta.ablate_no_srl;
  m["ablate_no_vp"] = meta.ablate_no_vp;
  m["dataset_digest"] = meta.dataset_digest;
  w.str(m.dump());
  w.u32(static_cast<std::uint32_t>(ps.tensors.size()));
  for (const auto& [name, t] : ps.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      w.u32(static_cast<std::uint32_t>(t.dim(i)));
    w.bytes(t.data(), t.size() * sizeof(double));
  }
  util::write_file(path, w.buffer());
}

std::pair<ParamStore, CheckpointMeta> load_checkpoint(
    const std::filesystem::path& path) {
  std::string bytes = util::read_file(path);
  util::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCkptMagic, 4) != 0)
    throw Error("checkpoint " + path.string() + ": bad magic");
  std::uint16_t version = r.u16();
  if (version != kCkptVersion)
    throw Error("checkpoint " + path.string() + ": unsupported version " +
                std::to_string(version));
  nlohmann::json m = nlohmann::json::parse(r.str());
  CheckpointMeta meta;
  meta.kind = m.value("kind", "");
  meta.config_json = m.value("config", "");
  meta.step = m.value("step", std::uint64_t{0});
  meta.seed = m.value("seed", std::uint64_t{0});
  meta.ablate_no_srl = m.value("ablate_no_srl", false);
  meta.ablate_no_vp = m.value("ablate_no_vp", false);
  meta.dataset_digest = m.value("dataset_digest", "");
  ParamStore ps;
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    std::uint32_t rank = r.u32();
    num::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<int>(r.u32()));
    Tensor t(shape);
    r.bytes(t.data(), t.size() * sizeof(double));
    ps.tensors.emplace(std::move(name), std::move(t));
  }
  if (r.remaining() != 0)
    throw Error("checkpoint " + path.string() + ": trailing bytes");
  return {std::move(ps), std::move(meta)};
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

void declare_linear(ParamStore& ps, const std::string& prefix, int d_in,
                    int d_out) {
  ps.create(prefix + ".w", {d_in, d_out});
  ps.create(prefix + ".b", {d_out});
}

NodeId linear(num::Graph& g, Binder& bind, const std::string& prefix,
              NodeId x) {
  return g.add_row(g.matmul(x, bind(prefix + ".w")), bind(prefix + ".b"));
}

void declare_layer_norm(ParamStore& ps, const std::string& prefix, int d) {
  ps.create(prefix + ".gain", {d});
  ps.create(prefix + ".bias", {d});
}

NodeId layer_norm(num::Graph& g, Binder& bind, const std::string& prefix,
                  NodeId x) {
  return g.layer_norm(x, bind(prefix + ".gain"), bind(prefix + ".bias"));
}

void declare_mha(ParamStore& ps, const std::string& prefix, int d) {
  declare_linear(ps, prefix + ".q", d, d);
  declare_linear(ps, prefix + ".k", d, d);
  declare_linear(ps, prefix + ".v", d, d);
  declare_linear(ps, prefix + ".o", d, d);
}

NodeId mha(num::Graph& g, Binder& bind, const std::string& prefix,
           NodeId q_in, NodeId kv_in, int n_heads, bool causal) {
  int d = g.value(q_in).dim(1);
  if (d % n_heads != 0)
    throw num::ShapeMismatch("mha: d_model " + std::to_string(d) +
                             " not divisible by heads");
  int dh = d / n_heads;
  NodeId q = linear(g, bind, prefix + ".q", q_in);
  NodeId k = linear(g, bind, prefix + ".k", kv_in);
  NodeId v = linear(g, bind, prefix + ".v", kv_in);
  std::vector<NodeId> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    NodeId qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    NodeId kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    NodeId vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    heads.push_back(g.attention(qh, kh, vh, causal));
  }
  NodeId cat = g.concat_cols(heads);
  return linear(g, bind, prefix + ".o", cat);
}

void declare_encoder_layer(ParamStore& ps, const std::string& prefix,
                           const NnDims& dims) {
  declare_layer_norm(ps, prefix + ".ln1", dims.d_model);
  declare_mha(ps, prefix + ".attn", dims.d_model);
  declare_layer_norm(ps, prefix + ".ln2", dims.d_model);
  declare_linear(ps, prefix + ".ffn1", dims.d_model, dims.d_ff);
  declare_linear(ps, prefix + ".ffn2", dims.d_ff, dims.d_model);
}

NodeId encoder_layer(num::Graph& g, Binder& bind, const std::string& prefix,
                     const NnDims& dims, NodeId x) {
  NodeId normed = layer_norm(g, bind, prefix + ".ln1", x);
  x = g.add(x, mha(g, bind, prefix + ".attn", normed, normed, dims.n_heads,
                   false));
  NodeId ff = layer_norm(g, bind, prefix + ".ln2", x);
  ff = linear(g, bind, prefix + ".ffn2",
              g.gelu(linear(g, bind, prefix + ".ffn1", ff)));
  return g.add(x, ff);
}

void declare_decoder_layer(ParamStore& ps, const std::string& prefix,
                           const NnDims& dims) {
  declare_layer_norm(ps, prefix + ".ln1", dims.d_model);
  declare_mha(ps, prefix + ".self", dims.d_model);
  declare_layer_norm(ps, prefix + ".ln2", dims.d_model);
  declare_mha(ps, prefix + ".cross", dims.d_model);
  declare_layer_norm(ps, prefix + ".ln3", dims.d_model);
  declare_linear(ps, prefix + ".ffn1", dims.d_model, dims.d_ff);
  declare_linear(ps, prefix + ".ffn2", dims.d_ff, dims.d_model);
}

NodeId decoder_layer(num::Graph& g, Binder& bind, const std::string& prefix,
                     const NnDims& dims, NodeId x, NodeId context,
                     bool causal_self) {
  NodeId n1 = layer_norm(g, bind, prefix + ".ln1", x);
  x = g.add(x, mha(g, bind, prefix + ".self", n1, n1, dims.n_heads,
                   causal_self));
  NodeId n2 = layer_norm(g, bind, prefix + ".ln2", x);
  x = g.add(x, mha(g, bind, prefix + ".cross", n2, context, dims.n_heads,
                   false));
  NodeId n3 = layer_norm(g, bind, prefix + ".ln3", x);
  NodeId ff = linear(g, bind, prefix + ".ffn2",
                     g.gelu(linear(g, bind, prefix + ".ffn1", n3)));
  return g.add(x, ff);
}

}  // namespace lilac::model
