#include "lilac/adapter.hpp"

#include <algorithm>
#include <cctype>

#include <nlohmann/json.hpp>

namespace lilac::model {

using num::Graph;
using num::NodeId;
using num::Tensor;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.ids_["<unk>"] = 0;
  v.words_.push_back("<unk>");
  for (const std::string& w : words) {
    if (v.ids_.count(w)) continue;
    v.ids_[w] = static_cast<int>(v.words_.size());
    v.words_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& json_path) {
  nlohmann::json j = nlohmann::json::parse(util::read_file(json_path));
  std::vector<std::pair<int, std::string>> by_id;
  for (auto& [word, id] : j.items())
    by_id.emplace_back(id.get<int>(), word);
  std::sort(by_id.begin(), by_id.end());
  Vocabulary v;
  for (auto& [id, word] : by_id) {
    if (id != static_cast<int>(v.words_.size()))
      throw Error("vocabulary ids must be dense from 0: " + json_path.string());
    v.ids_[word] = id;
    v.words_.push_back(word);
  }
  if (v.words_.empty() || v.words_[0] != "<unk>")
    throw Error("vocabulary must map <unk> to id 0");
  return v;
}

std::vector<std::string> Vocabulary::tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<int> Vocabulary::encode(const std::string& text, int max_len) const {
  std::vector<std::string> toks = tokenize(text);
  if (toks.empty())
    throw EmptyInstruction("instruction tokenizes to zero tokens");
  std::vector<int> ids;
  for (const std::string& t : toks) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    auto it = ids_.find(t);
    ids.push_back(it == ids_.end() ? 0 : it->second);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Adapter
// ---------------------------------------------------------------------------

void Adapter::declare(ParamStore& ps, int vocab_size) const {
  if (cfg.image_width % cfg.patch != 0 || cfg.image_height % cfg.patch != 0)
    throw Error("adapter: image dims must be divisible by the patch size");
  int pdim = cfg.patch * cfg.patch * 3;
  declare_linear(ps, "adapter.patch", pdim, cfg.d_model);
  ps.create("adapter.pos_row", {cfg.patches_y(), cfg.d_model});
  ps.create("adapter.pos_col", {cfg.patches_x(), cfg.d_model});
  ps.create("adapter.mod", {3, cfg.d_model});
  ps.create("adapter.txt.vocab", {vocab_size, cfg.d_txt});
  ps.create("adapter.txt.pos", {cfg.max_txt_len, cfg.d_txt});
  declare_linear(ps, "adapter.txt.proj", cfg.d_txt, cfg.d_model);
  ps.create("adapter.null_vp", {1, cfg.d_model});
  for (int l = 0; l < cfg.n_layers; ++l)
    declare_encoder_layer(ps, "adapter.enc" + std::to_string(l), cfg.dims());
  if (cfg.n_layers > 0) declare_layer_norm(ps, "adapter.final_ln", cfg.d_model);
}

NodeId Adapter::encode_image(Graph& g, Binder& bind,
                             std::span<const std::uint8_t> pixels) const {
  std::size_t want = static_cast<std::size_t>(cfg.image_width) *
                     cfg.image_height * 3;
  if (pixels.size() != want)
    throw num::ShapeMismatch("encode_image: pixel buffer has " +
                             std::to_string(pixels.size()) + " bytes, want " +
                             std::to_string(want));
  int px = cfg.patches_x(), py = cfg.patches_y(), p = cfg.patch;
  int pdim = p * p * 3;
  Tensor patches({px * py, pdim});
  std::vector<int> row_ids, col_ids;
  for (int pr = 0; pr < py; ++pr)
    for (int pc = 0; pc < px; ++pc) {
      double* dst = patches.data() +
                    static_cast<std::size_t>(pr * px + pc) * pdim;
      for (int y = 0; y < p; ++y) {
        const std::uint8_t* src =
            pixels.data() +
            (static_cast<std::size_t>(pr * p + y) * cfg.image_width + pc * p) * 3;
        for (int k = 0; k < p * 3; ++k)
          dst[y * p * 3 + k] = static_cast<double>(src[k]) / 255.0;
      }
      row_ids.push_back(pr);
      col_ids.push_back(pc);
    }
  NodeId tokens = linear(g, bind, "adapter.patch", g.input(std::move(patches)));
  tokens = g.add(tokens, g.gather_rows(bind("adapter.pos_row"), row_ids));
  tokens = g.add(tokens, g.gather_rows(bind("adapter.pos_col"), col_ids));
  return tokens;
}

TextEmbedding Adapter::encode_text(Graph& g, Binder& bind,
                                   const std::string& instruction,
                                   const Vocabulary& vocab) const {
  std::vector<int> ids = vocab.encode(instruction, cfg.max_txt_len);
  std::vector<int> pos;
  for (int i = 0; i < static_cast<int>(ids.size()); ++i) pos.push_back(i);
  NodeId tokens = g.add(g.gather_rows(bind("adapter.txt.vocab"), ids),
                        g.gather_rows(bind("adapter.txt.pos"), pos));
  TextEmbedding out;
  out.tokens = tokens;
  out.pooled = g.mean_rows(tokens);
  out.length = static_cast<int>(ids.size());
  return out;
}

NodeId Adapter::fuse(Graph& g, Binder& bind, NodeId img_tokens,
                     const TextEmbedding& txt,
                     std::optional<NodeId> vp_tokens) const {
  auto mod = [&](int k) {
    return g.reshape(g.gather_rows(bind("adapter.mod"), {k}), {cfg.d_model});
  };
  NodeId img = g.add_row(img_tokens, mod(0));
  NodeId txtp = linear(g, bind, "adapter.txt.proj", txt.tokens);
  txtp = g.add_row(txtp, mod(1));
  NodeId vp = vp_tokens ? *vp_tokens : bind("adapter.null_vp");
  vp = g.add_row(vp, mod(2));
  std::vector<NodeId> parts = {img, txtp, vp};
  NodeId x = g.concat_rows(parts);
  for (int l = 0; l < cfg.n_layers; ++l)
    x = encoder_layer(g, bind, "adapter.enc" + std::to_string(l), cfg.dims(), x);
  if (cfg.n_layers > 0) x = layer_norm(g, bind, "adapter.final_ln", x);
  return x;
}

}  // namespace lilac::model
