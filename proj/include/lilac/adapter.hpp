#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lilac/datamodel.hpp"
#include "lilac/nn.hpp"

namespace lilac::model {

struct EmptyInstruction : Error {
  explicit EmptyInstruction(const std::string& m)
      : Error("EmptyInstruction: " + m) {}
};

struct AdapterConfig {
  int d_model = 128;
  int d_txt = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int patch = 16;
  int image_width = 128;
  int image_height = 128;
  int max_txt_len = 16;

  int patches_x() const { return image_width / patch; }
  int patches_y() const { return image_height / patch; }
  int num_patches() const { return patches_x() * patches_y(); }
  NnDims dims() const { return {d_model, n_heads, d_ff}; }
};

/// Token table for the toy text encoder; id 0 is the shared <unk>.
class Vocabulary {
 public:
  static Vocabulary from_words(const std::vector<std::string>& words);
  static Vocabulary load(const std::filesystem::path& json_path);

  static std::vector<std::string> tokenize(const std::string& text);
  /// Token ids, truncated to max_len. Throws EmptyInstruction when the text
  /// tokenizes to nothing.
  std::vector<int> encode(const std::string& text, int max_len) const;
  int size() const { return static_cast<int>(ids_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::map<std::string, int> ids_;
  std::vector<std::string> words_;  // id-ordered, words_[0] == "<unk>"
};

struct TextEmbedding {
  num::NodeId tokens;  // [len, d_txt]
  num::NodeId pooled;  // [1, d_txt], mean of tokens
  int length = 0;
};

/// Prompt-conditioned multi-modal fusion: patch-encodes the RGB frame and the
/// prompt-rendered frame with shared weights, embeds the instruction, and
/// runs the concatenation through a transformer encoder.
struct Adapter {
  AdapterConfig cfg;

  void declare(ParamStore& ps, int vocab_size) const;

  /// Non-overlapping patch tokens + learned 2-D positional embedding.
  num::NodeId encode_image(num::Graph& g, Binder& bind,
                           std::span<const std::uint8_t> pixels) const;
  TextEmbedding encode_text(num::Graph& g, Binder& bind,
                            const std::string& instruction,
                            const Vocabulary& vocab) const;
  /// Token layout: [image patches | instruction tokens | prompt patches].
  /// Without vp tokens (the w/o-vp ablation) the prompt segment collapses to
  /// a single learned null token.
  num::NodeId fuse(num::Graph& g, Binder& bind, num::NodeId img_tokens,
                   const TextEmbedding& txt,
                   std::optional<num::NodeId> vp_tokens) const;
};

}  // namespace lilac::model
