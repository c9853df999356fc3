#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "lilac/tensor.hpp"
#include "lilac/util.hpp"

namespace lilac::model {

/// Named parameter tensors. std::map keeps iteration in name order, which
/// every reduction and serialization below relies on for determinism.
struct ParamStore {
  std::map<std::string, num::Tensor> tensors;

  num::Tensor& create(const std::string& name, num::Shape shape) {
    auto [it, fresh] = tensors.emplace(name, num::Tensor(std::move(shape)));
    if (!fresh) throw Error("duplicate parameter: " + name);
    return it->second;
  }
  num::Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  const num::Tensor& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [k, t] : tensors) n += t.size();
    return n;
  }
};

/// Glorot-uniform for 2-D weights, ones for "*.gain", zeros otherwise. Each
/// tensor draws from its own name-derived stream, so values do not depend on
/// initialization order.
void init_params(ParamStore& ps, std::uint64_t seed);

/// Binds parameters into a graph once each and remembers the node handles so
/// trainers can read gradients back by name.
class Binder {
 public:
  Binder(num::Graph& g, const ParamStore& ps) : graph_(&g), params_(&ps) {}
  num::NodeId operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    num::NodeId id = graph_->param(&params_->at(name));
    bound_.emplace(name, id);
    return id;
  }
  const std::map<std::string, num::NodeId>& bound() const { return bound_; }

 private:
  num::Graph* graph_;
  const ParamStore* params_;
  std::map<std::string, num::NodeId> bound_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "LCKP", u16 version, JSON metadata, then name->tensor.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::string kind;         // "flow" or "refiner"
  std::string config_json;  // model + training configuration echo
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  bool ablate_no_srl = false;
  bool ablate_no_vp = false;
  std::string dataset_digest;  // hex64 of the training dataset
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& ps,
                     const CheckpointMeta& meta);
std::pair<ParamStore, CheckpointMeta> load_checkpoint(
    const std::filesystem::path& path);

}  // namespace lilac::model
