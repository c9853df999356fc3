#pragma once

#include "lilac/params.hpp"
#include "lilac/tensor.hpp"

namespace lilac::model {

/// Shared transformer building blocks. Every function creates the parameters
/// it needs when `create` is true (during model initialization) and binds
/// them into the graph otherwise; names are derived from `prefix` so the two
/// phases cannot drift apart without a loud missing-parameter error.

struct NnDims {
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 256;
};

/// Declares the parameters of one linear map [d_in, d_out] (+bias).
void declare_linear(ParamStore& ps, const std::string& prefix, int d_in,
                    int d_out);
num::NodeId linear(num::Graph& g, Binder& bind, const std::string& prefix,
                   num::NodeId x);

void declare_layer_norm(ParamStore& ps, const std::string& prefix, int d);
num::NodeId layer_norm(num::Graph& g, Binder& bind, const std::string& prefix,
                       num::NodeId x);

/// Multi-head attention block: projections + per-head fused attention +
/// output projection. q_in: [Sq,d], kv_in: [Sk,d].
void declare_mha(ParamStore& ps, const std::string& prefix, int d);
num::NodeId mha(num::Graph& g, Binder& bind, const std::string& prefix,
                num::NodeId q_in, num::NodeId kv_in, int n_heads, bool causal);

/// Pre-LN encoder layer: x += MHA(LN(x)); x += FFN(LN(x)).
void declare_encoder_layer(ParamStore& ps, const std::string& prefix,
                           const NnDims& dims);
num::NodeId encoder_layer(num::Graph& g, Binder& bind,
                          const std::string& prefix, const NnDims& dims,
                          num::NodeId x);

/// Pre-LN decoder layer: causal self-attention, cross-attention to `context`,
/// feed-forward. `causal_self` lets the refiner use a plain prefix mask.
void declare_decoder_layer(ParamStore& ps, const std::string& prefix,
                           const NnDims& dims);
num::NodeId decoder_layer(num::Graph& g, Binder& bind,
                          const std::string& prefix, const NnDims& dims,
                          num::NodeId x, num::NodeId context, bool causal_self);

}  // namespace lilac::model
