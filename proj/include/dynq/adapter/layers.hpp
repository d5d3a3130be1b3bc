#pragma once

#include <functional>
#include <string>

#include "dynq/tensorcore/params.hpp"
#include "dynq/tensorcore/tape.hpp"

namespace dynq::adapter {

/// Maps (projection name, input) to the projected var. The default reads
/// "<name>.w" and "<name>.b"; the decoder swaps in LoRA-wrapped projections.
using Projector = std::function<Var(const std::string& name, Var x)>;

Projector plain_projector(Tape& tape, ParameterSet& params);

void init_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
                 Rng& rng, bool frozen = false);
void init_layer_norm(ParameterSet& params, const std::string& name, std::size_t dim,
                     bool frozen = false);
Var layer_norm(Tape& tape, ParameterSet& params, const std::string& name, Var x);

/// Parameters of one pre-norm block under prefix:
/// ln1, attn.{q,k,v,o}, ln2, ffn.{up,down}.
void init_transformer_block(ParameterSet& params, const std::string& prefix, std::size_t d_model,
                            std::size_t ffn, Rng& rng, bool frozen = false);

/// x + Attn(LN(x)), then + FFN(LN(.)) with a GELU hidden layer.
Var transformer_block(Tape& tape, ParameterSet& params, const std::string& prefix, Var x,
                      std::size_t heads, bool causal, const Projector& project);

}  // namespace dynq::adapter
