#include "dynq/adapter/layers.hpp"

namespace dynq::adapter {

Projector plain_projector(Tape& tape, ParameterSet& params) {
  return [&tape, &params](const std::string& name, Var x) {
    return linear(x, tape.param(params, name + ".w"), tape.param(params, name + ".b"));
  };
}

void init_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
                 Rng& rng, bool frozen) {
  params.add(name + ".w", uniform_init(in, out, rng), frozen);
  params.add(name + ".b", Tensor::matrix(1, out), frozen);
}

void init_layer_norm(ParameterSet& params, const std::string& name, std::size_t dim,
                     bool frozen) {
  params.add(name + ".g", Tensor::matrix(1, dim, 1.0), frozen);
  params.add(name + ".b", Tensor::matrix(1, dim), frozen);
}

Var layer_norm(Tape& tape, ParameterSet& params, const std::string& name, Var x) {
  return dynq::layer_norm(x, tape.param(params, name + ".g"), tape.param(params, name + ".b"));
}

void init_transformer_block(ParameterSet& params, const std::string& prefix, std::size_t d_model,
                            std::size_t ffn, Rng& rng, bool frozen) {
  init_layer_norm(params, prefix + ".ln1", d_model, frozen);
  for (const char* p : {"q", "k", "v", "o"}) {
    init_linear(params, prefix + ".attn." + p, d_model, d_model, rng, frozen);
  }
  init_layer_norm(params, prefix + ".ln2", d_model, frozen);
  init_linear(params, prefix + ".ffn.up", d_model, ffn, rng, frozen);
  init_linear(params, prefix + ".ffn.down", ffn, d_model, rng, frozen);
}

Var transformer_block(Tape& tape, ParameterSet& params, const std::string& prefix, Var x,
                      std::size_t heads, bool causal, const Projector& project) {
  const Var h = layer_norm(tape, params, prefix + ".ln1", x);
  const Var q = project(prefix + ".attn.q", h);
  const Var k = project(prefix + ".attn.k", h);
  const Var v = project(prefix + ".attn.v", h);
  const Var a = attention(q, k, v, heads, causal).output;
  x = add(x, project(prefix + ".attn.o", a));
  const Var h2 = layer_norm(tape, params, prefix + ".ln2", x);
  const Var up = gelu(project(prefix + ".ffn.up", h2));
  return add(x, project(prefix + ".ffn.down", up));
}

}  // namespace dynq::adapter
