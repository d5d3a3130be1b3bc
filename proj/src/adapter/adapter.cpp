#include "dynq/adapter/adapter.hpp"

#include "dynq/tensorcore/errors.hpp"

namespace dynq::adapter {

void AdapterConfig::validate() const {
  if (d_audio == 0 || d_model == 0 || heads == 0 || ffn == 0 || vocab == 0 || max_frames == 0) {
    throw ParameterError("adapter config extents must be positive");
  }
  if (d_model % heads != 0) {
    throw ParameterError("adapter d_model " + std::to_string(d_model) +
                         " is not divisible by heads " + std::to_string(heads));
  }
}

ParameterSet init_adapter(const AdapterConfig& config, std::uint64_t seed,
                          const Tensor* token_embeddings) {
  config.validate();
  ParameterSet p;
  Rng rng(derive_seed(seed, 0xada9));
  init_linear(p, "adapter.proj", config.d_audio, config.d_model, rng);
  p.add("adapter.pos", Tensor::matrix(config.max_frames, config.d_model));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    init_transformer_block(p, "adapter.enc." + std::to_string(l), config.d_model, config.ffn, rng);
  }
  if (config.n_layers > 0) init_layer_norm(p, "adapter.enc.ln", config.d_model);

  init_linear(p, "adapter.asr", config.d_model, config.vocab + 1, rng);
  if (config.tie_asr_head && token_embeddings != nullptr) {
    if (token_embeddings->rows() < config.vocab || token_embeddings->cols() != config.d_model) {
      throw DimensionError("cannot tie ASR head [" + std::to_string(config.d_model) + "x" +
                           std::to_string(config.vocab + 1) + "] to embeddings " +
                           token_embeddings->shape_string());
    }
    Tensor& w = p.value("adapter.asr.w");
    for (std::size_t k = 0; k < config.vocab; ++k)
      for (std::size_t c = 0; c < config.d_model; ++c) w(c, k) = (*token_embeddings)(k, c);
  }
  p.add("adapter.asr.scale", Tensor::matrix(1, 1, config.logit_scale_init));

  for (const char* n : {"q", "k", "v", "o"}) {
    init_linear(p, std::string("adapter.xattn.") + n, config.d_model, config.d_model, rng);
  }
  return p;
}

ParameterSet init_linear_baseline(std::size_t d_audio, std::size_t d_model, std::uint64_t seed) {
  ParameterSet p;
  Rng rng(derive_seed(seed, 0x11ea));
  init_linear(p, "linear", d_audio, d_model, rng);
  return p;
}

Var enhance(Tape& tape, ParameterSet& params, const AdapterConfig& config, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != config.d_audio) {
    throw DimensionError("enhance: expected [T x " + std::to_string(config.d_audio) +
                         "] features, got " + features.shape_string());
  }
  if (features.rows() == 0) throw DimensionError("enhance: empty feature sequence");
  if (features.rows() > config.max_frames) {
    throw DimensionError("enhance: " + std::to_string(features.rows()) +
                         " frames exceed max_frames " + std::to_string(config.max_frames));
  }
  const Projector project = plain_projector(tape, params);
  Var x = project("adapter.proj", tape.constant(features));
  x = add(x, slice_rows(tape.param(params, "adapter.pos"), 0, features.rows()));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    x = transformer_block(tape, params, "adapter.enc." + std::to_string(l), x, config.heads, false,
                          project);
  }
  if (config.n_layers > 0) x = layer_norm(tape, params, "adapter.enc.ln", x);
  return x;
}

Var asr_head(Tape& tape, ParameterSet& params, const AdapterConfig& config, Var enhanced) {
  (void)config;
  const Var logits = linear(enhanced, tape.param(params, "adapter.asr.w"),
                            tape.param(params, "adapter.asr.b"));
  return log_softmax_rows(scale_by_exp(logits, tape.param(params, "adapter.asr.scale")));
}

FusionOutput cross_attend(Tape& tape, ParameterSet& params, const AdapterConfig& config, Var q,
                          Var kv) {
  if (q.cols() != config.d_model || kv.cols() != config.d_model) {
    throw DimensionError("cross_attend: queries " + q.value().shape_string() + " and keys " +
                         kv.value().shape_string() + " must have width " +
                         std::to_string(config.d_model));
  }
  const Projector project = plain_projector(tape, params);
  AttentionResult attn = attention(project("adapter.xattn.q", q), project("adapter.xattn.k", kv),
                                   project("adapter.xattn.v", kv), config.heads, false);
  const Var pre = project("adapter.xattn.o", attn.output);
  return {add(q, pre), pre, std::move(attn.mean_weights)};
}

AdapterOutput adapter_forward(Tape& tape, ParameterSet& params, const AdapterConfig& config,
                              const Tensor& features,
                              const std::optional<std::vector<std::size_t>>& fixed_indices) {
  const Var enhanced = enhance(tape, params, config, features);
  const Var log_probs = asr_head(tape, params, config, enhanced);
  ctc::PosteriorGrid grid(log_probs.value(), config.vocab);
  shrinker::PeakSelection selection;
  if (fixed_indices) {
    const auto best = grid.argmax();
    selection.indices = *fixed_indices;
    for (std::size_t i : selection.indices) {
      if (i >= best.size()) throw BoundsError("adapter_forward: fixed index out of range");
      selection.labels.push_back(best[i]);
    }
  } else {
    selection = shrinker::select_peak_frames(grid);
  }
  const Var q = shrinker::build_dynamic_queries(enhanced, selection.indices);
  FusionOutput fusion = cross_attend(tape, params, config, q, enhanced);
  return {enhanced, log_probs, std::move(grid), std::move(selection), std::move(fusion)};
}

Var linear_baseline_forward(Tape& tape, ParameterSet& params, const Tensor& features) {
  const Tensor& w = params.value("linear.w");
  if (features.rank() != 2 || features.cols() != w.rows()) {
    throw DimensionError("linear baseline: expected [T x " + std::to_string(w.rows()) +
                         "] features, got " + features.shape_string());
  }
  return linear(tape.constant(features), tape.param(params, "linear.w"),
                tape.param(params, "linear.b"));
}

}  // namespace dynq::adapter
