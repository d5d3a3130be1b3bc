#include "dynq/training/config_io.hpp"

#include <set>
#include <type_traits>

#include "dynq/tensorcore/errors.hpp"

namespace dynq::train {

namespace {

using nlohmann::json;

class Fields {
 public:
  Fields(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j.is_object()) throw ParameterError("config section '" + section_ + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_integer() || (!it->is_number_unsigned() && it->template get<std::int64_t>() < 0)) {
        fail(key, "expected a non-negative integer");
      }
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) fail(key, "expected a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) fail(key, "expected a number");
    }
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      fail(key, e.what());
    }
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) {
        throw ParameterError("unknown config key '" + section_ + "." + item.key() + "'");
      }
    }
  }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& why) const {
    throw ParameterError("config key '" + section_ + "." + key + "': " + why);
  }

  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const corpus::CorpusConfig& c) {
  return {{"seed", c.seed},
          {"phonemes", c.phonemes},
          {"d_audio", c.d_audio},
          {"min_separation", c.min_separation},
          {"delta", c.delta},
          {"bias_scale", c.bias_scale},
          {"noise", c.noise},
          {"min_duration", c.min_duration},
          {"max_duration", c.max_duration},
          {"min_length", c.min_length},
          {"max_length", c.max_length},
          {"train_counts", c.train_counts},
          {"test_counts", c.test_counts}};
}

void apply_json(const json& j, corpus::CorpusConfig& c) {
  Fields f(j, "corpus");
  f.get("seed", c.seed);
  f.get("phonemes", c.phonemes);
  f.get("d_audio", c.d_audio);
  f.get("min_separation", c.min_separation);
  f.get("delta", c.delta);
  f.get("bias_scale", c.bias_scale);
  f.get("noise", c.noise);
  f.get("min_duration", c.min_duration);
  f.get("max_duration", c.max_duration);
  f.get("min_length", c.min_length);
  f.get("max_length", c.max_length);
  f.get("train_counts", c.train_counts);
  f.get("test_counts", c.test_counts);
  f.finish();
}

json to_json(const adapter::AdapterConfig& c) {
  return {{"d_audio", c.d_audio},       {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"heads", c.heads},
          {"ffn", c.ffn},               {"vocab", c.vocab},
          {"max_frames", c.max_frames}, {"logit_scale_init", c.logit_scale_init},
          {"tie_asr_head", c.tie_asr_head}};
}

void apply_json(const json& j, adapter::AdapterConfig& c) {
  Fields f(j, "adapter");
  f.get("d_audio", c.d_audio);
  f.get("d_model", c.d_model);
  f.get("n_layers", c.n_layers);
  f.get("heads", c.heads);
  f.get("ffn", c.ffn);
  f.get("vocab", c.vocab);
  f.get("max_frames", c.max_frames);
  f.get("logit_scale_init", c.logit_scale_init);
  f.get("tie_asr_head", c.tie_asr_head);
  f.finish();
}

json to_json(const DecoderConfig& c) {
  return {{"source_vocab", c.vocab.source}, {"target_vocab", c.vocab.target}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},         {"heads", c.heads},               {"ffn", c.ffn},
          {"max_len", c.max_len}};
}

void apply_json(const json& j, DecoderConfig& c) {
  Fields f(j, "decoder");
  f.get("source_vocab", c.vocab.source);
  f.get("target_vocab", c.vocab.target);
  f.get("d_model", c.d_model);
  f.get("n_layers", c.n_layers);
  f.get("heads", c.heads);
  f.get("ffn", c.ffn);
  f.get("max_len", c.max_len);
  f.finish();
}

json to_json(const PretrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"min_length", c.min_length},
          {"max_length", c.max_length},
          {"prefix_noise", c.prefix_noise},
          {"scale_jitter", c.scale_jitter},
          {"seed", c.seed}};
}

void apply_json(const json& j, PretrainConfig& c) {
  Fields f(j, "pretrain");
  f.get("steps", c.steps);
  f.get("batch_size", c.batch_size);
  f.get("learning_rate", c.learning_rate);
  f.get("min_length", c.min_length);
  f.get("max_length", c.max_length);
  f.get("prefix_noise", c.prefix_noise);
  f.get("scale_jitter", c.scale_jitter);
  f.get("seed", c.seed);
  f.finish();
}

json to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lora_rank", c.lora.rank},
          {"lora_alpha", c.lora.alpha},
          {"seed", c.seed},
          {"weight_decay", c.weight_decay},
          {"checkpoint_every", c.checkpoint_every},
          {"freeze_decoder", c.freeze_decoder},
          {"adapter", adapter_kind_name(c.adapter)},
          {"dialects", c.dialects}};
}

void apply_json(const json& j, TrainConfig& c) {
  Fields f(j, "training");
  f.get("lambda", c.lambda);
  f.get("learning_rate", c.learning_rate);
  f.get("steps", c.steps);
  f.get("batch_size", c.batch_size);
  f.get("lora_rank", c.lora.rank);
  f.get("lora_alpha", c.lora.alpha);
  f.get("seed", c.seed);
  f.get("weight_decay", c.weight_decay);
  f.get("checkpoint_every", c.checkpoint_every);
  f.get("freeze_decoder", c.freeze_decoder);
  std::string kind = adapter_kind_name(c.adapter);
  f.get("adapter", kind);
  c.adapter = parse_adapter_kind(kind);
  f.get("dialects", c.dialects);
  f.finish();
}

}  // namespace dynq::train
