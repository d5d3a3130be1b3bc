#include "dynq/training/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "dynq/adapter/layers.hpp"
#include "dynq/tensorcore/errors.hpp"
#include "dynq/tensorcore/optimizer.hpp"

namespace dynq::train {

using corpus::Task;

std::vector<int> Vocabulary::encode_reference(const corpus::Utterance& utt, Task task) const {
  std::vector<int> out;
  if (task == Task::kAsr) {
    for (int t : utt.transcript) out.push_back(source_id(t));
  } else {
    if (utt.translation.empty()) throw DataError("utterance " + utt.id + " has no translation");
    for (int t : utt.translation) out.push_back(target_id(t));
  }
  return out;
}

std::vector<int> Vocabulary::decode_hypothesis(const std::vector<int>& ids, Task task) const {
  const int lo = task == Task::kAsr ? 0 : static_cast<int>(source);
  const int range = static_cast<int>(task == Task::kAsr ? source : target);
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) {
    const int t = id - lo;
    out.push_back(t >= 0 && t < range ? t : range + id % 8);
  }
  return out;
}

void DecoderConfig::validate() const {
  if (vocab.source == 0 || vocab.target == 0) throw ParameterError("decoder vocabulary must be non-empty");
  if (d_model == 0 || n_layers == 0 || heads == 0 || ffn == 0 || max_len == 0) {
    throw ParameterError("decoder extents must be positive");
  }
  if (d_model % heads != 0) {
    throw ParameterError("decoder d_model " + std::to_string(d_model) + " not divisible by heads " +
                         std::to_string(heads));
  }
}

ParameterSet init_decoder(const DecoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ParameterSet params;
  const double inv = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  Tensor embed = Tensor::matrix(config.vocab.size(), config.d_model);
  for (auto& v : embed.values()) v = rng.normal() * inv;
  params.add("decoder.embed", std::move(embed));
  Tensor pos = Tensor::matrix(config.max_len, config.d_model);
  for (auto& v : pos.values()) v = 0.1 * rng.normal() * inv;
  params.add("decoder.pos", std::move(pos));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    adapter::init_transformer_block(params, "decoder.blocks." + std::to_string(l), config.d_model,
                                    config.ffn, rng);
  }
  adapter::init_layer_norm(params, "decoder.ln_f", config.d_model);
  return params;
}

void freeze_decoder_base(ParameterSet& params) {
  params.set_frozen(
      [](const std::string& name) {
        return name.rfind("decoder.", 0) == 0 && name.find(".lora_") == std::string::npos;
      },
      true);
}

void wrap_decoder_attention(ParameterSet& params, const DecoderConfig& config, const LoraConfig& lora,
                            std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (const char* p : {"q", "k", "v"}) {
      lora_wrap(params, "decoder.blocks." + std::to_string(l) + ".attn." + p, lora, rng);
    }
  }
}

Var decoder_hidden(Tape& tape, ParameterSet& params, const DecoderConfig& config, double lora_factor,
                   const std::optional<Var>& prefix, const std::vector<int>& tokens) {
  std::vector<Var> parts;
  if (prefix) {
    if (prefix->cols() != config.d_model) {
      throw DimensionError("decoder prefix has width " + std::to_string(prefix->cols()) + ", expected " +
                           std::to_string(config.d_model));
    }
    if (prefix->rows() > 0) parts.push_back(*prefix);
  }
  if (!tokens.empty()) {
    std::vector<std::size_t> rows;
    rows.reserve(tokens.size());
    for (int t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config.vocab.size()) {
        throw BoundsError("decoder token " + std::to_string(t) + " out of range");
      }
      rows.push_back(static_cast<std::size_t>(t));
    }
    parts.push_back(gather_rows(tape.param(params, "decoder.embed"), rows));
  }
  if (parts.empty()) throw ParameterError("decoder input is empty");
  Var x = parts.size() == 1 ? parts.front() : concat_rows(parts);
  const std::size_t n = x.rows();
  if (n > config.max_len) {
    throw BoundsError("decoder input of " + std::to_string(n) + " rows exceeds max_len " +
                      std::to_string(config.max_len));
  }
  x = add(x, slice_rows(tape.param(params, "decoder.pos"), 0, n));
  const adapter::Projector project = [&tape, &params, lora_factor](const std::string& name, Var in) {
    return lora_linear(tape, params, name, in, lora_factor);
  };
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    x = adapter::transformer_block(tape, params, "decoder.blocks." + std::to_string(l), x, config.heads,
                                   true, project);
  }
  return adapter::layer_norm(tape, params, "decoder.ln_f", x);
}

Var decoder_logits(Tape& tape, ParameterSet& params, Var hidden) {
  return matmul_bt(hidden, tape.param(params, "decoder.embed"));
}

Var masked_ntp(Var logits, std::size_t answer_start, const std::vector<int>& targets) {
  const std::size_t n = logits.rows();
  if (answer_start + targets.size() > n) {
    throw DimensionError("answer window exceeds the " + std::to_string(n) + " logit rows");
  }
  std::vector<int> full(n, 0);
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    full[answer_start + i] = targets[i];
    mask[answer_start + i] = true;
  }
  return cross_entropy(logits, full, mask);
}

Var ntp_loss(Tape& tape, ParameterSet& params, const DecoderConfig& config, double lora_factor,
             const std::optional<Var>& z, const std::vector<int>& prompt, const std::vector<int>& target) {
  if (target.empty()) throw ParameterError("ntp_loss: empty target");
  std::vector<int> tokens = prompt;
  tokens.push_back(config.vocab.bos());
  tokens.insert(tokens.end(), target.begin(), target.end());
  const Var hidden = decoder_hidden(tape, params, config, lora_factor, z, tokens);
  const std::size_t n_z = z ? z->rows() : 0;
  // the row holding BOS predicts target[0]; the last target row predicts EOS
  const std::size_t start = n_z + prompt.size();
  const Var answer = slice_rows(hidden, start, target.size() + 1);
  std::vector<int> expected = target;
  expected.push_back(config.vocab.eos());
  return masked_ntp(decoder_logits(tape, params, answer), 0, expected);
}

std::vector<int> greedy_generate(ParameterSet& params, const DecoderConfig& config, double lora_factor,
                                 const Tensor& z, const std::vector<int>& prompt, std::size_t max_tokens) {
  std::vector<int> tokens = prompt;
  tokens.push_back(config.vocab.bos());
  std::vector<int> out;
  // the decoder cannot attend past max_len rows
  const std::size_t fixed = z.rows() + tokens.size();
  if (fixed > config.max_len) throw BoundsError("decoder prompt exceeds max_len");
  max_tokens = std::min(max_tokens, config.max_len - fixed);
  while (out.size() < max_tokens) {
    Tape tape(false);
    const std::optional<Var> prefix =
        z.rows() > 0 ? std::optional<Var>(tape.constant(z)) : std::nullopt;
    const Var hidden = decoder_hidden(tape, params, config, lora_factor, prefix, tokens);
    const Var last = slice_rows(hidden, hidden.rows() - 1, 1);
    const Tensor& logits = decoder_logits(tape, params, last).value();
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits(0, j) > logits(0, best)) best = j;
    }
    const int id = static_cast<int>(best);
    if (id == config.vocab.eos()) break;
    out.push_back(id);
    tokens.push_back(id);
  }
  return out;
}

namespace {

std::vector<int> random_string(Rng& rng, const PretrainConfig& p, std::size_t vocab) {
  const auto len = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(p.min_length), static_cast<std::int64_t>(p.max_length)));
  std::vector<int> s;
  while (s.size() < len) {
    const int t = static_cast<int>(rng.index(vocab));
    if (s.empty() || s.back() != t) s.push_back(t);
  }
  return s;
}

std::vector<int> answer_for(const Vocabulary& vocab, const std::vector<int>& source, Task task) {
  std::vector<int> out;
  if (task == Task::kAsr) {
    for (int t : source) out.push_back(vocab.source_id(t));
  } else {
    for (int t : corpus::translate(source, vocab.source)) out.push_back(vocab.target_id(t));
  }
  return out;
}

std::vector<std::size_t> as_rows(const std::vector<int>& ids) {
  return {ids.begin(), ids.end()};
}

Tensor embedding_rows(const Tensor& embed, const std::vector<int>& ids) {
  Tensor out = Tensor::matrix(ids.size(), embed.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(embed.row(static_cast<std::size_t>(ids[i])), embed.cols(), out.row(i));
  }
  return out;
}

}  // namespace

ParameterSet pretrain_decoder(const DecoderConfig& config, const PretrainConfig& pretrain,
                              std::vector<nlohmann::json>* log) {
  if (pretrain.steps == 0 || pretrain.batch_size == 0) throw ParameterError("pretraining needs steps and a batch");
  if (pretrain.min_length == 0 || pretrain.min_length > pretrain.max_length) {
    throw ParameterError("pretraining length range is invalid");
  }
  ParameterSet params = init_decoder(config, derive_seed(pretrain.seed, 1));
  Rng rng(derive_seed(pretrain.seed, 2));
  LrSchedule schedule;
  schedule.base_lr = pretrain.learning_rate;
  schedule.total_steps = pretrain.steps;
  AdamW optimizer({}, schedule);
  const double inv_batch = 1.0 / static_cast<double>(pretrain.batch_size);
  const double noise_scale = pretrain.prefix_noise / std::sqrt(static_cast<double>(config.d_model));

  for (std::size_t step = 0; step < pretrain.steps; ++step) {
    const double lr = optimizer.current_lr();
    double total = 0.0;
    for (std::size_t b = 0; b < pretrain.batch_size; ++b) {
      const std::vector<int> source = random_string(rng, pretrain, config.vocab.source);
      const Task task = rng.index(2) == 0 ? Task::kAsr : Task::kSt;
      const Tensor& embed = params.value("decoder.embed");
      Tensor noise = Tensor::matrix(source.size(), config.d_model);
      for (std::size_t i = 0; i < source.size(); ++i) {
        const double gain = rng.uniform(1.0 - pretrain.scale_jitter, 1.0 + pretrain.scale_jitter);
        for (std::size_t j = 0; j < config.d_model; ++j) {
          noise(i, j) = (gain - 1.0) * embed(static_cast<std::size_t>(source[i]), j) + noise_scale * rng.normal();
        }
      }
      Tape tape;
      const Var clean = gather_rows(tape.param(params, "decoder.embed"), as_rows(source));
      const Var prefix = add(clean, tape.constant(std::move(noise)));
      const Var loss = ntp_loss(tape, params, config, 0.0, prefix, {config.vocab.prompt(task)},
                                answer_for(config.vocab, source, task));
      total += loss.value()(0, 0);
      tape.backward(loss, inv_batch);
    }
    optimizer.step(params);
    if (log) log->push_back({{"step", step}, {"ntp", total * inv_batch}, {"lr", lr}});
  }
  return params;
}

double pretrain_accuracy(ParameterSet& params, const DecoderConfig& config, std::size_t count,
                         std::uint64_t seed) {
  if (count == 0) throw ParameterError("pretrain_accuracy: count must be positive");
  Rng rng(seed);
  PretrainConfig lengths;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::vector<int> source = random_string(rng, lengths, config.vocab.source);
    for (Task task : {Task::kAsr, Task::kSt}) {
      const Tensor z = embedding_rows(params.value("decoder.embed"), source);
      if (greedy_generate(params, config, 0.0, z, {config.vocab.prompt(task)}) ==
          answer_for(config.vocab, source, task)) {
        ++hits;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(2 * count);
}

}  // namespace dynq::train
