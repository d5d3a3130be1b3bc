#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "dynq/synthcorpus/corpus.hpp"
#include "dynq/tensorcore/params.hpp"
#include "dynq/tensorcore/tape.hpp"
#include "dynq/training/lora.hpp"

namespace dynq::train {

// Decoder ids: source tokens, then target tokens, then BOS, EOS, PAD and the
// two task prompts.
struct Vocabulary {
  std::size_t source = 12;
  std::size_t target = 12;

  int source_id(int token) const { return token; }
  int target_id(int token) const { return static_cast<int>(source) + token; }
  int bos() const { return static_cast<int>(source + target); }
  int eos() const { return bos() + 1; }
  int pad() const { return bos() + 2; }
  int asr_prompt() const { return bos() + 3; }
  int st_prompt() const { return bos() + 4; }
  std::size_t size() const { return source + target + 5; }

  int prompt(corpus::Task task) const { return task == corpus::Task::kAsr ? asr_prompt() : st_prompt(); }

  /// Reference sequence in decoder ids: the transcript for asr, the
  /// translation for st.
  std::vector<int> encode_reference(const corpus::Utterance& utt, corpus::Task task) const;

  /// Back to corpus tokens for the task. Ids outside the task's range map to
  /// range + (id mod 8), which never equals a reference token.
  std::vector<int> decode_hypothesis(const std::vector<int>& ids, corpus::Task task) const;
};

struct DecoderConfig {
  Vocabulary vocab;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t max_len = 256;

  void validate() const;
};

/// "decoder.embed" [V x d], "decoder.pos" [max_len x d], blocks under
/// "decoder.blocks.<l>" and the final norm "decoder.ln_f". All trainable.
ParameterSet init_decoder(const DecoderConfig& config, std::uint64_t seed);

/// Freezes every "decoder." parameter except LoRA factors.
void freeze_decoder_base(ParameterSet& params);

/// Wraps the q, k, v projections of every block.
void wrap_decoder_attention(ParameterSet& params, const DecoderConfig& config, const LoraConfig& lora,
                            std::uint64_t seed);

/// Final hidden states for [prefix rows; embeddings of tokens], causal.
Var decoder_hidden(Tape& tape, ParameterSet& params, const DecoderConfig& config, double lora_factor,
                   const std::optional<Var>& prefix, const std::vector<int>& tokens);

/// Tied output projection: hidden * embed^T.
Var decoder_logits(Tape& tape, ParameterSet& params, Var hidden);

/// Mean cross-entropy of logits rows [answer_start, answer_start + targets.size())
/// against targets. Rows outside that window do not contribute.
Var masked_ntp(Var logits, std::size_t answer_start, const std::vector<int>& targets);

/// Teacher-forced loss over [z; prompt; BOS; target], scored on target
/// tokens and the closing EOS. Throws ParameterError on an empty target.
Var ntp_loss(Tape& tape, ParameterSet& params, const DecoderConfig& config, double lora_factor,
             const std::optional<Var>& z, const std::vector<int>& prompt, const std::vector<int>& target);

/// Greedy decoding after [z; prompt; BOS] until EOS or max_tokens. The EOS
/// is not included.
std::vector<int> greedy_generate(ParameterSet& params, const DecoderConfig& config, double lora_factor,
                                 const Tensor& z, const std::vector<int>& prompt,
                                 std::size_t max_tokens = 64);

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  std::size_t min_length = 3;
  std::size_t max_length = 8;
  double prefix_noise = 0.3;     // std of additive noise, relative to row norm
  double scale_jitter = 0.5;     // prefix rows scaled by U(1 - j, 1 + j)
  std::uint64_t seed = 11;
};

/// Text-only stage: the prefix is the noisy embedding sequence of a random
/// source string; the ASR prompt asks for the string back and the ST prompt
/// for its translation.
ParameterSet pretrain_decoder(const DecoderConfig& config, const PretrainConfig& pretrain,
                              std::vector<nlohmann::json>* log = nullptr);

/// Exact-match rate of greedy decoding on `count` fresh random strings per
/// task, prefix given by clean embeddings.
double pretrain_accuracy(ParameterSet& params, const DecoderConfig& config, std::size_t count,
                         std::uint64_t seed);

}  // namespace dynq::train
