#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynq/adapter/adapter.hpp"
#include "dynq/metrics/metrics.hpp"
#include "dynq/synthcorpus/corpus.hpp"
#include "dynq/tensorcore/checkpoint.hpp"
#include "dynq/training/decoder.hpp"
#include "dynq/training/lora.hpp"

namespace dynq::train {

enum class AdapterKind { kDynamic, kLinear };

std::string adapter_kind_name(AdapterKind kind);
AdapterKind parse_adapter_kind(const std::string& name);

struct TrainConfig {
  double lambda = 0.3;
  double learning_rate = 1e-3;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  LoraConfig lora;
  std::uint64_t seed = 1;
  double tau = 3.0;
  double weight_decay = 0.01;
  std::size_t checkpoint_every = 500;
  bool freeze_decoder = true;
  AdapterKind adapter = AdapterKind::kDynamic;
  std::vector<std::string> dialects;  // empty keeps every dialect

  /// Throws ParameterError on lambda < 0, rank 0, zero steps or batch.
  void validate() const;
};

struct SpeechModel {
  AdapterKind kind = AdapterKind::kDynamic;
  adapter::AdapterConfig adapter;
  DecoderConfig decoder;
  LoraConfig lora;
  ParameterSet params;

  double lora_factor() const { return params.contains("decoder.blocks.0.attn.q.lora_a") ? lora.scale() : 0.0; }
};

/// Adapter (or linear baseline) on top of a copy of the decoder parameters.
/// With wrap_lora set the decoder base is frozen and q, k, v get LoRA factors.
SpeechModel build_speech_model(AdapterKind kind, const adapter::AdapterConfig& adapter_config,
                               const DecoderConfig& decoder_config, const ParameterSet& decoder_params,
                               const LoraConfig& lora, std::uint64_t seed, bool wrap_lora = true);

nlohmann::json model_metadata(const SpeechModel& model);
SpeechModel model_from_checkpoint(Checkpoint checkpoint);

struct LossBreakdown {
  double ntp = 0.0;
  std::optional<double> ctc;
  double total = 0.0;
};

/// ntp + lambda * ctc. Throws ParameterError on lambda < 0.
LossBreakdown total_loss(double ntp, std::optional<double> ctc, double lambda);
Var total_loss(Var ntp, const std::optional<Var>& ctc, double lambda);

struct UtteranceLoss {
  Var ntp;
  std::optional<Var> ctc;
  Var total;
  std::size_t audio_tokens = 0;
};

/// Forward of one utterance under its own task. fixed_indices pins the
/// shrinker selection (dynamic adapter only).
UtteranceLoss utterance_loss(Tape& tape, SpeechModel& model, const corpus::Utterance& utt, double lambda,
                             const std::optional<std::vector<std::size_t>>& fixed_indices = {});

/// Speech-side decoder prefix, computed without gradients.
Tensor speech_prefix(SpeechModel& model, const Tensor& features);

struct TrainResult {
  std::vector<nlohmann::json> log;
  std::filesystem::path final_checkpoint;
};

/// Sampler-driven AdamW loop. Writes train_log.jsonl, ckpt_<step>.bin every
/// checkpoint_every steps and ckpt_final.bin. A non-finite loss dumps the
/// batch to nan_batch.json and throws NumericError.
TrainResult train_run(SpeechModel& model, const corpus::Manifest& manifest, const TrainConfig& config,
                      const std::filesystem::path& out_dir,
                      const nlohmann::json& resolved_config = nlohmann::json::object());

/// Full-batch loop over a fixed set of utterances (no sampler, no files).
/// Returns one batch-mean breakdown per step.
std::vector<LossBreakdown> train_on_batch(SpeechModel& model, const std::vector<corpus::Utterance>& batch,
                                          const TrainConfig& config);

struct Prediction {
  std::string id;
  std::string dialect;
  corpus::Task task = corpus::Task::kAsr;
  metrics::Tokens reference;
  metrics::Tokens hypothesis;
  std::size_t audio_tokens = 0;
};

std::vector<Prediction> predict(SpeechModel& model, const std::vector<corpus::Utterance>& utterances,
                                corpus::Task task);

/// Loads the checkpoint (IoError when missing), decodes every test utterance
/// of the task and writes the predictions as JSON Lines.
std::vector<Prediction> evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                            const corpus::Manifest& test, corpus::Task task,
                                            const std::filesystem::path& predictions_path);

void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& predictions);

struct DialectScore {
  std::size_t count = 0;
  double wer = 0.0;
  double cer = 0.0;
  double bleu = 0.0;
  double exact_match = 0.0;
};

struct EvalReport {
  corpus::Task task = corpus::Task::kAsr;
  std::map<std::string, DialectScore> dialects;
  DialectScore average;  // unweighted mean over the dialects present
};

EvalReport score_predictions(const std::vector<Prediction>& predictions, corpus::Task task);
nlohmann::json report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);

std::vector<metrics::EfficiencyRecord> efficiency_records(const std::vector<Prediction>& predictions,
                                                          const std::string& system);

}  // namespace dynq::train
