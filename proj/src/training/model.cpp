#include "dynq/training/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "dynq/sampler/sampler.hpp"
#include "dynq/tensorcore/errors.hpp"
#include "dynq/tensorcore/optimizer.hpp"
#include "dynq/training/config_io.hpp"

namespace dynq::train {

using corpus::Task;
using nlohmann::json;

std::string adapter_kind_name(AdapterKind kind) {
  return kind == AdapterKind::kDynamic ? "dynamic" : "linear";
}

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "dynamic") return AdapterKind::kDynamic;
  if (name == "linear") return AdapterKind::kLinear;
  throw ParameterError("unknown adapter kind '" + name + "' (expected dynamic or linear)");
}

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  if (lora.rank == 0) throw ParameterError("LoRA rank must be >= 1");
  if (steps == 0) throw ParameterError("steps must be >= 1");
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
  if (checkpoint_every == 0) throw ParameterError("checkpoint_every must be >= 1");
}

SpeechModel build_speech_model(AdapterKind kind, const adapter::AdapterConfig& adapter_config,
                               const DecoderConfig& decoder_config, const ParameterSet& decoder_params,
                               const LoraConfig& lora, std::uint64_t seed, bool wrap_lora) {
  decoder_config.validate();
  SpeechModel model;
  model.kind = kind;
  model.adapter = adapter_config;
  model.decoder = decoder_config;
  model.lora = lora;
  const Tensor& embed = decoder_params.value("decoder.embed");
  if (kind == AdapterKind::kDynamic) {
    adapter_config.validate();
    if (adapter_config.d_model != decoder_config.d_model) {
      throw ParameterError("adapter d_model " + std::to_string(adapter_config.d_model) +
                           " differs from decoder d_model " + std::to_string(decoder_config.d_model));
    }
    if (adapter_config.vocab != decoder_config.vocab.source) {
      throw ParameterError("adapter vocab differs from the decoder source vocabulary");
    }
    model.params = adapter::init_adapter(adapter_config, seed, &embed);
  } else {
    model.params = adapter::init_linear_baseline(adapter_config.d_audio, decoder_config.d_model, seed);
  }
  model.params.merge(decoder_params);
  if (wrap_lora) {
    freeze_decoder_base(model.params);
    wrap_decoder_attention(model.params, decoder_config, lora, derive_seed(seed, 0x10a));
  }
  return model;
}

json model_metadata(const SpeechModel& model) {
  return {{"kind", adapter_kind_name(model.kind)},
          {"adapter", to_json(model.adapter)},
          {"decoder", to_json(model.decoder)},
          {"lora", {{"rank", model.lora.rank}, {"alpha", model.lora.alpha}}}};
}

SpeechModel model_from_checkpoint(Checkpoint checkpoint) {
  const json& meta = checkpoint.metadata;
  if (!meta.contains("kind") || !meta.contains("adapter") || !meta.contains("decoder")) {
    throw DataError("checkpoint metadata does not describe a speech model");
  }
  SpeechModel model;
  model.kind = parse_adapter_kind(meta.at("kind").get<std::string>());
  apply_json(meta.at("adapter"), model.adapter);
  apply_json(meta.at("decoder"), model.decoder);
  model.lora.rank = meta.at("lora").at("rank").get<std::size_t>();
  model.lora.alpha = meta.at("lora").at("alpha").get<double>();
  model.params = std::move(checkpoint.params);
  return model;
}

LossBreakdown total_loss(double ntp, std::optional<double> ctc, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  LossBreakdown out;
  out.ntp = ntp;
  out.ctc = ctc;
  out.total = ctc ? ntp + lambda * *ctc : ntp;
  return out;
}

Var total_loss(Var ntp, const std::optional<Var>& ctc, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  return ctc ? add(ntp, scale(*ctc, lambda)) : ntp;
}

UtteranceLoss utterance_loss(Tape& tape, SpeechModel& model, const corpus::Utterance& utt, double lambda,
                             const std::optional<std::vector<std::size_t>>& fixed_indices) {
  UtteranceLoss out;
  Var z;
  if (model.kind == AdapterKind::kDynamic) {
    const adapter::AdapterOutput a =
        adapter::adapter_forward(tape, model.params, model.adapter, utt.features, fixed_indices);
    z = a.fusion.z;
    out.ctc = ctc::ctc_loss(a.log_probs, utt.transcript);
  } else {
    z = adapter::linear_baseline_forward(tape, model.params, utt.features);
  }
  out.audio_tokens = z.rows();
  out.ntp = ntp_loss(tape, model.params, model.decoder, model.lora_factor(), z,
                     {model.decoder.vocab.prompt(utt.task)}, model.decoder.vocab.encode_reference(utt, utt.task));
  out.total = total_loss(out.ntp, out.ctc, lambda);
  return out;
}

Tensor speech_prefix(SpeechModel& model, const Tensor& features) {
  Tape tape(false);
  if (model.kind == AdapterKind::kDynamic) {
    return adapter::adapter_forward(tape, model.params, model.adapter, features).fusion.z.value();
  }
  return adapter::linear_baseline_forward(tape, model.params, features).value();
}

namespace {

void write_jsonl_line(std::ofstream& out, const json& j) {
  out << j.dump() << '\n';
  if (!out) throw IoError("failed writing training log");
}

json batch_dump(std::size_t step, const std::vector<sampler::Draw>& batch,
                const std::vector<corpus::Utterance>& utts, const std::vector<json>& losses) {
  json items = json::array();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& u = utts[batch[i].item];
    items.push_back({{"id", u.id},
                     {"category", batch[i].category.name()},
                     {"frames", u.features.rows()},
                     {"transcript", u.transcript},
                     {"losses", i < losses.size() ? losses[i] : json(nullptr)}});
  }
  return {{"step", step}, {"batch", items}};
}

bool finite_or_absent(const std::optional<Var>& v) { return !v || std::isfinite(v->value().item()); }

struct BatchTotals {
  double ntp = 0.0, ctc = 0.0, total = 0.0, n_q = 0.0;  // batch means
  std::vector<json> losses;
  std::optional<std::size_t> bad;  // first utterance with a non-finite loss
  std::string error;
};

// Forward and backward of every utterance, gradients scaled by 1/B and
// accumulated in batch order.
BatchTotals accumulate_batch(SpeechModel& model, const std::vector<const corpus::Utterance*>& batch,
                             double lambda) {
  BatchTotals out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tape tape;
    std::optional<UtteranceLoss> maybe;
    try {
      maybe = utterance_loss(tape, model, *batch[i], lambda);
    } catch (const NumericError& e) {
      out.losses.push_back({{"error", e.what()}});
      out.error = e.what();
      out.bad = i;
      return out;
    }
    const UtteranceLoss& l = *maybe;
    const double t = l.total.value().item();
    out.losses.push_back({{"ntp", l.ntp.value().item()},
                          {"ctc", l.ctc ? json(l.ctc->value().item()) : json(nullptr)},
                          {"total", t}});
    if (!std::isfinite(t) || !finite_or_absent(l.ctc)) {
      out.error = "loss is not finite";
      out.bad = i;
      return out;
    }
    out.ntp += inv * l.ntp.value().item();
    if (l.ctc) out.ctc += inv * l.ctc->value().item();
    out.total += inv * t;
    out.n_q += inv * static_cast<double>(l.audio_tokens);
    tape.backward(l.total, inv);
  }
  return out;
}

}  // namespace

TrainResult train_run(SpeechModel& model, const corpus::Manifest& manifest, const TrainConfig& config,
                      const std::filesystem::path& out_dir, const json& resolved_config) {
  config.validate();
  const corpus::Manifest data = config.dialects.empty() ? manifest : manifest.filter_dialects(config.dialects);
  if (data.empty()) throw DataError("training manifest is empty after dialect filtering");
  const std::vector<corpus::Utterance> utts = data.load_utterances();
  if (!config.freeze_decoder) {
    model.params.set_frozen([](const std::string& name) { return name.rfind("decoder.", 0) == 0; }, false);
  }

  const sampler::CategoryMembers members = sampler::group_by_category(data);
  const sampler::Probabilities probs = sampler::category_probabilities(sampler::stats_of(members), config.tau);
  const auto schedule = sampler::build_schedule(
      members, probs, {config.tau, derive_seed(config.seed, 0x5a3), config.batch_size}, config.steps);

  LrSchedule lr;
  lr.base_lr = config.learning_rate;
  lr.total_steps = config.steps;
  AdamWConfig adamw;
  adamw.weight_decay = config.weight_decay;
  AdamW optimizer(adamw, lr);

  std::filesystem::create_directories(out_dir);
  std::ofstream log_file(out_dir / "train_log.jsonl", std::ios::binary);
  if (!log_file) throw IoError("cannot write " + (out_dir / "train_log.jsonl").string());

  json meta = model_metadata(model);
  meta["config"] = resolved_config;
  auto save = [&](const std::string& file, std::size_t step) {
    json m = meta;
    m["step"] = step;
    save_checkpoint(out_dir / file, model.params, m);
  };

  TrainResult result;
  const bool has_ctc = model.kind == AdapterKind::kDynamic;
  model.params.zero_grad();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto& batch = schedule[step];
    const double step_lr = optimizer.current_lr();
    std::vector<const corpus::Utterance*> members_of_batch;
    std::map<std::string, std::size_t> dialect_counts, category_counts;
    for (const auto& draw : batch) {
      members_of_batch.push_back(&utts[draw.item]);
      ++dialect_counts[utts[draw.item].dialect];
      ++category_counts[draw.category.name()];
    }
    const BatchTotals totals = accumulate_batch(model, members_of_batch, config.lambda);
    if (totals.bad) {
      std::ofstream dump(out_dir / "nan_batch.json", std::ios::binary);
      dump << batch_dump(step, batch, utts, totals.losses).dump(2) << '\n';
      throw NumericError("non-finite loss at step " + std::to_string(step) + " on utterance " +
                         members_of_batch[*totals.bad]->id + " (" + totals.error + "); batch written to " +
                         (out_dir / "nan_batch.json").string());
    }
    optimizer.step(model.params);
    json line = {{"step", step + 1},
                 {"ntp", totals.ntp},
                 {"ctc", has_ctc ? json(totals.ctc) : json(nullptr)},
                 {"total", totals.total},
                 {"lr", step_lr},
                 {"mean_nq", totals.n_q},
                 {"dialects", dialect_counts},
                 {"categories", category_counts}};
    write_jsonl_line(log_file, line);
    result.log.push_back(std::move(line));
    if ((step + 1) % config.checkpoint_every == 0) save("ckpt_" + std::to_string(step + 1) + ".bin", step + 1);
  }
  save("ckpt_final.bin", config.steps);
  result.final_checkpoint = out_dir / "ckpt_final.bin";
  return result;
}

std::vector<LossBreakdown> train_on_batch(SpeechModel& model, const std::vector<corpus::Utterance>& batch,
                                          const TrainConfig& config) {
  config.validate();
  if (batch.empty()) throw DataError("train_on_batch: empty batch");
  LrSchedule lr;
  lr.base_lr = config.learning_rate;
  lr.total_steps = config.steps;
  AdamWConfig adamw;
  adamw.weight_decay = config.weight_decay;
  AdamW optimizer(adamw, lr);
  std::vector<const corpus::Utterance*> members;
  for (const auto& u : batch) members.push_back(&u);
  std::vector<LossBreakdown> log;
  model.params.zero_grad();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const BatchTotals totals = accumulate_batch(model, members, config.lambda);
    if (totals.bad) throw NumericError("non-finite loss on utterance " + members[*totals.bad]->id);
    optimizer.step(model.params);
    const bool has_ctc = model.kind == AdapterKind::kDynamic;
    log.push_back({totals.ntp, has_ctc ? std::optional<double>(totals.ctc) : std::nullopt, totals.total});
  }
  return log;
}

std::vector<Prediction> predict(SpeechModel& model, const std::vector<corpus::Utterance>& utterances,
                                Task task) {
  std::vector<Prediction> out;
  const Vocabulary& vocab = model.decoder.vocab;
  for (const auto& u : utterances) {
    if (u.task != task) continue;
    const Tensor z = speech_prefix(model, u.features);
    const std::vector<int> ids = greedy_generate(model.params, model.decoder, model.lora_factor(), z,
                                                 {vocab.prompt(task)});
    Prediction p;
    p.id = u.id;
    p.dialect = u.dialect;
    p.task = task;
    p.reference = task == Task::kAsr ? u.transcript : u.translation;
    p.hypothesis = vocab.decode_hypothesis(ids, task);
    p.audio_tokens = z.rows();
    out.push_back(std::move(p));
  }
  return out;
}

void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& predictions) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write predictions to " + path.string());
  for (const auto& p : predictions) {
    out << json{{"id", p.id},
                {"dialect", p.dialect},
                {"task", corpus::task_name(p.task)},
                {"reference", p.reference},
                {"hypothesis", p.hypothesis},
                {"audio_tokens", p.audio_tokens}}
               .dump()
        << '\n';
  }
  if (!out) throw IoError("failed writing predictions to " + path.string());
}

std::vector<Prediction> evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                            const corpus::Manifest& test, Task task,
                                            const std::filesystem::path& predictions_path) {
  if (!std::filesystem::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint.string());
  SpeechModel model = model_from_checkpoint(load_checkpoint(checkpoint));
  const std::vector<Prediction> preds = predict(model, test.filter_task(task).load_utterances(), task);
  write_predictions(predictions_path, preds);
  return preds;
}

EvalReport score_predictions(const std::vector<Prediction>& predictions, Task task) {
  if (predictions.empty()) throw DataError("no predictions to score");
  std::map<std::string, std::vector<const Prediction*>> by_dialect;
  for (const auto& p : predictions) by_dialect[p.dialect].push_back(&p);
  EvalReport report;
  report.task = task;
  for (const auto& [dialect, preds] : by_dialect) {
    DialectScore s;
    s.count = preds.size();
    std::size_t errors = 0, ref_len = 0, char_errors = 0, char_len = 0, exact = 0;
    std::vector<metrics::Tokens> refs, hyps;
    for (const Prediction* p : preds) {
      const metrics::EditStats w = metrics::edit_stats(p->reference, p->hypothesis);
      errors += w.errors();
      ref_len += w.reference_length;
      if (task == Task::kAsr) {
        const metrics::ErrorRate c = metrics::cer_tokens(p->reference, p->hypothesis);
        char_errors += c.stats.errors();
        char_len += c.stats.reference_length;
      }
      if (p->reference == p->hypothesis) ++exact;
      refs.push_back(p->reference);
      hyps.push_back(p->hypothesis);
    }
    // corpus-level rates: total edits over total reference length
    s.wer = 100.0 * static_cast<double>(errors) / static_cast<double>(std::max<std::size_t>(1, ref_len));
    s.cer = 100.0 * static_cast<double>(char_errors) / static_cast<double>(std::max<std::size_t>(1, char_len));
    if (task == Task::kSt) s.bleu = metrics::corpus_bleu(refs, hyps);
    s.exact_match = static_cast<double>(exact) / static_cast<double>(preds.size());
    report.dialects[dialect] = s;
  }
  const double k = static_cast<double>(report.dialects.size());
  for (const auto& [dialect, s] : report.dialects) {
    report.average.count += s.count;
    report.average.wer += s.wer / k;
    report.average.cer += s.cer / k;
    report.average.bleu += s.bleu / k;
    report.average.exact_match += s.exact_match / k;
  }
  return report;
}

namespace {

json score_json(const DialectScore& s, Task task) {
  json j = {{"count", s.count}, {"exact_match", s.exact_match}};
  if (task == Task::kAsr) {
    j["wer"] = s.wer;
    j["cer"] = s.cer;
  } else {
    j["bleu"] = s.bleu;
  }
  return j;
}

}  // namespace

json report_to_json(const EvalReport& report) {
  json dialects = json::object();
  for (const auto& [d, s] : report.dialects) dialects[d] = score_json(s, report.task);
  return {{"task", corpus::task_name(report.task)},
          {"dialects", dialects},
          {"average", score_json(report.average, report.task)}};
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(10);
  const bool asr = report.task == Task::kAsr;
  out << (asr ? "dialect,count,wer,cer,exact_match\n" : "dialect,count,bleu,exact_match\n");
  auto row = [&](const std::string& name, const DialectScore& s) {
    out << name << ',' << s.count << ',';
    if (asr) {
      out << s.wer << ',' << s.cer;
    } else {
      out << s.bleu;
    }
    out << ',' << s.exact_match << '\n';
  };
  for (const auto& [d, s] : report.dialects) row(d, s);
  row("avg", report.average);
  return out.str();
}

std::vector<metrics::EfficiencyRecord> efficiency_records(const std::vector<Prediction>& predictions,
                                                          const std::string& system) {
  std::vector<metrics::EfficiencyRecord> out;
  out.reserve(predictions.size());
  for (const auto& p : predictions) {
    out.push_back(metrics::make_efficiency_record(p.id, system, p.audio_tokens, p.reference.size()));
  }
  return out;
}

}  // namespace dynq::train
