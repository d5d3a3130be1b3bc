#include "commands.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <sstream>

#include "dynq/adapter/adapter.hpp"
#include "dynq/ctc/ctc.hpp"
#include "dynq/metrics/metrics.hpp"
#include "dynq/sampler/sampler.hpp"
#include "dynq/tensorcore/checkpoint.hpp"
#include "dynq/tensorcore/gradcheck.hpp"
#include "dynq/training/config_io.hpp"

namespace dynq::cli {

using nlohmann::json;
using corpus::Task;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw IoError(what + " not found: " + path.string());
  return path;
}

std::string system_name(train::AdapterKind kind) {
  return kind == train::AdapterKind::kDynamic ? "adapter" : "linear";
}

json tensor_rows(const Tensor& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t(r, c));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

fs::path ensure_decoder(const RunConfig& config, const fs::path& cache_root, std::ostream* progress) {
  const json key = {{"decoder", train::to_json(config.decoder)}, {"pretrain", train::to_json(config.pretrain)}};
  const fs::path dir = cache_root / "decoders" / digest(key).substr(0, 16);
  const fs::path path = dir / "decoder.bin";
  if (fs::exists(path)) return path;
  if (progress) *progress << "pretraining decoder into " << dir.string() << '\n';
  fs::create_directories(dir);
  std::vector<json> log;
  ParameterSet params = train::pretrain_decoder(config.decoder, config.pretrain, &log);
  const double accuracy = train::pretrain_accuracy(params, config.decoder, 100, config.pretrain.seed + 1);
  std::ostringstream lines;
  for (const auto& l : log) lines << l.dump() << '\n';
  write_text(dir / "pretrain_log.jsonl", lines.str());
  json meta = key;
  meta["accuracy"] = accuracy;
  const fs::path tmp = dir / "decoder.bin.tmp";
  save_checkpoint(tmp, params, meta);
  fs::rename(tmp, path);
  if (progress) *progress << "decoder exact-match accuracy " << accuracy << '\n';
  return path;
}

json cmd_gen_data(const RunConfig& config, const fs::path& out_dir) {
  const corpus::WrittenCorpus written = corpus::generate_corpus(config.corpus, out_dir);
  json summary = {{"out_dir", out_dir.string()},
                  {"train_counts", written.train.category_counts()},
                  {"test_counts", written.test.category_counts()},
                  {"train_size", written.train.size()},
                  {"test_size", written.test.size()},
                  {"centroid_distances", tensor_rows(corpus::centroid_distances(written.train))},
                  {"manifest_digest",
                   {{"train", file_digest(out_dir / "train.jsonl")}, {"test", file_digest(out_dir / "test.jsonl")}}}};
  write_text(out_dir / "config.json", json{{"corpus", train::to_json(config.corpus)}}.dump(2) + "\n");
  return summary;
}

TrainOutcome cmd_train(const RunConfig& config, const fs::path& data_dir, const fs::path& runs_root,
                       const std::optional<fs::path>& decoder, std::ostream* progress) {
  const fs::path manifest_path = require_file(data_dir / "train.jsonl", "train manifest");
  corpus::Manifest manifest = corpus::Manifest::load(manifest_path);
  if (manifest.dim() != config.adapter.d_audio) {
    throw UsageError("manifest feature width " + std::to_string(manifest.dim()) + " differs from adapter.d_audio");
  }
  if (!config.training.dialects.empty() && manifest.filter_dialects(config.training.dialects).empty()) {
    throw UsageError("no training utterances left after --dialects filtering");
  }
  const fs::path decoder_path = decoder ? require_file(*decoder, "decoder checkpoint")
                                        : ensure_decoder(config, runs_root, progress);
  const json resolved = {{"config", config.to_json()},
                         {"data_digest", file_digest(manifest_path)},
                         {"decoder_digest", file_digest(decoder_path)}};
  TrainOutcome outcome;
  outcome.run_dir = runs_root / ("train-" + digest(resolved).substr(0, 16));
  outcome.checkpoint = outcome.run_dir / "ckpt_final.bin";
  const fs::path resolved_path = outcome.run_dir / "resolved_config.json";

  if (fs::exists(outcome.checkpoint) && fs::exists(resolved_path) &&
      json::parse(read_text(resolved_path)) == resolved) {
    outcome.cached = true;
    std::istringstream lines(read_text(outcome.run_dir / "train_log.jsonl"));
    for (std::string line; std::getline(lines, line);) outcome.log.push_back(json::parse(line));
    if (progress) *progress << "reusing finished run " << outcome.run_dir.string() << '\n';
    return outcome;
  }

  fs::create_directories(outcome.run_dir);
  write_text(resolved_path, resolved.dump(2) + "\n");
  const Checkpoint dec = load_checkpoint(decoder_path);
  train::SpeechModel model = train::build_speech_model(config.training.adapter, config.adapter, config.decoder,
                                                       dec.params, config.training.lora, config.training.seed);
  if (progress) {
    *progress << "training " << train::adapter_kind_name(config.training.adapter) << " for "
              << config.training.steps << " steps into " << outcome.run_dir.string() << '\n';
  }
  const auto t0 = std::chrono::steady_clock::now();
  train::TrainResult result = train::train_run(model, manifest, config.training, outcome.run_dir, resolved);
  if (progress) {
    *progress << "done in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
              << " s, final ntp " << result.log.back().at("ntp") << '\n';
  }
  outcome.log = std::move(result.log);
  return outcome;
}

EvalOutcome cmd_eval(const fs::path& checkpoint, const fs::path& manifest_path, Task task, const fs::path& out_dir) {
  require_file(checkpoint, "checkpoint");
  require_file(manifest_path, "manifest");
  train::SpeechModel model = train::model_from_checkpoint(load_checkpoint(checkpoint));
  const corpus::Manifest manifest = corpus::Manifest::load(manifest_path).filter_task(task);
  if (manifest.empty()) throw UsageError("manifest has no " + corpus::task_name(task) + " utterances");
  if (manifest.dim() != model.adapter.d_audio) {
    throw UsageError("checkpoint expects " + std::to_string(model.adapter.d_audio) +
                     "-dim features, manifest has " + std::to_string(manifest.dim()));
  }
  const std::size_t range = task == Task::kAsr ? model.decoder.vocab.source : model.decoder.vocab.target;
  for (const auto& r : manifest.records()) {
    for (int t : task == Task::kAsr ? r.transcript : r.translation) {
      if (t < 0 || static_cast<std::size_t>(t) >= range) {
        throw UsageError("utterance " + r.id + " has tokens outside the checkpoint vocabulary");
      }
    }
  }
  EvalOutcome out;
  out.out_dir = out_dir;
  fs::create_directories(out_dir);
  out.predictions = train::predict(model, manifest.load_utterances(), task);
  train::write_predictions(out_dir / "predictions.jsonl", out.predictions);
  out.report = train::score_predictions(out.predictions, task);
  json metrics_json = train::report_to_json(out.report);
  metrics_json["checkpoint"] = checkpoint.string();
  metrics_json["manifest"] = manifest_path.string();
  write_text(out_dir / "metrics.json", metrics_json.dump(2) + "\n");
  write_text(out_dir / "metrics.csv", train::report_to_csv(out.report));

  const auto records = train::efficiency_records(out.predictions, system_name(model.kind));
  const auto expansion = metrics::expansion_report(records);
  out.efficiency = metrics::expansion_to_json(expansion);
  std::ostringstream per_utt;
  per_utt << "utterance_id,system,audio_tokens,text_tokens,ratio\n";
  for (const auto& r : records) {
    per_utt << r.utterance_id << ',' << r.system << ',' << r.audio_tokens << ',' << r.text_tokens << ','
            << r.ratio() << '\n';
  }
  write_text(out_dir / "efficiency.json", out.efficiency.dump(2) + "\n");
  write_text(out_dir / "efficiency.csv", metrics::expansion_to_csv(expansion));
  write_text(out_dir / "efficiency_records.csv", per_utt.str());
  return out;
}

json cmd_ablate(const RunConfig& config, const fs::path& data_dir, const fs::path& out_root, std::ostream* progress) {
  const fs::path test_manifest = require_file(data_dir / "test.jsonl", "test manifest");
  const std::vector<std::pair<std::string, std::vector<std::string>>> sources = {
      {"all", {}}, {"A", {"A"}}, {"B", {"B"}}, {"C", {"C"}}};
  json runs = json::array();
  std::ostringstream csv;
  csv.precision(10);
  csv << "adapter,source,A,B,C,avg,mean_ratio,length_correlation\n";
  std::map<std::string, std::map<std::string, json>> wer;  // adapter -> source -> per-dialect
  for (auto kind : {train::AdapterKind::kDynamic, train::AdapterKind::kLinear}) {
    for (const auto& [source, dialects] : sources) {
      RunConfig c = config;
      c.training.adapter = kind;
      c.training.dialects = dialects;
      const TrainOutcome t = cmd_train(c, data_dir, out_root, std::nullopt, progress);
      const EvalOutcome e = cmd_eval(t.checkpoint, test_manifest, Task::kAsr, t.run_dir / "eval_asr");
      const std::string name = train::adapter_kind_name(kind);
      json per = json::object();
      for (const auto& [d, s] : e.report.dialects) per[d] = s.wer;
      per["avg"] = e.report.average.wer;
      wer[name][source] = per;
      const json& sys = e.efficiency.at("systems").at(system_name(kind));
      runs.push_back({{"adapter", name},
                      {"source", source},
                      {"run_dir", t.run_dir.string()},
                      {"wer", per},
                      {"mean_ratio", sys.at("mean_ratio")},
                      {"length_correlation", sys.at("length_correlation")}});
      csv << name << ',' << source;
      for (const char* d : {"A", "B", "C", "avg"}) csv << ',' << (per.contains(d) ? per.at(d).get<double>() : 0.0);
      csv << ',' << sys.at("mean_ratio").get<double>() << ',';
      if (!sys.at("length_correlation").is_null()) csv << sys.at("length_correlation").get<double>();
      csv << '\n';
    }
  }
  auto avg = [&](const std::string& kind, const std::string& src) { return wer[kind][src].at("avg").get<double>(); };
  bool multi_beats_singles = true, own_best = true;
  for (const char* d : {"A", "B", "C"}) {
    multi_beats_singles = multi_beats_singles && avg("dynamic", "all") < avg("dynamic", d);
    for (const char* other : {"A", "B", "C"}) {
      if (std::string(other) != d) {
        own_best = own_best && wer["dynamic"][d].at(d).get<double>() < wer["dynamic"][d].at(other).get<double>();
      }
    }
  }
  const json table = {
      {"runs", runs},
      {"directions",
       {{"adapter_beats_linear", avg("dynamic", "all") < avg("linear", "all")},
        {"multi_dialect_beats_every_single", multi_beats_singles},
        {"single_dialect_best_on_own", own_best}}}};
  fs::create_directories(out_root);
  write_text(out_root / "ablation.json", table.dump(2) + "\n");
  write_text(out_root / "ablation.csv", csv.str());
  return table;
}

namespace {

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

// u^T x c with fixed random u, c: a scalar that depends on every entry of x.
Var readout(Tape& tape, Var x, std::uint64_t seed) {
  Rng rng(seed);
  const Var u = tape.constant(random_matrix(rng, 1, x.rows()));
  const Var c = tape.constant(random_matrix(rng, x.cols(), 1));
  return matmul(matmul(u, x), c);
}

void keep_trainable(ParameterSet& params, const std::vector<std::string>& prefixes) {
  params.set_frozen(
      [&](const std::string& name) {
        for (const auto& p : prefixes)
          if (name.rfind(p, 0) == 0) return false;
        return true;
      },
      true);
}

json entry_json(const std::string& check, const GradCheckReport& r, double tolerance) {
  json params = json::object();
  for (const auto& e : r.entries) params[e.name] = e.max_rel_error;
  return {{"check", check}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed(tolerance)}, {"params", params}};
}

}  // namespace

GradcheckOutcome cmd_gradcheck(double tolerance) {
  adapter::AdapterConfig ac;
  ac.d_audio = 3;
  ac.d_model = 4;
  ac.heads = 2;
  ac.ffn = 6;
  ac.vocab = 3;
  ac.n_layers = 1;
  ac.max_frames = 8;
  Rng rng(2024);
  json checks = json::array();
  bool passed = true;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    checks.push_back(entry_json(name, r, tolerance));
    passed = passed && r.passed(tolerance);
  };

  {
    ParameterSet p = adapter::init_adapter(ac, 1);
    keep_trainable(p, {"adapter.proj", "adapter.pos", "adapter.enc.0"});
    const Tensor x = random_matrix(rng, 5, ac.d_audio);
    record("enhancer_layer", grad_check(
                                 [&](Tape& t, ParameterSet& ps) { return readout(t, adapter::enhance(t, ps, ac, x), 1); },
                                 p));
  }
  {
    ParameterSet p = adapter::init_adapter(ac, 2);
    keep_trainable(p, {"adapter.xattn"});
    const Tensor q = random_matrix(rng, 2, ac.d_model);
    const Tensor kv = random_matrix(rng, 5, ac.d_model);
    record("cross_attend", grad_check(
                               [&](Tape& t, ParameterSet& ps) {
                                 return readout(t, adapter::cross_attend(t, ps, ac, t.constant(q), t.constant(kv)).z, 2);
                               },
                               p));
  }
  {
    ParameterSet p;
    p.add("logits", random_matrix(rng, 6, 4));
    record("ctc_loss", grad_check(
                           [&](Tape& t, ParameterSet& ps) {
                             return ctc::ctc_loss(log_softmax_rows(t.param(ps, "logits")), {0, 1, 1});
                           },
                           p));
  }
  {
    train::DecoderConfig dc;
    dc.vocab = {3, 3};
    dc.d_model = 4;
    dc.heads = 2;
    dc.ffn = 6;
    dc.n_layers = 1;
    dc.max_len = 32;
    train::SpeechModel m = train::build_speech_model(train::AdapterKind::kDynamic, ac, dc, train::init_decoder(dc, 3),
                                                     {2, 4.0}, 3);
    for (auto& [name, p] : m.params)
      if (name.find(".lora_b") != std::string::npos)
        for (auto& v : p.value.values()) v = 0.1 * rng.normal();
    corpus::Utterance u;
    u.id = "gradcheck";
    u.task = Task::kSt;
    u.features = random_matrix(rng, 4, ac.d_audio);
    u.transcript = {1, 2};
    u.translation = {2, 0};
    const std::vector<std::size_t> fixed = {0, 2};
    record("joint_objective", grad_check(
                                  [&](Tape& t, ParameterSet&) {
                                    return train::utterance_loss(t, m, u, 0.3, fixed).total;
                                  },
                                  m.params));
  }
  return {{{"tolerance", tolerance}, {"checks", checks}, {"passed", passed}}, passed};
}

json cmd_sample_stats(const RunConfig& config, const fs::path& data_dir) {
  const corpus::Manifest manifest = corpus::Manifest::load(require_file(data_dir / "train.jsonl", "train manifest"));
  const sampler::CategoryMembers members = sampler::group_by_category(manifest);
  const sampler::Probabilities probs = sampler::category_probabilities(sampler::stats_of(members), config.sampler.tau);
  Rng rng(config.sampler.seed);
  const std::vector<sampler::Draw> draws = sampler::sample_batch(members, probs, config.sampler.draws, rng);
  const auto report = sampler::frequency_report(draws, probs);
  json out = sampler::report_to_json(report);
  out["tau"] = config.sampler.tau;
  double worst = 0.0;
  for (const auto& [key, p] : probs) worst = std::max(worst, std::abs(report.frequencies.at(key) - p));
  out["max_abs_deviation"] = worst;
  json natural = json::object();
  for (const auto& [key, p] : sampler::category_probabilities(sampler::stats_of(members), 1.0)) natural[key.name()] = p;
  out["targets_tau_1"] = natural;
  return out;
}

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
};

RunConfig resolve(const CommonOptions& o, std::vector<std::string> extra) {
  std::vector<std::string> all = o.sets;
  all.insert(all.end(), extra.begin(), extra.end());
  return load_run_config(o.config.empty() ? std::nullopt : std::optional<fs::path>(o.config), all);
}

std::string dialect_list_json(const std::string& csv) {
  json list = json::array();
  std::stringstream ss(csv);
  for (std::string d; std::getline(ss, d, ',');)
    if (!d.empty()) list.push_back(d);
  return list.dump();
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic-query speech adapter toolkit"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--set", common.sets, "Override, dotted.key=value (repeatable)");
  };

  std::string out_dir, data_dir, runs_dir = "runs", decoder_path, checkpoint, manifest, task = "asr", adapter_kind,
                                 dialects;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, draws;
  std::optional<double> lambda, tau;
  double tolerance = 1e-4;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic corpus");
  add_common(gen);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", seed, "Corpus seed");

  auto* trn = app.add_subcommand("train", "Train one model");
  add_common(trn);
  trn->add_option("--data", data_dir, "Corpus directory (train.jsonl)")->required();
  trn->add_option("--runs", runs_dir, "Root for run directories");
  trn->add_option("--seed", seed, "Training seed");
  trn->add_option("--steps", steps, "Optimizer steps");
  trn->add_option("--lambda", lambda, "CTC weight");
  trn->add_option("--tau", tau, "Sampling temperature");
  trn->add_option("--adapter", adapter_kind, "dynamic or linear")->check(CLI::IsMember({"dynamic", "linear"}));
  trn->add_option("--dialects", dialects, "Comma-separated dialect subset");
  trn->add_option("--decoder", decoder_path, "Pretrained decoder checkpoint");

  auto* evl = app.add_subcommand("eval", "Decode and score a checkpoint");
  evl->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  evl->add_option("--manifest", manifest, "Manifest (JSON Lines)");
  evl->add_option("--data", data_dir, "Corpus directory (test.jsonl)");
  evl->add_option("--task", task, "asr or st")->check(CLI::IsMember({"asr", "st"}));
  evl->add_option("--out", out_dir, "Output directory (default: next to the checkpoint)");

  auto* abl = app.add_subcommand("ablate", "Adapter and training-source ablation");
  add_common(abl);
  abl->add_option("--data", data_dir, "Corpus directory")->required();
  abl->add_option("--out", out_dir, "Root for runs and tables")->required();
  abl->add_option("--seed", seed, "Training seed");
  abl->add_option("--steps", steps, "Optimizer steps");

  auto* grd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grd->add_option("--tolerance", tolerance, "Relative error bound");

  auto* smp = app.add_subcommand("sample-stats", "Sampler frequency diagnostics");
  add_common(smp);
  smp->add_option("--data", data_dir, "Corpus directory (train.jsonl)")->required();
  smp->add_option("--tau", tau, "Sampling temperature");
  smp->add_option("--draws", draws, "Number of draws");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  std::vector<std::string> extra;
  auto flag = [&](const std::string& key, const std::string& value) { extra.push_back(key + "=" + value); };
  try {
    if (*gen) {
      if (seed) flag("corpus.seed", std::to_string(*seed));
      const RunConfig c = resolve(common, extra);
      out << cmd_gen_data(c, out_dir).dump(2) << '\n';
    } else if (*trn) {
      if (seed) flag("training.seed", std::to_string(*seed));
      if (steps) flag("training.steps", std::to_string(*steps));
      if (lambda) flag("training.lambda", json(*lambda).dump());
      if (tau) flag("sampler.tau", json(*tau).dump());
      if (!adapter_kind.empty()) flag("training.adapter", adapter_kind);
      if (!dialects.empty()) flag("training.dialects", dialect_list_json(dialects));
      const RunConfig c = resolve(common, extra);
      const TrainOutcome t = cmd_train(c, data_dir, runs_dir,
                                       decoder_path.empty() ? std::nullopt : std::optional<fs::path>(decoder_path), &err);
      out << json{{"run_dir", t.run_dir.string()},
                  {"checkpoint", t.checkpoint.string()},
                  {"cached", t.cached},
                  {"final", t.log.empty() ? json(nullptr) : t.log.back()}}
                 .dump(2)
          << '\n';
    } else if (*evl) {
      fs::path m = manifest;
      if (m.empty()) {
        if (data_dir.empty()) throw UsageError("eval needs --manifest or --data");
        m = fs::path(data_dir) / "test.jsonl";
      }
      const fs::path target = out_dir.empty() ? fs::path(checkpoint).parent_path() / ("eval_" + task) : fs::path(out_dir);
      const EvalOutcome e = cmd_eval(checkpoint, m, corpus::parse_task(task), target);
      json summary = train::report_to_json(e.report);
      summary["efficiency"] = e.efficiency;
      summary["out_dir"] = target.string();
      out << summary.dump(2) << '\n';
    } else if (*abl) {
      if (seed) flag("training.seed", std::to_string(*seed));
      if (steps) flag("training.steps", std::to_string(*steps));
      const RunConfig c = resolve(common, extra);
      out << cmd_ablate(c, data_dir, out_dir, &err).dump(2) << '\n';
    } else if (*grd) {
      const GradcheckOutcome g = cmd_gradcheck(tolerance);
      out << g.report.dump(2) << '\n';
      return g.passed ? 0 : 1;
    } else if (*smp) {
      if (tau) flag("sampler.tau", json(*tau).dump());
      if (draws) flag("sampler.draws", std::to_string(*draws));
      const RunConfig c = resolve(common, extra);
      out << cmd_sample_stats(c, data_dir).dump(2) << '\n';
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace dynq::cli
