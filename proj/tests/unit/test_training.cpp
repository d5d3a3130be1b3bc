#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "../support/scratch.hpp"
#include "dynq/tensorcore/errors.hpp"
#include "dynq/tensorcore/gradcheck.hpp"
#include "dynq/training/config_io.hpp"
#include "dynq/training/model.hpp"

using namespace dynq;
using namespace dynq::train;
using corpus::Task;
namespace fs = std::filesystem;

namespace {

DecoderConfig tiny_decoder() {
  DecoderConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.heads = 2;
  c.ffn = 16;
  c.max_len = 64;
  return c;
}

adapter::AdapterConfig tiny_adapter() {
  adapter::AdapterConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.heads = 2;
  c.ffn = 16;
  c.max_frames = 48;
  return c;
}

SpeechModel tiny_model(AdapterKind kind, std::uint64_t seed = 3) {
  const DecoderConfig dc = tiny_decoder();
  return build_speech_model(kind, tiny_adapter(), dc, init_decoder(dc, seed), LoraConfig{2, 4.0}, seed);
}

corpus::CorpusConfig tiny_corpus() {
  corpus::CorpusConfig c = corpus::default_corpus_config();
  for (auto& [k, v] : c.train_counts) v = 4;
  for (auto& [k, v] : c.test_counts) v = 2;
  return c;
}

corpus::Utterance four_frame_utterance(Rng& rng) {
  corpus::Utterance u;
  u.id = "u4";
  u.dialect = "A";
  u.task = Task::kAsr;
  u.features = Tensor::matrix(4, 16);
  for (auto& v : u.features.values()) v = rng.normal();
  u.transcript = {1, 2};
  return u;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("lora_linear, r = 1 by hand") {
  ParameterSet p;
  p.add("m.w", Tensor::from_rows({{1, 2}, {3, 4}}));
  p.add("m.b", Tensor::from_rows({{0.5, -1}}));
  Rng rng(1);
  lora_wrap(p, "m", {1, 2.0}, rng);
  CHECK(p.at("m.w").frozen);
  CHECK(p.at("m.b").frozen);
  CHECK(p.value("m.lora_b").values()[0] == 0.0);
  p.value("m.lora_a") = Tensor::from_rows({{1}, {2}});
  p.value("m.lora_b") = Tensor::from_rows({{0.5, -1}});
  Tape tape;
  const Var y = lora_linear(tape, p, "m", tape.constant(Tensor::from_rows({{1, -1}})), 2.0);
  // x W + b = [-1.5, -3]; x A = -1; (alpha / r) (x A) B = [-1, 2]
  CHECK(y.value()(0, 0) == -2.5);
  CHECK(y.value()(0, 1) == -1.0);
}

TEST_CASE("lora at initialization is the identity") {
  Rng rng(4);
  ParameterSet p;
  p.add("m.w", uniform_init(6, 5, rng));
  p.add("m.b", Tensor::matrix(1, 5, 0.3));
  ParameterSet wrapped = p;
  lora_wrap(wrapped, "m", {3, 16.0}, rng);
  Tensor x = Tensor::matrix(7, 6);
  for (auto& v : x.values()) v = rng.normal();
  Tape t1, t2;
  const Var base = lora_linear(t1, p, "m", t1.constant(x), 16.0 / 3.0);
  const Var adapted = lora_linear(t2, wrapped, "m", t2.constant(x), 16.0 / 3.0);
  CHECK(bit_equal(base.value(), adapted.value()));
}

TEST_CASE("lora rank limits") {
  Rng rng(1);
  ParameterSet p;
  p.add("m.w", uniform_init(4, 3, rng));
  p.add("m.b", Tensor::matrix(1, 3));
  CHECK_THROWS_AS(lora_wrap(p, "m", {4, 16.0}, rng), ParameterError);
  CHECK_THROWS_AS(lora_wrap(p, "m", {0, 16.0}, rng), ParameterError);
  CHECK_NOTHROW(lora_wrap(p, "m", {3, 16.0}, rng));
}

TEST_CASE("decoder evaluation is unchanged by fresh LoRA factors") {
  const DecoderConfig dc = tiny_decoder();
  ParameterSet base = init_decoder(dc, 8);
  ParameterSet wrapped = base;
  wrap_decoder_attention(wrapped, dc, {2, 16.0}, 9);
  Rng rng(2);
  Tensor z = Tensor::matrix(3, dc.d_model);
  for (auto& v : z.values()) v = rng.normal();
  const std::vector<int> tokens = {dc.vocab.asr_prompt(), dc.vocab.bos(), 3, 4};
  Tape t1, t2;
  const Var h1 = decoder_hidden(t1, base, dc, 8.0, t1.constant(z), tokens);
  const Var h2 = decoder_hidden(t2, wrapped, dc, 8.0, t2.constant(z), tokens);
  CHECK(bit_equal(h1.value(), h2.value()));
  CHECK(greedy_generate(base, dc, 8.0, z, {dc.vocab.st_prompt()}, 6) ==
        greedy_generate(wrapped, dc, 8.0, z, {dc.vocab.st_prompt()}, 6));
}

TEST_CASE("vocabulary layout") {
  const Vocabulary v;
  CHECK(v.size() == 29);
  CHECK(v.bos() == 24);
  CHECK(v.eos() == 25);
  CHECK(v.st_prompt() == 28);
  CHECK(v.decode_hypothesis({3, 15, 25}, Task::kAsr) == std::vector<int>{3, 12 + 15 % 8, 12 + 25 % 8});
  CHECK(v.decode_hypothesis({15, 3}, Task::kSt) == std::vector<int>{3, 12 + 3});
}

TEST_CASE("ntp_loss of a uniform decoder over 26 ids") {
  DecoderConfig dc = tiny_decoder();
  dc.vocab.source = 10;
  dc.vocab.target = 11;
  REQUIRE(dc.vocab.size() == 26);
  ParameterSet p = init_decoder(dc, 5);
  p.value("decoder.embed").fill(0.0);
  Rng rng(3);
  Tensor z = Tensor::matrix(4, dc.d_model);
  for (auto& v : z.values()) v = rng.normal();
  Tape tape;
  const Var loss = ntp_loss(tape, p, dc, 0.0, tape.constant(z), {dc.vocab.asr_prompt()}, {1, 2, 3});
  CHECK(std::abs(loss.value().item() - std::log(26.0)) < 1e-12);
  CHECK(std::abs(loss.value().item() - 3.2581) < 1e-4);
  Tape tape2;
  const Var longer = ntp_loss(tape2, p, dc, 0.0, tape2.constant(z),
                              {dc.vocab.asr_prompt(), dc.vocab.asr_prompt()}, {1, 2, 3});
  CHECK(std::abs(longer.value().item() - loss.value().item()) < 1e-12);
  Tape tape3;
  CHECK_THROWS_AS(ntp_loss(tape3, p, dc, 0.0, tape3.constant(z), {dc.vocab.asr_prompt()}, {}),
                  ParameterError);
}

TEST_CASE("masked_ntp ignores rows outside the answer window") {
  Rng rng(6);
  Tensor answer = Tensor::matrix(3, 5);
  for (auto& v : answer.values()) v = rng.normal();
  const std::vector<int> targets = {4, 0, 2};
  Tape t1;
  const double base = masked_ntp(t1.constant(answer), 0, targets).value().item();
  for (std::size_t prompt_rows : {1u, 2u, 4u}) {
    Tensor logits = Tensor::matrix(prompt_rows + 3, 5);
    for (auto& v : logits.values()) v = rng.normal() * 10.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) logits(prompt_rows + i, j) = answer(i, j);
    Tape t2;
    CHECK(masked_ntp(t2.constant(logits), prompt_rows, targets).value().item() == doctest::Approx(base).epsilon(1e-14));
  }
  Tape t3;
  CHECK_THROWS_AS(masked_ntp(t3.constant(answer), 1, targets), DimensionError);
}

TEST_CASE("total_loss arithmetic") {
  CHECK(std::abs(total_loss(2.0, 1.0, 0.3).total - 2.3) < 1e-15);
  CHECK(total_loss(2.0, 5.0, 0.0).total == 2.0);
  CHECK(total_loss(2.0, std::nullopt, 0.3).total == 2.0);
  CHECK_THROWS_AS(total_loss(2.0, 1.0, -0.1), ParameterError);
  Tape tape;
  const Var v = total_loss(tape.constant(Tensor::scalar(2.0)), tape.constant(Tensor::scalar(1.0)), 0.3);
  CHECK(std::abs(v.value().item() - 2.3) < 1e-15);
  CHECK_THROWS_AS(total_loss(tape.constant(Tensor::scalar(1.0)), std::nullopt, -1.0), ParameterError);
}

TEST_CASE("joint objective gradients") {
  Rng rng(12);
  const corpus::Utterance u = four_frame_utterance(rng);
  const std::vector<std::size_t> fixed = {0, 2};
  const double lambda = 0.3;

  SUBCASE("total gradient is the weighted branch sum") {
    SpeechModel m = tiny_model(AdapterKind::kDynamic);
    auto grads_of = [&](int which) {
      m.params.zero_grad();
      Tape tape;
      const UtteranceLoss l = utterance_loss(tape, m, u, lambda, fixed);
      tape.backward(which == 0 ? l.ntp : which == 1 ? *l.ctc : l.total);
      std::map<std::string, Tensor> g;
      for (auto& [name, p] : m.params)
        if (!p.frozen) g[name] = p.grad;
      return g;
    };
    const auto g_ntp = grads_of(0);
    const auto g_ctc = grads_of(1);
    const auto g_total = grads_of(2);
    double worst = 0.0;
    for (const auto& [name, g] : g_total) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double expected = g_ntp.at(name)[i] + lambda * g_ctc.at(name)[i];
        worst = std::max(worst, std::abs(g[i] - expected) / std::max(1.0, std::abs(expected)));
      }
    }
    CHECK(worst < 1e-12);
  }

  SUBCASE("finite differences through adapter and decoder") {
    SpeechModel m = tiny_model(AdapterKind::kDynamic);
    // move LoRA B off zero so both factors carry gradient
    Rng init(5);
    for (auto& [name, p] : m.params)
      if (name.find(".lora_b") != std::string::npos)
        for (auto& v : p.value.values()) v = 0.1 * init.normal();
    const GradCheckReport report = grad_check(
        [&](Tape& tape, ParameterSet&) { return utterance_loss(tape, m, u, lambda, fixed).total; }, m.params);
    CHECK(report.passed(1e-4));
    CHECK(report.entries.size() > 10);
  }

  SUBCASE("linear baseline has no CTC branch") {
    SpeechModel m = tiny_model(AdapterKind::kLinear);
    Tape tape;
    const UtteranceLoss l = utterance_loss(tape, m, u, lambda);
    CHECK_FALSE(l.ctc.has_value());
    CHECK(l.audio_tokens == 4);
    CHECK(l.total.value().item() == l.ntp.value().item());
    const GradCheckReport report = grad_check(
        [&](Tape& t, ParameterSet&) { return utterance_loss(t, m, u, lambda).total; }, m.params);
    CHECK(report.passed(1e-4));
  }
}

TEST_CASE("train_run contracts") {
  const fs::path data = testing::scratch_dir("train_data");
  const corpus::WrittenCorpus written = corpus::generate_corpus(tiny_corpus(), data);
  TrainConfig tc;
  tc.steps = 6;
  tc.batch_size = 4;
  tc.checkpoint_every = 3;
  tc.lora = {2, 4.0};

  SUBCASE("freeze policy") {
    SpeechModel m = tiny_model(AdapterKind::kDynamic);
    const SpeechModel before = m;
    train_run(m, written.train, tc, testing::scratch_dir("train_freeze"));
    for (const auto& [name, p] : before.params) {
      const Tensor& after = m.params.value(name);
      if (name.rfind("decoder.", 0) == 0 && name.find(".lora_") == std::string::npos) {
        CHECK_MESSAGE(bit_equal(p.value, after), name);
      }
      if (name.find(".lora_b") != std::string::npos || name.rfind("adapter.enc", 0) == 0) {
        CHECK_MESSAGE(!bit_equal(p.value, after), name);
      }
    }
  }

  SUBCASE("same seed, same bytes") {
    const fs::path d1 = testing::scratch_dir("train_det1");
    const fs::path d2 = testing::scratch_dir("train_det2");
    SpeechModel m1 = tiny_model(AdapterKind::kDynamic);
    SpeechModel m2 = tiny_model(AdapterKind::kDynamic);
    train_run(m1, written.train, tc, d1, {{"note", "x"}});
    train_run(m2, written.train, tc, d2, {{"note", "x"}});
    CHECK(slurp(d1 / "train_log.jsonl") == slurp(d2 / "train_log.jsonl"));
    CHECK(slurp(d1 / "ckpt_final.bin") == slurp(d2 / "ckpt_final.bin"));
    CHECK(slurp(d1 / "ckpt_3.bin") == slurp(d2 / "ckpt_3.bin"));
    CHECK(fs::exists(d1 / "ckpt_6.bin"));
  }

  SUBCASE("log records") {
    SpeechModel m = tiny_model(AdapterKind::kLinear);
    TrainConfig only_b = tc;
    only_b.dialects = {"B"};
    const TrainResult r = train_run(m, written.train, only_b, testing::scratch_dir("train_log"));
    REQUIRE(r.log.size() == 6);
    for (const auto& line : r.log) {
      CHECK(line.at("ctc").is_null());
      CHECK(line.at("dialects").size() == 1);
      CHECK(line.at("dialects").at("B") == 4);
      CHECK(std::isfinite(line.at("ntp").get<double>()));
    }
    CHECK(r.log.front().at("step") == 1);
    TrainConfig none = tc;
    none.dialects = {"Z"};
    CHECK_THROWS_AS(train_run(m, written.train, none, testing::scratch_dir("train_none")), DataError);
  }

  SUBCASE("non-finite loss dumps the batch") {
    SpeechModel m = tiny_model(AdapterKind::kDynamic);
    m.params.value("adapter.proj.w")(0, 0) = std::nan("");
    const fs::path dir = testing::scratch_dir("train_nan");
    CHECK_THROWS_AS(train_run(m, written.train, tc, dir), NumericError);
    REQUIRE(fs::exists(dir / "nan_batch.json"));
    const auto dump = nlohmann::json::parse(slurp(dir / "nan_batch.json"));
    CHECK(dump.at("step") == 0);
    CHECK(!dump.at("batch").empty());
  }

  SUBCASE("config validation") {
    SpeechModel m = tiny_model(AdapterKind::kDynamic);
    TrainConfig bad = tc;
    bad.lambda = -1.0;
    CHECK_THROWS_AS(train_run(m, written.train, bad, testing::scratch_dir("train_bad")), ParameterError);
    bad = tc;
    bad.steps = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = tc;
    bad.lora.rank = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
  }

  SUBCASE("evaluate_checkpoint") {
    const fs::path dir = testing::scratch_dir("train_eval");
    SpeechModel m = tiny_model(AdapterKind::kDynamic);
    const TrainResult r = train_run(m, written.train, tc, dir);
    const auto p1 = evaluate_checkpoint(r.final_checkpoint, written.test, Task::kSt, dir / "p1.jsonl");
    const auto p2 = evaluate_checkpoint(r.final_checkpoint, written.test, Task::kSt, dir / "p2.jsonl");
    CHECK(p1.size() == 6);
    CHECK(slurp(dir / "p1.jsonl") == slurp(dir / "p2.jsonl"));
    for (const auto& p : p1) CHECK(p.hypothesis.size() <= 64);
    CHECK_THROWS_AS(evaluate_checkpoint(dir / "missing.bin", written.test, Task::kAsr, dir / "p3.jsonl"),
                    IoError);
  }
}

TEST_CASE("EOS-first output gives an empty hypothesis") {
  SpeechModel m = tiny_model(AdapterKind::kLinear);
  const int eos = m.decoder.vocab.eos();
  Tensor& embed = m.params.value("decoder.embed");
  Tensor& gain = m.params.value("decoder.ln_f.g");
  Tensor& bias = m.params.value("decoder.ln_f.b");
  gain.fill(0.0);
  for (std::size_t j = 0; j < embed.cols(); ++j) {
    bias(0, j) = 1.0;
    embed(static_cast<std::size_t>(eos), j) = 5.0;
  }
  Rng rng(2);
  const corpus::Utterance u = four_frame_utterance(rng);
  const auto preds = predict(m, {u}, Task::kAsr);
  REQUIRE(preds.size() == 1);
  CHECK(preds[0].hypothesis.empty());
  const EvalReport report = score_predictions(preds, Task::kAsr);
  CHECK(report.average.wer == 100.0);
  CHECK(report.average.exact_match == 0.0);
}

TEST_CASE("score_predictions") {
  std::vector<Prediction> preds;
  auto add = [&](std::string dialect, metrics::Tokens ref, metrics::Tokens hyp) {
    Prediction p;
    p.id = "p" + std::to_string(preds.size());
    p.dialect = std::move(dialect);
    p.reference = std::move(ref);
    p.hypothesis = std::move(hyp);
    p.audio_tokens = p.reference.size();
    preds.push_back(p);
  };
  add("A", {1, 2, 3, 4}, {1, 2, 3, 4});
  add("A", {1, 2}, {1});
  add("B", {5, 6, 7}, {5, 6, 8});
  const EvalReport r = score_predictions(preds, Task::kAsr);
  CHECK(r.dialects.at("A").wer == doctest::Approx(100.0 / 6.0));
  CHECK(r.dialects.at("B").wer == doctest::Approx(100.0 / 3.0));
  CHECK(r.average.wer == doctest::Approx(25.0));
  CHECK(r.dialects.at("A").exact_match == 0.5);
  const std::string csv = report_to_csv(r);
  CHECK(csv.rfind("dialect,count,wer,cer,exact_match\n", 0) == 0);
  CHECK(csv.find("\navg,3,25,") != std::string::npos);
  CHECK(report_to_json(r).at("dialects").size() == 2);
  const auto eff = efficiency_records(preds, "adapter");
  CHECK(eff.size() == 3);
  CHECK(eff[0].ratio() == 1.0);
}

TEST_CASE("config json") {
  TrainConfig tc;
  tc.lambda = 0.5;
  tc.dialects = {"A", "C"};
  tc.adapter = AdapterKind::kLinear;
  TrainConfig back;
  apply_json(to_json(tc), back);
  CHECK(to_json(back) == to_json(tc));
  CHECK_THROWS_AS(apply_json({{"lamda", 0.1}}, back), ParameterError);
  CHECK_THROWS_AS(apply_json({{"steps", -5}}, back), ParameterError);
  CHECK_THROWS_AS(apply_json({{"steps", "many"}}, back), ParameterError);
  CHECK_THROWS_AS(apply_json({{"adapter", "conv"}}, back), ParameterError);

  corpus::CorpusConfig cc = corpus::default_corpus_config();
  corpus::CorpusConfig cc2;
  apply_json(to_json(cc), cc2);
  CHECK(to_json(cc2) == to_json(cc));
  adapter::AdapterConfig ac;
  ac.d_model = 32;
  adapter::AdapterConfig ac2;
  apply_json(to_json(ac), ac2);
  CHECK(ac2.d_model == 32);
  DecoderConfig dc;
  CHECK_THROWS_AS(apply_json({{"d_model", 8}, {"extra", 1}}, dc), ParameterError);
  PretrainConfig pc;
  apply_json({{"steps", 7}}, pc);
  CHECK(pc.steps == 7);
}

TEST_CASE("checkpoint restores the model") {
  SpeechModel m = tiny_model(AdapterKind::kDynamic);
  const Checkpoint c = decode_checkpoint(encode_checkpoint(m.params, model_metadata(m)));
  SpeechModel back = model_from_checkpoint(c);
  CHECK(back.kind == AdapterKind::kDynamic);
  CHECK(back.lora_factor() == m.lora_factor());
  Rng rng(8);
  const corpus::Utterance u = four_frame_utterance(rng);
  CHECK(bit_equal(speech_prefix(m, u.features), speech_prefix(back, u.features)));
  CHECK_THROWS_AS(model_from_checkpoint(Checkpoint{}), DataError);
}

TEST_CASE("short pretraining lowers the loss") {
  DecoderConfig dc = tiny_decoder();
  dc.d_model = 16;
  PretrainConfig pc;
  pc.steps = 60;
  pc.batch_size = 8;
  std::vector<nlohmann::json> log;
  ParameterSet p = pretrain_decoder(dc, pc, &log);
  REQUIRE(log.size() == 60);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += log[i].at("ntp").get<double>();
    tail += log[50 + i].at("ntp").get<double>();
  }
  CHECK(tail < head);
  const double acc = pretrain_accuracy(p, dc, 5, 1);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  pc.min_length = 0;
  CHECK_THROWS_AS(pretrain_decoder(dc, pc), ParameterError);
}

TEST_CASE("CTC loss falls during the first 200 steps on the default corpus") {
  const fs::path data = testing::scratch_dir("train_default");
  const corpus::WrittenCorpus written = corpus::generate_corpus(corpus::default_corpus_config(), data);
  const DecoderConfig dc;
  SpeechModel m = build_speech_model(AdapterKind::kDynamic, {}, dc, init_decoder(dc, 1), {}, 1);
  TrainConfig tc;
  tc.steps = 200;
  tc.lambda = 0.3;
  const TrainResult r = train_run(m, written.train, tc, testing::scratch_dir("train_default_run"));
  std::vector<double> blocks;
  for (std::size_t b = 0; b < 4; ++b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 50; ++i) sum += r.log[50 * b + i].at("ctc").get<double>();
    blocks.push_back(sum / 50.0);
  }
  for (std::size_t b = 1; b < blocks.size(); ++b) CHECK(blocks[b] < blocks[b - 1]);
}
