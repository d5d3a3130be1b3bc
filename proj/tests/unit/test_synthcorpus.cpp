#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dynq/synthcorpus/corpus.hpp"
#include "dynq/tensorcore/errors.hpp"

using namespace dynq;
using namespace dynq::corpus;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dynq_test_corpus_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

CorpusConfig small_config(double delta, std::size_t per_category) {
  CorpusConfig c;
  c.delta = delta;
  for (const char* d : kDialects) {
    c.train_counts[std::string(d) + "_asr"] = per_category;
    c.test_counts[std::string(d) + "_asr"] = 4;
  }
  return c;
}

}  // namespace

TEST_CASE("phoneme inventory") {
  const auto inv = PhonemeInventory::generate(3, 12, 16, 3.0);
  CHECK(inv.size() == 12);
  CHECK(inv.dim() == 16);
  CHECK(inv.min_pairwise_distance() >= 3.0);
  CHECK_THROWS_AS(PhonemeInventory(Tensor::from_rows({{1.0, 2.0}, {1.0, 2.0}})), ParameterError);
  CHECK(bit_equal(PhonemeInventory::generate(3, 12, 16, 3.0).prototypes(), inv.prototypes()));
}

TEST_CASE("build_dialect_chain") {
  const auto inv = PhonemeInventory::generate(1, 12, 16, 3.0);
  CHECK_THROWS_AS(build_dialect_chain(inv, 1, 0.0), ParameterError);
  CHECK_THROWS_AS(build_dialect_chain(inv, 1, -1.0), ParameterError);

  SUBCASE("vanishing divergence makes the three dialects coincide") {
    const auto chain = build_dialect_chain(inv, 9, 1e-12);
    for (const auto& spec : chain) {
      CHECK(max_abs_diff(spec.shifted(inv), inv.prototypes()) < 1e-10);
    }
  }
  SUBCASE("zero divergence spec reproduces the base prototypes exactly") {
    CHECK(bit_equal(identity_dialect("A", 16).shifted(inv), inv.prototypes()));
  }
  SUBCASE("same seed, same specs") {
    const auto a = build_dialect_chain(inv, 4, 1.0);
    const auto b = build_dialect_chain(inv, 4, 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(bit_equal(a[i].transform, b[i].transform));
      CHECK(bit_equal(a[i].offset, b[i].offset));
    }
  }
  SUBCASE("B is the A/C midpoint within delta/10") {
    for (double delta : {0.01, 0.5, 1.0, 4.0}) {
      const auto chain = build_dialect_chain(inv, 17, delta);
      double sq = 0.0;
      for (std::size_t i = 0; i < 16 * 16; ++i) {
        const double mid = 0.5 * (chain[0].transform[i] + chain[2].transform[i]);
        sq += (chain[1].transform[i] - mid) * (chain[1].transform[i] - mid);
      }
      for (std::size_t i = 0; i < 16; ++i) {
        const double mid = 0.5 * (chain[0].offset[i] + chain[2].offset[i]);
        sq += (chain[1].offset[i] - mid) * (chain[1].offset[i] - mid);
      }
      CHECK(std::sqrt(sq) <= delta / 10.0 + 1e-15);
    }
  }
  SUBCASE("A-C is the farthest pair of population centroids for any delta") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      for (double delta : {1e-6, 1e-3, 0.1, 1.0, 10.0}) {
        const auto chain = build_dialect_chain(inv, seed, delta);
        const Tensor ca = chain[0].expected_centroid(inv);
        const Tensor cb = chain[1].expected_centroid(inv);
        const Tensor cc = chain[2].expected_centroid(inv);
        CHECK(distance(ca, cb) < distance(ca, cc));
        CHECK(distance(cb, cc) < distance(ca, cc));
      }
    }
  }
}

TEST_CASE("synthesize_utterance") {
  const auto inv = PhonemeInventory::generate(2, 12, 16, 3.0);
  const auto chain = build_dialect_chain(inv, 2, 1.0);
  const std::vector<int> transcript = {3, 1, 4, 1, 5};

  SUBCASE("noiseless unit durations give the shifted prototypes") {
    DialectSpec spec = chain[0];
    spec.noise = 0.0;
    spec.min_duration = spec.max_duration = 1;
    const Utterance u = synthesize_utterance(spec, inv, transcript, 11);
    const Tensor protos = spec.shifted(inv);
    REQUIRE(u.features.rows() == transcript.size());
    for (std::size_t i = 0; i < transcript.size(); ++i)
      for (std::size_t c = 0; c < 16; ++c)
        CHECK(u.features(i, c) ==
              static_cast<double>(static_cast<float>(protos(static_cast<std::size_t>(transcript[i]), c))));
  }
  SUBCASE("frame count bounds and determinism") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const Utterance u = synthesize_utterance(chain[1], inv, transcript, seed);
      CHECK(u.features.rows() >= 2 * transcript.size());
      CHECK(u.features.rows() <= 4 * transcript.size());
    }
    CHECK(bit_equal(synthesize_utterance(chain[2], inv, transcript, 5).features,
                    synthesize_utterance(chain[2], inv, transcript, 5).features));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(synthesize_utterance(chain[0], inv, {}, 1), ParameterError);
    CHECK_THROWS_AS(synthesize_utterance(chain[0], inv, {12}, 1), BoundsError);
  }
  SUBCASE("translation") {
    const Utterance u = synthesize_utterance(chain[0], inv, {0, 1, 2}, 3, Task::kSt);
    // 0 -> 3, 1 -> 8, 2 -> 1, then pairs swapped
    CHECK(u.translation == std::vector<int>{8, 3, 1});
    CHECK(translate({4}, 12) == std::vector<int>{11});
  }
}

TEST_CASE("generate_corpus writes counts, manifests and features") {
  SUBCASE("category counts match the config exactly") {
    CorpusConfig c;
    c.train_counts = {{"A_asr", 100}, {"B_asr", 10}};
    c.test_counts = {{"A_asr", 3}};
    const fs::path dir = scratch_dir("counts");
    const auto written = generate_corpus(c, dir);
    CHECK(written.train.category_counts() == std::map<std::string, std::size_t>{{"A_asr", 100}, {"B_asr", 10}});
    const Manifest reloaded = Manifest::load(dir / "train.jsonl");
    CHECK(reloaded.category_counts() == written.train.category_counts());
    for (const auto& r : reloaded.records()) CHECK(r.frames >= r.transcript_length);
  }
  SUBCASE("dialect ratio is honored") {
    CorpusConfig c;
    set_dialect_ratio(c, 100, 1.79, 1.0);
    CHECK(c.train_counts.at("A_asr") == 100);
    CHECK(c.train_counts.at("B_asr") == 179);
    CHECK(c.train_counts.at("C_st") == 100);
    const CorpusConfig d = default_corpus_config();
    CHECK(d.train_counts.at("A_asr") == 300);
    CHECK(d.train_counts.at("B_asr") == 300);
    CHECK(d.train_counts.at("C_asr") == 537);
    CHECK(d.train_counts.size() == 6);
  }
  SUBCASE("regeneration is byte-identical and features round-trip") {
    const CorpusConfig c = small_config(1.0, 6);
    const fs::path d1 = scratch_dir("regen1");
    const fs::path d2 = scratch_dir("regen2");
    const Corpus corpus = synthesize_corpus(c);
    write_corpus(corpus, d1);
    generate_corpus(c, d2);
    for (const char* f : {"train.jsonl", "test.jsonl", "train.f32", "train.f32.json"}) {
      CHECK(slurp(d1 / f) == slurp(d2 / f));
    }
    const Manifest m = Manifest::load(d1 / "train.jsonl");
    const auto utts = m.load_utterances();
    REQUIRE(utts.size() == corpus.train.size());
    for (std::size_t i = 0; i < utts.size(); ++i) {
      CHECK(utts[i].id == corpus.train[i].id);
      CHECK(bit_equal(utts[i].features, corpus.train[i].features));
      CHECK(bit_equal(m.read_features(m.records()[i]), corpus.train[i].features));
    }
    // train and test ids are disjoint
    const Manifest t = Manifest::load(d1 / "test.jsonl");
    for (const auto& a : t.records())
      for (const auto& b : m.records()) CHECK(a.id != b.id);
  }
  SUBCASE("truncated payload is rejected on load") {
    const fs::path dir = scratch_dir("trunc");
    generate_corpus(small_config(1.0, 3), dir);
    fs::resize_file(dir / "train.f32", fs::file_size(dir / "train.f32") - 4);
    CHECK_THROWS_AS(Manifest::load(dir / "train.jsonl"), DataError);
  }
  SUBCASE("unwritable output path") {
    const fs::path blocker = scratch_dir("blocked") / "file";
    std::ofstream(blocker) << "x";
    CHECK_THROWS_AS(generate_corpus(small_config(1.0, 2), blocker / "sub"), IoError);
  }
  SUBCASE("bad configs") {
    CorpusConfig c;
    CHECK_THROWS_AS(synthesize_corpus(c), ParameterError);
    c.train_counts = {{"D_asr", 1}};
    CHECK_THROWS_AS(synthesize_corpus(c), DataError);
    c.train_counts = {{"A_mt", 1}};
    CHECK_THROWS_AS(synthesize_corpus(c), ParameterError);
  }
}

TEST_CASE("feature payload round-trip is bitwise") {
  const fs::path dir = scratch_dir("payload");
  Tensor a = Tensor::from_rows({{0.5, -1.25}, {3.0, 1e-7}});
  Tensor b = Tensor::from_rows({{-0.0, 65504.0}});
  for (auto* t : {&a, &b})
    for (auto& v : t->values()) v = static_cast<double>(static_cast<float>(v));
  write_features(dir / "x.f32", {a, b});
  CHECK(fs::file_size(dir / "x.f32") == 6 * 4);
  CHECK(bit_equal(read_features(dir / "x.f32", 0, 2, 2), a));
  CHECK(bit_equal(read_features(dir / "x.f32", 16, 1, 2), b));
  CHECK_THROWS_AS(read_features(dir / "x.f32", 16, 2, 2), IoError);
}

TEST_CASE("centroid_distances") {
  SUBCASE("identical dialects give the zero matrix") {
    const Corpus corpus = synthesize_corpus(small_config(0.0, 5));
    const Tensor d = centroid_distances(corpus.train);
    for (double v : d.values()) CHECK(v == 0.0);
  }
  SUBCASE("chain geometry on generated corpora") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      for (double delta : {0.1, 0.5, 1.0, 2.0}) {
        CorpusConfig c = small_config(delta, 20);
        c.seed = seed;
        const Tensor d = centroid_distances(synthesize_corpus(c).train);
        CHECK(d(0, 0) == 0.0);
        CHECK(d(0, 1) == d(1, 0));
        CHECK(d(0, 1) < d(0, 2));
        CHECK(d(1, 2) < d(0, 2));
        if (delta == 1.0) CHECK(d(0, 1) + d(1, 2) <= 1.2 * d(0, 2));
      }
    }
  }
  SUBCASE("from a written manifest") {
    const fs::path dir = scratch_dir("centroids");
    const auto written = generate_corpus(small_config(1.0, 4), dir);
    CHECK(bit_equal(centroid_distances(written.train),
                    centroid_distances(Manifest::load(dir / "train.jsonl"))));
  }
  SUBCASE("a single-dialect manifest is a data error") {
    CorpusConfig c;
    c.train_counts = {{"A_asr", 5}};
    CHECK_THROWS_AS(centroid_distances(synthesize_corpus(c).train), DataError);
  }
}
