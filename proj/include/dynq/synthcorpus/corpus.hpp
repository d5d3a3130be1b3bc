#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dynq/tensorcore/tensor.hpp"

namespace dynq::corpus {

enum class Task { kAsr, kSt };

std::string task_name(Task task);
Task parse_task(const std::string& name);

inline constexpr std::array<const char*, 3> kDialects = {"A", "B", "C"};
std::size_t dialect_index(const std::string& dialect);

class PhonemeInventory {
 public:
  /// Rows are prototypes. Throws ParameterError when two rows coincide.
  explicit PhonemeInventory(Tensor prototypes);

  /// Standard-normal prototypes, redrawn until every pair is at least
  /// min_separation apart.
  static PhonemeInventory generate(std::uint64_t seed, std::size_t count, std::size_t dim,
                                   double min_separation);

  std::size_t size() const { return prototypes_.rows(); }
  std::size_t dim() const { return prototypes_.cols(); }
  const Tensor& prototypes() const { return prototypes_; }
  double min_pairwise_distance() const;
  Tensor mean() const;  // [1 x dim]

 private:
  Tensor prototypes_;
};

/// Affine dialect shift x -> x M + b on row-vector prototypes, plus the
/// frame-level emission parameters.
struct DialectSpec {
  std::string id;
  Tensor transform;  // [d x d]
  Tensor offset;     // [1 x d]
  std::size_t min_duration = 2;
  std::size_t max_duration = 4;
  double noise = 0.1;

  Tensor shifted(const PhonemeInventory& inventory) const;  // [P x d]
  /// Population centroid under uniformly drawn phonemes.
  Tensor expected_centroid(const PhonemeInventory& inventory) const;
};

struct ChainOptions {
  double bias_scale = 1.0;
  double noise = 0.1;
  std::size_t min_duration = 2;
  std::size_t max_duration = 4;
};

/// A and C are mirror shifts (I + dR, du) and (I - dR, -du); B is the
/// identity midpoint plus jitter of norm at most d/10.
std::array<DialectSpec, 3> build_dialect_chain(const PhonemeInventory& inventory,
                                               std::uint64_t seed, double delta,
                                               const ChainOptions& options = {});

/// Unshifted spec (transform I, offset 0).
DialectSpec identity_dialect(const std::string& id, std::size_t dim, const ChainOptions& options = {});

struct Utterance {
  std::string id;
  std::string dialect;
  Task task = Task::kAsr;
  Tensor features;  // [T x d_audio]
  std::vector<int> transcript;
  std::vector<int> translation;  // st only

  std::string category() const { return dialect + "_" + task_name(task); }
};

/// Each token emits k ~ U{min_duration..max_duration} frames of its shifted
/// prototype plus N(0, noise^2) per dimension, rounded to float32.
Utterance synthesize_utterance(const DialectSpec& spec, const PhonemeInventory& inventory,
                               const std::vector<int>& transcript, std::uint64_t seed,
                               Task task = Task::kAsr, const std::string& id = "");

/// Token i -> (5i + 3) mod vocab, then adjacent pairs swapped.
std::vector<int> translate(const std::vector<int>& transcript, std::size_t vocab);

struct CorpusConfig {
  std::uint64_t seed = 7;
  std::size_t phonemes = 12;
  std::size_t d_audio = 16;
  double min_separation = 3.0;
  double delta = 1.0;
  double bias_scale = 1.0;
  double noise = 0.1;
  std::size_t min_duration = 2;
  std::size_t max_duration = 4;
  std::size_t min_length = 3;
  std::size_t max_length = 8;
  std::map<std::string, std::size_t> train_counts;  // "A_asr" -> n
  std::map<std::string, std::size_t> test_counts;
};

/// Three dialects, both tasks, train counts A:B:C = 1:1:1.79, uniform test.
CorpusConfig default_corpus_config();

/// Scales per-dialect train counts for both tasks so that A gets base and B, C
/// follow the given ratios.
void set_dialect_ratio(CorpusConfig& config, std::size_t base, double ratio_b, double ratio_c);

struct Corpus {
  PhonemeInventory inventory;
  std::array<DialectSpec, 3> dialects;
  std::vector<Utterance> train;
  std::vector<Utterance> test;
};

Corpus synthesize_corpus(const CorpusConfig& config);

struct ManifestRecord {
  std::string id;
  std::string dialect;
  Task task = Task::kAsr;
  std::size_t frames = 0;
  std::size_t transcript_length = 0;
  std::string feature_path;  // relative to the manifest directory
  std::uint64_t byte_offset = 0;
  std::vector<int> transcript;
  std::vector<int> translation;

  std::string category() const { return dialect + "_" + task_name(task); }
};

class Manifest {
 public:
  Manifest() = default;
  Manifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir, std::size_t dim);

  /// Reads JSON Lines and the feature sidecars; checks id uniqueness and that
  /// every byte range lies inside its payload file.
  static Manifest load(const std::filesystem::path& jsonl);

  const std::vector<ManifestRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::filesystem::path& base_dir() const { return base_dir_; }
  std::size_t dim() const { return dim_; }

  std::map<std::string, std::size_t> category_counts() const;
  Manifest filter_dialects(const std::vector<std::string>& dialects) const;
  Manifest filter_task(Task task) const;

  Tensor read_features(const ManifestRecord& record) const;
  std::vector<Utterance> load_utterances() const;

 private:
  std::vector<ManifestRecord> records_;
  std::filesystem::path base_dir_;
  std::size_t dim_ = 0;
};

struct WrittenCorpus {
  Manifest train;
  Manifest test;
};

/// Writes {split}.jsonl, {split}.f32 and {split}.f32.json for train and test.
WrittenCorpus write_corpus(const Corpus& corpus, const std::filesystem::path& out_dir);
WrittenCorpus generate_corpus(const CorpusConfig& config, const std::filesystem::path& out_dir);

void write_features(const std::filesystem::path& path, const std::vector<Tensor>& blocks);
Tensor read_features(const std::filesystem::path& path, std::uint64_t byte_offset,
                     std::size_t rows, std::size_t cols);

/// Euclidean distances between per-dialect mean frames, in A, B, C order.
/// Needs at least two utterances for every dialect.
Tensor centroid_distances(const std::vector<Utterance>& utterances);
Tensor centroid_distances(const Manifest& manifest);

}  // namespace dynq::corpus
