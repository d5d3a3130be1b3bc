#include "dynq/synthcorpus/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <set>

#include "dynq/tensorcore/errors.hpp"
#include "dynq/tensorcore/rng.hpp"

namespace dynq::corpus {

using nlohmann::json;
namespace fs = std::filesystem;

std::string task_name(Task task) { return task == Task::kAsr ? "asr" : "st"; }

Task parse_task(const std::string& name) {
  if (name == "asr") return Task::kAsr;
  if (name == "st") return Task::kSt;
  throw ParameterError("unknown task '" + name + "' (expected asr or st)");
}

std::size_t dialect_index(const std::string& dialect) {
  for (std::size_t i = 0; i < kDialects.size(); ++i) {
    if (dialect == kDialects[i]) return i;
  }
  throw DataError("unknown dialect '" + dialect + "'");
}

namespace {

double row_distance(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

// x M + b, row-wise.
Tensor affine_rows(const Tensor& x, const Tensor& m, const Tensor& b) {
  Tensor out = matmul(x, m);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
  return out;
}

std::pair<std::string, Task> split_category(const std::string& category) {
  const auto pos = category.rfind('_');
  if (pos == std::string::npos) throw ParameterError("malformed category '" + category + "'");
  const std::string dialect = category.substr(0, pos);
  dialect_index(dialect);
  return {dialect, parse_task(category.substr(pos + 1))};
}

void put_u32le(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff),
                         static_cast<char>((bits >> 24) & 0xff)};
  out.write(bytes, 4);
}

float get_f32le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

json record_to_json(const ManifestRecord& r) {
  json j = {{"id", r.id},
            {"dialect", r.dialect},
            {"task", task_name(r.task)},
            {"frames", r.frames},
            {"transcript_length", r.transcript_length},
            {"feature_path", r.feature_path},
            {"byte_offset", r.byte_offset},
            {"transcript", r.transcript}};
  if (r.task == Task::kSt) j["translation"] = r.translation;
  return j;
}

ManifestRecord record_from_json(const json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.dialect = j.at("dialect").get<std::string>();
  r.task = parse_task(j.at("task").get<std::string>());
  r.frames = j.at("frames").get<std::size_t>();
  r.transcript_length = j.at("transcript_length").get<std::size_t>();
  r.feature_path = j.at("feature_path").get<std::string>();
  r.byte_offset = j.at("byte_offset").get<std::uint64_t>();
  r.transcript = j.at("transcript").get<std::vector<int>>();
  if (j.contains("translation")) r.translation = j.at("translation").get<std::vector<int>>();
  return r;
}

std::vector<int> draw_transcript(Rng& rng, const CorpusConfig& config) {
  const std::size_t length = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(config.min_length),
                  static_cast<std::int64_t>(config.max_length)));
  std::vector<int> out;
  out.reserve(length);
  while (out.size() < length) {
    const int token = static_cast<int>(rng.index(config.phonemes));
    if (!out.empty() && out.back() == token) continue;
    out.push_back(token);
  }
  return out;
}

}  // namespace

PhonemeInventory::PhonemeInventory(Tensor prototypes) : prototypes_(std::move(prototypes)) {
  if (prototypes_.rank() != 2 || prototypes_.rows() == 0 || prototypes_.cols() == 0) {
    throw DimensionError("phoneme prototypes must be a non-empty matrix, got " +
                         prototypes_.shape_string());
  }
  if (prototypes_.rows() > 1 && !(min_pairwise_distance() > 0.0)) {
    throw ParameterError("phoneme prototypes must be pairwise distinct");
  }
}

PhonemeInventory PhonemeInventory::generate(std::uint64_t seed, std::size_t count,
                                            std::size_t dim, double min_separation) {
  if (count == 0 || dim == 0) throw ParameterError("inventory needs count > 0 and dim > 0");
  Rng rng(derive_seed(seed, 0x1a7e));
  Tensor protos = Tensor::matrix(count, dim);
  for (std::size_t p = 0; p < count; ++p) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) {
        throw ParameterError("cannot place " + std::to_string(count) + " prototypes " +
                             std::to_string(min_separation) + " apart in " +
                             std::to_string(dim) + " dims");
      }
      for (std::size_t c = 0; c < dim; ++c) protos(p, c) = rng.normal();
      bool ok = true;
      for (std::size_t q = 0; q < p && ok; ++q) {
        ok = row_distance(protos.row(p), protos.row(q), dim) >= min_separation;
      }
      if (ok) break;
    }
  }
  return PhonemeInventory(std::move(protos));
}

double PhonemeInventory::min_pairwise_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < size(); ++a)
    for (std::size_t b = a + 1; b < size(); ++b)
      best = std::min(best, row_distance(prototypes_.row(a), prototypes_.row(b), dim()));
  return best;
}

Tensor PhonemeInventory::mean() const {
  Tensor m = Tensor::matrix(1, dim());
  for (std::size_t p = 0; p < size(); ++p)
    for (std::size_t c = 0; c < dim(); ++c) m[c] += prototypes_(p, c);
  for (auto& v : m.values()) v /= static_cast<double>(size());
  return m;
}

Tensor DialectSpec::shifted(const PhonemeInventory& inventory) const {
  return affine_rows(inventory.prototypes(), transform, offset);
}

Tensor DialectSpec::expected_centroid(const PhonemeInventory& inventory) const {
  return affine_rows(inventory.mean(), transform, offset);
}

DialectSpec identity_dialect(const std::string& id, std::size_t dim, const ChainOptions& options) {
  DialectSpec spec;
  spec.id = id;
  spec.transform = Tensor::identity(dim);
  spec.offset = Tensor::matrix(1, dim);
  spec.min_duration = options.min_duration;
  spec.max_duration = options.max_duration;
  spec.noise = options.noise;
  return spec;
}

std::array<DialectSpec, 3> build_dialect_chain(const PhonemeInventory& inventory,
                                               std::uint64_t seed, double delta,
                                               const ChainOptions& options) {
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw ParameterError("dialect divergence delta must be positive, got " + std::to_string(delta));
  }
  if (options.min_duration < 1 || options.max_duration < options.min_duration) {
    throw ParameterError("duration range must satisfy 1 <= min <= max");
  }
  const std::size_t d = inventory.dim();
  const Tensor mu = inventory.mean();
  Rng rng(derive_seed(seed, 0xc4a1));

  Tensor r = Tensor::matrix(d, d);
  Tensor u = Tensor::matrix(1, d);
  for (;;) {
    for (auto& v : r.values()) v = rng.normal();
    const double rn = frobenius(r);
    for (auto& v : r.values()) v /= rn;
    for (auto& v : u.values()) v = rng.normal();
    const double un = frobenius(u);
    for (auto& v : u.values()) v *= options.bias_scale / un;
    Tensor axis = matmul(mu, r);
    for (std::size_t c = 0; c < d; ++c) axis[c] += u[c];
    if (frobenius(axis) >= 0.5 * options.bias_scale) break;
  }

  Tensor jr = Tensor::matrix(d, d);
  Tensor ju = Tensor::matrix(1, d);
  for (auto& v : jr.values()) v = rng.normal();
  for (auto& v : ju.values()) v = rng.normal();
  const double jn = std::sqrt(frobenius(jr) * frobenius(jr) + frobenius(ju) * frobenius(ju));
  const double jscale = 0.1 * rng.uniform() / jn;

  auto make = [&](const char* id, const Tensor& dm, const Tensor& db, double sign, double scale) {
    DialectSpec spec = identity_dialect(id, d, options);
    for (std::size_t i = 0; i < d * d; ++i) spec.transform[i] += sign * delta * scale * dm[i];
    for (std::size_t i = 0; i < d; ++i) spec.offset[i] = sign * delta * scale * db[i];
    return spec;
  };
  return {make("A", r, u, 1.0, 1.0), make("B", jr, ju, 1.0, jscale), make("C", r, u, -1.0, 1.0)};
}

Utterance synthesize_utterance(const DialectSpec& spec, const PhonemeInventory& inventory,
                               const std::vector<int>& transcript, std::uint64_t seed, Task task,
                               const std::string& id) {
  if (transcript.empty()) throw ParameterError("synthesize_utterance: empty transcript");
  for (int t : transcript) {
    if (t < 0 || static_cast<std::size_t>(t) >= inventory.size()) {
      throw BoundsError("synthesize_utterance: token " + std::to_string(t) +
                        " outside inventory of " + std::to_string(inventory.size()));
    }
  }
  const Tensor protos = spec.shifted(inventory);
  const std::size_t d = inventory.dim();
  Rng rng(seed);
  std::vector<std::size_t> durations(transcript.size());
  std::size_t frames = 0;
  for (auto& k : durations) {
    k = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(spec.min_duration),
                                             static_cast<std::int64_t>(spec.max_duration)));
    frames += k;
  }
  Utterance utt;
  utt.id = id;
  utt.dialect = spec.id;
  utt.task = task;
  utt.transcript = transcript;
  utt.features = Tensor::matrix(frames, d);
  std::size_t f = 0;
  for (std::size_t i = 0; i < transcript.size(); ++i) {
    const double* proto = protos.row(static_cast<std::size_t>(transcript[i]));
    for (std::size_t k = 0; k < durations[i]; ++k, ++f) {
      for (std::size_t c = 0; c < d; ++c) {
        const double x = proto[c] + (spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0);
        utt.features(f, c) = static_cast<double>(static_cast<float>(x));
      }
    }
  }
  if (task == Task::kSt) utt.translation = translate(transcript, inventory.size());
  return utt;
}

std::vector<int> translate(const std::vector<int>& transcript, std::size_t vocab) {
  std::vector<int> out(transcript.size());
  const int v = static_cast<int>(vocab);
  for (std::size_t i = 0; i < transcript.size(); ++i) out[i] = (5 * transcript[i] + 3) % v;
  for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  return out;
}

CorpusConfig default_corpus_config() {
  CorpusConfig config;
  set_dialect_ratio(config, 300, 1.0, 1.79);
  for (const char* d : kDialects) {
    config.test_counts[std::string(d) + "_asr"] = 60;
    config.test_counts[std::string(d) + "_st"] = 60;
  }
  return config;
}

void set_dialect_ratio(CorpusConfig& config, std::size_t base, double ratio_b, double ratio_c) {
  const double ratios[3] = {1.0, ratio_b, ratio_c};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(base) * ratios[i]));
    config.train_counts[std::string(kDialects[i]) + "_asr"] = n;
    config.train_counts[std::string(kDialects[i]) + "_st"] = n;
  }
}

Corpus synthesize_corpus(const CorpusConfig& config) {
  if (config.min_length < 1 || config.max_length < config.min_length) {
    throw ParameterError("transcript length range must satisfy 1 <= min <= max");
  }
  if (config.phonemes < 2) throw ParameterError("need at least two phonemes");
  std::size_t total = 0;
  for (const auto& [cat, n] : config.train_counts) {
    split_category(cat);
    total += n;
  }
  for (const auto& [cat, n] : config.test_counts) split_category(cat);
  if (total == 0) throw ParameterError("corpus config has no training samples");

  ChainOptions options;
  options.bias_scale = config.bias_scale;
  options.noise = config.noise;
  options.min_duration = config.min_duration;
  options.max_duration = config.max_duration;

  Corpus corpus{PhonemeInventory::generate(config.seed, config.phonemes, config.d_audio,
                                           config.min_separation),
                {}, {}, {}};
  if (config.delta > 0.0) {
    corpus.dialects = build_dialect_chain(corpus.inventory, config.seed, config.delta, options);
  } else if (config.delta == 0.0) {
    for (std::size_t i = 0; i < 3; ++i)
      corpus.dialects[i] = identity_dialect(kDialects[i], config.d_audio, options);
  } else {
    throw ParameterError("delta must be >= 0");
  }

  auto fill = [&](const std::map<std::string, std::size_t>& counts, std::uint64_t split,
                  const std::string& prefix, std::vector<Utterance>& out) {
    for (const auto& [cat, n] : counts) {
      const auto [dialect, task] = split_category(cat);
      const DialectSpec& spec = corpus.dialects[dialect_index(dialect)];
      // Keyed by task and index only, so dialects share transcripts and noise.
      const std::uint64_t task_code = task == Task::kSt ? 1 : 0;
      for (std::size_t k = 0; k < n; ++k) {
        Rng rng(derive_seed(config.seed, split, task_code, k));
        const std::vector<int> transcript = draw_transcript(rng, config);
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "%s-%s-%05zu", prefix.c_str(), cat.c_str(), k);
        out.push_back(
            synthesize_utterance(spec, corpus.inventory, transcript, rng.next_u64(), task, idbuf));
      }
    }
  };
  fill(config.train_counts, 1, "train", corpus.train);
  fill(config.test_counts, 2, "test", corpus.test);
  return corpus;
}

Manifest::Manifest(std::vector<ManifestRecord> records, fs::path base_dir, std::size_t dim)
    : records_(std::move(records)), base_dir_(std::move(base_dir)), dim_(dim) {
  std::set<std::string> ids;
  for (const auto& r : records_) {
    if (!ids.insert(r.id).second) throw DataError("duplicate utterance id '" + r.id + "'");
  }
}

Manifest Manifest::load(const fs::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw IoError("cannot open manifest " + jsonl.string());
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  const fs::path base = jsonl.parent_path();
  std::size_t dim = 0;
  std::map<std::string, std::uint64_t> payload_bytes;
  for (const auto& r : records) {
    if (payload_bytes.count(r.feature_path)) continue;
    const fs::path payload = base / r.feature_path;
    std::ifstream sc(base / (r.feature_path + ".json"));
    if (!sc) throw IoError("missing feature sidecar for " + payload.string());
    json side;
    try {
      side = json::parse(sc);
    } catch (const json::exception& e) {
      throw DataError("bad feature sidecar for " + payload.string() + ": " + e.what());
    }
    if (side.value("dtype", "") != "float32") throw DataError("feature dtype must be float32");
    const auto shape = side.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw DataError("feature sidecar shape must be 2-D");
    if (dim != 0 && dim != shape[1]) throw DataError("feature width differs between payloads");
    dim = shape[1];
    std::error_code ec;
    const auto bytes = fs::file_size(payload, ec);
    if (ec) throw IoError("missing feature payload " + payload.string());
    if (bytes != shape[0] * shape[1] * 4) {
      throw DataError("feature payload " + payload.string() + " does not match its sidecar shape");
    }
    payload_bytes[r.feature_path] = bytes;
  }
  for (const auto& r : records) {
    if (r.byte_offset + r.frames * dim * 4 > payload_bytes[r.feature_path]) {
      throw DataError("record " + r.id + " references bytes past the end of " + r.feature_path);
    }
    if (r.transcript.size() != r.transcript_length) {
      throw DataError("record " + r.id + " transcript_length disagrees with transcript");
    }
  }
  return Manifest(std::move(records), base, dim);
}

std::map<std::string, std::size_t> Manifest::category_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records_) ++counts[r.category()];
  return counts;
}

Manifest Manifest::filter_dialects(const std::vector<std::string>& dialects) const {
  std::vector<ManifestRecord> kept;
  for (const auto& r : records_) {
    if (std::find(dialects.begin(), dialects.end(), r.dialect) != dialects.end()) kept.push_back(r);
  }
  return Manifest(std::move(kept), base_dir_, dim_);
}

Manifest Manifest::filter_task(Task task) const {
  std::vector<ManifestRecord> kept;
  for (const auto& r : records_) {
    if (r.task == task) kept.push_back(r);
  }
  return Manifest(std::move(kept), base_dir_, dim_);
}

Tensor Manifest::read_features(const ManifestRecord& record) const {
  return corpus::read_features(base_dir_ / record.feature_path, record.byte_offset, record.frames,
                               dim_);
}

std::vector<Utterance> Manifest::load_utterances() const {
  std::map<std::string, std::vector<unsigned char>> payloads;
  std::vector<Utterance> out;
  out.reserve(records_.size());
  for (const auto& r : records_) {
    auto it = payloads.find(r.feature_path);
    if (it == payloads.end()) {
      const fs::path path = base_dir_ / r.feature_path;
      std::ifstream in(path, std::ios::binary);
      if (!in) throw IoError("cannot open feature payload " + path.string());
      std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
      it = payloads.emplace(r.feature_path, std::move(bytes)).first;
    }
    Utterance u;
    u.id = r.id;
    u.dialect = r.dialect;
    u.task = r.task;
    u.transcript = r.transcript;
    u.translation = r.translation;
    u.features = Tensor::matrix(r.frames, dim_);
    const unsigned char* p = it->second.data() + r.byte_offset;
    for (std::size_t i = 0; i < r.frames * dim_; ++i) u.features[i] = get_f32le(p + 4 * i);
    out.push_back(std::move(u));
  }
  return out;
}

void write_features(const fs::path& path, const std::vector<Tensor>& blocks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write feature payload " + path.string());
  std::size_t rows = 0;
  std::size_t cols = blocks.empty() ? 0 : blocks.front().cols();
  for (const auto& b : blocks) {
    if (b.cols() != cols) throw DimensionError("feature blocks differ in width");
    for (double v : b.values()) put_u32le(out, static_cast<float>(v));
    rows += b.rows();
  }
  if (!out) throw IoError("failed writing " + path.string());
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  if (!side) throw IoError("cannot write sidecar for " + path.string());
  side << json{{"dtype", "float32"}, {"shape", {rows, cols}}}.dump() << '\n';
}

Tensor read_features(const fs::path& path, std::uint64_t byte_offset, std::size_t rows,
                     std::size_t cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature payload " + path.string());
  std::vector<unsigned char> bytes(rows * cols * 4);
  in.seekg(static_cast<std::streamoff>(byte_offset));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw IoError("short read from " + path.string());
  }
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) t[i] = get_f32le(bytes.data() + 4 * i);
  return t;
}

WrittenCorpus write_corpus(const Corpus& corpus, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());

  auto write_split = [&](const std::vector<Utterance>& utts, const std::string& split) {
    const std::string payload = split + ".f32";
    std::vector<Tensor> blocks;
    std::vector<ManifestRecord> records;
    std::uint64_t offset = 0;
    const std::size_t dim = corpus.inventory.dim();
    for (const auto& u : utts) {
      ManifestRecord r;
      r.id = u.id;
      r.dialect = u.dialect;
      r.task = u.task;
      r.frames = u.features.rows();
      r.transcript_length = u.transcript.size();
      r.feature_path = payload;
      r.byte_offset = offset;
      r.transcript = u.transcript;
      r.translation = u.translation;
      offset += r.frames * dim * 4;
      blocks.push_back(u.features);
      records.push_back(std::move(r));
    }
    write_features(out_dir / payload, blocks);
    const fs::path jsonl = out_dir / (split + ".jsonl");
    std::ofstream out(jsonl, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + jsonl.string());
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
    if (!out) throw IoError("failed writing " + jsonl.string());
    return Manifest(std::move(records), out_dir, dim);
  };
  return {write_split(corpus.train, "train"), write_split(corpus.test, "test")};
}

WrittenCorpus generate_corpus(const CorpusConfig& config, const fs::path& out_dir) {
  return write_corpus(synthesize_corpus(config), out_dir);
}

Tensor centroid_distances(const std::vector<Utterance>& utterances) {
  std::array<std::vector<double>, 3> sums;
  std::array<std::size_t, 3> frames{};
  std::array<std::size_t, 3> counts{};
  std::size_t dim = 0;
  for (const auto& u : utterances) {
    const std::size_t k = dialect_index(u.dialect);
    dim = u.features.cols();
    if (sums[k].empty()) sums[k].assign(dim, 0.0);
    for (std::size_t r = 0; r < u.features.rows(); ++r)
      for (std::size_t c = 0; c < dim; ++c) sums[k][c] += u.features(r, c);
    frames[k] += u.features.rows();
    ++counts[k];
  }
  for (std::size_t k = 0; k < 3; ++k) {
    if (counts[k] < 2) {
      throw DataError("centroid_distances: dialect " + std::string(kDialects[k]) + " has " +
                      std::to_string(counts[k]) + " utterances (need >= 2)");
    }
    for (auto& v : sums[k]) v /= static_cast<double>(frames[k]);
  }
  Tensor dist = Tensor::matrix(3, 3);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b)
      dist(a, b) = dist(b, a) = row_distance(sums[a].data(), sums[b].data(), dim);
  return dist;
}

Tensor centroid_distances(const Manifest& manifest) {
  return centroid_distances(manifest.load_utterances());
}

}  // namespace dynq::corpus
