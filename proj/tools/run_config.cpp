#include "run_config.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <sstream>

#include "dynq/tensorcore/errors.hpp"
#include "dynq/training/config_io.hpp"

namespace dynq::cli {

using nlohmann::json;

namespace {

std::string sha256_hex(const std::string& bytes) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(out[i]);
  return hex.str();
}

}  // namespace

json RunConfig::to_json() const {
  return {{"corpus", train::to_json(corpus)},
          {"adapter", train::to_json(adapter)},
          {"decoder", train::to_json(decoder)},
          {"pretrain", train::to_json(pretrain)},
          {"training", train::to_json(training)},
          {"sampler", {{"tau", sampler.tau}, {"draws", sampler.draws}, {"seed", sampler.seed}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ParameterError("config must be a JSON object");
  RunConfig c;
  for (const auto& item : j.items()) {
    const std::string& key = item.key();
    const json& v = item.value();
    if (key == "corpus") {
      train::apply_json(v, c.corpus);
    } else if (key == "adapter") {
      train::apply_json(v, c.adapter);
    } else if (key == "decoder") {
      train::apply_json(v, c.decoder);
    } else if (key == "pretrain") {
      train::apply_json(v, c.pretrain);
    } else if (key == "training") {
      train::apply_json(v, c.training);
    } else if (key == "sampler") {
      if (!v.is_object()) throw ParameterError("config section 'sampler' must be an object");
      for (const auto& s : v.items()) {
        try {
          if (s.key() == "tau" && s.value().is_number()) {
            c.sampler.tau = s.value().get<double>();
          } else if (s.key() == "draws" && s.value().is_number_unsigned()) {
            c.sampler.draws = s.value().get<std::size_t>();
          } else if (s.key() == "seed" && s.value().is_number_unsigned()) {
            c.sampler.seed = s.value().get<std::uint64_t>();
          } else if (s.key() == "tau" || s.key() == "draws" || s.key() == "seed") {
            throw ParameterError("config key 'sampler." + s.key() + "' has the wrong type");
          } else {
            throw ParameterError("unknown config key 'sampler." + s.key() + "'");
          }
        } catch (const json::exception& e) {
          throw ParameterError("config key 'sampler." + s.key() + "': " + e.what());
        }
      }
    } else {
      throw ParameterError("unknown config section '" + key + "'");
    }
  }
  c.training.tau = c.sampler.tau;
  c.validate();
  return c;
}

void RunConfig::validate() const {
  adapter.validate();
  decoder.validate();
  training.validate();
  if (!(sampler.tau > 0.0)) throw ParameterError("sampler.tau must be positive");
  if (adapter.d_audio != corpus.d_audio) throw ParameterError("adapter.d_audio must equal corpus.d_audio");
  if (adapter.d_model != decoder.d_model) throw ParameterError("adapter.d_model must equal decoder.d_model");
  if (adapter.vocab != corpus.phonemes || decoder.vocab.source != corpus.phonemes ||
      decoder.vocab.target != corpus.phonemes) {
    throw ParameterError("adapter.vocab, decoder.source_vocab and decoder.target_vocab must equal corpus.phonemes");
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ParameterError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ParameterError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) throw ParameterError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides) {
  json j = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw IoError("cannot read config " + path->string());
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParameterError("config " + path->string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

std::string digest(const json& j) { return sha256_hex(j.dump()); }

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace dynq::cli
