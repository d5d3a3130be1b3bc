#include "dynq/tensorcore/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "dynq/tensorcore/errors.hpp"

namespace dynq {

namespace {

constexpr const char* kMetadataKey = "__metadata__";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

}  // namespace

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& metadata) {
  nlohmann::json index = nlohmann::json::object();
  index[kMetadataKey] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, p] : params) {
    if (name == kMetadataKey) throw ParameterError("reserved parameter name '" + name + "'");
    index[name] = {{"offset", offset}, {"shape", p.value.shape()}, {"frozen", p.frozen}};
    offset += p.value.size() * sizeof(double);
  }
  const std::string header = index.dump();
  std::string out;
  out.reserve(8 + header.size() + offset);
  put_u64(out, header.size());
  out += header;
  for (const auto& [name, p] : params) {
    for (double v : p.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw IoError("checkpoint truncated: missing header length");
  const std::uint64_t header_len = get_u64(bytes, 0);
  if (8 + header_len > bytes.size()) throw IoError("checkpoint truncated: header overruns file");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 8 + header_len;
  Checkpoint ck;
  for (auto it = index.begin(); it != index.end(); ++it) {
    if (it.key() == kMetadataKey) {
      ck.metadata = it.value();
      continue;
    }
    const auto shape = it.value().at("shape").get<std::vector<std::size_t>>();
    const std::uint64_t offset = it.value().at("offset").get<std::uint64_t>();
    std::size_t count = 1;
    for (auto e : shape) count *= e;
    if (payload + offset + count * 8 > bytes.size()) {
      throw IoError("checkpoint payload for '" + it.key() + "' overruns file");
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<double>(get_u64(bytes, payload + offset + 8 * i));
    }
    ck.params.add(it.key(), Tensor(shape, std::move(data)), it.value().value("frozen", false));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& metadata) {
  const std::string bytes = encode_checkpoint(params, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace dynq
