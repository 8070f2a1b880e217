#include "modnet/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace modnet {

namespace {

constexpr char kMagic[8] = {'M', 'N', 'E', 'T', 'C', 'K', 'P', '1'};

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& hyperparams, uint64_t seed) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["seed"] = seed;
  header["hyperparams"] = hyperparams;
  nlohmann::json tensors = nlohmann::json::array();

  std::string payload;
  for (int i = 0; i < params.size(); ++i) {
    const Tensor& t = params.at(i);
    nlohmann::json entry;
    entry["name"] = params.name_at(i);
    entry["shape"] = t.shape;
    entry["offset"] = payload.size();
    tensors.push_back(entry);
    for (Scalar x : t.data) {
      const float f = static_cast<float>(x);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(payload, bits);
    }
  }
  header["tensors"] = tensors;

  const std::string hj = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 8);
  const uint64_t hlen = hj.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(hj.data(), static_cast<std::streamsize>(hj.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("write failed: " + path);
}

nlohmann::json load_checkpoint(const std::string& path, ParamStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + hlen > bytes.size()) throw CheckpointError("truncated header: " + path);
  nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));
  const size_t payload_base = 16 + hlen;

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const size_t offset = entry.at("offset");
    Tensor& t = params.add(name, shape);
    const size_t need = payload_base + offset + 4 * t.data.size();
    if (need > bytes.size()) throw CheckpointError("truncated payload for '" + name + "'");
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(bytes.data()) + payload_base + offset;
    for (size_t i = 0; i < t.data.size(); ++i) {
      const uint32_t bits = get_u32(p + 4 * i);
      float f;
      std::memcpy(&f, &bits, 4);
      t.data[i] = static_cast<Scalar>(f);
    }
  }
  return header;
}

}  // namespace modnet
