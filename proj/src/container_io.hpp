#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace chanpred::detail {

using json = nlohmann::ordered_json;

// Binary container shared by datasets, checkpoints and regimen state:
// 8-byte magic, u64 header length, JSON header, u64 count, f64 payload
// (little-endian host assumed).
inline void write_container(const std::string& path, const std::string& magic,
                            const json& header, std::span<const double> payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  std::string m = magic;
  m.resize(8, '\0');
  out.write(m.data(), 8);
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  const std::uint64_t count = payload.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

struct Container {
  json header;
  std::vector<double> payload;
};

inline Container read_container(const std::string& path, const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char m[8] = {};
  in.read(m, 8);
  std::string want = magic;
  want.resize(8, '\0');
  if (!in || std::string(m, 8) != want) {
    throw std::runtime_error("bad magic in " + path + " (expected " + magic + ")");
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  Container c;
  c.payload.resize(count);
  in.read(reinterpret_cast<char*>(c.payload.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("truncated container: " + path);
  c.header = json::parse(h);
  return c;
}

}  // namespace chanpred::detail
