// Model checkpoint file format:
//   "KXRC" | u32 version | u64 header_len | header JSON | u32 blob_count |
//   per blob: u64 value_count | raw float32 values
// The header carries the architecture, so a checkpoint rebuilds its own nets.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "kxr/nn.hpp"

namespace kxr::nn {

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  json header;
  std::vector<std::vector<float>> blobs;
};

namespace detail {
template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T take(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IntegrityError("checkpoint: truncated while reading " + what);
  return v;
}
}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const json& header,
                             const std::vector<Param*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write("KXRC", 4);
  detail::put<uint32_t>(out, kCheckpointVersion);
  const std::string h = header.dump();
  detail::put<uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::put<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const Param* p : params) {
    detail::put<uint64_t>(out, p->value.size());
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "KXRC")
    throw IntegrityError("checkpoint: bad magic in " + path.string());
  const auto version = detail::take<uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw IntegrityError("checkpoint: unsupported version " + std::to_string(version));
  const auto hlen = detail::take<uint64_t>(in, "header length");
  if (hlen > (1ull << 24)) throw IntegrityError("checkpoint: header length implausible");
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IntegrityError("checkpoint: truncated header");
  Checkpoint ck;
  try {
    ck.header = json::parse(h);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const auto count = detail::take<uint32_t>(in, "blob count");
  ck.blobs.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    const auto n = detail::take<uint64_t>(in, "blob size");
    if (n > (1ull << 28)) throw IntegrityError("checkpoint: blob size implausible");
    ck.blobs[i].resize(n);
    in.read(reinterpret_cast<char*>(ck.blobs[i].data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw IntegrityError("checkpoint: truncated parameter data");
  }
  return ck;
}

// Copies stored blobs into live parameters; any shape disagreement means the
// checkpoint does not match the net it is being loaded into.
inline void apply_blobs(const std::vector<Param*>& params, const std::vector<std::vector<float>>& blobs) {
  if (params.size() != blobs.size())
    throw IntegrityError("checkpoint: parameter count mismatch (file has " +
                         std::to_string(blobs.size()) + ", net expects " +
                         std::to_string(params.size()) + ")");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.size() != blobs[i].size())
      throw IntegrityError("checkpoint: size mismatch for parameter " + std::to_string(i));
    params[i]->value = blobs[i];
  }
}

}  // namespace kxr::nn
