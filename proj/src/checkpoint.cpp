#include "dinp/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dinp {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

using json = nlohmann::json;

namespace {

constexpr const char* kGroups[] = {"live", "ema", "adam_m", "adam_v"};

const ParamMap<float>& group(const Checkpoint& c, int g) {
  switch (g) {
    case 0: return c.live;
    case 1: return c.ema;
    case 2: return c.adam_m;
    default: return c.adam_v;
  }
}

ParamMap<float>& group(Checkpoint& c, int g) { return const_cast<ParamMap<float>&>(group(std::as_const(c), g)); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
  return v;
}

constexpr std::size_t kHeaderSize = sizeof(kCheckpointMagic) + 4 + 8;

// Checks magic, version and checksum; returns the parsed manifest and the
// payload offset.
std::pair<json, std::size_t> open_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize + 4) throw CheckpointError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const auto stored_crc = static_cast<std::uint32_t>(get_le(bytes, bytes.size() - 4, 4));
  if (crc32_of(bytes.first(bytes.size() - 4)) != stored_crc)
    throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, sizeof(kCheckpointMagic), 4));
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t manifest_len = get_le(bytes, sizeof(kCheckpointMagic) + 4, 8);
  if (manifest_len > bytes.size() - kHeaderSize - 4) throw CheckpointError("checkpoint manifest length out of range");
  const char* begin = reinterpret_cast<const char*>(bytes.data() + kHeaderSize);
  json manifest;
  try {
    manifest = json::parse(begin, begin + manifest_len);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint manifest unreadable: ") + e.what());
  }
  return {std::move(manifest), kHeaderSize + static_cast<std::size_t>(manifest_len)};
}

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (int g = 0; g < 4; ++g)
    for (const auto& [name, t] : group(ckpt, g)) {
      tensors.push_back({{"group", kGroups[g]}, {"name", name}, {"shape", t.shape()}, {"offset", offset}});
      offset += t.size() * sizeof(float);
    }
  const json manifest{{"format_version", kCheckpointVersion},
                      {"step", ckpt.step},
                      {"config", ckpt.config},
                      {"metrics", ckpt.metrics},
                      {"rng_state", ckpt.rng_state},
                      {"payload_bytes", offset},
                      {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + text.size() + offset + 4);
  out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (int g = 0; g < 4; ++g)
    for (const auto& [name, t] : group(ckpt, g)) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
      out.insert(out.end(), p, p + t.size() * sizeof(float));
    }
  put_u32(out, crc32_of(out));
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  auto [manifest, payload] = open_container(bytes);
  const std::size_t payload_end = bytes.size() - 4;
  Checkpoint c;
  try {
    c.step = manifest.at("step").get<std::int64_t>();
    c.config = manifest.at("config");
    c.metrics = manifest.at("metrics");
    c.rng_state = manifest.at("rng_state").get<std::string>();
    for (const auto& entry : manifest.at("tensors")) {
      const std::string g = entry.at("group").get<std::string>();
      int gi = -1;
      for (int k = 0; k < 4; ++k)
        if (g == kGroups[k]) gi = k;
      if (gi < 0) throw CheckpointError("unknown tensor group '" + g + "'");
      Shape shape = entry.at("shape").get<Shape>();
      const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = static_cast<std::size_t>(shape_numel(shape));
      if (payload + off + count * sizeof(float) > payload_end)
        throw CheckpointError("tensor '" + entry.at("name").get<std::string>() + "' runs past the payload");
      std::vector<float> data(count);
      std::memcpy(data.data(), bytes.data() + payload + off, count * sizeof(float));
      group(c, gi).emplace(entry.at("name").get<std::string>(), Tensor<float>(std::move(shape), std::move(data)));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  // Write beside the target and rename so readers never see a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

json read_checkpoint_manifest(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  try {
    return open_container(bytes).first;
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace dinp
