#pragma once

// Parameter checkpoint: "ACTRM-CKPT", u16 version, ModelConfig, float32
// tensors in declaration order (little-endian), trailing CRC32.

#include <string>
#include <vector>

#include "actrm/binary_io.hpp"
#include "actrm/model.hpp"

namespace actrm {

inline constexpr std::string_view kCheckpointMagic = "ACTRM-CKPT";
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> checkpoint_bytes(const Parameters<float>& p) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  p.config.serialize(w);
  for (const auto& t : p.layout.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) w.f32(p.data[t.offset + i]);
  w.append_crc();
  return w.bytes();
}

inline Parameters<float> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_framed(bytes, kCheckpointMagic, kCheckpointVersion, "checkpoint");
  const ModelConfig config = ModelConfig::deserialize(r);
  config.validate();
  Parameters<float> p{config, ParamLayout::build(config), {}};
  p.data.assign(p.layout.total, 0.0f);
  for (const auto& t : p.layout.tensors)
    for (std::size_t i = 0; i < t.size(); ++i) p.data[t.offset + i] = r.f32();
  if (r.remaining() != 0) throw IoError("checkpoint: trailing bytes after tensors");
  return p;
}

inline void save_checkpoint(const Parameters<float>& p, const std::string& path) {
  write_file_bytes(path, checkpoint_bytes(p));
}

inline Parameters<float> load_checkpoint(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return parse_checkpoint(bytes);
}

}  // namespace actrm
