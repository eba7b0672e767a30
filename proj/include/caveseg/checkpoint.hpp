#pragma once

#include <string>

#include "caveseg/model.hpp"

namespace caveseg {

// Container layout (all little-endian): 8-byte magic "CAVESEG\0", u32 format
// version, u32 config length + config JSON, u32 tensor count, then per tensor
// u16 name length + name, u8 rank, i64 dims, raw f64 values. Round trips are
// bit-exact.
inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'V', 'E',
                                             'S', 'E', 'G', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

// Writes to a temp file in the target directory and renames into place, so a
// failed save never leaves a partial checkpoint.
void save_checkpoint(CaveSegModel& model, const std::string& path);
CaveSegModel load_checkpoint(const std::string& path);

}  // namespace caveseg
