#include "caveseg/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace caveseg {

namespace {

using nlohmann::json;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is)
    throw std::runtime_error("checkpoint " + path + ": truncated file");
  return v;
}

void read_bytes(std::istream& is, char* dst, std::size_t n,
                const std::string& path) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (!is)
    throw std::runtime_error("checkpoint " + path + ": truncated file");
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) {
  json j;
  j["patch_size"] = cfg.patch_size;
  j["embed_dim"] = cfg.embed_dim;
  j["depths"] = cfg.depths;
  j["num_heads"] = cfg.num_heads;
  j["window_size"] = cfg.window_size;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["ppm_scales"] = cfg.ppm_scales;
  j["fusion_channels"] = cfg.fusion_channels;
  j["num_classes"] = cfg.num_classes;
  j["input_h"] = cfg.input_h;
  j["input_w"] = cfg.input_w;
  j["norm_eps"] = cfg.norm_eps;
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("config JSON parse error: ") + e.what());
  }
  ModelConfig cfg;
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.depths = j.value("depths", cfg.depths);
  cfg.num_heads = j.value("num_heads", cfg.num_heads);
  cfg.window_size = j.value("window_size", cfg.window_size);
  cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
  cfg.ppm_scales = j.value("ppm_scales", cfg.ppm_scales);
  cfg.fusion_channels = j.value("fusion_channels", cfg.fusion_channels);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  cfg.input_h = j.value("input_h", cfg.input_h);
  cfg.input_w = j.value("input_w", cfg.input_w);
  cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
  return cfg;
}

void save_checkpoint(CaveSegModel& model, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os)
      throw std::runtime_error("checkpoint " + path + ": cannot open for writing");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_raw(os, kCheckpointVersion);
    const std::string cfg = config_to_json(model.config());
    write_raw(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    auto params = model.parameters();
    write_raw(os, static_cast<std::uint32_t>(params.size()));
    for (auto& [name, t] : params) {
      write_raw(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_raw(os, static_cast<std::uint8_t>(t.rank()));
      for (std::int64_t d : t.shape()) write_raw(os, d);
      os.write(reinterpret_cast<const char*>(t.values().data()),
               static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    if (!os)
      throw std::runtime_error("checkpoint " + path + ": write failed");
  }
  fs::rename(tmp, target);
}

CaveSegModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint " + path + ": cannot open");

  char magic[sizeof(kCheckpointMagic)];
  read_bytes(is, magic, sizeof(magic), path);
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint " + path +
                             ": bad magic, not a checkpoint file");
  const auto version = read_raw<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                             std::to_string(version) + " (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  const auto cfg_len = read_raw<std::uint32_t>(is, path);
  std::string cfg_text(cfg_len, '\0');
  read_bytes(is, cfg_text.data(), cfg_len, path);

  CaveSegModel model(config_from_json(cfg_text));
  std::unordered_map<std::string, Tensor*> by_name;
  model.visit_parameters([&](const std::string& name, Tensor& t) {
    by_name.emplace(name, &t);
  });

  const auto count = read_raw<std::uint32_t>(is, path);
  if (count != by_name.size())
    throw std::runtime_error("checkpoint " + path + ": holds " +
                             std::to_string(count) + " tensors, model expects " +
                             std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_raw<std::uint16_t>(is, path);
    std::string name(name_len, '\0');
    read_bytes(is, name.data(), name_len, path);
    const auto rank = read_raw<std::uint8_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = read_raw<std::int64_t>(is, path);

    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint " + path +
                               ": unknown or duplicate tensor \"" + name + "\"");
    Tensor& t = *it->second;
    if (t.shape() != shape)
      throw std::runtime_error("checkpoint " + path + ": tensor \"" + name +
                               "\" has shape " + shape_str(shape) +
                               ", model expects " + shape_str(t.shape()));
    read_bytes(is, reinterpret_cast<char*>(t.mutable_values().data()),
               t.values().size() * sizeof(double), path);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw std::runtime_error("checkpoint " + path + ": missing tensors");
  return model;
}

}  // namespace caveseg
