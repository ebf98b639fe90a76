#include "morphtrack/checkpoint.hpp"

#include <cstring>
#include <map>
#include <stdexcept>

#include "morphtrack/io.hpp"

namespace morphtrack {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void save_checkpoint(const fs::path& dir, std::span<Parameter> params,
                     const ordered_json& config_echo) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "morphtrack-checkpoint-v1";
  manifest["dtype"] = "f64";
  manifest["byte_order"] = "little";
  manifest["config"] = config_echo;
  manifest["params"] = ordered_json::array();

  std::string blob;
  std::size_t offset = 0;
  for (const Parameter& p : params) {
    ordered_json jp;
    jp["name"] = p.name;
    jp["shape"] = p.tensor.shape();
    jp["count"] = p.tensor.numel();
    jp["offset_bytes"] = offset;
    jp["softplus_constrained"] = p.softplus_constrained;
    manifest["params"].push_back(jp);
    const auto data = p.tensor.data();
    blob.append(reinterpret_cast<const char*>(data.data()),
                data.size() * sizeof(double));
    offset += data.size() * sizeof(double);
  }
  write_file_atomic(dir / "params.bin", blob);
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

bool is_checkpoint_dir(const fs::path& dir) {
  return fs::exists(dir / "manifest.json") && fs::exists(dir / "params.bin");
}

ordered_json load_checkpoint_manifest(const fs::path& dir) {
  if (!is_checkpoint_dir(dir))
    throw std::runtime_error("checkpoint: " + dir.string() +
                             " is not a checkpoint directory");
  ordered_json manifest = ordered_json::parse(read_file(dir / "manifest.json"));
  if (manifest.at("format") != "morphtrack-checkpoint-v1")
    throw std::runtime_error("checkpoint: unknown manifest format");
  return manifest;
}

void load_checkpoint_params(const fs::path& dir, std::span<Parameter> params,
                            const std::vector<std::string>& required_prefixes) {
  const ordered_json manifest = load_checkpoint_manifest(dir);
  const std::string blob = read_file(dir / "params.bin");

  struct Entry {
    Shape shape;
    std::size_t offset = 0, count = 0;
  };
  std::map<std::string, Entry> entries;
  for (const auto& jp : manifest.at("params")) {
    Entry e;
    e.shape = jp.at("shape").get<Shape>();
    e.offset = jp.at("offset_bytes");
    e.count = jp.at("count");
    if (e.offset + e.count * sizeof(double) > blob.size())
      throw std::runtime_error("checkpoint: params.bin shorter than manifest");
    entries[jp.at("name").get<std::string>()] = e;
  }

  for (Parameter& p : params) {
    const auto it = entries.find(p.name);
    if (it == entries.end()) {
      for (const std::string& prefix : required_prefixes)
        if (p.name.rfind(prefix, 0) == 0)
          throw std::runtime_error("checkpoint: required parameter " + p.name +
                                   " missing from " + dir.string());
      continue;
    }
    if (it->second.shape != p.tensor.shape())
      throw std::runtime_error(
          "checkpoint: shape mismatch for " + p.name + ": stored " +
          shape_to_string(it->second.shape) + ", model expects " +
          shape_to_string(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    std::memcpy(dst.data(), blob.data() + it->second.offset,
                it->second.count * sizeof(double));
  }
}

}  // namespace morphtrack
