#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "morphtrack/morphnet.hpp"

namespace morphtrack {

/// Checkpoint directory layout: manifest.json (names, shapes, dtype, byte
/// offsets, config echo) plus params.bin (little-endian f64, row-major,
/// concatenated in manifest order).
void save_checkpoint(const std::filesystem::path& dir,
                     std::span<Parameter> params,
                     const nlohmann::ordered_json& config_echo);

bool is_checkpoint_dir(const std::filesystem::path& dir);

nlohmann::ordered_json load_checkpoint_manifest(const std::filesystem::path& dir);

/// Loads values into every parameter whose name appears in the checkpoint.
/// Parameters whose name starts with one of `required_prefixes` must be
/// present with the exact shape; anything else missing is left at its
/// current value. Throws std::runtime_error ("checkpoint: ...") on mismatch.
void load_checkpoint_params(const std::filesystem::path& dir,
                            std::span<Parameter> params,
                            const std::vector<std::string>& required_prefixes);

}  // namespace morphtrack
